//! Route validation, dataset evaluation and verification of the bundled
//! reference solutions.

use crate::baseline::{solve_baseline, BaselineError, BaselineKind};
use crate::decode::{beam_search, greedy_decode, sample_decode, BeamOptions, DecodeError, Solution};
use crate::geometry::{GeometryError, Metric};
use crate::instance::{load_fixture, Instance, InstanceError, FIXTURE_NAMES};
use crate::policy::Policy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ValidationError {
    CustomerUnserved { customer: usize },
    CustomerRepeated { customer: usize, tour: usize },
    OverCapacity { tour: usize, load: u32, capacity: u32 },
    NotDepotDelimited { tour: usize },
    UnknownNode { node: usize, tour: usize },
    LengthMismatch { declared: f64, recomputed: f64 },
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::CustomerUnserved { customer } => write!(f, "customer {customer} is not served"),
            Self::CustomerRepeated { customer, tour } => {
                write!(f, "customer {customer} visited again in tour {tour}")
            }
            Self::OverCapacity { tour, load, capacity } => {
                write!(f, "tour {tour} carries {load} > capacity {capacity}")
            }
            Self::NotDepotDelimited { tour } => write!(f, "tour {tour} does not start and end at the depot"),
            Self::UnknownNode { node, tour } => write!(f, "tour {tour} references unknown node {node}"),
            Self::LengthMismatch { declared, recomputed } => {
                write!(f, "declared length {declared} but the route measures {recomputed}")
            }
        }
    }
}

/// Relative tolerance on the declared route length.
pub const LENGTH_RTOL: f64 = 1e-9;

/// Checks a no-split solution: every customer with demand is served exactly
/// once, every tour starts and ends at the depot without touching it in
/// between, no tour exceeds the capacity, and the declared length matches the
/// detour length of the route. Zero-demand customers may be skipped.
pub fn validate_route(sol: &Solution, inst: &Instance) -> Result<(), Vec<ValidationError>> {
    validate_route_with(sol, inst, false)
}

/// As [`validate_route`]; with `split` a customer may be visited several
/// times and deliveries are read from the load traces.
pub fn validate_route_with(sol: &Solution, inst: &Instance, split: bool) -> Result<(), Vec<ValidationError>> {
    let n = inst.n_nodes();
    let mut errs = Vec::new();
    let mut delivered = vec![0u64; n];
    let mut visits = vec![0usize; n];
    for (t, tour) in sol.tours.iter().enumerate() {
        if tour.len() < 2 || tour[0] != 0 || tour[tour.len() - 1] != 0 || tour[1..tour.len() - 1].contains(&0) {
            errs.push(ValidationError::NotDepotDelimited { tour: t });
        }
        let trace = sol.loads.get(t);
        let mut load = 0u64;
        for (k, &v) in tour.iter().enumerate() {
            if v == 0 {
                continue;
            }
            if v >= n {
                errs.push(ValidationError::UnknownNode { node: v, tour: t });
                continue;
            }
            visits[v] += 1;
            let give = if split {
                match trace {
                    Some(tr) if tr.len() == tour.len() && k > 0 => tr[k].saturating_sub(tr[k - 1]) as u64,
                    _ => inst.demand(v) as u64,
                }
            } else {
                inst.demand(v) as u64
            };
            if visits[v] > 1 && !split {
                errs.push(ValidationError::CustomerRepeated { customer: v, tour: t });
            }
            delivered[v] += give;
            load += give;
        }
        if load > inst.capacity as u64 {
            errs.push(ValidationError::OverCapacity {
                tour: t,
                load: load.min(u32::MAX as u64) as u32,
                capacity: inst.capacity,
            });
        }
    }
    for c in 1..n {
        let demand = inst.demand(c) as u64;
        if demand == 0 {
            continue;
        }
        if visits[c] == 0 || (split && delivered[c] < demand) {
            errs.push(ValidationError::CustomerUnserved { customer: c });
        } else if split && delivered[c] > demand {
            errs.push(ValidationError::CustomerRepeated {
                customer: c,
                tour: sol.tours.len(),
            });
        }
    }
    if !errs.iter().any(|e| matches!(e, ValidationError::UnknownNode { .. })) {
        let recomputed = inst
            .sequence_length(&sol.sequence(), Metric::Detour)
            .unwrap_or(f64::NAN);
        let tol = LENGTH_RTOL * recomputed.abs().max(f64::MIN_POSITIVE);
        if !((sol.length - recomputed).abs() <= tol) {
            errs.push(ValidationError::LengthMismatch {
                declared: sol.length,
                recomputed,
            });
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("instance {index}: {source}")]
    Decode { index: usize, source: DecodeError },
    #[error("instance {index}: {source}")]
    Baseline { index: usize, source: BaselineError },
    #[error("instance {index}: invalid solution: {}", .errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid { index: usize, errors: Vec<ValidationError> },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Anything that maps an instance to a solution.
pub trait Solver: Sync {
    /// Label for the `solver` report column.
    fn name(&self) -> String;
    fn width(&self) -> Option<usize>;
    /// `index` is the position of `inst` in the dataset; stochastic solvers
    /// derive their per-instance seed from it.
    fn solve(&self, inst: &Instance, index: usize) -> Result<Solution, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoder {
    Greedy,
    Sample { seed: u64 },
    Beam(BeamOptions),
}

pub struct PolicySolver<'a> {
    pub policy: &'a Policy,
    pub decoder: Decoder,
}

impl Solver for PolicySolver<'_> {
    fn name(&self) -> String {
        match self.decoder {
            Decoder::Greedy => "greedy".into(),
            Decoder::Sample { .. } => "sample".into(),
            Decoder::Beam(_) => "beam".into(),
        }
    }

    fn width(&self) -> Option<usize> {
        match self.decoder {
            Decoder::Beam(o) => Some(o.width),
            _ => Some(1),
        }
    }

    fn solve(&self, inst: &Instance, index: usize) -> Result<Solution, EvalError> {
        let r = match self.decoder {
            Decoder::Greedy => greedy_decode(self.policy, inst),
            Decoder::Sample { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[index as u64]));
                sample_decode(self.policy, inst, &mut rng).map(|(s, _)| s)
            }
            Decoder::Beam(o) => beam_search(self.policy, inst, o),
        };
        r.map_err(|source| EvalError::Decode { index, source })
    }
}

pub struct BaselineSolver {
    pub kind: BaselineKind,
    pub seed: u64,
}

impl Solver for BaselineSolver {
    fn name(&self) -> String {
        self.kind.label().into()
    }

    fn width(&self) -> Option<usize> {
        None
    }

    fn solve(&self, inst: &Instance, index: usize) -> Result<Solution, EvalError> {
        let seed = crate::derive_seed(self.seed, &[index as u64]);
        solve_baseline(self.kind, inst, seed).map_err(|source| EvalError::Baseline { index, source })
    }
}

/// One aggregated row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub solver: String,
    pub width: Option<usize>,
    pub n: usize,
    pub capacity: u32,
    pub mean: f64,
    pub std: f64,
    pub time_s: f64,
    pub count: usize,
}

/// Per-instance results behind an [`EvalRow`].
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub row: EvalRow,
    pub lengths: Vec<f64>,
    pub solutions: Vec<Solution>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Solves every instance (in parallel), validates each solution and
/// aggregates lengths and per-instance solve time. Any invalid solution is an
/// error. `n` and `capacity` in the row come from the first instance.
pub fn evaluate(solver: &dyn Solver, instances: &[Instance]) -> Result<EvalOutcome, EvalError> {
    let results: Vec<Result<(Solution, f64), EvalError>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let t0 = Instant::now();
            let sol = solver.solve(inst, i)?;
            let dt = t0.elapsed().as_secs_f64();
            validate_route(&sol, inst).map_err(|errors| EvalError::Invalid { index: i, errors })?;
            Ok((sol, dt))
        })
        .collect();
    let mut solutions = Vec::with_capacity(results.len());
    let mut times = Vec::with_capacity(results.len());
    for r in results {
        let (s, t) = r?;
        solutions.push(s);
        times.push(t);
    }
    let lengths: Vec<f64> = solutions.iter().map(|s| s.length).collect();
    let (mean, std) = mean_std(&lengths);
    let first = instances.first();
    let row = EvalRow {
        solver: solver.name(),
        width: solver.width(),
        n: first.map_or(0, Instance::n_customers),
        capacity: first.map_or(0, |i| i.capacity),
        mean,
        std,
        time_s: if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        },
        count: lengths.len(),
    };
    Ok(EvalOutcome {
        row,
        lengths,
        solutions,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const CSV_HEADER: &str = "solver,width,n,capacity,mean,std,time_s,count";

impl EvalReport {
    /// CSV with a fixed column order. With `timing` off the time column is
    /// written as 0 so that repeated runs are byte-identical.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let width = r.width.map(|w| w.to_string()).unwrap_or_default();
            let t = if timing { r.time_s } else { 0.0 };
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
                r.solver, width, r.n, r.capacity, r.mean, r.std, t, r.count
            ));
        }
        out
    }

    /// Aligned plain-text table preceded by a hardware line.
    pub fn to_table(&self, timing: bool) -> String {
        let header = ["solver", "width", "n", "capacity", "mean", "std", "time(s)", "count"];
        let mut rows: Vec<[String; 8]> = vec![header.map(String::from)];
        for r in &self.rows {
            rows.push([
                r.solver.clone(),
                r.width.map(|w| w.to_string()).unwrap_or_else(|| "-".into()),
                r.n.to_string(),
                r.capacity.to_string(),
                format!("{:.4}", r.mean),
                format!("{:.4}", r.std),
                if timing { format!("{:.4}", r.time_s) } else { "-".into() },
                r.count.to_string(),
            ]);
        }
        let mut widths = [0usize; 8];
        for row in &rows {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = format!("# {}\n", hardware_line());
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Host description for report headers.
pub fn hardware_line() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {}, {} hardware threads, {} rayon threads",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads,
        rayon::current_num_threads()
    )
}

// ---------------------------------------------------------------------------
// Reference solutions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSolution {
    pub instance: String,
    pub capacity: u32,
    pub printed_length: f64,
    pub tours: Vec<Vec<usize>>,
    pub loads: Vec<Vec<u32>>,
}

pub fn fixture_solution(name: &str) -> Result<FixtureSolution, InstanceError> {
    let text = match name {
        "c10" => include_str!("../../../fixtures/c10_solution.json"),
        "c20" => include_str!("../../../fixtures/c20_solution.json"),
        "c50" => include_str!("../../../fixtures/c50_solution.json"),
        other => return Err(InstanceError::UnknownFixture(other.to_string())),
    };
    serde_json::from_str(text).map_err(|e| InstanceError::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureCheck {
    pub name: String,
    pub printed: f64,
    pub detour: f64,
    pub straight: f64,
    pub rel_detour: f64,
    pub rel_straight: f64,
    /// Recomputed cumulative loads equal the recorded ones.
    pub loads_match: bool,
    /// Every customer served once, in full, within capacity.
    pub no_split_ok: bool,
    pub violations: Vec<ValidationError>,
}

impl FixtureCheck {
    pub fn best_rel(&self) -> f64 {
        self.rel_detour.min(self.rel_straight)
    }

    pub fn best_metric(&self) -> Metric {
        if self.rel_detour <= self.rel_straight {
            Metric::Detour
        } else {
            Metric::Straight
        }
    }

    pub fn within(&self, rel: f64) -> bool {
        self.best_rel() <= rel
    }
}

pub fn check_fixture(name: &str) -> Result<FixtureCheck, EvalError> {
    let fx = fixture_solution(name)?;
    let inst = load_fixture(&fx.instance)?.with_capacity(fx.capacity);
    let mut seq = vec![0];
    for t in &fx.tours {
        seq.extend_from_slice(&t[1..]);
    }
    let detour = inst.sequence_length(&seq, Metric::Detour)?;
    let straight = inst.sequence_length(&seq, Metric::Straight)?;
    let rebuilt = Solution::from_sequence(&inst, &seq, false, "reference", None)?;
    let recorded = Solution {
        length: detour,
        tours: fx.tours.clone(),
        loads: fx.loads.clone(),
        decoder: "reference".into(),
        width: None,
    };
    let violations = validate_route(&recorded, &inst).err().unwrap_or_default();
    Ok(FixtureCheck {
        name: name.to_string(),
        printed: fx.printed_length,
        detour,
        straight,
        rel_detour: (detour - fx.printed_length).abs() / fx.printed_length,
        rel_straight: (straight - fx.printed_length).abs() / fx.printed_length,
        loads_match: rebuilt.tours == fx.tours && rebuilt.loads == fx.loads,
        no_split_ok: violations.is_empty(),
        violations,
    })
}

/// Recomputes each bundled reference solution under both metrics and checks
/// its load traces.
pub fn verify_fixture_solutions() -> Result<Vec<FixtureCheck>, EvalError> {
    FIXTURE_NAMES.iter().map(|n| check_fixture(n)).collect()
}

pub fn render_fixture_report(checks: &[FixtureCheck]) -> String {
    let mut out = String::from("instance  printed  detour    (rel)     straight  (rel)     loads  feasible\n");
    for c in checks {
        out.push_str(&format!(
            "{:<8}  {:>7.2}  {:>8.4}  {:>7.2}%  {:>8.4}  {:>7.2}%  {:<5}  {}\n",
            c.name,
            c.printed,
            c.detour,
            100.0 * c.rel_detour,
            c.straight,
            100.0 * c.rel_straight,
            if c.loads_match { "ok" } else { "FAIL" },
            if c.no_split_ok { "ok" } else { "FAIL" },
        ));
    }
    out
}
