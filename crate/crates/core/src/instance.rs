//! Problem instances: clustered random generation, the bundled reference
//! instances, JSON persistence and integer-grid quantization.

use crate::geometry::{GeometryError, Metric, NoFlyZone, Point};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DEPOT: Point = Point::new(0.5, 0.5);
pub const DEFAULT_ZONE: NoFlyZone = NoFlyZone::new(Point::new(0.3, 0.3), 0.1);

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("unknown fixture '{0}' (expected c10, c20 or c50)")]
    UnknownFixture(String),
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("unsupported instance schema version {0} (expected {SCHEMA_VERSION})")]
    Version(u64),
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Customer {
    pub position: Point,
    pub demand: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub depot: Point,
    pub customers: Vec<Customer>,
    pub zones: Vec<NoFlyZone>,
    pub capacity: u32,
}

impl Instance {
    pub fn n_customers(&self) -> usize {
        self.customers.len()
    }

    /// Number of nodes including the depot (node 0).
    pub fn n_nodes(&self) -> usize {
        self.customers.len() + 1
    }

    /// Position of node `i` where 0 is the depot and `i ≥ 1` is customer `i`.
    pub fn node(&self, i: usize) -> Point {
        if i == 0 {
            self.depot
        } else {
            self.customers[i - 1].position
        }
    }

    /// Demand of node `i` (the depot has none).
    pub fn demand(&self, i: usize) -> u32 {
        if i == 0 {
            0
        } else {
            self.customers[i - 1].demand
        }
    }

    pub fn demands(&self) -> Vec<u32> {
        (0..self.n_nodes()).map(|i| self.demand(i)).collect()
    }

    pub fn total_demand(&self) -> u32 {
        self.customers.iter().map(|c| c.demand).sum()
    }

    pub fn with_capacity(mut self, capacity: u32) -> Self {
        self.capacity = capacity;
        self
    }

    /// Length of a node-index sequence under `metric`.
    pub fn sequence_length(&self, seq: &[usize], metric: Metric) -> Result<f64, GeometryError> {
        seq.windows(2).try_fold(0.0, |acc, w| {
            Ok(acc + metric.leg(self.node(w[0]), self.node(w[1]), &self.zones)?)
        })
    }

    /// Checks the structural invariants every solver relies on.
    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.customers.is_empty() {
            return Err(InstanceError::Invalid("no customers".into()));
        }
        if self.capacity == 0 {
            return Err(InstanceError::Invalid("capacity must be positive".into()));
        }
        for (i, z) in self.zones.iter().enumerate() {
            if !(z.radius > 0.0) || !z.center.is_finite() {
                return Err(InstanceError::Invalid(format!("zone {i} is degenerate")));
            }
            for (j, w) in self.zones.iter().enumerate().skip(i + 1) {
                if !z.is_disjoint_from(w) {
                    return Err(InstanceError::Invalid(format!("zones {i} and {j} overlap")));
                }
            }
        }
        for i in 0..self.n_nodes() {
            let p = self.node(i);
            if !p.is_finite() {
                return Err(InstanceError::Invalid(format!("node {i} has non-finite coordinates")));
            }
            if self.zones.iter().any(|z| z.contains_strictly(p)) {
                return Err(InstanceError::Invalid(format!("node {i} lies inside a no-fly zone")));
            }
            if self.demand(i) > self.capacity {
                return Err(InstanceError::Invalid(format!(
                    "customer {i} demand {} exceeds capacity {}",
                    self.demand(i),
                    self.capacity
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_customers: usize,
    pub cluster_fraction: f64,
    pub n_clusters: usize,
    pub cluster_sigma: f64,
    /// Inclusive demand interval.
    pub demand_range: (u32, u32),
    pub zone_set: Vec<NoFlyZone>,
    pub capacity: u32,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_customers: 10,
            cluster_fraction: 0.6,
            n_clusters: 3,
            cluster_sigma: 0.05,
            demand_range: (1, 9),
            zone_set: vec![DEFAULT_ZONE],
            capacity: 30,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn new(n_customers: usize, capacity: u32, seed: u64) -> Self {
        Self {
            n_customers,
            capacity,
            seed,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), InstanceError> {
        let bad = |m: &str| Err(InstanceError::Config(m.to_string()));
        if self.n_customers < 1 {
            return bad("n_customers must be at least 1");
        }
        let (lo, hi) = self.demand_range;
        if lo > hi {
            return bad("empty demand range");
        }
        if hi > 9 {
            return bad("demand range must lie within [0, 9]");
        }
        if hi > self.capacity {
            return bad("maximum demand exceeds capacity");
        }
        if !(0.0..=1.0).contains(&self.cluster_fraction) {
            return bad("cluster_fraction must lie in [0, 1]");
        }
        if self.n_clusters == 0 && self.clustered_count() > 0 {
            return bad("clustered customers requested but n_clusters is 0");
        }
        if !(self.cluster_sigma >= 0.0) {
            return bad("cluster_sigma must be non-negative");
        }
        Ok(())
    }

    pub fn clustered_count(&self) -> usize {
        (self.cluster_fraction * self.n_customers as f64).floor() as usize
    }
}

/// Side information recorded while generating, used by tests and plots.
#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub cluster_centers: Vec<Point>,
    /// Cluster index of each customer, `None` for uniform draws.
    pub cluster_of: Vec<Option<usize>>,
}

pub fn generate_instance(cfg: &GeneratorConfig) -> Result<Instance, InstanceError> {
    generate_instance_traced(cfg).map(|(inst, _)| inst)
}

pub fn generate_instance_traced(cfg: &GeneratorConfig) -> Result<(Instance, GenerationTrace), InstanceError> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Point> = (0..cfg.n_clusters)
        .map(|_| Point::new(rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)))
        .collect();
    let noise = Normal::new(0.0, cfg.cluster_sigma).map_err(|e| InstanceError::Config(e.to_string()))?;
    let admissible = |p: Point| p.in_unit_square() && !cfg.zone_set.iter().any(|z| z.contains_strictly(p));

    let n_clustered = cfg.clustered_count();
    let mut customers = Vec::with_capacity(cfg.n_customers);
    let mut cluster_of = Vec::with_capacity(cfg.n_customers);
    for i in 0..cfg.n_customers {
        let cluster = (i < n_clustered).then(|| rng.random_range(0..cfg.n_clusters));
        let position = loop {
            let p = match cluster {
                Some(k) => Point::new(
                    centers[k].x + noise.sample(&mut rng),
                    centers[k].y + noise.sample(&mut rng),
                ),
                None => Point::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0)),
            };
            if admissible(p) {
                break p;
            }
        };
        let demand = rng.random_range(cfg.demand_range.0..=cfg.demand_range.1);
        customers.push(Customer { position, demand });
        cluster_of.push(cluster);
    }

    let inst = Instance {
        depot: DEFAULT_DEPOT,
        customers,
        zones: cfg.zone_set.clone(),
        capacity: cfg.capacity,
    };
    Ok((
        inst,
        GenerationTrace {
            cluster_centers: centers,
            cluster_of,
        },
    ))
}

/// `count` instances with seeds derived from `base_seed`.
pub fn generate_dataset(
    template: &GeneratorConfig,
    count: usize,
    base_seed: u64,
) -> Result<Vec<Instance>, InstanceError> {
    (0..count)
        .map(|k| {
            let cfg = GeneratorConfig {
                seed: crate::derive_seed(base_seed, &[k as u64]),
                ..template.clone()
            };
            generate_instance(&cfg)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSON schema v1

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    version: u64,
    depot: [f64; 2],
    capacity: u32,
    zones: Vec<ZoneDoc>,
    customers: Vec<CustomerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ZoneDoc {
    center: [f64; 2],
    radius: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CustomerDoc {
    pos: [f64; 2],
    demand: u32,
}

impl From<&Instance> for InstanceDoc {
    fn from(inst: &Instance) -> Self {
        InstanceDoc {
            version: SCHEMA_VERSION as u64,
            depot: [inst.depot.x, inst.depot.y],
            capacity: inst.capacity,
            zones: inst
                .zones
                .iter()
                .map(|z| ZoneDoc {
                    center: [z.center.x, z.center.y],
                    radius: z.radius,
                })
                .collect(),
            customers: inst
                .customers
                .iter()
                .map(|c| CustomerDoc {
                    pos: [c.position.x, c.position.y],
                    demand: c.demand,
                })
                .collect(),
        }
    }
}

impl From<InstanceDoc> for Instance {
    fn from(doc: InstanceDoc) -> Self {
        Instance {
            depot: Point::new(doc.depot[0], doc.depot[1]),
            capacity: doc.capacity,
            zones: doc
                .zones
                .into_iter()
                .map(|z| NoFlyZone::new(Point::new(z.center[0], z.center[1]), z.radius))
                .collect(),
            customers: doc
                .customers
                .into_iter()
                .map(|c| Customer {
                    position: Point::new(c.pos[0], c.pos[1]),
                    demand: c.demand,
                })
                .collect(),
        }
    }
}

fn parse_error(e: serde_json::Error) -> InstanceError {
    InstanceError::Parse {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

pub fn instance_to_json(inst: &Instance) -> String {
    let mut s = serde_json::to_string_pretty(&InstanceDoc::from(inst)).expect("instance serialization cannot fail");
    s.push('\n');
    s
}

pub fn instance_from_json(text: &str) -> Result<Instance, InstanceError> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(InstanceError::Version(v)),
        None => {
            return Err(InstanceError::Parse {
                line: 1,
                column: 1,
                msg: "missing or non-integer field `version`".into(),
            })
        }
    }
    let doc: InstanceDoc = serde_json::from_str(text).map_err(parse_error)?;
    Ok(doc.into())
}

pub fn read_instance(path: impl AsRef<Path>) -> Result<Instance, InstanceError> {
    instance_from_json(&std::fs::read_to_string(path)?)
}

pub fn write_instance(inst: &Instance, path: impl AsRef<Path>) -> Result<(), InstanceError> {
    crate::write_atomic(path.as_ref(), instance_to_json(inst).as_bytes())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Bundled reference instances

pub const FIXTURE_NAMES: [&str; 3] = ["c10", "c20", "c50"];

pub fn fixture_json(name: &str) -> Result<&'static str, InstanceError> {
    match name {
        "c10" => Ok(include_str!("../../../fixtures/c10.json")),
        "c20" => Ok(include_str!("../../../fixtures/c20.json")),
        "c50" => Ok(include_str!("../../../fixtures/c50.json")),
        other => Err(InstanceError::UnknownFixture(other.to_string())),
    }
}

pub fn load_fixture(name: &str) -> Result<Instance, InstanceError> {
    instance_from_json(fixture_json(name)?)
}

// ---------------------------------------------------------------------------
// Integer grid

#[derive(Debug, Clone, PartialEq)]
pub struct GridInstance {
    pub factor: u32,
    pub depot: (i64, i64),
    pub customers: Vec<((i64, i64), u32)>,
    pub zones: Vec<((i64, i64), i64)>,
    pub capacity: u32,
}

impl GridInstance {
    /// Back to the unit square: every coordinate divided by the factor.
    pub fn unscale(&self) -> Instance {
        let f = self.factor as f64;
        let pt = |(x, y): (i64, i64)| Point::new(x as f64 / f, y as f64 / f);
        Instance {
            depot: pt(self.depot),
            customers: self
                .customers
                .iter()
                .map(|&(p, demand)| Customer {
                    position: pt(p),
                    demand,
                })
                .collect(),
            zones: self
                .zones
                .iter()
                .map(|&(c, r)| NoFlyZone::new(pt(c), r as f64 / f))
                .collect(),
            capacity: self.capacity,
        }
    }

    /// Same instance on the integer grid itself (coordinates as floats).
    pub fn to_grid_instance(&self) -> Instance {
        let pt = |(x, y): (i64, i64)| Point::new(x as f64, y as f64);
        Instance {
            depot: pt(self.depot),
            customers: self
                .customers
                .iter()
                .map(|&(p, demand)| Customer {
                    position: pt(p),
                    demand,
                })
                .collect(),
            zones: self
                .zones
                .iter()
                .map(|&(c, r)| NoFlyZone::new(pt(c), r as f64))
                .collect(),
            capacity: self.capacity,
        }
    }
}

/// Scales coordinates by `factor` and rounds to the nearest integer, as needed
/// by integer-only external solvers. Demands are unchanged.
pub fn quantize_instance(inst: &Instance, factor: u32) -> GridInstance {
    let factor = factor.max(1);
    let f = factor as f64;
    let q = |v: f64| (v * f).round() as i64;
    let qp = |p: Point| (q(p.x), q(p.y));
    GridInstance {
        factor,
        depot: qp(inst.depot),
        customers: inst.customers.iter().map(|c| (qp(c.position), c.demand)).collect(),
        zones: inst.zones.iter().map(|z| (qp(z.center), q(z.radius))).collect(),
        capacity: inst.capacity,
    }
}
