//! `skyroute` command line: generate, train, solve, eval, verify and plot.
//!
//! Exit codes: 0 on success, 1 when a solution fails validation or a command
//! fails at run time, 2 on usage errors.

pub mod svg;

use crate::baseline::BaselineKind;
use crate::decode::{BeamOptions, BeamSelect, Solution};
use crate::derive_seed;
use crate::eval::{
    evaluate, render_fixture_report, validate_route_with, verify_fixture_solutions, BaselineSolver, Decoder,
    EvalReport, PolicySolver, Solver,
};
use crate::geometry::Metric;
use crate::instance::{generate_dataset, instance_to_json, load_fixture, read_instance, GeneratorConfig, Instance};
use crate::policy::{Policy, PolicyConfig};
use crate::train::{read_checkpoint, train, TrainConfig, TrainLog, TrainOutputs};
use crate::write_atomic;
use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "skyroute", version, about = "UAV delivery routing around no-fly zones")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Greedy,
    Sample,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Nn,
    Savings,
    Brute,
}

impl From<BaselineArg> for BaselineKind {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Nn => BaselineKind::NearestNeighbor,
            BaselineArg::Savings => BaselineKind::Savings2opt,
            BaselineArg::Brute => BaselineKind::BruteForce,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Detour,
    Straight,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Detour => Metric::Detour,
            MetricArg::Straight => Metric::Straight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "table1-desk")]
    Table1Desk,
    #[value(name = "table1-paper")]
    Table1Paper,
    #[value(name = "fig6")]
    Fig6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Length,
    Logprob,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate random instances.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 30)]
        capacity: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of instances; more than one writes `inst_XXXX.json` files into `--out`.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy (or every configuration of a preset).
    Train {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Customer count; with a preset, restricts the grid to this size.
        #[arg(long)]
        n: Option<usize>,
        /// Capacity; with a preset, restricts the grid to this capacity.
        #[arg(long)]
        capacity: Option<u32>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        log_every: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MetricArg::Detour)]
        metric: MetricArg,
        #[arg(long)]
        inner_softmax: bool,
        #[arg(long)]
        split_delivery: bool,
        #[arg(long)]
        reuse_train_set: bool,
        /// Disable gradient-norm clipping.
        #[arg(long)]
        no_clip: bool,
        /// Continue from a checkpoint that carries optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Omit optimizer state from the written checkpoint.
        #[arg(long)]
        slim: bool,
        /// Checkpoint path, or output directory with a preset.
        #[arg(long)]
        out: PathBuf,
        /// Log path (single run); defaults to `<out stem>_log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Record wall-clock seconds in the log; `off` writes zeros.
        #[arg(long, value_enum, default_value_t = Switch::On)]
        timing: Switch,
    },
    /// Solve one instance with a trained policy or a baseline.
    Solve {
        #[arg(long, conflicts_with = "fixture")]
        instance: Option<PathBuf>,
        /// Bundled instance: c10, c20 or c50.
        #[arg(long)]
        fixture: Option<String>,
        #[arg(long)]
        capacity: Option<u32>,
        #[arg(long, value_enum, default_value_t = DecoderArg::Beam)]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 10)]
        width: usize,
        #[arg(long, conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_guard_beam: bool,
        #[arg(long, value_enum, default_value_t = SelectArg::Length)]
        select: SelectArg,
        #[arg(long)]
        split_delivery: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also render the route map.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Evaluate solvers on generated datasets.
    Eval {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Directory with `n{n}_cap{c}.json` checkpoints for presets.
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        capacity: Option<u32>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = DecoderArg::Beam)]
        decoder: DecoderArg,
        /// Beam width; repeat for several.
        #[arg(long)]
        width: Vec<usize>,
        #[arg(long, value_enum)]
        baseline: Vec<BaselineArg>,
        #[arg(long)]
        no_guard_beam: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        timing: Switch,
    },
    /// Validate a solution, or report on the bundled reference solutions.
    Verify {
        #[arg(long, requires = "solution_source")]
        solution: Option<PathBuf>,
        #[arg(long, group = "solution_source")]
        instance: Option<PathBuf>,
        #[arg(long, group = "solution_source")]
        fixture: Option<String>,
        #[arg(long)]
        capacity: Option<u32>,
        #[arg(long)]
        split_delivery: bool,
    },
    /// Render a route map or training curves as SVG.
    Plot {
        #[arg(long, requires = "plot_instance")]
        solution: Option<PathBuf>,
        #[arg(long, group = "plot_instance")]
        instance: Option<PathBuf>,
        #[arg(long, group = "plot_instance")]
        fixture: Option<String>,
        #[arg(long)]
        capacity: Option<u32>,
        /// Training log CSV; repeat to overlay curves.
        #[arg(long)]
        log: Vec<PathBuf>,
        /// `fig6`: one convergence plot per size from the logs in `--checkpoints`.
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, default_value = "checkpoints")]
        checkpoints: PathBuf,
        /// Output file, or directory for a preset.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Invalid(_) | Self::Runtime(_) => 1,
        }
    }
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Training and evaluation grid of a preset.
#[derive(Debug, Clone)]
pub struct Preset {
    pub sizes: Vec<usize>,
    pub capacities: Vec<u32>,
    pub widths: Vec<usize>,
    pub eval_count: usize,
    pub embed_dim: usize,
    pub learning_rate: f64,
    steps: fn(usize) -> u64,
}

impl Preset {
    pub fn get(p: PresetArg) -> Self {
        match p {
            PresetArg::Table1Desk | PresetArg::Fig6 => Self {
                sizes: vec![10, 20, 50],
                capacities: vec![30, 40, 50],
                widths: vec![1, 5, 10],
                eval_count: 1000,
                embed_dim: DESK_WIDTH,
                learning_rate: DESK_LR,
                steps: |n| match n {
                    0..=10 => 10_000,
                    11..=20 => 2_000,
                    _ => 500,
                },
            },
            PresetArg::Table1Paper => Self {
                sizes: vec![10, 20, 50],
                capacities: vec![30, 40, 50],
                widths: vec![1, 5, 10],
                eval_count: 1000,
                embed_dim: 128,
                learning_rate: 1e-4,
                steps: |_| 50_000,
            },
        }
    }

    pub fn steps(&self, n: usize) -> u64 {
        (self.steps)(n)
    }

    /// Training configuration of grid cell `(n, capacity)`.
    pub fn train_config(&self, n: usize, capacity: u32, seed: u64) -> TrainConfig {
        TrainConfig {
            n_customers: n,
            capacity,
            steps: self.steps(n),
            learning_rate: self.learning_rate,
            seed: derive_seed(seed, &[n as u64, capacity as u64]),
            critic_hidden: self.embed_dim,
            policy: PolicyConfig {
                embed_dim: self.embed_dim,
                hidden_dim: self.embed_dim,
                ..PolicyConfig::default()
            },
            ..TrainConfig::default()
        }
    }
}

/// Embedding and hidden width of the desk-scale models.
pub const DESK_WIDTH: usize = 64;
pub const DESK_LR: f64 = 1e-3;

pub fn checkpoint_name(n: usize, capacity: u32) -> String {
    format!("n{n}_cap{capacity}.json")
}

pub fn log_name(n: usize, capacity: u32) -> String {
    format!("n{n}_cap{capacity}_log.csv")
}

/// Evaluation dataset for `(n, capacity)`. Customer layouts depend only on
/// `(seed, n)`, so every capacity sees the same instances.
pub fn eval_dataset(n: usize, capacity: u32, count: usize, seed: u64) -> Result<Vec<Instance>, CliError> {
    let base = derive_seed(seed, &[0xE7A1, n as u64]);
    let data = generate_dataset(&GeneratorConfig::new(n, 9, 0), count, base).map_err(rt)?;
    data.into_iter()
        .map(|i| {
            let i = i.with_capacity(capacity);
            i.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(i)
        })
        .collect()
}

fn emit(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(rt)?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(())
}

fn load_instance(path: Option<&Path>, fixture: Option<&str>, capacity: Option<u32>) -> Result<Instance, CliError> {
    let inst = match (path, fixture) {
        (Some(p), _) => read_instance(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        (None, Some(f)) => load_fixture(f).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None) => return Err(CliError::Usage("one of --instance or --fixture is required".into())),
    };
    let inst = match capacity {
        Some(c) => inst.with_capacity(c),
        None => inst,
    };
    inst.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(inst)
}

fn load_policy(path: &Path) -> Result<Policy, CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!("missing checkpoint: {}", path.display())));
    }
    let ck = read_checkpoint(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Policy::from_checkpoint(&ck).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn init_threads() {
    if let Some(n) = std::env::var("SKYROUTE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // A second initialisation (e.g. repeated in-process runs) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Invalid(m) => eprintln!("invalid: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate {
            n,
            capacity,
            seed,
            count,
            out,
        } => cmd_generate(n, capacity, seed, count, &out),
        Command::Train { .. } => cmd_train(cmd),
        Command::Solve { .. } => cmd_solve(cmd),
        Command::Eval { .. } => cmd_eval(cmd),
        Command::Verify {
            solution,
            instance,
            fixture,
            capacity,
            split_delivery,
        } => cmd_verify(solution, instance, fixture, capacity, split_delivery),
        Command::Plot { .. } => cmd_plot(cmd),
    }
}

fn cmd_generate(n: usize, capacity: u32, seed: u64, count: usize, out: &Path) -> Result<(), CliError> {
    let cfg = GeneratorConfig::new(n, capacity, seed);
    cfg.check().map_err(|e| CliError::Usage(e.to_string()))?;
    match count {
        0 => Err(CliError::Usage("--count must be positive".into())),
        1 => {
            let inst = crate::instance::generate_instance(&cfg).map_err(rt)?;
            emit(out, instance_to_json(&inst).as_bytes())
        }
        _ => {
            let data = generate_dataset(&cfg, count, seed).map_err(rt)?;
            for (i, inst) in data.iter().enumerate() {
                emit(
                    &out.join(format!("inst_{i:04}.json")),
                    instance_to_json(inst).as_bytes(),
                )?;
            }
            Ok(())
        }
    }
}

fn cmd_train(cmd: Command) -> Result<(), CliError> {
    let Command::Train {
        preset,
        n,
        capacity,
        steps,
        lr,
        batch,
        dropout,
        embed_dim,
        hidden_dim,
        log_every,
        seed,
        metric,
        inner_softmax,
        split_delivery,
        reuse_train_set,
        no_clip,
        resume,
        slim,
        out,
        log,
        timing,
    } = cmd
    else {
        unreachable!()
    };
    let tweak = |mut c: TrainConfig| -> TrainConfig {
        if let Some(s) = steps {
            c.steps = s;
        }
        if let Some(v) = lr {
            c.learning_rate = v;
        }
        if let Some(v) = batch {
            c.batch_size = v;
        }
        if let Some(v) = dropout {
            c.policy.dropout = v;
        }
        if let Some(v) = embed_dim {
            c.policy.embed_dim = v;
        }
        if let Some(v) = hidden_dim {
            c.policy.hidden_dim = v;
            c.critic_hidden = v;
        }
        if let Some(v) = log_every {
            c.log_every = v;
        }
        c.reward_metric = metric.into();
        c.policy.inner_softmax = inner_softmax;
        c.policy.split_delivery = split_delivery;
        c.reuse_train_set = reuse_train_set;
        if no_clip {
            c.grad_clip = None;
        }
        c
    };
    let timing = timing == Switch::On;
    let run_one = |cfg: TrainConfig, ckpt: PathBuf, log: PathBuf| -> Result<(), CliError> {
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for p in [&ckpt, &log] {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(rt)?;
            }
        }
        let outputs = TrainOutputs {
            checkpoint: ckpt.clone(),
            log: log.clone(),
            timing,
            with_state: !slim,
        };
        let resume_ck = resume.as_deref().map(read_checkpoint).transpose().map_err(rt)?;
        eprintln!(
            "training n={} capacity={} steps={} (M={}, batch {})",
            cfg.n_customers, cfg.capacity, cfg.steps, cfg.policy.embed_dim, cfg.batch_size
        );
        train(cfg, resume_ck.as_ref(), Some(&outputs)).map_err(rt)?;
        println!("{}", ckpt.display());
        println!("{}", log.display());
        Ok(())
    };

    match preset {
        Some(p) => {
            if resume.is_some() {
                return Err(CliError::Usage("--resume applies to single runs only".into()));
            }
            let grid = Preset::get(p);
            let sizes: Vec<usize> = grid
                .sizes
                .iter()
                .copied()
                .filter(|&s| n.is_none_or(|n| n == s))
                .collect();
            let caps: Vec<u32> = grid
                .capacities
                .iter()
                .copied()
                .filter(|&c| capacity.is_none_or(|q| q == c))
                .collect();
            if sizes.is_empty() || caps.is_empty() {
                return Err(CliError::Usage(
                    "--n/--capacity select nothing from the preset grid".into(),
                ));
            }
            for &s in &sizes {
                for &c in &caps {
                    let cfg = tweak(grid.train_config(s, c, seed));
                    run_one(cfg, out.join(checkpoint_name(s, c)), out.join(log_name(s, c)))?;
                }
            }
            if p == PresetArg::Fig6 {
                plot_fig6(&grid, &out, &out)?;
            }
            Ok(())
        }
        None => {
            let n = n.ok_or_else(|| CliError::Usage("--n is required without --preset".into()))?;
            let base = TrainConfig {
                n_customers: n,
                capacity: capacity.unwrap_or(30),
                seed,
                ..TrainConfig::default()
            };
            let log = log.unwrap_or_else(|| {
                let stem = out
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                out.with_file_name(format!("{stem}_log.csv"))
            });
            run_one(tweak(base), out, log)
        }
    }
}

fn beam_opts(width: usize, no_guard: bool, select: SelectArg) -> BeamOptions {
    BeamOptions {
        width,
        guard: !no_guard,
        select: match select {
            SelectArg::Length => BeamSelect::Length,
            SelectArg::Logprob => BeamSelect::LogProb,
        },
    }
}

fn decoder_for(d: DecoderArg, width: usize, seed: u64, opts: BeamOptions) -> Result<Decoder, CliError> {
    Ok(match d {
        DecoderArg::Greedy => Decoder::Greedy,
        DecoderArg::Sample => Decoder::Sample { seed },
        DecoderArg::Beam => {
            if width == 0 {
                return Err(CliError::Usage("--width must be at least 1".into()));
            }
            Decoder::Beam(opts)
        }
    })
}

fn cmd_solve(cmd: Command) -> Result<(), CliError> {
    let Command::Solve {
        instance,
        fixture,
        capacity,
        decoder,
        width,
        checkpoint,
        baseline,
        seed,
        no_guard_beam,
        select,
        split_delivery,
        out,
        svg: svg_out,
    } = cmd
    else {
        unreachable!()
    };
    let inst = load_instance(instance.as_deref(), fixture.as_deref(), capacity)?;
    let (sol, split) = match (checkpoint, baseline) {
        (Some(ck), None) => {
            let mut policy = load_policy(&ck)?;
            policy.config.split_delivery |= split_delivery;
            let dec = decoder_for(decoder, width, seed, beam_opts(width, no_guard_beam, select))?;
            let solver = PolicySolver {
                policy: &policy,
                decoder: dec,
            };
            (solver.solve(&inst, 0).map_err(rt)?, policy.config.split_delivery)
        }
        (None, Some(b)) => {
            let solver = BaselineSolver { kind: b.into(), seed };
            let sol = solver.solve(&inst, 0).map_err(|e| match e {
                crate::eval::EvalError::Baseline {
                    source: crate::baseline::BaselineError::TooLarge(_),
                    ..
                } => CliError::Usage(e.to_string()),
                other => rt(other),
            })?;
            (sol, false)
        }
        _ => {
            return Err(CliError::Usage(
                "exactly one of --checkpoint or --baseline is required".into(),
            ))
        }
    };
    emit(&out, sol.to_json().as_bytes())?;
    if let Some(p) = svg_out {
        let text = svg::render_solution(&inst, &sol).map_err(rt)?;
        emit(&p, text.as_bytes())?;
    }
    validate_route_with(&sol, &inst, split)
        .map_err(|errs| CliError::Invalid(errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")))?;
    eprintln!("length {:.6} with {} UAVs", sol.length, sol.n_uavs());
    Ok(())
}

fn cmd_eval(cmd: Command) -> Result<(), CliError> {
    let Command::Eval {
        preset,
        checkpoints,
        n,
        capacity,
        count,
        seed,
        checkpoint,
        decoder,
        width,
        baseline,
        no_guard_beam,
        out,
        timing,
    } = cmd
    else {
        unreachable!()
    };
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let mut report = EvalReport::default();
    let mut push = |solver: &dyn Solver, data: &[Instance]| -> Result<(), CliError> {
        let outcome = evaluate(solver, data).map_err(|e| match e {
            crate::eval::EvalError::Invalid { .. } => CliError::Invalid(e.to_string()),
            other => rt(other),
        })?;
        eprintln!(
            "{} width={:?} n={} capacity={}: mean {:.4}",
            outcome.row.solver, outcome.row.width, outcome.row.n, outcome.row.capacity, outcome.row.mean
        );
        report.rows.push(outcome.row);
        Ok(())
    };
    match preset {
        Some(p) => {
            let grid = Preset::get(p);
            let widths = if width.is_empty() {
                grid.widths.clone()
            } else {
                width.clone()
            };
            let sizes: Vec<usize> = grid
                .sizes
                .iter()
                .copied()
                .filter(|&s| n.is_none_or(|n| n == s))
                .collect();
            let caps: Vec<u32> = grid
                .capacities
                .iter()
                .copied()
                .filter(|&c| capacity.is_none_or(|q| q == c))
                .collect();
            for &s in &sizes {
                for &c in &caps {
                    let path = checkpoints.join(checkpoint_name(s, c));
                    let policy = load_policy(&path)?;
                    let data = eval_dataset(s, c, count, seed)?;
                    for &w in &widths {
                        let dec = decoder_for(
                            DecoderArg::Beam,
                            w,
                            seed,
                            beam_opts(w, no_guard_beam, SelectArg::Length),
                        )?;
                        push(
                            &PolicySolver {
                                policy: &policy,
                                decoder: dec,
                            },
                            &data,
                        )?;
                    }
                    for &b in &baseline {
                        push(&BaselineSolver { kind: b.into(), seed }, &data)?;
                    }
                }
            }
        }
        None => {
            let n = n.ok_or_else(|| CliError::Usage("--n is required without --preset".into()))?;
            let c = capacity.unwrap_or(30);
            let data = eval_dataset(n, c, count, seed)?;
            if baseline.contains(&BaselineArg::Brute) && n > crate::baseline::BRUTE_FORCE_MAX {
                return Err(CliError::Usage(format!(
                    "brute force supports at most {} customers",
                    crate::baseline::BRUTE_FORCE_MAX
                )));
            }
            if checkpoint.is_none() && baseline.is_empty() {
                return Err(CliError::Usage("give --checkpoint and/or --baseline".into()));
            }
            if let Some(ck) = &checkpoint {
                let policy = load_policy(ck)?;
                let widths = if width.is_empty() { vec![10] } else { width.clone() };
                match decoder {
                    DecoderArg::Beam => {
                        for &w in &widths {
                            let dec = decoder_for(decoder, w, seed, beam_opts(w, no_guard_beam, SelectArg::Length))?;
                            push(
                                &PolicySolver {
                                    policy: &policy,
                                    decoder: dec,
                                },
                                &data,
                            )?;
                        }
                    }
                    _ => {
                        let dec = decoder_for(decoder, 1, seed, beam_opts(1, no_guard_beam, SelectArg::Length))?;
                        push(
                            &PolicySolver {
                                policy: &policy,
                                decoder: dec,
                            },
                            &data,
                        )?;
                    }
                }
            }
            for &b in &baseline {
                push(&BaselineSolver { kind: b.into(), seed }, &data)?;
            }
        }
    }
    let timing = timing == Switch::On;
    emit(&out, report.to_csv(timing).as_bytes())?;
    print!("{}", report.to_table(timing));
    Ok(())
}

fn cmd_verify(
    solution: Option<PathBuf>,
    instance: Option<PathBuf>,
    fixture: Option<String>,
    capacity: Option<u32>,
    split: bool,
) -> Result<(), CliError> {
    match solution {
        None => {
            let checks = verify_fixture_solutions().map_err(rt)?;
            print!("{}", render_fixture_report(&checks));
            let bad: Vec<&str> = checks
                .iter()
                .filter(|c| !(c.loads_match && c.no_split_ok))
                .map(|c| c.name.as_str())
                .collect();
            if bad.is_empty() {
                Ok(())
            } else {
                Err(CliError::Invalid(format!(
                    "reference solutions failed: {}",
                    bad.join(", ")
                )))
            }
        }
        Some(path) => {
            let inst = load_instance(instance.as_deref(), fixture.as_deref(), capacity)?;
            let text =
                std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let sol = Solution::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            match validate_route_with(&sol, &inst, split) {
                Ok(()) => {
                    println!("ok: length {:.6}, {} UAVs", sol.length, sol.n_uavs());
                    Ok(())
                }
                Err(errs) => {
                    for e in &errs {
                        println!("{e}");
                    }
                    Err(CliError::Invalid(format!("{} violation(s)", errs.len())))
                }
            }
        }
    }
}

fn read_log(path: &Path) -> Result<TrainLog, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    TrainLog::from_csv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn plot_fig6(grid: &Preset, logs_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    for &s in &grid.sizes {
        let mut logs = Vec::new();
        for &c in &grid.capacities {
            let p = logs_dir.join(log_name(s, c));
            if p.exists() {
                logs.push((format!("n={s} cap={c}"), read_log(&p)?));
            }
        }
        if !logs.is_empty() {
            emit(
                &out_dir.join(format!("fig6_n{s}.svg")),
                svg::render_convergence(&logs).as_bytes(),
            )?;
        }
    }
    Ok(())
}

fn cmd_plot(cmd: Command) -> Result<(), CliError> {
    let Command::Plot {
        solution,
        instance,
        fixture,
        capacity,
        log,
        preset,
        checkpoints,
        out,
    } = cmd
    else {
        unreachable!()
    };
    if let Some(p) = preset {
        return plot_fig6(&Preset::get(p), &checkpoints, &out);
    }
    match (solution, log.is_empty()) {
        (Some(path), true) => {
            let inst = load_instance(instance.as_deref(), fixture.as_deref(), capacity)?;
            let text =
                std::fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let sol = Solution::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let svg = svg::render_solution(&inst, &sol).map_err(rt)?;
            emit(&out, svg.as_bytes())
        }
        (None, false) => {
            let mut logs = Vec::new();
            for p in &log {
                let label = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                logs.push((label, read_log(p)?));
            }
            emit(&out, svg::render_convergence(&logs).as_bytes())
        }
        _ => Err(CliError::Usage(
            "give either --solution (with an instance) or --log".into(),
        )),
    }
}
