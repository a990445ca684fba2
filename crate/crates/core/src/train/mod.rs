//! Actor-critic training of the pointer policy.
//!
//! Each step draws a batch of instances, samples one route per instance from
//! the policy, and updates
//!
//! ```text
//! actor:  mean_b (L_b − V_b) · Σ_t log π(y_t)      (V_b held constant)
//! critic: mean_b (V_b − L_b)²
//! ```
//!
//! with Adam. Every random draw is derived from `(seed, step, instance)`, and
//! per-instance gradients are summed in batch order, so a run is a pure
//! function of its configuration regardless of thread count.

use crate::diffcore::{Checkpoint, Dense, DiffError, Gradients, ParamStore, Tape, Tensor, Var};
use crate::geometry::{GeometryError, Metric};
use crate::instance::{
    generate_dataset, generate_instance, instance_to_json, GeneratorConfig, Instance, InstanceError,
};
use crate::policy::{Policy, PolicyConfig, PolicyError};
use crate::{derive_seed, write_atomic};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; offending instance:\n{instance}")]
    NonFiniteLoss { step: u64, instance: String },
    #[error("non-finite parameters after step {0}")]
    NonFiniteParams(u64),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_customers: usize,
    pub capacity: u32,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: u64,
    /// Global L2 clipping threshold per network; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Draw batches from one fixed set of `train_set_size` instances instead
    /// of generating fresh ones.
    pub reuse_train_set: bool,
    pub train_set_size: usize,
    /// Metric used for the reward; evaluation always uses the detour metric.
    pub reward_metric: Metric,
    pub critic_hidden: usize,
    pub policy: PolicyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_customers: 10,
            capacity: 30,
            steps: 50_000,
            batch_size: 128,
            learning_rate: 1e-4,
            seed: 0,
            log_every: 200,
            grad_clip: Some(2.0),
            reuse_train_set: false,
            train_set_size: 1000,
            reward_metric: Metric::Detour,
            critic_hidden: 128,
            policy: PolicyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n_customers == 0 {
            return bad("n_customers must be positive");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.policy.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.policy.embed_dim == 0 || self.policy.hidden_dim == 0 || self.critic_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.reuse_train_set && self.train_set_size == 0 {
            return bad("train_set_size must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        self.generator(0).check().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig::new(self.n_customers, self.capacity, seed)
    }
}

/// Value network: per-node `tanh` embedding of `[x, y, d/Q, r]` (with `r`
/// the detour distance to the depot), mean over nodes, two dense-`tanh`
/// layers, scalar output.
#[derive(Debug, Clone)]
pub struct Critic {
    pub store: ParamStore,
    embed: Dense,
    l1: Dense,
    l2: Dense,
    out: Dense,
}

pub const CRITIC_FEATURES: usize = 4;

impl Critic {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(0.0);
        let embed = Dense::new(&mut store, "critic.embed", CRITIC_FEATURES, hidden, &mut rng);
        let l1 = Dense::new(&mut store, "critic.l1", hidden, hidden, &mut rng);
        let l2 = Dense::new(&mut store, "critic.l2", hidden, hidden, &mut rng);
        let out = Dense::new(&mut store, "critic.out", hidden, 1, &mut rng);
        Self {
            store,
            embed,
            l1,
            l2,
            out,
        }
    }

    pub fn features(inst: &Instance) -> Result<Tensor, TrainError> {
        let n = inst.n_nodes();
        let mut data = Vec::with_capacity(n * CRITIC_FEATURES);
        for i in 0..n {
            let p = inst.node(i);
            let r = Metric::Detour.leg(inst.depot, p, &inst.zones)?;
            data.extend([p.x, p.y, inst.demand(i) as f64 / inst.capacity as f64, r]);
        }
        Ok(Tensor::matrix(n, CRITIC_FEATURES, data)?)
    }

    pub fn forward(&self, tape: &mut Tape, inst: &Instance) -> Result<Var, TrainError> {
        let x = tape.constant(Self::features(inst)?);
        let e = self.embed.forward(tape, x)?;
        let e = tape.tanh(e);
        let m = tape.mean_rows(e)?;
        let h = self.l1.forward(tape, m)?;
        let h = tape.tanh(h);
        let h = self.l2.forward(tape, h)?;
        let h = tape.tanh(h);
        let v = self.out.forward(tape, h)?;
        Ok(tape.select(v, 0)?)
    }

    pub fn value(&self, inst: &Instance) -> Result<f64, TrainError> {
        let mut tape = Tape::new(&self.store);
        let v = self.forward(&mut tape, inst)?;
        Ok(tape.value(v).item())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Scales the gradients in `store` so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max: Option<f64>) -> f64 {
    let norm = store.ids().map(|id| store.grad(id).sq_norm()).sum::<f64>().sqrt();
    if let Some(max) = max {
        if norm > max {
            let s = max / norm;
            for id in store.ids().collect::<Vec<_>>() {
                store.grad_mut(id).scale_in_place(s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub mean_length: f64,
    pub critic_loss: f64,
    pub mean_value: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Per-instance contribution computed on its own tapes.
struct Sample {
    actor: Gradients,
    critic: Gradients,
    length: f64,
    value: f64,
}

/// Negated route length: the reward of a completed route.
pub fn reward(inst: &Instance, seq: &[usize], metric: Metric) -> Result<f64, GeometryError> {
    Ok(-inst.sequence_length(seq, metric)?)
}

fn sample_one(
    policy: &Policy,
    critic: &Critic,
    inst: &Instance,
    seed: u64,
    batch: usize,
    metric: Metric,
) -> Result<Sample, TrainError> {
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let drop = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let mut tape = Tape::training(&policy.store, drop);
    let (state, logp) = policy.rollout(&mut tape, inst, |probs, _| {
        crate::decode::sample_index(probs, &mut pick)
    })?;
    let length = -reward(inst, &state.sequence, metric)?;

    let mut ct = Tape::new(&critic.store);
    let v = critic.forward(&mut ct, inst)?;
    let value = ct.value(v).item();
    let b = batch as f64;
    let critic_g = ct.backward(v, 2.0 * (value - length) / b)?;
    let actor_g = tape.backward(logp, (length - value) / b)?;
    Ok(Sample {
        actor: actor_g,
        critic: critic_g,
        length,
        value,
    })
}

/// One optimisation step over `batch`; `seeds[i]` drives the sampling and
/// dropout randomness of instance `i`.
pub fn actor_critic_step(
    policy: &mut Policy,
    critic: &mut Critic,
    opt_actor: &mut Adam,
    opt_critic: &mut Adam,
    batch: &[Instance],
    seeds: &[u64],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepStats, TrainError> {
    let (p, c) = (&*policy, &*critic);
    let results: Vec<Result<Sample, TrainError>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(inst, &s)| sample_one(p, c, inst, s, batch.len(), cfg.reward_metric))
        .collect();

    policy.store.zero_grads();
    critic.store.zero_grads();
    let (mut sum_len, mut sum_sq, mut sum_v) = (0.0, 0.0, 0.0);
    for (inst, r) in batch.iter().zip(results) {
        let s = r?;
        if !(s.length.is_finite() && s.value.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                step,
                instance: instance_to_json(inst),
            });
        }
        policy.store.accumulate(&s.actor);
        critic.store.accumulate(&s.critic);
        sum_len += s.length;
        sum_sq += (s.value - s.length) * (s.value - s.length);
        sum_v += s.value;
    }
    let b = batch.len() as f64;
    let actor_grad_norm = clip_grad_norm(&mut policy.store, cfg.grad_clip);
    let critic_grad_norm = clip_grad_norm(&mut critic.store, cfg.grad_clip);
    if !(actor_grad_norm.is_finite() && critic_grad_norm.is_finite()) {
        return Err(TrainError::NonFiniteLoss {
            step,
            instance: instance_to_json(&batch[0]),
        });
    }
    opt_actor.step(&mut policy.store);
    opt_critic.step(&mut critic.store);
    Ok(StepStats {
        mean_length: sum_len / b,
        critic_loss: sum_sq / b,
        mean_value: sum_v / b,
        actor_grad_norm,
        critic_grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub mean_length: f64,
    pub critic_loss: f64,
    pub seconds: f64,
}

/// Append-only training log; each row averages the batches since the
/// previous row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,mean_length,critic_loss,seconds";

impl TrainLog {
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.rows {
            let t = if timing { r.seconds } else { 0.0 };
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.3}\n",
                r.step, r.mean_length, r.critic_loss, t
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(format!("expected header '{LOG_HEADER}'"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let err = |what: &str| format!("line {}: bad {what}", i + 2);
            if f.len() != 4 {
                return Err(err("field count"));
            }
            rows.push(LogRow {
                step: f[0].parse().map_err(|_| err("step"))?,
                mean_length: f[1].parse().map_err(|_| err("mean_length"))?,
                critic_loss: f[2].parse().map_err(|_| err("critic_loss"))?,
                seconds: f[3].parse().map_err(|_| err("seconds"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam_actor: Adam,
    pub adam_critic: Adam,
    pub log: TrainLog,
    pub pending_length: f64,
    pub pending_loss: f64,
    pub pending_count: u64,
    pub seconds: f64,
}

/// A training run in progress.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    pub critic: Critic,
    pub state: TrainState,
    train_set: Option<Vec<Instance>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let policy = Policy::new(config.policy.clone(), derive_seed(config.seed, &[1]));
        let critic = Critic::new(config.critic_hidden, derive_seed(config.seed, &[2]));
        let state = TrainState {
            step: 0,
            adam_actor: Adam::new(&policy.store, config.learning_rate),
            adam_critic: Adam::new(&critic.store, config.learning_rate),
            log: TrainLog::default(),
            pending_length: 0.0,
            pending_loss: 0.0,
            pending_count: 0,
            seconds: 0.0,
        };
        let train_set = Self::make_train_set(&config)?;
        Ok(Self {
            config,
            policy,
            critic,
            state,
            train_set,
        })
    }

    fn make_train_set(config: &TrainConfig) -> Result<Option<Vec<Instance>>, TrainError> {
        if !config.reuse_train_set {
            return Ok(None);
        }
        let set = generate_dataset(
            &config.generator(0),
            config.train_set_size,
            derive_seed(config.seed, &[3]),
        )?;
        Ok(Some(set))
    }

    /// Batch of step `step` (1-based) and the per-instance sampling seeds.
    pub fn batch(&self, step: u64) -> Result<(Vec<Instance>, Vec<u64>), TrainError> {
        let mut insts = Vec::with_capacity(self.config.batch_size);
        let mut seeds = Vec::with_capacity(self.config.batch_size);
        for i in 0..self.config.batch_size as u64 {
            let s = derive_seed(self.config.seed, &[4, step, i]);
            let inst = match &self.train_set {
                Some(set) => set[(s % set.len() as u64) as usize].clone(),
                None => generate_instance(&self.config.generator(s))?,
            };
            insts.push(inst);
            seeds.push(derive_seed(self.config.seed, &[5, step, i]));
        }
        Ok((insts, seeds))
    }

    /// Runs one step, logging when the step count reaches a log interval or
    /// the configured end.
    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let t0 = Instant::now();
        let step = self.state.step + 1;
        let (batch, seeds) = self.batch(step)?;
        let stats = actor_critic_step(
            &mut self.policy,
            &mut self.critic,
            &mut self.state.adam_actor,
            &mut self.state.adam_critic,
            &batch,
            &seeds,
            &self.config,
            step,
        )?;
        self.state.step = step;
        self.state.pending_length += stats.mean_length;
        self.state.pending_loss += stats.critic_loss;
        self.state.pending_count += 1;
        self.state.seconds += t0.elapsed().as_secs_f64();
        if step % self.config.log_every == 0 || step == self.config.steps {
            self.flush_log()?;
        }
        Ok(stats)
    }

    fn flush_log(&mut self) -> Result<(), TrainError> {
        if self.state.pending_count == 0 {
            return Ok(());
        }
        if !(self.policy.store.all_finite() && self.critic.store.all_finite()) {
            return Err(TrainError::NonFiniteParams(self.state.step));
        }
        let k = self.state.pending_count as f64;
        self.state.log.rows.push(LogRow {
            step: self.state.step,
            mean_length: self.state.pending_length / k,
            critic_loss: self.state.pending_loss / k,
            seconds: self.state.seconds,
        });
        self.state.pending_length = 0.0;
        self.state.pending_loss = 0.0;
        self.state.pending_count = 0;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    /// Runs to `config.steps`, calling `on_log` after every new log row.
    pub fn run(&mut self, mut on_log: impl FnMut(&Trainer) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while !self.is_done() {
            let before = self.state.log.rows.len();
            self.step()?;
            if self.state.log.rows.len() > before {
                on_log(self)?;
            }
        }
        Ok(())
    }

    /// Checkpoint holding both networks; with `with_state` the optimizer
    /// moments and log are included so the run can be resumed.
    pub fn checkpoint(&self, with_state: bool) -> Checkpoint {
        let mut params: BTreeMap<String, crate::diffcore::TensorDoc> = BTreeMap::new();
        for store in [&self.policy.store, &self.critic.store] {
            params.extend(Checkpoint::from_store(store, serde_json::Value::Null).params);
        }
        Checkpoint {
            version: crate::diffcore::CHECKPOINT_VERSION,
            config: serde_json::json!({
                "policy": self.config.policy,
                "train": self.config,
                "step": self.state.step,
            }),
            params,
            state: with_state.then(|| serde_json::to_value(&self.state).expect("state serializes")),
        }
    }

    /// Restores a run from a checkpoint written with state. The stored
    /// configuration wins except for `steps`, which may be extended.
    pub fn resume(ck: &Checkpoint, steps: Option<u64>) -> Result<Self, TrainError> {
        let mut config: TrainConfig = ck
            .config
            .get("train")
            .cloned()
            .ok_or_else(|| TrainError::Checkpoint("missing config.train".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| TrainError::Checkpoint(e.to_string())))?;
        if let Some(s) = steps {
            config.steps = s;
        }
        let state: TrainState = ck
            .state
            .clone()
            .ok_or_else(|| TrainError::Checkpoint("checkpoint has no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| TrainError::Checkpoint(e.to_string())))?;
        let mut t = Self::new(config)?;
        let tensors = ck.tensors()?;
        t.policy.store.load_owned(&tensors)?;
        t.critic.store.load_owned(&tensors)?;
        t.state = state;
        Ok(t)
    }
}

/// Output locations of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// When false, wall-clock fields in the log and checkpoint state are
    /// written as zeros so outputs are byte-reproducible.
    pub timing: bool,
    /// Keep optimizer state in the checkpoint.
    pub with_state: bool,
}

fn persist(t: &Trainer, out: &TrainOutputs) -> Result<(), TrainError> {
    let mut ck = t.checkpoint(out.with_state);
    if !out.timing {
        if let Some(state) = ck.state.as_mut() {
            let mut s: TrainState =
                serde_json::from_value(state.take()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            s.seconds = 0.0;
            s.log.rows.iter_mut().for_each(|r| r.seconds = 0.0);
            *state = serde_json::to_value(&s).expect("state serializes");
        }
    }
    write_atomic(&out.checkpoint, ck.to_json().as_bytes())?;
    write_atomic(&out.log, t.state.log.to_csv(out.timing).as_bytes())?;
    Ok(())
}

/// Trains from scratch (or continues `resume_from`) and writes the
/// checkpoint and log at every log interval and at the end.
pub fn train(
    config: TrainConfig,
    resume_from: Option<&Checkpoint>,
    out: Option<&TrainOutputs>,
) -> Result<Trainer, TrainError> {
    let mut t = match resume_from {
        Some(ck) => Trainer::resume(ck, Some(config.steps))?,
        None => Trainer::new(config)?,
    };
    t.run(|t| match out {
        Some(o) => persist(t, o),
        None => Ok(()),
    })?;
    if let Some(o) = out {
        persist(&t, o)?;
    }
    Ok(t)
}

/// Loads a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = std::fs::read_to_string(path)?;
    Checkpoint::from_json(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))
}
