//! Attention pointer policy over depot + customer nodes.
//!
//! Each node i carries static coordinates and a dynamic demand. Its embedding
//! is `x_i = s_i·W_s + b_s + (d_i/Q)·e_d + b_d`; the static half is computed
//! once per instance. A GRU decoder consumes the embedding of the last
//! visited node together with the remaining load, and at every step
//!
//! ```text
//! u_i = v_aᵀ tanh(W_a [x_i; h])          a = softmax(u)
//! c   = Σ_i a_i x_i
//! ũ_i = v_cᵀ tanh(W_c [x_i; c])          p = masked softmax(ũ)
//! ```
//!
//! `W_a [x; h]` is evaluated as `x·W_ax + h·W_ah`, which lets the node term be
//! split into a cached static product and a rank-one demand update.

use crate::diffcore::{
    masked_softmax_values, BoundGru, Checkpoint, DiffError, GruCell, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::instance::Instance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("no feasible node in the current state")]
    AllMasked,
    #[error("node {node} cannot be chosen: {reason}")]
    InfeasibleChoice { node: usize, reason: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Replace the inner `tanh` of the pointer score with a softmax over the
    /// hidden axis.
    pub inner_softmax: bool,
    /// Allow partial deliveries; a visit then delivers `min(d, l)`.
    pub split_delivery: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 128,
            dropout: 0.1,
            inner_softmax: false,
            split_delivery: false,
        }
    }
}

#[derive(Debug, Clone)]
struct Ids {
    static_w: ParamId,
    static_b: ParamId,
    dyn_w: ParamId,
    dyn_b: ParamId,
    gru: GruCell,
    att_node: ParamId,
    att_mem: ParamId,
    att_v: ParamId,
    ptr_node: ParamId,
    ptr_ctx: ParamId,
    ptr_v: ParamId,
}

/// Policy parameters and their configuration.
#[derive(Debug, Clone)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    ids: Ids,
}

/// Per-instance values bound to one tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    n_nodes: usize,
    capacity: f64,
    statics: Var,
    dyn_w: Var,
    dyn_b: Var,
    att_static: Var,
    att_dyn: Var,
    att_bias: Var,
    att_mem: Var,
    att_v: Var,
    ptr_static: Var,
    ptr_dyn: Var,
    ptr_bias: Var,
    ptr_ctx: Var,
    ptr_v: Var,
    gru: BoundGru,
}

/// Intermediate values of one decoding step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub attention: Var,
    pub context: Var,
    pub scores: Var,
    pub log_probs: Var,
}

impl Policy {
    pub fn new(config: PolicyConfig, seed: u64) -> Self {
        let (m, h) = (config.embed_dim, config.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(config.dropout);
        let ids = Ids {
            static_w: s.add_uniform("embed.static_w", &[2, m], 2, &mut rng),
            static_b: s.add_uniform("embed.static_b", &[m], 2, &mut rng),
            dyn_w: s.add_uniform("embed.demand_w", &[m], 1, &mut rng),
            dyn_b: s.add_uniform("embed.demand_b", &[m], 1, &mut rng),
            gru: GruCell::new(&mut s, "decoder", m + 1, h, &mut rng),
            att_node: s.add_uniform("attn.w_node", &[m, h], m + h, &mut rng),
            att_mem: s.add_uniform("attn.w_memory", &[h, h], m + h, &mut rng),
            att_v: s.add_uniform("attn.v", &[h], h, &mut rng),
            ptr_node: s.add_uniform("ptr.w_node", &[m, h], 2 * m, &mut rng),
            ptr_ctx: s.add_uniform("ptr.w_context", &[m, h], 2 * m, &mut rng),
            ptr_v: s.add_uniform("ptr.v", &[h], h, &mut rng),
        };
        Self { config, store: s, ids }
    }

    /// Rebuilds a policy from a checkpoint whose `config.policy` holds a
    /// [`PolicyConfig`]. Parameters owned by other networks are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        let cfg = ck
            .config
            .get("policy")
            .ok_or_else(|| PolicyError::Checkpoint("missing config.policy".into()))?;
        let config: PolicyConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let mut p = Self::new(config, 0);
        p.store.load_owned(&ck.tensors()?)?;
        Ok(p)
    }

    /// Sets every parameter to zero.
    pub fn zero_params(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.value_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn static_weight_id(&self) -> ParamId {
        self.ids.static_w
    }

    /// Binds parameters to `tape` and caches the static part of the node
    /// embeddings and of both node projections.
    pub fn encode(&self, tape: &mut Tape, inst: &Instance) -> Result<Encoded, PolicyError> {
        let n = inst.n_nodes();
        let coords: Vec<f64> = (0..n)
            .flat_map(|i| {
                let p = inst.node(i);
                [p.x, p.y]
            })
            .collect();
        let coords = tape.constant(Tensor::matrix(n, 2, coords)?);
        let sw = tape.param(self.ids.static_w);
        let sb = tape.param(self.ids.static_b);
        let statics = tape.affine(coords, sw, sb)?;
        let dyn_w = tape.param(self.ids.dyn_w);
        let dyn_b = tape.param(self.ids.dyn_b);

        let att_node = tape.param(self.ids.att_node);
        let att_static = tape.matmul(statics, att_node)?;
        let att_dyn = tape.matmul(dyn_w, att_node)?;
        let att_bias = tape.matmul(dyn_b, att_node)?;
        let ptr_node = tape.param(self.ids.ptr_node);
        let ptr_static = tape.matmul(statics, ptr_node)?;
        let ptr_dyn = tape.matmul(dyn_w, ptr_node)?;
        let ptr_bias = tape.matmul(dyn_b, ptr_node)?;

        Ok(Encoded {
            n_nodes: n,
            capacity: inst.capacity as f64,
            statics,
            dyn_w,
            dyn_b,
            att_static,
            att_dyn,
            att_bias,
            att_mem: tape.param(self.ids.att_mem),
            att_v: tape.param(self.ids.att_v),
            ptr_static,
            ptr_dyn,
            ptr_bias,
            ptr_ctx: tape.param(self.ids.ptr_ctx),
            ptr_v: tape.param(self.ids.ptr_v),
            gru: self.ids.gru.bind(tape),
        })
    }

    /// Full node embeddings `[n_nodes, M]` for the given demands.
    pub fn embeddings(&self, tape: &mut Tape, enc: &Encoded, demands: &[u32]) -> Result<Var, PolicyError> {
        let dn = demand_var(tape, enc, demands)?;
        let d = tape.outer(dn, enc.dyn_w)?;
        let x = tape.add(enc.statics, d)?;
        Ok(tape.add_row(x, enc.dyn_b)?)
    }

    /// One decoding step from memory `h` under the feasibility mask `allowed`.
    pub fn step(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        h: Var,
        demands: &[u32],
        allowed: &[bool],
    ) -> Result<StepVars, PolicyError> {
        if !allowed.iter().any(|&a| a) {
            return Err(PolicyError::AllMasked);
        }
        let dn = demand_var(tape, enc, demands)?;
        let h = tape.dropout(h);

        let hm = tape.matmul(h, enc.att_mem)?;
        let row = tape.add(enc.att_bias, hm)?;
        let dyn_part = tape.outer(dn, enc.att_dyn)?;
        let pre = tape.add(enc.att_static, dyn_part)?;
        let pre = tape.add_row(pre, row)?;
        let act = tape.tanh(pre);
        let u = tape.matmul(act, enc.att_v)?;
        let attention = tape.masked_softmax(u, &vec![true; enc.n_nodes])?;

        let d = tape.outer(dn, enc.dyn_w)?;
        let x = tape.add(enc.statics, d)?;
        let x = tape.add_row(x, enc.dyn_b)?;
        let context = tape.matmul(attention, x)?;

        let cm = tape.matmul(context, enc.ptr_ctx)?;
        let row = tape.add(enc.ptr_bias, cm)?;
        let dyn_part = tape.outer(dn, enc.ptr_dyn)?;
        let pre = tape.add(enc.ptr_static, dyn_part)?;
        let pre = tape.add_row(pre, row)?;
        let act = if self.config.inner_softmax {
            tape.softmax_rows(pre)?
        } else {
            tape.tanh(pre)
        };
        let scores = tape.matmul(act, enc.ptr_v)?;
        let log_probs = tape.masked_log_softmax(scores, allowed)?;
        Ok(StepVars {
            attention,
            context,
            scores,
            log_probs,
        })
    }

    /// Advances the decoder memory after visiting `node` with `load` left.
    pub fn advance(&self, tape: &mut Tape, enc: &Encoded, h: Var, node: usize, load: u32) -> Result<Var, PolicyError> {
        let s = tape.row(enc.statics, node)?;
        let l = tape.constant(Tensor::vector(vec![load as f64 / enc.capacity]));
        let x = tape.concat(&[s, l])?;
        Ok(enc.gru.step(tape, x, h)?)
    }

    /// Memory after the implicit first move to the depot with a full load.
    pub fn initial_memory(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var, PolicyError> {
        let h0 = tape.constant(Tensor::zeros(&[self.config.hidden_dim]));
        self.advance(tape, enc, h0, 0, enc.capacity as u32)
    }

    /// Runs one episode on `tape`, letting `choose` pick each node from the
    /// step probabilities. Returns the final state and the summed log-probability
    /// of the chosen actions.
    pub fn rollout(
        &self,
        tape: &mut Tape,
        inst: &Instance,
        mut choose: impl FnMut(&[f64], &DecodeState) -> usize,
    ) -> Result<(DecodeState, Var), PolicyError> {
        let enc = self.encode(tape, inst)?;
        let mut h = self.initial_memory(tape, &enc)?;
        let mut state = DecodeState::new(inst, tape.value(h).clone());
        let mut total = tape.constant(Tensor::scalar(0.0));
        let limit = step_limit(inst);
        while !state.is_complete() {
            if state.steps() >= limit {
                return Err(PolicyError::InfeasibleChoice {
                    node: state.last,
                    reason: format!("episode exceeded {limit} steps"),
                });
            }
            let allowed = feasibility_mask(&state, self.config.split_delivery);
            let sv = self.step(tape, &enc, h, &state.demands, &allowed)?;
            let probs = probs_from_log(tape.value(sv.log_probs).data(), &allowed);
            let node = choose(&probs, &state);
            state.apply(node, self.config.split_delivery)?;
            let lp = tape.select(sv.log_probs, node)?;
            total = tape.add(total, lp)?;
            h = self.advance(tape, &enc, h, node, state.load)?;
            state.memory = tape.value(h).clone();
        }
        Ok((state, total))
    }
}

fn demand_var(tape: &mut Tape, enc: &Encoded, demands: &[u32]) -> Result<Var, PolicyError> {
    if demands.len() != enc.n_nodes {
        return Err(DiffError::ShapeMismatch {
            op: "embed",
            detail: format!("{} demands for {} nodes", demands.len(), enc.n_nodes),
        }
        .into());
    }
    Ok(tape.constant(Tensor::vector(
        demands.iter().map(|&d| d as f64 / enc.capacity).collect(),
    )))
}

fn probs_from_log(lp: &[f64], allowed: &[bool]) -> Vec<f64> {
    lp.iter()
        .zip(allowed)
        .map(|(&l, &a)| if a { l.exp() } else { 0.0 })
        .collect()
}

/// Upper bound on decode steps for an instance.
pub fn step_limit(inst: &Instance) -> usize {
    // With split delivery every visit either finishes a customer or empties
    // the load, so the bound grows with the total demand instead.
    2 * inst.n_customers() + 2 + 2 * (inst.total_demand() / inst.capacity.max(1)) as usize
}

/// Decoding state. `demands[0]` is always 0 (depot).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub demands: Vec<u32>,
    pub load: u32,
    pub capacity: u32,
    pub last: usize,
    pub memory: Tensor,
    pub sequence: Vec<usize>,
}

impl DecodeState {
    pub fn new(inst: &Instance, memory: Tensor) -> Self {
        Self {
            demands: inst.demands(),
            load: inst.capacity,
            capacity: inst.capacity,
            last: 0,
            memory,
            sequence: vec![0],
        }
    }

    pub fn at_depot(&self) -> bool {
        self.last == 0
    }

    pub fn is_complete(&self) -> bool {
        self.at_depot() && self.demands.iter().all(|&d| d == 0)
    }

    /// Actions taken so far.
    pub fn steps(&self) -> usize {
        self.sequence.len() - 1
    }

    /// Applies the state transition for visiting `node`:
    /// `d' = max(0, d − l)`, `l' = max(0, l − d)`; the depot reloads to capacity.
    pub fn apply(&mut self, node: usize, split: bool) -> Result<(), PolicyError> {
        let allowed = feasibility_mask(self, split);
        if node >= allowed.len() {
            return Err(PolicyError::InfeasibleChoice {
                node,
                reason: format!("only {} nodes", allowed.len()),
            });
        }
        if !allowed[node] {
            let reason = if node == 0 {
                "already at the depot".to_string()
            } else if self.demands[node] == 0 {
                "customer already served".to_string()
            } else {
                format!("demand {} exceeds remaining load {}", self.demands[node], self.load)
            };
            return Err(PolicyError::InfeasibleChoice { node, reason });
        }
        if node == 0 {
            self.load = self.capacity;
        } else {
            let d = self.demands[node];
            self.demands[node] = d.saturating_sub(self.load);
            self.load = self.load.saturating_sub(d);
        }
        self.last = node;
        self.sequence.push(node);
        Ok(())
    }
}

/// Nodes that may be visited next. A customer is open while it has demand
/// that fits the remaining load (any positive load in split mode); the depot
/// is closed only while the vehicle stands on it.
pub fn feasibility_mask(state: &DecodeState, split: bool) -> Vec<bool> {
    state
        .demands
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            if i == 0 {
                !state.at_depot()
            } else if split {
                d > 0 && state.load > 0
            } else {
                d > 0 && d <= state.load
            }
        })
        .collect()
}

/// Inference helper that keeps the per-instance encoding on a tape and
/// discards per-step nodes after each query.
pub struct Session<'p> {
    policy: &'p Policy,
    tape: Tape<'p>,
    enc: Encoded,
    base: usize,
}

impl<'p> Session<'p> {
    pub fn new(policy: &'p Policy, inst: &Instance) -> Result<Self, PolicyError> {
        let mut tape = Tape::new(&policy.store);
        let enc = policy.encode(&mut tape, inst)?;
        let base = tape.len();
        Ok(Self {
            policy,
            tape,
            enc,
            base,
        })
    }

    pub fn policy(&self) -> &'p Policy {
        self.policy
    }

    pub fn start(&mut self, inst: &Instance) -> Result<DecodeState, PolicyError> {
        let h = self.policy.initial_memory(&mut self.tape, &self.enc)?;
        let memory = self.tape.value(h).clone();
        self.tape.truncate(self.base);
        Ok(DecodeState::new(inst, memory))
    }

    /// Pointer probabilities for the next node; exactly zero on masked nodes.
    pub fn probabilities(&mut self, state: &DecodeState) -> Result<Vec<f64>, PolicyError> {
        let allowed = feasibility_mask(state, self.policy.config.split_delivery);
        let h = self.tape.constant(state.memory.clone());
        let sv = self.policy.step(&mut self.tape, &self.enc, h, &state.demands, &allowed);
        let out = sv.map(|sv| masked_softmax_values(self.tape.value(sv.scores).data(), &allowed));
        self.tape.truncate(self.base);
        out
    }

    /// Applies the transition for `node` and advances the memory.
    pub fn advance(&mut self, state: &DecodeState, node: usize) -> Result<DecodeState, PolicyError> {
        let mut next = state.clone();
        next.apply(node, self.policy.config.split_delivery)?;
        let h = self.tape.constant(state.memory.clone());
        let h = self.policy.advance(&mut self.tape, &self.enc, h, node, next.load);
        let out = h.map(|h| self.tape.value(h).clone());
        self.tape.truncate(self.base);
        next.memory = out?;
        Ok(next)
    }
}

#[cfg(test)]
mod tests;
