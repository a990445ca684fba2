//! Greedy, sampling and beam-search decoders, and the solution format they
//! share with the baselines.

use crate::geometry::{GeometryError, Metric};
use crate::instance::Instance;
use crate::policy::{feasibility_mask, DecodeState, Policy, PolicyError, Session};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("beam width must be at least 1")]
    ZeroWidth,
}

/// A depot-delimited multi-UAV plan.
///
/// `loads[u]` is the cumulative delivered amount along tour `u`, one entry per
/// node of the tour, so it starts at 0 and repeats its final value on the
/// return to the depot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub length: f64,
    pub tours: Vec<Vec<usize>>,
    pub loads: Vec<Vec<u32>>,
    pub decoder: String,
    pub width: Option<usize>,
}

impl Solution {
    /// Builds a solution from a full node sequence starting and ending at the
    /// depot. With `split` each visit delivers `min(remaining demand, free
    /// capacity)`; otherwise a visit delivers the customer's whole demand.
    pub fn from_sequence(
        inst: &Instance,
        seq: &[usize],
        split: bool,
        decoder: &str,
        width: Option<usize>,
    ) -> Result<Self, GeometryError> {
        let length = inst.sequence_length(seq, Metric::Detour)?;
        let mut remaining = inst.demands();
        let mut tours = Vec::new();
        let mut loads = Vec::new();
        let mut tour = vec![0];
        let mut trace = vec![0];
        for &v in seq.iter().skip_while(|&&v| v == 0) {
            if v == 0 {
                tour.push(0);
                trace.push(*trace.last().unwrap());
                tours.push(std::mem::replace(&mut tour, vec![0]));
                loads.push(std::mem::replace(&mut trace, vec![0]));
                continue;
            }
            let cum = *trace.last().unwrap();
            let give = match remaining.get(v) {
                Some(&r) if split => r.min(inst.capacity.saturating_sub(cum)),
                Some(_) => inst.demand(v),
                None => 0,
            };
            if let Some(r) = remaining.get_mut(v) {
                *r = r.saturating_sub(give);
            }
            tour.push(v);
            trace.push(cum + give);
        }
        if tour.len() > 1 {
            // Unterminated trailing tour; kept so validation can report it.
            tours.push(tour);
            loads.push(trace);
        }
        Ok(Self {
            length,
            tours,
            loads,
            decoder: decoder.to_string(),
            width,
        })
    }

    /// The flat node sequence, depot visits shared between consecutive tours.
    pub fn sequence(&self) -> Vec<usize> {
        let mut seq = vec![0];
        for t in &self.tours {
            let start = usize::from(t.first() == Some(&0));
            seq.extend_from_slice(&t[start..]);
        }
        seq
    }

    pub fn n_uavs(&self) -> usize {
        self.tours.len()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("solution serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `probs` by inverse CDF; masked (zero) entries are
/// never returned.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if r < acc {
            return i;
        }
    }
    last
}

fn run(
    policy: &Policy,
    inst: &Instance,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<(DecodeState, Vec<f64>), DecodeError> {
    let mut sess = Session::new(policy, inst)?;
    let mut st = sess.start(inst)?;
    let mut log_probs = Vec::new();
    while !st.is_complete() {
        let probs = sess.probabilities(&st)?;
        let node = choose(&probs);
        log_probs.push(probs[node].ln());
        st = sess.advance(&st, node)?;
    }
    Ok((st, log_probs))
}

pub fn greedy_decode(policy: &Policy, inst: &Instance) -> Result<Solution, DecodeError> {
    let (st, _) = run(policy, inst, argmax)?;
    Ok(Solution::from_sequence(
        inst,
        &st.sequence,
        policy.config.split_delivery,
        "greedy",
        Some(1),
    )?)
}

/// Samples every action from the pointer distribution; also returns the
/// per-step log-probabilities of the chosen actions.
pub fn sample_decode<R: Rng>(
    policy: &Policy,
    inst: &Instance,
    rng: &mut R,
) -> Result<(Solution, Vec<f64>), DecodeError> {
    let (st, lp) = run(policy, inst, |p| sample_index(p, rng))?;
    let sol = Solution::from_sequence(inst, &st.sequence, policy.config.split_delivery, "sample", Some(1))?;
    Ok((sol, lp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamSelect {
    /// Completed beam with the shortest route.
    Length,
    /// Completed beam with the highest cumulative log-probability.
    LogProb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamOptions {
    pub width: usize,
    /// Reserve one slot for the greedy rollout.
    pub guard: bool,
    pub select: BeamSelect,
}

impl BeamOptions {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            guard: true,
            select: BeamSelect::Length,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Beam {
    pub state: DecodeState,
    pub log_prob: f64,
    pub complete: bool,
}

struct Finished {
    seq: Vec<usize>,
    log_prob: f64,
    length: f64,
}

/// Plain beam search: keeps the `width` most probable open prefixes at every
/// step and parks the ones that complete. Ties go to the earlier beam, then
/// the lower node index.
pub fn beam_candidates(policy: &Policy, inst: &Instance, width: usize) -> Result<Vec<Beam>, DecodeError> {
    let mut sess = Session::new(policy, inst)?;
    let start = sess.start(inst)?;
    let start = Beam {
        complete: start.is_complete(),
        state: start,
        log_prob: 0.0,
    };
    let mut parked = Vec::new();
    let mut open = Vec::new();
    if start.complete {
        parked.push(start);
    } else {
        open.push(start);
    }
    while !open.is_empty() {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, beam) in open.iter().enumerate() {
            let probs = sess.probabilities(&beam.state)?;
            let mask = feasibility_mask(&beam.state, policy.config.split_delivery);
            for (j, &p) in probs.iter().enumerate() {
                if mask[j] && p > 0.0 {
                    cands.push((beam.log_prob + p.ln(), b, j));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for (lp, b, j) in cands {
            let state = sess.advance(&open[b].state, j)?;
            next.push(Beam {
                complete: state.is_complete(),
                state,
                log_prob: lp,
            });
        }
        for b in next.iter().filter(|b| b.complete) {
            parked.push(b.clone());
        }
        next.retain(|b| !b.complete);
        open = next;
    }
    Ok(parked)
}

/// Beam search of width `opts.width`. With the guard enabled the greedy
/// rollout occupies one slot and the remaining `width − 1` slots run a plain
/// beam search, so the result is never longer than greedy decoding.
pub fn beam_search(policy: &Policy, inst: &Instance, opts: BeamOptions) -> Result<Solution, DecodeError> {
    if opts.width == 0 {
        return Err(DecodeError::ZeroWidth);
    }
    let split = policy.config.split_delivery;
    let mut done = Vec::new();
    let free = if opts.guard { opts.width - 1 } else { opts.width };
    if free > 0 {
        for b in beam_candidates(policy, inst, free)? {
            done.push(Finished {
                length: inst.sequence_length(&b.state.sequence, Metric::Detour)?,
                seq: b.state.sequence,
                log_prob: b.log_prob,
            });
        }
    }
    if opts.guard {
        let (st, lp) = run(policy, inst, argmax)?;
        done.push(Finished {
            length: inst.sequence_length(&st.sequence, Metric::Detour)?,
            seq: st.sequence,
            log_prob: lp.iter().sum(),
        });
    }
    let best = done
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            let primary = match opts.select {
                BeamSelect::Length => a.length.total_cmp(&b.length),
                BeamSelect::LogProb => b.log_prob.total_cmp(&a.log_prob),
            };
            primary.then(i.cmp(j))
        })
        .map(|(_, f)| f)
        .expect("at least one completed beam");
    Ok(Solution::from_sequence(
        inst,
        &best.seq,
        split,
        "beam",
        Some(opts.width),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::instance::{generate_instance, Customer, GeneratorConfig, DEFAULT_DEPOT, DEFAULT_ZONE};
    use crate::policy::PolicyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> Policy {
        Policy::new(
            PolicyConfig {
                embed_dim: 8,
                hidden_dim: 8,
                dropout: 0.0,
                ..PolicyConfig::default()
            },
            seed,
        )
    }

    fn instance(points: &[(f64, f64, u32)], capacity: u32) -> Instance {
        Instance {
            depot: DEFAULT_DEPOT,
            customers: points
                .iter()
                .map(|&(x, y, d)| Customer {
                    position: Point::new(x, y),
                    demand: d,
                })
                .collect(),
            zones: vec![DEFAULT_ZONE],
            capacity,
        }
    }

    #[test]
    fn single_customer_round_trip() {
        let inst = instance(&[(0.9, 0.2, 7)], 30);
        let sol = greedy_decode(&policy(1), &inst).unwrap();
        assert_eq!(sol.tours, vec![vec![0, 1, 0]]);
        assert_eq!(sol.loads, vec![vec![0, 7, 7]]);
    }

    #[test]
    fn zero_params_break_ties_by_index() {
        let mut p = policy(1);
        p.zero_params();
        let inst = instance(&[(0.9, 0.2, 7), (0.1, 0.8, 3)], 30);
        let sol = greedy_decode(&p, &inst).unwrap();
        // Every open node scores the same, so node 1 goes first and the depot
        // (index 0) wins the next tie.
        assert_eq!(sol.sequence(), vec![0, 1, 0, 2, 0]);
    }

    #[test]
    fn sequence_split_into_tours() {
        let inst = instance(&[(0.9, 0.2, 7), (0.1, 0.8, 3), (0.6, 0.9, 5)], 10);
        let sol = Solution::from_sequence(&inst, &[0, 1, 2, 0, 3, 0], false, "x", None).unwrap();
        assert_eq!(sol.tours, vec![vec![0, 1, 2, 0], vec![0, 3, 0]]);
        assert_eq!(sol.loads, vec![vec![0, 7, 10, 10], vec![0, 5, 5]]);
        assert_eq!(sol.sequence(), vec![0, 1, 2, 0, 3, 0]);
        let back = Solution::from_json(&sol.to_json()).unwrap();
        assert_eq!(back, sol);
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..100u64 {
            let inst = generate_instance(&GeneratorConfig::new(6 + (seed % 5) as usize, 30, seed)).unwrap();
            let p = policy(seed % 7);
            let g = greedy_decode(&p, &inst).unwrap();
            for guard in [true, false] {
                let b = beam_search(
                    &p,
                    &inst,
                    BeamOptions {
                        guard,
                        ..BeamOptions::new(1)
                    },
                )
                .unwrap();
                assert_eq!(b.tours, g.tours, "seed {seed} guard {guard}");
            }
        }
    }

    #[test]
    fn wide_beam_enumerates_two_customers() {
        let inst = instance(&[(0.2, 0.2, 4), (0.15, 0.45, 6)], 30);
        let p = policy(3);
        let found = beam_candidates(&p, &inst, 10).unwrap();
        let mut seqs: Vec<Vec<usize>> = found.iter().map(|b| b.state.sequence.clone()).collect();
        seqs.sort();
        let all = vec![
            vec![0, 1, 0, 2, 0],
            vec![0, 1, 2, 0],
            vec![0, 2, 0, 1, 0],
            vec![0, 2, 1, 0],
        ];
        assert_eq!(seqs, all);
        let best = all
            .iter()
            .map(|s| inst.sequence_length(s, Metric::Detour).unwrap())
            .fold(f64::INFINITY, f64::min);
        for guard in [true, false] {
            let sol = beam_search(
                &p,
                &inst,
                BeamOptions {
                    guard,
                    ..BeamOptions::new(10)
                },
            )
            .unwrap();
            assert_eq!(sol.length, best);
        }
    }

    #[test]
    fn beam_never_loses_to_greedy() {
        for seed in 0..40u64 {
            let inst = generate_instance(&GeneratorConfig::new(10, 30, 100 + seed)).unwrap();
            let p = policy(seed);
            let g = greedy_decode(&p, &inst).unwrap();
            for k in [2, 3, 5] {
                let b = beam_search(&p, &inst, BeamOptions::new(k)).unwrap();
                assert!(b.length <= g.length, "seed {seed} width {k}");
            }
        }
    }

    #[test]
    fn first_step_expansion_is_nested() {
        let inst = generate_instance(&GeneratorConfig::new(10, 30, 5)).unwrap();
        let p = policy(2);
        let mut sess = Session::new(&p, &inst).unwrap();
        let st = sess.start(&inst).unwrap();
        let probs = sess.probabilities(&st).unwrap();
        let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        for k in 2..=5 {
            let top_k: Vec<usize> = order[..k].to_vec();
            let top_k1 = &order[..k - 1];
            assert!(top_k1.iter().all(|v| top_k.contains(v)));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let inst = generate_instance(&GeneratorConfig::new(10, 30, 9)).unwrap();
        let p = policy(4);
        let a = sample_decode(&p, &inst, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_decode(&p, &inst, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), a.0.sequence().len() - 1);
    }

    #[test]
    fn collapsed_distribution_sampling_matches_greedy() {
        // A single customer leaves exactly one feasible node at every step.
        let inst = instance(&[(0.7, 0.7, 3)], 30);
        let p = policy(4);
        let (s, lp) = sample_decode(&p, &inst, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.tours, greedy_decode(&p, &inst).unwrap().tours);
        assert!(lp.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn first_action_frequencies_match_probabilities() {
        let inst = generate_instance(&GeneratorConfig::new(5, 30, 13)).unwrap();
        let p = policy(6);
        let mut sess = Session::new(&p, &inst).unwrap();
        let st = sess.start(&inst).unwrap();
        let probs = sess.probabilities(&st).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..n {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        for (c, &pr) in counts.iter().zip(&probs) {
            let se = (pr * (1.0 - pr) / n as f64).sqrt();
            let f = *c as f64 / n as f64;
            assert!((f - pr).abs() <= 3.0 * se + 1e-12, "{f} vs {pr}");
        }
        assert_eq!(counts[0], 0);
    }

    #[test]
    fn zero_width_rejected() {
        let inst = instance(&[(0.7, 0.7, 3)], 30);
        assert_eq!(
            beam_search(&policy(0), &inst, BeamOptions::new(0)).unwrap_err(),
            DecodeError::ZeroWidth
        );
    }
}
