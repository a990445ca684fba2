use super::*;
use crate::diffcore::{grad_check, GradCheckConfig};
use crate::geometry::Point;
use crate::instance::{generate_instance, Customer, GeneratorConfig, DEFAULT_DEPOT, DEFAULT_ZONE};
use rand::Rng;

fn small_config(m: usize) -> PolicyConfig {
    PolicyConfig {
        embed_dim: m,
        hidden_dim: m,
        dropout: 0.0,
        ..PolicyConfig::default()
    }
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

fn five_nodes() -> Instance {
    instance(&[(0.1, 0.8, 4), (0.7, 0.2, 9), (0.9, 0.9, 1), (0.55, 0.35, 6)], 30)
}

fn state(demands: Vec<u32>, load: u32, last: usize) -> DecodeState {
    DecodeState {
        demands,
        load,
        capacity: 30,
        last,
        memory: Tensor::zeros(&[1]),
        sequence: vec![0, last],
    }
}

// ---- scratch evaluation of the attention/context/pointer formulas ----

struct Raw<'a>(&'a Policy);

impl Raw<'_> {
    fn t(&self, name: &str) -> &Tensor {
        self.0.store.value(self.0.store.id(name).unwrap())
    }

    fn mat(&self, name: &str) -> Vec<Vec<f64>> {
        let t = self.t(name);
        let (r, c) = t.dims2();
        (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.t(name).data().to_vec()
    }
}

fn vec_mat(v: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (vi, row) in v.iter().zip(w) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += vi * x;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Embeddings, attention, context and masked pointer probabilities computed
/// node by node from the concatenated-input form `W [x; h]`.
fn scratch(
    p: &Policy,
    inst: &Instance,
    demands: &[u32],
    h: &[f64],
    allowed: &[bool],
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = Raw(p);
    let (sw, sb, dw, db) = (
        r.mat("embed.static_w"),
        r.vec("embed.static_b"),
        r.vec("embed.demand_w"),
        r.vec("embed.demand_b"),
    );
    let cap = inst.capacity as f64;
    let x: Vec<Vec<f64>> = (0..inst.n_nodes())
        .map(|i| {
            let pt = inst.node(i);
            let s = vec_mat(&[pt.x, pt.y], &sw);
            (0..sb.len())
                .map(|k| s[k] + sb[k] + demands[i] as f64 / cap * dw[k] + db[k])
                .collect()
        })
        .collect();
    // W_a = [W_ax; W_ah] stacked so that W_a [x; h] = [x, h] · W_a.
    let mut wa = r.mat("attn.w_node");
    wa.extend(r.mat("attn.w_memory"));
    let va = r.vec("attn.v");
    let u: Vec<f64> = x
        .iter()
        .map(|xi| {
            let cat: Vec<f64> = xi.iter().chain(h).cloned().collect();
            let z: Vec<f64> = vec_mat(&cat, &wa).iter().map(|v| v.tanh()).collect();
            dot(&va, &z)
        })
        .collect();
    let a = softmax(&u);
    let m = x[0].len();
    let c: Vec<f64> = (0..m)
        .map(|k| x.iter().zip(&a).map(|(xi, ai)| ai * xi[k]).sum())
        .collect();
    let mut wc = r.mat("ptr.w_node");
    wc.extend(r.mat("ptr.w_context"));
    let vc = r.vec("ptr.v");
    let ut: Vec<f64> = x
        .iter()
        .map(|xi| {
            let cat: Vec<f64> = xi.iter().chain(&c).cloned().collect();
            let z: Vec<f64> = vec_mat(&cat, &wc).iter().map(|v| v.tanh()).collect();
            dot(&vc, &z)
        })
        .collect();
    let feasible: Vec<f64> = ut.iter().zip(allowed).filter(|(_, &a)| a).map(|(u, _)| *u).collect();
    let sm = softmax(&feasible);
    let mut it = sm.into_iter();
    let probs = allowed
        .iter()
        .map(|&ok| if ok { it.next().unwrap() } else { 0.0 })
        .collect();
    (x, a, c, probs)
}

#[test]
fn step_matches_scratch_evaluation() {
    let p = Policy::new(small_config(6), 11);
    let inst = five_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let demands = vec![0, 4, 0, 1, 6];
    let allowed = vec![true, true, false, true, false];

    let mut tape = Tape::new(&p.store);
    let enc = p.encode(&mut tape, &inst).unwrap();
    let hv = tape.constant(Tensor::vector(h.clone()));
    let sv = p.step(&mut tape, &enc, hv, &demands, &allowed).unwrap();
    let xv = p.embeddings(&mut tape, &enc, &demands).unwrap();

    let (x, a, c, probs) = scratch(&p, &inst, &demands, &h, &allowed);
    let flat: Vec<f64> = x.concat();
    for (u, v) in tape.value(xv).data().iter().zip(&flat) {
        assert!((u - v).abs() < 1e-12);
    }
    for (u, v) in tape.value(sv.attention).data().iter().zip(&a) {
        assert!((u - v).abs() < 1e-12);
    }
    for (u, v) in tape.value(sv.context).data().iter().zip(&c) {
        assert!((u - v).abs() < 1e-12);
    }
    let got = masked_softmax_values(tape.value(sv.scores).data(), &allowed);
    for (u, v) in got.iter().zip(&probs) {
        assert!((u - v).abs() < 1e-12, "{got:?} vs {probs:?}");
    }
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn embedding_is_per_node() {
    let p = Policy::new(small_config(5), 2);
    let inst = instance(&[(0.8, 0.1, 3), (0.8, 0.1, 3), (0.2, 0.9, 5)], 30);
    let mut tape = Tape::new(&p.store);
    let enc = p.encode(&mut tape, &inst).unwrap();
    let x = p.embeddings(&mut tape, &enc, &[0, 3, 3, 5]).unwrap();
    let rows: Vec<Vec<f64>> = tape.value(x).data().chunks(5).map(<[f64]>::to_vec).collect();
    assert_eq!(rows[1], rows[2]);
    let y = p.embeddings(&mut tape, &enc, &[0, 3, 3, 0]).unwrap();
    let rows2: Vec<Vec<f64>> = tape.value(y).data().chunks(5).map(<[f64]>::to_vec).collect();
    assert_eq!(rows[..3], rows2[..3]);
    assert_ne!(rows[3], rows2[3]);

    let mut z = p.clone();
    z.zero_params();
    let mut tape = Tape::new(&z.store);
    let enc = z.encode(&mut tape, &inst).unwrap();
    let x = z.embeddings(&mut tape, &enc, &[0, 3, 3, 5]).unwrap();
    assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mask_rules() {
    let s = state(vec![0, 9, 3, 0], 4, 1);
    assert_eq!(feasibility_mask(&s, false), vec![true, false, true, false]);
    let s = state(vec![0, 0, 0], 10, 2);
    assert_eq!(feasibility_mask(&s, false), vec![true, false, false]);
    let inst = five_nodes();
    let s = DecodeState::new(&inst, Tensor::zeros(&[1]));
    assert_eq!(feasibility_mask(&s, false), vec![false, true, true, true, true]);
}

#[test]
fn only_depot_open_gives_depot_probability_one() {
    let p = Policy::new(small_config(4), 3);
    let inst = five_nodes();
    let mut sess = Session::new(&p, &inst).unwrap();
    let mut st = sess.start(&inst).unwrap();
    st.demands = vec![0, 0, 9, 0, 0];
    st.load = 2;
    st.last = 1;
    let probs = sess.probabilities(&st).unwrap();
    assert_eq!(probs, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn all_masked_is_an_error() {
    let p = Policy::new(small_config(4), 3);
    let inst = five_nodes();
    let mut sess = Session::new(&p, &inst).unwrap();
    let mut st = sess.start(&inst).unwrap();
    st.demands = vec![0, 0, 0, 0, 0];
    assert_eq!(sess.probabilities(&st).unwrap_err(), PolicyError::AllMasked);
}

#[test]
fn transition_rules() {
    let mut s = state(vec![0, 5], 9, 0);
    s.apply(1, false).unwrap();
    assert_eq!((s.demands[1], s.load), (0, 4));

    let mut s = state(vec![0, 9], 5, 0);
    assert!(matches!(
        s.apply(1, false),
        Err(PolicyError::InfeasibleChoice { node: 1, .. })
    ));
    s.apply(1, true).unwrap();
    assert_eq!((s.demands[1], s.load), (4, 0));

    let mut s = state(vec![0, 7, 2], 3, 2);
    s.apply(0, false).unwrap();
    assert_eq!(s.load, 30);
    assert_eq!(s.demands, vec![0, 7, 2]);
    assert!(matches!(
        s.apply(0, false),
        Err(PolicyError::InfeasibleChoice { node: 0, .. })
    ));
}

#[test]
fn coordinate_blind_policy_treats_mirrored_pair_equally() {
    let mut p = Policy::new(small_config(8), 9);
    let id = p.static_weight_id();
    p.store.value_mut(id).data_mut().fill(0.0);
    let inst = instance(&[(0.7, 0.6, 5), (0.3, 0.4, 5)], 30);
    let mut sess = Session::new(&p, &inst).unwrap();
    let st = sess.start(&inst).unwrap();
    let probs = sess.probabilities(&st).unwrap();
    assert!((probs[1] - probs[2]).abs() < 1e-9);
    assert!((probs[1] - 0.5).abs() < 1e-9);
}

#[test]
fn permuting_customers_permutes_probabilities() {
    let p = Policy::new(small_config(8), 4);
    let inst = generate_instance(&GeneratorConfig::new(7, 30, 21)).unwrap();
    let perm = [0usize, 3, 7, 1, 5, 2, 6, 4];
    let mut permuted = inst.clone();
    permuted.customers = perm[1..].iter().map(|&i| inst.customers[i - 1].clone()).collect();

    let mut a = Session::new(&p, &inst).unwrap();
    let mut b = Session::new(&p, &permuted).unwrap();
    let (mut sa, mut sb) = (a.start(&inst).unwrap(), b.start(&permuted).unwrap());
    // Follow the same physical route in both numberings.
    for &node in &[3usize, 5, 0, 1] {
        let pa = a.probabilities(&sa).unwrap();
        let pb = b.probabilities(&sb).unwrap();
        for (j, &orig) in perm.iter().enumerate() {
            assert!((pb[j] - pa[orig]).abs() < 1e-9);
        }
        let nb = perm.iter().position(|&o| o == node).unwrap();
        sa = a.advance(&sa, node).unwrap();
        sb = b.advance(&sb, nb).unwrap();
    }
}

#[test]
fn rollouts_terminate_and_distributions_are_valid() {
    let p = Policy::new(small_config(8), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..30 {
        let n = [1, 4, 10, 20][seed % 4];
        let inst = generate_instance(&GeneratorConfig::new(n, 30, seed as u64)).unwrap();
        let mut tape = Tape::new(&p.store);
        let (st, _) = p
            .rollout(&mut tape, &inst, |probs, s| {
                let allowed = feasibility_mask(s, false);
                let total: f64 = probs.iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
                for (pr, ok) in probs.iter().zip(&allowed) {
                    assert!(*pr >= 0.0);
                    if !ok {
                        assert_eq!(*pr, 0.0);
                    }
                }
                let r: f64 = rng.random();
                let mut acc = 0.0;
                for (i, pr) in probs.iter().enumerate() {
                    acc += pr;
                    if r < acc && *pr > 0.0 {
                        return i;
                    }
                }
                probs.iter().rposition(|&q| q > 0.0).unwrap()
            })
            .unwrap();
        assert!(st.is_complete());
        assert!(st.steps() <= 2 * n + 2);
        assert_eq!(st.sequence.last(), Some(&0));
        assert!(st.sequence.windows(2).all(|w| !(w[0] == 0 && w[1] == 0)));
    }
}

#[test]
fn split_delivery_rollout_terminates() {
    let cfg = PolicyConfig {
        split_delivery: true,
        ..small_config(4)
    };
    let p = Policy::new(cfg, 1);
    let inst = instance(&[(0.8, 0.8, 9), (0.9, 0.6, 9), (0.7, 0.9, 9)], 10);
    let mut tape = Tape::new(&p.store);
    let (st, _) = p
        .rollout(&mut tape, &inst, |probs, _| {
            probs.iter().position(|&q| q > 0.0).unwrap()
        })
        .unwrap();
    assert!(st.is_complete());
    // 27 units with capacity 10: three loads at least.
    assert!(st.sequence.iter().filter(|&&v| v == 0).count() >= 4);
}

#[test]
fn inner_softmax_variant_is_a_distribution() {
    let cfg = PolicyConfig {
        inner_softmax: true,
        ..small_config(6)
    };
    let p = Policy::new(cfg, 6);
    let inst = five_nodes();
    let mut sess = Session::new(&p, &inst).unwrap();
    let st = sess.start(&inst).unwrap();
    let probs = sess.probabilities(&st).unwrap();
    assert_eq!(probs[0], 0.0);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn composed_policy_gradient_check() {
    let cfg = PolicyConfig {
        dropout: 0.1,
        ..small_config(8)
    };
    let p = Policy::new(cfg, 17);
    let inst = five_nodes();
    // Fix the action sequence from a greedy pass so that perturbed forward
    // passes score the same route.
    let mut tape = Tape::new(&p.store);
    let (st, _) = p
        .rollout(&mut tape, &inst, |probs, _| {
            let mut best = 0;
            for i in 0..probs.len() {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            best
        })
        .unwrap();
    let actions = st.sequence[1..].to_vec();
    let build = |t: &mut Tape| -> Result<Var, DiffError> {
        let mut k = 0;
        let (_, lp) = p
            .rollout(t, &inst, |_, _| {
                k += 1;
                actions[k - 1]
            })
            .map_err(|e| match e {
                PolicyError::Diff(d) => d,
                other => panic!("{other}"),
            })?;
        Ok(lp)
    };
    let check = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-4,
        floor: 1e-4,
        dropout_seed: Some(99),
    };
    let report = grad_check(&p.store, build, &check).unwrap();
    assert!(report.passed, "{:?}", report.per_param);
}

#[test]
fn checkpoint_restores_policy() {
    let p = Policy::new(small_config(4), 12);
    let ck = Checkpoint::from_store(&p.store, serde_json::json!({ "policy": p.config }));
    let q = Policy::from_checkpoint(&Checkpoint::from_json(&ck.to_json()).unwrap()).unwrap();
    assert_eq!(q.store, p.store);
    assert!(Policy::from_checkpoint(&Checkpoint::from_store(&p.store, serde_json::json!({}))).is_err());
}
