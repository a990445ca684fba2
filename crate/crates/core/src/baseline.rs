//! Classical solvers under the detour metric: nearest feasible neighbour,
//! Clarke-Wright savings followed by 2-opt, and an exact solver for small
//! instances.

use crate::decode::Solution;
use crate::geometry::{GeometryError, Metric};
use crate::instance::Instance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

/// Largest customer count accepted by [`brute_force`].
pub const BRUTE_FORCE_MAX: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("exact search supports at most {BRUTE_FORCE_MAX} customers, got {0}")]
    TooLarge(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    NearestNeighbor,
    Savings2opt,
    BruteForce,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::NearestNeighbor => "nearest_neighbor",
            Self::Savings2opt => "savings_2opt",
            Self::BruteForce => "brute_force",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nn" | "nearest_neighbor" => Ok(Self::NearestNeighbor),
            "savings" | "savings_2opt" => Ok(Self::Savings2opt),
            "brute" | "brute_force" => Ok(Self::BruteForce),
            _ => Err(format!("unknown baseline '{s}' (expected nn, savings or brute)")),
        }
    }
}

/// Pairwise detour distances between all nodes.
pub fn distance_matrix(inst: &Instance) -> Result<Vec<Vec<f64>>, GeometryError> {
    let n = inst.n_nodes();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = Metric::Detour.leg(inst.node(i), inst.node(j), &inst.zones)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

fn finish(inst: &Instance, tours: &[Vec<usize>], label: &str) -> Result<Solution, GeometryError> {
    let mut seq = vec![0];
    for t in tours {
        seq.extend_from_slice(t);
        seq.push(0);
    }
    Solution::from_sequence(inst, &seq, false, label, None)
}

fn customers_with_demand(inst: &Instance) -> Vec<usize> {
    (1..inst.n_nodes()).filter(|&i| inst.demand(i) > 0).collect()
}

fn nn_tours(inst: &Instance, d: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut open = customers_with_demand(inst);
    let mut tours = Vec::new();
    let mut tour = Vec::new();
    let (mut at, mut load) = (0usize, inst.capacity);
    while !open.is_empty() {
        let next = open
            .iter()
            .enumerate()
            .filter(|(_, &c)| inst.demand(c) <= load)
            .min_by(|(_, &a), (_, &b)| d[at][a].total_cmp(&d[at][b]).then(a.cmp(&b)));
        match next {
            Some((k, &c)) => {
                open.remove(k);
                tour.push(c);
                load -= inst.demand(c);
                at = c;
            }
            None => {
                tours.push(std::mem::take(&mut tour));
                at = 0;
                load = inst.capacity;
            }
        }
    }
    if !tour.is_empty() {
        tours.push(tour);
    }
    tours
}

/// Greedy construction: always fly to the closest open customer that fits
/// the remaining load, otherwise return to the depot and reload.
pub fn nearest_feasible_neighbor(inst: &Instance) -> Result<Solution, BaselineError> {
    let d = distance_matrix(inst)?;
    Ok(finish(
        inst,
        &nn_tours(inst, &d),
        BaselineKind::NearestNeighbor.label(),
    )?)
}

#[cfg(test)]
fn tour_cost(t: &[usize], d: &[Vec<f64>]) -> f64 {
    let mut prev = 0;
    let mut s = 0.0;
    for &v in t.iter().chain(std::iter::once(&0)) {
        s += d[prev][v];
        prev = v;
    }
    s
}

/// 2-opt on one tour (customers only, depot implied at both ends) until no
/// segment reversal shortens it by more than `1e-12`.
pub fn two_opt(tour: &mut [usize], d: &[Vec<f64>]) {
    let n = tour.len();
    if n < 2 {
        return;
    }
    let at = |t: &[usize], k: isize| -> usize {
        if k < 0 || k as usize >= n {
            0
        } else {
            t[k as usize]
        }
    };
    loop {
        let mut improved = false;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (at(tour, i as isize - 1), tour[i]);
                let (c, e) = (tour[j], at(tour, j as isize + 1));
                let delta = d[a][c] + d[b][e] - d[a][b] - d[c][e];
                if delta < -1e-12 {
                    tour[i..=j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

fn savings_tours(inst: &Instance, d: &[Vec<f64>], noise: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let cust = customers_with_demand(inst);
    let mut pairs = Vec::new();
    for (a, &i) in cust.iter().enumerate() {
        for &j in &cust[a + 1..] {
            let s = d[0][i] + d[0][j] - d[i][j];
            let jitter = if noise > 0.0 {
                1.0 + noise * rng.random::<f64>()
            } else {
                1.0
            };
            pairs.push((s * jitter, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let n = inst.n_nodes();
    let mut route_of: Vec<usize> = (0..n).collect();
    let mut routes: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut load: Vec<u32> = (0..n).map(|i| inst.demand(i)).collect();
    for (s, i, j) in pairs {
        if s <= 0.0 {
            break;
        }
        let (ri, rj) = (route_of[i], route_of[j]);
        if ri == rj || load[ri] + load[rj] > inst.capacity {
            continue;
        }
        let (mut a, mut b) = (routes[ri].take().unwrap(), routes[rj].take().unwrap());
        // Orient so that i ends route a and j starts route b.
        if a.last() != Some(&i) {
            a.reverse();
        }
        if b.first() != Some(&j) {
            b.reverse();
        }
        if a.last() != Some(&i) || b.first() != Some(&j) {
            routes[ri] = Some(a);
            routes[rj] = Some(b);
            continue;
        }
        a.extend(b);
        for &v in &a {
            route_of[v] = ri;
        }
        load[ri] += load[rj];
        routes[ri] = Some(a);
    }
    cust.iter().filter_map(|&c| routes[c].take()).collect()
}

/// Savings construction plus 2-opt, best of `restarts` runs; the first run is
/// noise-free, later ones scale every saving by `1 + 0.1·U(0,1)`. The
/// 2-opted nearest-neighbour plan is always among the candidates.
pub fn savings_2opt(inst: &Instance, seed: u64, restarts: usize) -> Result<Solution, BaselineError> {
    let d = distance_matrix(inst)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = BaselineKind::Savings2opt.label();

    let raw_nn = finish(inst, &nn_tours(inst, &d), label)?;
    let mut best: Option<Solution> = None;
    let mut consider = |sol: Solution| {
        if best.as_ref().is_none_or(|b| sol.length < b.length) {
            best = Some(sol);
        }
    };
    let mut nn = nn_tours(inst, &d);
    nn.iter_mut().for_each(|t| two_opt(t, &d));
    consider(finish(inst, &nn, label)?);
    for r in 0..restarts.max(1) {
        let noise = if r == 0 { 0.0 } else { 0.1 };
        let mut tours = savings_tours(inst, &d, noise, &mut rng);
        tours.iter_mut().for_each(|t| two_opt(t, &d));
        consider(finish(inst, &tours, label)?);
    }
    let best = best.expect("at least one candidate");
    // Matrix-based 2-opt moves can differ from recomputed lengths in the last
    // ulp; never hand back something longer than the plain construction.
    Ok(if best.length <= raw_nn.length { best } else { raw_nn })
}

/// Exact minimum-length plan for at most [`BRUTE_FORCE_MAX`] customers.
///
/// Held-Karp gives the cheapest single tour over every capacity-feasible
/// customer subset; a second subset DP partitions the customers into such
/// tours. Each tour is oriented so its first customer has the lower index and
/// tours are listed by first customer.
pub fn brute_force(inst: &Instance) -> Result<Solution, BaselineError> {
    let cust = customers_with_demand(inst);
    let k = cust.len();
    if inst.n_customers() > BRUTE_FORCE_MAX {
        return Err(BaselineError::TooLarge(inst.n_customers()));
    }
    let d = distance_matrix(inst)?;
    let full = (1usize << k) - 1;
    let demand: Vec<u32> = (0..=full)
        .map(|s| (0..k).filter(|b| s >> b & 1 == 1).map(|b| inst.demand(cust[b])).sum())
        .collect();

    // path[s][j]: cheapest depot → … → cust[j] covering subset s (j ∈ s).
    let mut path = vec![vec![f64::INFINITY; k]; full + 1];
    let mut prev = vec![vec![usize::MAX; k]; full + 1];
    for j in 0..k {
        path[1 << j][j] = d[0][cust[j]];
    }
    for s in 1..=full {
        if demand[s] > inst.capacity {
            continue;
        }
        for j in 0..k {
            if s >> j & 1 == 0 || !path[s][j].is_finite() {
                continue;
            }
            for m in 0..k {
                if s >> m & 1 == 1 {
                    continue;
                }
                let t = s | 1 << m;
                let c = path[s][j] + d[cust[j]][cust[m]];
                if c < path[t][m] {
                    path[t][m] = c;
                    prev[t][m] = j;
                }
            }
        }
    }
    let mut tour = vec![(f64::INFINITY, usize::MAX); full + 1];
    for s in 1..=full {
        if demand[s] > inst.capacity {
            continue;
        }
        for j in 0..k {
            let c = path[s][j] + d[cust[j]][0];
            if c < tour[s].0 {
                tour[s] = (c, j);
            }
        }
    }

    // best[s]: cheapest set of tours covering s; the tour holding the lowest
    // member of s is enumerated explicitly.
    let mut best = vec![(f64::INFINITY, 0usize); full + 1];
    best[0] = (0.0, 0);
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s ^ low;
        let mut sub = rest;
        loop {
            let t = sub | low;
            if tour[t].0.is_finite() {
                let c = tour[t].0 + best[s ^ t].0;
                if c < best[s].0 {
                    best[s] = (c, t);
                }
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }

    let mut tours = Vec::new();
    let mut s = full;
    while s != 0 {
        let t = best[s].1;
        let mut order = Vec::new();
        let (mut set, mut j) = (t, tour[t].1);
        while j != usize::MAX {
            order.push(cust[j]);
            let pj = prev[set][j];
            set &= !(1 << j);
            j = pj;
        }
        order.reverse();
        if order.len() > 1 && order[0] > *order.last().unwrap() {
            order.reverse();
        }
        tours.push(order);
        s ^= t;
    }
    tours.sort();
    Ok(finish(inst, &tours, BaselineKind::BruteForce.label())?)
}

pub fn solve_baseline(kind: BaselineKind, inst: &Instance, seed: u64) -> Result<Solution, BaselineError> {
    match kind {
        BaselineKind::NearestNeighbor => nearest_feasible_neighbor(inst),
        BaselineKind::Savings2opt => savings_2opt(inst, seed, 10),
        BaselineKind::BruteForce => brute_force(inst),
    }
}
