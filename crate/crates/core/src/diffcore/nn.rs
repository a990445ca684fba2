//! Layers assembled from tape primitives.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::DiffError;
use rand::Rng;

/// Fully connected layer `x · w + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_uniform(format!("{name}.w"), &[inp, out], inp, rng),
            b: store.add_uniform(format!("{name}.b"), &[out], inp, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.affine(x, w, b)
    }
}

/// Single-layer gated recurrent cell with update and reset gates:
///
/// ```text
/// z  = σ(x·Wz + h·Uz + bz)
/// r  = σ(x·Wr + h·Ur + br)
/// n  = tanh(x·Wn + bn + r ⊙ (h·Un))
/// h' = n + z ⊙ (h − n)
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    gates: [(ParamId, ParamId, ParamId); 3],
    pub input: usize,
    pub hidden: usize,
}

/// Cell parameters bound to one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundGru {
    gates: [(Var, Var, Var); 3],
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut gate = |g: &str| {
            (
                store.add_uniform(format!("{name}.w{g}"), &[input, hidden], hidden, rng),
                store.add_uniform(format!("{name}.u{g}"), &[hidden, hidden], hidden, rng),
                store.add_uniform(format!("{name}.b{g}"), &[hidden], hidden, rng),
            )
        };
        let gates = [gate("z"), gate("r"), gate("n")];
        Self { gates, input, hidden }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundGru {
        let mut bind = |(w, u, b): (ParamId, ParamId, ParamId)| (tape.param(w), tape.param(u), tape.param(b));
        BoundGru {
            gates: [bind(self.gates[0]), bind(self.gates[1]), bind(self.gates[2])],
        }
    }
}

impl BoundGru {
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var, DiffError> {
        let gate = |tape: &mut Tape, (w, u, b): (Var, Var, Var)| -> Result<Var, DiffError> {
            let xs = tape.matmul(x, w)?;
            let hs = tape.matmul(h, u)?;
            let s = tape.add(xs, hs)?;
            let s = tape.add(s, b)?;
            Ok(tape.sigmoid(s))
        };
        let z = gate(tape, self.gates[0])?;
        let r = gate(tape, self.gates[1])?;
        let (wn, un, bn) = self.gates[2];
        let xn = tape.matmul(x, wn)?;
        let xn = tape.add(xn, bn)?;
        let hn = tape.matmul(h, un)?;
        let rhn = tape.mul(r, hn)?;
        let pre = tape.add(xn, rhn)?;
        let n = tape.tanh(pre);
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}
