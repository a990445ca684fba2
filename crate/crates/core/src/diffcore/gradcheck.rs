use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::DiffError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Gradients smaller than this are compared on this absolute scale.
    pub floor: f64,
    /// When set, tapes are built in training mode with dropout masks drawn
    /// from this seed (identical on every rebuild).
    pub dropout_seed: Option<u64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            dropout_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Parameter name and its maximum relative error.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `build` with a
/// five-point central difference on every parameter element.
pub fn grad_check<F>(store: &ParamStore, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape) -> Result<Var, DiffError>,
{
    fn make<'a>(s: &'a ParamStore, seed: Option<u64>) -> Tape<'a> {
        match seed {
            Some(seed) => Tape::training(s, ChaCha8Rng::seed_from_u64(seed)),
            None => Tape::new(s),
        }
    }
    let mut tape = make(store, cfg.dropout_seed);
    let out = build(&mut tape)?;
    let grads = tape.backward(out, 1.0)?;

    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut t = make(s, cfg.dropout_seed);
        let v = build(&mut t)?;
        Ok(t.value(v).item())
    };

    let mut probe = store.clone();
    let mut per_param = Vec::with_capacity(store.len());
    let h = cfg.step;
    for id in store.ids() {
        let mut worst: f64 = 0.0;
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            let mut at = |delta: f64| -> Result<f64, DiffError> {
                probe.value_mut(id).data_mut()[k] = orig + delta;
                eval(&probe)
            };
            let (f2p, f1p, f1m, f2m) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        per_param.push((store.name(id).to_string(), worst));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_param,
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: max_rel_error <= cfg.tolerance,
    })
}
