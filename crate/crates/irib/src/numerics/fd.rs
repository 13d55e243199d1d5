//! Finite-difference gradient oracle. Verifies reverse-mode gradients of any
//! scalar objective over a `ParamStore` against central differences on a
//! sample of parameter coordinates.

use rand::Rng;

use crate::numerics::ParamStore;
use crate::{Error, Result};

/// A differentiable objective: returns the scalar value and the flattened
/// gradient vector over the store (in store order). Must be a deterministic
/// function of the parameter values.
pub type Objective<'a> = dyn Fn(&ParamStore) -> Result<(f64, Vec<f64>)> + 'a;

/// Max over sampled coordinates of |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|),
/// with g_fd the central difference (f(x+step) - f(x-step)) / (2 step).
///
/// The objective is evaluated twice at the base point first; any bitwise
/// mismatch between the two evaluations is rejected as non-determinism.
/// `sample_count` coordinates are drawn without replacement from a seeded
/// stream; if it meets or exceeds the coordinate count, all are checked.
pub fn finite_diff_check(
    f: &Objective,
    store: &mut ParamStore,
    step: f64,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let (loss_a, grad_a) = f(store)?;
    let (loss_b, grad_b) = f(store)?;
    if loss_a.to_bits() != loss_b.to_bits()
        || grad_a.len() != grad_b.len()
        || grad_a.iter().zip(&grad_b).any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(Error::Numeric(
            "objective is not deterministic: repeated evaluation differs".into(),
        ));
    }
    let total = store.coord_count();
    if grad_a.len() != total {
        return Err(Error::shape(format!(
            "gradient vector has {} entries, store has {total} coordinates",
            grad_a.len()
        )));
    }
    let coords: Vec<usize> = if sample_count >= total {
        (0..total).collect()
    } else {
        let mut rng = crate::seed::rng(seed);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < sample_count {
            picked.insert(rng.random_range(0..total));
        }
        picked.into_iter().collect()
    };
    let mut worst = 0.0f64;
    for &c in &coords {
        store.nudge(c, step)?;
        let (hi, _) = f(store)?;
        store.nudge(c, -2.0 * step)?;
        let (lo, _) = f(store)?;
        store.nudge(c, step)?;
        let g_fd = (hi - lo) / (2.0 * step);
        let g_ad = grad_a[c];
        let err = (g_ad - g_fd).abs() / f64::max(1e-12, g_ad.abs() + g_fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
