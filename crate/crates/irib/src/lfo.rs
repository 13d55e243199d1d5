//! Inference-time condition refinement. The projector is re-run from the
//! original extreme input under conditions read off its own previous
//! output, so each pass sharpens the degradation estimate the restorer
//! will ultimately see.

use crate::models::{Condition, FeatureExtractor, ResidualNet};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Record of one refinement run. `conditions[i]` produced `lq_proxies[i]`;
/// both have `iterations + 1` entries. The restorer's own condition is
/// read from the last proxy and is not part of the trace.
#[derive(Clone, Debug)]
pub struct LfoTrace {
    pub conditions: Vec<Condition>,
    pub lq_proxies: Vec<Tensor>,
    pub final_hq: Tensor,
}

impl LfoTrace {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// Projects `x_elq` down to a mild-degradation proxy, re-estimates the
/// condition from that proxy, and repeats `iterations` times; the restorer
/// then runs once on the last proxy. Iteration zero is the plain
/// restorer-after-projector composition.
pub fn lfo_restore(
    x_elq: &Tensor,
    projector: &ResidualNet,
    restorer: &ResidualNet,
    features: &FeatureExtractor,
    iterations: usize,
) -> Result<LfoTrace> {
    x_elq.dims4()?;
    if projector.arch.cond_dim == 0 || restorer.arch.cond_dim == 0 {
        return Err(Error::invalid("refinement needs conditioned networks"));
    }
    let mut conditions = Vec::with_capacity(iterations + 1);
    let mut lq_proxies = Vec::with_capacity(iterations + 1);
    let mut cond = features.extract_condition(x_elq)?;
    let mut proxy = projector.infer(x_elq, Some(&cond))?;
    conditions.push(cond.clone());
    lq_proxies.push(proxy.clone());
    for _ in 0..iterations {
        cond = features.extract_condition(&proxy)?;
        proxy = projector.infer(x_elq, Some(&cond))?;
        conditions.push(cond.clone());
        lq_proxies.push(proxy.clone());
    }
    let restore_cond = features.extract_condition(&proxy)?;
    let final_hq = restorer.infer(&proxy, Some(&restore_cond))?;
    Ok(LfoTrace { conditions, lq_proxies, final_hq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::NetArch;
    use crate::seed;
    use rand::Rng;

    fn image(seed_value: u64, size: usize) -> Tensor {
        let mut rng = seed::rng(seed_value);
        Tensor::from_vec(
            vec![1, 3, size, size],
            (0..3 * size * size).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap()
    }

    fn nets(seed_a: u64, seed_b: u64) -> (ResidualNet, ResidualNet) {
        let arch = NetArch::image_net().with_width(6);
        (
            ResidualNet::random_init(arch, seed_a).unwrap(),
            ResidualNet::random_init(arch, seed_b).unwrap(),
        )
    }

    #[test]
    fn trace_lengths_track_iterations() {
        let (projector, restorer) = nets(1, 2);
        let features = FeatureExtractor::fixed();
        let x = image(3, 16);
        for iterations in [0usize, 1, 2, 3, 4] {
            let trace = lfo_restore(&x, &projector, &restorer, &features, iterations).unwrap();
            assert_eq!(trace.len(), iterations + 1);
            assert_eq!(trace.lq_proxies.len(), iterations + 1);
            assert!(!trace.is_empty());
            assert_eq!(trace.final_hq.shape(), x.shape());
        }
    }

    #[test]
    fn zero_iterations_is_the_plain_composition() {
        let (projector, restorer) = nets(4, 5);
        let features = FeatureExtractor::fixed();
        let x = image(6, 16);
        let trace = lfo_restore(&x, &projector, &restorer, &features, 0).unwrap();
        let cond = features.extract_condition(&x).unwrap();
        let proxy = projector.infer(&x, Some(&cond)).unwrap();
        let restore_cond = features.extract_condition(&proxy).unwrap();
        let direct = restorer.infer(&proxy, Some(&restore_cond)).unwrap();
        assert_eq!(trace.lq_proxies[0].data(), proxy.data());
        assert_eq!(trace.final_hq.data(), direct.data());
    }

    #[test]
    fn converged_conditions_make_refinement_idempotent() {
        // An identity projector returns its input, so every re-estimated
        // condition equals the first and extra passes change nothing.
        let arch = NetArch::image_net();
        let projector = ResidualNet::identity_init(arch, 7).unwrap();
        let restorer = ResidualNet::random_init(arch, 8).unwrap();
        let features = FeatureExtractor::fixed();
        let x = image(9, 16);
        let short = lfo_restore(&x, &projector, &restorer, &features, 0).unwrap();
        let long = lfo_restore(&x, &projector, &restorer, &features, 4).unwrap();
        for c in &long.conditions {
            assert_eq!(c.vector, long.conditions[0].vector);
        }
        assert_eq!(short.final_hq.data(), long.final_hq.data());
    }

    #[test]
    fn unconditioned_networks_rejected() {
        let arch = NetArch::image_net();
        let plain = NetArch { cond_dim: 0, ..arch };
        let conditioned = ResidualNet::random_init(arch, 10).unwrap();
        let bare = ResidualNet::random_init(plain, 11).unwrap();
        let features = FeatureExtractor::fixed();
        let x = image(12, 12);
        assert!(lfo_restore(&x, &bare, &conditioned, &features, 1).is_err());
        assert!(lfo_restore(&x, &conditioned, &bare, &features, 1).is_err());
    }
}
