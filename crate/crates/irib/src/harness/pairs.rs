//! Training pairs: each clean image is degraded twice from one coupled
//! draw, producing a mild input/target sibling and an extreme input that
//! is pointwise at least as severe.

use rayon::prelude::*;

use crate::degrade::{apply_manifest, sample_manifest, DegradationManifest};
use crate::harness::config::PresetPair;
use crate::losses::TrainItem;
use crate::numerics::Tensor;
use crate::{seed, Error, Result};

#[derive(Clone, Debug)]
pub struct Pair {
    pub item: TrainItem,
    pub manifest_lq: DegradationManifest,
    pub manifest_elq: DegradationManifest,
}

/// Degrades every corpus image under both presets. Manifest seeds derive
/// from (seed, index), and the two presets consume one shared draw, so the
/// extreme sibling dominates the mild one parameter-by-parameter.
pub fn make_pairs(hq: &[Tensor], presets: &PresetPair, seed_value: u64) -> Result<Vec<Pair>> {
    if hq.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    presets.lq.validate()?;
    presets.elq.validate()?;
    hq.par_iter()
        .enumerate()
        .map(|(i, z)| {
            let s = seed::derive(seed_value, "pair", i as u64);
            let m_lq = sample_manifest(&presets.lq, s)?;
            let m_elq = sample_manifest(&presets.elq, s)?;
            let item = TrainItem {
                x_elq: apply_manifest(&m_elq, z)?,
                x_lq: apply_manifest(&m_lq, z)?,
                z_hq: z.clone(),
            };
            Ok(Pair { item, manifest_lq: m_lq, manifest_elq: m_elq })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::DegradationPreset;
    use crate::harness::metrics::psnr;
    use crate::harness::synth::synth_dataset;

    fn presets() -> PresetPair {
        PresetPair { lq: DegradationPreset::lq_default(), elq: DegradationPreset::elq_default() }
    }

    #[test]
    fn pairs_replay_bit_exactly_from_manifests() {
        let hq = synth_dataset(5, 24, 3).unwrap();
        let pairs = make_pairs(&hq, &presets(), 11).unwrap();
        for (z, p) in hq.iter().zip(&pairs) {
            let lq = apply_manifest(&p.manifest_lq, z).unwrap();
            let elq = apply_manifest(&p.manifest_elq, z).unwrap();
            assert_eq!(lq.data(), p.item.x_lq.data());
            assert_eq!(elq.data(), p.item.x_elq.data());
        }
        let again = make_pairs(&hq, &presets(), 11).unwrap();
        assert_eq!(again[2].item.x_elq.data(), pairs[2].item.x_elq.data());
    }

    #[test]
    fn extreme_inputs_are_more_degraded_than_mild_ones() {
        let hq = synth_dataset(100, 24, 4).unwrap();
        let pairs = make_pairs(&hq, &presets(), 12).unwrap();
        let worse = pairs
            .iter()
            .filter(|p| {
                psnr(&p.item.x_elq, &p.item.z_hq).unwrap()
                    < psnr(&p.item.x_lq, &p.item.z_hq).unwrap()
            })
            .count();
        assert!(worse * 100 >= 95 * pairs.len(), "only {worse}/{} pairs ordered", pairs.len());
    }

    #[test]
    fn shapes_always_match_the_source() {
        let hq = synth_dataset(3, 16, 5).unwrap();
        let pairs = make_pairs(&hq, &presets(), 13).unwrap();
        for p in &pairs {
            assert_eq!(p.item.x_elq.shape(), p.item.z_hq.shape());
            assert_eq!(p.item.x_lq.shape(), p.item.z_hq.shape());
        }
    }
}
