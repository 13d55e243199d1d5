//! Compounded blind degradation: seeded sampling of staged blur / resize /
//! noise / JPEG-surrogate chains in up to two orders, recorded as manifests
//! that replay bit-exactly, applied either as plain values or on a gradient
//! tape. Low-quality (LQ) and extremely-low-quality (ELQ) presets share one
//! uniform draw stream per seed, so the ELQ realization of a pair dominates
//! its LQ sibling parameter by parameter (quantile coupling).

mod blur;
mod jpeg;

pub use blur::{build_blur_kernel, support_radius};
pub use jpeg::{jpeg_proxy, jpeg_proxy_tape, quant_steps, round_hardness};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var};
use crate::{seed, Error, Result};

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
pub enum PresetId {
    Lq,
    Elq,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// One sampled degradation stage. All parameters lie inside the ranges of
/// the preset that sampled them.
#[derive(Serialize, Deserialize, Clone, PartialEq, Debug)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationStage {
    Blur { tau_x: f64, tau_y: f64, angle: f64, beta_shape: f64, radius: usize },
    Resize { scale: f64, mode: ResizeMode },
    Noise { sigma: f64, gray: bool },
    JpegProxy { quality: u32 },
}

/// Fully seeded record of a sampled chain. Replaying it on the same input is
/// bit-deterministic: stage parameters are stored explicitly and the noise
/// stream is re-derived from `seed`.
#[derive(Serialize, Deserialize, Clone, PartialEq, Debug)]
pub struct DegradationManifest {
    pub seed: u64,
    pub preset_id: PresetId,
    pub orders: Vec<Vec<DegradationStage>>,
    pub final_scale: f64,
}

impl DegradationManifest {
    /// No stages, unit scale: applying it returns the input unchanged.
    pub fn identity(seed: u64, preset_id: PresetId) -> Self {
        DegradationManifest { seed, preset_id, orders: Vec::new(), final_scale: 1.0 }
    }

    /// Canonical JSON with declaration field order; floats round-trip.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn has_nearest(&self) -> bool {
        self.orders.iter().flatten().any(
            |s| matches!(s, DegradationStage::Resize { mode: ResizeMode::Nearest, .. }),
        )
    }
}

/// Parameter ranges and inclusion probabilities for one degradation order.
/// Blur is included with `blur_prob`; resize, noise, and the JPEG surrogate
/// are always included (noise may still draw sigma near 0).
#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Debug)]
pub struct StageRanges {
    pub blur_prob: f64,
    pub blur_tau: [f64; 2],
    pub blur_beta: [f64; 2],
    pub resize_scale: [f64; 2],
    pub nearest_prob: f64,
    pub noise_sigma: [f64; 2],
    pub gray_prob: f64,
    pub jpeg_quality: [u32; 2],
}

impl StageRanges {
    fn validate(&self) -> Result<()> {
        let ranges_ok = self.blur_tau[0] > 0.0
            && self.blur_tau[0] <= self.blur_tau[1]
            && self.blur_beta[0] > 0.0
            && self.blur_beta[0] <= self.blur_beta[1]
            && self.resize_scale[0] > 0.0
            && self.resize_scale[0] <= self.resize_scale[1]
            && self.noise_sigma[0] >= 0.0
            && self.noise_sigma[0] <= self.noise_sigma[1]
            && self.noise_sigma[1] <= 1.0
            && (1..=100).contains(&self.jpeg_quality[0])
            && self.jpeg_quality[0] <= self.jpeg_quality[1]
            && self.jpeg_quality[1] <= 100;
        let probs_ok = [self.blur_prob, self.nearest_prob, self.gray_prob]
            .iter()
            .all(|p| (0.0..=1.0).contains(p));
        if ranges_ok && probs_ok {
            Ok(())
        } else {
            Err(Error::invalid("degradation ranges out of order or out of domain"))
        }
    }

    /// Every range of `inner` lies inside the matching range of `self`, and
    /// inclusion probabilities are at least as large.
    fn contains(&self, inner: &StageRanges) -> bool {
        let within = |outer: [f64; 2], i: [f64; 2]| outer[0] <= i[0] && outer[1] >= i[1];
        within(self.blur_tau, inner.blur_tau)
            && within(self.blur_beta, inner.blur_beta)
            && within(self.resize_scale, inner.resize_scale)
            && within(self.noise_sigma, inner.noise_sigma)
            && self.jpeg_quality[0] <= inner.jpeg_quality[0]
            && self.jpeg_quality[1] >= inner.jpeg_quality[1]
            && self.blur_prob >= inner.blur_prob
    }
}

/// Named sampling distribution over two-order degradation chains.
#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Debug)]
pub struct DegradationPreset {
    pub id: PresetId,
    pub first: StageRanges,
    pub second: StageRanges,
    pub second_order_prob: f64,
}

impl DegradationPreset {
    /// Default mild preset: the regime the restorer is trained for.
    pub fn lq_default() -> Self {
        let ranges = StageRanges {
            blur_prob: 1.0,
            blur_tau: [0.2, 2.0],
            blur_beta: [0.5, 4.0],
            resize_scale: [0.5, 1.5],
            nearest_prob: 0.3,
            noise_sigma: [0.0, 0.08],
            gray_prob: 0.4,
            jpeg_quality: [60, 95],
        };
        let second = StageRanges { blur_prob: 0.8, ..ranges };
        DegradationPreset { id: PresetId::Lq, first: ranges, second, second_order_prob: 0.8 }
    }

    /// Widened extreme preset; a superset of the LQ ranges in every
    /// parameter, with the second order always applied.
    pub fn elq_default() -> Self {
        let ranges = StageRanges {
            blur_prob: 1.0,
            blur_tau: [0.2, 4.0],
            blur_beta: [0.5, 4.0],
            resize_scale: [0.25, 1.5],
            nearest_prob: 0.3,
            noise_sigma: [0.0, 0.2],
            gray_prob: 0.4,
            jpeg_quality: [20, 95],
        };
        let second = StageRanges { blur_prob: 0.8, ..ranges };
        DegradationPreset { id: PresetId::Elq, first: ranges, second, second_order_prob: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if !(0.0..=1.0).contains(&self.second_order_prob) {
            return Err(Error::invalid("second_order_prob outside [0, 1]"));
        }
        Ok(())
    }

    /// Range containment against a milder preset, per order and gate.
    pub fn contains(&self, inner: &DegradationPreset) -> bool {
        self.first.contains(&inner.first)
            && self.second.contains(&inner.second)
            && self.second_order_prob >= inner.second_order_prob
    }

    /// Variant safe for gradient-path use: nearest-neighbor resizing is
    /// excluded by construction.
    pub fn grad_safe(&self) -> Self {
        let mut p = *self;
        p.first.nearest_prob = 0.0;
        p.second.nearest_prob = 0.0;
        p
    }
}

const DRAWS_PER_ORDER: usize = 10;

fn lerp(range: [f64; 2], u: f64) -> f64 {
    range[0] + u * (range[1] - range[0])
}

fn sample_order(r: &StageRanges, d: &[f64]) -> Vec<DegradationStage> {
    debug_assert_eq!(d.len(), DRAWS_PER_ORDER);
    let mut stages = Vec::with_capacity(4);
    if d[0] < r.blur_prob {
        let tau_x = lerp(r.blur_tau, d[1]);
        let tau_y = lerp(r.blur_tau, d[2]);
        stages.push(DegradationStage::Blur {
            tau_x,
            tau_y,
            angle: d[3] * std::f64::consts::PI,
            beta_shape: lerp(r.blur_beta, d[4]),
            radius: support_radius(tau_x, tau_y),
        });
    }
    stages.push(DegradationStage::Resize {
        scale: lerp(r.resize_scale, d[5]),
        mode: if d[6] < r.nearest_prob { ResizeMode::Nearest } else { ResizeMode::Bilinear },
    });
    stages.push(DegradationStage::Noise {
        sigma: lerp(r.noise_sigma, d[7]),
        gray: d[8] < r.gray_prob,
    });
    let q = lerp([r.jpeg_quality[0] as f64, r.jpeg_quality[1] as f64], d[9]).round() as u32;
    stages.push(DegradationStage::JpegProxy { quality: q.clamp(1, 100) });
    stages
}

/// Deterministic function of (preset, seed). The uniform draw sequence is
/// fixed and independent of the preset, so two presets sampled with the same
/// seed consume identical quantiles: a wider preset then yields a chain that
/// dominates the narrower one stage by stage.
pub fn sample_manifest(preset: &DegradationPreset, seed_value: u64) -> Result<DegradationManifest> {
    preset.validate()?;
    let mut rng = seed::rng(seed::derive(seed_value, "manifest", 0));
    let first: Vec<f64> = (0..DRAWS_PER_ORDER).map(|_| rng.random::<f64>()).collect();
    let gate: f64 = rng.random();
    let second: Vec<f64> = (0..DRAWS_PER_ORDER).map(|_| rng.random::<f64>()).collect();
    let mut orders = vec![sample_order(&preset.first, &first)];
    if gate < preset.second_order_prob {
        orders.push(sample_order(&preset.second, &second));
    }
    let final_scale = orders
        .iter()
        .flatten()
        .filter_map(|s| match s {
            DegradationStage::Resize { scale, .. } => Some(*scale),
            _ => None,
        })
        .product();
    Ok(DegradationManifest { seed: seed_value, preset_id: preset.id, orders, final_scale })
}

/// Records the full chain on a tape: every included stage in order, then a
/// bilinear resize back to the input extents and a final clamp to [0, 1].
/// The JPEG surrogate stage also clamps, mirroring codec decode behavior.
/// Noise is reparameterized: drawn from the manifest's seeded stream as a
/// constant and added, so gradients flow through the signal path only.
/// A blur stage with zero scales is the identity and is skipped.
pub fn apply_manifest_tape(
    tape: &mut Tape,
    manifest: &DegradationManifest,
    x: Var,
) -> Result<Var> {
    let (n, _, h0, w0) = tape.value(x).dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("degradation applies per image, got batch {n}")));
    }
    if h0 < 8 || w0 < 8 {
        return Err(Error::shape(format!("input {h0}x{w0} below minimum extent 8")));
    }
    let mut noise_rng = seed::rng(seed::derive(manifest.seed, "apply", 0));
    let mut cur = x;
    for order in &manifest.orders {
        for stage in order {
            match stage {
                DegradationStage::Blur { tau_x, tau_y, angle, beta_shape, radius } => {
                    if *tau_x == 0.0 && *tau_y == 0.0 {
                        continue;
                    }
                    let kernel = build_blur_kernel(*tau_x, *tau_y, *angle, *beta_shape, *radius)?;
                    let k = tape.constant(kernel);
                    cur = tape.blur2d(cur, k)?;
                }
                DegradationStage::Resize { scale, mode } => {
                    let (_, _, h, w) = tape.value(cur).dims4()?;
                    let nh = ((h as f64 * scale).round() as usize).max(8);
                    let nw = ((w as f64 * scale).round() as usize).max(8);
                    cur = match mode {
                        ResizeMode::Bilinear => tape.resize_bilinear(cur, nh, nw)?,
                        ResizeMode::Nearest => tape.resize_nearest(cur, nh, nw)?,
                    };
                }
                DegradationStage::Noise { sigma, gray } => {
                    let (_, c, h, w) = tape.value(cur).dims4()?;
                    let plane = h * w;
                    let data: Vec<f64> = if *gray {
                        let base: Vec<f64> =
                            (0..plane).map(|_| noise_rng.sample(StandardNormal)).collect();
                        (0..c).flat_map(|_| base.iter().copied()).collect()
                    } else {
                        (0..c * plane).map(|_| noise_rng.sample(StandardNormal)).collect()
                    };
                    let eps = tape.constant(Tensor::from_vec(vec![1, c, h, w], data)?);
                    let scaled = tape.mul_scalar(eps, *sigma);
                    cur = tape.add(cur, scaled)?;
                }
                DegradationStage::JpegProxy { quality } => {
                    cur = jpeg_proxy_tape(tape, cur, *quality)?;
                    cur = tape.clamp01(cur);
                }
            }
        }
    }
    let (_, _, h, w) = tape.value(cur).dims4()?;
    if (h, w) != (h0, w0) {
        cur = tape.resize_bilinear(cur, h0, w0)?;
    }
    Ok(tape.clamp01(cur))
}

/// Value-level application over a scratch tape.
pub fn apply_manifest(manifest: &DegradationManifest, hq: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(hq.clone());
    let y = apply_manifest_tape(&mut tape, manifest, x)?;
    Ok(tape.value(y).clone())
}
