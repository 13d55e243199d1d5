//! Differentiable JPEG surrogate: per-block 8x8 DCT, division by a
//! quality-scaled quantization table, a smooth rounding surrogate, and the
//! inverse transform. Not a bit-exact codec; it reproduces the spectral
//! attenuation of JPEG while staying differentiable end to end.

use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Standard luminance quantization table (quality 50 base), applied to every
/// channel here; images are treated as three luminance planes at this scale.
const BASE_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quantization steps for the given quality, in [0, 1] pixel units
/// (table entries are for 8-bit samples). Standard libjpeg scaling:
/// quality < 50 scales by 5000/q, otherwise by 200 - 2q, each entry
/// floor((base * scale + 50) / 100) clamped to [1, 255].
pub fn quant_steps(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality must be in 1..=100, got {quality}")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(&BASE_TABLE) {
        let q = ((b * scale + 50) / 100).clamp(1, 255);
        *o = q as f64 / 255.0;
    }
    Ok(out)
}

/// Rounding hardness for the surrogate: ramps from 1 at quality <= 90 down
/// to exactly 0 at quality 100, where the proxy becomes the identity on the
/// coefficients.
pub fn round_hardness(quality: u32) -> f64 {
    ((100 - quality) as f64 / 10.0).min(1.0)
}

/// Records the surrogate on a tape. Input must be NCHW; spatial extents are
/// reflect-padded to multiples of 8 internally and cropped back.
pub fn jpeg_proxy_tape(tape: &mut Tape, x: Var, quality: u32) -> Result<Var> {
    let steps = quant_steps(quality)?;
    let hardness = round_hardness(quality);
    let (n, c, h, w) = tape.value(x).dims4()?;
    let shifted = tape.add_scalar(x, -0.5);
    let coeff = tape.block_dct8(shifted)?;
    let (ph, pw) = {
        let s = tape.value(coeff).shape();
        (s[2], s[3])
    };
    let mut inv_map = vec![0.0; n * c * ph * pw];
    let mut fwd_map = vec![0.0; n * c * ph * pw];
    for p in 0..n * c {
        for y in 0..ph {
            for xx in 0..pw {
                let s = steps[(y % 8) * 8 + (xx % 8)];
                inv_map[(p * ph + y) * pw + xx] = 1.0 / s;
                fwd_map[(p * ph + y) * pw + xx] = s;
            }
        }
    }
    let inv = tape.constant(Tensor::from_vec(vec![n, c, ph, pw], inv_map)?);
    let fwd = tape.constant(Tensor::from_vec(vec![n, c, ph, pw], fwd_map)?);
    let scaled = tape.mul(coeff, inv)?;
    let rounded = tape.soft_round(scaled, hardness);
    let restored = tape.mul(rounded, fwd)?;
    let spatial = tape.block_idct8(restored, h, w)?;
    Ok(tape.add_scalar(spatial, 0.5))
}

/// Value-level surrogate over a scratch tape.
pub fn jpeg_proxy(img: &Tensor, quality: u32) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let y = jpeg_proxy_tape(&mut tape, x, quality)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        Tensor::from_vec(
            vec![1, c, h, w],
            (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn quality_100_is_near_identity() {
        let img = random_image(3, 3, 24, 24);
        let out = jpeg_proxy(&img, 100).unwrap();
        let max = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max <= 1e-3, "quality 100 deviation {max:.3e}");
    }

    #[test]
    fn lower_quality_degrades_more() {
        let img = random_image(4, 1, 32, 32);
        let mse = |q: u32| {
            let out = jpeg_proxy(&img, q).unwrap();
            img.data()
                .iter()
                .zip(out.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / img.len() as f64
        };
        let (hi, mid, lo) = (mse(95), mse(60), mse(20));
        assert!(hi < mid && mid < lo, "mse not monotone: {hi:.2e} {mid:.2e} {lo:.2e}");
    }

    #[test]
    fn non_multiple_of_8_extents_roundtrip() {
        let img = random_image(5, 3, 19, 27);
        let out = jpeg_proxy(&img, 75).unwrap();
        assert_eq!(out.shape(), img.shape());
        out.assert_finite("jpeg proxy").unwrap();
    }

    #[test]
    fn quality_range_is_enforced() {
        let img = random_image(6, 1, 8, 8);
        assert!(jpeg_proxy(&img, 0).is_err());
        assert!(jpeg_proxy(&img, 101).is_err());
        assert!(quant_steps(50).is_ok());
    }

    #[test]
    fn quant_steps_decrease_with_quality() {
        let lo = quant_steps(20).unwrap();
        let hi = quant_steps(90).unwrap();
        assert!(lo.iter().zip(&hi).all(|(a, b)| a >= b));
        let top = quant_steps(100).unwrap();
        assert!(top.iter().all(|&s| (s - 1.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn hardness_ramp_frozen_values() {
        assert_eq!(round_hardness(100), 0.0);
        assert_eq!(round_hardness(95), 0.5);
        assert_eq!(round_hardness(90), 1.0);
        assert_eq!(round_hardness(20), 1.0);
    }
}
