//! Image quality measures used by the evaluation grid: PSNR, single-scale
//! SSIM, low-pass MSE, feature-space distance, and a Frechet distance
//! between Gaussian fits of feature embeddings.

use nalgebra::{DMatrix, DVector};

use crate::models::FeatureExtractor;
use crate::numerics::{gaussian_kernel2d, Tape, Tensor};
use crate::{Error, Result};

/// PSNR in dB for [0,1] images, 10 log10(1/MSE), capped at 99 (the cap also
/// reports exact equality).
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), mean over
/// all valid window positions and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.same_shape(b)?;
    let (n, c, h, w) = a.dims4()?;
    if n != 1 {
        return Err(Error::shape("ssim expects a single image"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let win = gaussian_kernel2d(SSIM_SIGMA, SSIM_WINDOW / 2)?;
    let wd = win.data();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut acc = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let g = wd[ky * SSIM_WINDOW + kx];
                        let va = pa[(oy + ky) * w + ox + kx];
                        let vb = pb[(oy + ky) * w + ox + kx];
                        ma += g * va;
                        mb += g * vb;
                        maa += g * va * va;
                        mbb += g * vb * vb;
                        mab += g * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            }
        }
    }
    Ok(acc / (c * oh * ow) as f64)
}

/// Mean squared error after a symmetric k x k Gaussian low-pass on both
/// images; k = 1 is the plain MSE. k must be odd.
pub fn blur_mse(a: &Tensor, b: &Tensor, k: usize) -> Result<f64> {
    a.same_shape(b)?;
    if k % 2 == 0 || k == 0 {
        return Err(Error::invalid("blur kernel size must be odd"));
    }
    let mut tape = Tape::new();
    let mut av = tape.constant(a.clone());
    let mut bv = tape.constant(b.clone());
    if k > 1 {
        let radius = (k - 1) / 2;
        let kern = tape.constant(gaussian_kernel2d(radius as f64 / 3.0, radius)?);
        av = tape.blur2d(av, kern)?;
        bv = tape.blur2d(bv, kern)?;
    }
    let d = tape.sub(av, bv)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    tape.value(m).item()
}

/// Squared L2 distance between feature embeddings.
pub fn perc_proxy(a: &Tensor, b: &Tensor, features: &FeatureExtractor) -> Result<f64> {
    a.same_shape(b)?;
    let fa = features.features(a)?;
    let fb = features.features(b)?;
    Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mu = DVector::from_fn(dim, |i, _| set.iter().map(|v| v[i]).sum::<f64>() / n as f64);
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let x = DVector::from_column_slice(v) - &mu;
        cov += &x * x.transpose();
    }
    (mu, cov / (n as f64 - 1.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots =
        DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two embedding sets:
/// ||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), sample
/// covariances with one delta degree of freedom. Needs at least two
/// embeddings per set.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("need at least 2 embeddings per set"));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::shape("embedding dimensions differ"));
    }
    let (mu1, s1) = moments(a, dim);
    let (mu2, s2) = moments(b, dim);
    let root1 = sym_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d2 = (&mu1 - &mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(d2.max(0.0))
}

/// Feature embeddings of a set of images, in order.
pub fn embed_set(images: &[Tensor], features: &FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|img| features.features(img)).collect()
}
