//! Anisotropic generalized-Gaussian blur kernels: exp(-(d/2)^beta) on the
//! rotated elliptical quadratic form d = x'^2/tau_x^2 + y'^2/tau_y^2.
//! beta = 1 reduces to the plain anisotropic Gaussian.

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Builds the normalized kernel for the given scales (in pixels), rotation
/// angle (radians), and shape exponent. Extent is (2 radius + 1)^2.
pub fn build_blur_kernel(
    tau_x: f64,
    tau_y: f64,
    angle: f64,
    beta_shape: f64,
    radius: usize,
) -> Result<Tensor> {
    if !(tau_x > 0.0 && tau_y > 0.0) {
        return Err(Error::invalid(format!(
            "blur scales must be positive, got tau_x={tau_x}, tau_y={tau_y}"
        )));
    }
    if !(beta_shape > 0.0) {
        return Err(Error::invalid(format!("beta_shape must be positive, got {beta_shape}")));
    }
    if radius == 0 {
        return Err(Error::invalid("blur radius must be positive"));
    }
    let k = 2 * radius + 1;
    let (sin, cos) = angle.sin_cos();
    let mut data = vec![0.0; k * k];
    let mut sum = 0.0;
    for i in 0..k {
        let y = i as f64 - radius as f64;
        for j in 0..k {
            let x = j as f64 - radius as f64;
            let xr = x * cos + y * sin;
            let yr = -x * sin + y * cos;
            let d = xr * xr / (tau_x * tau_x) + yr * yr / (tau_y * tau_y);
            let v = (-(d / 2.0).powf(beta_shape)).exp();
            data[i * k + j] = v;
            sum += v;
        }
    }
    for v in &mut data {
        *v /= sum;
    }
    Tensor::from_vec(vec![k, k], data)
}

/// Radius covering the 3-sigma support of the larger scale, at least 1.
pub fn support_radius(tau_x: f64, tau_y: f64) -> usize {
    ((3.0 * tau_x.max(tau_y)).ceil() as usize).max(1)
}
