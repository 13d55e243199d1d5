//! Training objectives: blur-weighted LQ reconstruction, noise-prediction
//! prior matching, the three-part HQ fidelity term, and their sum as one
//! per-item report. Also the generic bottleneck family: diagonal-Gaussian
//! KL, a reparameterized Gaussian VAE objective, and enumerated discrete
//! oracles for the variational bounds.

mod discrete;

pub use discrete::{ib_bound_check, vib_loss_discrete, BoundReport, DiscreteJoint};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_manifest_tape, DegradationManifest};
use crate::models::{Condition, FeatureExtractor, PriorScore, ResidualNet};
use crate::numerics::{gaussian_kernel2d, ParamStore, Tape, Tensor, Var};
use crate::{seed, Error, Result};

/// Scales for every term of the training objective.
#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Debug)]
pub struct LossWeights {
    /// Relative weight of the prior-matching term.
    pub beta: f64,
    /// LQ likelihood standard deviation; the reconstruction term carries
    /// 1/(2 sigma^2).
    pub sigma: f64,
    /// Standard deviation of the low-pass kernel applied to both sides of
    /// the LQ reconstruction; 0 disables the blur.
    pub tau: f64,
    /// Odd kernel size of the HQ blur-fidelity term; 1 disables the blur.
    pub k: usize,
    pub lambda_l2: f64,
    pub lambda_perc: f64,
    pub lambda_blur: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            sigma: 0.1,
            tau: 1.0,
            k: 5,
            lambda_l2: 1.0,
            lambda_perc: 1.0,
            lambda_blur: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.sigma, self.tau, self.lambda_l2, self.lambda_perc, self.lambda_blur]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("loss weights must be finite"));
        }
        if self.beta < 0.0
            || self.tau < 0.0
            || self.lambda_l2 < 0.0
            || self.lambda_perc < 0.0
            || self.lambda_blur < 0.0
        {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid("sigma must be strictly positive"));
        }
        if self.k % 2 == 0 || self.k == 0 {
            return Err(Error::invalid("blur kernel size must be odd"));
        }
        Ok(())
    }
}

/// Per-item (or per-batch-average) objective values. `total` is always the
/// sum of the five components.
#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Debug, Default)]
pub struct LossReport {
    pub lq_recon: f64,
    pub hq_prior: f64,
    pub hq_fid_l2: f64,
    pub hq_fid_perc: f64,
    pub hq_fid_blur: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_parts(
        lq_recon: f64,
        hq_prior: f64,
        hq_fid_l2: f64,
        hq_fid_perc: f64,
        hq_fid_blur: f64,
    ) -> Self {
        LossReport {
            lq_recon,
            hq_prior,
            hq_fid_l2,
            hq_fid_perc,
            hq_fid_blur,
            total: lq_recon + hq_prior + hq_fid_l2 + hq_fid_perc + hq_fid_blur,
        }
    }

    /// |total - sum of components|.
    pub fn additivity_gap(&self) -> f64 {
        (self.total
            - (self.lq_recon + self.hq_prior + self.hq_fid_l2 + self.hq_fid_perc + self.hq_fid_blur))
            .abs()
    }
}

/// Symmetric low-pass with std `tau`; identity at tau == 0.
fn blurred(tape: &mut Tape, x: Var, tau: f64) -> Result<Var> {
    if tau == 0.0 {
        return Ok(x);
    }
    let radius = (3.0 * tau).ceil().max(1.0) as usize;
    let k = tape.constant(gaussian_kernel2d(tau, radius)?);
    tape.blur2d(x, k)
}

/// Mean squared difference between two handles of equal shape.
fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Blur-weighted LQ reconstruction: 1/(2 sigma^2) mean ||G_tau * D(z_hat) -
/// G_tau * x_lq||^2 where D replays the given degradation manifest on the
/// tape. High-frequency mismatches are attenuated before comparison.
pub fn lq_recon_blur_mse_tape(
    tape: &mut Tape,
    z_hat: Var,
    x_lq: Var,
    manifest: &DegradationManifest,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let degraded = apply_manifest_tape(tape, manifest, z_hat)?;
    tape.value(degraded).same_shape(tape.value(x_lq))?;
    let a = blurred(tape, degraded, w.tau)?;
    let b = blurred(tape, x_lq, w.tau)?;
    let m = mse(tape, a, b)?;
    Ok(tape.mul_scalar(m, 1.0 / (2.0 * w.sigma * w.sigma)))
}

pub fn lq_recon_blur_mse(
    z_hat: &Tensor,
    x_lq: &Tensor,
    manifest: &DegradationManifest,
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z_hat.clone());
    let xv = tape.constant(x_lq.clone());
    let l = lq_recon_blur_mse_tape(&mut tape, zv, xv, manifest, w)?;
    tape.value(l).item()
}

/// Prior agreement at a seeded noise level: half the mean squared gap
/// between the student's and the prior's noise predictions on the same
/// noised latent. Both predictors are evaluated through the handles given,
/// so freezing is the caller's binding choice; the latent path stays
/// differentiable.
pub fn hq_prior_loss_tape(
    tape: &mut Tape,
    z_hat: Var,
    prior: &PriorScore,
    prior_vars: &[Var],
    student: &PriorScore,
    student_vars: &[Var],
    seed_value: u64,
) -> Result<Var> {
    if prior.schedule != student.schedule {
        return Err(Error::invalid("student and prior noising schedules differ"));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "prior-draw", 0));
    let t = rng.random_range(0..prior.schedule.len());
    let shape = tape.value(z_hat).shape().to_vec();
    let n: usize = shape.iter().product();
    let eps = tape.constant(Tensor::from_vec(
        shape,
        (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    )?);
    let z_t = prior.schedule.noise_to_tape(tape, z_hat, t, eps)?;
    let e_student = student.forward(tape, student_vars, z_t, t)?;
    let e_prior = prior.forward(tape, prior_vars, z_t, t)?;
    let m = mse(tape, e_student, e_prior)?;
    Ok(tape.mul_scalar(m, 0.5))
}

pub fn hq_prior_loss(
    z_hat: &Tensor,
    prior: &PriorScore,
    student: &PriorScore,
    seed_value: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = prior.bind(&mut tape, false);
    let sv = student.bind(&mut tape, false);
    let zv = tape.constant(z_hat.clone());
    let l = hq_prior_loss_tape(&mut tape, zv, prior, &pv, student, &sv, seed_value)?;
    tape.value(l).item()
}

/// HQ fidelity triple, each already scaled by its lambda: mean pixel MSE,
/// squared feature-space distance, and mean MSE after a symmetric k x k
/// low-pass on both images. Zero lambdas skip their term exactly.
pub fn hq_fid_loss_tape(
    tape: &mut Tape,
    z_hat: Var,
    z: Var,
    features: &FeatureExtractor,
    feature_vars: &[Var],
    w: &LossWeights,
) -> Result<(Var, Var, Var)> {
    w.validate()?;
    tape.value(z_hat).same_shape(tape.value(z))?;
    let zero = tape.constant(Tensor::scalar(0.0));
    let l2 = if w.lambda_l2 > 0.0 {
        let m = mse(tape, z_hat, z)?;
        tape.mul_scalar(m, w.lambda_l2)
    } else {
        zero
    };
    let perc = if w.lambda_perc > 0.0 {
        let fa = features.features_tape(tape, feature_vars, z_hat)?;
        let fb = features.features_tape(tape, feature_vars, z)?;
        let d = tape.sub(fa, fb)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        tape.mul_scalar(s, w.lambda_perc)
    } else {
        zero
    };
    let blur = if w.lambda_blur > 0.0 {
        let radius = (w.k - 1) / 2;
        let tau = radius as f64 / 3.0;
        let a = blurred(tape, z_hat, tau)?;
        let b = blurred(tape, z, tau)?;
        let m = mse(tape, a, b)?;
        tape.mul_scalar(m, w.lambda_blur)
    } else {
        zero
    };
    Ok((l2, perc, blur))
}

pub fn hq_fid_loss(
    z_hat: &Tensor,
    z: &Tensor,
    features: &FeatureExtractor,
    w: &LossWeights,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let fv = features.bind(&mut tape);
    let a = tape.constant(z_hat.clone());
    let b = tape.constant(z.clone());
    let (l2, perc, blur) = hq_fid_loss_tape(&mut tape, a, b, features, &fv, w)?;
    Ok((
        tape.value(l2).item()?,
        tape.value(perc).item()?,
        tape.value(blur).item()?,
    ))
}

/// One training example: the extreme input, its mild sibling used as the
/// reconstruction target, and the shared clean source.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub x_elq: Tensor,
    pub x_lq: Tensor,
    pub z_hq: Tensor,
}

impl TrainItem {
    fn validate(&self) -> Result<()> {
        self.x_elq.same_shape(&self.x_lq)?;
        self.x_elq.same_shape(&self.z_hq)?;
        self.x_elq.dims4()?;
        Ok(())
    }
}

/// Everything the full objective evaluates through.
#[derive(Clone, Copy)]
pub struct LossModels<'a> {
    pub projector: &'a ResidualNet,
    pub restorer: &'a ResidualNet,
    pub prior: &'a PriorScore,
    pub student: &'a PriorScore,
    pub features: &'a FeatureExtractor,
}

/// Bound handles for one tape: the projector is the only trainable entry.
pub struct ModelVars {
    pub projector: Vec<Var>,
    pub restorer: Vec<Var>,
    pub prior: Vec<Var>,
    pub student: Vec<Var>,
    pub features: Vec<Var>,
}

impl<'a> LossModels<'a> {
    pub fn bind(&self, tape: &mut Tape, projector_trainable: bool) -> ModelVars {
        ModelVars {
            projector: self.projector.bind(tape, projector_trainable),
            restorer: self.restorer.bind(tape, false),
            prior: self.prior.bind(tape, false),
            student: self.student.bind(tape, false),
            features: self.features.bind(tape),
        }
    }

    /// Full objective for one item: z_hat = g(f_theta(x_elq; cond); Y(.)),
    /// then reconstruction through a fresh degradation, prior agreement
    /// (weighted by beta), and HQ fidelity. Returns the scalar handle for
    /// backprop plus the bookkeeping report.
    pub fn item_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        item: &TrainItem,
        cond: &Condition,
        degrade_back: &DegradationManifest,
        w: &LossWeights,
        seed_value: u64,
    ) -> Result<(Var, LossReport)> {
        item.validate()?;
        w.validate()?;
        let x_elq = tape.constant(item.x_elq.clone());
        let x_lq = tape.constant(item.x_lq.clone());
        let z_hq = tape.constant(item.z_hq.clone());
        let cv = tape.constant(cond.to_tensor());
        let x_hat = self.projector.forward(tape, &vars.projector, x_elq, Some(cv))?;
        let c_lq = self.features.condition_tape(tape, &vars.features, x_hat)?;
        let z_hat = self.restorer.forward(tape, &vars.restorer, x_hat, Some(c_lq))?;
        let lq = lq_recon_blur_mse_tape(tape, z_hat, x_lq, degrade_back, w)?;
        let prior_raw = hq_prior_loss_tape(
            tape,
            z_hat,
            self.prior,
            &vars.prior,
            self.student,
            &vars.student,
            seed_value,
        )?;
        let prior = tape.mul_scalar(prior_raw, w.beta);
        let (l2, perc, blur) =
            hq_fid_loss_tape(tape, z_hat, z_hq, self.features, &vars.features, w)?;
        let mut total = tape.add(lq, prior)?;
        total = tape.add(total, l2)?;
        total = tape.add(total, perc)?;
        total = tape.add(total, blur)?;
        let report = LossReport::from_parts(
            tape.value(lq).item()?,
            tape.value(prior).item()?,
            tape.value(l2).item()?,
            tape.value(perc).item()?,
            tape.value(blur).item()?,
        );
        Ok((total, report))
    }
}

/// Value-level batch objective: per-item tapes, conditions extracted from
/// each extreme input, components averaged. Batch and manifests must pair
/// up one-to-one.
pub fn total_loss(
    models: &LossModels,
    batch: &[TrainItem],
    degrade_back: &[DegradationManifest],
    w: &LossWeights,
    seed_value: u64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.len() != degrade_back.len() {
        return Err(Error::invalid(format!(
            "{} items but {} degradation manifests",
            batch.len(),
            degrade_back.len()
        )));
    }
    let mut acc = [0.0f64; 5];
    for (i, (item, manifest)) in batch.iter().zip(degrade_back).enumerate() {
        let mut tape = Tape::new();
        let vars = models.bind(&mut tape, false);
        let cond = models.features.extract_condition(&item.x_elq)?;
        let (_, report) = models.item_loss(
            &mut tape,
            &vars,
            item,
            &cond,
            manifest,
            w,
            seed::derive(seed_value, "item", i as u64),
        )?;
        acc[0] += report.lq_recon;
        acc[1] += report.hq_prior;
        acc[2] += report.hq_fid_l2;
        acc[3] += report.hq_fid_perc;
        acc[4] += report.hq_fid_blur;
    }
    let n = batch.len() as f64;
    Ok(LossReport::from_parts(
        acc[0] / n,
        acc[1] / n,
        acc[2] / n,
        acc[3] / n,
        acc[4] / n,
    ))
}

/// KL(N(mu, diag(sigma^2)) || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 -
/// ln sigma^2). Non-negative; zero exactly at (0, 1).
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() || mu.is_empty() {
        return Err(Error::invalid("mu and sigma must be equal-length and non-empty"));
    }
    if sigma.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(Error::invalid("sigma must be strictly positive"));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| {
            let s2 = s * s;
            0.5 * (m * m + s2 - 1.0 - s2.ln())
        })
        .sum())
}

/// Linear-Gaussian VAE: diagonal-Gaussian encoder, unit-variance Gaussian
/// decoder, single-sample reparameterized objective
/// E[-ln p(x|z)] + beta KL(q(z|x) || N(0, I)).
pub struct BetaVae {
    pub x_dim: usize,
    pub z_dim: usize,
    pub params: ParamStore,
}

impl BetaVae {
    pub fn random_init(x_dim: usize, z_dim: usize, seed_value: u64) -> Result<Self> {
        if x_dim == 0 || z_dim == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        let mut rng = seed::rng(seed::derive(seed_value, "bvae-init", 0));
        let mut params = ParamStore::new();
        let mat = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| {
            let limit = (1.0 / cols as f64).sqrt();
            Tensor::from_vec(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect(),
            )
            .unwrap()
        };
        params.register("enc.mu.w", mat(&mut rng, z_dim, x_dim))?;
        params.register("enc.mu.b", Tensor::zeros(vec![z_dim]))?;
        params.register("enc.ls.w", mat(&mut rng, z_dim, x_dim))?;
        params.register("enc.ls.b", Tensor::zeros(vec![z_dim]))?;
        params.register("dec.w", mat(&mut rng, x_dim, z_dim))?;
        params.register("dec.b", Tensor::zeros(vec![x_dim]))?;
        Ok(BetaVae { x_dim, z_dim, params })
    }

    /// Mean objective over the dataset; reparameterization noise is drawn
    /// per item from the seed.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &[Tensor],
        beta: f64,
        seed_value: u64,
    ) -> Result<Var> {
        if data.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::invalid("beta must be finite and non-negative"));
        }
        let half_log_tau = 0.5 * (std::f64::consts::TAU).ln();
        let mut total: Option<Var> = None;
        for (i, x) in data.iter().enumerate() {
            if x.shape() != [self.x_dim] {
                return Err(Error::shape(format!(
                    "data item has shape {:?}, expected [{}]",
                    x.shape(),
                    self.x_dim
                )));
            }
            let mut rng = seed::rng(seed::derive(seed_value, "bvae-eps", i as u64));
            let eps = tape.constant(Tensor::from_vec(
                vec![self.z_dim],
                (0..self.z_dim).map(|_| rng.sample(StandardNormal)).collect(),
            )?);
            let xv = tape.constant(x.clone());
            let mu = tape.linear(xv, vars[0], vars[1])?;
            let ls = tape.linear(xv, vars[2], vars[3])?;
            let sigma = tape.exp(ls);
            let noise = tape.mul(sigma, eps)?;
            let z = tape.add(mu, noise)?;
            let xh = tape.linear(z, vars[4], vars[5])?;
            let diff = tape.sub(xv, xh)?;
            let sq = tape.square(diff);
            let sse = tape.sum(sq);
            let half_sse = tape.mul_scalar(sse, 0.5);
            let nll = tape.add_scalar(half_sse, self.x_dim as f64 * half_log_tau);
            let mu2 = tape.square(mu);
            let sigma2 = tape.square(sigma);
            let two_ls = tape.mul_scalar(ls, 2.0);
            let sum_terms = tape.add(mu2, sigma2)?;
            let ones_shift = tape.add_scalar(two_ls, 1.0);
            let kl_vec = tape.sub(sum_terms, ones_shift)?;
            let kl_sum = tape.sum(kl_vec);
            let kl = tape.mul_scalar(kl_sum, 0.5);
            let weighted = tape.mul_scalar(kl, beta);
            let item = tape.add(nll, weighted)?;
            total = Some(match total {
                None => item,
                Some(t) => tape.add(t, item)?,
            });
        }
        Ok(tape.mul_scalar(total.unwrap(), 1.0 / data.len() as f64))
    }

    pub fn loss(&self, data: &[Tensor], beta: f64, seed_value: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let l = self.loss_tape(&mut tape, &vars, data, beta, seed_value)?;
        tape.value(l).item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{sample_manifest, DegradationPreset, PresetId};
    use crate::models::{NetArch, Schedule};
    use crate::numerics::{finite_diff_check, Objective};
    use proptest::prelude::*;
    use rand::Rng;

    fn image(seed_value: u64, size: usize) -> Tensor {
        let mut rng = seed::rng(seed_value);
        Tensor::from_vec(
            vec![1, 3, size, size],
            (0..3 * size * size).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap()
    }

    fn checkerboard(size: usize, period: usize, amp: f64) -> Tensor {
        let mut data = vec![0.0; 3 * size * size];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let sign = if ((y / period) + (x / period)) % 2 == 0 { 1.0 } else { -1.0 };
                    data[(c * size + y) * size + x] = 0.5 + sign * amp;
                }
            }
        }
        Tensor::from_vec(vec![1, 3, size, size], data).unwrap()
    }

    #[test]
    fn zero_tau_identity_manifest_reduces_to_scaled_mse() {
        let a = image(1, 12);
        let b = image(2, 12);
        let w = LossWeights { tau: 0.0, sigma: 0.25, ..Default::default() };
        let m = DegradationManifest::identity(0, PresetId::Lq);
        let got = lq_recon_blur_mse(&a, &b, &m, &w).unwrap();
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        let expect = mse / (2.0 * 0.25 * 0.25);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn matching_degraded_output_gives_zero() {
        let z = image(3, 16);
        let m = sample_manifest(&DegradationPreset::lq_default().grad_safe(), 4).unwrap();
        let x_lq = crate::degrade::apply_manifest(&m, &z).unwrap();
        let w = LossWeights { tau: 0.0, ..Default::default() };
        assert_eq!(lq_recon_blur_mse(&z, &x_lq, &m, &w).unwrap(), 0.0);
    }

    #[test]
    fn blur_mse_is_non_increasing_in_tau_and_strict_on_high_frequencies() {
        let base = Tensor::full(vec![1, 3, 24, 24], 0.5);
        let m = DegradationManifest::identity(0, PresetId::Lq);
        for period in [1usize, 2, 4] {
            let perturbed = checkerboard(24, period, 0.1);
            let mut losses = Vec::new();
            for tau in [0.0, 0.5, 1.0, 2.0] {
                let w = LossWeights { tau, ..Default::default() };
                losses.push(lq_recon_blur_mse(&perturbed, &base, &m, &w).unwrap());
            }
            for pair in losses.windows(2) {
                assert!(
                    pair[1] <= pair[0] + 1e-12,
                    "period {period}: loss rose from {} to {}",
                    pair[0],
                    pair[1]
                );
            }
            if period == 1 {
                assert!(losses[3] < losses[1] && losses[1] < losses[0]);
            }
        }
    }

    #[test]
    fn identical_predictors_agree_exactly() {
        let prior = PriorScore::random(21).unwrap();
        let student = prior.clone();
        let z = image(5, 12);
        let a = hq_prior_loss(&z, &prior, &student, 7).unwrap();
        assert_eq!(a, 0.0);
        let b = hq_prior_loss(&z, &prior, &PriorScore::random(22).unwrap(), 7).unwrap();
        let c = hq_prior_loss(&z, &prior, &PriorScore::random(22).unwrap(), 7).unwrap();
        assert_eq!(b, c);
        assert!(b > 0.0);
    }

    #[test]
    fn mismatched_schedules_rejected() {
        let prior = PriorScore::new(23).unwrap();
        let mut student = PriorScore::new(24).unwrap();
        student.schedule = Schedule::linear(0.999, 0.1, 20).unwrap();
        assert!(hq_prior_loss(&image(6, 12), &prior, &student, 1).is_err());
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let prior = PriorScore::random(25).unwrap();
        let student = PriorScore::random(26).unwrap();
        let mut store = ParamStore::new();
        store.register("z", image(7, 10)).unwrap();
        let f: &Objective = &|s| {
            let mut tape = Tape::new();
            let vars = s.bind(&mut tape, true);
            let pv = prior.bind(&mut tape, false);
            let sv = student.bind(&mut tape, false);
            let l = hq_prior_loss_tape(&mut tape, vars[0], &prior, &pv, &student, &sv, 31)?;
            let g = tape.backward(l)?;
            Ok((tape.value(l).item()?, s.collect_grad_vector(&g, &vars)))
        };
        let err = finite_diff_check(f, &mut store, 1e-5, 24, 33).unwrap();
        assert!(err <= 1e-4, "prior loss gradient error {err:.3e}");
    }

    #[test]
    fn fidelity_terms_vanish_at_equality_and_respect_lambdas() {
        let fe = FeatureExtractor::fixed();
        let z = image(8, 16);
        let w = LossWeights::default();
        let (l2, perc, blur) = hq_fid_loss(&z, &z, &fe, &w).unwrap();
        assert_eq!((l2, perc, blur), (0.0, 0.0, 0.0));

        let other = image(9, 16);
        let off = LossWeights { lambda_blur: 0.0, ..Default::default() };
        let (_, _, blur_off) = hq_fid_loss(&z, &other, &fe, &off).unwrap();
        assert_eq!(blur_off, 0.0);
        let double = LossWeights { lambda_blur: 2.0, ..Default::default() };
        let single = LossWeights { lambda_blur: 1.0, ..Default::default() };
        let (_, _, b2) = hq_fid_loss(&z, &other, &fe, &double).unwrap();
        let (_, _, b1) = hq_fid_loss(&z, &other, &fe, &single).unwrap();
        assert!((b2 - 2.0 * b1).abs() < 1e-12);
        let ablation = [0.0, 0.5, 1.0, 2.0].map(|lb| LossWeights {
            lambda_blur: lb,
            lambda_perc: 1.0,
            lambda_l2: 1.0,
            ..Default::default()
        });
        for w in &ablation {
            assert!(w.validate().is_ok());
        }
    }

    fn toy_models() -> (ResidualNet, ResidualNet, PriorScore, PriorScore, FeatureExtractor) {
        let arch = NetArch::image_net().with_width(6);
        (
            ResidualNet::random_init(arch, 101).unwrap(),
            ResidualNet::random_init(arch, 102).unwrap(),
            PriorScore::random(103).unwrap(),
            PriorScore::random(104).unwrap(),
            FeatureExtractor::fixed(),
        )
    }

    #[test]
    fn report_components_always_sum_to_total() {
        let (projector, restorer, prior, student, features) = toy_models();
        let models = LossModels {
            projector: &projector,
            restorer: &restorer,
            prior: &prior,
            student: &student,
            features: &features,
        };
        let z = image(10, 16);
        let preset = DegradationPreset::lq_default();
        let m_lq = sample_manifest(&preset, 5).unwrap();
        let m_elq = sample_manifest(&DegradationPreset::elq_default(), 5).unwrap();
        let item = TrainItem {
            x_elq: crate::degrade::apply_manifest(&m_elq, &z).unwrap(),
            x_lq: crate::degrade::apply_manifest(&m_lq, &z).unwrap(),
            z_hq: z,
        };
        let back = sample_manifest(&preset.grad_safe(), 99).unwrap();
        let report =
            total_loss(&models, &[item], &[back], &LossWeights::default(), 1).unwrap();
        assert!(report.additivity_gap() <= 1e-12);
        assert!(report.total > 0.0);
    }

    #[test]
    fn unpaired_batches_rejected() {
        let (projector, restorer, prior, student, features) = toy_models();
        let models = LossModels {
            projector: &projector,
            restorer: &restorer,
            prior: &prior,
            student: &student,
            features: &features,
        };
        let z = image(11, 16);
        let item = TrainItem { x_elq: z.clone(), x_lq: z.clone(), z_hq: z.clone() };
        assert!(total_loss(&models, &[item.clone()], &[], &LossWeights::default(), 1).is_err());
        let bad = TrainItem { x_elq: image(12, 8), x_lq: z.clone(), z_hq: z };
        let m = DegradationManifest::identity(0, PresetId::Lq);
        assert!(total_loss(&models, &[bad], &[m], &LossWeights::default(), 1).is_err());
    }

    #[test]
    fn exact_fixed_point_drives_total_to_zero() {
        let arch = NetArch::image_net();
        let projector = ResidualNet::identity_init(arch, 201).unwrap();
        let restorer = ResidualNet::identity_init(arch, 202).unwrap();
        let prior = PriorScore::random(203).unwrap();
        let student = prior.clone();
        let features = FeatureExtractor::fixed();
        let models = LossModels {
            projector: &projector,
            restorer: &restorer,
            prior: &prior,
            student: &student,
            features: &features,
        };
        let z = image(13, 16);
        let m = sample_manifest(&DegradationPreset::lq_default().grad_safe(), 77).unwrap();
        let x_lq = crate::degrade::apply_manifest(&m, &z).unwrap();
        let item = TrainItem { x_elq: z.clone(), x_lq, z_hq: z };
        let w = LossWeights { tau: 0.0, ..Default::default() };
        let report = total_loss(&models, &[item], &[m], &w, 5).unwrap();
        assert!(report.total.abs() <= 1e-10, "fixed-point total {}", report.total);
    }

    #[test]
    fn end_to_end_projector_gradient_matches_finite_differences() {
        let arch = NetArch::image_net().with_width(5);
        let projector = ResidualNet::random_init(arch, 301).unwrap();
        let restorer = ResidualNet::random_init(arch, 302).unwrap();
        let prior = PriorScore::random(303).unwrap();
        let student = PriorScore::random(304).unwrap();
        let features = FeatureExtractor::fixed();
        let z = image(14, 16);
        let m_elq = sample_manifest(&DegradationPreset::elq_default(), 6).unwrap();
        let m_lq = sample_manifest(&DegradationPreset::lq_default(), 6).unwrap();
        let item = TrainItem {
            x_elq: crate::degrade::apply_manifest(&m_elq, &z).unwrap(),
            x_lq: crate::degrade::apply_manifest(&m_lq, &z).unwrap(),
            z_hq: z,
        };
        let back = sample_manifest(&DegradationPreset::lq_default().grad_safe(), 8).unwrap();
        let cond = features.extract_condition(&item.x_elq).unwrap();
        let w = LossWeights::default();
        let mut store = projector.params.clone();
        let f: &Objective = &|s| {
            let probe = ResidualNet { arch, params: s.clone() };
            let models = LossModels {
                projector: &probe,
                restorer: &restorer,
                prior: &prior,
                student: &student,
                features: &features,
            };
            let mut tape = Tape::new();
            let vars = models.bind(&mut tape, true);
            let (l, _) = models.item_loss(&mut tape, &vars, &item, &cond, &back, &w, 9)?;
            let g = tape.backward(l)?;
            Ok((tape.value(l).item()?, s.collect_grad_vector(&g, &vars.projector)))
        };
        // 1e-6 keeps the probe inside one smooth piece of the clamped and
        // leaky activations; 1e-5 straddles a kink in this configuration.
        let err = finite_diff_check(f, &mut store, 1e-6, 20, 41).unwrap();
        assert!(err <= 1e-4, "end-to-end gradient error {err:.3e}");
    }

    #[test]
    fn kl_closed_forms_match_monte_carlo() {
        assert_eq!(kl_diag_gaussian(&[0.0], &[1.0]).unwrap(), 0.0);
        let half = kl_diag_gaussian(&[1.0], &[1.0]).unwrap();
        assert!((half - 0.5).abs() < 1e-12);
        let wide = kl_diag_gaussian(&[0.0], &[2.0]).unwrap();
        assert!((wide - 0.5 * (4.0 - 1.0 - 4.0f64.ln())).abs() < 1e-12);
        assert!(kl_diag_gaussian(&[0.0], &[0.0]).is_err());
        assert!(kl_diag_gaussian(&[0.0, 1.0], &[1.0]).is_err());

        let mut rng = seed::rng(71);
        for (mu, sigma) in [(1.0, 1.0), (0.0, 2.0)] {
            let closed = kl_diag_gaussian(&[mu], &[sigma]).unwrap();
            let mut acc = 0.0;
            let n = 1_000_000;
            for _ in 0..n {
                let z: f64 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                let log_q = -((z - mu) * (z - mu)) / (2.0 * sigma * sigma) - sigma.ln();
                let log_r = -z * z / 2.0;
                acc += log_q - log_r;
            }
            let mc = acc / n as f64;
            assert!(
                (mc - closed).abs() <= 1e-2,
                "MC {mc:.5} vs closed form {closed:.5}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn kl_is_non_negative_and_zero_only_at_standard_normal(
            mu in -5.0f64..5.0,
            sigma in 0.05f64..5.0,
        ) {
            let kl = kl_diag_gaussian(&[mu], &[sigma]).unwrap();
            prop_assert!(kl >= 0.0);
            let off_standard = mu.abs() > 1e-3 || (sigma - 1.0).abs() > 1e-3;
            if off_standard {
                prop_assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn beta_vae_reduces_to_reconstruction_at_beta_zero() {
        let vae = BetaVae::random_init(4, 2, 81).unwrap();
        let data: Vec<Tensor> = (0..3)
            .map(|i| {
                let mut rng = seed::rng(90 + i);
                Tensor::from_vec(vec![4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let l0 = vae.loss(&data, 0.0, 7).unwrap();
        let l1 = vae.loss(&data, 1.0, 7).unwrap();
        assert!(l1 >= l0);

        // Encoder at the prior and decoder ignoring z: loss is the exact
        // Gaussian negative log-likelihood of the data around dec.b.
        let mut prior_vae = BetaVae::random_init(4, 2, 82).unwrap();
        for name in ["enc.mu.w", "enc.ls.w", "dec.w"] {
            let idx = (0..prior_vae.params.len())
                .find(|i| prior_vae.params.at(*i).name == name)
                .unwrap();
            let p = prior_vae.params.at_mut(idx);
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let loss = prior_vae.loss(&data, 3.0, 7).unwrap();
        let b = prior_vae.params.get("dec.b").unwrap().value.clone();
        let expect: f64 = data
            .iter()
            .map(|x| {
                let sse: f64 =
                    x.data().iter().zip(b.data()).map(|(a, c)| (a - c) * (a - c)).sum();
                0.5 * sse + 4.0 * 0.5 * std::f64::consts::TAU.ln()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn beta_vae_gradient_matches_finite_differences() {
        let vae = BetaVae::random_init(5, 3, 83).unwrap();
        let data: Vec<Tensor> = (0..4)
            .map(|i| {
                let mut rng = seed::rng(95 + i);
                Tensor::from_vec(vec![5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let mut store = vae.params.clone();
        let f: &Objective = &|s| {
            let probe = BetaVae { x_dim: 5, z_dim: 3, params: s.clone() };
            let mut tape = Tape::new();
            let vars = s.bind(&mut tape, true);
            let l = probe.loss_tape(&mut tape, &vars, &data, 1.3, 11)?;
            let g = tape.backward(l)?;
            Ok((tape.value(l).item()?, s.collect_grad_vector(&g, &vars)))
        };
        let err = finite_diff_check(f, &mut store, 1e-5, 0, 0).unwrap();
        assert!(err <= 1e-4, "VAE gradient error {err:.3e}");
    }
}
