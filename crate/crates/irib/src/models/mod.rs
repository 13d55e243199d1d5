//! Networks: the trainable ELQ-to-LQ projector, the frozen LQ-to-HQ
//! restorer (same residual family), a small noise predictor with its
//! noising schedule, and the fixed seeded feature extractor that supplies
//! conditions, perceptual features, and the distribution-distance backbone.

mod checkpoint;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, ArchDescriptor};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::{seed, Error, Result};

/// Negative-slope of every activation in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Length of pooled feature vectors: mean and standard deviation over the
/// last backbone layer's channels.
pub const CONDITION_DIM: usize = 2 * BACKBONE_WIDTHS[2];

const BACKBONE_WIDTHS: [usize; 3] = [12, 18, 24];

/// One shared backbone seed, so every run and every arm embeds images into
/// the same fixed feature space.
const BACKBONE_SEED: u64 = 0x5eed_f00d_cafe_0001;

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// clamp01(input + head): the net starts at the identity when the head
    /// is zero-initialized. Requires in_ch == out_ch.
    ResidualClamp,
    /// Raw head output (noise prediction).
    Raw,
}

/// Shape of a residual conv network: a stem, `blocks` residual blocks with
/// optional feature-wise affine conditioning, and a 3x3 head.
#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq, Debug)]
pub struct NetArch {
    pub in_ch: usize,
    pub width: usize,
    pub blocks: usize,
    pub cond_dim: usize,
    pub out_ch: usize,
    pub output: OutputMode,
}

impl NetArch {
    /// Conditioned image-to-image net (projector and restorer family).
    pub fn image_net() -> Self {
        NetArch {
            in_ch: 3,
            width: 16,
            blocks: 4,
            cond_dim: CONDITION_DIM,
            out_ch: 3,
            output: OutputMode::ResidualClamp,
        }
    }

    /// Unconditioned denoiser over a noised image plus one time plane.
    pub fn denoiser() -> Self {
        NetArch {
            in_ch: 4,
            width: 12,
            blocks: 2,
            cond_dim: 0,
            out_ch: 3,
            output: OutputMode::Raw,
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.width == 0 || self.blocks == 0 || self.out_ch == 0 {
            return Err(Error::invalid("network extents must be positive"));
        }
        if self.output == OutputMode::ResidualClamp && self.in_ch != self.out_ch {
            return Err(Error::invalid("residual output needs in_ch == out_ch"));
        }
        Ok(())
    }

    /// Parameter names and shapes in binding order.
    fn param_plan(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let mut plan = vec![
            ("stem.w".into(), vec![w, self.in_ch, 3, 3]),
            ("stem.b".into(), vec![w]),
        ];
        for i in 0..self.blocks {
            plan.push((format!("block{i}.conv_a.w"), vec![w, w, 3, 3]));
            plan.push((format!("block{i}.conv_a.b"), vec![w]));
            plan.push((format!("block{i}.conv_b.w"), vec![w, w, 3, 3]));
            plan.push((format!("block{i}.conv_b.b"), vec![w]));
            if self.cond_dim > 0 {
                plan.push((format!("block{i}.gamma.w"), vec![w, self.cond_dim]));
                plan.push((format!("block{i}.gamma.b"), vec![w]));
                plan.push((format!("block{i}.beta.w"), vec![w, self.cond_dim]));
                plan.push((format!("block{i}.beta.b"), vec![w]));
            }
        }
        plan.push(("head.w".into(), vec![self.out_ch, w, 3, 3]));
        plan.push(("head.b".into(), vec![self.out_ch]));
        plan
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-limit..limit)).collect()).unwrap()
}

fn fan_in_of(name: &str, shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[1],
        _ => {
            debug_assert!(name.ends_with(".b"));
            1
        }
    }
}

/// Residual conv network holding its own parameters. Bind once per tape,
/// then run any number of forwards against the returned handles.
#[derive(Clone, Debug)]
pub struct ResidualNet {
    pub arch: NetArch,
    pub params: ParamStore,
}

impl ResidualNet {
    /// Exact identity at initialization: body weights random, modulation
    /// and head zero, so output == clamp01(input + 0).
    pub fn identity_init(arch: NetArch, seed_value: u64) -> Result<Self> {
        Self::build(arch, seed_value, false)
    }

    /// Every parameter random, including modulation and head. Used where
    /// zero parameters would zero out entire gradient paths.
    pub fn random_init(arch: NetArch, seed_value: u64) -> Result<Self> {
        Self::build(arch, seed_value, true)
    }

    fn build(arch: NetArch, seed_value: u64, randomize_all: bool) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed::derive(seed_value, "net-init", 0));
        let mut params = ParamStore::new();
        for (name, shape) in arch.param_plan() {
            let zero_at_identity = name.starts_with("head.")
                || name.contains(".gamma.")
                || name.contains(".beta.");
            let value = if name.ends_with(".b") {
                if randomize_all {
                    let n = shape[0];
                    Tensor::from_vec(
                        shape,
                        (0..n).map(|_| rng.random_range(-0.05..0.05)).collect(),
                    )?
                } else {
                    Tensor::zeros(shape)
                }
            } else if zero_at_identity && !randomize_all {
                Tensor::zeros(shape)
            } else {
                let fan_in = fan_in_of(&name, &shape);
                let t = he_uniform(&mut rng, shape, fan_in);
                if name.contains(".gamma.") || name.contains(".beta.") {
                    t.map(|v| 0.1 * v)
                } else {
                    t
                }
            };
            params.register(name, value)?;
        }
        Ok(ResidualNet { arch, params })
    }

    pub fn from_parts(arch: NetArch, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        for (name, shape) in arch.param_plan() {
            let p = params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.value.shape()
                )));
            }
        }
        if params.len() != arch.param_plan().len() {
            return Err(Error::Checkpoint("extra parameters in store".into()));
        }
        Ok(ResidualNet { arch, params })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Forward through bound handles. `cond` is required iff the
    /// architecture is conditioned; it is consumed as-is (callers detach by
    /// binding it as a constant).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let arch = &self.arch;
        let (_, c_in, _, _) = tape.value(x).dims4()?;
        if c_in != arch.in_ch {
            return Err(Error::shape(format!(
                "input has {c_in} channels, network expects {}",
                arch.in_ch
            )));
        }
        match (arch.cond_dim > 0, cond) {
            (true, None) => return Err(Error::invalid("conditioned network given no condition")),
            (false, Some(_)) => {
                return Err(Error::invalid("unconditioned network given a condition"))
            }
            (true, Some(cv)) => {
                if tape.value(cv).shape() != [arch.cond_dim] {
                    return Err(Error::shape(format!(
                        "condition shape {:?}, expected [{}]",
                        tape.value(cv).shape(),
                        arch.cond_dim
                    )));
                }
            }
            (false, None) => {}
        }
        if vars.len() != arch.param_plan().len() {
            return Err(Error::invalid("bound handle count does not match architecture"));
        }
        let mut idx = 0;
        let next = |idx: &mut usize| {
            let v = vars[*idx];
            *idx += 1;
            v
        };
        let mut cur = tape.conv2d(x, next(&mut idx), 1, 1)?;
        cur = tape.bias_add(cur, next(&mut idx))?;
        cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        for _ in 0..arch.blocks {
            let skip = cur;
            let mut h = tape.conv2d(cur, next(&mut idx), 1, 1)?;
            h = tape.bias_add(h, next(&mut idx))?;
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = tape.conv2d(h, next(&mut idx), 1, 1)?;
            h = tape.bias_add(h, next(&mut idx))?;
            if let Some(cv) = cond {
                let gamma = {
                    let (w, b) = (next(&mut idx), next(&mut idx));
                    tape.linear(cv, w, b)?
                };
                let beta = {
                    let (w, b) = (next(&mut idx), next(&mut idx));
                    tape.linear(cv, w, b)?
                };
                h = tape.scale_shift(h, gamma, beta)?;
            }
            cur = tape.add(skip, h)?;
        }
        let mut out = tape.conv2d(cur, next(&mut idx), 1, 1)?;
        out = tape.bias_add(out, next(&mut idx))?;
        match arch.output {
            OutputMode::Raw => Ok(out),
            OutputMode::ResidualClamp => {
                let s = tape.add(x, out)?;
                Ok(tape.clamp01(s))
            }
        }
    }

    /// Value-level inference over a scratch tape with frozen parameters.
    pub fn infer(&self, x: &Tensor, cond: Option<&Condition>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = cond.map(|c| tape.constant(c.to_tensor()));
        let y = self.forward(&mut tape, &vars, xv, cv)?;
        Ok(tape.value(y).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &ArchDescriptor::ResidualNet { arch: self.arch }, &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (desc, params) = checkpoint::load(path)?;
        match desc {
            ArchDescriptor::ResidualNet { arch } => Self::from_parts(arch, params),
            other => Err(Error::Checkpoint(format!("expected a residual net, found {other:?}"))),
        }
    }
}

/// Cumulative signal-retention sequence for forward noising. Strictly
/// decreasing, within (0, 1].
#[derive(Serialize, Deserialize, Clone, PartialEq, Debug)]
pub struct Schedule {
    alphas_bar: Vec<f64>,
}

impl Schedule {
    pub fn new(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::invalid("empty noising schedule"));
        }
        let in_domain = alphas_bar.iter().all(|a| *a > 0.0 && *a <= 1.0);
        let decreasing = alphas_bar.windows(2).all(|w| w[1] < w[0]);
        if !in_domain || !decreasing {
            return Err(Error::invalid("alphas_bar must decrease strictly within (0, 1]"));
        }
        Ok(Schedule { alphas_bar })
    }

    pub fn linear(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        let a: Vec<f64> = (0..steps)
            .map(|t| start + (end - start) * t as f64 / (steps - 1) as f64)
            .collect();
        Schedule::new(a)
    }

    /// Desk-scale default: 20 steps from 0.9999 down to 0.05.
    pub fn default_desk() -> Self {
        Schedule::linear(0.9999, 0.05, 20).unwrap()
    }

    pub fn len(&self) -> usize {
        self.alphas_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule of {}", self.len())))
    }

    /// z_t = sqrt(abar_t) z + sqrt(1 - abar_t) eps.
    pub fn noise_to(&self, z: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        z.same_shape(eps)?;
        let ab = self.alpha_bar(t)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(zv, ev)| sa * zv + sb * ev)
            .collect();
        Tensor::from_vec(z.shape().to_vec(), data)
    }

    pub fn noise_to_tape(&self, tape: &mut Tape, z: Var, t: usize, eps: Var) -> Result<Var> {
        let ab = self.alpha_bar(t)?;
        let zs = tape.mul_scalar(z, ab.sqrt());
        let es = tape.mul_scalar(eps, (1.0 - ab).sqrt());
        tape.add(zs, es)
    }
}

/// Noise predictor over a noised image and a constant time plane.
#[derive(Clone, Debug)]
pub struct PriorScore {
    pub net: ResidualNet,
    pub schedule: Schedule,
}

impl PriorScore {
    /// Head starts at zero: the initial prediction is the zero noise field.
    pub fn new(seed_value: u64) -> Result<Self> {
        Ok(PriorScore {
            net: ResidualNet::identity_init(NetArch::denoiser(), seed_value)?,
            schedule: Schedule::default_desk(),
        })
    }

    /// Fully randomized weights; predictions are nonzero from the start.
    pub fn random(seed_value: u64) -> Result<Self> {
        Ok(PriorScore {
            net: ResidualNet::random_init(NetArch::denoiser(), seed_value)?,
            schedule: Schedule::default_desk(),
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.net.bind(tape, trainable)
    }

    /// eps_hat(z_t, t): concatenates a t/(T-1) plane and runs the net.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], z_t: Var, t: usize) -> Result<Var> {
        self.schedule.alpha_bar(t)?;
        let (_, _, h, w) = tape.value(z_t).dims4()?;
        let tval = t as f64 / (self.schedule.len() - 1) as f64;
        let plane = tape.constant(Tensor::full(vec![1, 1, h, w], tval));
        let xin = tape.concat_channels(z_t, plane)?;
        self.net.forward(tape, vars, xin, None)
    }

    pub fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let zv = tape.constant(z_t.clone());
        let out = self.forward(&mut tape, &vars, zv, t)?;
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(
            path,
            &ArchDescriptor::PriorScore {
                arch: self.net.arch,
                alphas_bar: self.schedule.alphas_bar.clone(),
            },
            &self.net.params,
        )
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (desc, params) = checkpoint::load(path)?;
        match desc {
            ArchDescriptor::PriorScore { arch, alphas_bar } => Ok(PriorScore {
                net: ResidualNet::from_parts(arch, params)?,
                schedule: Schedule::new(alphas_bar)?,
            }),
            other => Err(Error::Checkpoint(format!("expected a noise predictor, found {other:?}"))),
        }
    }
}

/// Condition vector fed to conditioned networks. Null means all zeros.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct Condition {
    pub vector: Vec<f64>,
    pub is_null: bool,
}

impl Condition {
    pub fn null(dim: usize) -> Self {
        Condition { vector: vec![0.0; dim], is_null: true }
    }

    pub fn from_vector(vector: Vec<f64>) -> Self {
        Condition { vector, is_null: false }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.vector.len()], self.vector.clone()).unwrap()
    }

    pub fn cosine(&self, other: &Condition) -> f64 {
        let dot: f64 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na: f64 = self.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = other.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Replaces the condition with the null condition with probability `p`,
/// deterministically in the seed.
pub fn condition_dropout(c: &Condition, p: f64, seed_value: u64) -> Result<Condition> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid("dropout probability outside [0, 1]"));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "cond-drop", 0));
    if rng.random::<f64>() < p {
        Ok(Condition::null(c.vector.len()))
    } else {
        Ok(c.clone())
    }
}

/// Fixed, seeded conv backbone with global mean and deviation pooling.
/// Never trained; the same seed always reproduces the same parameters, so
/// features live in one stable space across runs and process restarts.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamStore,
}

impl FeatureExtractor {
    pub fn fixed() -> Self {
        Self::seeded(BACKBONE_SEED)
    }

    pub fn seeded(seed_value: u64) -> Self {
        let mut rng = seed::rng(seed::derive(seed_value, "backbone", 0));
        let mut params = ParamStore::new();
        let mut prev = 3;
        for (i, width) in BACKBONE_WIDTHS.iter().enumerate() {
            let w = he_uniform(&mut rng, vec![*width, prev, 3, 3], prev * 9);
            params.register(format!("conv{i}.w"), w).unwrap();
            let b = Tensor::from_vec(
                vec![*width],
                (0..*width).map(|_| rng.random_range(-0.1..0.1)).collect(),
            )
            .unwrap();
            params.register(format!("conv{i}.b"), b).unwrap();
            prev = *width;
        }
        FeatureExtractor { params }
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape, false)
    }

    /// Pooled feature vector of length CONDITION_DIM, differentiable in x.
    pub fn features_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut cur = x;
        for i in 0..BACKBONE_WIDTHS.len() {
            cur = tape.conv2d(cur, vars[2 * i], 2, 1)?;
            cur = tape.bias_add(cur, vars[2 * i + 1])?;
            cur = tape.leaky_relu(cur, LEAKY_SLOPE);
        }
        let mean = tape.spatial_mean(cur)?;
        let sq = tape.square(cur);
        let mean_sq = tape.spatial_mean(sq)?;
        let mean2 = tape.square(mean);
        let var = tape.sub(mean_sq, mean2)?;
        let var_pos = tape.add_scalar(var, 1e-6);
        let dev = tape.sqrt(var_pos)?;
        tape.concat_vec(mean, dev)
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.features_tape(&mut tape, &vars, xv)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// L2-normalized feature vector as a condition.
    pub fn extract_condition(&self, x: &Tensor) -> Result<Condition> {
        let f = self.features(x)?;
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(Error::Numeric("feature vector has vanishing norm".into()));
        }
        Ok(Condition::from_vector(f.iter().map(|v| v / norm).collect()))
    }

    /// `extract_condition` on the tape: the normalized condition stays
    /// differentiable in x, so losses that re-extract conditions from
    /// intermediate images keep exact gradients.
    pub fn condition_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let f = self.features_tape(tape, vars, x)?;
        let sq = tape.square(f);
        let n2 = tape.sum(sq);
        let norm = tape.sqrt(n2)?;
        tape.div_by(f, norm)
    }

    pub fn values_equal(&self, other: &FeatureExtractor) -> bool {
        self.params.values_equal(&other.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{apply_manifest, sample_manifest, DegradationPreset};
    use crate::numerics::{finite_diff_check, gaussian_kernel2d, Objective};
    use rand::Rng;

    fn image(seed_value: u64, size: usize) -> Tensor {
        let mut rng = seed::rng(seed_value);
        Tensor::from_vec(
            vec![1, 3, size, size],
            (0..3 * size * size).map(|_| rng.random_range(0.02..0.98)).collect(),
        )
        .unwrap()
    }

    /// Smooth random image: blurred noise stretched into [0.1, 0.9].
    fn smooth_image(seed_value: u64, size: usize) -> Tensor {
        let noise = image(seed_value, size);
        let mut tape = Tape::new();
        let x = tape.constant(noise);
        let k = tape.constant(gaussian_kernel2d(1.5, 5).unwrap());
        let b = tape.blur2d(x, k).unwrap();
        let t = tape.value(b);
        let (lo, hi) = t.data().iter().fold((f64::MAX, f64::MIN), |(l, h), v| {
            (l.min(*v), h.max(*v))
        });
        t.map(|v| 0.1 + 0.8 * (v - lo) / (hi - lo).max(1e-12))
    }

    #[test]
    fn identity_init_is_exact_identity() {
        let net = ResidualNet::identity_init(NetArch::image_net(), 7).unwrap();
        for s in 0..10u64 {
            let x = image(s, 12);
            let c = Condition::from_vector(vec![0.3; CONDITION_DIM]);
            let y = net.infer(&x, Some(&c)).unwrap();
            let diff = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(diff <= 1e-6, "identity deviation {diff:.3e}");
        }
    }

    #[test]
    fn null_condition_equals_zero_vector() {
        let net = ResidualNet::random_init(NetArch::image_net(), 3).unwrap();
        let x = image(1, 10);
        let a = net.infer(&x, Some(&Condition::null(CONDITION_DIM))).unwrap();
        let b = net
            .infer(&x, Some(&Condition::from_vector(vec![0.0; CONDITION_DIM])))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_stays_in_unit_range_with_matching_shape() {
        let net = ResidualNet::random_init(NetArch::image_net(), 5).unwrap();
        let x = image(2, 14);
        let c = Condition::from_vector(vec![0.5; CONDITION_DIM]);
        let y = net.infer(&x, Some(&c)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn condition_dim_mismatch_rejected() {
        let net = ResidualNet::random_init(NetArch::image_net(), 5).unwrap();
        let x = image(2, 10);
        assert!(net.infer(&x, Some(&Condition::null(7))).is_err());
        assert!(net.infer(&x, None).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = ResidualNet::random_init(NetArch::image_net().with_width(6), 11).unwrap();
        let x = image(4, 10);
        let cond = Condition::from_vector(
            (0..CONDITION_DIM).map(|i| ((i as f64) * 0.37).sin() * 0.4).collect(),
        );
        let mut store = net.params.clone();
        let arch = net.arch;
        let f: &Objective = &|s| {
            let probe = ResidualNet { arch, params: s.clone() };
            let mut tape = Tape::new();
            let vars = probe.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let cv = tape.constant(cond.to_tensor());
            let y = probe.forward(&mut tape, &vars, xv, Some(cv))?;
            let l = tape.mean(y);
            let g = tape.backward(l)?;
            Ok((tape.value(l).item()?, s.collect_grad_vector(&g, &vars)))
        };
        let err = finite_diff_check(f, &mut store, 1e-5, 60, 17).unwrap();
        assert!(err <= 1e-4, "projector parameter gradient error {err:.3e}");
    }

    #[test]
    fn frozen_binding_records_no_gradients() {
        let net = ResidualNet::random_init(NetArch::image_net(), 13).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape, false);
        let x = tape.leaf(image(6, 10));
        let c = tape.constant(Condition::from_vector(vec![0.2; CONDITION_DIM]).to_tensor());
        let y = net.forward(&mut tape, &vars, x, Some(c)).unwrap();
        let l = tape.mean(y);
        let g = tape.backward(l).unwrap();
        assert!(vars.iter().all(|v| g.wrt(*v).is_none()));
        assert!(g.wrt(x).is_some());
        let abs_sum: f64 = net.params.collect_grad_vector(&g, &vars).iter().map(|v| v.abs()).sum();
        assert_eq!(abs_sum, 0.0);
    }

    #[test]
    fn condition_modulation_is_lipschitz_bounded() {
        let net = ResidualNet::random_init(NetArch::image_net(), 19).unwrap();
        let x = image(8, 12);
        let base: Vec<f64> = (0..CONDITION_DIM).map(|i| ((i * i) as f64).sin() * 0.3).collect();
        let y0 = net.infer(&x, Some(&Condition::from_vector(base.clone()))).unwrap();
        let mut rng = seed::rng(23);
        let recorded_l = 40.0;
        for scale in [1e-1, 1e-2, 1e-3, 1e-4] {
            let delta: Vec<f64> =
                (0..CONDITION_DIM).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let norm_d: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let shifted: Vec<f64> = base.iter().zip(&delta).map(|(a, d)| a + d).collect();
            let y1 = net.infer(&x, Some(&Condition::from_vector(shifted))).unwrap();
            let norm_out: f64 = y0
                .data()
                .iter()
                .zip(y1.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                norm_out <= recorded_l * norm_d,
                "output moved {norm_out:.3e} for condition step {norm_d:.3e}"
            );
        }
    }

    #[test]
    fn noising_endpoints_and_domain() {
        let z = image(1, 6);
        let eps = image(2, 6);
        let s = Schedule::new(vec![1.0, 0.5, 1e-30]).unwrap();
        assert_eq!(s.noise_to(&z, 0, &eps).unwrap(), z);
        let near_eps = s.noise_to(&z, 2, &eps).unwrap();
        let diff = near_eps
            .data()
            .iter()
            .zip(eps.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff <= 1e-10);
        assert!(s.noise_to(&z, 3, &eps).is_err());
        assert!(Schedule::new(vec![0.5, 0.5]).is_err());
        assert!(Schedule::new(vec![0.5, 1.2]).is_err());
        assert!(Schedule::new(vec![0.5, 0.0]).is_err());
    }

    #[test]
    fn noised_latent_variance_matches_schedule() {
        let s = Schedule::default_desk();
        let t = 10;
        let ab = s.alpha_bar(t).unwrap();
        let z = Tensor::zeros(vec![1, 3, 4, 4]);
        let mut rng = seed::rng(31);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..10_000 {
            let eps = Tensor::from_vec(
                vec![1, 3, 4, 4],
                (0..48).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
            )
            .unwrap();
            let zt = s.noise_to(&z, t, &eps).unwrap();
            for v in zt.data() {
                acc += v * v;
                count += 1;
            }
        }
        let var = acc / count as f64;
        let expect = 1.0 - ab;
        assert!(
            (var - expect).abs() <= 0.03 * expect,
            "variance {var:.4} vs expected {expect:.4}"
        );
    }

    #[test]
    fn noise_predictor_shapes_determinism_and_range() {
        let p = PriorScore::new(41).unwrap();
        let z = image(3, 12);
        let zt = p.schedule.noise_to(&z, 5, &image(4, 12)).unwrap();
        let a = p.predict(&zt, 5).unwrap();
        let b = p.predict(&zt, 5).unwrap();
        assert_eq!(a.shape(), z.shape());
        assert_eq!(a, b);
        assert!(p.predict(&zt, 20).is_err());
    }

    #[test]
    fn noise_predictor_fits_a_fixed_sample() {
        let mut p = PriorScore::new(43).unwrap();
        let z = smooth_image(50, 12);
        let mut rng = seed::rng(51);
        let eps = Tensor::from_vec(
            vec![1, 3, 12, 12],
            (0..432).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let t = 0;
        let zt = p.schedule.noise_to(&z, t, &eps).unwrap();
        let mut errs = Vec::new();
        for _ in 0..150 {
            let mut tape = Tape::new();
            let vars = p.net.params.bind(&mut tape, true);
            let zv = tape.constant(zt.clone());
            let pred = p.forward(&mut tape, &vars, zv, t).unwrap();
            let ev = tape.constant(eps.clone());
            let d = tape.sub(pred, ev).unwrap();
            let sq = tape.square(d);
            let loss = tape.mean(sq);
            errs.push(tape.value(loss).item().unwrap());
            let g = tape.backward(loss).unwrap();
            p.net.params.zero_grads();
            p.net.params.accumulate_grads(&g, &vars, 1.0);
            for i in 0..p.net.params.len() {
                let param = p.net.params.at_mut(i);
                let gdata: Vec<f64> = param.grad.data().to_vec();
                for (v, gv) in param.value.data_mut().iter_mut().zip(gdata) {
                    *v -= 0.1 * gv;
                }
            }
        }
        assert!(
            errs.last().unwrap() < &(0.6 * errs[0]),
            "denoising error failed to shrink: {:.4} -> {:.4}",
            errs[0],
            errs.last().unwrap()
        );
    }

    #[test]
    fn conditions_are_deterministic_and_unit_norm() {
        let fe = FeatureExtractor::fixed();
        assert!(fe.values_equal(&FeatureExtractor::fixed()));
        for s in 0..5u64 {
            let x = smooth_image(s, 24);
            let a = fe.extract_condition(&x).unwrap();
            let b = fe.extract_condition(&x).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.vector.len(), CONDITION_DIM);
            let norm: f64 = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9);
        }
        assert!(!FeatureExtractor::seeded(1).values_equal(&FeatureExtractor::seeded(2)));
    }

    #[test]
    fn conditions_track_degradation_severity() {
        let fe = FeatureExtractor::fixed();
        let lq = DegradationPreset::lq_default();
        let elq = DegradationPreset::elq_default();
        let mut wins = 0;
        let total = 200;
        for s in 0..total as u64 {
            let hq = smooth_image(1000 + s, 24);
            let mild = apply_manifest(&sample_manifest(&lq, s).unwrap(), &hq).unwrap();
            let harsh = apply_manifest(&sample_manifest(&elq, s).unwrap(), &hq).unwrap();
            let c_hq = fe.extract_condition(&hq).unwrap();
            let c_mild = fe.extract_condition(&mild).unwrap();
            let c_harsh = fe.extract_condition(&harsh).unwrap();
            if c_hq.cosine(&c_mild) > c_hq.cosine(&c_harsh) {
                wins += 1;
            }
        }
        assert!(
            wins * 100 >= total * 80,
            "severity ordering held on only {wins}/{total} images"
        );
    }

    #[test]
    fn condition_paths_agree() {
        let fe = FeatureExtractor::fixed();
        let x = smooth_image(83, 16);
        let c = fe.extract_condition(&x).unwrap();
        let mut tape = Tape::new();
        let vars = fe.bind(&mut tape);
        let xv = tape.constant(x);
        let cv = fe.condition_tape(&mut tape, &vars, xv).unwrap();
        let on_tape = tape.value(cv).data();
        assert_eq!(on_tape, c.vector.as_slice());
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let fe = FeatureExtractor::fixed();
        let mut store = ParamStore::new();
        store.register("x", image(60, 12)).unwrap();
        let f: &Objective = &|s| {
            let mut tape = Tape::new();
            let vars = s.bind(&mut tape, true);
            let fx = fe.bind(&mut tape);
            let feat = fe.features_tape(&mut tape, &fx, vars[0])?;
            let sq = tape.square(feat);
            let l = tape.sum(sq);
            let g = tape.backward(l)?;
            Ok((tape.value(l).item()?, s.collect_grad_vector(&g, &vars)))
        };
        let err = finite_diff_check(f, &mut store, 1e-5, 32, 61).unwrap();
        assert!(err <= 1e-4, "feature gradient error {err:.3e}");
    }

    #[test]
    fn dropout_frequency_matches_probability() {
        let c = Condition::from_vector(vec![0.5; 4]);
        assert_eq!(condition_dropout(&c, 0.0, 9).unwrap(), c);
        assert!(condition_dropout(&c, 1.0, 9).unwrap().is_null);
        let mut nulls = 0;
        let draws = 100_000;
        for i in 0..draws {
            if condition_dropout(&c, 0.3, i).unwrap().is_null {
                nulls += 1;
            }
        }
        let freq = nulls as f64 / draws as f64;
        assert!((freq - 0.3).abs() <= 0.01, "null fraction {freq:.4}");
        assert!(condition_dropout(&c, 1.5, 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let net = ResidualNet::random_init(NetArch::image_net().with_width(5), 71).unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = ResidualNet::load(&path).unwrap();
        assert_eq!(back.arch, net.arch);
        assert!(back.params.values_equal(&net.params));

        let prior = PriorScore::new(73).unwrap();
        let ppath = dir.path().join("prior.ckpt");
        prior.save(&ppath).unwrap();
        let pback = PriorScore::load(&ppath).unwrap();
        assert_eq!(pback.schedule, prior.schedule);
        assert!(pback.net.params.values_equal(&prior.net.params));

        assert!(PriorScore::load(&path).is_err());
        assert!(ResidualNet::load(&ppath).is_err());
    }
}
