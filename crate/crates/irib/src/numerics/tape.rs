//! Define-by-run reverse-mode tape. A forward pass records one node per
//! operation; `backward` walks the nodes in exact reverse recording order and
//! accumulates cotangents. Frozen models enter the graph as constants, so no
//! gradient buffers are ever allocated for them. Tapes are rebuilt per
//! forward pass and are single-threaded; parallelism happens across
//! independent tapes.

use crate::numerics::kernels as kn;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Handle to a node on its owning tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    LeakyRelu(Var, f64),
    Clamp01(Var),
    SoftRound(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: kn::ConvGeom },
    BiasAdd { x: Var, b: Var },
    Blur2d { x: Var, k: Var },
    ResizeBilinear { x: Var },
    ResizeNearest { x: Var },
    BlockDct8 { x: Var },
    BlockIdct8 { x: Var, out_h: usize, out_w: usize },
    ScaleShift { x: Var, gamma: Var, beta: Var },
    Linear { x: Var, w: Var, b: Var },
    ConcatChannels(Var, Var),
    ConcatVec(Var, Var),
    SpatialMean(Var),
    DivBy { x: Var, s: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by one backward pass, indexed by Var. Nodes the loss
/// never reached hold no buffer; their gradient is zero.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient buffer of `v`, or None when the loss did not reach it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.0).and_then(|s| s.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Trainable input: backward will produce a gradient for it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let t = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        )?;
        Ok(self.push(t, Op::Add(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let t = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect(),
        )?;
        Ok(self.push(t, Op::Sub(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let t = Tensor::from_vec(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        )?;
        Ok(self.push(t, Op::Mul(a, b), self.needs(a) || self.needs(b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let needs = self.needs(a);
        self.push(t, Op::MulScalar(a, s), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let needs = self.needs(a);
        self.push(t, Op::Square(a), needs)
    }

    /// Requires strictly positive inputs (the derivative is unbounded at 0).
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("sqrt requires strictly positive inputs".into()));
        }
        let t = self.value(a).map(f64::sqrt);
        let needs = self.needs(a);
        Ok(self.push(t, Op::Sqrt(a), needs))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let needs = self.needs(a);
        self.push(t, Op::Exp(a), needs)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric("ln requires strictly positive inputs".into()));
        }
        let t = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        Ok(self.push(t, Op::Ln(a), needs))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let t = self.value(a).map(|v| if v >= 0.0 { v } else { alpha * v });
        let needs = self.needs(a);
        self.push(t, Op::LeakyRelu(a, alpha), needs)
    }

    /// Clamp to [0, 1]. The subgradient passes wherever the input already
    /// lies inside the closed interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.clamp(0.0, 1.0));
        let needs = self.needs(a);
        self.push(t, Op::Clamp01(a), needs)
    }

    /// Differentiable rounding surrogate x - h sin(2 pi x) / (2 pi).
    /// hardness h = 0 is the exact identity; h = 1 has zero slope at the
    /// integers.
    pub fn soft_round(&mut self, a: Var, hardness: f64) -> Var {
        let two_pi = std::f64::consts::TAU;
        let t = self.value(a).map(|v| v - hardness * (two_pi * v).sin() / two_pi);
        let needs = self.needs(a);
        self.push(t, Op::SoftRound(a, hardness), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let needs = self.needs(a);
        self.push(t, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let t = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        let needs = self.needs(a);
        self.push(t, Op::Mean(a), needs)
    }

    /// Cross-correlation of NCHW input with an OIHW kernel, zero padding,
    /// square stride. Differentiable w.r.t. both input and kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = kn::ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = kn::conv2d_fwd(geom, self.value(x).data(), self.value(w).data());
        let t = Tensor::from_vec(vec![geom.n, geom.co, geom.oh, geom.ow], out)?;
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(t, Op::Conv2d { x, w, geom }, needs))
    }

    /// Adds a per-channel bias vector [C] to an NCHW tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(b).shape() != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} vs {c} channels",
                self.value(b).shape()
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for bi in 0..n {
            for (ci, &bias) in bv.iter().enumerate() {
                for v in &mut data[(bi * c + ci) * h * w..][..h * w] {
                    *v += bias;
                }
            }
        }
        let t = Tensor::from_vec(vec![n, c, h, w], data)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::BiasAdd { x, b }, needs))
    }

    /// Same-size per-channel blur with one shared 2-D kernel of odd extents,
    /// reflect padding. Differentiable w.r.t. both image and kernel.
    pub fn blur2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        let (kh, kw) = match self.value(k).shape()[..] {
            [kh, kw] if kh % 2 == 1 && kw % 2 == 1 => (kh, kw),
            _ => {
                return Err(Error::shape(format!(
                    "blur kernel must be 2-D with odd extents, got {:?}",
                    self.value(k).shape()
                )))
            }
        };
        let out = kn::blur_same_fwd(self.value(x).data(), dims, self.value(k).data(), (kh, kw));
        let t = Tensor::from_vec(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(t, Op::Blur2d { x, k }, needs))
    }

    /// Align-corners-false bilinear resampling: the source coordinate of
    /// output index d is clamp((d + 0.5) * in/out - 0.5, 0, in - 1).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("resize output extents must be positive"));
        }
        let out = kn::resize_bilinear_fwd(self.value(x).data(), (n, c, h, w), (oh, ow));
        let t = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::ResizeBilinear { x }, needs))
    }

    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("resize output extents must be positive"));
        }
        let out = kn::resize_nearest_fwd(self.value(x).data(), (n, c, h, w), (oh, ow));
        let t = Tensor::from_vec(vec![n, c, oh, ow], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::ResizeNearest { x }, needs))
    }

    /// Per-block 8x8 orthonormal DCT-II after reflect padding to multiples
    /// of 8. Output extents are the padded ones.
    pub fn block_dct8(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (out, ph, pw) = kn::block_dct8_fwd(self.value(x).data(), (n, c, h, w));
        let t = Tensor::from_vec(vec![n, c, ph, pw], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::BlockDct8 { x }, needs))
    }

    /// Inverse per-block DCT, cropping the padded planes back to
    /// (out_h, out_w).
    pub fn block_idct8(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, ph, pw) = self.value(x).dims4()?;
        if ph % 8 != 0 || pw % 8 != 0 || out_h > ph || out_w > pw || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!(
                "idct8 crop {out_h}x{out_w} from padded {ph}x{pw}"
            )));
        }
        let out = kn::block_idct8_fwd(self.value(x).data(), (n, c, ph, pw), (out_h, out_w));
        let t = Tensor::from_vec(vec![n, c, out_h, out_w], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::BlockIdct8 { x, out_h, out_w }, needs))
    }

    /// Feature-wise affine modulation: y[.., c, ..] = x * (1 + gamma[c]) +
    /// beta[c]. Zero gamma and beta is the identity.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "modulation shapes {:?}/{:?} vs {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for bi in 0..n {
            for ci in 0..c {
                let (g, b) = (1.0 + gv[ci], bv[ci]);
                for v in &mut data[(bi * c + ci) * h * w..][..h * w] {
                    *v = *v * g + b;
                }
            }
        }
        let t = Tensor::from_vec(vec![n, c, h, w], data)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::ScaleShift { x, gamma, beta }, needs))
    }

    /// Dense layer y = W x + b with x: [k], W: [m, k], b: [m].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let k = match self.value(x).shape()[..] {
            [k] => k,
            _ => return Err(Error::shape(format!("linear input must be a vector, got {:?}", self.value(x).shape()))),
        };
        let m = match self.value(w).shape()[..] {
            [m, wk] if wk == k => m,
            _ => {
                return Err(Error::shape(format!(
                    "linear weight {:?} vs input [{k}]",
                    self.value(w).shape()
                )))
            }
        };
        if self.value(b).shape() != [m] {
            return Err(Error::shape(format!(
                "linear bias {:?} vs {m} outputs",
                self.value(b).shape()
            )));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = self.value(b).data().to_vec();
        for (i, o) in out.iter_mut().enumerate() {
            *o += wv[i * k..(i + 1) * k].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        let t = Tensor::from_vec(vec![m], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Linear { x, w, b }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * na * ha * wa);
        for bi in 0..na {
            data.extend_from_slice(&self.value(a).data()[bi * ca * ha * wa..][..ca * ha * wa]);
            data.extend_from_slice(&self.value(b).data()[bi * cb * hb * wb..][..cb * hb * wb]);
        }
        let t = Tensor::from_vec(vec![na, ca + cb, ha, wa], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatChannels(a, b), needs))
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = match (self.value(a).shape(), self.value(b).shape()) {
            ([la], [lb]) => (*la, *lb),
            (sa, sb) => return Err(Error::shape(format!("concat_vec {sa:?} vs {sb:?}"))),
        };
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::from_vec(vec![la + lb], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatVec(a, b), needs))
    }

    /// Mean over the spatial extent of each channel: [1, C, H, W] -> [C].
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n != 1 {
            return Err(Error::shape(format!("spatial_mean expects batch 1, got {n}")));
        }
        let inv = 1.0 / (h * w) as f64;
        let data: Vec<f64> = (0..c)
            .map(|ci| self.value(x).data()[ci * h * w..][..h * w].iter().sum::<f64>() * inv)
            .collect();
        let t = Tensor::from_vec(vec![c], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SpatialMean(x), needs))
    }

    /// Elementwise division by a strictly positive scalar-valued handle
    /// (broadcast over x). Differentiable in both arguments.
    pub fn div_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!(
                "div_by divisor must be scalar-valued, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data()[0];
        if sv <= 0.0 {
            return Err(Error::Numeric("div_by requires a strictly positive divisor".into()));
        }
        let t = self.value(x).map(|v| v / sv);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(t, Op::DivBy { x, s }, needs))
    }

    /// Reverse pass from a scalar loss. Rejects non-scalar losses. Nodes are
    /// visited in exact reverse recording order; cotangents flow only into
    /// nodes marked as needing gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            g[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(dy) = g[id].take() else { continue };
            self.pull_back(id, &dy, &mut g);
            if matches!(self.nodes[id].op, Op::Leaf) {
                g[id] = Some(dy);
            }
        }
        Ok(Grads { g })
    }

    fn pull_back(&self, id: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let acc = |g: &mut [Option<Vec<f64>>], v: Var, len: usize| -> bool {
            if !self.needs(v) {
                return false;
            }
            if g[v.0].is_none() {
                g[v.0] = Some(vec![0.0; len]);
            }
            true
        };
        match self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(v) {
                        give(g, v, dy.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    give(g, a, dy.to_vec());
                }
                if self.needs(b) {
                    give(g, b, dy.iter().map(|d| -d).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.value(b).data();
                    give(g, a, dy.iter().zip(bv).map(|(d, v)| d * v).collect());
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    give(g, b, dy.iter().zip(av).map(|(d, v)| d * v).collect());
                }
            }
            Op::AddScalar(a) => {
                if self.needs(a) {
                    give(g, a, dy.to_vec());
                }
            }
            Op::MulScalar(a, s) => {
                if self.needs(a) {
                    give(g, a, dy.iter().map(|d| d * s).collect());
                }
            }
            Op::Square(a) => {
                if self.needs(a) {
                    let av = self.value(a).data();
                    give(g, a, dy.iter().zip(av).map(|(d, v)| d * 2.0 * v).collect());
                }
            }
            Op::Sqrt(a) => {
                if acc(g, a, dy.len()) {
                    let yv = self.nodes[id].value.data();
                    let ga = g[a.0].as_mut().unwrap();
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * 0.5 / yv[i];
                    }
                }
            }
            Op::Exp(a) => {
                if acc(g, a, dy.len()) {
                    let yv = self.nodes[id].value.data();
                    let ga = g[a.0].as_mut().unwrap();
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * yv[i];
                    }
                }
            }
            Op::Ln(a) => {
                if acc(g, a, dy.len()) {
                    let av = self.value(a).data();
                    let ga = g[a.0].as_mut().unwrap();
                    for i in 0..dy.len() {
                        ga[i] += dy[i] / av[i];
                    }
                }
            }
            Op::LeakyRelu(a, alpha) => {
                if self.needs(a) {
                    let av = self.value(a).data();
                    let d = dy
                        .iter()
                        .zip(av)
                        .map(|(&d, &v)| d * if v >= 0.0 { 1.0 } else { alpha })
                        .collect();
                    give(g, a, d);
                }
            }
            Op::Clamp01(a) => {
                if self.needs(a) {
                    let av = self.value(a).data();
                    let d = dy
                        .iter()
                        .zip(av)
                        .map(|(&d, &v)| if (0.0..=1.0).contains(&v) { d } else { 0.0 })
                        .collect();
                    give(g, a, d);
                }
            }
            Op::SoftRound(a, h) => {
                if acc(g, a, dy.len()) {
                    let av = self.value(a).data();
                    let ga = g[a.0].as_mut().unwrap();
                    for i in 0..dy.len() {
                        ga[i] += dy[i] * (1.0 - h * (std::f64::consts::TAU * av[i]).cos());
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    give(g, a, vec![dy[0]; self.value(a).len()]);
                }
            }
            Op::Mean(a) => {
                if self.needs(a) {
                    let len = self.value(a).len();
                    give(g, a, vec![dy[0] / len as f64; len]);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kn::conv2d_bwd(
                    geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    dy,
                    self.needs(x),
                    self.needs(w),
                );
                if let Some(dx) = dx {
                    give(g, x, dx);
                }
                if let Some(dw) = dw {
                    give(g, w, dw);
                }
            }
            Op::BiasAdd { x, b } => {
                if self.needs(x) {
                    give(g, x, dy.to_vec());
                }
                let (n, c, h, w) = self.value(x).dims4().expect("validated at record time");
                if acc(g, b, c) {
                    let gb = g[b.0].as_mut().unwrap();
                    for bi in 0..n {
                        for (ci, gbc) in gb.iter_mut().enumerate() {
                            *gbc += dy[(bi * c + ci) * h * w..][..h * w].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Blur2d { x, k } => {
                let dims = self.value(x).dims4().expect("validated at record time");
                let ks = self.value(k).shape();
                let (dx, dk) = kn::blur_same_bwd(
                    self.value(x).data(),
                    dims,
                    self.value(k).data(),
                    (ks[0], ks[1]),
                    dy,
                    self.needs(x),
                    self.needs(k),
                );
                if let Some(dx) = dx {
                    give(g, x, dx);
                }
                if let Some(dk) = dk {
                    give(g, k, dk);
                }
            }
            Op::ResizeBilinear { x } => {
                let dims = self.value(x).dims4().expect("validated at record time");
                let os = self.nodes[id].value.shape();
                if acc(g, x, dims.0 * dims.1 * dims.2 * dims.3) {
                    let dx = kn::resize_bilinear_bwd(dims, (os[2], os[3]), dy);
                    axpy_into(g[x.0].as_mut().unwrap(), 1.0, &dx);
                }
            }
            Op::ResizeNearest { x } => {
                let dims = self.value(x).dims4().expect("validated at record time");
                let os = self.nodes[id].value.shape();
                if acc(g, x, dims.0 * dims.1 * dims.2 * dims.3) {
                    let dx = kn::resize_nearest_bwd(dims, (os[2], os[3]), dy);
                    axpy_into(g[x.0].as_mut().unwrap(), 1.0, &dx);
                }
            }
            Op::BlockDct8 { x } => {
                let dims = self.value(x).dims4().expect("validated at record time");
                if acc(g, x, dims.0 * dims.1 * dims.2 * dims.3) {
                    let dx = kn::block_dct8_bwd(dims, dy);
                    axpy_into(g[x.0].as_mut().unwrap(), 1.0, &dx);
                }
            }
            Op::BlockIdct8 { x, out_h, out_w } => {
                let dims = self.value(x).dims4().expect("validated at record time");
                if acc(g, x, dims.0 * dims.1 * dims.2 * dims.3) {
                    let dx = kn::block_idct8_bwd(dims, (out_h, out_w), dy);
                    axpy_into(g[x.0].as_mut().unwrap(), 1.0, &dx);
                }
            }
            Op::ScaleShift { x, gamma, beta } => {
                let (n, c, h, w) = self.value(x).dims4().expect("validated at record time");
                let hw = h * w;
                if self.needs(x) {
                    let gv = self.value(gamma).data();
                    let mut d = vec![0.0; n * c * hw];
                    for bi in 0..n {
                        for ci in 0..c {
                            let s = 1.0 + gv[ci];
                            let off = (bi * c + ci) * hw;
                            for i in 0..hw {
                                d[off + i] = dy[off + i] * s;
                            }
                        }
                    }
                    give(g, x, d);
                }
                if acc(g, gamma, c) {
                    let xv = self.value(x).data();
                    let gg = g[gamma.0].as_mut().unwrap();
                    for bi in 0..n {
                        for (ci, ggc) in gg.iter_mut().enumerate() {
                            let off = (bi * c + ci) * hw;
                            *ggc += (0..hw).map(|i| dy[off + i] * xv[off + i]).sum::<f64>();
                        }
                    }
                }
                if acc(g, beta, c) {
                    let gb = g[beta.0].as_mut().unwrap();
                    for bi in 0..n {
                        for (ci, gbc) in gb.iter_mut().enumerate() {
                            let off = (bi * c + ci) * hw;
                            *gbc += dy[off..off + hw].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let k = self.value(x).len();
                let m = dy.len();
                if acc(g, x, k) {
                    let wv = self.value(w).data();
                    let gx = g[x.0].as_mut().unwrap();
                    for i in 0..m {
                        axpy_into(gx, dy[i], &wv[i * k..(i + 1) * k]);
                    }
                }
                if acc(g, w, m * k) {
                    let xv = self.value(x).data();
                    let gw = g[w.0].as_mut().unwrap();
                    for i in 0..m {
                        axpy_into(&mut gw[i * k..(i + 1) * k], dy[i], xv);
                    }
                }
                if acc(g, b, m) {
                    axpy_into(g[b.0].as_mut().unwrap(), 1.0, dy);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (na, ca, ha, wa) = self.value(a).dims4().expect("validated at record time");
                let cb = self.value(b).shape()[1];
                let plane = ha * wa;
                if acc(g, a, na * ca * plane) {
                    let ga = g[a.0].as_mut().unwrap();
                    for bi in 0..na {
                        let src = &dy[bi * (ca + cb) * plane..][..ca * plane];
                        axpy_into(&mut ga[bi * ca * plane..][..ca * plane], 1.0, src);
                    }
                }
                if acc(g, b, na * cb * plane) {
                    let gb = g[b.0].as_mut().unwrap();
                    for bi in 0..na {
                        let src = &dy[bi * (ca + cb) * plane + ca * plane..][..cb * plane];
                        axpy_into(&mut gb[bi * cb * plane..][..cb * plane], 1.0, src);
                    }
                }
            }
            Op::ConcatVec(a, b) => {
                let la = self.value(a).len();
                let lb = self.value(b).len();
                if acc(g, a, la) {
                    axpy_into(g[a.0].as_mut().unwrap(), 1.0, &dy[..la]);
                }
                if acc(g, b, lb) {
                    axpy_into(g[b.0].as_mut().unwrap(), 1.0, &dy[la..]);
                }
            }
            Op::SpatialMean(x) => {
                let (_, c, h, w) = self.value(x).dims4().expect("validated at record time");
                let hw = h * w;
                if acc(g, x, c * hw) {
                    let gx = g[x.0].as_mut().unwrap();
                    for ci in 0..c {
                        let d = dy[ci] / hw as f64;
                        for v in &mut gx[ci * hw..][..hw] {
                            *v += d;
                        }
                    }
                }
            }
            Op::DivBy { x, s } => {
                let sv = self.value(s).data()[0];
                if acc(g, x, dy.len()) {
                    axpy_into(g[x.0].as_mut().unwrap(), 1.0 / sv, dy);
                }
                if acc(g, s, 1) {
                    let xv = self.value(x).data();
                    let dot: f64 = dy.iter().zip(xv).map(|(d, v)| d * v).sum();
                    g[s.0].as_mut().unwrap()[0] -= dot / (sv * sv);
                }
            }
        }
    }
}

fn axpy_into(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Deposits a freshly computed cotangent: moves it into an empty slot,
/// accumulates otherwise.
fn give(g: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match g[v.0].as_mut() {
        Some(slot) => axpy_into(slot, 1.0, &d),
        None => g[v.0] = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = t.square(p);
        let l = t.sum(sq);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(t.backward(p).is_err());
    }

    #[test]
    fn unreached_leaf_has_no_buffer() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        let l = t.sum(a);
        let g = t.backward(l).unwrap();
        assert!(g.wrt(a).is_some());
        assert!(g.wrt(b).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::from_vec(vec![2], vec![5.0, 6.0]).unwrap());
        let m = t.mul(a, c).unwrap();
        let l = t.sum(m);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[5.0, 6.0]);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = crate::seed::rng(3);
        let x: Vec<f64> = (0..48).map(|_| rng.random_range(0.1..0.9)).collect();
        let w: Vec<f64> = (0..2 * 3 * 3 * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let run = || {
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::from_vec(vec![1, 3, 4, 4], x.clone()).unwrap());
            let wv = t.leaf(Tensor::from_vec(vec![2, 3, 3, 3], w.clone()).unwrap());
            let y = t.conv2d(xv, wv, 1, 1).unwrap();
            let y = t.leaky_relu(y, 0.1);
            let l = t.mean(y);
            let g = t.backward(l).unwrap();
            (g.wrt(xv).unwrap().to_vec(), g.wrt(wv).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    /// Central-difference oracle over a closure of one flat input.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + step;
            let hi = f(&xp);
            xp[i] = x[i] - step;
            let lo = f(&xp);
            xp[i] = x[i];
            out.push((hi - lo) / (2.0 * step));
        }
        out
    }

    fn max_rel_err(ad: &[f64], fd: &[f64]) -> f64 {
        ad.iter()
            .zip(fd)
            .map(|(a, f)| (a - f).abs() / f64::max(1e-12, a.abs() + f.abs()))
            .fold(0.0, f64::max)
    }

    /// Checks one op's input gradient against central differences. The loss
    /// is a fixed random weighting of the op output so every output element
    /// contributes a distinct cotangent.
    fn check_op(
        name: &str,
        shape: Vec<usize>,
        init: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> f64,
        build: &dyn Fn(&mut Tape, Var) -> Var,
    ) {
        let mut rng = crate::seed::rng(17);
        let n: usize = shape.iter().product();
        let x: Vec<f64> = (0..n).map(|_| init(&mut rng)).collect();
        let weights: Vec<f64> = {
            let mut t = Tape::new();
            let xv = t.constant(Tensor::from_vec(shape.clone(), x.clone()).unwrap());
            let y = build(&mut t, xv);
            (0..t.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let eval = |data: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::from_vec(shape.clone(), data.to_vec()).unwrap());
            let y = build(&mut t, xv);
            let wv = t.constant(
                Tensor::from_vec(t.value(y).shape().to_vec(), weights.clone()).unwrap(),
            );
            let prod = t.mul(y, wv).unwrap();
            let l = t.sum(prod);
            let g = t.backward(l).unwrap();
            (t.value(l).item().unwrap(), g.wrt(xv).map(<[f64]>::to_vec))
        };
        let ad = eval(&x).1.unwrap();
        let fd = fd_grad(&|d| eval(d).0, &x, 1e-5);
        let err = max_rel_err(&ad, &fd);
        assert!(err <= 1e-6, "{name}: max relative error {err:.3e}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let interior = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(0.1..0.9);
        let signed = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-0.9..0.9f64);
        let sh = vec![2, 3];
        check_op("square", sh.clone(), &signed, &|t, v| t.square(v));
        check_op("sqrt", sh.clone(), &interior, &|t, v| t.sqrt(v).unwrap());
        check_op("exp", sh.clone(), &signed, &|t, v| t.exp(v));
        check_op("ln", sh.clone(), &interior, &|t, v| t.ln(v).unwrap());
        check_op("add_scalar", sh.clone(), &signed, &|t, v| t.add_scalar(v, 0.7));
        check_op("mul_scalar", sh.clone(), &signed, &|t, v| t.mul_scalar(v, -1.3));
        check_op("soft_round", sh.clone(), &signed, &|t, v| t.soft_round(v, 0.8));
        check_op("clamp01_interior", sh.clone(), &interior, &|t, v| t.clamp01(v));
        // Keep leaky_relu inputs away from the kink at 0.
        check_op("leaky_relu", sh, &interior, &|t, v| t.leaky_relu(v, 0.2));
        check_op("mean", vec![7], &signed, &|t, v| t.mean(v));
    }

    #[test]
    fn div_by_matches_finite_differences_and_guards_domain() {
        let interior = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(0.2..0.9);
        check_op("div_by_const", vec![5], &interior, &|t, v| {
            let s = t.constant(Tensor::scalar(0.7));
            t.div_by(v, s).unwrap()
        });
        // Divisor on the gradient path: unit normalization.
        check_op("div_by_norm", vec![5], &interior, &|t, v| {
            let sq = t.square(v);
            let n2 = t.sum(sq);
            let n = t.sqrt(n2).unwrap();
            t.div_by(v, n).unwrap()
        });
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![2, 2], 1.0));
        let wide = t.constant(Tensor::full(vec![2], 1.0));
        assert!(t.div_by(x, wide).is_err());
        let zero = t.constant(Tensor::scalar(0.0));
        assert!(t.div_by(x, zero).is_err());
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let signed = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-0.9..0.9f64);
        check_op("mul_pair", vec![6], &signed, &|t, v| {
            let c = t.constant(Tensor::from_vec(vec![6], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap());
            let s = t.mul(v, c).unwrap();
            let d = t.sub(s, c).unwrap();
            t.add(d, c).unwrap()
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let interior = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(0.1..0.9);
        check_op("conv2d_x", vec![1, 2, 8, 8], &interior, &|t, v| {
            let w = {
                let mut r = crate::seed::rng(23);
                Tensor::from_vec(
                    vec![3, 2, 3, 3],
                    (0..54).map(|_| r.random_range(-0.5..0.5)).collect(),
                )
                .unwrap()
            };
            let wv = t.constant(w);
            t.conv2d(v, wv, 1, 1).unwrap()
        });
        check_op("conv2d_w", vec![3, 2, 3, 3], &interior, &|t, v| {
            let x = {
                let mut r = crate::seed::rng(29);
                Tensor::from_vec(
                    vec![1, 2, 8, 8],
                    (0..128).map(|_| r.random_range(0.0..1.0)).collect(),
                )
                .unwrap()
            };
            let xv = t.constant(x);
            t.conv2d(xv, v, 2, 1).unwrap()
        });
        check_op("bias_add", vec![4], &interior, &|t, v| {
            let x = t.constant(Tensor::full(vec![1, 4, 3, 3], 0.25));
            t.bias_add(x, v).unwrap()
        });
        check_op("blur2d_x", vec![1, 2, 6, 6], &interior, &|t, v| {
            let k = t.constant(kn::gaussian_kernel2d(0.8, 3).unwrap());
            t.blur2d(v, k).unwrap()
        });
        check_op("blur2d_k", vec![3, 3], &interior, &|t, v| {
            let x = {
                let mut r = crate::seed::rng(31);
                Tensor::from_vec(
                    vec![1, 1, 6, 6],
                    (0..36).map(|_| r.random_range(0.0..1.0)).collect(),
                )
                .unwrap()
            };
            let xv = t.constant(x);
            t.blur2d(xv, v).unwrap()
        });
        check_op("resize_bilinear", vec![1, 2, 6, 6], &interior, &|t, v| {
            t.resize_bilinear(v, 4, 9).unwrap()
        });
        check_op("resize_nearest", vec![1, 2, 6, 6], &interior, &|t, v| {
            t.resize_nearest(v, 4, 9).unwrap()
        });
        check_op("block_dct8", vec![1, 1, 10, 12], &interior, &|t, v| {
            t.block_dct8(v).unwrap()
        });
        check_op("block_idct8", vec![1, 1, 16, 16], &interior, &|t, v| {
            t.block_idct8(v, 10, 12).unwrap()
        });
        check_op("scale_shift_x", vec![1, 3, 4, 4], &interior, &|t, v| {
            let gm = t.constant(Tensor::from_vec(vec![3], vec![0.2, -0.3, 0.5]).unwrap());
            let bt = t.constant(Tensor::from_vec(vec![3], vec![0.1, 0.0, -0.2]).unwrap());
            t.scale_shift(v, gm, bt).unwrap()
        });
        check_op("scale_shift_gamma", vec![3], &interior, &|t, v| {
            let x = t.constant(Tensor::full(vec![1, 3, 4, 4], 0.4));
            let bt = t.constant(Tensor::zeros(vec![3]));
            t.scale_shift(x, v, bt).unwrap()
        });
        check_op("linear_w", vec![4, 3], &interior, &|t, v| {
            let x = t.constant(Tensor::from_vec(vec![3], vec![0.3, -0.6, 0.9]).unwrap());
            let b = t.constant(Tensor::zeros(vec![4]));
            t.linear(x, v, b).unwrap()
        });
        check_op("concat_channels", vec![1, 2, 3, 3], &interior, &|t, v| {
            let other = t.constant(Tensor::full(vec![1, 1, 3, 3], 0.5));
            t.concat_channels(v, other).unwrap()
        });
        check_op("concat_vec", vec![3], &interior, &|t, v| {
            let other = t.constant(Tensor::from_vec(vec![2], vec![0.4, 0.8]).unwrap());
            t.concat_vec(v, other).unwrap()
        });
        check_op("spatial_mean", vec![1, 3, 5, 5], &interior, &|t, v| {
            t.spatial_mean(v).unwrap()
        });
    }

    #[test]
    fn conv_gradient_dense_random_case() {
        // The full conv gradient (input and kernel together) at tolerance
        // 1e-6 on a random 1x2x8x8 / 3x2x3x3 instance.
        let mut rng = crate::seed::rng(41);
        let x: Vec<f64> = (0..128).map(|_| rng.random_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..54).map(|_| rng.random_range(-0.5..0.5)).collect();
        let eval = |xd: &[f64], wd: &[f64]| {
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::from_vec(vec![1, 2, 8, 8], xd.to_vec()).unwrap());
            let wv = t.leaf(Tensor::from_vec(vec![3, 2, 3, 3], wd.to_vec()).unwrap());
            let y = t.conv2d(xv, wv, 1, 0).unwrap();
            let sq = t.square(y);
            let l = t.mean(sq);
            let g = t.backward(l).unwrap();
            (
                t.value(l).item().unwrap(),
                g.wrt(xv).unwrap().to_vec(),
                g.wrt(wv).unwrap().to_vec(),
            )
        };
        let (_, gx, gw) = eval(&x, &w);
        let fx = fd_grad(&|d| eval(d, &w).0, &x, 1e-5);
        let fw = fd_grad(&|d| eval(&x, d).0, &w, 1e-5);
        assert!(max_rel_err(&gx, &fx) <= 1e-6);
        assert!(max_rel_err(&gw, &fw) <= 1e-6);
    }

    #[test]
    fn identity_conv_kernel_roundtrips_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(vec![1, 1, 3, 3], 0.5));
        let w = t.constant(Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = t.conv2d(x, w, 1, 0).unwrap();
        let l = t.sum(y);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[1.0; 9]);
    }
}
