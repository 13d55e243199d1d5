//! Procedural clean-image corpus: layered smooth gradients, ellipses,
//! polygons, and band-limited textures. Every image is a pure function of
//! (seed, index), so corpora regenerate bit-exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::numerics::Tensor;
use crate::{seed, Error, Result};

const VALUE_FLOOR: f64 = 0.02;
const VALUE_CEIL: f64 = 0.98;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Canvas {
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn at(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.size + y) * self.size + x]
    }

    /// Alpha-composites `color` wherever `mask` is positive.
    fn blend(&mut self, mask: impl Fn(f64, f64) -> f64, color: [f64; 3]) {
        let n = self.size;
        for y in 0..n {
            for x in 0..n {
                let a = mask(x as f64 + 0.5, y as f64 + 0.5);
                if a > 0.0 {
                    for (c, col) in color.iter().enumerate() {
                        let v = self.at(c, y, x);
                        *v = *v * (1.0 - a) + col * a;
                    }
                }
            }
        }
    }
}

fn base_gradient(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let n = canvas.size as f64;
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let radial = rng.random_range(0.0..1.0f64) < 0.35;
    let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let lo: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.45));
    let hi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..0.95));
    let n_sz = canvas.size;
    for y in 0..n_sz {
        for x in 0..n_sz {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if radial {
                (((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / n).clamp(0.0, 1.0)
            } else {
                ((fx * dx + fy * dy) / (n * std::f64::consts::SQRT_2) + 0.5).clamp(0.0, 1.0)
            };
            for c in 0..3 {
                *canvas.at(c, y, x) = lo[c] * (1.0 - t) + hi[c] * t;
            }
        }
    }
}

fn add_ellipse(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let n = canvas.size as f64;
    let (cx, cy) = (rng.random_range(0.1 * n..0.9 * n), rng.random_range(0.1 * n..0.9 * n));
    let (rx, ry) = (rng.random_range(0.08 * n..0.35 * n), rng.random_range(0.08 * n..0.35 * n));
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    canvas.blend(
        |x, y| {
            let (ux, uy) = (x - cx, y - cy);
            let (ex, ey) = ((ux * ct + uy * st) / rx, (-ux * st + uy * ct) / ry);
            let d = (ex * ex + ey * ey).sqrt();
            smoothstep(1.0, 1.0 - 2.0 / rx.min(ry), d)
        },
        color,
    );
}

fn add_polygon(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let n = canvas.size as f64;
    let sides = rng.random_range(3..=5usize);
    let (cx, cy) = (rng.random_range(0.15 * n..0.85 * n), rng.random_range(0.15 * n..0.85 * n));
    let radius = rng.random_range(0.1 * n..0.3 * n);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let verts: Vec<(f64, f64)> = (0..sides)
        .map(|i| {
            let a = phase + i as f64 / sides as f64 * std::f64::consts::TAU;
            let r = radius * rng.random_range(0.7..1.0);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
    // Signed distance to a convex-ish fan polygon via half-plane minimum.
    canvas.blend(
        |x, y| {
            let mut inside = f64::INFINITY;
            for i in 0..verts.len() {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % verts.len()];
                let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt().max(1e-9);
                inside = inside.min(cross / len);
            }
            smoothstep(-1.0, 1.0, inside)
        },
        color,
    );
}

fn add_texture(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let n = canvas.size as f64;
    let waves = rng.random_range(3..=6usize);
    let comps: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            let freq = rng.random_range(1.0..(n / 8.0).max(2.0));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.02..0.08);
            (freq, angle, phase, amp)
        })
        .collect();
    let n_sz = canvas.size;
    for y in 0..n_sz {
        for x in 0..n_sz {
            let (fx, fy) = (x as f64 / n, y as f64 / n);
            let mut v = 0.0;
            for &(freq, angle, phase, amp) in &comps {
                let u = fx * angle.cos() + fy * angle.sin();
                v += amp * (std::f64::consts::TAU * freq * u + phase).sin();
            }
            for c in 0..3 {
                *canvas.at(c, y, x) += v;
            }
        }
    }
}

/// One clean image, deterministic in (seed, index).
pub fn synth_image(seed_value: u64, index: u64, size: usize) -> Result<Tensor> {
    if size < 8 {
        return Err(Error::invalid("images must be at least 8x8"));
    }
    let mut rng = seed::rng(seed::derive(seed_value, "synth", index));
    let mut canvas = Canvas { size, data: vec![0.0; 3 * size * size] };
    base_gradient(&mut canvas, &mut rng);
    for _ in 0..rng.random_range(1..=3usize) {
        add_ellipse(&mut canvas, &mut rng);
    }
    for _ in 0..rng.random_range(1..=2usize) {
        add_polygon(&mut canvas, &mut rng);
    }
    add_texture(&mut canvas, &mut rng);
    Tensor::from_vec(
        vec![1, 3, size, size],
        canvas.data.into_iter().map(|v| v.clamp(VALUE_FLOOR, VALUE_CEIL)).collect(),
    )
}

/// A corpus of n clean images.
pub fn synth_dataset(n: usize, size: usize, seed_value: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be at least 1"));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| synth_image(seed_value, i, size))
        .collect()
}

/// Mean squared finite-difference magnitude, the corpus content check.
pub fn gradient_energy(img: &Tensor) -> Result<f64> {
    let (_, c, h, w) = img.dims4()?;
    let d = img.data();
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = d[(ch * h + y) * w + x];
                if x + 1 < w {
                    acc += (d[(ch * h + y) * w + x + 1] - v).powi(2);
                    count += 1;
                }
                if y + 1 < h {
                    acc += (d[(ch * h + y + 1) * w + x] - v).powi(2);
                    count += 1;
                }
            }
        }
    }
    Ok(acc / count as f64)
}
