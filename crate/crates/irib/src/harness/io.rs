//! File formats: 8-bit PNG images, RFC-4180 CSV metric tables, JSONL loss
//! logs, and SVG scatter plots.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Writes a [0,1] image as 8-bit RGB PNG; reals quantize by round-half-even.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (n, c, h, w) = img.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape("png output expects one 3-channel image"));
    }
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = d[(ch * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round_ties_even() as u8);
            }
        }
    }
    let buf: image::RgbImage = image::ImageBuffer::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::invalid("pixel buffer size mismatch"))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit PNG back into a [0,1] image tensor.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = px.0[ch] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![1, 3, h, w], data)
}

/// Serializes rows to RFC-4180 CSV with a header row.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Minimal scatter plot; each point is (x, y, label).
pub fn svg_scatter(points: &[(f64, f64, String)], x_label: &str, y_label: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 460.0;
    const ML: f64 = 70.0;
    const MR: f64 = 30.0;
    const MT: f64 = 30.0;
    const MB: f64 = 60.0;
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y, _) in points {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: &mut f64, b: &mut f64| {
        let span = (*b - *a).abs().max(1e-9);
        *a -= 0.1 * span;
        *b += 0.1 * span;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    s.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.4}</text>\n",
            sx(xv),
            H - MB + 20.0,
            xv
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            ML - 8.0,
            sy(yv) + 4.0,
            yv
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x_label}</text>\n",
        (ML + W - MR) / 2.0,
        H - 15.0
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">{y_label}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    for (x, y, label) in points {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"#2266cc\"/>\n",
            sx(*x),
            sy(*y)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{label}</text>\n",
            sx(*x) + 8.0,
            sy(*y) - 8.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
