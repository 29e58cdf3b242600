//! Quality metrics and rate-distortion tabulation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_ordered, Exec};
use crate::raster::RasterImage;

/// Reported value for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-scale weights of the five-scale structural similarity.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// `10 · log10(1 / MSE)` over all channels after clamping to `[0, 1]`,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64;
            d * d
        })
        .sum();
    let mse = sum / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// A single-channel f64 plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    /// BT.601 luma of the clamped image.
    fn luma(img: &RasterImage) -> Self {
        let v = img
            .data
            .chunks_exact(3)
            .map(|p| {
                let [r, g, b] = [p[0], p[1], p[2]].map(|c| c.clamp(0.0, 1.0) as f64);
                0.299 * r + 0.587 * g + 0.114 * b
            })
            .collect();
        Self {
            w: img.width,
            h: img.height,
            v,
        }
    }

    fn mul(&self, o: &Plane) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(a, b)| a * b).collect(),
        }
    }

    /// Separable 'valid' filtering with a normalized 1D kernel.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut tmp = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut v = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = k.iter().enumerate().map(|(i, a)| a * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { w: ow, h: oh, v }
    }

    /// 2×2 block average, dropping an odd trailing row/column.
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                v.push(0.25 * (self.v[i] + self.v[i + 1] + self.v[i + self.w] + self.v[i + self.w + 1]));
            }
        }
        Plane { w, h, v }
    }
}

fn gaussian_kernel(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean contrast-structure term and mean full SSIM at one scale.
fn ssim_terms(x: &Plane, y: &Plane, kernel: &[f64]) -> (f64, f64) {
    let mx = x.filter(kernel);
    let my = y.filter(kernel);
    let sxx = x.mul(x).filter(kernel);
    let syy = y.mul(y).filter(kernel);
    let sxy = x.mul(y).filter(kernel);
    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    for i in 0..mx.v.len() {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cov = sxy.v[i] - ux * uy;
        let cs = (2.0 * cov + C2) / (vx + vy + C2);
        let l = (2.0 * ux * uy + C1) / (ux * ux + uy * uy + C1);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    let n = mx.v.len() as f64;
    (cs_sum / n, ssim_sum / n)
}

/// Number of dyadic scales the smaller dimension supports with an 11-pixel
/// window at the coarsest scale, at most five.
pub fn ms_ssim_scales(width: usize, height: usize) -> usize {
    let m = width.min(height);
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&s| m >= WINDOW << (s - 1))
        .unwrap_or(1)
}

/// Multi-scale structural similarity on BT.601 luma.
///
/// Images too small for five scales use fewer, with the leading weights
/// renormalized to sum to one. Below 11 pixels a single scale runs with the
/// window shrunk to fit.
pub fn ms_ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if a.data.is_empty() {
        return Err(Error::Empty("empty image".into()));
    }
    let scales = ms_ssim_scales(a.width, a.height);
    let kernel = gaussian_kernel(WINDOW.min(a.width.min(a.height)));
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut x = Plane::luma(a);
    let mut y = Plane::luma(b);
    let mut score = 1.0;
    for (s, w) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (cs, ssim) = ssim_terms(&x, &y, &kernel);
        let term = if s + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(w / wsum);
        if s + 1 < scales {
            x = x.downsample();
            y = y.downsample();
        }
    }
    Ok(score.clamp(0.0, 1.0))
}

/// `(m − min) / (max − min)` for every value.
pub fn minmax_normalize(values: &[f64]) -> Result<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateRange);
    }
    Ok(values.iter().map(|&v| (v - lo) / (hi - lo)).collect())
}

/// One rate-distortion measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub budget: usize,
    pub level: usize,
    pub bytes: u64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub frames: usize,
}

/// Decoded renders of one stream at one level with their references.
#[derive(Debug, Clone)]
pub struct RdSample {
    pub budget: usize,
    pub level: usize,
    /// Stream size when read up to `level`.
    pub bytes: u64,
    pub renders: Vec<RasterImage>,
    pub targets: Vec<RasterImage>,
}

/// Mean PSNR and MS-SSIM over frames, one row per sample, sorted by
/// `(budget, level)`.
pub fn rd_table(samples: &[RdSample], exec: Exec) -> Result<Vec<RdPoint>> {
    if samples.is_empty() {
        return Err(Error::Empty("no rate-distortion samples".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        if s.renders.is_empty() || s.renders.len() != s.targets.len() {
            return Err(Error::RejectedInput(format!(
                "{} renders for {} reference frames",
                s.renders.len(),
                s.targets.len()
            )));
        }
        if s.bytes == 0 {
            return Err(Error::RejectedInput("zero-byte stream".into()));
        }
        let per_frame = map_ordered(exec, &s.renders, |i, r| -> Result<(f64, f64)> {
            Ok((psnr(r, &s.targets[i])?, ms_ssim(r, &s.targets[i])?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let n = per_frame.len() as f64;
        rows.push(RdPoint {
            budget: s.budget,
            level: s.level,
            bytes: s.bytes,
            psnr_db: per_frame.iter().map(|p| p.0).sum::<f64>() / n,
            ms_ssim: per_frame.iter().map(|p| p.1).sum::<f64>() / n,
            frames: per_frame.len(),
        });
    }
    rows.sort_by_key(|r| (r.budget, r.level));
    Ok(rows)
}

/// CSV with header `budget,level,bytes,psnr_db,ms_ssim,frames`.
pub fn write_rd_csv<W: Write>(rows: &[RdPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
