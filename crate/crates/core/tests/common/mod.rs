//! Shared test oracles and fixtures.
#![allow(dead_code)]

use std::path::PathBuf;

use pgsvc::raster::Target;
use pgsvc::{RasterImage, Splat};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn random_splat(rng: &mut impl Rng) -> Splat {
    Splat {
        pos: [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)],
        chol: [
            rng.gen_range(0.8..4.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(0.8..4.0),
        ],
        color: [rng.gen(), rng.gen(), rng.gen()],
        weight: rng.gen_range(0.1..1.0),
    }
}

pub fn random_image(w: usize, h: usize, rng: &mut impl Rng) -> RasterImage {
    RasterImage::from_fn(w, h, |_, _| {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ]
    })
}

/// `Σ_pixels upstream · render` evaluated in f64 directly from the explicit
/// covariance `s² L Lᵀ` and its closed-form inverse. Parameters are given as
/// f64 rows `[x, y, l1, l2, l3, r, g, b, w]`.
pub fn oracle_objective(params: &[[f64; 9]], target: Target, upstream: &RasterImage) -> f64 {
    let (w, h, s) = (target.width, target.height, target.chol_scale);
    let mut total = 0.0;
    for p in params {
        let (l1, l2, l3) = (p[2] * s, p[3] * s, p[4] * s);
        let (a, b, c) = (l1 * l1, l1 * l2, l2 * l2 + l3 * l3);
        let det = a * c - b * b;
        let (ia, ib, ic) = (c / det, -b / det, a / det);
        let (cx, cy) = (p[0] * w as f64, p[1] * h as f64);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let g = (-0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)).exp();
                let u = upstream.pixel(x, y);
                let dot: f64 = (0..3).map(|k| u[k] as f64 * p[5 + k]).sum();
                total += p[8] * g * dot;
            }
        }
    }
    total
}

/// Central finite differences of [`oracle_objective`] for every parameter.
pub fn finite_difference_grads(splats: &[Splat], target: Target, upstream: &RasterImage) -> Vec<[f64; 9]> {
    let base: Vec<[f64; 9]> = splats.iter().map(|s| s.to_array().map(|v| v as f64)).collect();
    let mut out = vec![[0.0; 9]; splats.len()];
    for i in 0..splats.len() {
        for k in 0..9 {
            let h = if k < 2 { 1e-7 } else { 1e-6 };
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i][k] += h;
            minus[i][k] -= h;
            out[i][k] =
                (oracle_objective(&plus, target, upstream) - oracle_objective(&minus, target, upstream)) / (2.0 * h);
        }
    }
    out
}

/// Relative tolerance with an absolute floor near zero.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    let d = (analytic - numeric).abs();
    d <= abs || d <= rel * analytic.abs().max(numeric.abs())
}
