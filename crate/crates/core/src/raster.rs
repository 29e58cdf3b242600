//! Tiled accumulated-blending renderer and its analytic backward pass.
//!
//! A pixel's color is the order-independent sum
//! `Σ_n w_n c_n exp(-½ dᵀ Σ_n⁻¹ d)` over splats, where `d` is the offset from
//! the pixel center to the splat center in pixels of the render target. No
//! sorting and no alpha compositing take place, so the image is linear in
//! the splat set.
//!
//! The canvas is cut into 16×16 tiles. Each tile gathers the splats whose
//! support box touches it, in index order, and accumulates them in `f64`;
//! output is rounded to `f32` once per pixel. Tile rows are the unit of
//! parallel work, which makes results independent of the thread count.

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::splat::{cholesky_to_cov, cov_inverse_det, Splat};

/// Tile edge in pixels.
pub const TILE: usize = 16;

/// Default contribution cutoff (one 8-bit quantization step).
pub const DEFAULT_CUTOFF: f64 = 1.0 / 255.0;

/// Support radius in standard deviations along the major axis.
pub const SUPPORT_SIGMAS: f64 = 3.0;

/// Dense row-major `height × width × 3` linear RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RasterImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn ensure_same_dims(&self, other: &RasterImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape {
                expected: self.dims(),
                got: other.dims(),
            });
        }
        Ok(())
    }

    /// Copy with every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &RasterImage) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Gradient of a scalar loss with respect to one splat's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatGrad {
    pub pos: [f32; 2],
    pub chol: [f32; 3],
    pub color: [f32; 3],
    pub weight: f32,
}

impl SplatGrad {
    pub fn to_array(&self) -> [f32; 9] {
        Splat {
            pos: self.pos,
            chol: self.chol,
            color: self.color,
            weight: self.weight,
        }
        .to_array()
    }

    pub fn from_array(p: &[f32]) -> Self {
        let s = Splat::from_array(p);
        Self {
            pos: s.pos,
            chol: s.chol,
            color: s.color,
            weight: s.weight,
        }
    }

    pub fn add_assign(&mut self, other: &SplatGrad) {
        let mut a = self.to_array();
        for (x, y) in a.iter_mut().zip(other.to_array()) {
            *x += y;
        }
        *self = Self::from_array(&a);
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Render target size and the factor applied to stored Cholesky entries.
///
/// Splats store their Cholesky factor in top-level pixels; rendering a
/// lower-resolution level passes `chol_scale = height / top_height`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub width: usize,
    pub height: usize,
    pub chol_scale: f64,
}

impl Target {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            chol_scale: 1.0,
        }
    }

    /// Target for a canvas whose top level is `top_height` pixels tall.
    pub fn scaled(width: usize, height: usize, top_height: usize) -> Self {
        Self {
            width,
            height,
            chol_scale: height as f64 / top_height as f64,
        }
    }

    fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::RejectedInput(format!(
                "render target must be at least 1×1, got {}×{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Renderer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rasterizer {
    /// Contribution cutoff; `None` evaluates every splat at every pixel.
    pub cutoff: Option<f64>,
    pub exec: Exec,
}

impl Default for Rasterizer {
    fn default() -> Self {
        Self {
            cutoff: Some(DEFAULT_CUTOFF),
            exec: Exec::default(),
        }
    }
}

/// Splat parameters resolved into render-target pixels.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    cx: f64,
    cy: f64,
    /// Scaled Cholesky factor.
    l: [f64; 3],
    /// Σ⁻¹ as (a, b, c) for [[a, b], [b, c]].
    inv: [f64; 3],
    color: [f64; 3],
    weight: f64,
    radius: f64,
}

impl Prepared {
    #[inline]
    fn quad(&self, dx: f64, dy: f64) -> f64 {
        let [a, b, c] = self.inv;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }
}

fn prepare(splats: &[Splat], target: &Target) -> Result<Vec<Prepared>> {
    let s = target.chol_scale;
    splats
        .iter()
        .map(|sp| {
            let l = sp.chol.map(|v| v as f64 * s);
            let cov = cholesky_to_cov(l)?;
            let (inv, det) = cov_inverse_det(cov)?;
            let half_tr = 0.5 * (cov[0][0] + cov[1][1]);
            let lmax = half_tr + (half_tr * half_tr - det).max(0.0).sqrt();
            Ok(Prepared {
                cx: sp.pos[0] as f64 * target.width as f64,
                cy: sp.pos[1] as f64 * target.height as f64,
                l,
                inv: [inv[0][0], inv[0][1], inv[1][1]],
                color: sp.color.map(f64::from),
                weight: sp.weight as f64,
                radius: SUPPORT_SIGMAS * lmax.sqrt(),
            })
        })
        .collect()
}

/// Per-tile splat lists in compressed-row form.
struct Bins {
    tiles_x: usize,
    tiles_y: usize,
    start: Vec<usize>,
    items: Vec<u32>,
}

impl Bins {
    fn tile(&self, t: usize) -> &[u32] {
        &self.items[self.start[t]..self.start[t + 1]]
    }
}

/// Inclusive pixel range whose centers fall inside `[c - r, c + r]`.
fn pixel_span(c: f64, r: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (c - r - 0.5).ceil().max(0.0);
    let hi = (c + r - 0.5).floor().min(n as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize))
}

fn bin(prep: &[Prepared], target: &Target, cutoff: Option<f64>) -> Bins {
    let tiles_x = target.width.div_ceil(TILE);
    let tiles_y = target.height.div_ceil(TILE);
    let ntiles = tiles_x * tiles_y;
    if cutoff.is_none() {
        let n = prep.len();
        let items: Vec<u32> = (0..ntiles).flat_map(|_| 0..n as u32).collect();
        let start = (0..=ntiles).map(|t| t * n).collect();
        return Bins {
            tiles_x,
            tiles_y,
            start,
            items,
        };
    }
    let spans: Vec<Option<(usize, usize, usize, usize)>> = prep
        .iter()
        .map(|p| {
            let (x0, x1) = pixel_span(p.cx, p.radius, target.width)?;
            let (y0, y1) = pixel_span(p.cy, p.radius, target.height)?;
            Some((x0 / TILE, x1 / TILE, y0 / TILE, y1 / TILE))
        })
        .collect();
    let mut counts = vec![0usize; ntiles + 1];
    for &(tx0, tx1, ty0, ty1) in spans.iter().flatten() {
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                counts[ty * tiles_x + tx + 1] += 1;
            }
        }
    }
    for t in 0..ntiles {
        counts[t + 1] += counts[t];
    }
    let mut fill = counts.clone();
    let mut items = vec![0u32; counts[ntiles]];
    for (i, span) in spans.iter().enumerate() {
        if let Some((tx0, tx1, ty0, ty1)) = *span {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let t = ty * tiles_x + tx;
                    items[fill[t]] = i as u32;
                    fill[t] += 1;
                }
            }
        }
    }
    Bins {
        tiles_x,
        tiles_y,
        start: counts,
        items,
    }
}

/// Evaluates the Gaussian falloff, honoring the support box and cutoff.
#[inline]
fn falloff(p: &Prepared, dx: f64, dy: f64, max_quad: Option<f64>) -> Option<f64> {
    match max_quad {
        Some(mq) => {
            if dx.abs() > p.radius || dy.abs() > p.radius {
                return None;
            }
            let q = p.quad(dx, dy);
            (q <= mq).then(|| (-0.5 * q).exp())
        }
        None => Some((-0.5 * p.quad(dx, dy)).exp()),
    }
}

impl Rasterizer {
    /// Rasterizer without cutoff, evaluating every splat everywhere.
    pub fn exact() -> Self {
        Self {
            cutoff: None,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    fn max_quad(&self) -> Option<f64> {
        self.cutoff.map(|eps| -2.0 * eps.ln())
    }

    pub fn render(&self, splats: &[Splat], target: Target) -> Result<RasterImage> {
        target.check()?;
        let mut img = RasterImage::zeros(target.width, target.height);
        if splats.is_empty() {
            return Ok(img);
        }
        let prep = prepare(splats, &target)?;
        let bins = bin(&prep, &target, self.cutoff);
        let max_quad = self.max_quad();
        let w = target.width;
        let h = target.height;
        par::for_each_chunk_mut(self.exec, &mut img.data, TILE * w * 3, |ty, rows| {
            let y0 = ty * TILE;
            let y1 = (y0 + TILE).min(h);
            for tx in 0..bins.tiles_x {
                let list = bins.tile(ty * bins.tiles_x + tx);
                if list.is_empty() {
                    continue;
                }
                let x0 = tx * TILE;
                let x1 = (x0 + TILE).min(w);
                for y in y0..y1 {
                    let py = y as f64 + 0.5;
                    for x in x0..x1 {
                        let px = x as f64 + 0.5;
                        let mut acc = [0f64; 3];
                        for &i in list {
                            let p = &prep[i as usize];
                            if let Some(g) = falloff(p, px - p.cx, py - p.cy, max_quad) {
                                let k = p.weight * g;
                                acc[0] += p.color[0] * k;
                                acc[1] += p.color[1] * k;
                                acc[2] += p.color[2] * k;
                            }
                        }
                        let o = ((y - y0) * w + x) * 3;
                        rows[o] = acc[0] as f32;
                        rows[o + 1] = acc[1] as f32;
                        rows[o + 2] = acc[2] as f32;
                    }
                }
            }
        });
        Ok(img)
    }

    /// Gradients of `Σ_i upstream_i · render_i` with respect to every splat
    /// parameter, including the path through the Cholesky factorization.
    pub fn backward(&self, splats: &[Splat], target: Target, upstream: &RasterImage) -> Result<Vec<SplatGrad>> {
        target.check()?;
        if upstream.dims() != (target.width, target.height) {
            return Err(Error::Shape {
                expected: (target.width, target.height),
                got: upstream.dims(),
            });
        }
        if splats.is_empty() {
            return Ok(Vec::new());
        }
        let prep = prepare(splats, &target)?;
        let bins = bin(&prep, &target, self.cutoff);
        let max_quad = self.max_quad();
        let w = target.width;
        let h = target.height;
        let (wf, hf, s) = (w as f64, h as f64, target.chol_scale);
        let tiles: Vec<usize> = (0..bins.tiles_x * bins.tiles_y).collect();
        let partials = par::map_ordered(self.exec, &tiles, |_, &t| {
            let list = bins.tile(t);
            let mut local = vec![[0f64; 9]; list.len()];
            if list.is_empty() {
                return local;
            }
            let (tx, ty) = (t % bins.tiles_x, t / bins.tiles_x);
            let (x0, y0) = (tx * TILE, ty * TILE);
            let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
            for y in y0..y1 {
                let py = y as f64 + 0.5;
                for x in x0..x1 {
                    let px = x as f64 + 0.5;
                    let o = (y * w + x) * 3;
                    let g = [
                        upstream.data[o] as f64,
                        upstream.data[o + 1] as f64,
                        upstream.data[o + 2] as f64,
                    ];
                    if g == [0.0; 3] {
                        continue;
                    }
                    for (slot, &i) in local.iter_mut().zip(list) {
                        let p = &prep[i as usize];
                        let (dx, dy) = (px - p.cx, py - p.cy);
                        let Some(alpha) = falloff(p, dx, dy, max_quad) else {
                            continue;
                        };
                        let gc = g[0] * p.color[0] + g[1] * p.color[1] + g[2] * p.color[2];
                        let wa = p.weight * alpha;
                        slot[5] += g[0] * wa;
                        slot[6] += g[1] * wa;
                        slot[7] += g[2] * wa;
                        slot[8] += gc * alpha;
                        // dL/dq for q = |L⁻¹ d|², solved as L e = d
                        let dq = -0.5 * gc * wa;
                        let [l1, l2, l3] = p.l;
                        let e1 = dx / l1;
                        let e2 = (dy - l2 * e1) / l3;
                        let dq_ddx = 2.0 * (e1 / l1 - e2 * l2 / (l1 * l3));
                        let dq_ddy = 2.0 * e2 / l3;
                        slot[0] -= dq * dq_ddx * wf;
                        slot[1] -= dq * dq_ddy * hf;
                        slot[2] += dq * 2.0 * (-e1 * e1 / l1 + e2 * l2 * e1 / (l1 * l3)) * s;
                        slot[3] += dq * (-2.0 * e1 * e2 / l3) * s;
                        slot[4] += dq * (-2.0 * e2 * e2 / l3) * s;
                    }
                }
            }
            local
        });
        let mut acc = vec![[0f64; 9]; splats.len()];
        for (t, local) in partials.iter().enumerate() {
            for (&i, part) in bins.tile(t).iter().zip(local) {
                let dst = &mut acc[i as usize];
                for k in 0..9 {
                    dst[k] += part[k];
                }
            }
        }
        Ok(acc
            .iter()
            .map(|a| SplatGrad::from_array(&a.map(|v| v as f32)))
            .collect())
    }
}

/// Contribution `w · c · g` of a single splat over the box of pixels it can
/// reach.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major RGB over the box.
    pub data: Vec<f32>,
}

impl Footprint {
    /// Value at canvas pixel `(x, y)`; zero outside the box.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.width || y >= self.y0 + self.height {
            return [0.0; 3];
        }
        let o = ((y - self.y0) * self.width + x - self.x0) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }
}

impl Rasterizer {
    /// Renders one splat on its own. `None` when no pixel center lies inside
    /// its support.
    pub fn footprint(&self, splat: &Splat, target: Target) -> Result<Option<Footprint>> {
        target.check()?;
        let p = prepare(std::slice::from_ref(splat), &target)?[0];
        let (x0, x1, y0, y1) = if self.cutoff.is_some() {
            let Some((x0, x1)) = pixel_span(p.cx, p.radius, target.width) else {
                return Ok(None);
            };
            let Some((y0, y1)) = pixel_span(p.cy, p.radius, target.height) else {
                return Ok(None);
            };
            (x0, x1, y0, y1)
        } else {
            (0, target.width - 1, 0, target.height - 1)
        };
        let max_quad = self.max_quad();
        let (width, height) = (x1 - x0 + 1, y1 - y0 + 1);
        let mut data = vec![0f32; width * height * 3];
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - p.cy;
            for x in x0..=x1 {
                if let Some(g) = falloff(&p, x as f64 + 0.5 - p.cx, dy, max_quad) {
                    let o = ((y - y0) * width + x - x0) * 3;
                    for c in 0..3 {
                        data[o + c] = (p.color[c] * p.weight * g) as f32;
                    }
                }
            }
        }
        Ok(Some(Footprint {
            x0,
            y0,
            width,
            height,
            data,
        }))
    }
}

/// Renders with default settings in the target's own pixel units.
pub fn render(splats: &[Splat], width: usize, height: usize) -> Result<RasterImage> {
    Rasterizer::default().render(splats, Target::new(width, height))
}

/// Backward pass with default settings in the target's own pixel units.
pub fn render_backward(
    splats: &[Splat],
    width: usize,
    height: usize,
    upstream: &RasterImage,
) -> Result<Vec<SplatGrad>> {
    Rasterizer::default().backward(splats, Target::new(width, height), upstream)
}

/// Brute-force renderer: every pixel against every splat, no tiling and no
/// cutoff. Ground truth for the tiled path.
pub fn render_reference(splats: &[Splat], target: Target) -> Result<RasterImage> {
    target.check()?;
    let mut inv = Vec::with_capacity(splats.len());
    for sp in splats {
        let l = sp.chol.map(|v| v as f64 * target.chol_scale);
        inv.push(cov_inverse_det(cholesky_to_cov(l)?)?.0);
    }
    let mut img = RasterImage::zeros(target.width, target.height);
    for y in 0..target.height {
        for x in 0..target.width {
            let mut acc = [0f64; 3];
            for (sp, m) in splats.iter().zip(&inv) {
                let dx = x as f64 + 0.5 - sp.pos[0] as f64 * target.width as f64;
                let dy = y as f64 + 0.5 - sp.pos[1] as f64 * target.height as f64;
                let q = m[0][0] * dx * dx + (m[0][1] + m[1][0]) * dx * dy + m[1][1] * dy * dy;
                let k = sp.weight as f64 * (-0.5 * q).exp();
                for c in 0..3 {
                    acc[c] += sp.color[c] as f64 * k;
                }
            }
            img.set_pixel(x, y, acc.map(|v| v as f32));
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_splat(px: f32, py: f32, w: usize, h: usize) -> Splat {
        Splat {
            pos: [px / w as f32, py / h as f32],
            chol: [1.0, 0.0, 1.0],
            color: [1.0, 0.0, 0.0],
            weight: 1.0,
        }
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Splat> {
        (0..n)
            .map(|_| Splat {
                pos: [rng.gen_range(-0.1..1.1), rng.gen_range(-0.1..1.1)],
                chol: [
                    rng.gen_range(0.8..4.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.8..4.0),
                ],
                color: [
                    rng.gen_range(-0.5..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ],
                weight: rng.gen_range(0.2..1.5),
            })
            .collect()
    }

    #[test]
    fn empty_scene_renders_black() {
        let img = render(&[], 4, 4).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_sized_target_is_rejected() {
        assert!(render(&[], 0, 4).is_err());
    }

    #[test]
    fn single_splat_center_and_neighbor() {
        let s = unit_splat(1.5, 1.5, 3, 3);
        for r in [Rasterizer::default(), Rasterizer::exact()] {
            let img = r.render(&[s], Target::new(3, 3)).unwrap();
            assert_eq!(img.pixel(1, 1), [1.0, 0.0, 0.0]);
            let n = img.pixel(1, 0);
            assert!((n[0] - (-0.5f32).exp()).abs() < 1e-7);
            assert!((n[0] - 0.6065).abs() < 1e-4);
            assert_eq!(n[1], 0.0);
        }
        let reference = render_reference(&[s], Target::new(3, 3)).unwrap();
        assert_eq!(reference.pixel(1, 1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_covariance_is_an_error() {
        let mut s = unit_splat(1.5, 1.5, 3, 3);
        s.chol = [1e-4, 0.0, 1e-4];
        assert!(matches!(render(&[s], 3, 3), Err(Error::DegenerateCovariance { .. })));
    }

    #[test]
    fn cutoff_respects_support_radius() {
        let s = unit_splat(8.0, 8.0, 64, 64);
        let img = render(&[s], 64, 64).unwrap();
        // 3σ box around the center, nothing outside
        for y in 0..64 {
            for x in 0..64 {
                let far = (x as f32 + 0.5 - 8.0).abs() > 3.0 || (y as f32 + 0.5 - 8.0).abs() > 3.0;
                if far {
                    assert_eq!(img.pixel(x, y)[0], 0.0);
                }
            }
        }
    }

    #[test]
    fn footprints_sum_to_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = random_scene(&mut rng, 40);
        let target = Target::scaled(23, 17, 34);
        for r in [Rasterizer::default(), Rasterizer::exact()] {
            let img = r.render(&scene, target).unwrap();
            let mut sum = RasterImage::zeros(23, 17);
            for sp in &scene {
                let Some(f) = r.footprint(sp, target).unwrap() else {
                    continue;
                };
                for y in 0..17 {
                    for x in 0..23 {
                        let v = f.get(x, y);
                        let o = (y * 23 + x) * 3;
                        for c in 0..3 {
                            sum.data[o + c] += v[c];
                        }
                    }
                }
            }
            assert!(sum.max_abs_diff(&img) < 1e-5);
        }
        let outside = Splat {
            pos: [-1.0, -1.0],
            ..scene[0]
        };
        assert!(Rasterizer::default().footprint(&outside, target).unwrap().is_none());
    }

    #[test]
    fn superposition_of_single_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, 100);
        let r = Rasterizer::exact();
        let t = Target::new(32, 32);
        let full = r.render(&scene, t).unwrap();
        let mut sum = vec![0f64; full.data.len()];
        for s in &scene {
            let one = r.render(std::slice::from_ref(s), t).unwrap();
            for (a, b) in sum.iter_mut().zip(&one.data) {
                *a += *b as f64;
            }
        }
        for (a, b) in full.data.iter().zip(&sum) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn permutation_is_bitwise_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = random_scene(&mut rng, 60);
        let mut shuffled = scene.clone();
        shuffled.reverse();
        shuffled.swap(3, 40);
        let t = Target::new(48, 40);
        let a = Rasterizer::default().render(&scene, t).unwrap();
        let b = Rasterizer::default().render(&shuffled, t).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
        let a2 = Rasterizer::default().render(&scene, t).unwrap();
        assert_eq!(a.data, a2.data);
    }

    #[test]
    fn sequential_and_default_exec_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(&mut rng, 80);
        let t = Target::new(50, 37);
        let up = RasterImage::from_fn(50, 37, |x, y| [x as f32 * 0.01, y as f32 * 0.02, 0.3]);
        let seq = Rasterizer::default().with_exec(Exec::Sequential);
        let def = Rasterizer::default();
        assert_eq!(seq.render(&scene, t).unwrap(), def.render(&scene, t).unwrap());
        assert_eq!(
            seq.backward(&scene, t, &up).unwrap(),
            def.backward(&scene, t, &up).unwrap()
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut rng, 10);
        let g = render_backward(&scene, 16, 16, &RasterImage::zeros(16, 16)).unwrap();
        assert_eq!(g.len(), 10);
        assert!(g.iter().all(|g| *g == SplatGrad::default()));
    }

    #[test]
    fn black_splat_has_zero_weight_gradient() {
        let mut s = unit_splat(8.0, 8.0, 16, 16);
        s.color = [0.0; 3];
        let up = RasterImage::filled(16, 16, [1.0, -2.0, 0.5]);
        let g = render_backward(&[s], 16, 16, &up).unwrap();
        assert_eq!(g[0].weight, 0.0);
    }

    #[test]
    fn color_gradient_matches_closed_form() {
        let s = Splat {
            pos: [0.4, 0.55],
            chol: [2.0, 0.5, 1.5],
            color: [0.3, 0.2, 0.1],
            weight: 0.7,
        };
        let up = RasterImage::from_fn(16, 16, |x, y| [1.0, (x as f32) * 0.1, -(y as f32) * 0.05]);
        let g = Rasterizer::exact().backward(&[s], Target::new(16, 16), &up).unwrap();
        let basis = Rasterizer::exact()
            .render(
                &[Splat {
                    color: [1.0, 1.0, 1.0],
                    weight: 1.0,
                    ..s
                }],
                Target::new(16, 16),
            )
            .unwrap();
        let mut expect = [0f64; 3];
        for i in 0..16 * 16 {
            for c in 0..3 {
                expect[c] += up.data[i * 3 + c] as f64 * 0.7 * basis.data[i * 3] as f64;
            }
        }
        for c in 0..3 {
            assert!((g[0].color[c] as f64 - expect[c]).abs() < 1e-5 * (1.0 + expect[c].abs()));
        }
    }

    #[test]
    fn shape_mismatch_in_backward() {
        let up = RasterImage::zeros(8, 8);
        assert!(matches!(
            render_backward(&[unit_splat(1.0, 1.0, 4, 4)], 4, 4, &up),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn non_multiple_of_tile_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = random_scene(&mut rng, 30);
        for (w, h) in [(1, 1), (17, 5), (33, 31)] {
            let t = Target::new(w, h);
            let a = Rasterizer::exact().render(&scene, t).unwrap();
            let b = render_reference(&scene, t).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }
}
