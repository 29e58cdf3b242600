//! Splat and layered-set types, covariance helpers and full-precision
//! checkpoints.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::wire::{ByteReader, ByteWriter};

/// Determinant below which a covariance is treated as singular.
pub const DET_FLOOR: f64 = 1e-12;

/// Lower bound on the Cholesky diagonal, as a fraction of the top-level
/// image height.
pub const CHOL_FLOOR_REL: f64 = 1e-4;

/// Absolute lower bound on the Cholesky diagonal in pixels. Keeps the
/// determinant above [`DET_FLOOR`] on very small canvases.
pub const CHOL_FLOOR_MIN_PX: f64 = 1e-2;

/// Training keeps positions inside this box.
pub const POS_RANGE: (f32, f32) = (-0.5, 1.5);

/// Cholesky floor in top-level pixels for a canvas of the given height.
pub fn chol_floor_px(top_height: usize) -> f32 {
    (CHOL_FLOOR_REL * top_height as f64).max(CHOL_FLOOR_MIN_PX) as f32
}

/// One 2D Gaussian primitive.
///
/// `pos` is in normalized image coordinates (`[0,1]²` covers the canvas),
/// `chol` holds the lower-triangular factor `(l1, l2, l3)` of the covariance
/// in top-level pixel units, `color` is linear RGB and `weight` scales the
/// whole contribution.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Splat {
    pub pos: [f32; 2],
    pub chol: [f32; 3],
    pub color: [f32; 3],
    pub weight: f32,
}

impl Splat {
    /// Number of scalar parameters per splat.
    pub const PARAMS: usize = 9;

    pub fn to_array(&self) -> [f32; 9] {
        let [x, y] = self.pos;
        let [a, b, c] = self.chol;
        let [r, g, bl] = self.color;
        [x, y, a, b, c, r, g, bl, self.weight]
    }

    pub fn from_array(p: &[f32]) -> Self {
        Self {
            pos: [p[0], p[1]],
            chol: [p[2], p[3], p[4]],
            color: [p[5], p[6], p[7]],
            weight: p[8],
        }
    }

    /// `weight * color`, the quantity stored by the quantizer.
    pub fn weighted_color(&self) -> [f32; 3] {
        self.color.map(|c| c * self.weight)
    }

    /// Enforces the training-time parameter box.
    pub fn clamp(&mut self, chol_floor: f32) {
        self.chol[0] = self.chol[0].max(chol_floor);
        self.chol[2] = self.chol[2].max(chol_floor);
        for p in &mut self.pos {
            *p = p.clamp(POS_RANGE.0, POS_RANGE.1);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Covariance `L Lᵀ` for `L = [[l1, 0], [l2, l3]]`.
pub fn cholesky_to_cov(chol: [f64; 3]) -> Result<[[f64; 2]; 2]> {
    let [l1, l2, l3] = chol;
    if !(l1 > 0.0 && l3 > 0.0) {
        return Err(Error::RejectedInput(format!(
            "cholesky diagonal must be positive, got ({l1}, {l3})"
        )));
    }
    let off = l1 * l2;
    Ok([[l1 * l1, off], [off, l2 * l2 + l3 * l3]])
}

/// Inverse and determinant of a symmetric 2×2 matrix.
pub fn cov_inverse_det(cov: [[f64; 2]; 2]) -> Result<([[f64; 2]; 2], f64)> {
    let [[a, b], [_, c]] = cov;
    let det = a * c - b * b;
    if !(det > DET_FLOOR) {
        return Err(Error::DegenerateCovariance { det });
    }
    let inv = 1.0 / det;
    Ok(([[c * inv, -b * inv], [-b * inv, a * inv]], det))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    I,
    P,
}

impl FrameKind {
    pub fn code(self) -> u8 {
        match self {
            FrameKind::I => 0,
            FrameKind::P => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(FrameKind::I),
            1 => Ok(FrameKind::P),
            c => Err(Error::Format(format!("unknown frame kind {c}"))),
        }
    }
}

/// A splat array plus, for P-frames, the index each splat was copied from
/// in the previous frame's layer (`None` for freshly injected splats).
///
/// Inherited splats always precede injected ones and keep increasing
/// origins: pruning only removes entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layer {
    pub splats: Vec<Splat>,
    pub origin: Vec<Option<u32>>,
}

impl Layer {
    pub fn fresh(splats: Vec<Splat>) -> Self {
        let origin = vec![None; splats.len()];
        Self { splats, origin }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Keeps entries whose mask bit is set.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.splats.len());
        let mut i = 0;
        self.splats.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.origin.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    /// Number of leading inherited splats.
    pub fn inherited_count(&self) -> usize {
        self.origin.iter().take_while(|o| o.is_some()).count()
    }
}

/// Base layer followed by enhancement layers for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFrame {
    pub kind: FrameKind,
    pub layers: Vec<Layer>,
    pub budgets: Vec<usize>,
}

impl LayeredFrame {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn top_level(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Layer::len).collect()
    }

    pub fn total_splats(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Splats of layers `0..=level`, base first.
    pub fn level_view(&self, level: usize) -> Result<Vec<Splat>> {
        if level >= self.layers.len() {
            return Err(Error::Index {
                index: level,
                len: self.layers.len(),
            });
        }
        let n = self.layers[..=level].iter().map(Layer::len).sum();
        let mut out = Vec::with_capacity(n);
        for layer in &self.layers[..=level] {
            out.extend_from_slice(&layer.splats);
        }
        Ok(out)
    }

    /// Offset of layer `layer` inside a level view.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.layers[..layer].iter().map(Layer::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl Resolution {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalabilityMode {
    #[default]
    Quality,
    Resolution,
}

impl ScalabilityMode {
    pub fn code(self) -> u8 {
        match self {
            ScalabilityMode::Quality => 0,
            ScalabilityMode::Resolution => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ScalabilityMode::Quality),
            1 => Ok(ScalabilityMode::Resolution),
            c => Err(Error::Format(format!("unknown scalability mode {c}"))),
        }
    }
}

impl std::str::FromStr for ScalabilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quality" => Ok(ScalabilityMode::Quality),
            "resolution" => Ok(ScalabilityMode::Resolution),
            other => Err(Error::Config(format!("unknown scalability mode `{other}`"))),
        }
    }
}

/// A sequence of layered frames sharing one layer structure.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVideo {
    pub frames: Vec<LayeredFrame>,
    pub width: usize,
    pub height: usize,
    pub level_resolutions: Vec<Resolution>,
    pub mode: ScalabilityMode,
}

impl GaussianVideo {
    pub fn num_layers(&self) -> usize {
        self.level_resolutions.len()
    }

    /// Canvas size a given level renders at.
    pub fn render_resolution(&self, level: usize) -> Resolution {
        match self.mode {
            ScalabilityMode::Quality => Resolution::new(self.width, self.height),
            ScalabilityMode::Resolution => self.level_resolutions[level],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.num_layers();
        if layers == 0 {
            return Err(Error::Config("video has no levels".into()));
        }
        let top = Resolution::new(self.width, self.height);
        if self.level_resolutions[layers - 1] != top {
            return Err(Error::Config("top level must match the canvas size".into()));
        }
        match self.mode {
            ScalabilityMode::Quality => {
                if self.level_resolutions.iter().any(|r| *r != top) {
                    return Err(Error::Config(
                        "quality mode requires identical level resolutions".into(),
                    ));
                }
            }
            ScalabilityMode::Resolution => {
                for w in self.level_resolutions.windows(2) {
                    if w[1].width < w[0].width || w[1].height < w[0].height {
                        return Err(Error::Config("level resolutions must be nondecreasing".into()));
                    }
                }
            }
        }
        for frame in &self.frames {
            if frame.num_layers() != layers {
                return Err(Error::Config("frames disagree on layer count".into()));
            }
            if frame.budgets != self.frames[0].budgets {
                return Err(Error::Config("frames disagree on layer budgets".into()));
            }
        }
        Ok(())
    }
}

/// Pruning cadence: one event every `interval` iterations during the first
/// `span` iterations of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GspSchedule {
    pub interval: usize,
    pub span: usize,
}

impl GspSchedule {
    pub fn events(&self) -> usize {
        self.span.div_ceil(self.interval)
    }
}

/// Codec hyperparameters shared by training and quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Layer count (base plus enhancement layers).
    pub num_layers: usize,
    /// Total splat budget `N` across layers.
    pub total_budget: usize,
    /// Fraction of `N` assigned to each layer.
    pub budget_split: Vec<f64>,
    /// Per-layer fraction of the budget injected at initialization and
    /// pruned again during the first iterations.
    pub aug_prune_ratios: Vec<f64>,
    pub gsp_iframe: GspSchedule,
    pub gsp_pframe: GspSchedule,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub conv_window: usize,
    pub conv_delta: f64,
    pub max_iters_iframe: usize,
    pub max_iters_pframe: usize,
    /// Mean absolute frame difference above which a frame becomes an I-frame.
    pub dks_threshold: f64,
    pub scalability_mode: ScalabilityMode,
    /// Initial isotropic standard deviation in top-level pixels.
    pub init_sigma_px: f64,
    pub optimizer: OptimizerKind,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            total_budget: 12_000,
            budget_split: vec![1.0 / 3.0; 3],
            aug_prune_ratios: vec![0.2, 0.4, 0.4],
            gsp_iframe: GspSchedule {
                interval: 100,
                span: 4_000,
            },
            gsp_pframe: GspSchedule {
                interval: 100,
                span: 1_000,
            },
            lr0: 1e-3,
            lr_halving_period: 20_000,
            conv_window: 100,
            conv_delta: 1e-7,
            max_iters_iframe: 50_000,
            max_iters_pframe: 20_000,
            dks_threshold: 0.08,
            scalability_mode: ScalabilityMode::Quality,
            init_sigma_px: 2.0,
            optimizer: OptimizerKind::Adan,
        }
    }
}

impl CodecConfig {
    /// Equal split of `total_budget` over `num_layers`, keeping the default
    /// 0.2 / 0.4 removal ratios (base / enhancement).
    pub fn with_layers(num_layers: usize, total_budget: usize) -> Self {
        let mut ratios = vec![0.4; num_layers];
        if let Some(base) = ratios.first_mut() {
            *base = 0.2;
        }
        Self {
            num_layers,
            total_budget,
            budget_split: vec![1.0 / num_layers as f64; num_layers],
            aug_prune_ratios: ratios,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be positive");
        }
        if self.budget_split.len() != self.num_layers {
            return bad("budget_split length must equal num_layers");
        }
        if self.aug_prune_ratios.len() != self.num_layers {
            return bad("aug_prune_ratios length must equal num_layers");
        }
        let sum: f64 = self.budget_split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("budget_split sums to {sum}, not 1")));
        }
        if self.budget_split.iter().any(|&s| !(s > 0.0)) {
            return bad("budget_split entries must be positive");
        }
        if self.aug_prune_ratios.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return bad("aug_prune_ratios must be nonnegative");
        }
        if self.layer_budgets().contains(&0) {
            return bad("every layer needs a positive splat budget");
        }
        for gsp in [self.gsp_iframe, self.gsp_pframe] {
            if gsp.interval == 0 || gsp.span == 0 {
                return bad("GSP interval and span must be positive");
            }
            if gsp.interval > gsp.span {
                return bad("GSP interval must not exceed its span");
            }
        }
        if !(self.lr0 > 0.0) || self.lr_halving_period == 0 {
            return bad("learning rate and halving period must be positive");
        }
        if self.conv_window == 0 || !(self.conv_delta >= 0.0) {
            return bad("convergence window must be positive");
        }
        if self.max_iters_iframe == 0 || self.max_iters_pframe == 0 {
            return bad("iteration caps must be positive");
        }
        if !(self.init_sigma_px > 0.0) {
            return bad("init_sigma_px must be positive");
        }
        Ok(())
    }

    /// Per-layer budgets `N^ℓ`; rounding residue goes to the top layer.
    pub fn layer_budgets(&self) -> Vec<usize> {
        let n = self.num_layers;
        let mut out = Vec::with_capacity(n);
        let mut used = 0usize;
        for (i, s) in self.budget_split.iter().enumerate() {
            if i + 1 == n {
                out.push(self.total_budget.saturating_sub(used));
            } else {
                let b = (self.total_budget as f64 * s).round() as usize;
                used += b;
                out.push(b);
            }
        }
        out
    }

    /// Per-layer injection / pruning counts `N_aug = N_prune`.
    pub fn aug_counts(&self) -> Vec<usize> {
        self.layer_budgets()
            .iter()
            .zip(&self.aug_prune_ratios)
            .map(|(&b, &r)| (b as f64 * r).round() as usize)
            .collect()
    }

    pub fn gsp(&self, kind: FrameKind) -> GspSchedule {
        match kind {
            FrameKind::I => self.gsp_iframe,
            FrameKind::P => self.gsp_pframe,
        }
    }

    pub fn max_iters(&self, kind: FrameKind) -> usize {
        match kind {
            FrameKind::I => self.max_iters_iframe,
            FrameKind::P => self.max_iters_pframe,
        }
    }

    /// Single-layer variant with the given budget, used by the monolithic
    /// baseline. Keeps the base-layer removal ratio.
    pub fn single_layer(&self, budget: usize) -> Self {
        Self {
            num_layers: 1,
            total_budget: budget,
            budget_split: vec![1.0],
            aug_prune_ratios: vec![self.aug_prune_ratios[0]],
            ..self.clone()
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PGSV";
const CHECKPOINT_VERSION: u16 = 1;
const NO_ORIGIN: u32 = u32::MAX;

/// Writes a full-precision checkpoint.
///
/// Layout (little-endian): magic `PGSV`, version `u16`, config block
/// (`u32` length + JSON), canvas width/height `u32`, mode `u8`, level count
/// `u32` with `(u32 width, u32 height)` per level, frame count `u32`, then
/// per frame: kind `u8`, layer count `u32`, budgets `u32` each, and per
/// layer a `u32` count, `count × 9` `f32` parameters
/// (pos[2], chol[3], color[3], weight) and `count` `u32` origins
/// (`0xFFFFFFFF` for none).
pub fn write_checkpoint<W: Write>(video: &GaussianVideo, config: &CodecConfig, mut out: W) -> Result<()> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    let json = serde_json::to_vec(config).map_err(|e| Error::Format(e.to_string()))?;
    w.u32(json.len() as u32);
    w.bytes(&json);
    w.u32(video.width as u32);
    w.u32(video.height as u32);
    w.u8(video.mode.code());
    w.u32(video.level_resolutions.len() as u32);
    for r in &video.level_resolutions {
        w.u32(r.width as u32);
        w.u32(r.height as u32);
    }
    w.u32(video.frames.len() as u32);
    for frame in &video.frames {
        w.u8(frame.kind.code());
        w.u32(frame.layers.len() as u32);
        for &b in &frame.budgets {
            w.u32(b as u32);
        }
        for layer in &frame.layers {
            w.u32(layer.len() as u32);
            for s in &layer.splats {
                for v in s.to_array() {
                    w.f32(v);
                }
            }
            for o in &layer.origin {
                w.u32(o.unwrap_or(NO_ORIGIN));
            }
        }
    }
    out.write_all(&w.buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(GaussianVideo, CodecConfig)> {
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut r = ByteReader::new(&data);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let config: CodecConfig = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let mode = ScalabilityMode::from_code(r.u8()?)?;
    let levels = r.u32()? as usize;
    let mut level_resolutions = Vec::with_capacity(levels.min(1024));
    for _ in 0..levels {
        let w = r.u32()? as usize;
        let h = r.u32()? as usize;
        level_resolutions.push(Resolution::new(w, h));
    }
    let nframes = r.u32()? as usize;
    let mut frames = Vec::with_capacity(nframes.min(1 << 16));
    for _ in 0..nframes {
        let kind = FrameKind::from_code(r.u8()?)?;
        let nlayers = r.u32()? as usize;
        let mut budgets = Vec::with_capacity(nlayers.min(256));
        for _ in 0..nlayers {
            budgets.push(r.u32()? as usize);
        }
        let mut layers = Vec::with_capacity(nlayers.min(256));
        for _ in 0..nlayers {
            let count = r.u32()? as usize;
            let raw = r.take(count * Splat::PARAMS * 4)?;
            let splats = raw
                .chunks_exact(Splat::PARAMS * 4)
                .map(|c| {
                    let mut p = [0f32; 9];
                    for (v, b) in p.iter_mut().zip(c.chunks_exact(4)) {
                        *v = f32::from_le_bytes(b.try_into().unwrap());
                    }
                    Splat::from_array(&p)
                })
                .collect();
            let mut origin = Vec::with_capacity(count);
            for _ in 0..count {
                let o = r.u32()?;
                origin.push((o != NO_ORIGIN).then_some(o));
            }
            layers.push(Layer { splats, origin });
        }
        frames.push(LayeredFrame { kind, layers, budgets });
    }
    let video = GaussianVideo {
        frames,
        width,
        height,
        level_resolutions,
        mode,
    };
    video.validate()?;
    Ok((video, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> bool {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn cov_examples() {
        assert!(close(
            cholesky_to_cov([1.0, 0.0, 1.0]).unwrap(),
            [[1.0, 0.0], [0.0, 1.0]]
        ));
        assert!(close(
            cholesky_to_cov([2.0, 0.0, 1.0]).unwrap(),
            [[4.0, 0.0], [0.0, 1.0]]
        ));
        assert!(close(
            cholesky_to_cov([1.0, 1.0, 1.0]).unwrap(),
            [[1.0, 1.0], [1.0, 2.0]]
        ));
    }

    #[test]
    fn cov_rejects_nonpositive_diagonal() {
        assert!(matches!(cholesky_to_cov([0.0, 1.0, 1.0]), Err(Error::RejectedInput(_))));
        assert!(cholesky_to_cov([1.0, 1.0, -2.0]).is_err());
    }

    #[test]
    fn inverse_examples() {
        let (inv, det) = cov_inverse_det([[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(close(inv, [[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(det, 1.0);
        let (inv, det) = cov_inverse_det([[4.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(close(inv, [[0.25, 0.0], [0.0, 1.0]]));
        assert_eq!(det, 4.0);
        let (inv, det) = cov_inverse_det([[1.0, 1.0], [1.0, 2.0]]).unwrap();
        assert!(close(inv, [[2.0, -1.0], [-1.0, 1.0]]));
        assert_eq!(det, 1.0);
    }

    #[test]
    fn inverse_rejects_singular() {
        assert!(matches!(
            cov_inverse_det([[1.0, 1.0], [1.0, 1.0]]),
            Err(Error::DegenerateCovariance { .. })
        ));
        assert!(cov_inverse_det([[1e-7, 0.0], [0.0, 1e-7]]).is_err());
    }

    proptest! {
        #[test]
        fn cov_is_spd(l1 in 1e-4f64..50.0, l2 in -50.0f64..50.0, l3 in 1e-4f64..50.0) {
            let c = cholesky_to_cov([l1, l2, l3]).unwrap();
            prop_assert_eq!(c[0][1], c[1][0]);
            let tr = c[0][0] + c[1][1];
            let det = c[0][0] * c[1][1] - c[0][1] * c[0][1];
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            let lmin = tr / 2.0 - disc;
            // det = (l1 l3)^2 exactly in exact arithmetic
            prop_assert!(lmin > 0.0 || (l1 * l3).powi(2) / tr < 1e-12 * tr);
        }

        #[test]
        fn inverse_is_inverse(l1 in 0.05f64..20.0, l2 in -20.0f64..20.0, l3 in 0.05f64..20.0) {
            let c = cholesky_to_cov([l1, l2, l3]).unwrap();
            let (inv, _) = cov_inverse_det(c).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let v: f64 = (0..2).map(|k| c[i][k] * inv[k][j]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    let scale = 1.0 + c[i][0].abs().max(c[i][1].abs()) * inv[0][j].abs().max(inv[1][j].abs());
                    prop_assert!((v - expect).abs() < 1e-9 * scale);
                }
            }
        }
    }

    fn frame_with_counts(counts: &[usize]) -> LayeredFrame {
        let mut k = 0.0f32;
        let layers = counts
            .iter()
            .map(|&c| {
                Layer::fresh(
                    (0..c)
                        .map(|_| {
                            k += 1.0;
                            Splat {
                                pos: [k / 100.0, 0.5],
                                chol: [1.0, 0.0, 1.0],
                                color: [k, 0.0, 0.0],
                                weight: 1.0,
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        LayeredFrame {
            kind: FrameKind::I,
            layers,
            budgets: counts.to_vec(),
        }
    }

    #[test]
    fn level_view_counts() {
        let f = frame_with_counts(&[4, 4, 4]);
        assert_eq!(f.level_view(0).unwrap().len(), 4);
        assert_eq!(f.level_view(1).unwrap().len(), 8);
        assert_eq!(f.level_view(2).unwrap().len(), 12);
        assert!(matches!(f.level_view(3), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn level_views_are_nested() {
        let f = frame_with_counts(&[3, 5, 2]);
        for l in 0..2 {
            let lo = f.level_view(l).unwrap();
            let hi = f.level_view(l + 1).unwrap();
            assert_eq!(&hi[..lo.len()], &lo[..]);
        }
    }

    #[test]
    fn budgets_and_aug_counts() {
        let mut c = CodecConfig {
            total_budget: 12_000,
            ..CodecConfig::default()
        };
        assert_eq!(c.layer_budgets(), vec![4000, 4000, 4000]);
        assert_eq!(c.aug_counts(), vec![800, 1600, 1600]);
        c.total_budget = 1000;
        assert_eq!(c.layer_budgets().iter().sum::<usize>(), 1000);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let c = CodecConfig {
            budget_split: vec![0.5, 0.3, 0.3],
            ..CodecConfig::default()
        };
        assert!(c.validate().is_err());
        let c = CodecConfig {
            gsp_iframe: GspSchedule {
                interval: 200,
                span: 100,
            },
            ..CodecConfig::default()
        };
        assert!(c.validate().is_err());
        let c = CodecConfig {
            total_budget: 2,
            ..CodecConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut f0 = frame_with_counts(&[2, 3, 1]);
        f0.layers[1].splats[0].color = [f32::MIN_POSITIVE, -0.0, 1e-30];
        let mut f1 = f0.clone();
        f1.kind = FrameKind::P;
        f1.layers[0].origin = vec![Some(0), None];
        let video = GaussianVideo {
            frames: vec![f0, f1],
            width: 32,
            height: 16,
            level_resolutions: vec![Resolution::new(32, 16); 3],
            mode: ScalabilityMode::Quality,
        };
        let cfg = CodecConfig::with_layers(3, 6);
        let mut bytes = Vec::new();
        write_checkpoint(&video, &cfg, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"PGSV");
        let (back, cfg2) = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.frames.len(), 2);
        for (a, b) in video.frames.iter().zip(&back.frames) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.budgets, b.budgets);
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.origin, lb.origin);
                for (sa, sb) in la.splats.iter().zip(&lb.splats) {
                    let bits = |s: &Splat| s.to_array().map(f32::to_bits);
                    assert_eq!(bits(sa), bits(sb));
                }
            }
        }
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
