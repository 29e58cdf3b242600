//! Quantization of layered splats.
//!
//! Cholesky entries use per-channel asymmetric scalar quantization, positions
//! use reduced-precision floats (half for absolute values, a 12-bit float for
//! P-frame deltas) and the weighted color `w · c` is coded with residual
//! vector quantization. P-frame splats that were copied from the previous
//! frame are coded as deltas against that frame's *dequantized* splats, so
//! encoder and decoder track the same reference.

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::optim::{OptimizerKind, OptimizerState};
use crate::raster::{Footprint, RasterImage, Rasterizer, Target};
use crate::splat::{chol_floor_px, FrameKind, GaussianVideo, Layer, LayeredFrame, Resolution, ScalabilityMode, Splat};
use crate::train::{joint_loss, GroundTruthPyramid};

/// Smallest admissible quantization step.
pub const GAMMA_FLOOR: f32 = 1e-8;

/// Largest finite 12-bit float magnitude.
pub const F12_MAX: f32 = 65024.0;

/// Quantizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantParams {
    /// Cholesky bit depth for absolute (I-frame and newly injected) splats.
    pub chol_bits_abs: u8,
    /// Cholesky bit depth for P-frame deltas.
    pub chol_bits_delta: u8,
    pub vq_stages: usize,
    /// Codebook size is `2^codebook_bits`.
    pub codebook_bits: u8,
    pub kmeans_iters: usize,
    /// Weight of the commitment term during fine-tuning.
    pub commitment: f64,
    /// Fine-tuning iterations per frame; 0 disables fine-tuning.
    pub finetune_iters: usize,
    pub finetune_lr: f64,
    /// Iterations between quantized-render evaluations while fine-tuning.
    pub finetune_eval_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for QuantParams {
    fn default() -> Self {
        Self {
            chol_bits_abs: 6,
            chol_bits_delta: 5,
            vq_stages: 2,
            codebook_bits: 6,
            kmeans_iters: 50,
            commitment: 1e-3,
            finetune_iters: 2000,
            finetune_lr: 1e-4,
            finetune_eval_every: 100,
            optimizer: OptimizerKind::Adan,
        }
    }
}

impl QuantParams {
    pub fn codebook_size(&self) -> usize {
        1 << self.codebook_bits
    }

    pub fn validate(&self) -> Result<()> {
        for b in [self.chol_bits_abs, self.chol_bits_delta] {
            if !(2..=16).contains(&b) {
                return Err(Error::Config(format!("bit depth {b} outside [2, 16]")));
            }
        }
        if !(1..=16).contains(&self.codebook_bits) {
            return Err(Error::Config("codebook_bits must be in [1, 16]".into()));
        }
        if self.vq_stages == 0 || self.vq_stages > 255 {
            return Err(Error::Config("vq_stages must be in [1, 255]".into()));
        }
        if !(self.commitment >= 0.0) || !(self.finetune_lr > 0.0) || self.finetune_eval_every == 0 {
            return Err(Error::Config("invalid fine-tuning settings".into()));
        }
        Ok(())
    }
}

/// Step `gamma` and offset `beta` of one quantized channel.
/// `dequant(code) = code · gamma + beta` with codes in [`AsymParams::range`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymParams {
    pub gamma: f32,
    pub beta: f32,
    pub bits: u8,
    pub signed: bool,
}

impl AsymParams {
    /// `[0, 2^b − 1]` unsigned, `[−2^(b−1), 2^(b−1) − 1]` signed.
    pub fn code_range(bits: u8, signed: bool) -> (i32, i32) {
        let span = (1i32 << bits) - 1;
        if signed {
            let lo = -(1i32 << (bits - 1));
            (lo, lo + span)
        } else {
            (0, span)
        }
    }

    pub fn range(&self) -> (i32, i32) {
        Self::code_range(self.bits, self.signed)
    }

    /// Step covering `[min, max]` with `2^b − 1` intervals, the lowest code
    /// landing on `min`.
    pub fn fit(values: &[f32], bits: u8, signed: bool) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Config(format!("bit depth {bits} outside [2, 16]")));
        }
        if values.is_empty() {
            return Err(Error::Empty("nothing to quantize".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("non-finite value".into()));
        }
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let (lmin, lmax) = Self::code_range(bits, signed);
        let gamma = (((hi - lo) / (lmax - lmin) as f64) as f32).max(GAMMA_FLOOR);
        let beta = (lo - lmin as f64 * gamma as f64) as f32;
        Ok(Self {
            gamma,
            beta,
            bits,
            signed,
        })
    }

    /// Unrounded code position `(x − β) / γ`.
    pub fn scaled(&self, x: f32) -> f64 {
        (x as f64 - self.beta as f64) / self.gamma as f64
    }

    pub fn quantize(&self, x: f32) -> i32 {
        let (lo, hi) = self.range();
        let u = self.scaled(x).round();
        if u.is_nan() {
            return lo;
        }
        u.clamp(lo as f64, hi as f64) as i32
    }

    pub fn dequantize(&self, code: i32) -> f32 {
        (code as f64 * self.gamma as f64 + self.beta as f64) as f32
    }
}

/// Fits [`AsymParams`] to `values` and returns their codes.
pub fn asym_quantize(values: &[f32], bits: u8, signed: bool) -> Result<(Vec<i32>, AsymParams)> {
    let p = AsymParams::fit(values, bits, signed)?;
    Ok((values.iter().map(|&v| p.quantize(v)).collect(), p))
}

/// IEEE half bits of `x`; magnitudes beyond the half range clamp to the
/// largest finite value and report overflow.
pub fn f16_encode(x: f32) -> (u16, bool) {
    let h = f16::from_f32(x);
    if h.is_infinite() {
        let max = f16::MAX.to_bits();
        return (if x < 0.0 { max | 0x8000 } else { max }, true);
    }
    (h.to_bits(), false)
}

pub fn f16_decode(bits: u16) -> f32 {
    f16::from_bits(bits).to_f32()
}

/// 12-bit float (1 sign, 5 exponent, 6 mantissa bits): the half pattern with
/// its 4 low mantissa bits rounded off to nearest-even. Magnitudes that round
/// past the largest finite value clamp to [`F12_MAX`].
pub fn f12_encode(x: f32) -> (u16, bool) {
    let (h, mut overflow) = f16_encode(x);
    let sign = (h & 0x8000) >> 4;
    let mag = h & 0x7FFF;
    let mut m = (mag + 7 + ((mag >> 4) & 1)) >> 4;
    if m >= 0x7C0 {
        m = 0x7BF;
        overflow = true;
    }
    (sign | m, overflow)
}

pub fn f12_decode(code: u16) -> f32 {
    f16_decode((code & 0x0FFF) << 4)
}

/// Residual VQ codebooks, `stages × size` RGB codewords.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub stages: Vec<Vec<[f32; 3]>>,
}

impl Codebooks {
    pub fn zeros(stages: usize, size: usize) -> Self {
        Self {
            stages: vec![vec![[0.0; 3]; size]; stages],
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn size(&self) -> usize {
        self.stages.first().map_or(0, Vec::len)
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Index of the nearest codeword, lowest index among ties.
fn nearest(book: &[[f32; 3]], v: [f32; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, c) in book.iter().enumerate() {
        let d = dist2(*c, v);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Weighted k-means++ seeding followed by Lloyd iterations. Each point
/// pulls on its center in proportion to its weight. Returns the centers and
/// whether some had to be duplicated because the data has fewer than `k`
/// distinct points.
pub fn kmeans(
    data: &[[f32; 3]],
    weights: &[f64],
    k: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> (Vec<[f32; 3]>, bool) {
    assert_eq!(data.len(), weights.len(), "one weight per point");
    if data.is_empty() {
        return (vec![[0.0; 3]; k], true);
    }
    let mut centers = vec![data[rng.gen_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|&v| dist2(v, centers[0]) as f64).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().zip(weights).map(|(d, w)| d * w).sum();
        if !(total > 0.0) {
            break;
        }
        let r = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = data.len() - 1;
        for (i, (&d, &w)) in d2.iter().zip(weights).enumerate() {
            acc += d * w;
            if acc > r {
                pick = i;
                break;
            }
        }
        let c = data[pick];
        centers.push(c);
        for (d, &v) in d2.iter_mut().zip(data) {
            *d = d.min(dist2(v, c) as f64);
        }
    }
    let padded = centers.len() < k;
    let distinct = centers.len();
    for i in distinct..k {
        centers.push(centers[i % distinct]);
    }
    let mut assign = vec![usize::MAX; data.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, &v) in assign.iter_mut().zip(data) {
            let n = nearest(&centers, v);
            if *a != n {
                *a = n;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0f64; 3]; k];
        let mut mass = vec![0f64; k];
        for ((&a, v), &w) in assign.iter().zip(data).zip(weights) {
            mass[a] += w;
            for c in 0..3 {
                sums[a][c] += w * v[c] as f64;
            }
        }
        for ((center, sum), &m) in centers.iter_mut().zip(&sums).zip(&mass) {
            if m > 0.0 {
                *center = sum.map(|s| (s / m) as f32);
            }
        }
    }
    (centers, padded)
}

/// Greedy stage-wise training: stage `k` clusters the residuals left by
/// stages `0..k`. The flag reports duplicated codewords.
pub fn rvq_train(
    colors: &[[f32; 3]],
    stages: usize,
    size: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> (Codebooks, bool) {
    rvq_train_weighted(colors, &vec![1.0; colors.len()], stages, size, max_iters, rng)
}

/// [`rvq_train`] with per-color importance weights.
pub fn rvq_train_weighted(
    colors: &[[f32; 3]],
    weights: &[f64],
    stages: usize,
    size: usize,
    max_iters: usize,
    rng: &mut impl Rng,
) -> (Codebooks, bool) {
    let mut residual = colors.to_vec();
    let mut books = Vec::with_capacity(stages);
    let mut padded = false;
    for _ in 0..stages {
        let (book, p) = kmeans(&residual, weights, size, max_iters, rng);
        padded |= p;
        for r in &mut residual {
            let c = book[nearest(&book, *r)];
            *r = [r[0] - c[0], r[1] - c[1], r[2] - c[2]];
        }
        books.push(book);
    }
    let mut books = Codebooks { stages: books };
    refine_stages(&mut books, colors, weights, max_iters);
    (books, padded)
}

/// Weighted squared error of greedy RVQ coding under `books`.
fn rvq_distortion(books: &Codebooks, colors: &[[f32; 3]], weights: &[f64], codes: &mut [u16]) -> f64 {
    let stages = books.num_stages();
    let mut total = 0.0;
    for ((c, w), out) in colors.iter().zip(weights).zip(codes.chunks_exact_mut(stages)) {
        rvq_encode_into(*c, books, out);
        let mut r = *c;
        for (book, &i) in books.stages.iter().zip(out.iter()) {
            let v = book[i as usize];
            r = [r[0] - v[0], r[1] - v[1], r[2] - v[2]];
        }
        total += w * dist2(r, [0.0; 3]) as f64;
    }
    total
}

/// Greedy stage-wise training ignores later stages. This pass re-centers
/// every codeword on what the other stages leave of the colors it codes
/// and keeps a round only if the greedy-coded distortion drops.
fn refine_stages(books: &mut Codebooks, colors: &[[f32; 3]], weights: &[f64], rounds: usize) {
    let stages = books.num_stages();
    if stages < 2 || colors.is_empty() {
        return;
    }
    let size = books.size();
    let mut codes = vec![0u16; colors.len() * stages];
    let mut best = rvq_distortion(books, colors, weights, &mut codes);
    for _ in 0..rounds {
        let mut next = books.clone();
        for k in 0..stages {
            let mut sums = vec![[0f64; 3]; size];
            let mut mass = vec![0f64; size];
            for ((c, &w), idx) in colors.iter().zip(weights).zip(codes.chunks_exact(stages)) {
                let mut target = [0, 1, 2].map(|ch| c[ch] as f64);
                for (j, &i) in idx.iter().enumerate().filter(|&(j, _)| j != k) {
                    let v = next.stages[j][i as usize];
                    for ch in 0..3 {
                        target[ch] -= v[ch] as f64;
                    }
                }
                let i = idx[k] as usize;
                mass[i] += w;
                for ch in 0..3 {
                    sums[i][ch] += w * target[ch];
                }
            }
            for ((cw, sum), &m) in next.stages[k].iter_mut().zip(&sums).zip(&mass) {
                if m > 0.0 {
                    *cw = sum.map(|s| (s / m) as f32);
                }
            }
        }
        let mut next_codes = vec![0u16; codes.len()];
        let d = rvq_distortion(&next, colors, weights, &mut next_codes);
        if !(d < best * (1.0 - 1e-6)) {
            break;
        }
        *books = next;
        codes = next_codes;
        best = d;
    }
}

/// Greedy nearest-codeword search on the running residual, one index per
/// stage written to `out`.
pub fn rvq_encode_into(color: [f32; 3], books: &Codebooks, out: &mut [u16]) {
    let mut r = color;
    for (book, slot) in books.stages.iter().zip(out.iter_mut()) {
        let i = nearest(book, r);
        *slot = i as u16;
        let c = book[i];
        r = [r[0] - c[0], r[1] - c[1], r[2] - c[2]];
    }
}

pub fn rvq_encode(color: [f32; 3], books: &Codebooks) -> Vec<u16> {
    let mut out = vec![0; books.num_stages()];
    rvq_encode_into(color, books, &mut out);
    out
}

/// Sum of the selected codewords.
pub fn rvq_decode(indices: &[u16], books: &Codebooks) -> Result<[f32; 3]> {
    if indices.len() != books.num_stages() {
        return Err(Error::CorruptStream(format!(
            "{} indices for {} stages",
            indices.len(),
            books.num_stages()
        )));
    }
    let mut out = [0f32; 3];
    for (&i, book) in indices.iter().zip(&books.stages) {
        let c = book
            .get(i as usize)
            .ok_or_else(|| Error::CorruptStream(format!("codebook index {i} out of range {}", book.len())))?;
        for k in 0..3 {
            out[k] += c[k];
        }
    }
    Ok(out)
}

/// Codes of one group of splats sharing per-channel quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CholBlock {
    pub params: [AsymParams; 3],
    pub codes: Vec<[i32; 3]>,
}

/// One quantized layer. Inherited splats (P-frames only) come first and are
/// stored as deltas against the reference layer; the remaining splats are
/// stored as absolute values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuantizedLayer {
    /// One flag per splat of the reference layer marking the splats carried
    /// into this layer. Empty for I-frames.
    pub inherited: Vec<bool>,
    /// 12-bit float position deltas.
    pub delta_pos: Vec<[u16; 2]>,
    pub delta_chol: Option<CholBlock>,
    /// Half-precision absolute positions.
    pub abs_pos: Vec<[u16; 2]>,
    pub abs_chol: Option<CholBlock>,
    /// `vq_stages` indices per splat, inherited splats first.
    pub color_indices: Vec<u16>,
}

impl QuantizedLayer {
    pub fn len(&self) -> usize {
        self.delta_pos.len() + self.abs_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFrame {
    pub kind: FrameKind,
    pub layers: Vec<QuantizedLayer>,
    pub codebooks: Codebooks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVideo {
    pub width: usize,
    pub height: usize,
    pub level_resolutions: Vec<Resolution>,
    pub mode: ScalabilityMode,
    pub frames: Vec<QuantizedFrame>,
}

impl QuantizedVideo {
    pub fn num_layers(&self) -> usize {
        self.level_resolutions.len()
    }
}

/// Quantization parameters of one layer's two groups.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTables {
    pub delta_chol: Option<[AsymParams; 3]>,
    pub abs_chol: Option<[AsymParams; 3]>,
}

/// Everything needed to quantize a frame besides the splats themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTables {
    pub layers: Vec<LayerTables>,
    pub codebooks: Codebooks,
}

impl FrameTables {
    /// Tables a quantized frame was produced with.
    pub fn of(q: &QuantizedFrame) -> Self {
        Self {
            layers: q
                .layers
                .iter()
                .map(|l| LayerTables {
                    delta_chol: l.delta_chol.as_ref().map(|b| b.params),
                    abs_chol: l.abs_chol.as_ref().map(|b| b.params),
                })
                .collect(),
            codebooks: q.codebooks.clone(),
        }
    }
}

/// Warnings raised while quantizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantWarnings {
    pub f16_overflows: usize,
    pub f12_overflows: usize,
    pub codebook_padded: bool,
}

/// Number of leading inherited splats in a layer, after checking that their
/// origins index the reference layer in increasing order.
fn inherited_split(layer: &Layer, kind: FrameKind, ref_len: Option<usize>) -> Result<usize> {
    if kind == FrameKind::I {
        return Ok(0);
    }
    let ref_len = ref_len.ok_or_else(|| Error::Contract("P-frame needs a reference".into()))?;
    let n = layer.inherited_count();
    if layer.origin[n..].iter().any(Option::is_some) {
        return Err(Error::Contract("inherited splats must precede injected ones".into()));
    }
    let mut prev: Option<u32> = None;
    for o in layer.origin[..n].iter().flatten() {
        if *o as usize >= ref_len || prev.is_some_and(|p| p >= *o) {
            return Err(Error::Contract(format!(
                "origin {o} invalid for a reference layer of {ref_len}"
            )));
        }
        prev = Some(*o);
    }
    Ok(n)
}

/// Value fed to the quantizers for every splat of a layer: Cholesky entries
/// and weighted color, as deltas for inherited splats.
struct LayerValues {
    inherited: usize,
    chol: Vec<[f32; 3]>,
    color: Vec<[f32; 3]>,
}

fn layer_values(layer: &Layer, inherited: usize, reference: Option<&Layer>) -> LayerValues {
    let mut chol = Vec::with_capacity(layer.len());
    let mut color = Vec::with_capacity(layer.len());
    for (j, s) in layer.splats.iter().enumerate() {
        let wc = s.weighted_color();
        match (j < inherited, reference) {
            (true, Some(r)) => {
                let rs = &r.splats[layer.origin[j].unwrap() as usize];
                chol.push([0, 1, 2].map(|c| s.chol[c] - rs.chol[c]));
                color.push([0, 1, 2].map(|c| wc[c] - rs.color[c]));
            }
            _ => {
                chol.push(s.chol);
                color.push(wc);
            }
        }
    }
    LayerValues { inherited, chol, color }
}

/// Expected squared image error per unit of squared color error: the
/// integral of `g²` over the plane, `π · l1 · l3` for a splat with Cholesky
/// factor `L`. Floored so that degenerate splats still seed codewords.
fn color_importance(s: &Splat) -> f64 {
    (std::f64::consts::PI * (s.chol[0] as f64 * s.chol[2] as f64).abs()).max(1e-6)
}

fn fit_chol(values: &[[f32; 3]], bits: u8, signed: bool) -> Result<Option<[AsymParams; 3]>> {
    if values.is_empty() {
        return Ok(None);
    }
    let mut out = [AsymParams {
        gamma: GAMMA_FLOOR,
        beta: 0.0,
        bits,
        signed,
    }; 3];
    for (c, p) in out.iter_mut().enumerate() {
        let ch: Vec<f32> = values.iter().map(|v| v[c]).collect();
        *p = AsymParams::fit(&ch, bits, signed)?;
    }
    Ok(Some(out))
}

fn check_reference(frame_kind: FrameKind, layers: usize, reference: Option<&LayeredFrame>) -> Result<()> {
    match (frame_kind, reference) {
        (FrameKind::P, None) => Err(Error::Contract("P-frame needs a reference".into())),
        (FrameKind::P, Some(r)) if r.num_layers() < layers => Err(Error::Contract(format!(
            "reference has {} layers, frame needs {layers}",
            r.num_layers()
        ))),
        _ => Ok(()),
    }
}

/// Fits per-group Cholesky parameters and frame codebooks. Base-layer
/// absolute Cholesky codes are unsigned, all others signed.
pub fn fit_tables(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    params: &QuantParams,
    rng: &mut impl Rng,
) -> Result<(FrameTables, bool)> {
    params.validate()?;
    check_reference(frame.kind, frame.num_layers(), reference)?;
    let mut layers = Vec::with_capacity(frame.num_layers());
    let mut colors = Vec::with_capacity(frame.total_splats());
    let mut footprints = Vec::with_capacity(frame.total_splats());
    for (l, layer) in frame.layers.iter().enumerate() {
        let rl = reference.map(|r| &r.layers[l]);
        let n = inherited_split(layer, frame.kind, rl.map(Layer::len))?;
        let v = layer_values(layer, n, rl);
        layers.push(LayerTables {
            delta_chol: fit_chol(&v.chol[..n], params.chol_bits_delta, true)?,
            abs_chol: fit_chol(&v.chol[n..], params.chol_bits_abs, l > 0)?,
        });
        colors.extend(v.color);
        footprints.extend(layer.splats.iter().map(color_importance));
    }
    let (codebooks, padded) = rvq_train_weighted(
        &colors,
        &footprints,
        params.vq_stages,
        params.codebook_size(),
        params.kmeans_iters,
        rng,
    );
    Ok((FrameTables { layers, codebooks }, padded))
}

fn chol_block(values: &[[f32; 3]], params: Option<[AsymParams; 3]>) -> Result<Option<CholBlock>> {
    if values.is_empty() {
        return Ok(None);
    }
    let params = params.ok_or_else(|| Error::Contract("missing Cholesky parameters".into()))?;
    let codes = values
        .iter()
        .map(|v| [0, 1, 2].map(|c| params[c].quantize(v[c])))
        .collect();
    Ok(Some(CholBlock { params, codes }))
}

/// Quantizes `frame` with fixed tables.
pub fn quantize_with(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    tables: &FrameTables,
    warnings: &mut QuantWarnings,
) -> Result<QuantizedFrame> {
    check_reference(frame.kind, frame.num_layers(), reference)?;
    if tables.layers.len() != frame.num_layers() {
        return Err(Error::Contract("tables do not match the frame's layers".into()));
    }
    let stages = tables.codebooks.num_stages();
    let mut layers = Vec::with_capacity(frame.num_layers());
    for (l, layer) in frame.layers.iter().enumerate() {
        if layer.splats.iter().any(|s| !s.is_finite()) {
            return Err(Error::RejectedInput(format!("non-finite splat in layer {l}")));
        }
        let rl = reference.map(|r| &r.layers[l]);
        let n = inherited_split(layer, frame.kind, rl.map(Layer::len))?;
        let v = layer_values(layer, n, rl);
        let mut q = QuantizedLayer::default();
        if let Some(rl) = rl.filter(|_| frame.kind == FrameKind::P) {
            q.inherited = vec![false; rl.len()];
            for o in layer.origin[..n].iter().flatten() {
                q.inherited[*o as usize] = true;
            }
        }
        for (j, s) in layer.splats.iter().enumerate() {
            if j < n {
                let rs = &rl.unwrap().splats[layer.origin[j].unwrap() as usize];
                q.delta_pos.push([0, 1].map(|c| {
                    let (code, of) = f12_encode(s.pos[c] - rs.pos[c]);
                    warnings.f12_overflows += of as usize;
                    code
                }));
            } else {
                q.abs_pos.push([0, 1].map(|c| {
                    let (code, of) = f16_encode(s.pos[c]);
                    warnings.f16_overflows += of as usize;
                    code
                }));
            }
        }
        q.delta_chol = chol_block(&v.chol[..n], tables.layers[l].delta_chol)?;
        q.abs_chol = chol_block(&v.chol[n..], tables.layers[l].abs_chol)?;
        q.color_indices = vec![0; layer.len() * stages];
        for (c, out) in v.color.iter().zip(q.color_indices.chunks_exact_mut(stages.max(1))) {
            rvq_encode_into(*c, &tables.codebooks, out);
        }
        debug_assert_eq!(v.inherited, n);
        layers.push(q);
    }
    Ok(QuantizedFrame {
        kind: frame.kind,
        layers,
        codebooks: tables.codebooks.clone(),
    })
}

/// Fits tables to `frame` and quantizes it. P-frames take the dequantized
/// previous frame as `reference`.
pub fn quantize_frame(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    params: &QuantParams,
    rng: &mut impl Rng,
) -> Result<(QuantizedFrame, QuantWarnings)> {
    let (tables, padded) = fit_tables(frame, reference, params, rng)?;
    let mut warnings = QuantWarnings {
        codebook_padded: padded,
        ..Default::default()
    };
    let q = quantize_with(frame, reference, &tables, &mut warnings)?;
    Ok((q, warnings))
}

/// Cost, codes, dequantized splat and per-level footprints of a candidate.
type Snap = (f64, [i32; 3], Splat, Vec<Option<Footprint>>);

/// Encoder-side Cholesky rounding. Nearest rounding treats each factor on
/// its own; instead every splat tries the lattice points on either side of
/// its three factors and keeps the one whose render best matches the
/// full-precision frame, summed over the levels the splat appears in
/// (squared error per pixel of each level). Splats are visited once, in
/// order, each against the already updated renders.
///
/// The result is a copy of `frame` whose Cholesky factors sit on the
/// chosen lattice points, so nearest rounding with `tables` reproduces the
/// choice and fine-tuning starts from it. Codes are never moved by more than
/// one step from the value, so the round-trip error stays below `γ`.
pub fn snap_chol(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    tables: &FrameTables,
    targets: &[Target],
    chol_floor: f32,
    rasterizer: &Rasterizer,
) -> Result<LayeredFrame> {
    if targets.len() != frame.num_layers() {
        return Err(Error::Contract("one render target per level required".into()));
    }
    let r = if frame.kind == FrameKind::P { reference } else { None };
    let q = quantize_with(frame, r, tables, &mut QuantWarnings::default())?;
    let mut deq = dequantize_frame(&q, r, chol_floor)?;
    let mut errors = Vec::with_capacity(targets.len());
    for (l, &t) in targets.iter().enumerate() {
        let full = rasterizer.render(&frame.level_view(l)?, t)?;
        let quant = rasterizer.render(&deq.level_view(l)?, t)?;
        let err: Vec<f64> = quant
            .data
            .iter()
            .zip(&full.data)
            .map(|(&a, &b)| a as f64 - b as f64)
            .collect();
        errors.push(err);
    }
    let level_weight: Vec<f64> = targets.iter().map(|t| 1.0 / (t.width * t.height) as f64).collect();
    let mut out = frame.clone();
    for l in 0..frame.num_layers() {
        let ql = &q.layers[l];
        let inherited = ql.delta_pos.len();
        for j in 0..ql.len() {
            let (block, idx, base) = if j < inherited {
                let o = deq.layers[l].origin[j].expect("inherited splats carry an origin") as usize;
                (
                    &ql.delta_chol,
                    j,
                    r.expect("P-frame reference").layers[l].splats[o].chol,
                )
            } else {
                (&ql.abs_chol, j - inherited, [0.0; 3])
            };
            let block = block
                .as_ref()
                .ok_or_else(|| Error::Contract("missing Cholesky block".into()))?;
            let params = block.params;
            let value = [0, 1, 2].map(|c| frame.layers[l].splats[j].chol[c] - base[c]);
            let options = [0, 1, 2].map(|c| {
                let (lo, hi) = params[c].range();
                let below = (params[c].scaled(value[c]).floor() as i64).clamp(lo as i64, hi as i64) as i32;
                let above = (below + 1).min(hi);
                [below, above]
            });
            let current = deq.layers[l].splats[j];
            let mut before = Vec::with_capacity(targets.len() - l);
            for &t in &targets[l..] {
                before.push(rasterizer.footprint(&current, t)?);
            }
            let mut best: Option<Snap> = None;
            for pick in 0..8 {
                let codes = [0, 1, 2].map(|c| options[c][(pick >> c) & 1]);
                if codes == block.codes[idx] || (0..3).any(|c| (pick >> c) & 1 == 1 && options[c][0] == options[c][1]) {
                    continue;
                }
                let mut cand = current;
                cand.chol = [0, 1, 2].map(|c| base[c] + params[c].dequantize(codes[c]));
                cand.chol[0] = cand.chol[0].max(chol_floor);
                cand.chol[2] = cand.chol[2].max(chol_floor);
                let mut after = Vec::with_capacity(before.len());
                let mut cost = 0.0;
                let mut ok = true;
                for (k, &t) in targets[l..].iter().enumerate() {
                    match rasterizer.footprint(&cand, t) {
                        Ok(f) => {
                            cost += level_weight[l + k] * swap_cost(&errors[l + k], t.width, &before[k], &f);
                            after.push(f);
                        }
                        Err(Error::DegenerateCovariance { .. }) => {
                            ok = false;
                            break;
                        }
                        Err(e) => return Err(e),
                    }
                }
                if ok && cost < best.as_ref().map_or(0.0, |b| b.0) {
                    best = Some((cost, codes, cand, after));
                }
            }
            if let Some((_, codes, cand, after)) = best {
                for (k, &t) in targets[l..].iter().enumerate() {
                    let err = &mut errors[l + k];
                    for_each_change(t.width, &before[k], &after[k], |o, d| err[o] += d);
                }
                deq.layers[l].splats[j] = cand;
                out.layers[l].splats[j].chol = [0, 1, 2].map(|c| base[c] + params[c].dequantize(codes[c]));
            }
        }
    }
    Ok(out)
}

/// Calls `f(offset, d)` for every nonzero entry `d` of `after − before`,
/// with `offset` indexing a row-major RGB image `width` pixels wide.
fn for_each_change(width: usize, before: &Option<Footprint>, after: &Option<Footprint>, mut f: impl FnMut(usize, f64)) {
    let boxes = [before, after].map(|fp| {
        fp.as_ref()
            .map(|fp| (fp.x0, fp.y0, fp.x0 + fp.width, fp.y0 + fp.height))
    });
    let Some((x0, y0, x1, y1)) = boxes
        .into_iter()
        .flatten()
        .reduce(|a, b| (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3)))
    else {
        return;
    };
    let get = |fp: &Option<Footprint>, x, y| fp.as_ref().map_or([0.0; 3], |fp| fp.get(x, y));
    for y in y0..y1 {
        for x in x0..x1 {
            let (a, b) = (get(before, x, y), get(after, x, y));
            for c in 0..3 {
                let d = b[c] as f64 - a[c] as f64;
                if d != 0.0 {
                    f((y * width + x) * 3 + c, d);
                }
            }
        }
    }
}

/// Change in `Σ e²` over the error image `err` when `before` is replaced by
/// `after`.
fn swap_cost(err: &[f64], width: usize, before: &Option<Footprint>, after: &Option<Footprint>) -> f64 {
    let mut cost = 0.0;
    for_each_change(width, before, after, |o, d| cost += d * (2.0 * err[o] + d));
    cost
}

/// Re-quantizes with the tables stored in `previous`.
pub fn requantize(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    previous: &QuantizedFrame,
) -> Result<QuantizedFrame> {
    quantize_with(
        frame,
        reference,
        &FrameTables::of(previous),
        &mut QuantWarnings::default(),
    )
}

fn chol_code(block: &Option<CholBlock>, j: usize) -> Result<[f32; 3]> {
    let b = block
        .as_ref()
        .ok_or_else(|| Error::CorruptStream("missing Cholesky block".into()))?;
    let codes = b
        .codes
        .get(j)
        .ok_or_else(|| Error::CorruptStream("Cholesky block too short".into()))?;
    Ok([0, 1, 2].map(|c| b.params[c].dequantize(codes[c])))
}

/// Reconstructs renderable splats. Weights become 1 and colors the decoded
/// weighted colors; Cholesky diagonals are held at `chol_floor`. Layers are
/// decoded independently, so `q` may hold any prefix of the reference's
/// layers.
pub fn dequantize_frame(q: &QuantizedFrame, reference: Option<&LayeredFrame>, chol_floor: f32) -> Result<LayeredFrame> {
    if q.kind == FrameKind::P && reference.is_none_or(|r| r.num_layers() < q.layers.len()) {
        return Err(Error::CorruptStream("P-frame without a matching reference".into()));
    }
    let stages = q.codebooks.num_stages();
    let mut layers = Vec::with_capacity(q.layers.len());
    for (l, ql) in q.layers.iter().enumerate() {
        if ql.color_indices.len() != ql.len() * stages {
            return Err(Error::CorruptStream("color index count mismatch".into()));
        }
        let mut splats = Vec::with_capacity(ql.len());
        let mut origin = Vec::with_capacity(ql.len());
        if q.kind == FrameKind::P {
            let rl = &reference.unwrap().layers[l];
            if ql.inherited.len() != rl.len() {
                return Err(Error::CorruptStream(format!(
                    "inheritance mask of {} for a reference layer of {}",
                    ql.inherited.len(),
                    rl.len()
                )));
            }
            let origins: Vec<usize> = (0..rl.len()).filter(|&i| ql.inherited[i]).collect();
            if origins.len() != ql.delta_pos.len() {
                return Err(Error::CorruptStream("inherited splat count mismatch".into()));
            }
            for (j, &o) in origins.iter().enumerate() {
                let rs = &rl.splats[o];
                let dchol = chol_code(&ql.delta_chol, j)?;
                let dcol = rvq_decode(&ql.color_indices[j * stages..(j + 1) * stages], &q.codebooks)?;
                let mut s = Splat {
                    pos: [0, 1].map(|c| rs.pos[c] + f12_decode(ql.delta_pos[j][c])),
                    chol: [0, 1, 2].map(|c| rs.chol[c] + dchol[c]),
                    color: [0, 1, 2].map(|c| rs.color[c] + dcol[c]),
                    weight: 1.0,
                };
                s.chol[0] = s.chol[0].max(chol_floor);
                s.chol[2] = s.chol[2].max(chol_floor);
                splats.push(s);
                origin.push(Some(o as u32));
            }
        } else if !ql.delta_pos.is_empty() {
            return Err(Error::CorruptStream("I-frame layer with inherited splats".into()));
        }
        let n = ql.delta_pos.len();
        for (j, p) in ql.abs_pos.iter().enumerate() {
            let k = n + j;
            let chol = chol_code(&ql.abs_chol, j)?;
            let color = rvq_decode(&ql.color_indices[k * stages..(k + 1) * stages], &q.codebooks)?;
            let mut s = Splat {
                pos: p.map(f16_decode),
                chol,
                color,
                weight: 1.0,
            };
            s.chol[0] = s.chol[0].max(chol_floor);
            s.chol[2] = s.chol[2].max(chol_floor);
            splats.push(s);
            origin.push(None);
        }
        layers.push(Layer { splats, origin });
    }
    let budgets = layers.iter().map(Layer::len).collect();
    Ok(LayeredFrame {
        kind: q.kind,
        layers,
        budgets,
    })
}

/// Decodes every frame, each P-frame against its decoded predecessor.
pub fn dequantize_video(q: &QuantizedVideo) -> Result<GaussianVideo> {
    let floor = chol_floor_px(q.height);
    let mut frames: Vec<LayeredFrame> = Vec::with_capacity(q.frames.len());
    for qf in &q.frames {
        let f = dequantize_frame(qf, frames.last(), floor)?;
        frames.push(f);
    }
    Ok(GaussianVideo {
        frames,
        width: q.width,
        height: q.height,
        level_resolutions: q.level_resolutions.clone(),
        mode: q.mode,
    })
}

/// Per-level PSNR of `frame` after quantization with `tables`.
fn quantized_psnr(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    tables: &FrameTables,
    pyramid: &GroundTruthPyramid,
    rasterizer: &Rasterizer,
) -> Result<Vec<f64>> {
    let q = quantize_with(frame, reference, tables, &mut QuantWarnings::default())?;
    let deq = dequantize_frame(&q, reference, chol_floor_px(pyramid.top_height))?;
    level_psnr(&deq, pyramid, rasterizer)
}

fn level_psnr(frame: &LayeredFrame, pyramid: &GroundTruthPyramid, rasterizer: &Rasterizer) -> Result<Vec<f64>> {
    (0..frame.num_layers())
        .map(|l| {
            psnr(
                &rasterizer.render(&frame.level_view(l)?, pyramid.target(l))?,
                &pyramid.levels[l],
            )
        })
        .collect()
}

/// Result of quantization-aware fine-tuning of one frame.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub frame: LayeredFrame,
    pub tables: FrameTables,
    /// Quantized-render PSNR per level with the initial tables.
    pub psnr_before: Vec<f64>,
    /// Quantized-render PSNR per level of the returned state.
    pub psnr_after: Vec<f64>,
    pub iterations: usize,
    /// True when no evaluated state improved on the starting point.
    pub rolled_back: bool,
}

/// Offsets of each trainable block inside the flat parameter vector.
struct Layout {
    splats: usize,
    /// Start of each layer's `(delta, abs)` table slots, 6 floats per group.
    tables: Vec<[Option<usize>; 2]>,
    codebooks: usize,
    len: usize,
}

impl Layout {
    fn new(frame: &LayeredFrame, tables: &FrameTables) -> Self {
        let splats = frame.total_splats() * Splat::PARAMS;
        let mut at = splats;
        let mut slots = Vec::with_capacity(tables.layers.len());
        for t in &tables.layers {
            let mut s = [None, None];
            for (slot, present) in s.iter_mut().zip([t.delta_chol.is_some(), t.abs_chol.is_some()]) {
                if present {
                    *slot = Some(at);
                    at += 6;
                }
            }
            slots.push(s);
        }
        let codebooks = at;
        let len = at + tables.codebooks.num_stages() * tables.codebooks.size() * 3;
        Self {
            splats,
            tables: slots,
            codebooks,
            len,
        }
    }

    fn pack(&self, frame: &LayeredFrame, tables: &FrameTables) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len);
        for layer in &frame.layers {
            out.extend(layer.splats.iter().flat_map(|s| s.to_array()));
        }
        for t in &tables.layers {
            for p in [t.delta_chol, t.abs_chol].into_iter().flatten() {
                out.extend(p.iter().flat_map(|a| [a.gamma, a.beta]));
            }
        }
        for book in &tables.codebooks.stages {
            out.extend(book.iter().flatten());
        }
        debug_assert_eq!(out.len(), self.len);
        out
    }

    fn unpack(&self, flat: &[f32], frame: &mut LayeredFrame, tables: &mut FrameTables, floor: f32) {
        let mut it = flat[..self.splats].chunks_exact(Splat::PARAMS);
        for layer in &mut frame.layers {
            for s in &mut layer.splats {
                *s = Splat::from_array(it.next().unwrap());
                s.clamp(floor);
            }
        }
        for (t, slots) in tables.layers.iter_mut().zip(&self.tables) {
            for (p, slot) in [&mut t.delta_chol, &mut t.abs_chol].into_iter().zip(slots) {
                if let (Some(p), Some(at)) = (p.as_mut(), slot) {
                    for (c, a) in p.iter_mut().enumerate() {
                        a.gamma = flat[at + 2 * c].max(GAMMA_FLOOR);
                        a.beta = flat[at + 2 * c + 1];
                    }
                }
            }
        }
        let mut at = self.codebooks;
        for book in &mut tables.codebooks.stages {
            for c in book.iter_mut() {
                *c = [flat[at], flat[at + 1], flat[at + 2]];
                at += 3;
            }
        }
    }
}

/// Straight-through gradient of `dequant(quant(x))` for one channel:
/// `(d/dx, d/dγ, d/dβ)` per unit upstream gradient.
fn ste_chol(p: &AsymParams, x: f32) -> (f32, f32, f32) {
    let (lo, hi) = p.range();
    let u = p.scaled(x);
    let r = u.round();
    if r < lo as f64 {
        (0.0, lo as f32, 1.0)
    } else if r > hi as f64 {
        (0.0, hi as f32, 1.0)
    } else {
        (1.0, (r - u) as f32, 0.0)
    }
}

/// One fine-tuning gradient: reconstruction through the quantizers with
/// straight-through estimates plus the commitment term on weighted colors.
#[allow(clippy::too_many_arguments)]
fn finetune_grad(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    tables: &FrameTables,
    layout: &Layout,
    pyramid: &GroundTruthPyramid,
    k: usize,
    params: &QuantParams,
    rasterizer: &Rasterizer,
) -> Result<(f64, Vec<f32>)> {
    let floor = chol_floor_px(pyramid.top_height);
    let q = quantize_with(frame, reference, tables, &mut QuantWarnings::default())?;
    let deq = dequantize_frame(&q, reference, floor)?;
    let loss = joint_loss(&deq, pyramid, k, rasterizer)?;
    let stages = tables.codebooks.num_stages();
    let size = tables.codebooks.size();
    let n_total = frame.total_splats().max(1) as f64;
    let commit_scale = (2.0 * params.commitment / n_total) as f32;
    let mut commit = 0f64;
    let mut g = vec![0f32; layout.len];
    let mut view = 0usize;
    for (l, layer) in frame.layers.iter().enumerate() {
        let rl = reference.map(|r| &r.layers[l]);
        let n = inherited_split(layer, frame.kind, rl.map(Layer::len))?;
        let v = layer_values(layer, n, rl);
        let ql = &q.layers[l];
        for (j, s) in layer.splats.iter().enumerate() {
            let up = &loss.grads[view];
            let base = view * Splat::PARAMS;
            g[base] += up.pos[0];
            g[base + 1] += up.pos[1];
            let (group, slot) = if j < n {
                (tables.layers[l].delta_chol, layout.tables[l][0])
            } else {
                (tables.layers[l].abs_chol, layout.tables[l][1])
            };
            if let (Some(p), Some(at)) = (group, slot) {
                for c in 0..3 {
                    let (dx, dg, db) = ste_chol(&p[c], v.chol[j][c]);
                    g[base + 2 + c] += up.chol[c] * dx;
                    g[at + 2 * c] += up.chol[c] * dg;
                    g[at + 2 * c + 1] += up.chol[c] * db;
                }
            }
            let idx = &ql.color_indices[j * stages..(j + 1) * stages];
            let decoded = rvq_decode(idx, &tables.codebooks)?;
            let mut gc = [0f32; 3];
            for c in 0..3 {
                let diff = v.color[j][c] - decoded[c];
                commit += (diff as f64).powi(2);
                gc[c] = up.color[c] + commit_scale * diff;
            }
            for c in 0..3 {
                g[base + 5 + c] += s.weight * gc[c];
            }
            g[base + 8] += (0..3).map(|c| s.color[c] * gc[c]).sum::<f32>();
            for (stage, &i) in idx.iter().enumerate() {
                let at = layout.codebooks + (stage * size + i as usize) * 3;
                for c in 0..3 {
                    g[at + c] += up.color[c];
                }
            }
            view += 1;
        }
    }
    Ok((loss.total + params.commitment * commit / n_total, g))
}

/// Quantization-aware fine-tuning of one frame against its level targets.
///
/// Splat parameters, Cholesky steps and offsets, and codebooks are updated
/// through straight-through estimates of the quantizers. Every
/// `finetune_eval_every` iterations the quantized render is scored; the
/// returned state is the best one whose per-level PSNR is nowhere below the
/// starting point, falling back to the input when none qualifies.
pub fn finetune_frame(
    frame: &LayeredFrame,
    reference: Option<&LayeredFrame>,
    tables: &FrameTables,
    pyramid: &GroundTruthPyramid,
    params: &QuantParams,
    rasterizer: &Rasterizer,
) -> Result<FinetuneOutcome> {
    let floor = chol_floor_px(pyramid.top_height);
    let psnr_before = quantized_psnr(frame, reference, tables, pyramid, rasterizer)?;
    let layout = Layout::new(frame, tables);
    let mut flat = layout.pack(frame, tables);
    let mut opt = OptimizerState::new(params.optimizer, layout.len);
    let mut cur_frame = frame.clone();
    let mut cur_tables = tables.clone();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut best: Option<(LayeredFrame, FrameTables, Vec<f64>)> = None;
    let mut best_score = mean(&psnr_before);
    let mut iterations = 0;
    for k in 0..params.finetune_iters {
        let step = finetune_grad(
            &cur_frame,
            reference,
            &cur_tables,
            &layout,
            pyramid,
            k,
            params,
            rasterizer,
        )
        .and_then(|(loss, grad)| {
            if !loss.is_finite() {
                return Err(Error::Divergence("non-finite fine-tuning loss".into()));
            }
            opt.step(&mut flat, &grad, params.finetune_lr)
        });
        if step.is_err() {
            break;
        }
        layout.unpack(&flat, &mut cur_frame, &mut cur_tables, floor);
        iterations = k + 1;
        if iterations % params.finetune_eval_every == 0 || iterations == params.finetune_iters {
            let Ok(scores) = quantized_psnr(&cur_frame, reference, &cur_tables, pyramid, rasterizer) else {
                break;
            };
            let dominates = scores.iter().zip(&psnr_before).all(|(a, b)| a >= b);
            if dominates && mean(&scores) > best_score {
                best_score = mean(&scores);
                best = Some((cur_frame.clone(), cur_tables.clone(), scores));
            }
        }
    }
    Ok(match best {
        Some((frame, tables, scores)) => FinetuneOutcome {
            frame,
            tables,
            psnr_before,
            psnr_after: scores,
            iterations,
            rolled_back: false,
        },
        None => FinetuneOutcome {
            frame: frame.clone(),
            tables: tables.clone(),
            psnr_after: psnr_before.clone(),
            psnr_before,
            iterations,
            rolled_back: true,
        },
    })
}

/// Per-frame quantization summary. PSNR fields are empty when no targets
/// were supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameQuantReport {
    pub frame: usize,
    pub kind: FrameKind,
    /// Full-precision render PSNR per level.
    pub psnr_full: Vec<f64>,
    /// Quantized-render PSNR per level before fine-tuning.
    pub psnr_quant_before: Vec<f64>,
    /// Quantized-render PSNR per level of the emitted frame.
    pub psnr_quant_after: Vec<f64>,
    pub finetune_iters: usize,
    pub rolled_back: bool,
    pub warnings: QuantWarnings,
}

/// Quantizes a trained video frame by frame. With `targets`, each frame is
/// fine-tuned (when enabled) and scored against its level pyramid.
pub fn quantize_video(
    video: &GaussianVideo,
    targets: Option<&[RasterImage]>,
    params: &QuantParams,
    seed: u64,
    rasterizer: &Rasterizer,
) -> Result<(QuantizedVideo, Vec<FrameQuantReport>)> {
    params.validate()?;
    video.validate()?;
    if let Some(t) = targets {
        if t.len() != video.frames.len() {
            return Err(Error::RejectedInput(format!(
                "{} targets for {} frames",
                t.len(),
                video.frames.len()
            )));
        }
    }
    let floor = chol_floor_px(video.height);
    let level_targets: Vec<Target> = video
        .level_resolutions
        .iter()
        .map(|r| Target::scaled(r.width, r.height, video.height))
        .collect();
    let mut frames = Vec::with_capacity(video.frames.len());
    let mut reports = Vec::with_capacity(video.frames.len());
    let mut reference: Option<LayeredFrame> = None;
    for (t, frame) in video.frames.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let r = if frame.kind == FrameKind::P {
            reference.as_ref()
        } else {
            None
        };
        let (mut tables, padded) = fit_tables(frame, r, params, &mut rng)?;
        let mut warnings = QuantWarnings {
            codebook_padded: padded,
            ..Default::default()
        };
        let mut report = FrameQuantReport {
            frame: t,
            kind: frame.kind,
            psnr_full: Vec::new(),
            psnr_quant_before: Vec::new(),
            psnr_quant_after: Vec::new(),
            finetune_iters: 0,
            rolled_back: false,
            warnings,
        };
        let mut source = snap_chol(frame, r, &tables, &level_targets, floor, rasterizer)?;
        if let Some(targets) = targets {
            let pyramid = GroundTruthPyramid::build(&targets[t], &video.level_resolutions);
            report.psnr_full = level_psnr(frame, &pyramid, rasterizer)?;
            if params.finetune_iters > 0 {
                let out = finetune_frame(&source, r, &tables, &pyramid, params, rasterizer)?;
                report.psnr_quant_before = out.psnr_before;
                report.psnr_quant_after = out.psnr_after;
                report.finetune_iters = out.iterations;
                report.rolled_back = out.rolled_back;
                source = out.frame;
                tables = out.tables;
            } else {
                report.psnr_quant_before = quantized_psnr(&source, r, &tables, &pyramid, rasterizer)?;
                report.psnr_quant_after = report.psnr_quant_before.clone();
            }
        }
        let q = quantize_with(&source, r, &tables, &mut warnings)?;
        report.warnings = warnings;
        reference = Some(dequantize_frame(&q, r, floor)?);
        frames.push(q);
        reports.push(report);
    }
    Ok((
        QuantizedVideo {
            width: video.width,
            height: video.height,
            level_resolutions: video.level_resolutions.clone(),
            mode: video.mode,
            frames,
        },
        reports,
    ))
}
