//! Layered training: key-frame selection, I/P initialization, cyclic joint
//! loss, scheduled pruning, per-frame convergence and the comparison
//! baselines (sequential, monolithic, pruning).

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::resize_lanczos;
use crate::metrics::psnr;
use crate::optim::{l2_loss, lr_at, OptimizerState};
use crate::raster::{RasterImage, Rasterizer, SplatGrad, Target};
use crate::splat::{
    chol_floor_px, CodecConfig, FrameKind, GaussianVideo, GspSchedule, Layer, LayeredFrame, Resolution,
    ScalabilityMode, Splat,
};

/// Per-level supervision targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPyramid {
    pub levels: Vec<RasterImage>,
    pub top_height: usize,
}

impl GroundTruthPyramid {
    /// Resamples `frame` to each level resolution (Lanczos-3). Quality mode
    /// passes identical resolutions, so every level is the input itself.
    pub fn build(frame: &RasterImage, resolutions: &[Resolution]) -> Self {
        let levels = resolutions
            .iter()
            .map(|r| resize_lanczos(frame, r.width, r.height))
            .collect();
        Self {
            levels,
            top_height: frame.height,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn target(&self, level: usize) -> Target {
        let img = &self.levels[level];
        Target::scaled(img.width, img.height, self.top_height)
    }
}

/// Level sizes `round(H · r_ℓ) × round(W · r_ℓ)` with
/// `r_ℓ = sqrt(Σ_{i≤ℓ} N^i / N)`.
pub fn level_resolutions(total: usize, budgets: &[usize], top: Resolution) -> Result<Vec<Resolution>> {
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(Error::Config("every layer needs a positive budget".into()));
    }
    if budgets.iter().sum::<usize>() != total {
        return Err(Error::Config("layer budgets must sum to the total budget".into()));
    }
    let mut cum = 0usize;
    Ok(budgets
        .iter()
        .enumerate()
        .map(|(l, &b)| {
            cum += b;
            if l + 1 == budgets.len() {
                return top;
            }
            let r = (cum as f64 / total as f64).sqrt();
            Resolution::new(
                ((top.width as f64 * r).round() as usize).max(1),
                ((top.height as f64 * r).round() as usize).max(1),
            )
        })
        .collect())
}

/// Level resolutions stored in a video for the configured scalability mode.
pub fn video_level_resolutions(config: &CodecConfig, top: Resolution) -> Result<Vec<Resolution>> {
    match config.scalability_mode {
        ScalabilityMode::Quality => Ok(vec![top; config.num_layers]),
        ScalabilityMode::Resolution => level_resolutions(config.total_budget, &config.layer_budgets(), top),
    }
}

/// Intermediate level supervised at iteration `k`: `k mod (L − 1)`.
pub fn cyclic_level(k: usize, num_levels: usize) -> Result<usize> {
    if num_levels < 2 {
        return Err(Error::Config("cyclic selection needs at least two levels".into()));
    }
    Ok(k % (num_levels - 1))
}

/// Result of one joint-loss evaluation.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: f64,
    /// L2 term of the full reconstruction.
    pub top_term: f64,
    /// Intermediate level and its L2 term, absent for single-level frames.
    pub level_term: Option<(usize, f64)>,
    /// Gradients in top-level view order.
    pub grads: Vec<SplatGrad>,
}

fn level_l2(
    r: &Rasterizer,
    splats: &[Splat],
    pyramid: &GroundTruthPyramid,
    level: usize,
) -> Result<(f64, Vec<SplatGrad>)> {
    let target = pyramid.target(level);
    let pred = r.render(splats, target)?;
    let (loss, up) = l2_loss(&pred, &pyramid.levels[level])?;
    let grads = r.backward(splats, target, &up)?;
    Ok((loss, grads))
}

/// `L2(top) + L2(ℓ_k)` and its gradient. Splats in layers `≤ ℓ_k` collect
/// gradients from both renders, higher layers only from the top render.
pub fn joint_loss(
    frame: &LayeredFrame,
    pyramid: &GroundTruthPyramid,
    k: usize,
    rasterizer: &Rasterizer,
) -> Result<JointLoss> {
    if pyramid.num_levels() != frame.num_layers() {
        return Err(Error::Contract(format!(
            "pyramid has {} levels but frame has {} layers",
            pyramid.num_levels(),
            frame.num_layers()
        )));
    }
    let top = frame.top_level();
    let all = frame.level_view(top)?;
    let (top_term, mut grads) = level_l2(rasterizer, &all, pyramid, top)?;
    if frame.num_layers() < 2 {
        return Ok(JointLoss {
            total: top_term,
            top_term,
            level_term: None,
            grads,
        });
    }
    let level = cyclic_level(k, frame.num_layers())?;
    let n = frame.layer_offset(level + 1);
    let (term, g) = level_l2(rasterizer, &all[..n], pyramid, level)?;
    for (dst, src) in grads.iter_mut().zip(&g) {
        dst.add_assign(src);
    }
    Ok(JointLoss {
        total: top_term + term,
        top_term,
        level_term: Some((level, term)),
        grads,
    })
}

/// Mean absolute difference over all samples of two same-sized frames.
pub fn mean_abs_diff(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// Scene-cut detection: frame 0 and every frame whose mean absolute
/// difference to its predecessor exceeds `threshold` become I-frames.
pub fn select_keyframes(frames: &[RasterImage], threshold: f64) -> Result<Vec<FrameKind>> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames".into()));
    }
    let mut kinds = vec![FrameKind::I];
    for w in frames.windows(2) {
        let mad = mean_abs_diff(&w[1], &w[0])?;
        kinds.push(if mad > threshold { FrameKind::I } else { FrameKind::P });
    }
    Ok(kinds)
}

pub fn random_splat(rng: &mut impl Rng, sigma_px: f64) -> Splat {
    let s = sigma_px as f32;
    Splat {
        pos: [rng.gen::<f32>(), rng.gen::<f32>()],
        chol: [s, 0.0, s],
        color: [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()],
        weight: 1.0,
    }
}

/// Fresh frame with `budgets[ℓ] + aug[ℓ]` random splats in layer `ℓ`.
pub fn init_iframe(budgets: &[usize], aug: &[usize], sigma_px: f64, rng: &mut impl Rng) -> LayeredFrame {
    let layers = budgets
        .iter()
        .zip(aug)
        .map(|(&b, &a)| Layer::fresh((0..b + a).map(|_| random_splat(rng, sigma_px)).collect()))
        .collect();
    LayeredFrame {
        kind: FrameKind::I,
        layers,
        budgets: budgets.to_vec(),
    }
}

/// Copies every layer of `prev` and appends `aug[ℓ]` random splats to
/// layer `ℓ`. Copied splats remember their index in `prev`.
pub fn init_pframe(prev: &LayeredFrame, aug: &[usize], sigma_px: f64, rng: &mut impl Rng) -> LayeredFrame {
    let layers = prev
        .layers
        .iter()
        .zip(aug)
        .map(|(layer, &a)| {
            let mut splats = layer.splats.clone();
            let mut origin: Vec<Option<u32>> = (0..splats.len() as u32).map(Some).collect();
            splats.extend((0..a).map(|_| random_splat(rng, sigma_px)));
            origin.resize(splats.len(), None);
            Layer { splats, origin }
        })
        .collect();
    LayeredFrame {
        kind: FrameKind::P,
        layers,
        budgets: prev.budgets.clone(),
    }
}

/// Keep mask removing the `count` splats with smallest `|w|` (lowest index
/// first among ties).
fn smallest_weight_mask(layer: &Layer, count: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..layer.len()).collect();
    idx.sort_by(|&a, &b| {
        let wa = layer.splats[a].weight.abs();
        let wb = layer.splats[b].weight.abs();
        wa.total_cmp(&wb).then(a.cmp(&b))
    });
    let mut keep = vec![true; layer.len()];
    for &i in &idx[..count] {
        keep[i] = false;
    }
    keep
}

/// Scheduled pruning at iteration `k`.
///
/// On every `interval`-th iteration inside the first `span` iterations, each
/// layer loses `⌈prune_totals[ℓ] · interval / span⌉` splats of smallest
/// `|w|`, never going below its budget; the last event removes whatever is
/// left above budget. Returns the per-layer keep masks when anything was
/// removed.
pub fn gsp_prune(
    frame: &mut LayeredFrame,
    k: usize,
    schedule: GspSchedule,
    prune_totals: &[usize],
) -> Result<Option<Vec<Vec<bool>>>> {
    if k >= schedule.span || !k.is_multiple_of(schedule.interval) {
        return Ok(None);
    }
    let last_event = k + schedule.interval >= schedule.span;
    let mut masks = Vec::with_capacity(frame.num_layers());
    let mut any = false;
    for (l, layer) in frame.layers.iter_mut().enumerate() {
        let per_event = (prune_totals[l] * schedule.interval).div_ceil(schedule.span);
        if per_event > layer.len() {
            return Err(Error::Config(format!(
                "pruning {per_event} splats from a layer of {}",
                layer.len()
            )));
        }
        let excess = layer.len().saturating_sub(frame.budgets[l]);
        let count = if last_event { excess } else { per_event.min(excess) };
        let mask = smallest_weight_mask(layer, count);
        if count > 0 {
            layer.retain_mask(&mask);
            any = true;
        }
        masks.push(mask);
    }
    Ok(any.then_some(masks))
}

/// The `keep` splats with largest `|w|`, in their original order.
pub fn pruning_baseline_view(frame: &LayeredFrame, keep: usize) -> Result<Vec<Splat>> {
    let all = frame.level_view(frame.top_level())?;
    if keep > all.len() {
        return Err(Error::Index {
            index: keep,
            len: all.len(),
        });
    }
    let layer = Layer::fresh(all);
    let mask = smallest_weight_mask(&layer, layer.len() - keep);
    Ok(layer
        .splats
        .into_iter()
        .zip(mask)
        .filter_map(|(s, k)| k.then_some(s))
        .collect())
}

/// Per-frame training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub kind: FrameKind,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    /// PSNR of each level against its own supervision target.
    pub level_psnr: Vec<f64>,
    pub layer_counts: Vec<usize>,
    pub wall_secs: f64,
}

/// What a training run supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    /// Top level plus the cyclically selected intermediate level.
    Joint,
    /// Only the highest level present in the frame.
    TopOnly,
}

/// Drives per-frame optimization. Owns the optional per-iteration CSV log.
pub struct Trainer {
    pub config: CodecConfig,
    pub rasterizer: Rasterizer,
    log: Option<Box<dyn Write + Send>>,
    log_header: bool,
}

impl Trainer {
    pub fn new(config: CodecConfig) -> Self {
        Self {
            config,
            rasterizer: Rasterizer::default(),
            log: None,
            log_header: false,
        }
    }

    /// Emits one CSV row per iteration:
    /// `frame,k,level,loss,lr,count_0,…,count_{L-1}`.
    pub fn with_log(mut self, log: Box<dyn Write + Send>) -> Self {
        self.log = Some(log);
        self
    }

    fn log_row(
        &mut self,
        frame: usize,
        k: usize,
        level: Option<usize>,
        loss: f64,
        lr: f64,
        counts: &[usize],
    ) -> Result<()> {
        let Some(out) = self.log.as_mut() else {
            return Ok(());
        };
        if !self.log_header {
            let cols: Vec<String> = (0..self.config.num_layers).map(|l| format!("count_{l}")).collect();
            writeln!(out, "frame,k,level,loss,lr,{}", cols.join(","))?;
            self.log_header = true;
        }
        let level = level.map(|l| l.to_string()).unwrap_or_default();
        let counts: Vec<String> = counts.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{frame},{k},{level},{loss:.9e},{lr:e},{}", counts.join(","))?;
        Ok(())
    }

    /// Trains `init` until the joint loss settles or the iteration cap.
    pub fn train_frame(
        &mut self,
        init: LayeredFrame,
        pyramid: &GroundTruthPyramid,
        frame_index: usize,
    ) -> Result<(LayeredFrame, FrameReport)> {
        self.fit(init, pyramid, frame_index, Objective::Joint, 0)
    }

    fn fit(
        &mut self,
        mut frame: LayeredFrame,
        pyramid: &GroundTruthPyramid,
        frame_index: usize,
        objective: Objective,
        trainable_from: usize,
    ) -> Result<(LayeredFrame, FrameReport)> {
        let start = Instant::now();
        let cfg = self.config.clone();
        let schedule = cfg.gsp(frame.kind);
        let max_iters = cfg.max_iters(frame.kind);
        let floor = chol_floor_px(pyramid.top_height);
        let prune_totals: Vec<usize> = {
            let aug = cfg.aug_counts();
            (0..frame.num_layers())
                .map(|l| {
                    if l >= trainable_from {
                        aug.get(l).copied().unwrap_or(0)
                    } else {
                        0
                    }
                })
                .collect()
        };
        let trainable_len = |f: &LayeredFrame| f.total_splats() - f.layer_offset(trainable_from);
        let mut opt = OptimizerState::new(cfg.optimizer, trainable_len(&frame) * Splat::PARAMS);
        let cycle = match objective {
            Objective::Joint if frame.num_layers() >= 2 => frame.num_layers() - 1,
            _ => 1,
        };
        let mut history: Vec<f64> = Vec::new();
        let mut streak = 0usize;
        let mut converged = false;
        let mut k = 0;
        while k < max_iters {
            let lr = lr_at(k, cfg.lr0, cfg.lr_halving_period);
            let step = match objective {
                Objective::Joint => joint_loss(&frame, pyramid, k, &self.rasterizer)
                    .map(|j| (j.total, j.level_term.map(|t| t.0), j.grads)),
                Objective::TopOnly => {
                    let top = frame.top_level();
                    let all = frame.level_view(top)?;
                    level_l2(&self.rasterizer, &all, pyramid, top).map(|(l, g)| (l, None, g))
                }
            };
            // Covariances only collapse once the parameters have blown up.
            let (loss, level, grads) = step.map_err(|e| match e {
                Error::DegenerateCovariance { det } => Error::Divergence(format!(
                    "covariance collapsed (det = {det:e}) at iteration {k} of frame {frame_index}"
                )),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at iteration {k} of frame {frame_index}"
                )));
            }
            self.log_row(frame_index, k, level, loss, lr, &frame.layer_counts())?;

            let offset = frame.layer_offset(trainable_from);
            let mut params: Vec<f32> = Vec::with_capacity(opt.len());
            for layer in &frame.layers[trainable_from..] {
                params.extend(layer.splats.iter().flat_map(|s| s.to_array()));
            }
            let flat_grads: Vec<f32> = grads[offset..].iter().flat_map(|g| g.to_array()).collect();
            opt.step(&mut params, &flat_grads, lr)?;
            let mut chunks = params.chunks_exact(Splat::PARAMS);
            for layer in &mut frame.layers[trainable_from..] {
                for s in &mut layer.splats {
                    *s = Splat::from_array(chunks.next().expect("param count matches"));
                    s.clamp(floor);
                }
            }

            if let Some(masks) = gsp_prune(&mut frame, k, schedule, &prune_totals)? {
                let keep: Vec<bool> = masks[trainable_from..].concat();
                opt.retain_blocks(&keep, Splat::PARAMS);
            }

            history.push(loss);
            if k >= cycle {
                let change = (loss - history[k - cycle]).abs();
                streak = if change < cfg.conv_delta { streak + 1 } else { 0 };
            }
            k += 1;
            if streak >= cfg.conv_window && k >= schedule.span {
                converged = true;
                break;
            }
        }
        // Iteration cap hit before the pruning schedule finished.
        for l in trainable_from..frame.num_layers() {
            let excess = frame.layers[l].len().saturating_sub(frame.budgets[l]);
            if excess > 0 {
                let mask = smallest_weight_mask(&frame.layers[l], excess);
                frame.layers[l].retain_mask(&mask);
            }
        }
        let level_psnr = self.level_psnr(&frame, pyramid)?;
        let final_loss = history.last().copied().unwrap_or(0.0);
        let report = FrameReport {
            frame: frame_index,
            kind: frame.kind,
            iterations: k,
            converged,
            final_loss,
            level_psnr,
            layer_counts: frame.layer_counts(),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        Ok((frame, report))
    }

    /// PSNR of every level of `frame` against the matching pyramid level.
    pub fn level_psnr(&self, frame: &LayeredFrame, pyramid: &GroundTruthPyramid) -> Result<Vec<f64>> {
        (0..frame.num_layers())
            .map(|l| {
                let img = self.rasterizer.render(&frame.level_view(l)?, pyramid.target(l))?;
                psnr(&img, &pyramid.levels[l])
            })
            .collect()
    }

    fn prepare(&self, frames: &[RasterImage]) -> Result<(Vec<Resolution>, Vec<FrameKind>)> {
        self.config.validate()?;
        if frames.is_empty() {
            return Err(Error::Empty("no frames to encode".into()));
        }
        let top = Resolution::new(frames[0].width, frames[0].height);
        if frames.iter().any(|f| f.dims() != (top.width, top.height)) {
            return Err(Error::RejectedInput("frames differ in size".into()));
        }
        let resolutions = video_level_resolutions(&self.config, top)?;
        let kinds = if frames.len() > 1 {
            select_keyframes(frames, self.config.dks_threshold)?
        } else {
            vec![FrameKind::I]
        };
        Ok((resolutions, kinds))
    }

    /// Full layered pipeline over a frame sequence (a single frame is an
    /// image).
    pub fn encode_sequence(&mut self, frames: &[RasterImage], seed: u64) -> Result<(GaussianVideo, Vec<FrameReport>)> {
        let (resolutions, kinds) = self.prepare(frames)?;
        let budgets = self.config.layer_budgets();
        let aug = self.config.aug_counts();
        let sigma = self.config.init_sigma_px;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<LayeredFrame> = Vec::with_capacity(frames.len());
        let mut reports = Vec::with_capacity(frames.len());
        for (t, (img, &kind)) in frames.iter().zip(&kinds).enumerate() {
            let init = match (kind, out.last()) {
                (FrameKind::P, Some(prev)) => init_pframe(prev, &aug, sigma, &mut rng),
                _ => init_iframe(&budgets, &aug, sigma, &mut rng),
            };
            let pyramid = GroundTruthPyramid::build(img, &resolutions);
            let (frame, report) = self.train_frame(init, &pyramid, t)?;
            out.push(frame);
            reports.push(report);
        }
        let video = GaussianVideo {
            frames: out,
            width: frames[0].width,
            height: frames[0].height,
            level_resolutions: resolutions,
            mode: self.config.scalability_mode,
        };
        Ok((video, reports))
    }

    /// Layer-by-layer baseline: layer `ℓ` is trained against level `ℓ`'s
    /// target with every lower layer frozen.
    pub fn train_sequential_baseline(
        &mut self,
        frames: &[RasterImage],
        seed: u64,
    ) -> Result<(GaussianVideo, Vec<FrameReport>)> {
        let (resolutions, kinds) = self.prepare(frames)?;
        let budgets = self.config.layer_budgets();
        let aug = self.config.aug_counts();
        let sigma = self.config.init_sigma_px;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<LayeredFrame> = Vec::with_capacity(frames.len());
        let mut reports = Vec::with_capacity(frames.len());
        for (t, (img, &kind)) in frames.iter().zip(&kinds).enumerate() {
            let kind = if out.is_empty() { FrameKind::I } else { kind };
            let full_pyramid = GroundTruthPyramid::build(img, &resolutions);
            let mut frame = LayeredFrame {
                kind,
                layers: Vec::new(),
                budgets: budgets.clone(),
            };
            let start = Instant::now();
            let mut iterations = 0;
            let mut converged = true;
            for l in 0..budgets.len() {
                let layer = match kind {
                    FrameKind::P => {
                        let prev = &out.last().expect("P-frame has a predecessor").layers[l];
                        let mut splats = prev.splats.clone();
                        let mut origin: Vec<Option<u32>> = (0..splats.len() as u32).map(Some).collect();
                        splats.extend((0..aug[l]).map(|_| random_splat(&mut rng, sigma)));
                        origin.resize(splats.len(), None);
                        Layer { splats, origin }
                    }
                    FrameKind::I => Layer::fresh(
                        (0..budgets[l] + aug[l])
                            .map(|_| random_splat(&mut rng, sigma))
                            .collect(),
                    ),
                };
                frame.layers.push(layer);
                let pyramid = GroundTruthPyramid {
                    levels: full_pyramid.levels[..=l].to_vec(),
                    top_height: full_pyramid.top_height,
                };
                let (trained, rep) = self.fit(frame, &pyramid, t, Objective::TopOnly, l)?;
                frame = trained;
                iterations += rep.iterations;
                converged &= rep.converged;
            }
            let level_psnr = self.level_psnr(&frame, &full_pyramid)?;
            reports.push(FrameReport {
                frame: t,
                kind,
                iterations,
                converged,
                final_loss: 0.0,
                level_psnr,
                layer_counts: frame.layer_counts(),
                wall_secs: start.elapsed().as_secs_f64(),
            });
            out.push(frame);
        }
        let video = GaussianVideo {
            frames: out,
            width: frames[0].width,
            height: frames[0].height,
            level_resolutions: resolutions,
            mode: self.config.scalability_mode,
        };
        Ok((video, reports))
    }

    /// Independent single-layer models, one per cumulative level budget,
    /// each trained at its level's resolution.
    pub fn train_monolithic_baseline(
        &mut self,
        frames: &[RasterImage],
        seed: u64,
    ) -> Result<Vec<(GaussianVideo, Vec<FrameReport>)>> {
        let (resolutions, _) = self.prepare(frames)?;
        let budgets = self.config.layer_budgets();
        let base = self.config.clone();
        let mut out = Vec::with_capacity(budgets.len());
        let mut cum = 0;
        for (l, &b) in budgets.iter().enumerate() {
            cum += b;
            let res = resolutions[l];
            let level_frames: Vec<RasterImage> = frames
                .iter()
                .map(|f| resize_lanczos(f, res.width, res.height))
                .collect();
            self.config = base.single_layer(cum);
            let result = self.encode_sequence(&level_frames, seed);
            self.config = base.clone();
            out.push(result?);
        }
        Ok(out)
    }
}

/// [`Trainer::encode_sequence`] with default renderer settings.
pub fn encode_sequence(
    frames: &[RasterImage],
    config: &CodecConfig,
    seed: u64,
) -> Result<(GaussianVideo, Vec<FrameReport>)> {
    Trainer::new(config.clone()).encode_sequence(frames, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_resolution_examples() {
        let top = Resolution::new(1920, 1080);
        let r = level_resolutions(12_000, &[4000, 4000, 4000], top).unwrap();
        let r0 = (1.0f64 / 3.0).sqrt();
        assert!((r0 - 0.5774).abs() < 1e-4);
        assert_eq!(r[0], Resolution::new(1109, 624));
        assert_eq!(
            r[1],
            Resolution::new((1920.0 * (2.0f64 / 3.0).sqrt()).round() as usize, 882)
        );
        assert!(((2.0f64 / 3.0).sqrt() - 0.8165).abs() < 1e-4);
        assert_eq!(r[2], top);
        assert!(level_resolutions(10, &[5, 0, 5], top).is_err());
    }

    #[test]
    fn cyclic_examples() {
        assert_eq!(cyclic_level(0, 3).unwrap(), 0);
        assert_eq!(cyclic_level(1, 3).unwrap(), 1);
        assert_eq!(cyclic_level(2, 3).unwrap(), 0);
        assert_eq!(cyclic_level(7, 3).unwrap(), 1);
        assert!(cyclic_level(3, 1).is_err());
        for start in 0..10 {
            let mut counts = [0; 3];
            for k in start..start + 2 * 3 {
                counts[cyclic_level(k, 4).unwrap()] += 1;
            }
            assert_eq!(counts, [2, 2, 2]);
        }
    }

    #[test]
    fn keyframes() {
        let a = RasterImage::filled(4, 4, [0.3, 0.3, 0.3]);
        let b = RasterImage::filled(4, 4, [0.7, 0.7, 0.7]);
        assert_eq!(
            select_keyframes(std::slice::from_ref(&a), 0.08).unwrap(),
            vec![FrameKind::I]
        );
        let kinds = select_keyframes(&[a.clone(), a.clone(), b.clone(), b.clone()], 0.1).unwrap();
        assert_eq!(kinds, vec![FrameKind::I, FrameKind::P, FrameKind::I, FrameKind::P]);
        assert!(select_keyframes(&[], 0.1).is_err());
    }

    #[test]
    fn iframe_counts_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = init_iframe(&[4000, 4000, 4000], &[800, 1600, 1600], 2.0, &mut rng);
        assert_eq!(f.layer_counts(), vec![4800, 5600, 5600]);
        for s in f.level_view(2).unwrap() {
            assert!((0.0..=1.0).contains(&s.pos[0]) && (0.0..=1.0).contains(&s.pos[1]));
            assert_eq!(s.weight, 1.0);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(f, init_iframe(&[4000, 4000, 4000], &[800, 1600, 1600], 2.0, &mut rng2));
    }

    #[test]
    fn pframe_copies_then_appends() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prev = init_iframe(&[5, 6], &[0, 0], 2.0, &mut rng);
        let same = init_pframe(&prev, &[0, 0], 2.0, &mut rng);
        for (a, b) in prev.layers.iter().zip(&same.layers) {
            assert_eq!(a.splats, b.splats);
        }
        let grown = init_pframe(&prev, &[2, 3], 2.0, &mut rng);
        assert_eq!(grown.layer_counts(), vec![7, 9]);
        assert_eq!(grown.kind, FrameKind::P);
        assert_eq!(grown.layers[1].inherited_count(), 6);
        assert_eq!(grown.layers[1].origin[5], Some(5));
        assert_eq!(grown.layers[1].origin[6], None);
    }

    #[test]
    fn prune_schedule_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut f = init_iframe(&[4000], &[1600], 2.0, &mut rng);
        let sched = GspSchedule {
            interval: 100,
            span: 1000,
        };
        let mut events = 0;
        for k in 0..1200 {
            let before = f.layers[0].len();
            if gsp_prune(&mut f, k, sched, &[1600]).unwrap().is_some() {
                events += 1;
                assert_eq!(before - f.layers[0].len(), 160);
                assert_eq!(k % 100, 0);
            }
        }
        assert_eq!(events, 10);
        assert_eq!(f.layers[0].len(), 4000);
    }

    #[test]
    fn prune_final_event_absorbs_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f = init_iframe(&[10], &[7], 2.0, &mut rng);
        let sched = GspSchedule {
            interval: 100,
            span: 300,
        };
        for k in 0..300 {
            gsp_prune(&mut f, k, sched, &[7]).unwrap();
        }
        assert_eq!(f.layers[0].len(), 10);
    }

    #[test]
    fn prune_skips_off_schedule_and_prefers_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f = init_iframe(&[3], &[2], 2.0, &mut rng);
        f.layers[0].splats[2].weight = 0.0;
        f.layers[0].splats[4].weight = -0.01;
        let sched = GspSchedule { interval: 10, span: 20 };
        assert!(gsp_prune(&mut f, 5, sched, &[2]).unwrap().is_none());
        let masks = gsp_prune(&mut f, 0, sched, &[2]).unwrap().unwrap();
        assert_eq!(masks[0], vec![true, true, false, true, true]);
        let masks = gsp_prune(&mut f, 10, sched, &[2]).unwrap().unwrap();
        assert_eq!(masks[0], vec![true, true, true, false]);
    }

    #[test]
    fn prune_larger_than_layer_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = init_iframe(&[1], &[1], 2.0, &mut rng);
        let sched = GspSchedule { interval: 10, span: 10 };
        assert!(matches!(gsp_prune(&mut f, 0, sched, &[5]), Err(Error::Config(_))));
    }

    #[test]
    fn pruning_view_keeps_largest_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = init_iframe(&[6], &[0], 2.0, &mut rng);
        for (i, s) in f.layers[0].splats.iter_mut().enumerate() {
            s.weight = [0.5, -2.0, 0.1, 1.0, 0.0, 3.0][i];
        }
        let v = pruning_baseline_view(&f, 3).unwrap();
        assert_eq!(v.iter().map(|s| s.weight).collect::<Vec<_>>(), vec![-2.0, 1.0, 3.0]);
        assert_eq!(pruning_baseline_view(&f, 6).unwrap(), f.level_view(0).unwrap());
        assert!(pruning_baseline_view(&f, 0).unwrap().is_empty());
        assert!(pruning_baseline_view(&f, 7).is_err());
    }
}
