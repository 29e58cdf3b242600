use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::{info, warn};
use pgsvc::bitstream::{decode_frames, read_stream, truncate_stream, write_stream, StreamHeader};
use pgsvc::io::{load_png, load_png_dir, load_yuv420, resize_lanczos, save_png, save_yuv420};
use pgsvc::metrics::{rd_table, RdPoint, RdSample};
use pgsvc::quant::{quantize_video, FrameQuantReport};
use pgsvc::raster::Rasterizer;
use pgsvc::splat::ScalabilityMode;
use pgsvc::train::{FrameReport, Trainer};
use pgsvc::{Exec, GaussianVideo, RasterImage};
use serde::Serialize;

use crate::config::{RunConfig, TrainArgs};
use crate::exit::{Fail, Failure, ResultExt, BAD_DIMENSIONS, UNREADABLE_INPUT};

type CmdResult<T> = std::result::Result<T, Failure>;

/// Reads a PNG, a directory of numbered PNGs, or raw YUV 4:2:0 (needs
/// `size`).
pub fn load_frames(path: &Path, size: Option<(usize, usize)>, limit: Option<usize>) -> CmdResult<Vec<RasterImage>> {
    let ctx = || format!("reading {}", path.display());
    if !path.exists() {
        return Err(Failure::new(
            UNREADABLE_INPUT,
            anyhow!("{} does not exist", path.display()),
        ));
    }
    let is_yuv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("yuv"));
    let frames = if path.is_dir() {
        load_png_dir(path, limit).input(ctx)?
    } else if is_yuv {
        let (w, h) = size.ok_or_else(|| Failure::new(BAD_DIMENSIONS, anyhow!("raw YUV input needs --size WxH")))?;
        load_yuv420(path, w, h, limit).input(ctx)?
    } else {
        vec![load_png(path).input(ctx)?]
    };
    if frames.is_empty() {
        return Err(Failure::new(
            UNREADABLE_INPUT,
            anyhow!("{} holds no frames", path.display()),
        ));
    }
    Ok(frames)
}

#[derive(Serialize)]
struct EncodeReport<'a> {
    config: &'a RunConfig,
    input: String,
    output: String,
    frames: usize,
    width: usize,
    height: usize,
    level_resolutions: Vec<(usize, usize)>,
    stream_bytes: usize,
    /// Size of the stream truncated after each level.
    level_bytes: Vec<usize>,
    training: Vec<FrameReport>,
    quantization: Vec<FrameQuantReport>,
    wall_secs: f64,
}

/// Report path for an output file: `<output>.json`.
pub fn report_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Trains, quantizes and serializes `frames`.
fn encode_frames(
    cfg: &RunConfig,
    frames: &[RasterImage],
) -> CmdResult<(Vec<u8>, Vec<FrameReport>, Vec<FrameQuantReport>)> {
    let mut trainer = Trainer::new(cfg.codec.clone());
    if let Some(p) = &cfg.run.train_log {
        let f = fs::File::create(p)
            .with_context(|| format!("creating {}", p.display()))
            .fail()?;
        trainer = trainer.with_log(Box::new(std::io::BufWriter::new(f)));
    }
    let (video, training) = trainer.encode_sequence(frames, cfg.run.seed).core()?;
    for r in &training {
        info!(
            "frame {} ({:?}): {} iterations, converged {}, level PSNR {:?}",
            r.frame, r.kind, r.iterations, r.converged, r.level_psnr
        );
    }
    let (bytes, quant) = quantize_and_write(cfg, &video, frames, &trainer.rasterizer)?;
    Ok((bytes, training, quant))
}

fn quantize_and_write(
    cfg: &RunConfig,
    video: &GaussianVideo,
    frames: &[RasterImage],
    rasterizer: &Rasterizer,
) -> CmdResult<(Vec<u8>, Vec<FrameQuantReport>)> {
    let (q, reports) = quantize_video(video, Some(frames), &cfg.quant, cfg.run.seed, rasterizer).core()?;
    for r in &reports {
        if r.warnings.f16_overflows + r.warnings.f12_overflows > 0 {
            warn!("frame {}: reduced-precision overflow {:?}", r.frame, r.warnings);
        }
        if r.rolled_back {
            info!("frame {}: fine-tuning rolled back", r.frame);
        }
    }
    let bytes = write_stream(&q).core()?;
    // Only report success for a stream that parses back.
    read_stream(&bytes, None).core()?;
    Ok((bytes, reports))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .fail()
}

fn level_bytes(bytes: &[u8]) -> CmdResult<Vec<usize>> {
    let layers = StreamHeader::parse(bytes).core()?.num_layers();
    (0..layers)
        .map(|l| truncate_stream(bytes, l).map(|b| b.len()).core())
        .collect()
}

pub fn encode(input: Option<PathBuf>, output: Option<PathBuf>, args: &TrainArgs) -> CmdResult<()> {
    let start = Instant::now();
    let mut cfg = RunConfig::resolve(args).fail()?;
    let input = input
        .or(cfg.run.input.clone())
        .ok_or_else(|| Failure::generic(anyhow!("no input given")))?;
    let output = output
        .or(cfg.run.output.clone())
        .ok_or_else(|| Failure::generic(anyhow!("no output given")))?;
    cfg.run.input = Some(input.clone());
    cfg.run.output = Some(output.clone());
    let frames = load_frames(&input, args.size, cfg.run.frames)?;
    info!(
        "encoding {} frame(s) of {}x{}",
        frames.len(),
        frames[0].width,
        frames[0].height
    );
    let (bytes, training, quantization) = encode_frames(&cfg, &frames)?;
    fs::write(&output, &bytes)
        .with_context(|| format!("writing {}", output.display()))
        .fail()?;
    let header = StreamHeader::parse(&bytes).core()?;
    let report = EncodeReport {
        config: &cfg,
        input: input.display().to_string(),
        output: output.display().to_string(),
        frames: frames.len(),
        width: header.width,
        height: header.height,
        level_resolutions: header.level_resolutions.iter().map(|r| (r.width, r.height)).collect(),
        stream_bytes: bytes.len(),
        level_bytes: level_bytes(&bytes)?,
        training,
        quantization,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    write_json(&report, &report_path(&output))?;
    info!("wrote {} bytes to {}", bytes.len(), output.display());
    Ok(())
}

fn read_bytes(path: &Path) -> CmdResult<Vec<u8>> {
    fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(|e| Failure::new(UNREADABLE_INPUT, e))
}

/// Writes frames as raw YUV (`.yuv`), a single PNG, numbered PNG siblings
/// (`name_0000.png`, ...), or numbered PNGs inside a directory.
fn save_frames(frames: &[RasterImage], output: &Path) -> CmdResult<Vec<PathBuf>> {
    let ext = output.extension().map(|e| e.to_ascii_lowercase());
    let ctx = || format!("writing {}", output.display());
    match ext.as_ref().and_then(|e| e.to_str()) {
        Some("yuv") => {
            save_yuv420(frames, output)
                .map_err(anyhow::Error::from)
                .with_context(ctx)
                .fail()?;
            Ok(vec![output.to_path_buf()])
        }
        Some("png") if frames.len() == 1 => {
            save_png(&frames[0], output)
                .map_err(anyhow::Error::from)
                .with_context(ctx)
                .fail()?;
            Ok(vec![output.to_path_buf()])
        }
        Some("png") => {
            let stem = output.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let dir = output.parent().unwrap_or(Path::new(""));
            write_numbered(frames, |t| dir.join(format!("{stem}_{t:04}.png")))
        }
        _ => {
            fs::create_dir_all(output).with_context(ctx).fail()?;
            write_numbered(frames, |t| output.join(format!("frame_{t:04}.png")))
        }
    }
}

fn write_numbered(frames: &[RasterImage], name: impl Fn(usize) -> PathBuf) -> CmdResult<Vec<PathBuf>> {
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let p = name(t);
            save_png(f, &p)
                .map_err(anyhow::Error::from)
                .with_context(|| format!("writing {}", p.display()))
                .fail()?;
            Ok(p)
        })
        .collect()
}

pub fn decode(stream: &Path, level: Option<usize>, output: &Path) -> CmdResult<()> {
    let bytes = read_bytes(stream)?;
    let frames = decode_frames(&bytes, level, &Rasterizer::default()).core()?;
    let written = save_frames(&frames, output)?;
    info!("decoded {} frame(s) into {} file(s)", frames.len(), written.len());
    Ok(())
}

pub fn truncate(stream: &Path, level: usize, output: &Path) -> CmdResult<()> {
    let bytes = read_bytes(stream)?;
    let cut = truncate_stream(&bytes, level).core()?;
    read_stream(&cut, None).core()?;
    fs::write(output, &cut)
        .with_context(|| format!("writing {}", output.display()))
        .fail()?;
    info!("kept {} of {} bytes", cut.len(), bytes.len());
    Ok(())
}

/// Ground truth for `level` of a stream: the reference itself in quality
/// mode, Lanczos-resampled to the level size in resolution mode.
fn level_references(header: &StreamHeader, level: usize, refs: &[RasterImage]) -> Vec<RasterImage> {
    match header.mode {
        ScalabilityMode::Quality => refs.to_vec(),
        ScalabilityMode::Resolution => {
            let r = header.level_resolutions[level];
            refs.iter().map(|f| resize_lanczos(f, r.width, r.height)).collect()
        }
    }
}

/// Decodes `levels` of `bytes` and scores them against `refs`. `bytes` of
/// each row is the size of the stream truncated after that level.
pub fn evaluate_stream(bytes: &[u8], levels: &[usize], refs: &[RasterImage], budget: usize) -> CmdResult<Vec<RdPoint>> {
    let header = StreamHeader::parse(bytes).core()?;
    if refs.len() != header.num_frames() {
        return Err(Failure::new(
            BAD_DIMENSIONS,
            anyhow!(
                "reference has {} frame(s), stream has {}",
                refs.len(),
                header.num_frames()
            ),
        ));
    }
    if refs.iter().any(|r| r.dims() != (header.width, header.height)) {
        return Err(Failure::new(
            BAD_DIMENSIONS,
            anyhow!(
                "reference size differs from the {}x{} stream canvas",
                header.width,
                header.height
            ),
        ));
    }
    let rasterizer = Rasterizer::default();
    let mut samples = Vec::with_capacity(levels.len());
    for &level in levels {
        let cut = truncate_stream(bytes, level).core()?;
        let renders = decode_frames(&cut, Some(level), &rasterizer).core()?;
        samples.push(RdSample {
            budget,
            level,
            bytes: cut.len() as u64,
            renders,
            targets: level_references(&header, level, refs),
        });
    }
    rd_table(&samples, Exec::default()).core()
}

pub fn eval(stream: &Path, reference: &Path, levels: Option<Vec<usize>>, output: Option<&Path>) -> CmdResult<()> {
    let bytes = read_bytes(stream)?;
    let header = StreamHeader::parse(&bytes).core()?;
    let refs = load_frames(reference, Some((header.width, header.height)), None)?;
    let levels = levels.unwrap_or_else(|| (0..header.num_layers()).collect());
    let q = read_stream(&bytes, None).core()?;
    // Splats through each level in the first frame, summed over layers.
    let budget = q.frames[0].layers.iter().map(|l| l.len()).sum();
    let rows = evaluate_stream(&bytes, &levels, &refs, budget)?;
    write_csv(&rows, output)
}

fn write_csv<T: Serialize>(rows: &[T], output: Option<&Path>) -> CmdResult<()> {
    let sink: Box<dyn Write> = match output {
        Some(p) => Box::new(
            fs::File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .fail()?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r).context("writing CSV").fail()?;
    }
    w.flush().context("writing CSV").fail()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Sequential,
    Monolithic,
}

#[derive(Debug, Clone, Serialize)]
struct RdRow {
    method: &'static str,
    budget: usize,
    level: usize,
    bytes: Option<u64>,
    psnr_db: Option<f64>,
    ms_ssim: Option<f64>,
    frames: usize,
    status: String,
}

impl RdRow {
    fn ok(method: &'static str, p: &RdPoint) -> Self {
        Self {
            method,
            budget: p.budget,
            level: p.level,
            bytes: Some(p.bytes),
            psnr_db: Some(p.psnr_db),
            ms_ssim: Some(p.ms_ssim),
            frames: p.frames,
            status: "ok".into(),
        }
    }

    fn failed(method: &'static str, budget: usize, level: usize, frames: usize, err: &Failure) -> Self {
        Self {
            method,
            budget,
            level,
            bytes: None,
            psnr_db: None,
            ms_ssim: None,
            frames,
            status: format!("failed: {}", err.message()),
        }
    }
}

fn layered_run(cfg: &RunConfig, frames: &[RasterImage], sequential: bool) -> CmdResult<Vec<RdPoint>> {
    let mut trainer = Trainer::new(cfg.codec.clone());
    let (video, _) = if sequential {
        trainer.train_sequential_baseline(frames, cfg.run.seed)
    } else {
        trainer.encode_sequence(frames, cfg.run.seed)
    }
    .core()?;
    let (bytes, _) = quantize_and_write(cfg, &video, frames, &trainer.rasterizer)?;
    let levels: Vec<usize> = (0..cfg.codec.num_layers).collect();
    evaluate_stream(&bytes, &levels, frames, cfg.codec.total_budget)
}

fn monolithic_run(cfg: &RunConfig, frames: &[RasterImage]) -> CmdResult<Vec<RdPoint>> {
    let mut trainer = Trainer::new(cfg.codec.clone());
    let models = trainer.train_monolithic_baseline(frames, cfg.run.seed).core()?;
    let mut out = Vec::with_capacity(models.len());
    for (level, (video, _)) in models.iter().enumerate() {
        let refs: Vec<RasterImage> = frames
            .iter()
            .map(|f| resize_lanczos(f, video.width, video.height))
            .collect();
        let (bytes, _) = quantize_and_write(cfg, video, &refs, &trainer.rasterizer)?;
        let mut rows = evaluate_stream(&bytes, &[0], &refs, cfg.codec.total_budget)?;
        for r in &mut rows {
            r.level = level;
        }
        out.extend(rows);
    }
    Ok(out)
}

/// Gnuplot data file per method and level: `budget bytes psnr ms_ssim`.
fn write_dat_files(rows: &[RdRow], dir: &Path, stem: &str) -> CmdResult<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .fail()?;
    let mut keys: Vec<(&str, usize)> = rows.iter().map(|r| (r.method, r.level)).collect();
    keys.sort();
    keys.dedup();
    for (method, level) in keys {
        let path = dir.join(format!("{stem}_{method}_level{level}.dat"));
        let mut text = String::from("# budget bytes psnr_db ms_ssim\n");
        for r in rows.iter().filter(|r| r.method == method && r.level == level) {
            if let (Some(b), Some(p), Some(m)) = (r.bytes, r.psnr_db, r.ms_ssim) {
                text.push_str(&format!("{} {} {:.6} {:.6}\n", r.budget, b, p, m));
            }
        }
        fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
            .fail()?;
    }
    Ok(())
}

pub fn rd_curve(
    input: &Path,
    budgets: &[usize],
    baselines: &[Baseline],
    output: &Path,
    dat_dir: Option<PathBuf>,
    args: &TrainArgs,
) -> CmdResult<()> {
    let cfg = RunConfig::resolve(args).fail()?;
    if budgets.is_empty() {
        return Err(Failure::generic(anyhow!("no budgets given")));
    }
    let frames = load_frames(input, args.size, cfg.run.frames)?;
    let mut methods: Vec<(&'static str, Option<Baseline>)> = vec![("pgsvc", None)];
    let mut seen = Vec::new();
    for &b in baselines {
        if !seen.contains(&b) {
            seen.push(b);
            methods.push((
                if b == Baseline::Sequential {
                    "sequential"
                } else {
                    "monolithic"
                },
                Some(b),
            ));
        }
    }
    let mut rows = Vec::new();
    let mut failures = 0;
    for &budget in budgets {
        let mut run_cfg = cfg.clone();
        run_cfg.codec.total_budget = budget;
        for &(method, baseline) in &methods {
            info!("rd-curve: {method} at budget {budget}");
            let result = run_cfg.validate().fail().and_then(|_| match baseline {
                None => layered_run(&run_cfg, &frames, false),
                Some(Baseline::Sequential) => layered_run(&run_cfg, &frames, true),
                Some(Baseline::Monolithic) => monolithic_run(&run_cfg, &frames),
            });
            match result {
                Ok(points) => rows.extend(points.iter().map(|p| RdRow::ok(method, p))),
                Err(e) => {
                    warn!("rd-curve: {method} at budget {budget} failed: {}", e.message());
                    failures += 1;
                    rows.extend((0..cfg.codec.num_layers).map(|l| RdRow::failed(method, budget, l, frames.len(), &e)));
                }
            }
        }
    }
    write_csv(&rows, Some(output))?;
    let stem = output.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let dir = dat_dir.unwrap_or_else(|| output.parent().unwrap_or(Path::new(".")).to_path_buf());
    write_dat_files(&rows, &dir, &stem)?;
    if failures > 0 {
        return Err(Failure::generic(anyhow!(
            "{failures} sweep cell(s) failed; see the status column"
        )));
    }
    Ok(())
}
