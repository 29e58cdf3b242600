//! Frame ingestion and export: PNG files, numbered PNG directories and raw
//! 8-bit YUV 4:2:0 (BT.601 full range), plus resampling helpers.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub fn to_rgb32f(img: &RasterImage) -> Rgb32FImage {
    Rgb32FImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("buffer length matches dimensions")
}

pub fn from_rgb32f(img: &Rgb32FImage) -> RasterImage {
    RasterImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().clone(),
    }
}

/// Lanczos-3 resampling. Returns a copy when the size is unchanged.
pub fn resize_lanczos(img: &RasterImage, width: usize, height: usize) -> RasterImage {
    if img.dims() == (width, height) {
        return img.clone();
    }
    let out = imageops::resize(&to_rgb32f(img), width as u32, height as u32, FilterType::Lanczos3);
    from_rgb32f(&out)
}

/// Averages `factor × factor` blocks. Dimensions must be multiples of
/// `factor`.
pub fn box_downsample(img: &RasterImage, factor: usize) -> RasterImage {
    let (w, h) = (img.width / factor, img.height / factor);
    let norm = 1.0 / (factor * factor) as f64;
    RasterImage::from_fn(w, h, |x, y| {
        let mut acc = [0f64; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = img.pixel(x * factor + dx, y * factor + dy);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
            }
        }
        acc.map(|v| (v * norm) as f32)
    })
}

pub fn load_png(path: &Path) -> Result<RasterImage> {
    let img = image::open(path)?.to_rgb32f();
    Ok(from_rgb32f(&img))
}

/// Writes an 8-bit PNG after clamping to `[0, 1]`.
pub fn save_png(img: &RasterImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    let out = RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer length matches dimensions");
    out.save(path)?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads every `*.png` in `dir`, ordered by the digits in the file name.
pub fn load_png_dir(dir: &Path, limit: Option<usize>) -> Result<Vec<RasterImage>> {
    let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| {
            let digits: String = p
                .file_stem()
                .map(|s| s.to_string_lossy().chars().filter(char::is_ascii_digit).collect())
                .unwrap_or_default();
            (digits.parse().unwrap_or(u64::MAX), p)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no PNG files in {}", dir.display())));
    }
    let n = limit.unwrap_or(usize::MAX).min(files.len());
    let frames: Vec<RasterImage> = files[..n].iter().map(|(_, p)| load_png(p)).collect::<Result<_>>()?;
    if frames.iter().any(|f| f.dims() != frames[0].dims()) {
        return Err(Error::RejectedInput("frames differ in size".into()));
    }
    Ok(frames)
}

/// BT.601 full-range YCbCr to RGB, all channels in `[0, 255]` scale.
pub fn ycbcr_to_rgb(y: f32, cb: f32, cr: f32) -> [f32; 3] {
    let (u, v) = (cb - 128.0, cr - 128.0);
    [y + 1.402 * v, y - 0.344_136 * u - 0.714_136 * v, y + 1.772 * u]
}

pub fn rgb_to_ycbcr(rgb: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = rgb;
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0,
        0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0,
    ]
}

fn chroma_dims(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(2), height.div_ceil(2))
}

pub fn yuv420_frame_size(width: usize, height: usize) -> usize {
    let (cw, ch) = chroma_dims(width, height);
    width * height + 2 * cw * ch
}

/// Reads raw planar 8-bit 4:2:0 frames and converts them to RGB in `[0, 1]`.
pub fn load_yuv420(path: &Path, width: usize, height: usize, limit: Option<usize>) -> Result<Vec<RasterImage>> {
    if width == 0 || height == 0 {
        return Err(Error::RejectedInput("YUV size must be positive".into()));
    }
    let raw = fs::read(path)?;
    let fsize = yuv420_frame_size(width, height);
    if raw.len() < fsize || raw.len() % fsize != 0 {
        return Err(Error::RejectedInput(format!(
            "{} bytes is not a whole number of {width}x{height} 4:2:0 frames",
            raw.len()
        )));
    }
    let (cw, ch) = chroma_dims(width, height);
    let n = (raw.len() / fsize).min(limit.unwrap_or(usize::MAX));
    Ok((0..n)
        .map(|t| {
            let f = &raw[t * fsize..(t + 1) * fsize];
            let (yp, rest) = f.split_at(width * height);
            let (up, vp) = rest.split_at(cw * ch);
            RasterImage::from_fn(width, height, |x, y| {
                let ci = (y / 2) * cw + x / 2;
                ycbcr_to_rgb(yp[y * width + x] as f32, up[ci] as f32, vp[ci] as f32)
                    .map(|v| (v / 255.0).clamp(0.0, 1.0))
            })
        })
        .collect())
}

/// Writes frames as raw planar 8-bit 4:2:0 with 2×2 chroma averaging.
pub fn save_yuv420(frames: &[RasterImage], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for img in frames {
        let (w, h) = img.dims();
        let (cw, ch) = chroma_dims(w, h);
        let ycc: Vec<[f32; 3]> = (0..w * h)
            .map(|i| {
                let p = img.pixel(i % w, i / w);
                rgb_to_ycbcr(p.map(|v| v.clamp(0.0, 1.0) * 255.0))
            })
            .collect();
        out.extend(ycc.iter().map(|p| p[0].round().clamp(0.0, 255.0) as u8));
        for c in 1..3 {
            for cy in 0..ch {
                for cx in 0..cw {
                    let mut acc = 0f32;
                    let mut n = 0f32;
                    for y in cy * 2..(cy * 2 + 2).min(h) {
                        for x in cx * 2..(cx * 2 + 2).min(w) {
                            acc += ycc[y * w + x][c];
                            n += 1.0;
                        }
                    }
                    out.push((acc / n).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ycbcr_round_trip() {
        for rgb in [[0.0, 0.0, 0.0], [255.0, 255.0, 255.0], [200.0, 30.0, 90.0]] {
            let back = ycbcr_to_rgb_arr(rgb_to_ycbcr(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 0.05, "{rgb:?} -> {back:?}");
            }
        }
    }

    fn ycbcr_to_rgb_arr(p: [f32; 3]) -> [f32; 3] {
        ycbcr_to_rgb(p[0], p[1], p[2])
    }

    #[test]
    fn yuv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.yuv");
        let frames: Vec<_> = (0..3)
            .map(|t| {
                RasterImage::from_fn(6, 4, |x, y| {
                    [0.5, 0.2 + 0.05 * t as f32, (x + y) as f32 / 10.0 * 0.0 + 0.4]
                })
            })
            .collect();
        save_yuv420(&frames, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, 3 * yuv420_frame_size(6, 4));
        let back = load_yuv420(&path, 6, 4, Some(2)).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[1].max_abs_diff(&frames[1]) < 0.02);
        assert!(load_yuv420(&path, 5, 5, None).is_err());
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RasterImage::from_fn(5, 3, |x, y| [x as f32 / 4.0, y as f32 / 2.0, 1.5]);
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        assert!(back.max_abs_diff(&img.clamped()) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn box_downsample_averages() {
        let img = RasterImage::from_fn(4, 2, |x, _| [x as f32, 0.0, 1.0]);
        let d = box_downsample(&img, 2);
        assert_eq!(d.dims(), (2, 1));
        assert_eq!(d.pixel(0, 0), [0.5, 0.0, 1.0]);
        assert_eq!(d.pixel(1, 0), [2.5, 0.0, 1.0]);
    }

    #[test]
    fn lanczos_preserves_constants() {
        let img = RasterImage::filled(20, 12, [0.25, 0.5, 0.75]);
        let d = resize_lanczos(&img, 11, 7);
        assert_eq!(d.dims(), (11, 7));
        assert!(d.max_abs_diff(&RasterImage::filled(11, 7, [0.25, 0.5, 0.75])) < 1e-4);
    }
}
