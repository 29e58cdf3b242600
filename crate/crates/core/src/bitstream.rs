//! The `.pgsv` container.
//!
//! A header with a chunk table is followed by one chunk per (layer, frame),
//! ordered layer-major: every frame's base layer first, then every frame's
//! first enhancement layer, and so on. Cutting the stream after layer `ℓ`
//! only drops chunks and rewrites the table. See `docs/FORMAT.md` for the
//! byte layout.

use crate::error::{Error, Result};
use crate::par::{map_ordered, Exec};
use crate::quant::{
    dequantize_video, AsymParams, CholBlock, Codebooks, QuantizedFrame, QuantizedLayer, QuantizedVideo,
};
use crate::raster::{RasterImage, Rasterizer, Target};
use crate::splat::{FrameKind, GaussianVideo, Resolution, ScalabilityMode};
use crate::wire::{packed_len, BitReader, BitWriter, ByteReader, ByteWriter};

pub const MAGIC: &[u8; 4] = b"PGSB";
pub const VERSION: u16 = 1;

/// Location of one chunk inside the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkEntry {
    pub offset: u64,
    pub length: u32,
}

/// Parsed stream header.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub width: usize,
    pub height: usize,
    pub mode: ScalabilityMode,
    pub level_resolutions: Vec<Resolution>,
    pub vq_stages: usize,
    pub codebook_bits: u8,
    pub kinds: Vec<FrameKind>,
    /// `chunks[ℓ][t]`.
    pub chunks: Vec<Vec<ChunkEntry>>,
}

impl StreamHeader {
    pub fn num_layers(&self) -> usize {
        self.level_resolutions.len()
    }

    pub fn num_frames(&self) -> usize {
        self.kinds.len()
    }

    /// Header size in bytes for the given shape.
    pub fn encoded_len(layers: usize, frames: usize) -> usize {
        4 + 2 + 4 + 4 + 4 + 1 + 1 + 8 * layers + 1 + 1 + frames + 12 * layers * frames
    }

    fn write(&self, w: &mut ByteWriter) {
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.width as u32);
        w.u32(self.height as u32);
        w.u32(self.kinds.len() as u32);
        w.u8(self.level_resolutions.len() as u8);
        w.u8(self.mode.code());
        for r in &self.level_resolutions {
            w.u32(r.width as u32);
            w.u32(r.height as u32);
        }
        w.u8(self.vq_stages as u8);
        w.u8(self.codebook_bits);
        for k in &self.kinds {
            w.u8(k.code());
        }
        for layer in &self.chunks {
            for c in layer {
                w.u64(c.offset);
                w.u32(c.length);
            }
        }
    }

    /// Parses and validates the header. Chunk bounds are checked only when
    /// a chunk is read, so streams cut short after a layer still parse.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r
            .take(4)
            .map_err(|_| Error::Format("stream shorter than its magic".into()))?;
        if magic != MAGIC {
            return Err(Error::Format("not a .pgsv stream (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported stream version {version}")));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let frames = r.u32()? as usize;
        let layers = r.u8()? as usize;
        let mode = ScalabilityMode::from_code(r.u8()?)?;
        if width == 0 || height == 0 || layers == 0 {
            return Err(Error::Format("empty canvas or no layers".into()));
        }
        let mut level_resolutions = Vec::with_capacity(layers);
        for _ in 0..layers {
            let w = r.u32()? as usize;
            let h = r.u32()? as usize;
            if w == 0 || h == 0 {
                return Err(Error::Format("zero level resolution".into()));
            }
            level_resolutions.push(Resolution::new(w, h));
        }
        let vq_stages = r.u8()? as usize;
        let codebook_bits = r.u8()?;
        if vq_stages == 0 || !(1..=16).contains(&codebook_bits) {
            return Err(Error::Format("invalid codebook shape".into()));
        }
        let kinds = r
            .take(frames)?
            .iter()
            .map(|&c| FrameKind::from_code(c))
            .collect::<Result<Vec<_>>>()?;
        if kinds.first() == Some(&FrameKind::P) {
            return Err(Error::Format("first frame must be an I-frame".into()));
        }
        let table_end = Self::encoded_len(layers, frames) as u64;
        let mut chunks = Vec::with_capacity(layers);
        let mut prev_end = table_end;
        for _ in 0..layers {
            let mut row = Vec::with_capacity(frames);
            for _ in 0..frames {
                let c = ChunkEntry {
                    offset: r.u64()?,
                    length: r.u32()?,
                };
                if c.offset < prev_end {
                    return Err(Error::Format("chunk offsets must increase".into()));
                }
                prev_end = c.offset + c.length as u64;
                row.push(c);
            }
            chunks.push(row);
        }
        Ok(Self {
            width,
            height,
            mode,
            level_resolutions,
            vq_stages,
            codebook_bits,
            kinds,
            chunks,
        })
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_chol(w: &mut ByteWriter, block: &CholBlock) -> Result<()> {
    for p in &block.params {
        w.f32(p.gamma);
        w.f32(p.beta);
        w.u8(p.bits);
        w.u8(p.signed as u8);
    }
    let mut bits = BitWriter::new();
    for codes in &block.codes {
        for (c, p) in codes.iter().zip(&block.params) {
            let (lo, hi) = p.range();
            if !(lo..=hi).contains(c) {
                return Err(format_err(format!("code {c} outside [{lo}, {hi}]")));
            }
            bits.put((c - lo) as u32, p.bits as u32);
        }
    }
    w.bytes(&bits.finish());
    Ok(())
}

fn read_chol(r: &mut ByteReader, count: usize) -> Result<CholBlock> {
    let mut params = [AsymParams {
        gamma: 0.0,
        beta: 0.0,
        bits: 2,
        signed: false,
    }; 3];
    for p in &mut params {
        p.gamma = r.f32()?;
        p.beta = r.f32()?;
        p.bits = r.u8()?;
        p.signed = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(format_err(format!("bad signedness flag {v}"))),
        };
        if !(2..=16).contains(&p.bits) || !p.gamma.is_finite() || !p.beta.is_finite() {
            return Err(format_err("invalid quantization parameters"));
        }
    }
    let total_bits: u32 = params.iter().map(|p| p.bits as u32).sum();
    let data = r.take(packed_len(count, total_bits))?;
    let mut bits = BitReader::new(data);
    let mut codes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut c = [0i32; 3];
        for (v, p) in c.iter_mut().zip(&params) {
            *v = bits.get(p.bits as u32)? as i32 + p.range().0;
        }
        codes.push(c);
    }
    Ok(CholBlock { params, codes })
}

fn write_chunk(w: &mut ByteWriter, frame: &QuantizedFrame, layer: usize, codebook_bits: u8) -> Result<()> {
    let q = &frame.layers[layer];
    let stages = frame.codebooks.num_stages();
    w.u8(frame.kind.code());
    w.u32(q.delta_pos.len() as u32);
    w.u32(q.abs_pos.len() as u32);
    match frame.kind {
        FrameKind::P => {
            if q.inherited.iter().filter(|&&b| b).count() != q.delta_pos.len() {
                return Err(format_err("inheritance mask disagrees with the delta count"));
            }
            w.u32(q.inherited.len() as u32);
            let mut bits = BitWriter::new();
            for &b in &q.inherited {
                bits.put(b as u32, 1);
            }
            w.bytes(&bits.finish());
        }
        FrameKind::I => {
            if !q.delta_pos.is_empty() || !q.inherited.is_empty() {
                return Err(format_err("I-frame layer with inherited splats"));
            }
        }
    }
    let mut bits = BitWriter::new();
    for p in q.delta_pos.iter().flatten() {
        bits.put(*p as u32 & 0x0FFF, 12);
    }
    w.bytes(&bits.finish());
    for p in q.abs_pos.iter().flatten() {
        w.u16(*p);
    }
    for (block, n) in [(&q.delta_chol, q.delta_pos.len()), (&q.abs_chol, q.abs_pos.len())] {
        match block {
            Some(b) if b.codes.len() == n && n > 0 => write_chol(w, b)?,
            None if n == 0 => {}
            _ => return Err(format_err("Cholesky block disagrees with the splat count")),
        }
    }
    if q.color_indices.len() != q.len() * stages {
        return Err(format_err("color index count mismatch"));
    }
    let mut bits = BitWriter::new();
    for &i in &q.color_indices {
        if i as usize >= 1usize << codebook_bits {
            return Err(format_err(format!("codebook index {i} out of range")));
        }
        bits.put(i as u32, codebook_bits as u32);
    }
    w.bytes(&bits.finish());
    if layer == 0 {
        for book in &frame.codebooks.stages {
            for c in book {
                for v in c {
                    w.f32(*v);
                }
            }
        }
    }
    Ok(())
}

fn read_chunk(
    data: &[u8],
    header: &StreamHeader,
    frame: usize,
    layer: usize,
) -> Result<(QuantizedLayer, Option<Codebooks>)> {
    let mut r = ByteReader::new(data);
    let kind = FrameKind::from_code(r.u8()?)?;
    if kind != header.kinds[frame] {
        return Err(Error::CorruptStream(format!(
            "frame {frame} kind disagrees with header"
        )));
    }
    let n_delta = r.u32()? as usize;
    let n_abs = r.u32()? as usize;
    let stages = header.vq_stages;
    let size = 1usize << header.codebook_bits;
    let mut q = QuantizedLayer::default();
    if kind == FrameKind::P {
        let ref_len = r.u32()? as usize;
        let mask = r.take(packed_len(ref_len, 1))?;
        let mut bits = BitReader::new(mask);
        q.inherited = (0..ref_len)
            .map(|_| bits.get(1).map(|b| b == 1))
            .collect::<Result<_>>()?;
        if q.inherited.iter().filter(|&&b| b).count() != n_delta {
            return Err(Error::CorruptStream(
                "inheritance mask disagrees with the delta count".into(),
            ));
        }
    } else if n_delta != 0 {
        return Err(Error::CorruptStream("I-frame layer with inherited splats".into()));
    }
    let mut bits = BitReader::new(r.take(packed_len(2 * n_delta, 12))?);
    for _ in 0..n_delta {
        q.delta_pos.push([bits.get(12)? as u16, bits.get(12)? as u16]);
    }
    for _ in 0..n_abs {
        q.abs_pos.push([r.u16()?, r.u16()?]);
    }
    if n_delta > 0 {
        q.delta_chol = Some(read_chol(&mut r, n_delta)?);
    }
    if n_abs > 0 {
        q.abs_chol = Some(read_chol(&mut r, n_abs)?);
    }
    let count = (n_delta + n_abs) * stages;
    let mut bits = BitReader::new(r.take(packed_len(count, header.codebook_bits as u32))?);
    q.color_indices = (0..count)
        .map(|_| bits.get(header.codebook_bits as u32).map(|v| v as u16))
        .collect::<Result<_>>()?;
    let codebooks = if layer == 0 {
        let mut books = Codebooks::zeros(stages, size);
        for book in &mut books.stages {
            for c in book.iter_mut() {
                *c = [r.f32()?, r.f32()?, r.f32()?];
            }
        }
        Some(books)
    } else {
        None
    };
    if r.position() != data.len() {
        return Err(Error::CorruptStream(format!(
            "chunk ({frame}, {layer}) has {} trailing bytes",
            data.len() - r.position()
        )));
    }
    Ok((q, codebooks))
}

/// Serializes a quantized video. Output is a pure function of the input.
pub fn write_stream(video: &QuantizedVideo) -> Result<Vec<u8>> {
    let layers = video.num_layers();
    let frames = video.frames.len();
    if layers == 0 || layers > 255 {
        return Err(format_err("layer count must be in [1, 255]"));
    }
    let first = video.frames.first().ok_or_else(|| Error::Empty("no frames".into()))?;
    if first.kind != FrameKind::I {
        return Err(format_err("first frame must be an I-frame"));
    }
    let stages = first.codebooks.num_stages();
    let size = first.codebooks.size();
    if stages == 0 || stages > 255 || !size.is_power_of_two() || size > 1 << 16 {
        return Err(format_err("codebooks must have 1..=255 stages of 2^b entries"));
    }
    let codebook_bits = size.trailing_zeros() as u8;
    let codebook_bits = codebook_bits.max(1);
    for f in &video.frames {
        if f.layers.len() != layers {
            return Err(format_err("frames disagree on layer count"));
        }
        if f.codebooks.num_stages() != stages || f.codebooks.size() != size {
            return Err(format_err("frames disagree on codebook shape"));
        }
    }
    let mut bodies = Vec::with_capacity(layers * frames);
    for l in 0..layers {
        for f in &video.frames {
            let mut w = ByteWriter::new();
            write_chunk(&mut w, f, l, codebook_bits)?;
            bodies.push(w.buf);
        }
    }
    let mut offset = StreamHeader::encoded_len(layers, frames) as u64;
    let mut chunks = vec![Vec::with_capacity(frames); layers];
    for (i, body) in bodies.iter().enumerate() {
        chunks[i / frames].push(ChunkEntry {
            offset,
            length: body.len() as u32,
        });
        offset += body.len() as u64;
    }
    let header = StreamHeader {
        width: video.width,
        height: video.height,
        mode: video.mode,
        level_resolutions: video.level_resolutions.clone(),
        vq_stages: stages,
        codebook_bits,
        kinds: video.frames.iter().map(|f| f.kind).collect(),
        chunks,
    };
    let mut w = ByteWriter::new();
    header.write(&mut w);
    for b in bodies {
        w.bytes(&b);
    }
    Ok(w.buf)
}

fn check_level(header: &StreamHeader, level: usize) -> Result<()> {
    if level >= header.num_layers() {
        return Err(format_err(format!(
            "level {level} requested from a stream with {} layers",
            header.num_layers()
        )));
    }
    Ok(())
}

fn chunk_bytes(bytes: &[u8], c: ChunkEntry) -> Result<&[u8]> {
    let start = c.offset as usize;
    let end = start + c.length as usize;
    if end > bytes.len() {
        return Err(Error::Truncated {
            offset: start,
            needed: c.length as usize,
            available: bytes.len().saturating_sub(start),
        });
    }
    Ok(&bytes[start..end])
}

/// Parses layers `0..=max_level` (all layers when `None`). Chunks of higher
/// layers are never touched, so they may be missing from `bytes`.
pub fn read_stream(bytes: &[u8], max_level: Option<usize>) -> Result<QuantizedVideo> {
    let header = StreamHeader::parse(bytes)?;
    let level = max_level.unwrap_or(header.num_layers() - 1);
    check_level(&header, level)?;
    let mut frames: Vec<QuantizedFrame> = header
        .kinds
        .iter()
        .map(|&kind| QuantizedFrame {
            kind,
            layers: Vec::with_capacity(level + 1),
            codebooks: Codebooks::zeros(0, 0),
        })
        .collect();
    for l in 0..=level {
        for (t, frame) in frames.iter_mut().enumerate() {
            let data = chunk_bytes(bytes, header.chunks[l][t])?;
            let (q, books) = read_chunk(data, &header, t, l)?;
            frame.layers.push(q);
            if let Some(b) = books {
                frame.codebooks = b;
            }
        }
    }
    Ok(QuantizedVideo {
        width: header.width,
        height: header.height,
        level_resolutions: header.level_resolutions[..=level].to_vec(),
        mode: header.mode,
        frames,
    })
}

/// Drops every chunk above `level` and rewrites the header. Chunk bodies
/// are copied verbatim.
pub fn truncate_stream(bytes: &[u8], level: usize) -> Result<Vec<u8>> {
    let header = StreamHeader::parse(bytes)?;
    check_level(&header, level)?;
    let frames = header.num_frames();
    let mut offset = StreamHeader::encoded_len(level + 1, frames) as u64;
    let mut chunks = Vec::with_capacity(level + 1);
    let mut bodies = Vec::new();
    for row in &header.chunks[..=level] {
        let mut out = Vec::with_capacity(frames);
        for &c in row {
            let data = chunk_bytes(bytes, c)?;
            out.push(ChunkEntry {
                offset,
                length: c.length,
            });
            offset += c.length as u64;
            bodies.push(data);
        }
        chunks.push(out);
    }
    let new_header = StreamHeader {
        level_resolutions: header.level_resolutions[..=level].to_vec(),
        chunks,
        ..header
    };
    let mut w = ByteWriter::new();
    new_header.write(&mut w);
    for b in bodies {
        w.bytes(b);
    }
    Ok(w.buf)
}

/// Render target of `level` for a decoded video: the full canvas in quality
/// mode, the level's own size in resolution mode.
pub fn level_target(video: &GaussianVideo, level: usize) -> Target {
    match video.mode {
        ScalabilityMode::Quality => Target::new(video.width, video.height),
        ScalabilityMode::Resolution => {
            let r = video.level_resolutions[level];
            Target::scaled(r.width, r.height, video.height)
        }
    }
}

/// Decodes and renders every frame at `level` (top level when `None`).
pub fn decode_frames(bytes: &[u8], level: Option<usize>, rasterizer: &Rasterizer) -> Result<Vec<RasterImage>> {
    let q = read_stream(bytes, level)?;
    let video = dequantize_video(&q)?;
    let level = q.num_layers() - 1;
    let target = level_target(&video, level);
    let exec = if rasterizer.exec.is_parallel() {
        Exec::default()
    } else {
        Exec::Sequential
    };
    let inner = Rasterizer {
        exec: Exec::Sequential,
        ..*rasterizer
    };
    // Frames render independently; parallelize across frames and keep each
    // render sequential.
    let renders = map_ordered(exec, &video.frames, |_, f| inner.render(&f.level_view(level)?, target));
    renders.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_video, QuantParams};
    use crate::train::{init_iframe, init_pframe};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(frames: usize) -> QuantizedVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut out = vec![init_iframe(&[20, 30, 30], &[0, 0, 0], 2.0, &mut rng)];
        for _ in 1..frames {
            let mut p = init_pframe(out.last().unwrap(), &[3, 3, 3], 2.0, &mut rng);
            let keep: Vec<bool> = (0..p.layers[2].len()).map(|i| i % 6 != 1).collect();
            p.layers[2].retain_mask(&keep);
            let keep: Vec<bool> = (0..p.layers[0].len()).map(|i| i != 2).collect();
            p.layers[0].retain_mask(&keep);
            out.push(p);
        }
        let video = GaussianVideo {
            frames: out,
            width: 24,
            height: 16,
            level_resolutions: vec![Resolution::new(24, 16); 3],
            mode: ScalabilityMode::Quality,
        };
        let params = QuantParams {
            codebook_bits: 3,
            ..QuantParams::default()
        };
        quantize_video(&video, None, &params, 5, &Rasterizer::default())
            .unwrap()
            .0
    }

    #[test]
    fn round_trip_is_field_identical_and_deterministic() {
        let q = fixture(3);
        let bytes = write_stream(&q).unwrap();
        assert_eq!(bytes, write_stream(&q).unwrap());
        assert_eq!(read_stream(&bytes, None).unwrap(), q);
        let h = StreamHeader::parse(&bytes).unwrap();
        assert_eq!(h.chunks.iter().map(Vec::len).sum::<usize>(), 3 * 3);
        assert_eq!(h.kinds, vec![FrameKind::I, FrameKind::P, FrameKind::P]);
    }

    #[test]
    fn prefix_reads_match_truncation() {
        let q = fixture(3);
        let bytes = write_stream(&q).unwrap();
        let mut prev_len = 0;
        for level in 0..3 {
            let cut = truncate_stream(&bytes, level).unwrap();
            assert!(cut.len() > prev_len);
            prev_len = cut.len();
            assert_eq!(StreamHeader::parse(&cut).unwrap().num_layers(), level + 1);
            assert_eq!(
                read_stream(&cut, Some(level)).unwrap(),
                read_stream(&bytes, Some(level)).unwrap()
            );
            assert_eq!(truncate_stream(&cut, level).unwrap(), cut);
            let r = Rasterizer::default();
            assert_eq!(
                decode_frames(&cut, Some(level), &r).unwrap(),
                decode_frames(&bytes, Some(level), &r).unwrap()
            );
        }
        assert_eq!(truncate_stream(&bytes, 2).unwrap(), bytes);
    }

    #[test]
    fn size_accounting() {
        let bytes = write_stream(&fixture(2)).unwrap();
        let h = StreamHeader::parse(&bytes).unwrap();
        let base = truncate_stream(&bytes, 0).unwrap();
        let enh: u64 = h.chunks[1..].iter().flatten().map(|c| c.length as u64).sum();
        let header_delta = StreamHeader::encoded_len(3, 2) - StreamHeader::encoded_len(1, 2);
        assert_eq!(base.len() as u64 + enh, (bytes.len() - header_delta) as u64);
    }

    #[test]
    fn corrupt_and_short_streams() {
        let bytes = write_stream(&fixture(2)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_stream(&bad, None), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_stream(&bad, None), Err(Error::Format(_))));
        assert!(matches!(read_stream(&bytes, Some(3)), Err(Error::Format(_))));
        let h = StreamHeader::parse(&bytes).unwrap();
        let end_of_base = (h.chunks[0][1].offset + h.chunks[0][1].length as u64) as usize;
        let short = &bytes[..end_of_base];
        assert!(read_stream(short, Some(0)).is_ok());
        assert!(matches!(read_stream(short, Some(1)), Err(Error::Truncated { .. })));
        assert!(matches!(
            read_stream(&bytes[..end_of_base - 3], Some(0)),
            Err(Error::Truncated { .. })
        ));
    }
}
