//! L2 reconstruction loss, the Adan update rule (with an Adam fallback)
//! and the step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::RasterImage;
use crate::wire::{ByteReader, ByteWriter};

/// `(1/HW) Σ_i ‖pred_i − target_i‖²` with the squared norm taken over RGB,
/// and its gradient `2 (pred − target) / (HW)`.
pub fn l2_loss(pred: &RasterImage, target: &RasterImage) -> Result<(f64, RasterImage)> {
    target.ensure_same_dims(pred)?;
    let npix = (pred.width * pred.height) as f64;
    let scale = 2.0 / npix;
    let mut sum = 0f64;
    let mut grad = RasterImage::zeros(pred.width, pred.height);
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p as f64 - t as f64;
        sum += d * d;
        *g = (scale * d) as f32;
    }
    Ok((sum / npix, grad))
}

/// Learning rate halved every `period` steps.
pub fn lr_at(step: usize, lr0: f64, period: usize) -> f64 {
    lr0 * 0.5f64.powi((step / period.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adan,
    Adam,
}

/// Moment buffers for one parameter vector.
///
/// Adan keeps a gradient moment `m`, a gradient-difference moment `v`, a
/// second moment `n` of `g + β₂ (g − g_prev)` and the previous gradient.
/// Adam only uses `m` and `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub n: Vec<f32>,
    pub g_prev: Vec<f32>,
    pub step: u64,
}

/// Hyperparameters not exposed by the codec configuration.
pub const ADAN_BETAS: (f32, f32, f32) = (0.98, 0.92, 0.99);
pub const ADAM_BETAS: (f32, f32) = (0.9, 0.999);
pub const EPS: f32 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; len],
            v: vec![0.0; len],
            n: vec![0.0; len],
            g_prev: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` in place. Weight decay is zero.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::Shape {
                expected: (self.len(), 1),
                got: (params.len(), grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient {} at parameter {i} (step {})",
                grads[i], self.step
            )));
        }
        self.step += 1;
        let k = self.step as i32;
        let lr = lr as f32;
        match self.kind {
            OptimizerKind::Adan => {
                let (b1, b2, b3) = ADAN_BETAS;
                let bc1 = 1.0 - b1.powi(k);
                let bc2 = 1.0 - b2.powi(k);
                let bc3 = (1.0 - b3.powi(k)).sqrt();
                let first = self.step == 1;
                for i in 0..params.len() {
                    let g = grads[i];
                    let diff = if first { 0.0 } else { g - self.g_prev[i] };
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * diff;
                    let u = g + b2 * diff;
                    self.n[i] = b3 * self.n[i] + (1.0 - b3) * u * u;
                    let denom = self.n[i].sqrt() / bc3 + EPS;
                    params[i] -= (lr / bc1) * self.m[i] / denom + (lr * b2 / bc2) * self.v[i] / denom;
                    self.g_prev[i] = g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = ADAM_BETAS;
                let bc1 = 1.0 - b1.powi(k);
                let bc2 = (1.0 - b2.powi(k)).sqrt();
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.n[i] = b2 * self.n[i] + (1.0 - b2) * g * g;
                    params[i] -= (lr / bc1) * self.m[i] / (self.n[i].sqrt() / bc2 + EPS);
                }
            }
        }
        Ok(())
    }

    /// Drops entries in blocks of `block` parameters whose mask bit is unset.
    pub fn retain_blocks(&mut self, keep: &[bool], block: usize) {
        debug_assert_eq!(keep.len() * block, self.len());
        for buf in [&mut self.m, &mut self.v, &mut self.n, &mut self.g_prev] {
            let mut i = 0;
            buf.retain(|_| {
                i += 1;
                keep[(i - 1) / block]
            });
        }
    }

    /// Inserts `count` zeroed entries at `at`.
    pub fn insert_zeros(&mut self, at: usize, count: usize) {
        for buf in [&mut self.m, &mut self.v, &mut self.n, &mut self.g_prev] {
            buf.splice(at..at, std::iter::repeat_n(0.0, count));
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u8(match self.kind {
            OptimizerKind::Adan => 0,
            OptimizerKind::Adam => 1,
        });
        w.u64(self.step);
        w.u64(self.len() as u64);
        for buf in [&self.m, &self.v, &self.n, &self.g_prev] {
            for &x in buf {
                w.f32(x);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let kind = match r.u8()? {
            0 => OptimizerKind::Adan,
            1 => OptimizerKind::Adam,
            k => return Err(Error::Format(format!("unknown optimizer kind {k}"))),
        };
        let step = r.u64()?;
        let len = r.u64()? as usize;
        let mut read = || -> Result<Vec<f32>> {
            let raw = r.take(len.checked_mul(4).ok_or(Error::Format("length overflow".into()))?)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let m = read()?;
        let v = read()?;
        let n = read()?;
        let g_prev = read()?;
        Ok(Self {
            kind,
            m,
            v,
            n,
            g_prev,
            step,
        })
    }
}
