//! Box geometry and the fixed bilinear weight matrices used to paste masks
//! into boxes and to crop boxes out of images.
//!
//! All resampling uses pixel-center alignment: output index `d` of a span
//! of length `len` samples source position `(d + 0.5) * src / len - 0.5`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Normalized box: center plus height and width, all fractions of the
/// canvas.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64) -> Self {
        Self { cx, cy, h, w }
    }

    pub fn area(&self) -> f64 {
        self.h * self.w
    }

    /// Pixel rectangle `(y_span, x_span)` on an `h x w` canvas.
    pub fn pixel_rect(&self, height: usize, width: usize) -> (Span, Span) {
        (Span::centered(self.cy, self.h * height as f64, height), Span::centered(self.cx, self.w * width as f64, width))
    }
}

/// A run of pixels along one axis: `start` may be negative or exceed the
/// canvas; `len >= 1` is the unclipped length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: i64,
    pub len: usize,
    pub canvas: usize,
}

impl Span {
    /// Span of `round(extent_px)` pixels (at least one) centered at
    /// `center * canvas`.
    pub fn centered(center: f64, extent_px: f64, canvas: usize) -> Self {
        let len = (extent_px.round() as i64).max(1) as usize;
        let start = (center * canvas as f64 - len as f64 / 2.0).round() as i64;
        Self { start, len, canvas }
    }

    /// Span of exactly `len` pixels centered at `center * canvas`.
    pub fn square_side(center: f64, len: usize, canvas: usize) -> Self {
        let len = len.max(1);
        let start = (center * canvas as f64 - len as f64 / 2.0).round() as i64;
        Self { start, len, canvas }
    }

    /// Clipped half-open pixel range, never empty.
    pub fn clipped(&self) -> (usize, usize) {
        let canvas = self.canvas as i64;
        let a = self.start.max(0);
        let b = (self.start + self.len as i64).min(canvas);
        if b > a {
            (a as usize, b as usize)
        } else if self.start >= canvas {
            (self.canvas - 1, self.canvas)
        } else {
            (0, 1)
        }
    }
}

fn bilinear_taps(pos: f64, src: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (src - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, pos - i0 as f64)
}

/// `(canvas, src)` weights pasting a length-`src` signal into `span`.
/// Rows outside the clipped span are zero; each row inside sums to 1.
pub fn paste_weights(span: &Span, src: usize) -> Vec<f64> {
    let mut w = vec![0.0; span.canvas * src];
    let (a, b) = span.clipped();
    let scale = src as f64 / span.len as f64;
    for r in a..b {
        let d = r as i64 - span.start;
        let (i0, i1, f) = bilinear_taps((d as f64 + 0.5) * scale - 0.5, src);
        w[r * src + i0] += 1.0 - f;
        w[r * src + i1] += f;
    }
    w
}

/// `(out, canvas)` weights sampling `out` points across `span`.
pub fn crop_weights(span: &Span, out: usize) -> Vec<f64> {
    let mut w = vec![0.0; out * span.canvas];
    let (a, b) = span.clipped();
    let scale = span.len as f64 / out as f64;
    for d in 0..out {
        let pos = span.start as f64 + (d as f64 + 0.5) * scale - 0.5;
        let pos = pos.clamp(a as f64, (b - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(b - 1);
        let f = pos - i0 as f64;
        w[d * span.canvas + i0] += 1.0 - f;
        w[d * span.canvas + i1] += f;
    }
    w
}

/// Stack per-box weight matrices into a `(N, rows, cols)` tensor.
pub fn stack_weights(mats: Vec<Vec<f64>>, rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = mats.len();
    let flat: Vec<f64> = mats.into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, (n, rows, cols), device)?.to_dtype(dtype)?)
}

/// Crop each box out of its image and resample to `size x size`.
///
/// `images` is `(B, C, H, W)`; `owners[i]` selects the image for box `i`.
/// Returns `(N, C, size, size)`, differentiable in `images`.
pub fn crop_boxes(images: &Tensor, boxes: &[BBox], owners: &[usize], size: usize) -> Result<Tensor> {
    let (_, c, h, w) = images.dims4()?;
    let (dtype, device) = (images.dtype(), images.device().clone());
    let mut ys = Vec::with_capacity(boxes.len());
    let mut xs = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (sy, sx) = b.pixel_rect(h, w);
        ys.push(crop_weights(&sy, size));
        xs.push(crop_weights(&sx, size));
    }
    let n = boxes.len();
    let ry = stack_weights(ys, size, h, dtype, &device)?; // (N, S, H)
    let rx = stack_weights(xs, size, w, dtype, &device)?.transpose(1, 2)?.contiguous()?; // (N, W, S)
    let idx = Tensor::from_vec(owners.iter().map(|&o| o as u32).collect::<Vec<_>>(), n, &device)?;
    let picked = images.index_select(&idx, 0)?; // (N, C, H, W)
    let ry = ry.unsqueeze(1)?.broadcast_as((n, c, size, h))?.contiguous()?;
    let rx = rx.unsqueeze(1)?.broadcast_as((n, c, w, size))?.contiguous()?;
    Ok(ry.matmul(&picked.contiguous()?)?.matmul(&rx)?)
}
