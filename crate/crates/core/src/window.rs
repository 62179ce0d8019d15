//! Partitioning of `[B, H, W, C]` token grids into (shifted) square windows.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::ops::shape::ZERO;
use crate::tensor::{Real, Var};

/// Geometry of one partition; enough to invert it and to build masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub size: usize,
    pub shift: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowGeometry {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, size: usize, shift: usize) -> Result<Self> {
        if size == 0 || (shift > 0 && shift >= size) {
            return Err(Error::Argument(format!("window size {size} with shift {shift}")));
        }
        Ok(WindowGeometry {
            batch,
            height,
            width,
            channels,
            size,
            shift,
            padded_height: height.div_ceil(size) * size,
            padded_width: width.div_ceil(size) * size,
        })
    }

    pub fn windows_y(&self) -> usize {
        self.padded_height / self.size
    }

    pub fn windows_x(&self) -> usize {
        self.padded_width / self.size
    }

    /// Windows per image.
    pub fn windows_per_image(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.size * self.size
    }

    pub fn is_padded(&self) -> bool {
        self.padded_height != self.height || self.padded_width != self.width
    }

    /// Source pixel of token `t` in window `w` of an image, before removal of
    /// padding: `(y, x, wrapped_y, wrapped_x)` on the padded grid.
    fn source(&self, w: usize, t: usize) -> (usize, usize, bool, bool) {
        let (wy, wx) = (w / self.windows_x(), w % self.windows_x());
        let (py, px) = (t / self.size, t % self.size);
        let ry = wy * self.size + py + self.shift;
        let rx = wx * self.size + px + self.shift;
        (ry % self.padded_height, rx % self.padded_width, ry >= self.padded_height, rx >= self.padded_width)
    }

    /// Additive attention mask `[windows_per_image, N, N]` (0 or −∞), or
    /// `None` when every pair may attend.
    ///
    /// Tokens that reached a window by wrapping around the shifted grid only
    /// attend to tokens that wrapped the same way, and padding keys are
    /// hidden from real queries. Padding queries keep their row open so the
    /// softmax stays finite; their outputs are discarded on reversal.
    pub fn attention_mask<F: Real>(&self) -> Option<Vec<F>> {
        if self.shift == 0 && !self.is_padded() {
            return None;
        }
        let n = self.tokens_per_window();
        let mut mask = vec![F::zero(); self.windows_per_image() * n * n];
        for w in 0..self.windows_per_image() {
            let info: Vec<_> = (0..n)
                .map(|t| {
                    let (y, x, wy, wx) = self.source(w, t);
                    ((wy, wx), y >= self.height || x >= self.width)
                })
                .collect();
            for (i, &(ri, pad_i)) in info.iter().enumerate() {
                for (j, &(rj, pad_j)) in info.iter().enumerate() {
                    if ri != rj || (pad_j && !pad_i) {
                        mask[(w * n + i) * n + j] = F::neg_infinity();
                    }
                }
            }
        }
        Some(mask)
    }
}

/// Index into a `[(2T−1)², heads]` relative-position table for every head
/// and token pair of an `S×S` window (`S ≤ T`), laid out `[heads, S², S²]`.
pub fn relative_position_index(size: usize, table_size: usize, heads: usize) -> Vec<u32> {
    debug_assert!(size <= table_size);
    let n = size * size;
    let span = 2 * table_size - 1;
    let mut index = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let dy = i / size + table_size - 1 - j / size;
                let dx = i % size + table_size - 1 - j % size;
                index.push(((dy * span + dx) * heads + h) as u32);
            }
        }
    }
    index
}

/// Splits `[B, H, W, C]` into `[B·nW, S², C]` windows after zero padding to
/// multiples of `size` and a cyclic shift by `shift` pixels.
pub fn window_partition<'t, F: Real>(x: Var<'t, F>, size: usize, shift: usize) -> Result<(Var<'t, F>, WindowGeometry)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim("window_partition", format!("expected [B, H, W, C], got {:?}", s)));
    }
    let geo = WindowGeometry::new(s[0], s[1], s[2], s[3], size, shift)?;
    let (n, c) = (geo.tokens_per_window(), geo.channels);
    let nw = geo.windows_per_image();
    let mut index = Vec::with_capacity(geo.batch * nw * n * c);
    for b in 0..geo.batch {
        for w in 0..nw {
            for t in 0..n {
                let (y, xx, _, _) = geo.source(w, t);
                let real = y < geo.height && xx < geo.width;
                let base = ((b * geo.height + y) * geo.width + xx) * c;
                index.extend((0..c).map(|k| if real { (base + k) as u32 } else { ZERO }));
            }
        }
    }
    let out = x.gather(Rc::from(index), vec![geo.batch * nw, n, c]);
    Ok((out, geo))
}

/// Inverse of [`window_partition`]: `[B·nW, S², C] → [B, H, W, C]`.
pub fn window_reverse<'t, F: Real>(windows: Var<'t, F>, geo: &WindowGeometry) -> Result<Var<'t, F>> {
    let (n, c) = (geo.tokens_per_window(), geo.channels);
    let nw = geo.windows_per_image();
    let expect = [geo.batch * nw, n, c];
    if windows.shape() != expect {
        return Err(Error::dim("window_reverse", format!("expected {:?}, got {:?}", expect, windows.shape())));
    }
    let mut index = Vec::with_capacity(geo.batch * geo.height * geo.width * c);
    for b in 0..geo.batch {
        for y in 0..geo.height {
            let ry = (y + geo.padded_height - geo.shift) % geo.padded_height;
            for xx in 0..geo.width {
                let rx = (xx + geo.padded_width - geo.shift) % geo.padded_width;
                let w = (ry / geo.size) * geo.windows_x() + rx / geo.size;
                let t = (ry % geo.size) * geo.size + rx % geo.size;
                let base = ((b * nw + w) * n + t) * c;
                index.extend((0..c).map(|k| (base + k) as u32));
            }
        }
    }
    Ok(windows.gather(Rc::from(index), vec![geo.batch, geo.height, geo.width, c]))
}

/// Window size and shift actually used on an `h×w` grid: a window that
/// would cover the whole grid shrinks to it and stops shifting.
pub fn effective_window(h: usize, w: usize, size: usize, shifted: bool) -> (usize, usize) {
    let m = h.min(w);
    if m <= size {
        (m, 0)
    } else {
        (size, if shifted { size / 2 } else { 0 })
    }
}
