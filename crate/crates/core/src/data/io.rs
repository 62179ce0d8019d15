//! Binary PPM (RGB), PGM (gray) and PFM (float depth) files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cursor over a netpbm-style header: whitespace-separated tokens with
/// `#` comments, ending at the single whitespace byte after the last token.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Header { bytes, pos: 0 }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("missing {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(start, format!("{what} is not ASCII")))?;
        Ok((start, text))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let (at, text) = self.token(what)?;
        text.parse().map_err(|_| Error::format(at, format!("bad {what} {text:?}")))
    }

    fn dims(&mut self) -> Result<(usize, usize)> {
        self.skip_space();
        let at = self.pos;
        let w: usize = self.number("width")?;
        let h: usize = self.number("height")?;
        if w == 0 || h == 0 {
            return Err(Error::format(at, format!("empty image {w}×{h}")));
        }
        Ok((w, h))
    }

    /// Consumes the one whitespace byte before the payload.
    fn payload(mut self, len: usize) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => self.pos += 1,
            _ => return Err(Error::format(self.pos, "expected whitespace before the payload")),
        }
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        end.map(|e| &self.bytes[self.pos..e])
            .ok_or_else(|| Error::format(self.bytes.len(), format!("payload truncated: need {len} bytes")))
    }
}

fn magic(h: &mut Header, want: &str) -> Result<()> {
    let (at, m) = h.token("magic")?;
    if m != want {
        return Err(Error::format(at, format!("expected {want}, found {m:?}")));
    }
    Ok(())
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `rgb: [3, H, W]` in `[0, 1]`, quantized to 8 bits.
pub fn encode_ppm(rgb: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = rgb.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("ppm", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = rgb.data();
    for i in 0..h * w {
        out.extend((0..3).map(|c| to_byte(d[c * h * w + i])));
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut h = Header::new(bytes);
    magic(&mut h, "P6")?;
    let (w, ht) = h.dims()?;
    h.skip_space();
    let at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(at, format!("unsupported maxval {maxval}")));
    }
    let data = h.payload(3 * w * ht)?;
    let n = w * ht;
    let mut out = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            out[c * n + i] = data[3 * i + c] as f32 / maxval as f32;
        }
    }
    Tensor::new([3, ht, w], out)
}

/// `depth: [1, H, W]` or `[H, W]`, stored little-endian with rows
/// bottom to top.
pub fn encode_pfm(depth: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = depth.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Error::dim("pfm", format!("expected [1, H, W], got {s:?}"))),
    };
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in depth.data().chunks(w).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    debug_assert_eq!(depth.numel(), h * w);
    Ok(out)
}

/// Reads a single-channel PFM as `[1, H, W]`. A negative scale means
/// little-endian samples, a positive one big-endian.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut h = Header::new(bytes);
    magic(&mut h, "Pf")?;
    let (w, ht) = h.dims()?;
    h.skip_space();
    let at = h.pos;
    let scale: f64 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(at, format!("bad scale {scale}")));
    }
    let little = scale < 0.0;
    let data = h.payload(4 * w * ht)?;
    let mut out = vec![0f32; w * ht];
    for (r, row) in data.chunks_exact(4 * w).enumerate() {
        let y = ht - 1 - r;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let raw = [b[0], b[1], b[2], b[3]];
            out[y * w + x] = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        }
    }
    Tensor::new([1, ht, w], out)
}

/// 8-bit gray rendering of `[1, H, W]` or `[H, W]`, mapping `0..=max` to
/// `0..=255`.
pub fn encode_pgm(depth: &Tensor<f32>, max: f32) -> Result<Vec<u8>> {
    let s = depth.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Error::dim("pgm", format!("expected [1, H, W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(depth.data().iter().map(|&v| to_byte(v / max)));
    Ok(out)
}

/// `[1, H, W]` in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut h = Header::new(bytes);
    magic(&mut h, "P5")?;
    let (w, ht) = h.dims()?;
    h.skip_space();
    let at = h.pos;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(at, format!("unsupported maxval {maxval}")));
    }
    let data = h.payload(w * ht)?;
    Tensor::new([1, ht, w], data.iter().map(|&b| b as f32 / maxval as f32).collect())
}

pub fn save_ppm(path: impl AsRef<Path>, rgb: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_ppm(rgb)?)?)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_pfm(path: impl AsRef<Path>, depth: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_pfm(depth)?)?)
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pfm(&fs::read(path)?)
}

pub fn save_pgm(path: impl AsRef<Path>, depth: &Tensor<f32>, max: f32) -> Result<()> {
    Ok(fs::write(path, encode_pgm(depth, max)?)?)
}
