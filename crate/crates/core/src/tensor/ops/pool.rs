use crate::error::{Error, Result};
use crate::tensor::tape::{GradSink, Node, Op};
use crate::tensor::{Real, Var};

/// Input range `[start, end)` feeding adaptive-pool output cell `i`.
pub(crate) fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Per-output-index `(i0, i1, weight of i1)` for half-pixel bilinear
/// resampling along one axis.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn nchw(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if s.len() != 4 {
        return Err(Error::dim(op, format!("expected [B, C, H, W], got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

impl<'t, F: Real> Var<'t, F> {
    /// Averages each of `out_h × out_w` floor/ceil bins of `[B, C, H, W]`.
    pub fn adaptive_avg_pool(self, out_h: usize, out_w: usize) -> Result<Self> {
        let (b, c, h, w) = nchw("adaptive_avg_pool", &self.shape())?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument("adaptive_avg_pool: output size must be non-zero".into()));
        }
        if out_h > h || out_w > w {
            return Err(Error::Argument(format!(
                "adaptive_avg_pool: output {}x{} exceeds input {}x{}",
                out_h, out_w, h, w
            )));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in v.chunks(h * w) {
            for oy in 0..out_h {
                let (y0, y1) = adaptive_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = adaptive_bin(ox, w, out_w);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        acc = acc + plane[y * w + x0..y * w + x1].iter().copied().sum::<F>();
                    }
                    out.push(acc / F::cst(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        Ok(self.tape.push(vec![b, c, out_h, out_w], out, Op::AdaptiveAvgPool(self.id), self.requires_grad()))
    }

    /// Bilinear resize of `[B, C, H, W]` with half-pixel centres
    /// (corner alignment off).
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Result<Self> {
        let (b, c, h, w) = nchw("upsample_bilinear", &self.shape())?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::Argument("upsample_bilinear: empty size".into()));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let v = self.value();
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in v.chunks(h * w) {
            for &(y0, y1, ly) in &ty {
                let ly = F::cst(ly);
                for &(x0, x1, lx) in &tx {
                    let lx = F::cst(lx);
                    let top = plane[y0 * w + x0] * (F::one() - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (F::one() - lx) + plane[y1 * w + x1] * lx;
                    out.push(top * (F::one() - ly) + bot * ly);
                }
            }
        }
        Ok(self.tape.push(vec![b, c, out_h, out_w], out, Op::Bilinear(self.id), self.requires_grad()))
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Argument(format!("mean_axis: axis {axis} invalid for {:?}", shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value();
        let inv = F::one() / F::cst(len as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..len {
                let src = &v[(o * len + k) * inner..(o * len + k + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
            }
            dst.iter_mut().for_each(|a| *a = *a * inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.tape.push(out_shape, out, Op::MeanAxis { x: self.id, axis }, self.requires_grad()))
    }

    /// `y[b, c, i, j] = rows[b, c, i] + cols[b, c, j]`.
    pub fn outer_sum(self, cols: Var<'t, F>) -> Result<Self> {
        self.same_tape(&cols, "outer_sum")?;
        let (rs, cs) = (self.shape(), cols.shape());
        if rs.len() != 3 || cs.len() != 3 || rs[..2] != cs[..2] {
            return Err(Error::dim("outer_sum", format!("rows {:?} vs cols {:?} (axes 0-1 must agree)", rs, cs)));
        }
        let (h, w) = (rs[2], cs[2]);
        let (rv, cv) = (self.value(), cols.value());
        let mut out = Vec::with_capacity(rs[0] * rs[1] * h * w);
        for p in 0..rs[0] * rs[1] {
            for i in 0..h {
                let r = rv[p * h + i];
                out.extend(cv[p * w..(p + 1) * w].iter().map(|&c| r + c));
            }
        }
        let rg = self.requires_grad() || cols.requires_grad();
        Ok(self.tape.push(vec![rs[0], rs[1], h, w], out, Op::OuterSum { rows: self.id, cols: cols.id }, rg))
    }
}

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    match node.op {
        Op::AdaptiveAvgPool(x) => {
            let s = &nodes[x].shape;
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            if let Some(acc) = sink.slot(x) {
                for (plane, gp) in acc.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for oy in 0..oh {
                        let (y0, y1) = adaptive_bin(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = adaptive_bin(ox, w, ow);
                            let share = gp[oy * ow + ox] / F::cst(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                plane[y * w + x0..y * w + x1].iter_mut().for_each(|a| *a = *a + share);
                            }
                        }
                    }
                }
            }
        }
        Op::Bilinear(x) => {
            let s = &nodes[x].shape;
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (node.shape[2], node.shape[3]);
            let ty = bilinear_taps(h, oh);
            let tx = bilinear_taps(w, ow);
            if let Some(acc) = sink.slot(x) {
                for (plane, gp) in acc.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = F::cst(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = F::cst(lx);
                            let gv = gp[oy * ow + ox];
                            let top = gv * (F::one() - ly);
                            let bot = gv * ly;
                            plane[y0 * w + x0] = plane[y0 * w + x0] + top * (F::one() - lx);
                            plane[y0 * w + x1] = plane[y0 * w + x1] + top * lx;
                            plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (F::one() - lx);
                            plane[y1 * w + x1] = plane[y1 * w + x1] + bot * lx;
                        }
                    }
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            let shape = &nodes[x].shape;
            let outer: usize = shape[..axis].iter().product();
            let len = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let inv = F::one() / F::cst(len as f64);
            if let Some(acc) = sink.slot(x) {
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let dst = &mut acc[(o * len + k) * inner..(o * len + k + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b * inv);
                    }
                }
            }
        }
        Op::OuterSum { rows, cols } => {
            let (h, w) = (node.shape[2], node.shape[3]);
            let planes = node.shape[0] * node.shape[1];
            if let Some(acc) = sink.slot(rows) {
                for p in 0..planes {
                    for i in 0..h {
                        acc[p * h + i] = acc[p * h + i] + g[(p * h + i) * w..(p * h + i + 1) * w].iter().copied().sum::<F>();
                    }
                }
            }
            if let Some(acc) = sink.slot(cols) {
                for p in 0..planes {
                    for i in 0..h {
                        let src = &g[(p * h + i) * w..(p * h + i + 1) * w];
                        acc[p * w..(p + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
        }
        _ => unreachable!("not a pooling op"),
    }
}
