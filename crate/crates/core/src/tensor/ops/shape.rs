use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::tape::{GradSink, Node, Op};
use crate::tensor::{numel, Real, Var};

/// Gather index marking an output element that reads as zero.
pub const ZERO: u32 = u32::MAX;

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<'t, F: Real> Var<'t, F> {
    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::dim("reshape", format!("cannot view {:?} as {:?}", self.shape(), shape)));
        }
        Ok(self.tape.push_rc(shape, self.value(), Op::Reshape(self.id), self.requires_grad()))
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO`.
    pub(crate) fn gather(self, index: Rc<[u32]>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(index.len(), numel(&shape));
        let v = self.value();
        let out = index
            .iter()
            .map(|&i| if i == ZERO { F::zero() } else { v[i as usize] })
            .collect();
        self.tape.push(shape, out, Op::Gather { x: self.id, index }, self.requires_grad())
    }

    /// Reorders axes so that output axis `k` is input axis `axes[k]`.
    pub fn permute(self, axes: &[usize]) -> Result<Self> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Argument(format!("permute: {:?} is not a permutation of rank {}", axes, shape.len())));
        }
        let in_strides = row_major_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = numel(&shape);
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; out_shape.len()];
        let mut offset = 0usize;
        for _ in 0..n {
            index.push(offset as u32);
            for d in (0..out_shape.len()).rev() {
                counter[d] += 1;
                offset += src_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        Ok(self.gather(index.into(), out_shape))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("axis {axis}: range {}..{} exceeds {:?}", start, start + len, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(index.into(), out_shape))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Argument("concat: no inputs".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Argument(format!("concat: axis {axis} out of range for {:?}", base)));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p, "concat")?;
            let s = p.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(super::elementwise::mismatch("concat", &base, &s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        let values: Vec<_> = parts.iter().map(|p| (p.value(), p.shape()[axis])).collect();
        for o in 0..outer {
            for (v, len) in &values {
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis };
        Ok(first.tape.push(shape, out, op, rg))
    }

    /// `[B, C·r², H, W] → [B, C, rH, rW]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
            return Err(Error::Argument(format!("pixel_shuffle: {:?} channels not divisible by {}²", s, r)));
        }
        let (b, c, h, w) = (s[0], s[1] / (r * r), s[2], s[3]);
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h * r {
                    for x in 0..w * r {
                        let src_c = ci * r * r + (y % r) * r + x % r;
                        index.push((((bi * s[1] + src_c) * h + y / r) * w + x / r) as u32);
                    }
                }
            }
        }
        Ok(self.gather(index.into(), vec![b, c, h * r, w * r]))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::Argument(format!("pixel_unshuffle: {:?} spatial dims not divisible by {}", s, r)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2] / r, s[3] / r);
        let cr = c * r * r;
        let mut index = Vec::with_capacity(self.numel());
        for bi in 0..b {
            for oc in 0..cr {
                let (ci, i, j) = (oc / (r * r), (oc / r) % r, oc % r);
                for y in 0..h {
                    for x in 0..w {
                        index.push((((bi * c + ci) * s[2] + y * r + i) * s[3] + x * r + j) as u32);
                    }
                }
            }
        }
        Ok(self.gather(index.into(), vec![b, cr, h, w]))
    }
}

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    match &node.op {
        Op::Reshape(x) => sink.add(*x, g),
        Op::Gather { x, index } => {
            if let Some(acc) = sink.slot(*x) {
                for (&i, &gv) in index.iter().zip(g) {
                    if i != ZERO {
                        acc[i as usize] = acc[i as usize] + gv;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = &node.shape;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut start = 0;
            for &id in inputs {
                let len = nodes[id].shape[*axis];
                if let Some(acc) = sink.slot(id) {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..(o * total + start + len) * inner];
                        let dst = &mut acc[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                    }
                }
                start += len;
            }
        }
        _ => unreachable!("not a shape op"),
    }
}
