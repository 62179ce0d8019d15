use crate::error::{Error, Result};
use crate::tensor::tape::{GradSink, Node, Op};
use crate::tensor::{Real, Var};

fn last_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::dim(op, format!("needs a non-empty last axis, got {:?}", shape))),
    }
}

impl<'t, F: Real> Var<'t, F> {
    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(self) -> Result<Self> {
        let d = last_dim("softmax_lastdim", &self.shape())?;
        let v = self.value();
        let mut out = vec![F::zero(); v.len()];
        for (src, dst) in v.chunks(d).zip(out.chunks_mut(d)) {
            let max = src.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - max).exp();
                total = total + *o;
            }
            let inv = F::one() / total;
            dst.iter_mut().for_each(|o| *o = *o * inv);
        }
        Ok(self.tape.push(self.shape(), out, Op::Softmax(self.id), self.requires_grad()))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, F>, beta: Var<'t, F>, eps: F) -> Result<Self> {
        self.same_tape(&gamma, "layer_norm")?;
        self.same_tape(&beta, "layer_norm")?;
        let d = last_dim("layer_norm", &self.shape())?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("features {} vs gamma {:?} / beta {:?}", d, gamma.shape(), beta.shape()),
            ));
        }
        let (v, gv, bv) = (self.value(), gamma.value(), beta.value());
        let rows = v.len() / d;
        let inv_d = F::one() / F::cst(d as f64);
        let mut out = vec![F::zero(); v.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (src, dst) in v.chunks(d).zip(out.chunks_mut(d)) {
            let mean = src.iter().copied().sum::<F>() * inv_d;
            let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for i in 0..d {
                dst[i] = (src[i] - mean) * rstd * gv[i] + bv[i];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, mean: means, rstd: rstds };
        Ok(self.tape.push(self.shape(), out, op, rg))
    }

    /// `x / max(‖x‖, eps)` over the last axis.
    pub fn l2_normalize(self, eps: F) -> Result<Self> {
        let d = last_dim("l2_normalize", &self.shape())?;
        let v = self.value();
        let mut out = vec![F::zero(); v.len()];
        let mut norms = Vec::with_capacity(v.len() / d);
        for (src, dst) in v.chunks(d).zip(out.chunks_mut(d)) {
            let norm = src.iter().map(|&x| x * x).sum::<F>().sqrt();
            let denom = norm.max(eps);
            dst.iter_mut().zip(src).for_each(|(o, &x)| *o = x / denom);
            norms.push(norm);
        }
        let op = Op::L2Normalize { x: self.id, eps, norms };
        Ok(self.tape.push(self.shape(), out, op, self.requires_grad()))
    }

    /// Adds the mean token of each `[N, d]` sequence in `[B, N, d]` to
    /// every token, scaled per dimension by `lambda` when given.
    pub fn token_broadcast(self, lambda: Option<Var<'t, F>>) -> Result<Self> {
        let s = self.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::dim("token_broadcast", format!("expected [B, N, d] with N ≥ 1, got {:?}", s)));
        }
        let (n, d) = (s[1], s[2]);
        let scale = match lambda {
            Some(l) => {
                self.same_tape(&l, "token_broadcast")?;
                if l.shape() != [d] {
                    return Err(Error::dim("token_broadcast", format!("scaling {:?} vs {} dimensions", l.shape(), d)));
                }
                l.value().to_vec()
            }
            None => vec![F::one(); d],
        };
        let v = self.value();
        let mut out = v.to_vec();
        for (seq, dst) in v.chunks(n * d).zip(out.chunks_mut(n * d)) {
            let mean = token_mean(seq, n, d);
            for tok in dst.chunks_mut(d) {
                for k in 0..d {
                    tok[k] = tok[k] + scale[k] * mean[k];
                }
            }
        }
        let rg = self.requires_grad() || lambda.is_some_and(|l| l.requires_grad());
        let op = Op::TokenBroadcast { x: self.id, lambda: lambda.map(|l| l.id) };
        Ok(self.tape.push(s, out, op, rg))
    }
}

fn token_mean<F: Real>(seq: &[F], n: usize, d: usize) -> Vec<F> {
    let mut mean = vec![F::zero(); d];
    for tok in seq.chunks(d) {
        mean.iter_mut().zip(tok).for_each(|(m, &x)| *m = *m + x);
    }
    let inv = F::one() / F::cst(n as f64);
    mean.iter_mut().for_each(|m| *m = *m * inv);
    mean
}

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    match &node.op {
        Op::Softmax(x) => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(acc) = sink.slot(*x) {
                for ((yr, gr), ar) in y.chunks(d).zip(g.chunks(d)).zip(acc.chunks_mut(d)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..d {
                        ar[i] = ar[i] + yr[i] * (gr[i] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let d = *node.shape.last().unwrap();
            let xv = nodes[*x].value.clone();
            let gv = nodes[*gamma].value.clone();
            let inv_d = F::one() / F::cst(d as f64);
            let xhat = |r: usize, i: usize| (xv[r * d + i] - mean[r]) * rstd[r];
            if sink.wants(*x) {
                let acc = sink.slot(*x).unwrap();
                let mut dxhat = vec![F::zero(); d];
                for r in 0..mean.len() {
                    let gr = &g[r * d..(r + 1) * d];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for i in 0..d {
                        dxhat[i] = gr[i] * gv[i];
                        m1 = m1 + dxhat[i];
                        m2 = m2 + dxhat[i] * xhat(r, i);
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for i in 0..d {
                        let a = &mut acc[r * d + i];
                        *a = *a + rstd[r] * (dxhat[i] - m1 - xhat(r, i) * m2);
                    }
                }
            }
            if let Some(acc) = sink.slot(*gamma) {
                for r in 0..mean.len() {
                    for i in 0..d {
                        acc[i] = acc[i] + g[r * d + i] * xhat(r, i);
                    }
                }
            }
            if let Some(acc) = sink.slot(*beta) {
                for gr in g.chunks(d) {
                    acc.iter_mut().zip(gr).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
        Op::L2Normalize { x, eps, norms } => {
            let d = *node.shape.last().unwrap();
            let y = &node.value;
            if let Some(acc) = sink.slot(*x) {
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let ar = &mut acc[r * d..(r + 1) * d];
                    if norm > *eps {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..d {
                            ar[i] = ar[i] + (gr[i] - yr[i] * dot) / norm;
                        }
                    } else {
                        for i in 0..d {
                            ar[i] = ar[i] + gr[i] / *eps;
                        }
                    }
                }
            }
        }
        Op::TokenBroadcast { x, lambda } => {
            let (n, d) = (node.shape[1], node.shape[2]);
            let scale = match lambda {
                Some(l) => nodes[*l].value.to_vec(),
                None => vec![F::one(); d],
            };
            let inv = F::one() / F::cst(n as f64);
            let xv = nodes[*x].value.clone();
            let mut dl = vec![F::zero(); d];
            let want_x = sink.wants(*x);
            for (bi, gs) in g.chunks(n * d).enumerate() {
                let gsum = token_mean(gs, 1, d);
                if lambda.is_some() {
                    let mean = token_mean(&xv[bi * n * d..(bi + 1) * n * d], n, d);
                    for k in 0..d {
                        dl[k] = dl[k] + mean[k] * gsum[k];
                    }
                }
                if want_x {
                    let acc = sink.slot(*x).unwrap();
                    let dst = &mut acc[bi * n * d..(bi + 1) * n * d];
                    for (tok, gt) in dst.chunks_mut(d).zip(gs.chunks(d)) {
                        for k in 0..d {
                            tok[k] = tok[k] + gt[k] + scale[k] * gsum[k] * inv;
                        }
                    }
                }
            }
            if let Some(l) = lambda {
                sink.add_owned(*l, dl);
            }
        }
        _ => unreachable!("not an nn op"),
    }
}
