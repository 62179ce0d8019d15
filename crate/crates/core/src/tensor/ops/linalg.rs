use crate::error::{Error, Result};
use crate::tensor::tape::{GradSink, Node, Op};
use crate::tensor::{Real, Var};

/// Row/column strides of a logical `rows × cols` matrix stored either
/// as-is or transposed.
fn strides(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, rows)
    } else {
        (cols, 1)
    }
}

struct BmmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn bmm_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<BmmDims> {
    if a.len() != 3 || b.len() != 3 {
        return Err(Error::dim("bmm", format!("expected rank-3 operands, got {:?} and {:?}", a, b)));
    }
    if a[0] != b[0] {
        return Err(Error::dim("bmm", format!("axis 0 (batch): {} vs {}", a[0], b[0])));
    }
    let (m, k) = if ta { (a[2], a[1]) } else { (a[1], a[2]) };
    let (k2, n) = if tb { (b[2], b[1]) } else { (b[1], b[2]) };
    if k != k2 {
        return Err(Error::dim("bmm", format!("contraction axis: {} vs {}", k, k2)));
    }
    Ok(BmmDims { batch: a[0], m, k, n })
}

impl<'t, F: Real> Var<'t, F> {
    /// `x·w + b` over the last axis of `x`, with `w` stored `[in, out]`.
    pub fn linear(self, w: Var<'t, F>, b: Option<Var<'t, F>>) -> Result<Self> {
        self.same_tape(&w, "linear")?;
        let xs = self.shape();
        let ws = w.shape();
        let k = *xs.last().ok_or_else(|| Error::dim("linear", "input is a scalar"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::dim("linear", format!("input features {} vs weight {:?}", k, ws)));
        }
        let n = ws[1];
        if let Some(b) = b {
            self.same_tape(&b, "linear")?;
            if b.shape() != [n] {
                return Err(Error::dim("linear", format!("bias {:?} vs {} outputs", b.shape(), n)));
            }
        }
        let m = if k == 0 { 0 } else { self.numel() / k };
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(n.max(1)) {
                row.copy_from_slice(&bv);
            }
        }
        let (xv, wv) = (self.value(), w.value());
        F::gemm(m, k, n, &xv, k, 1, &wv, n, 1, F::one(), &mut out, n, 1);
        self.tape.count_macs((m * k * n) as u64);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(shape, out, Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) }, rg))
    }

    /// Batched matrix product of `[B, m, k]` by `[B, k, n]`, each operand
    /// optionally read transposed.
    pub fn bmm(self, rhs: Var<'t, F>, ta: bool, tb: bool) -> Result<Self> {
        self.same_tape(&rhs, "bmm")?;
        let d = bmm_dims(&self.shape(), &rhs.shape(), ta, tb)?;
        let (av, bv) = (self.value(), rhs.value());
        let (rsa, csa) = strides(d.m, d.k, ta);
        let (rsb, csb) = strides(d.k, d.n, tb);
        let mut out = vec![F::zero(); d.batch * d.m * d.n];
        for bi in 0..d.batch {
            let a = &av[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let b = &bv[bi * d.k * d.n..(bi + 1) * d.k * d.n];
            let c = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
            F::gemm(d.m, d.k, d.n, a, rsa, csa, b, rsb, csb, F::zero(), c, d.n, 1);
        }
        self.tape.count_macs((d.batch * d.m * d.k * d.n) as u64);
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(vec![d.batch, d.m, d.n], out, Op::Bmm { a: self.id, b: rhs.id, ta, tb }, rg))
    }
}

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    match node.op {
        Op::Linear { x, w, b } => {
            let ws = &nodes[w].shape;
            let (k, n) = (ws[0], ws[1]);
            let m = if k == 0 { 0 } else { nodes[x].value.len() / k };
            if let Some(dx) = sink.slot(x) {
                let wv = &nodes[w].value;
                F::gemm(m, n, k, g, n, 1, wv, 1, n, F::one(), dx, k, 1);
            }
            if let Some(dw) = sink.slot(w) {
                let xv = &nodes[x].value;
                F::gemm(k, m, n, xv, 1, k, g, n, 1, F::one(), dw, n, 1);
            }
            if let Some(b) = b {
                if let Some(db) = sink.slot(b) {
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                }
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let d = bmm_dims(&nodes[a].shape, &nodes[b].shape, ta, tb).expect("validated in forward");
            let (rsa, csa) = strides(d.m, d.k, ta);
            let (rsb, csb) = strides(d.k, d.n, tb);
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            if sink.wants(a) {
                let bv = nodes[b].value.clone();
                let da = sink.slot(a).unwrap();
                for bi in 0..d.batch {
                    let gc = &g[bi * sc..(bi + 1) * sc];
                    let bb = &bv[bi * sb..(bi + 1) * sb];
                    let dst = &mut da[bi * sa..(bi + 1) * sa];
                    F::gemm(d.m, d.n, d.k, gc, d.n, 1, bb, csb, rsb, F::one(), dst, rsa, csa);
                }
            }
            if sink.wants(b) {
                let av = nodes[a].value.clone();
                let db = sink.slot(b).unwrap();
                for bi in 0..d.batch {
                    let gc = &g[bi * sc..(bi + 1) * sc];
                    let aa = &av[bi * sa..(bi + 1) * sa];
                    let dst = &mut db[bi * sb..(bi + 1) * sb];
                    F::gemm(d.k, d.m, d.n, aa, csa, rsa, gc, d.n, 1, F::one(), dst, rsb, csb);
                }
            }
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}
