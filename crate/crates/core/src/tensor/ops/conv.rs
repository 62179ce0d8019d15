use crate::error::{Error, Result};
use crate::tensor::tape::{ConvGeom, GradSink, Node, Op};
use crate::tensor::{Real, Var};

/// `floor((size + 2·pad − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

/// `(size − 1)·stride − 2·pad + kernel`, or `None` when negative.
pub fn deconv2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size == 0 {
        return None;
    }
    ((size - 1) * stride + kernel).checked_sub(2 * pad).filter(|&s| s > 0)
}

/// Spatial layout of one convolution between an image side (`h × w`) and
/// a column side (`oh × ow`).
#[derive(Clone, Copy, Debug)]
struct Plan {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Plan {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }

    fn im2col<F: Real>(&self, img: &[F], col: &mut [F]) {
        let (s, p) = (self.geom.stride as isize, self.geom.pad as isize);
        let cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ki as isize - p;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(F::zero());
                            continue;
                        }
                        let src = &img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *v = if ix >= 0 && ix < self.w as isize { src[ix as usize] } else { F::zero() };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, col: &[F], img: &mut [F]) {
        let (s, p) = (self.geom.stride as isize, self.geom.pad as isize);
        let cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column matrix of `img`; borrows when the kernel is pointwise.
    fn columns<'a, F: Real>(&self, img: &'a [F], buf: &'a mut Vec<F>) -> &'a [F] {
        if self.is_pointwise() {
            img
        } else {
            buf.resize(self.rows() * self.cols(), F::zero());
            self.im2col(img, buf);
            buf
        }
    }

    /// `img += col2im(col)`.
    fn scatter<F: Real>(&self, col: &[F], img: &mut [F]) {
        if self.is_pointwise() {
            img.iter_mut().zip(col).for_each(|(a, &b)| *a = *a + b);
        } else {
            self.col2im(col, img);
        }
    }
}

/// Validated shapes for a convolution mapping `[B, cin, h, w]` to
/// `[B, cout, oh, ow]` with weight `[cout, cin, kh, kw]`.
struct ConvShapes {
    batch: usize,
    cout: usize,
    plan: Plan,
}

fn conv_shapes(op: &'static str, x: &[usize], w: &[usize], geom: ConvGeom) -> Result<ConvShapes> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::dim(op, format!("expected rank-4 input and weight, got {:?} and {:?}", x, w)));
    }
    if x[1] != w[1] {
        return Err(Error::dim(op, format!("axis 1 (input channels): input {} vs weight {}", x[1], w[1])));
    }
    let oh = conv2d_output_size(x[2], w[2], geom.stride, geom.pad)
        .ok_or_else(|| Error::dim(op, format!("axis 2: kernel {} does not fit height {}", w[2], x[2])))?;
    let ow = conv2d_output_size(x[3], w[3], geom.stride, geom.pad)
        .ok_or_else(|| Error::dim(op, format!("axis 3: kernel {} does not fit width {}", w[3], x[3])))?;
    Ok(ConvShapes {
        batch: x[0],
        cout: w[0],
        plan: Plan { c: x[1], h: x[2], w: x[3], kh: w[2], kw: w[3], oh, ow, geom },
    })
}

/// Shapes of a transposed convolution, expressed as the adjoint conv
/// from `[B, cout, oh, ow]` (the deconv output) to `[B, cin, h, w]`.
fn deconv_shapes(x: &[usize], w: &[usize], geom: ConvGeom) -> Result<(ConvShapes, [usize; 4])> {
    const OP: &str = "deconv2d";
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::dim(OP, format!("expected rank-4 input and weight, got {:?} and {:?}", x, w)));
    }
    if x[1] != w[0] {
        return Err(Error::dim(OP, format!("axis 1 (input channels): input {} vs weight {}", x[1], w[0])));
    }
    let oh = deconv2d_output_size(x[2], w[2], geom.stride, geom.pad)
        .ok_or_else(|| Error::dim(OP, format!("axis 2: empty output for height {}", x[2])))?;
    let ow = deconv2d_output_size(x[3], w[3], geom.stride, geom.pad)
        .ok_or_else(|| Error::dim(OP, format!("axis 3: empty output for width {}", x[3])))?;
    let out = [x[0], w[1], oh, ow];
    let adj = conv_shapes(OP, &out, w, geom)?;
    debug_assert_eq!((adj.plan.oh, adj.plan.ow), (x[2], x[3]));
    Ok((adj, out))
}

fn add_bias<F: Real>(out: &mut [F], bias: &[F], batch: usize, hw: usize) {
    let c = bias.len();
    for bi in 0..batch {
        for (ci, &b) in bias.iter().enumerate() {
            out[(bi * c + ci) * hw..][..hw].iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn bias_grad<F: Real>(g: &[F], db: &mut [F], batch: usize, hw: usize) {
    let c = db.len();
    for bi in 0..batch {
        for (ci, d) in db.iter_mut().enumerate() {
            *d = *d + g[(bi * c + ci) * hw..][..hw].iter().copied().sum::<F>();
        }
    }
}

fn check_bias<F: Real>(op: &'static str, b: Option<Var<'_, F>>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [channels] => {
            Err(Error::dim(op, format!("bias {:?} vs {} output channels", b.shape(), channels)))
        }
        _ => Ok(()),
    }
}

/// Raw conv forward: `out[b] = W · im2col(x[b])`.
fn conv_forward<F: Real>(s: &ConvShapes, x: &[F], w: &[F], out: &mut [F]) {
    let p = &s.plan;
    let (rows, cols) = (p.rows(), p.cols());
    let in_sz = p.c * p.h * p.w;
    let mut buf = Vec::new();
    for bi in 0..s.batch {
        let col = p.columns(&x[bi * in_sz..(bi + 1) * in_sz], &mut buf);
        let dst = &mut out[bi * s.cout * cols..(bi + 1) * s.cout * cols];
        F::gemm(s.cout, rows, cols, w, rows, 1, col, cols, 1, F::one(), dst, cols, 1);
    }
}

/// `dx[b] += col2im(Wᵀ · g[b])`.
fn conv_backward_input<F: Real>(s: &ConvShapes, g: &[F], w: &[F], dx: &mut [F]) {
    let p = &s.plan;
    let (rows, cols) = (p.rows(), p.cols());
    let in_sz = p.c * p.h * p.w;
    let mut col = vec![F::zero(); rows * cols];
    for bi in 0..s.batch {
        let gb = &g[bi * s.cout * cols..(bi + 1) * s.cout * cols];
        F::gemm(rows, s.cout, cols, w, 1, rows, gb, cols, 1, F::zero(), &mut col, cols, 1);
        p.scatter(&col, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
    }
}

/// `dw += Σ_b g[b] · im2col(x[b])ᵀ`.
fn conv_backward_weight<F: Real>(s: &ConvShapes, g: &[F], x: &[F], dw: &mut [F]) {
    let p = &s.plan;
    let (rows, cols) = (p.rows(), p.cols());
    let in_sz = p.c * p.h * p.w;
    let mut buf = Vec::new();
    for bi in 0..s.batch {
        let col = p.columns(&x[bi * in_sz..(bi + 1) * in_sz], &mut buf);
        let gb = &g[bi * s.cout * cols..(bi + 1) * s.cout * cols];
        F::gemm(s.cout, cols, rows, gb, cols, 1, col, 1, cols, F::one(), dw, rows, 1);
    }
}

impl<'t, F: Real> Var<'t, F> {
    /// 2-D convolution of `[B, Cin, H, W]` by `[Cout, Cin, kh, kw]`.
    pub fn conv2d(self, w: Var<'t, F>, b: Option<Var<'t, F>>, stride: usize, pad: usize) -> Result<Self> {
        self.same_tape(&w, "conv2d")?;
        if stride == 0 {
            return Err(Error::Argument("conv2d: stride must be at least 1".into()));
        }
        let geom = ConvGeom { stride, pad };
        let s = conv_shapes("conv2d", &self.shape(), &w.shape(), geom)?;
        check_bias("conv2d", b, s.cout)?;
        let hw = s.plan.cols();
        let mut out = vec![F::zero(); s.batch * s.cout * hw];
        if let Some(b) = b {
            add_bias(&mut out, &b.value(), s.batch, hw);
        }
        conv_forward(&s, &self.value(), &w.value(), &mut out);
        self.tape.count_macs((s.batch * s.cout * s.plan.rows() * hw) as u64);
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        let shape = vec![s.batch, s.cout, s.plan.oh, s.plan.ow];
        Ok(self.tape.push(shape, out, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg))
    }

    /// Transposed convolution of `[B, Cin, H, W]` by `[Cin, Cout, kh, kw]`;
    /// the adjoint of [`Var::conv2d`] with the same weight.
    pub fn deconv2d(self, w: Var<'t, F>, b: Option<Var<'t, F>>, stride: usize, pad: usize) -> Result<Self> {
        self.same_tape(&w, "deconv2d")?;
        if stride == 0 {
            return Err(Error::Argument("deconv2d: stride must be at least 1".into()));
        }
        let geom = ConvGeom { stride, pad };
        let (adj, out_shape) = deconv_shapes(&self.shape(), &w.shape(), geom)?;
        check_bias("deconv2d", b, out_shape[1])?;
        let hw = out_shape[2] * out_shape[3];
        let mut out = vec![F::zero(); out_shape.iter().product()];
        if let Some(b) = b {
            add_bias(&mut out, &b.value(), out_shape[0], hw);
        }
        conv_backward_input(&adj, &self.value(), &w.value(), &mut out);
        self.tape.count_macs((adj.batch * adj.cout * adj.plan.rows() * adj.plan.cols()) as u64);
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(out_shape.to_vec(), out, Op::Deconv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }, rg))
    }
}

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    match node.op {
        Op::Conv2d { x, w, b, geom } => {
            let s = conv_shapes("conv2d", &nodes[x].shape, &nodes[w].shape, geom).expect("validated");
            if let Some(dx) = sink.slot(x) {
                conv_backward_input(&s, g, &nodes[w].value, dx);
            }
            if let Some(dw) = sink.slot(w) {
                conv_backward_weight(&s, g, &nodes[x].value, dw);
            }
            if let Some(db) = b.and_then(|b| sink.slot(b)) {
                bias_grad(g, db, s.batch, s.plan.cols());
            }
        }
        Op::Deconv2d { x, w, b, geom } => {
            let (adj, out_shape) = deconv_shapes(&nodes[x].shape, &nodes[w].shape, geom).expect("validated");
            if let Some(dx) = sink.slot(x) {
                conv_forward(&adj, g, &nodes[w].value, dx);
            }
            if let Some(dw) = sink.slot(w) {
                conv_backward_weight(&adj, &nodes[x].value, g, dw);
            }
            if let Some(db) = b.and_then(|b| sink.slot(b)) {
                bias_grad(g, db, out_shape[0], out_shape[2] * out_shape[3]);
            }
        }
        _ => unreachable!("not a convolution op"),
    }
}
