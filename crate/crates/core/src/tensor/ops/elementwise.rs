use crate::error::{Error, Result};
use crate::tensor::tape::{GradSink, Node, Op};
use crate::tensor::{Real, Var};

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    if lhs.len() != rhs.len() {
        return Error::dim(op, format!("rank {} {:?} vs rank {} {:?}", lhs.len(), lhs, rhs.len(), rhs));
    }
    let axes: Vec<String> = lhs
        .iter()
        .zip(rhs)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, (a, b))| format!("axis {i}: {a} vs {b}"))
        .collect();
    Error::dim(op, axes.join(", "))
}

/// Sum with pairwise reduction; exact for equal addends when the count
/// is a power of two.
pub(crate) fn pairwise_sum<F: Real>(xs: &[F]) -> F {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().fold(F::zero(), |a, &b| a + b);
    }
    let mid = xs.len().next_power_of_two() / 2;
    let mid = if mid >= xs.len() { xs.len() / 2 } else { mid };
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn gelu<F: Real>(x: F) -> F {
    let half = F::cst(0.5);
    half * x * (F::one() + (x * F::cst(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let cdf = F::cst(0.5) * (F::one() + (x * F::cst(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * F::cst(0.5)).exp() * F::cst(0.398_942_280_401_432_7);
    cdf + x * pdf
}

impl<'t, F: Real> Var<'t, F> {
    fn binary(self, rhs: Var<'t, F>, name: &'static str, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_tape(&rhs, name)?;
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls != rs {
            return Err(mismatch(name, &ls, &rs));
        }
        let (a, b) = (self.value(), rhs.value());
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(ls, out, op, rg))
    }

    fn unary(self, op: Op<F>, f: impl Fn(F) -> F) -> Self {
        let out = self.value().iter().map(|&x| f(x)).collect();
        self.tape.push(self.shape(), out, op, self.requires_grad())
    }

    pub fn add(self, rhs: Var<'t, F>) -> Result<Self> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Result<Self> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Result<Self> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn scale(self, c: F) -> Self {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    fn scalar_operand(self, s: Var<'t, F>, name: &'static str) -> Result<F> {
        self.same_tape(&s, name)?;
        if s.numel() != 1 {
            return Err(Error::dim(name, format!("scalar operand has shape {:?}", s.shape())));
        }
        Ok(s.item())
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(self, s: Var<'t, F>) -> Result<Self> {
        let c = self.scalar_operand(s, "add_scalar")?;
        let out = self.value().iter().map(|&x| x + c).collect();
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self.tape.push(self.shape(), out, Op::AddScalar { x: self.id, s: s.id }, rg))
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(self, s: Var<'t, F>) -> Result<Self> {
        let c = self.scalar_operand(s, "mul_scalar")?;
        let out = self.value().iter().map(|&x| x * c).collect();
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self.tape.push(self.shape(), out, Op::MulScalar { x: self.id, s: s.id }, rg))
    }

    pub fn recip(self) -> Self {
        self.unary(Op::Recip(self.id), |x| F::one() / x)
    }

    /// Clamps into `[lo, hi]`; the gradient passes on the closed interval.
    pub fn clamp(self, lo: F, hi: F) -> Self {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |x| x.max(lo).min(hi))
    }

    pub fn clamp_min(self, lo: F) -> Self {
        self.clamp(lo, F::infinity())
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |x| x.exp())
    }

    pub fn log(self) -> Self {
        self.unary(Op::Log(self.id), |x| x.ln())
    }

    /// `ln(x / reference)` against a constant reference of equal length.
    pub fn log_ratio(self, reference: &[F]) -> Result<Self> {
        let v = self.value();
        if reference.len() != v.len() {
            return Err(Error::dim(
                "log_ratio",
                format!("axis 0: {} vs {}", v.len(), reference.len()),
            ));
        }
        let out = v.iter().zip(reference).map(|(&x, &r)| (x / r).ln()).collect();
        Ok(self.tape.push(self.shape(), out, Op::LogRatio(self.id), self.requires_grad()))
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Exact Gaussian-CDF GELU.
    pub fn gelu(self) -> Self {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn sum(self) -> Self {
        let s = pairwise_sum(&self.value());
        self.tape.push(vec![], vec![s], Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Self {
        let v = self.value();
        let s = pairwise_sum(&v) / F::cst(v.len() as f64);
        self.tape.push(vec![], vec![s], Op::Mean(self.id), self.requires_grad())
    }
}

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    let val = |id: usize| nodes[id].value.clone();
    match &node.op {
        Op::Add(a, b) => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add(*a, g);
            if sink.wants(*b) {
                sink.add_owned(*b, g.iter().map(|&v| -v).collect());
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if sink.wants(*a) {
                sink.add_owned(*a, g.iter().zip(vb.iter()).map(|(&g, &y)| g * y).collect());
            }
            if sink.wants(*b) {
                sink.add_owned(*b, g.iter().zip(va.iter()).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::Scale(x, c) => {
            if sink.wants(*x) {
                sink.add_owned(*x, g.iter().map(|&v| v * *c).collect());
            }
        }
        Op::AddScalar { x, s } => {
            sink.add(*x, g);
            if sink.wants(*s) {
                sink.add_owned(*s, vec![pairwise_sum(g)]);
            }
        }
        Op::MulScalar { x, s } => {
            let c = val(*s)[0];
            if sink.wants(*x) {
                sink.add_owned(*x, g.iter().map(|&v| v * c).collect());
            }
            if sink.wants(*s) {
                let vx = val(*x);
                let d: F = g.iter().zip(vx.iter()).map(|(&g, &x)| g * x).sum();
                sink.add_owned(*s, vec![d]);
            }
        }
        Op::Recip(x) => map_grad(sink, *x, g, &node.value, |g, y, _| -g * y * y, &val(*x)),
        Op::Clamp { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            map_grad(sink, *x, g, &node.value, |g, _, x| if x >= lo && x <= hi { g } else { F::zero() }, &val(*x))
        }
        Op::Exp(x) => map_grad(sink, *x, g, &node.value, |g, y, _| g * y, &val(*x)),
        Op::Log(x) => map_grad(sink, *x, g, &node.value, |g, _, x| g / x, &val(*x)),
        Op::LogRatio(x) => map_grad(sink, *x, g, &node.value, |g, _, x| g / x, &val(*x)),
        Op::Sqrt(x) => map_grad(
            sink,
            *x,
            g,
            &node.value,
            |g, y, _| if y > F::zero() { g / (y + y) } else { F::zero() },
            &val(*x),
        ),
        Op::Square(x) => map_grad(sink, *x, g, &node.value, |g, _, x| g * (x + x), &val(*x)),
        Op::Gelu(x) => map_grad(sink, *x, g, &node.value, |g, _, x| g * gelu_grad(x), &val(*x)),
        Op::Sigmoid(x) => map_grad(sink, *x, g, &node.value, |g, y, _| g * y * (F::one() - y), &val(*x)),
        Op::Sum(x) => {
            if sink.wants(*x) {
                sink.add_owned(*x, vec![g[0]; nodes[*x].value.len()]);
            }
        }
        Op::Mean(x) => {
            if sink.wants(*x) {
                let n = nodes[*x].value.len();
                sink.add_owned(*x, vec![g[0] / F::cst(n as f64); n]);
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}

/// Applies `f(grad_out, output, input)` elementwise into the input's slot.
fn map_grad<F: Real>(
    sink: &mut GradSink<F>,
    x: usize,
    g: &[F],
    out: &[F],
    f: impl Fn(F, F, F) -> F,
    input: &[F],
) {
    if let Some(acc) = sink.slot(x) {
        for i in 0..acc.len() {
            acc[i] = acc[i] + f(g[i], out[i], input[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn gelu_and_sigmoid_at_zero() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        for x in [50.0f32, 100.0, 1e4, f32::MAX] {
            let y = sigmoid(x);
            assert!(y.is_finite() && (1.0 - y).abs() <= 1e-6);
            assert!(sigmoid(-x) >= 0.0 && sigmoid(-x).is_finite());
        }
    }

    #[test]
    fn mismatch_names_axes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant([2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant([2, 4], vec![0.0; 8]).unwrap();
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("axis 1: 3 vs 4"), "{msg}");
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn([3, 2], |i| i as f64 - 2.5).with_grad());
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_grad_is_twice_x() {
        let tape = Tape::<f64>::new();
        let t = Tensor::from_fn([5], |i| i as f64 * 0.7 - 1.0).with_grad();
        let x = tape.leaf(&t);
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        for (gi, xi) in g.get(x).unwrap().iter().zip(t.data()) {
            assert_eq!(*gi, 2.0 * xi);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn([4], |i| i as f64).with_grad());
        let y = x.scale(3.0);
        let loss = y.add(y).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros([3]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn pairwise_sum_of_equal_values_is_exact() {
        let d = std::f64::consts::LN_2;
        let v = vec![d; 4096];
        assert_eq!(pairwise_sum(&v) / 4096.0, d);
    }
}
