//! Named parameter storage and its binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{grad_check_multi, GradCheckReport, Gradients, Real, Tape, Tensor, Var};

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Real> Params<F> {
    pub fn new() -> Self {
        Params { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a: stable across platforms and toolchains.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Creates parameters with deterministic per-name random streams, so a
/// parameter's initial value does not depend on which others exist.
pub struct ParamInit<F> {
    seed: u64,
    pub params: Params<F>,
}

impl<F: Real> ParamInit<F> {
    pub fn new(seed: u64) -> Self {
        ParamInit { seed, params: Params::new() }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let mut rng = self.rng(name);
        let t = Tensor::from_fn(shape.to_vec(), |_| F::cst(rng.gen_range(-bound..=bound)));
        self.params.insert(name, t)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        self.uniform(name, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn full(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.params.insert(name, Tensor::full(shape.to_vec(), F::cst(value)))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.full(name, shape, 0.0)
    }

    pub fn finish(self) -> Params<F> {
        self.params
    }
}

/// Parameters recorded as leaves of one tape, created on first use.
pub struct Bound<'t, 'p, F: Real> {
    tape: &'t Tape<F>,
    params: &'p Params<F>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t, F>>>>,
}

impl<'t, 'p, F: Real> Bound<'t, 'p, F> {
    /// With `trainable`, every bound parameter receives a gradient.
    pub fn new(tape: &'t Tape<F>, params: &'p Params<F>, trainable: bool) -> Self {
        Bound { tape, params, trainable, vars: RefCell::new(vec![None; params.len()]) }
    }

    /// Uses existing tape values as the parameters, in parameter order.
    pub fn from_vars(tape: &'t Tape<F>, params: &'p Params<F>, vars: &[Var<'t, F>]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Argument(format!("{} values for {} parameters", vars.len(), params.len())));
        }
        for ((name, t), v) in params.iter().zip(vars) {
            if v.shape() != t.shape() {
                return Err(Error::dim("bind", format!("{name}: {:?} vs {:?}", v.shape(), t.shape())));
            }
        }
        let vars = RefCell::new(vars.iter().copied().map(Some).collect());
        Ok(Bound { tape, params, trainable: true, vars })
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, F>> {
        let i = self.params.position(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars.borrow()[i] {
            return Ok(v);
        }
        let t = &self.params.entries[i].1;
        let v = if self.trainable {
            self.tape.param(t.shape().to_vec(), t.data().to_vec())?
        } else {
            self.tape.leaf(t)
        };
        self.vars.borrow_mut()[i] = Some(v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.position(name).is_some()
    }

    /// Gradients aligned with the parameter order; parameters that were
    /// never used get zeros.
    pub fn grads(&self, g: &Gradients<F>) -> Vec<Vec<F>> {
        let vars = self.vars.borrow();
        self.params
            .iter()
            .zip(vars.iter())
            .map(|((_, t), v)| match v {
                Some(v) => g.get_or_zeros(*v),
                None => vec![F::zero(); t.numel()],
            })
            .collect()
    }
}

/// Gradient check of `f` with respect to `inputs` and every parameter in
/// `params` at once.
pub fn grad_check_with_params<Fun>(
    params: &Params<f64>,
    inputs: &[Tensor<f64>],
    max_coords: Option<usize>,
    f: Fun,
) -> Result<GradCheckReport>
where
    Fun: for<'t, 'p> Fn(&Bound<'t, 'p, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let n = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(params.iter().map(|(_, t)| t.clone()));
    grad_check_multi(
        |tape, vars| {
            let bound = Bound::from_vars(tape, params, &vars[n..])?;
            f(&bound, &vars[..n])
        },
        &all,
        max_coords,
    )
}
