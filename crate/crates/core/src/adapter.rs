//! Hierarchical awareness adapter: a bottleneck perception module on the
//! channel path and a (scaled) mean-token broadcast on the spatial path.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamInit};
use crate::tensor::{Real, Var};

/// Bottleneck width `⌈d·ρ⌉`, at least 1.
pub fn reduced_width(d: usize, ratio: f64) -> usize {
    ((d as f64 * ratio).ceil() as usize).max(1)
}

/// Scalar parameters of one perception module: both 1×1 kernels and biases.
pub fn perception_param_count(d: usize, ratio: f64) -> usize {
    let r = reduced_width(d, ratio);
    2 * d * r + r + d
}

/// Names of the adapter parameters under `prefix`.
pub struct AdapterNames {
    pub down_w: String,
    pub down_b: String,
    pub up_w: String,
    pub up_b: String,
    pub lambda: String,
}

impl AdapterNames {
    pub fn new(prefix: &str) -> Self {
        AdapterNames {
            down_w: format!("{prefix}.down.w"),
            down_b: format!("{prefix}.down.b"),
            up_w: format!("{prefix}.up.w"),
            up_b: format!("{prefix}.up.b"),
            lambda: format!("{prefix}.lambda"),
        }
    }
}

/// Adds adapter parameters for width `d`. The up-projection starts at zero
/// so a fresh adapter leaves its block unchanged.
pub fn init_adapter<F: Real>(init: &mut ParamInit<F>, prefix: &str, d: usize, ratio: f64, lambda: f64) -> Result<()> {
    let n = AdapterNames::new(prefix);
    let r = reduced_width(d, ratio);
    init.fan_in(&n.down_w, &[r, d, 1, 1], d)?;
    init.zeros(&n.down_b, &[r])?;
    init.zeros(&n.up_w, &[r, d, 1, 1])?;
    init.zeros(&n.up_b, &[d])?;
    init.full(&n.lambda, &[d], lambda)
}

/// 1×1 convolution of `[B, d, H, W]` down to the bottleneck width.
pub fn down_project<'t, F: Real>(x: Var<'t, F>, w: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    x.conv2d(w, Some(b), 1, 0)
}

/// GELU followed by a 1×1 transposed convolution back to `d` channels.
pub fn up_project<'t, F: Real>(h: Var<'t, F>, w: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    h.gelu().deconv2d(w, Some(b), 1, 0)
}

/// Perception module on a `[B, H, W, d]` token grid; the result is meant
/// to be added to the block's MLP output.
pub fn perception<'t, F: Real>(tokens: Var<'t, F>, p: &Bound<'t, '_, F>, prefix: &str) -> Result<Var<'t, F>> {
    let n = AdapterNames::new(prefix);
    let nchw = tokens.permute(&[0, 3, 1, 2])?;
    let h = down_project(nchw, p.var(&n.down_w)?, p.var(&n.down_b)?)?;
    up_project(h, p.var(&n.up_w)?, p.var(&n.up_b)?)?.permute(&[0, 2, 3, 1])
}

fn as_batched<'t, F: Real>(tokens: Var<'t, F>) -> Result<(Var<'t, F>, Vec<usize>)> {
    let s = tokens.shape();
    match s.len() {
        2 => Ok((tokens.reshape([1, s[0], s[1]])?, s)),
        3 => Ok((tokens, s)),
        _ => Err(Error::dim("broadcast", format!("expected [N, d] or [B, N, d], got {:?}", s))),
    }
}

/// `out_i = x_i + mean_j x_j` over the token axis of `[N, d]` or `[B, N, d]`.
pub fn broadcast<'t, F: Real>(tokens: Var<'t, F>) -> Result<Var<'t, F>> {
    let (x, shape) = as_batched(tokens)?;
    x.token_broadcast(None)?.reshape(shape)
}

/// `out_i = x_i + Λ ⊙ mean_j x_j`.
pub fn broadcast_scaled<'t, F: Real>(tokens: Var<'t, F>, lambda: Var<'t, F>) -> Result<Var<'t, F>> {
    let (x, shape) = as_batched(tokens)?;
    x.token_broadcast(Some(lambda))?.reshape(shape)
}
