//! Parameter naming and application for the common layer types.

use crate::attention::AttentionParams;
use crate::error::Result;
use crate::params::{Bound, ParamInit};
use crate::tensor::{Real, Var};

pub const NORM_EPS: f64 = 1e-5;

pub fn init_linear<F: Real>(init: &mut ParamInit<F>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
    init.fan_in(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in)?;
    if bias {
        init.zeros(&format!("{prefix}.b"), &[fan_out])?;
    }
    Ok(())
}

pub fn init_norm<F: Real>(init: &mut ParamInit<F>, prefix: &str, d: usize) -> Result<()> {
    init.full(&format!("{prefix}.g"), &[d], 1.0)?;
    init.zeros(&format!("{prefix}.b"), &[d])
}

pub fn init_conv<F: Real>(init: &mut ParamInit<F>, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    init.fan_in(&format!("{prefix}.w"), &[cout, cin, k, k], cin * k * k)?;
    init.zeros(&format!("{prefix}.b"), &[cout])
}

pub fn init_zero_conv<F: Real>(init: &mut ParamInit<F>, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    init.zeros(&format!("{prefix}.w"), &[cout, cin, k, k])?;
    init.zeros(&format!("{prefix}.b"), &[cout])
}

fn optional<'t, F: Real>(p: &Bound<'t, '_, F>, name: &str) -> Result<Option<Var<'t, F>>> {
    if p.has(name) {
        p.var(name).map(Some)
    } else {
        Ok(None)
    }
}

pub fn linear<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    x.linear(p.var(&format!("{prefix}.w"))?, optional(p, &format!("{prefix}.b"))?)
}

pub fn layer_norm<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    x.layer_norm(p.var(&format!("{prefix}.g"))?, p.var(&format!("{prefix}.b"))?, F::cst(NORM_EPS))
}

/// Convolution with `same` padding for odd kernels.
pub fn conv<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>, stride: usize) -> Result<Var<'t, F>> {
    let w = p.var(&format!("{prefix}.w"))?;
    let pad = w.shape()[2] / 2;
    x.conv2d(w, optional(p, &format!("{prefix}.b"))?, stride, pad)
}

/// Two-layer GELU MLP on the last axis.
pub fn init_mlp<F: Real>(init: &mut ParamInit<F>, prefix: &str, d: usize, hidden: usize) -> Result<()> {
    init_linear(init, &format!("{prefix}.fc1"), d, hidden, true)?;
    init_linear(init, &format!("{prefix}.fc2"), hidden, d, true)
}

pub fn mlp<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), h)
}

/// q/k/v/proj projections plus a zero relative-position table for windows
/// up to `window×window`. Dot-product scoring is blind to a key bias (it
/// shifts a whole softmax row), so it is only created for cosine scoring.
pub fn init_attention<F: Real>(
    init: &mut ParamInit<F>,
    prefix: &str,
    d: usize,
    heads: usize,
    window: usize,
    key_bias: bool,
) -> Result<()> {
    for part in ["q", "k", "v", "proj"] {
        init_linear(init, &format!("{prefix}.{part}"), d, d, part != "k" || key_bias)?;
    }
    let span = 2 * window - 1;
    init.zeros(&format!("{prefix}.rel"), &[span * span, heads])
}

pub fn attention_params<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str) -> Result<AttentionParams<'t, F>> {
    let get = |part: &str| p.var(&format!("{prefix}.{part}"));
    let opt = |part: &str| optional(p, &format!("{prefix}.{part}"));
    Ok(AttentionParams {
        q_w: get("q.w")?,
        q_b: opt("q.b")?,
        k_w: get("k.w")?,
        k_b: opt("k.b")?,
        v_w: get("v.w")?,
        v_b: opt("v.b")?,
        proj_w: get("proj.w")?,
        proj_b: opt("proj.b")?,
        rel_table: opt("rel")?,
    })
}
