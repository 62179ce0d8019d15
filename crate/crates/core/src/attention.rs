//! Multi-head attention inside windows: scaled dot-product scoring for the
//! encoder and cosine scoring with a learnable temperature for the decoder.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};
use crate::window::{relative_position_index, WindowGeometry};

/// Lower bound applied to the decoder temperature.
pub const TAU_MIN: f64 = 0.01;

/// Denominator guard of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// MAC-counter scope of the query-key and weight-value products.
pub const CORE_SCOPE: &str = "attention_core";

/// How query-key pairs are scored.
#[derive(Clone, Copy, Debug)]
pub enum Scoring<'t, F: Real> {
    /// `q·k / √d`.
    Dot,
    /// `cos(q, k) / max(τ, 0.01)` with a one-element `τ`.
    Cosine { tau: Var<'t, F> },
}

/// Projections of one attention layer. Weights are stored `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams<'t, F: Real> {
    pub q_w: Var<'t, F>,
    /// Query bias; in the decoder this is the learnable bias added to every
    /// query before scoring.
    pub q_b: Option<Var<'t, F>>,
    pub k_w: Var<'t, F>,
    pub k_b: Option<Var<'t, F>>,
    pub v_w: Var<'t, F>,
    pub v_b: Option<Var<'t, F>>,
    pub proj_w: Var<'t, F>,
    pub proj_b: Option<Var<'t, F>>,
    /// `[(2T−1)², heads]` relative-position bias for windows up to `T×T`.
    pub rel_table: Option<Var<'t, F>>,
}

pub struct AttentionOutput<'t, F: Real> {
    /// `[B·nW, S², C]`.
    pub out: Var<'t, F>,
    /// `[B·nW, heads, S², S²]` softmax weights.
    pub weights: Var<'t, F>,
}

/// `[M, N, C] → [M·h, N, C/h]`.
fn split_heads<'t, F: Real>(x: Var<'t, F>, heads: usize) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (m, n, c) = (s[0], s[1], s[2]);
    x.reshape([m, n, heads, c / heads])?.permute(&[0, 2, 1, 3])?.reshape([m * heads, n, c / heads])
}

fn merge_heads<'t, F: Real>(x: Var<'t, F>, heads: usize) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (m, n, d) = (s[0] / heads, s[1], s[2]);
    x.reshape([m, heads, n, d])?.permute(&[0, 2, 1, 3])?.reshape([m, n, heads * d])
}

/// Attention within every window of `win: [B·nW, S², C]`, laid out by
/// `geo`. Shifted or padded geometries get the matching additive mask.
pub fn window_attention<'t, F: Real>(
    win: Var<'t, F>,
    heads: usize,
    p: &AttentionParams<'t, F>,
    geo: &WindowGeometry,
    scoring: Scoring<'t, F>,
) -> Result<AttentionOutput<'t, F>> {
    let s = win.shape();
    let n = geo.tokens_per_window();
    let nw = geo.windows_per_image();
    if s.len() != 3 || s[0] != geo.batch * nw || s[1] != n {
        return Err(Error::dim(
            "window_attention",
            format!("expected [{}, {}, C], got {:?}", geo.batch * nw, n, s),
        ));
    }
    let (m, c) = (s[0], s[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {heads} heads")));
    }
    let d = c / heads;
    let tape = win.tape();
    let q = split_heads(win.linear(p.q_w, p.q_b)?, heads)?;
    let k = split_heads(win.linear(p.k_w, p.k_b)?, heads)?;
    let v = split_heads(win.linear(p.v_w, p.v_b)?, heads)?;

    let mut scores = match scoring {
        Scoring::Dot => tape.with_scope(CORE_SCOPE, || q.bmm(k, false, true))?.scale(F::cst(1.0 / (d as f64).sqrt())),
        Scoring::Cosine { tau } => {
            let qn = q.l2_normalize(F::cst(COSINE_EPS))?;
            let kn = k.l2_normalize(F::cst(COSINE_EPS))?;
            let inv_tau = tau.clamp_min(F::cst(TAU_MIN)).recip();
            tape.with_scope(CORE_SCOPE, || qn.bmm(kn, false, true))?.mul_scalar(inv_tau)?
        }
    };

    if let Some(table) = p.rel_table {
        let ts = table.shape();
        let span = (ts[0] as f64).sqrt().round() as usize;
        if ts.len() != 2 || ts[1] != heads || span * span != ts[0] || span % 2 == 0 || span < 2 * geo.size - 1 {
            return Err(Error::dim(
                "window_attention",
                format!("relative table {:?} does not cover window {} with {} heads", ts, geo.size, heads),
            ));
        }
        let one = relative_position_index(geo.size, (span + 1) / 2, heads);
        let index: Rc<[u32]> = one.iter().copied().cycle().take(m * one.len()).collect();
        scores = scores.add(table.gather(index, vec![m * heads, n, n]))?;
    }

    if let Some(mask) = geo.attention_mask::<F>() {
        let mut full = Vec::with_capacity(m * heads * n * n);
        for _ in 0..geo.batch {
            for block in mask.chunks(n * n) {
                for _ in 0..heads {
                    full.extend_from_slice(block);
                }
            }
        }
        scores = scores.add(tape.constant([m * heads, n, n], full)?)?;
    }

    let weights = scores.softmax_lastdim()?;
    let mixed = tape.with_scope(CORE_SCOPE, || weights.bmm(v, false, false))?;
    let out = merge_heads(mixed, heads)?.linear(p.proj_w, p.proj_b)?;
    Ok(AttentionOutput { out, weights: weights.reshape([m, heads, n, n])? })
}
