//! Fully-connected CRF decoder: convolutional unary potentials, windowed
//! cosine attention as the pairwise term, and pixel-shuffle upsampling.

use crate::attention::{window_attention, AttentionOutput, AttentionParams, Scoring};
use crate::config::ModelConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{self, attention_params};
use crate::params::{Bound, ParamInit};
use crate::tensor::{Real, Tensor, Var};
use crate::window::{effective_window, window_partition, window_reverse, WindowGeometry};

/// Keeps the sigmoid head strictly inside `(0, 1)` in 32-bit arithmetic.
pub const HEAD_MARGIN: f64 = 1e-6;

fn level_prefix(level: usize) -> String {
    format!("dec.l{level}")
}

/// Channels leaving decoder level `k` (after the pixel shuffle).
pub fn level_out_dim(cfg: &ModelConfig, k: usize) -> usize {
    cfg.decoder_dims[(k + 1).min(3)]
}

/// Channels entering level `k`: the skip feature, plus the state below.
pub fn level_in_dim(cfg: &ModelConfig, k: usize) -> usize {
    let skip = cfg.stage_dim(3 - k);
    if k == 0 {
        skip
    } else {
        skip + level_out_dim(cfg, k - 1)
    }
}

pub fn init_decoder<F: Real>(init: &mut ParamInit<F>, cfg: &ModelConfig) -> Result<()> {
    for k in 0..4 {
        let pre = level_prefix(k);
        let d = cfg.decoder_dims[k];
        layers::init_conv(init, &format!("{pre}.unary.conv1"), level_in_dim(cfg, k), d, 3)?;
        layers::init_conv(init, &format!("{pre}.unary.conv2"), d, d, 3)?;
        for j in 0..2 {
            let blk = format!("{pre}.blk{j}");
            if cfg.fc_enabled {
                layers::init_norm(init, &format!("{blk}.norm1"), d)?;
                layers::init_attention(init, &format!("{blk}.attn"), d, cfg.decoder_heads[k], cfg.window_size, true)?;
                init.full(&format!("{blk}.attn.tau"), &[1], cfg.tau_init)?;
                layers::init_norm(init, &format!("{blk}.norm2"), d)?;
                layers::init_mlp(init, &format!("{blk}.mlp"), d, d * cfg.mlp_ratio)?;
            } else {
                layers::init_conv(init, &format!("{blk}.conv1"), d, d, 3)?;
                layers::init_conv(init, &format!("{blk}.conv2"), d, d, 3)?;
            }
        }
        layers::init_conv(init, &format!("{pre}.up"), d, 4 * level_out_dim(cfg, k), 1)?;
    }
    layers::init_conv(init, "dec.head", cfg.decoder_dims[3], 1, 3)
}

/// Names of every decoder temperature parameter.
pub fn tau_names(cfg: &ModelConfig) -> Vec<String> {
    if !cfg.fc_enabled {
        return Vec::new();
    }
    (0..4).flat_map(|k| (0..2).map(move |j| format!("{}.blk{j}.attn.tau", level_prefix(k)))).collect()
}

/// Unary term: 3×3 conv, GELU, 3×3 conv.
pub fn unary_potential<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, feat: Var<'t, F>) -> Result<Var<'t, F>> {
    let h = layers::conv(p, &format!("{prefix}.conv1"), feat, 1)?.gelu();
    layers::conv(p, &format!("{prefix}.conv2"), h, 1)
}

/// Cosine attention with temperature `tau` (clamped to ≥ 0.01), a learnable
/// query bias (`params.q_b`) and relative-position bias, inside each window
/// of `tokens: [B·nW, S², C]`.
pub fn dynamic_scaling_attention<'t, F: Real>(
    tokens: Var<'t, F>,
    heads: usize,
    params: &AttentionParams<'t, F>,
    tau: Var<'t, F>,
    geo: &WindowGeometry,
) -> Result<AttentionOutput<'t, F>> {
    window_attention(tokens, heads, params, geo, Scoring::Cosine { tau })
}

/// Attention block on `[B, H, W, D]` tokens.
fn attention_block<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    prefix: &str,
    x: Var<'t, F>,
    heads: usize,
    window: usize,
    shifted: bool,
) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (size, shift) = effective_window(s[1], s[2], window, shifted);
    let t = layers::layer_norm(p, &format!("{prefix}.norm1"), x)?;
    let (win, geo) = window_partition(t, size, shift)?;
    let params = attention_params(p, &format!("{prefix}.attn"))?;
    let tau = p.var(&format!("{prefix}.attn.tau"))?;
    let a = dynamic_scaling_attention(win, heads, &params, tau, &geo)?;
    let x = x.add(window_reverse(a.out, &geo)?)?;
    let t = layers::layer_norm(p, &format!("{prefix}.norm2"), x)?;
    x.add(layers::mlp(p, &format!("{prefix}.mlp"), t)?)
}

/// Convolutional stand-in for an attention block when fully-connected
/// decoding is switched off.
fn conv_block<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let h = layers::conv(p, &format!("{prefix}.conv1"), x, 1)?.gelu();
    x.add(layers::conv(p, &format!("{prefix}.conv2"), h, 1)?)
}

/// One decoder level: unary potential on `[state, skip]`, a regular and a
/// shifted window block, then ×2 pixel shuffle. `state` is `None` at the
/// coarsest level.
pub fn decoder_level_forward<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    cfg: &ModelConfig,
    k: usize,
    state: Option<Var<'t, F>>,
    skip: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let pre = level_prefix(k);
    let input = match state {
        None => skip,
        Some(st) => {
            let (a, b) = (st.shape(), skip.shape());
            if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
                return Err(Error::dim(
                    "decoder_level",
                    format!("state {:?} does not align with skip {:?}", a, b),
                ));
            }
            Var::concat(&[st, skip], 1)?
        }
    };
    let mut x = unary_potential(p, &format!("{pre}.unary"), input)?;
    if cfg.fc_enabled {
        let mut t = x.permute(&[0, 2, 3, 1])?;
        for j in 0..2 {
            t = attention_block(p, &format!("{pre}.blk{j}"), t, cfg.decoder_heads[k], cfg.window_size, j == 1)?;
        }
        x = t.permute(&[0, 3, 1, 2])?;
    } else {
        for j in 0..2 {
            x = conv_block(p, &format!("{pre}.blk{j}"), x)?;
        }
    }
    layers::conv(p, &format!("{pre}.up"), x, 1)?.pixel_shuffle(2)
}

/// Decodes a (fused) pyramid to depth `[B, 1, H, W]` in `(0, max_depth)`.
pub fn decode<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    cfg: &ModelConfig,
    pyramid: &FeaturePyramid<'t, F>,
    out_h: usize,
    out_w: usize,
) -> Result<Var<'t, F>> {
    let mut state = None;
    for k in 0..4 {
        state = Some(decoder_level_forward(p, cfg, k, state, pyramid.levels[3 - k])?);
    }
    let state = state.expect("four levels ran");
    let m = F::cst(HEAD_MARGIN);
    let unit = layers::conv(p, "dec.head", state, 1)?.sigmoid().clamp(m, F::one() - m);
    unit.scale(F::cst(cfg.max_depth)).upsample_bilinear(out_h, out_w)
}

/// Terms of the CRF energy of a depth map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfEnergy {
    pub unary: f64,
    pub pairwise: f64,
}

impl CrfEnergy {
    pub fn total(&self) -> f64 {
        self.unary + self.pairwise
    }
}

/// `E(y) = Σ unaryᵢ·yᵢ + Σ_{i,j in one window} w_ij·|yᵢ − yⱼ|` for an
/// `[H, W]` map, with `weights: [nW, S², S²]` over the unshifted `S×S`
/// windows of the zero-padded grid. Pairs touching padding are skipped.
pub fn crf_energy(y: &Tensor<f64>, unary: &Tensor<f64>, weights: &Tensor<f64>, window: usize) -> Result<CrfEnergy> {
    let s = y.shape();
    if s.len() != 2 || unary.shape() != s {
        return Err(Error::dim("crf_energy", format!("y {:?} vs unary {:?}", s, unary.shape())));
    }
    let (h, w) = (s[0], s[1]);
    let geo = WindowGeometry::new(1, h, w, 1, window, 0)?;
    let (nw, n) = (geo.windows_per_image(), geo.tokens_per_window());
    if weights.shape() != [nw, n, n] {
        return Err(Error::dim("crf_energy", format!("weights {:?} vs [{nw}, {n}, {n}]", weights.shape())));
    }
    if let Some(bad) = weights.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Argument(format!("crf_energy: weight {bad} is not nonnegative")));
    }
    let unary_term: f64 = y.data().iter().zip(unary.data()).map(|(a, b)| a * b).sum();
    let pixel = |win: usize, t: usize| -> Option<usize> {
        let (wy, wx) = (win / geo.windows_x(), win % geo.windows_x());
        let (py, px) = (wy * window + t / window, wx * window + t % window);
        (py < h && px < w).then_some(py * w + px)
    };
    let mut pairwise = 0.0;
    for win in 0..nw {
        for i in 0..n {
            let Some(pi) = pixel(win, i) else { continue };
            for j in 0..n {
                let Some(pj) = pixel(win, j) else { continue };
                pairwise += weights.data()[(win * n + i) * n + j] * (y.data()[pi] - y.data()[pj]).abs();
            }
        }
    }
    Ok(CrfEnergy { unary: unary_term, pairwise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check_with_params, Params};
    use crate::tensor::Tape;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            heads: vec![1, 1, 1, 1],
            decoder_dims: vec![8, 4, 4, 4],
            decoder_heads: vec![2, 1, 1, 2],
            window_size: 4,
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn params<F: Real>(cfg: &ModelConfig, seed: u64) -> Params<F> {
        let mut init = ParamInit::new(seed);
        init_decoder(&mut init, cfg).unwrap();
        init.finish()
    }

    #[test]
    fn level_doubles_resolution() {
        let cfg = tiny();
        let ps = params::<f32>(&cfg, 0);
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let state = tape.leaf(&Tensor::from_fn([2, level_out_dim(&cfg, 2), 8, 8], |i| (i as f32 * 0.1).sin()));
        let skip = tape.leaf(&Tensor::from_fn([2, cfg.stage_dim(0), 8, 8], |i| (i as f32 * 0.07).cos()));
        let out = decoder_level_forward(&p, &cfg, 3, Some(state), skip).unwrap();
        assert_eq!(out.shape(), vec![2, level_out_dim(&cfg, 3), 16, 16]);
        let bad = tape.leaf(&Tensor::zeros([2, cfg.stage_dim(0), 4, 8]));
        assert!(matches!(decoder_level_forward(&p, &cfg, 3, Some(state), bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_second_conv_gives_zero_unary() {
        let mut init = ParamInit::<f64>::new(0);
        layers::init_conv(&mut init, "u.conv1", 3, 3, 3).unwrap();
        layers::init_zero_conv(&mut init, "u.conv2", 3, 3, 3).unwrap();
        let ps = init.finish();
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let x = tape.leaf(&Tensor::from_fn([1, 3, 5, 5], |i| i as f64 * 0.01));
        let u = unary_potential(&p, "u", x).unwrap();
        assert_eq!(u.shape(), x.shape());
        assert!(u.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_output_is_bounded() {
        let cfg = ModelConfig { max_depth: 10.0, ..tiny() };
        let mut ps = params::<f32>(&cfg, 1);
        // push the head into saturation from both sides
        ps.get_mut("dec.head.b").unwrap().data_mut()[0] = 80.0;
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let lv = |c: usize, s: usize| tape.leaf(&Tensor::from_fn([1, c, s, s], |i| (i as f32 * 0.3).sin() * 5.0));
        let pyr = FeaturePyramid { levels: [lv(4, 8), lv(8, 4), lv(16, 2), lv(32, 1)] };
        let d = decode(&p, &cfg, &pyr, 32, 32).unwrap();
        assert_eq!(d.shape(), vec![1, 1, 32, 32]);
        assert!(d.value().iter().all(|&v| v > 0.0 && v < 10.0));
        ps.get_mut("dec.head.b").unwrap().data_mut()[0] = -80.0;
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let lv = |c: usize, s: usize| tape.leaf(&Tensor::from_fn([1, c, s, s], |i| (i as f32 * 0.3).sin() * 5.0));
        let pyr = FeaturePyramid { levels: [lv(4, 8), lv(8, 4), lv(16, 2), lv(32, 1)] };
        let d = decode(&p, &cfg, &pyr, 32, 32).unwrap();
        assert!(d.value().iter().all(|&v| v > 0.0 && v < 10.0));
    }

    #[test]
    fn conv_blocks_replace_attention_when_disabled() {
        let cfg = ModelConfig { fc_enabled: false, ..tiny() };
        let ps = params::<f32>(&cfg, 0);
        assert!(ps.names().all(|n| !n.contains(".attn")));
        assert!(tau_names(&cfg).is_empty());
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let skip = tape.leaf(&Tensor::full([1, cfg.stage_dim(3), 2, 2], 0.5f32));
        let out = decoder_level_forward(&p, &cfg, 0, None, skip).unwrap();
        assert_eq!(out.shape(), vec![1, level_out_dim(&cfg, 0), 4, 4]);
    }

    #[test]
    fn gradients_through_a_level() {
        let cfg = tiny();
        let mut ps = params::<f64>(&cfg, 3);
        for (name, t) in ps.iter_mut() {
            if name.ends_with(".rel") || name.ends_with(".b") {
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += ((i * 5 % 9) as f64 - 4.0) * 0.05);
            }
        }
        // keep only level 3 so the check stays small
        let mut level = Params::new();
        for (name, t) in ps.iter() {
            if name.starts_with("dec.l3.") {
                level.insert(name, t.clone()).unwrap();
            }
        }
        let state = Tensor::from_fn([1, level_out_dim(&cfg, 2), 8, 8], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2);
        let skip = Tensor::from_fn([1, cfg.stage_dim(0), 8, 8], |i| ((i * 3 % 13) as f64 - 6.0) * 0.15);
        let report = grad_check_with_params(&level, &[state, skip], Some(40), |p, v| {
            let y = decoder_level_forward(p, &cfg, 3, Some(v[0]), v[1])?;
            let probe = (0..y.numel()).map(|i| (i as f64 * 0.37).sin() + 0.3).collect();
            Ok(y.mul(p.tape().constant(y.shape(), probe)?)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn energy_examples() {
        let y = Tensor::new([1, 2], vec![0.0, 3.0]).unwrap();
        let zero = Tensor::zeros([1, 2]);
        let w = Tensor::full([1, 4, 4], 1.0);
        let e = crf_energy(&y, &zero, &w, 2).unwrap();
        assert_eq!(e.pairwise, 6.0);
        assert_eq!(e.total(), 6.0);
        let flat = Tensor::full([4, 4], 2.5);
        let w = Tensor::from_fn([4, 4, 4], |i| (i % 5) as f64 * 0.3 + 0.1);
        assert_eq!(crf_energy(&flat, &Tensor::zeros([4, 4]), &w, 2).unwrap().pairwise, 0.0);
        let neg = Tensor::full([1, 4, 4], -1.0);
        assert!(matches!(crf_energy(&y, &zero, &neg, 2), Err(Error::Argument(_))));
    }
}
