//! Four-stage hierarchical windowed-attention encoder.

use std::rc::Rc;

use crate::adapter::{self, AdapterNames};
use crate::attention::{window_attention, Scoring};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{self, attention_params};
use crate::params::{Bound, ParamInit};
use crate::tensor::{Real, Var};
use crate::window::{effective_window, window_partition, window_reverse};

/// Patch size of the stem; stage `i` runs at `1/(4·2^i)` resolution.
pub const PATCH: usize = 4;

/// Encoder outputs, `[B, C_i, H/(4·2^i), W/(4·2^i)]` for `i = 0..4`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t, F: Real> {
    pub levels: [Var<'t, F>; 4],
}

impl<'t, F: Real> FeaturePyramid<'t, F> {
    pub fn f4(&self) -> Var<'t, F> {
        self.levels[0]
    }
    pub fn f8(&self) -> Var<'t, F> {
        self.levels[1]
    }
    pub fn f16(&self) -> Var<'t, F> {
        self.levels[2]
    }
    pub fn f32(&self) -> Var<'t, F> {
        self.levels[3]
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("enc.s{stage}.b{block}")
}

pub fn init_encoder<F: Real>(init: &mut ParamInit<F>, cfg: &ModelConfig) -> Result<()> {
    let c0 = cfg.stage_dim(0);
    layers::init_conv(init, "enc.embed", 3, c0, PATCH)?;
    layers::init_norm(init, "enc.embed.norm", c0)?;
    for stage in 0..4 {
        let c = cfg.stage_dim(stage);
        if stage > 0 {
            let prev = cfg.stage_dim(stage - 1);
            layers::init_norm(init, &format!("enc.s{stage}.merge.norm"), 4 * prev)?;
            layers::init_linear(init, &format!("enc.s{stage}.merge"), 4 * prev, c, false)?;
        }
        for block in 0..cfg.depths[stage] {
            let pre = block_prefix(stage, block);
            layers::init_norm(init, &format!("{pre}.norm1"), c)?;
            layers::init_attention(init, &format!("{pre}.attn"), c, cfg.heads[stage], cfg.window_size, false)?;
            layers::init_norm(init, &format!("{pre}.norm2"), c)?;
            layers::init_mlp(init, &format!("{pre}.mlp"), c, c * cfg.mlp_ratio)?;
            if cfg.ha_enabled {
                let a = format!("{pre}.adapter");
                adapter::init_adapter(init, &a, c, cfg.adapter_ratio, cfg.adapter_lambda_init)?;
            }
        }
        layers::init_norm(init, &format!("enc.s{stage}.out_norm"), c)?;
    }
    Ok(())
}

/// 2×2 patch merging of `[B, H, W, C]`: neighbours are concatenated in the
/// order (0,0), (1,0), (0,1), (1,1), normalized, and projected to the next
/// stage width.
pub fn patch_merge<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("patch_merge", format!("odd spatial size {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + 2 * i + dy) * w + 2 * j + dx) * c;
                    index.extend((base..base + c).map(|v| v as u32));
                }
            }
        }
    }
    let merged = x.gather(Rc::from(index), vec![b, oh, ow, 4 * c]);
    let normed = layers::layer_norm(p, &format!("{prefix}.norm"), merged)?;
    layers::linear(p, prefix, normed)
}

/// One encoder block on `[B, H, W, C]` tokens. Odd blocks use shifted
/// windows. With adapters on, the mean-token broadcast precedes attention
/// and the perception module runs beside the MLP.
pub fn encoder_block<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    cfg: &ModelConfig,
    stage: usize,
    block: usize,
    x: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let pre = block_prefix(stage, block);
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (size, shift) = effective_window(h, w, cfg.window_size, block % 2 == 1);

    let mut t = layers::layer_norm(p, &format!("{pre}.norm1"), x)?;
    if cfg.ha_enabled {
        let lambda = p.var(&AdapterNames::new(&format!("{pre}.adapter")).lambda)?;
        t = adapter::broadcast_scaled(t.reshape([b, h * w, c])?, lambda)?.reshape([b, h, w, c])?;
    }
    let (win, geo) = window_partition(t, size, shift)?;
    let attn = attention_params(p, &format!("{pre}.attn"))?;
    let a = window_attention(win, cfg.heads[stage], &attn, &geo, Scoring::Dot)?;
    let x = x.add(window_reverse(a.out, &geo)?)?;

    let t = layers::layer_norm(p, &format!("{pre}.norm2"), x)?;
    let mut m = layers::mlp(p, &format!("{pre}.mlp"), t)?;
    if cfg.ha_enabled {
        m = m.add(adapter::perception(t, p, &format!("{pre}.adapter"))?)?;
    }
    x.add(m)
}

/// Runs `img: [B, 3, H, W]` (H, W divisible by 32) through the four stages.
pub fn encoder_forward<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    cfg: &ModelConfig,
    img: Var<'t, F>,
) -> Result<FeaturePyramid<'t, F>> {
    let s = img.shape();
    if s.len() != 4 || s[1] != 3 || s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
        return Err(Error::dim("encoder", format!("expected [B, 3, H, W] with H, W multiples of 32, got {:?}", s)));
    }
    let stem = img.conv2d(p.var("enc.embed.w")?, Some(p.var("enc.embed.b")?), PATCH, 0)?;
    let mut x = layers::layer_norm(p, "enc.embed.norm", stem.permute(&[0, 2, 3, 1])?)?;
    let mut levels = Vec::with_capacity(4);
    for stage in 0..4 {
        if stage > 0 {
            x = patch_merge(p, &format!("enc.s{stage}.merge"), x)?;
        }
        for block in 0..cfg.depths[stage] {
            x = encoder_block(p, cfg, stage, block, x)?;
        }
        let out = layers::layer_norm(p, &format!("enc.s{stage}.out_norm"), x)?;
        levels.push(out.permute(&[0, 3, 1, 2])?);
    }
    Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;
    use crate::tensor::{grad_check_multi, Tape, Tensor};

    fn image(b: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([b, 3, h, w], |i| ((i * 37 % 101) as f32) / 101.0)
    }

    fn params(cfg: &ModelConfig, seed: u64) -> Params<f32> {
        let mut init = ParamInit::new(seed);
        init_encoder(&mut init, cfg).unwrap();
        init.finish()
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig::default();
        let ps = params(&cfg, 0);
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let pyr = encoder_forward(&p, &cfg, tape.leaf(&image(2, 64, 64))).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![vec![2, 32, 16, 16], vec![2, 64, 8, 8], vec![2, 128, 4, 4], vec![2, 256, 2, 2]]);
        assert!(pyr.levels.iter().all(|l| l.value().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ModelConfig::default();
        let ps = params(&cfg, 0);
        let tape = Tape::new();
        let p = Bound::new(&tape, &ps, false);
        let err = encoder_forward(&p, &cfg, tape.leaf(&image(1, 48, 64))).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn neutral_adapters_are_bit_identical_to_none() {
        let plain = ModelConfig { ha_enabled: false, ..ModelConfig::default() };
        let neutral = ModelConfig { ha_enabled: true, adapter_lambda_init: 0.0, ..ModelConfig::default() };
        let img = image(1, 64, 64);
        let run = |cfg: &ModelConfig| {
            let ps = params(cfg, 5);
            let tape = Tape::new();
            let p = Bound::new(&tape, &ps, false);
            let pyr = encoder_forward(&p, cfg, tape.leaf(&img)).unwrap();
            pyr.levels.iter().map(|l| l.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>()
        };
        assert_eq!(run(&plain), run(&neutral));
    }

    #[test]
    fn gradients_through_the_encoder() {
        let cfg = ModelConfig {
            embed_dim: 4,
            heads: vec![1, 1, 2, 2],
            depths: vec![2, 1, 1, 1],
            window_size: 4,
            mlp_ratio: 2,
            ha_enabled: true,
            adapter_lambda_init: 0.3,
            ..ModelConfig::default()
        };
        let mut init = ParamInit::<f64>::new(1);
        init_encoder(&mut init, &cfg).unwrap();
        // give the zero-initialized tensors some signal
        for (name, t) in init.params.iter_mut() {
            if name.ends_with(".rel") || name.ends_with("up.w") {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = ((i * 13 % 7) as f64 - 3.0) * 0.05;
                }
            }
        }
        let ps = init.finish();
        let x = Tensor::from_fn([1, 3, 32, 32], |i| ((i * 37 % 101) as f64) / 101.0);
        let report = grad_check_multi(
            |tape, v| {
                let p = Bound::new(tape, &ps, false);
                let pyr = encoder_forward(&p, &cfg, v[0])?;
                let mut loss = tape.constant([], vec![0.0])?;
                for l in &pyr.levels {
                    let probe = tape.constant(l.shape(), (0..l.numel()).map(|i| ((i * 29 % 17) as f64 - 8.0) / 8.0).collect())?;
                    loss = loss.add(l.mul(probe)?.sum())?;
                }
                Ok(loss)
            },
            &[x],
            Some(64),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
