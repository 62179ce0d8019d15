//! Whole-model assembly: encoder, pyramid fusion, CRF decoder.

use crate::config::ModelConfig;
use crate::decoder::{decode, init_decoder};
use crate::encoder::{encoder_forward, init_encoder};
use crate::error::Result;
use crate::hpf::{hpf_forward, init_hpf};
use crate::params::{Bound, ParamInit, Params};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Fresh parameters for `cfg`. Parameters of disabled components are not
/// created, and every other parameter is independent of the switches.
pub fn init_params<F: Real>(cfg: &ModelConfig) -> Result<Params<F>> {
    cfg.validate()?;
    let mut init = ParamInit::new(cfg.init_seed);
    init_encoder(&mut init, cfg)?;
    if cfg.hp_enabled {
        init_hpf(&mut init, cfg)?;
    }
    init_decoder(&mut init, cfg)?;
    Ok(init.finish())
}

/// Depth `[B, 1, H, W]` for `img: [B, 3, H, W]`.
pub fn forward<'t, F: Real>(p: &Bound<'t, '_, F>, cfg: &ModelConfig, img: Var<'t, F>) -> Result<Var<'t, F>> {
    let s = img.shape();
    let pyramid = encoder_forward(p, cfg, img)?;
    let fused = hpf_forward(p, cfg, pyramid)?;
    decode(p, cfg, &fused, s[2], s[3])
}

/// Forward pass without gradients.
pub fn predict<F: Real>(cfg: &ModelConfig, params: &Params<F>, img: &Tensor<F>) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let p = Bound::new(&tape, params, false);
    Ok(forward(&p, cfg, tape.leaf(img))?.to_tensor())
}
