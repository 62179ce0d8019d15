//! Hybrid pyramid fusion: pooled multi-scale context plus a strip-pooled
//! global prior, applied residually to every pyramid level.

use crate::config::ModelConfig;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers;
use crate::params::{Bound, ParamInit};
use crate::tensor::{Real, Var};

/// Channel widths of the pooled branches: `c` split as evenly as possible,
/// so together they add exactly `c` channels to the concatenation.
pub fn branch_widths(c: usize, branches: usize) -> Vec<usize> {
    (0..branches).map(|i| c / branches + usize::from(i < c % branches)).collect()
}

fn level_prefix(level: usize) -> String {
    format!("hpf.l{level}")
}

/// Parameters of the fusion block for one `c`-channel level. The join
/// convolutions start at zero, so a fresh block is the identity.
pub fn init_hpf_level<F: Real>(init: &mut ParamInit<F>, prefix: &str, c: usize, scales: &[usize]) -> Result<()> {
    for (i, w) in branch_widths(c, scales.len()).into_iter().enumerate() {
        layers::init_conv(init, &format!("{prefix}.msf.branch{i}"), c, w, 1)?;
    }
    layers::init_zero_conv(init, &format!("{prefix}.msf.fuse"), 2 * c, c, 1)?;
    layers::init_conv(init, &format!("{prefix}.baf.gate"), c, c, 1)?;
    layers::init_zero_conv(init, &format!("{prefix}.baf.out"), c, c, 1)
}

pub fn init_hpf<F: Real>(init: &mut ParamInit<F>, cfg: &ModelConfig) -> Result<()> {
    for level in 0..4 {
        init_hpf_level(init, &level_prefix(level), cfg.stage_dim(level), &cfg.hpf_scales)?;
    }
    Ok(())
}

/// Pools `x: [B, C, H, W]` to each `s×s`, projects to the branch width,
/// upsamples back, concatenates with `x` (2C channels) and fuses to C.
pub fn multiscale_fusion<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    prefix: &str,
    x: Var<'t, F>,
    scales: &[usize],
) -> Result<Var<'t, F>> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut parts = vec![x];
    for (i, &scale) in scales.iter().enumerate() {
        if scale == 0 || scale > h || scale > w {
            return Err(Error::Config(format!("pyramid scale {scale} exceeds the {h}×{w} feature map")));
        }
        let pooled = x.adaptive_avg_pool(scale, scale)?;
        let proj = layers::conv(p, &format!("{prefix}.msf.branch{i}"), pooled, 1)?;
        parts.push(proj.upsample_bilinear(h, w)?);
    }
    let cat = Var::concat(&parts, 1)?;
    layers::conv(p, &format!("{prefix}.msf.fuse"), cat, 1)
}

/// Row means `[B, C, H]` and column means `[B, C, W]` of `[B, C, H, W]`.
pub fn biaxial_pool<'t, F: Real>(x: Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
    Ok((x.mean_axis(3)?, x.mean_axis(2)?))
}

/// `y[b,c,i,j] = y_h[b,c,i] + y_v[b,c,j]`.
pub fn biaxial_combine<'t, F: Real>(y_h: Var<'t, F>, y_v: Var<'t, F>) -> Result<Var<'t, F>> {
    y_h.outer_sum(y_v)
}

/// `Z = x ⊙ σ(f(y))` with `f` a 1×1 convolution.
pub fn global_prior<'t, F: Real>(
    x: Var<'t, F>,
    y: Var<'t, F>,
    w: Var<'t, F>,
    b: Var<'t, F>,
) -> Result<Var<'t, F>> {
    x.mul(y.conv2d(w, Some(b), 1, 0)?.sigmoid())
}

/// Strip-pooled prior of `x` projected by the block's output convolution.
pub fn biaxial_fusion<'t, F: Real>(p: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let (y_h, y_v) = biaxial_pool(x)?;
    let y = biaxial_combine(y_h, y_v)?;
    let z = global_prior(x, y, p.var(&format!("{prefix}.baf.gate.w"))?, p.var(&format!("{prefix}.baf.gate.b"))?)?;
    layers::conv(p, &format!("{prefix}.baf.out"), z, 1)
}

/// `x + MSF(x) + BAF(x)` with either branch switchable. Scales larger than
/// the level are clamped to its size.
pub fn hpf_level<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    prefix: &str,
    x: Var<'t, F>,
    cfg: &ModelConfig,
) -> Result<Var<'t, F>> {
    let s = x.shape();
    let limit = s[2].min(s[3]);
    let mut out = x;
    if cfg.hpf_msf {
        let scales: Vec<usize> = cfg.hpf_scales.iter().map(|&sc| sc.min(limit)).collect();
        out = out.add(multiscale_fusion(p, prefix, x, &scales)?)?;
    }
    if cfg.hpf_baf {
        out = out.add(biaxial_fusion(p, prefix, x)?)?;
    }
    Ok(out)
}

/// Fuses every pyramid level; the identity when `hp_enabled` is off.
pub fn hpf_forward<'t, F: Real>(
    p: &Bound<'t, '_, F>,
    cfg: &ModelConfig,
    pyramid: FeaturePyramid<'t, F>,
) -> Result<FeaturePyramid<'t, F>> {
    if !cfg.hp_enabled {
        return Ok(pyramid);
    }
    let mut levels = pyramid.levels;
    for (i, level) in levels.iter_mut().enumerate() {
        *level = hpf_level(p, &level_prefix(i), *level, cfg)?;
    }
    Ok(FeaturePyramid { levels })
}
