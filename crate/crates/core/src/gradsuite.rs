//! Finite-difference verification of every differentiable primitive and
//! of the composite model paths, in 64-bit arithmetic.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{broadcast_scaled, init_adapter, perception, AdapterNames};
use crate::attention::{window_attention, Scoring};
use crate::config::ModelConfig;
use crate::decoder::{decoder_level_forward, init_decoder, level_out_dim};
use crate::error::Result;
use crate::hpf::{hpf_level, init_hpf_level};
use crate::layers::{attention_params, init_attention};
use crate::loss::{silog_loss, LossConfig};
use crate::model::{forward, init_params};
use crate::params::{grad_check_with_params, ParamInit, Params};
use crate::tensor::{grad_check_multi, GradCheckReport, Tensor, Var};
use crate::window::{window_partition, window_reverse};

/// Default bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Bound for operations that are exactly linear.
pub const EXACT_TOLERANCE: f64 = 1e-7;

/// Random instances per primitive.
const INSTANCES: u64 = 3;

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    run: Box<dyn Fn() -> Result<GradCheckReport> + Send + Sync>,
}

#[derive(Clone, Debug)]
pub struct GradOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    /// Largest relative error over all checked coordinates; infinite when
    /// the check itself failed to run.
    pub error: f64,
    pub checked: usize,
    pub seconds: f64,
    pub failure: Option<String>,
}

impl GradOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.error <= self.tolerance
    }
}

impl GradCase {
    pub fn run(&self) -> GradOutcome {
        let start = Instant::now();
        let (error, checked, failure) = match (self.run)() {
            Ok(r) => (r.max_rel_error, r.checked, None),
            Err(e) => (f64::INFINITY, 0, Some(e.to_string())),
        };
        GradOutcome { name: self.name, tolerance: self.tolerance, error, checked, seconds: start.elapsed().as_secs_f64(), failure }
    }
}

fn case(
    name: &'static str,
    tolerance: f64,
    run: impl Fn() -> Result<GradCheckReport> + Send + Sync + 'static,
) -> GradCase {
    GradCase { name, tolerance, run: Box::new(run) }
}

fn sample(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Reduces `y` to a scalar with fixed, non-periodic weights.
fn probe<'t>(y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = (0..y.numel()).map(|i| (i as f64 * 0.37).sin() + 0.3).collect();
    Ok(y.mul(y.tape().constant(y.shape(), w)?)?.sum())
}

fn worst(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let checked = a.checked + b.checked;
    let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
    w.checked = checked;
    w
}

/// Checks `f` on several random inputs of the given shapes and ranges.
fn check<Fun>(shapes: &[(&[usize], f64, f64)], f: Fun) -> Result<GradCheckReport>
where
    Fun: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut out: Option<GradCheckReport> = None;
    for seed in 0..INSTANCES {
        let inputs: Vec<Tensor<f64>> =
            shapes.iter().enumerate().map(|(k, (s, lo, hi))| sample(s, seed * 31 + k as u64, *lo, *hi)).collect();
        let r = grad_check_multi(|_, v| probe(f(v)?), &inputs, None)?;
        out = Some(match out {
            None => r,
            Some(prev) => worst(prev, r),
        });
    }
    Ok(out.expect("at least one instance"))
}

const S: &[usize] = &[2, 3, 4];

fn primitive_cases() -> Vec<GradCase> {
    vec![
        case("identity", EXACT_TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0]))),
        case("sum", EXACT_TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].sum()))),
        case("add", TOLERANCE, || check(&[(S, -1.0, 1.0), (S, -1.0, 1.0)], |v| v[0].add(v[1]))),
        case("sub", TOLERANCE, || check(&[(S, -1.0, 1.0), (S, -1.0, 1.0)], |v| v[0].sub(v[1]))),
        case("mul", TOLERANCE, || check(&[(S, -1.0, 1.0), (S, -1.0, 1.0)], |v| v[0].mul(v[1]))),
        case("scale", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].scale(-1.7)))),
        case("add_scalar", TOLERANCE, || check(&[(S, -1.0, 1.0), (&[], -1.0, 1.0)], |v| v[0].add_scalar(v[1]))),
        case("mul_scalar", TOLERANCE, || check(&[(S, -1.0, 1.0), (&[], -1.0, 1.0)], |v| v[0].mul_scalar(v[1]))),
        case("recip", TOLERANCE, || check(&[(S, 0.5, 2.0)], |v| Ok(v[0].recip()))),
        case("clamp", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].clamp(-0.5, 0.5)))),
        case("clamp_min", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].clamp_min(0.1)))),
        case("exp", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].exp()))),
        case("log", TOLERANCE, || check(&[(S, 0.5, 2.0)], |v| Ok(v[0].log()))),
        case("log_ratio", TOLERANCE, || {
            let r: Vec<f64> = (0..24).map(|i| 0.5 + i as f64 * 0.1).collect();
            check(&[(S, 0.5, 2.0)], move |v| v[0].log_ratio(&r))
        }),
        case("sqrt", TOLERANCE, || check(&[(S, 0.5, 2.0)], |v| Ok(v[0].sqrt()))),
        case("square", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].square()))),
        case("gelu", TOLERANCE, || check(&[(S, -3.0, 3.0)], |v| Ok(v[0].gelu()))),
        case("sigmoid", TOLERANCE, || check(&[(S, -3.0, 3.0)], |v| Ok(v[0].sigmoid()))),
        case("mean", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| Ok(v[0].mean()))),
        case("mean_axis", TOLERANCE, || check(&[(&[2, 3, 4, 5], -1.0, 1.0)], |v| v[0].mean_axis(2))),
        case("linear", TOLERANCE, || {
            check(&[(&[2, 3, 4], -1.0, 1.0), (&[4, 5], -1.0, 1.0), (&[5], -1.0, 1.0)], |v| v[0].linear(v[1], Some(v[2])))
        }),
        case("bmm", TOLERANCE, || {
            let mut r = check(&[(&[2, 3, 4], -1.0, 1.0), (&[2, 4, 5], -1.0, 1.0)], |v| v[0].bmm(v[1], false, false))?;
            r = worst(r, check(&[(&[2, 4, 3], -1.0, 1.0), (&[2, 4, 5], -1.0, 1.0)], |v| v[0].bmm(v[1], true, false))?);
            r = worst(r, check(&[(&[2, 3, 4], -1.0, 1.0), (&[2, 5, 4], -1.0, 1.0)], |v| v[0].bmm(v[1], false, true))?);
            Ok(worst(r, check(&[(&[2, 4, 3], -1.0, 1.0), (&[2, 5, 4], -1.0, 1.0)], |v| v[0].bmm(v[1], true, true))?))
        }),
        case("conv2d", TOLERANCE, || {
            let shapes: &[(&[usize], f64, f64)] = &[(&[2, 3, 5, 6], -1.0, 1.0), (&[4, 3, 3, 3], -1.0, 1.0), (&[4], -1.0, 1.0)];
            let r = check(shapes, |v| v[0].conv2d(v[1], Some(v[2]), 1, 1))?;
            Ok(worst(r, check(shapes, |v| v[0].conv2d(v[1], Some(v[2]), 2, 0))?))
        }),
        case("deconv2d", TOLERANCE, || {
            let shapes: &[(&[usize], f64, f64)] = &[(&[2, 3, 3, 4], -1.0, 1.0), (&[3, 2, 3, 3], -1.0, 1.0), (&[2], -1.0, 1.0)];
            let r = check(shapes, |v| v[0].deconv2d(v[1], Some(v[2]), 2, 1))?;
            Ok(worst(r, check(shapes, |v| v[0].deconv2d(v[1], Some(v[2]), 1, 0))?))
        }),
        case("reshape", EXACT_TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| v[0].reshape([4, 6]))),
        case("permute", EXACT_TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| v[0].permute(&[2, 0, 1]))),
        case("narrow", EXACT_TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| v[0].narrow(2, 1, 2))),
        case("concat", EXACT_TOLERANCE, || {
            check(&[(&[2, 3, 4], -1.0, 1.0), (&[2, 2, 4], -1.0, 1.0)], |v| Var::concat(&[v[0], v[1]], 1))
        }),
        case("pixel_shuffle", EXACT_TOLERANCE, || check(&[(&[1, 8, 2, 3], -1.0, 1.0)], |v| v[0].pixel_shuffle(2))),
        case("pixel_unshuffle", EXACT_TOLERANCE, || check(&[(&[1, 2, 4, 6], -1.0, 1.0)], |v| v[0].pixel_unshuffle(2))),
        case("window_partition", EXACT_TOLERANCE, || {
            check(&[(&[1, 5, 6, 2], -1.0, 1.0)], |v| Ok(window_partition(v[0], 4, 2)?.0))
        }),
        case("window_reverse", EXACT_TOLERANCE, || {
            check(&[(&[1, 5, 6, 2], -1.0, 1.0)], |v| {
                let (w, geo) = window_partition(v[0], 4, 2)?;
                window_reverse(w.scale(2.0), &geo)
            })
        }),
        case("adaptive_avg_pool", TOLERANCE, || check(&[(&[1, 2, 5, 7], -1.0, 1.0)], |v| v[0].adaptive_avg_pool(3, 2))),
        case("upsample_bilinear", TOLERANCE, || check(&[(&[1, 2, 3, 4], -1.0, 1.0)], |v| v[0].upsample_bilinear(7, 5))),
        case("outer_sum", TOLERANCE, || {
            check(&[(&[2, 3, 4], -1.0, 1.0), (&[2, 3, 5], -1.0, 1.0)], |v| v[0].outer_sum(v[1]))
        }),
        case("softmax", TOLERANCE, || check(&[(S, -3.0, 3.0)], |v| v[0].softmax_lastdim())),
        case("layer_norm", TOLERANCE, || {
            check(&[(S, -1.0, 1.0), (&[4], 0.5, 1.5), (&[4], -1.0, 1.0)], |v| v[0].layer_norm(v[1], v[2], 1e-5))
        }),
        case("l2_normalize", TOLERANCE, || check(&[(S, -1.0, 1.0)], |v| v[0].l2_normalize(1e-8))),
        case("token_broadcast", TOLERANCE, || {
            let r = check(&[(S, -1.0, 1.0)], |v| v[0].token_broadcast(None))?;
            Ok(worst(r, check(&[(S, -1.0, 1.0), (&[4], -1.0, 1.0)], |v| v[0].token_broadcast(Some(v[1])))?))
        }),
    ]
}

fn perturb(params: &mut Params<f64>, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amount..amount));
    }
}

/// A small configuration for whole-path checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        depths: vec![2, 1, 1, 1],
        heads: vec![1, 1, 2, 2],
        window_size: 4,
        mlp_ratio: 2,
        decoder_dims: vec![8, 4, 4, 4],
        decoder_heads: vec![2, 1, 1, 2],
        hpf_scales: vec![1, 2],
        adapter_lambda_init: 0.3,
        ..ModelConfig::default()
    }
}

fn composite_cases() -> Vec<GradCase> {
    vec![
        case("adapter", TOLERANCE, || {
            let mut init = ParamInit::new(1);
            init_adapter(&mut init, "a", 6, 0.25, 0.3)?;
            let mut ps = init.finish();
            perturb(&mut ps, 2, 0.2);
            let x = sample(&[1, 3, 4, 6], 3, -1.0, 1.0);
            grad_check_with_params(&ps, &[x], None, |p, v| {
                let lambda = p.var(&AdapterNames::new("a").lambda)?;
                let b = broadcast_scaled(v[0].reshape([1, 12, 6])?, lambda)?.reshape([1, 3, 4, 6])?;
                probe(b.add(perception(b, p, "a")?)?)
            })
        }),
        case("window_attention", TOLERANCE, || {
            let mut init = ParamInit::new(4);
            init_attention(&mut init, "a", 4, 2, 3, false)?;
            let mut ps = init.finish();
            perturb(&mut ps, 5, 0.2);
            let x = sample(&[1, 5, 4, 4], 6, -1.0, 1.0);
            grad_check_with_params(&ps, &[x], None, |p, v| {
                let (win, geo) = window_partition(v[0], 3, 1)?;
                let a = window_attention(win, 2, &attention_params(p, "a")?, &geo, Scoring::Dot)?;
                probe(window_reverse(a.out, &geo)?)
            })
        }),
        case("dynamic_scaling_attention", TOLERANCE, || {
            let mut init = ParamInit::new(7);
            init_attention(&mut init, "a", 4, 2, 3, true)?;
            init.full("a.tau", &[1], 0.7)?;
            let mut ps = init.finish();
            perturb(&mut ps, 8, 0.2);
            let x = sample(&[1, 6, 6, 4], 9, -1.0, 1.0);
            grad_check_with_params(&ps, &[x], None, |p, v| {
                let (win, geo) = window_partition(v[0], 3, 0)?;
                let tau = p.var("a.tau")?;
                let a = window_attention(win, 2, &attention_params(p, "a")?, &geo, Scoring::Cosine { tau })?;
                probe(a.out)
            })
        }),
        case("hpf", TOLERANCE, || {
            let mut init = ParamInit::new(10);
            init_hpf_level(&mut init, "h", 3, &[1, 2])?;
            let mut ps = init.finish();
            perturb(&mut ps, 11, 0.2);
            let x = sample(&[1, 3, 4, 5], 12, -1.0, 1.0);
            let cfg = ModelConfig { hpf_scales: vec![1, 2], ..ModelConfig::default() };
            grad_check_with_params(&ps, &[x], None, |p, v| probe(hpf_level(p, "h", v[0], &cfg)?))
        }),
        case("decoder_level", TOLERANCE, || {
            let cfg = toy_config();
            let mut init = ParamInit::new(13);
            init_decoder(&mut init, &cfg)?;
            let mut level = Params::new();
            for (name, t) in init.finish().iter() {
                if name.starts_with("dec.l3.") {
                    level.insert(name, t.clone())?;
                }
            }
            perturb(&mut level, 14, 0.3);
            let state = sample(&[1, level_out_dim(&cfg, 2), 8, 8], 15, -1.0, 1.0);
            let skip = sample(&[1, cfg.stage_dim(0), 8, 8], 16, -1.0, 1.0);
            grad_check_with_params(&level, &[state, skip], Some(24), |p, v| {
                probe(decoder_level_forward(p, &cfg, 3, Some(v[0]), v[1])?)
            })
        }),
        case("silog", TOLERANCE, || {
            let gt: Vec<f64> = sample(&[30], 17, 0.5, 8.0).into_data();
            let mask: Vec<bool> = (0..30).map(|i| i % 7 != 2).collect();
            let mut out: Option<GradCheckReport> = None;
            for seed in 0..INSTANCES {
                let x = sample(&[2, 15], 18 + seed, 0.5, 8.0);
                let r = grad_check_multi(|_, v| silog_loss(v[0], &gt, &mask, &LossConfig::default()), &[x], None)?;
                out = Some(out.map_or(r.clone(), |o| worst(o, r)));
            }
            Ok(out.expect("instances"))
        }),
        case("model_32x32", TOLERANCE, || {
            let cfg = toy_config();
            let mut ps = init_params::<f64>(&cfg)?;
            perturb(&mut ps, 19, 0.3);
            let img = sample(&[1, 3, 32, 32], 20, 0.0, 1.0);
            let gt: Vec<f64> = sample(&[32 * 32], 21, 0.5, 8.0).into_data();
            let mask = vec![true; gt.len()];
            grad_check_with_params(&ps, &[img], Some(6), |p, v| {
                silog_loss(forward(p, &cfg, v[0])?, &gt, &mask, &LossConfig::default())
            })
        }),
    ]
}

/// Every primitive followed by the composite paths.
pub fn grad_cases() -> Vec<GradCase> {
    let mut all = primitive_cases();
    all.extend(composite_cases());
    all
}

pub fn run_suite() -> Vec<GradOutcome> {
    grad_cases().iter().map(GradCase::run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let cases = grad_cases();
        let mut names: Vec<_> = cases.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), cases.len());
    }

    #[test]
    fn primitives_pass() {
        for case in primitive_cases() {
            let o = case.run();
            assert!(o.passed(), "{o:?}");
        }
    }
}
