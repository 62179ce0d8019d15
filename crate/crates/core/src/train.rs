//! Deterministic training loop and evaluation.

use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::data::{assemble, epoch_plan, gen_synthetic_scene, load_manifest_file, Batch, DepthSample, SceneSpec};
use crate::error::{Error, Result};
use crate::loss::{silog_loss, valid_mask, LossConfig};
use crate::metrics::{MetricAccumulator, MetricReport, CSV_HEADER};
use crate::model::{forward, init_params, predict};
use crate::optim::{clamp_temperatures, linear_lr, Adam};
use crate::params::{Bound, Params};
use crate::tensor::{Real, Tape, Tensor};

/// Scene seed of sample `i` of the training or evaluation split.
pub fn scene_seed(data_seed: u64, eval: bool, i: usize) -> u64 {
    (data_seed << 32) | (u64::from(eval) << 31) | i as u64
}

fn split(cfg: &ModelConfig, eval: bool) -> Result<Vec<DepthSample>> {
    let manifest = if eval { &cfg.eval_manifest } else { &cfg.train_manifest };
    if let Some(path) = manifest {
        return load_manifest_file(Path::new(path));
    }
    let (n, size) = if eval { (cfg.eval_scenes, cfg.eval_size) } else { (cfg.train_scenes, cfg.train_size) };
    (0..n)
        .map(|i| gen_synthetic_scene(&SceneSpec::from_config(cfg, scene_seed(cfg.data_seed, eval, i), size)))
        .collect()
}

pub fn training_samples(cfg: &ModelConfig) -> Result<Vec<DepthSample>> {
    split(cfg, false)
}

pub fn evaluation_samples(cfg: &ModelConfig) -> Result<Vec<DepthSample>> {
    split(cfg, true)
}

/// Pixels used for loss and metrics: valid in the sample and inside the
/// configured depth range.
pub fn effective_mask<F: Real>(gt: &[F], mask: &[bool], cfg: &ModelConfig) -> Vec<bool> {
    valid_mask(gt, cfg.min_depth, cfg.max_depth).into_iter().zip(mask).map(|(a, &b)| a && b).collect()
}

/// SILog of one `[3, H, W]` image and its parameter gradients, the latter
/// scaled by `weight`.
pub fn image_loss_and_grads<F: Real>(
    cfg: &ModelConfig,
    params: &Params<F>,
    (h, w): (usize, usize),
    rgb: &[F],
    gt: &[F],
    mask: &[bool],
    weight: f64,
) -> Result<(f64, Vec<Vec<F>>)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, params, true);
    let img = tape.leaf(&Tensor::new([1, 3, h, w], rgb.to_vec())?);
    let pred = forward(&bound, cfg, img)?;
    let mask = effective_mask(gt, mask, cfg);
    let loss = silog_loss(pred, gt, &mask, &LossConfig::from_model(cfg))?;
    let value = loss.item().to_f64().unwrap_or(f64::NAN);
    let grads = tape.backward(loss.scale(F::cst(weight)))?;
    Ok((value, bound.grads(&grads)))
}

/// Arithmetic used for forward and backward passes. Parameters and
/// optimizer state stay 32-bit either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    Single,
    /// 64-bit verification mode.
    Double,
}

impl Precision {
    /// `Double` when `DEPTHCRF_VERIFY=1`.
    pub fn from_env() -> Self {
        match std::env::var("DEPTHCRF_VERIFY") {
            Ok(v) if v.trim() == "1" => Precision::Double,
            _ => Precision::Single,
        }
    }
}

fn cast_slice<F: Real>(v: &[f32]) -> Vec<F> {
    v.iter().map(|&x| F::cst(x as f64)).collect()
}

fn batch_in<F: Real>(cfg: &ModelConfig, params: &Params<F>, batch: &Batch, parallel: bool) -> Result<(f64, Vec<Vec<f32>>)> {
    let s = batch.rgb.shape();
    let (b, h, w) = (s[0], s[2], s[3]);
    let weight = 1.0 / b as f64;
    let one = |i: usize| {
        let rgb = cast_slice::<F>(&batch.rgb.data()[i * 3 * h * w..(i + 1) * 3 * h * w]);
        let gt = cast_slice::<F>(&batch.depth.data()[i * h * w..(i + 1) * h * w]);
        let mask = &batch.mask[i * h * w..(i + 1) * h * w];
        image_loss_and_grads(cfg, params, (h, w), &rgb, &gt, mask, weight)
    };
    let parts: Vec<Result<(f64, Vec<Vec<F>>)>> =
        if parallel { (0..b).into_par_iter().map(one).collect() } else { (0..b).map(one).collect() };
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<F>>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l * weight;
        match &mut total {
            None => total = Some(g),
            Some(t) => t.iter_mut().zip(g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x = *x + y)),
        }
    }
    let grads = total
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.into_iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
        .collect();
    Ok((loss, grads))
}

/// Mean per-image SILog over `batch` and its gradients. Images run on
/// separate tapes (in parallel when `parallel`) and are reduced in batch
/// order, so the result does not depend on the thread count.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    params: &Params<f32>,
    batch: &Batch,
    parallel: bool,
    precision: Precision,
) -> Result<(f64, Vec<Vec<f32>>)> {
    match precision {
        Precision::Single => batch_in(cfg, params, batch, parallel),
        Precision::Double => batch_in(cfg, &params.cast::<f64>(), batch, parallel),
    }
}

/// Predicted depth `[1, 1, H, W]` for one sample.
pub fn predict_sample(
    cfg: &ModelConfig,
    params: &Params<f32>,
    sample: &DepthSample,
    precision: Precision,
) -> Result<Tensor<f32>> {
    let img = Tensor::new([1, 3, sample.height(), sample.width()], sample.rgb.data().to_vec())?;
    match precision {
        Precision::Single => predict(cfg, params, &img),
        Precision::Double => Ok(predict(cfg, &params.cast::<f64>(), &img.cast::<f64>())?.cast()),
    }
}

/// Metrics of the model on `samples`, pooled over all valid pixels.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &Params<f32>,
    samples: &[DepthSample],
    precision: Precision,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    for s in samples {
        let pred = predict_sample(cfg, params, s, precision)?;
        let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
        let g: Vec<f64> = s.depth.data().iter().map(|&v| v as f64).collect();
        acc.add(&p, &g, &effective_mask(s.depth.data(), &s.mask, cfg), (cfg.min_depth, cfg.max_depth))?;
    }
    acc.report()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub eval: Option<MetricReport>,
}

impl EpochLog {
    pub fn csv_header() -> String {
        format!("epoch,step,train_loss,{CSV_HEADER}")
    }

    pub fn csv_row(&self) -> String {
        let eval = match &self.eval {
            Some(r) => r.csv_row(),
            None => ",,,,,,,".to_string(),
        };
        format!("{},{},{},{}", self.epoch, self.step, self.train_loss, eval)
    }
}

pub struct Trainer {
    pub cfg: ModelConfig,
    pub params: Params<f32>,
    pub adam: Adam<f32>,
    pub train: Vec<DepthSample>,
    pub eval: Vec<DepthSample>,
    /// Run the images of a batch on rayon threads.
    pub parallel: bool,
    pub precision: Precision,
}

impl Trainer {
    pub fn new(cfg: ModelConfig, train: Vec<DepthSample>, eval: Vec<DepthSample>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let params = init_params(&cfg)?;
        let adam = Adam::from_config(&params, &cfg);
        Ok(Trainer { cfg, params, adam, train, eval, parallel: false, precision: Precision::Single })
    }

    /// Continues from a checkpoint; a checkpoint without optimizer state
    /// starts fresh moments at its step.
    pub fn resume(ck: Checkpoint, train: Vec<DepthSample>, eval: Vec<DepthSample>) -> Result<Self> {
        let expected = init_params::<f32>(&ck.config)?;
        for ((a, ta), (b, tb)) in expected.iter().zip(ck.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Config(format!("checkpoint parameter {b} does not match the config ({a})")));
            }
        }
        if expected.len() != ck.params.len() {
            return Err(Error::Config("checkpoint parameter count does not match the config".into()));
        }
        let adam = ck.adam.unwrap_or_else(|| {
            let mut a = Adam::from_config(&ck.params, &ck.config);
            a.step = ck.step;
            a
        });
        Ok(Trainer { cfg: ck.config, params: ck.params, adam, train, eval, parallel: false, precision: Precision::Single })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { step: self.adam.step, config: self.cfg.clone(), params: self.params.clone(), adam: Some(self.adam.clone()) }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        if self.cfg.max_steps > 0 {
            self.cfg.max_steps as u64
        } else {
            self.cfg.epochs as u64 * self.batches_per_epoch()
        }
    }

    /// The batch the next step will use; fixed by the seeds and step.
    pub fn next_batch(&self) -> Result<Batch> {
        let per = self.batches_per_epoch();
        let (epoch, k) = (self.step() / per, self.step() % per);
        let plan =
            epoch_plan(self.train.len(), self.cfg.batch_size, self.cfg.shuffle_seed, epoch, true, self.cfg.flip)?;
        assemble(&self.train, &plan[k as usize])
    }

    /// One optimizer update; returns the loss before it.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.next_batch()?;
        let (loss, grads) = batch_loss_and_grads(&self.cfg, &self.params, &batch, self.parallel, self.precision)?;
        let finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !loss.is_finite() || !finite {
            let seeds: Vec<u64> = batch.indices.iter().map(|&i| scene_seed(self.cfg.data_seed, false, i)).collect();
            return Err(Error::Numeric(format!(
                "non-finite {} at step {} (samples {:?}, scene seeds {:?}, shuffle seed {})",
                if loss.is_finite() { "gradient" } else { "loss" },
                self.step(),
                batch.indices,
                seeds,
                self.cfg.shuffle_seed
            )));
        }
        let lr = linear_lr(self.cfg.lr_start, self.cfg.lr_end, self.step(), self.total_steps());
        self.adam.update(&mut self.params, &grads, lr)?;
        clamp_temperatures(&mut self.params);
        Ok(loss)
    }

    /// Trains to the configured step count, calling `on_epoch` at every
    /// epoch boundary (and at the end) with the epoch's mean loss and the
    /// evaluation metrics when an evaluation split exists.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<()> {
        let per = self.batches_per_epoch();
        let (mut sum, mut count) = (0.0, 0u64);
        while self.step() < self.total_steps() {
            sum += self.train_step()?;
            count += 1;
            if self.step() % per == 0 || self.step() == self.total_steps() {
                let eval = if self.eval.is_empty() { None } else { Some(evaluate(&self.cfg, &self.params, &self.eval, self.precision)?) };
                let log = EpochLog { epoch: self.step().div_ceil(per), step: self.step(), train_loss: sum / count as f64, eval };
                on_epoch(self, &log)?;
                (sum, count) = (0.0, 0);
            }
        }
        Ok(())
    }
}
