//! Model, loss and training configuration in a flat `key = value` format.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    // architecture
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub ha_enabled: bool,
    pub hp_enabled: bool,
    pub fc_enabled: bool,
    pub hpf_scales: Vec<usize>,
    pub hpf_msf: bool,
    pub hpf_baf: bool,
    pub adapter_ratio: f64,
    pub adapter_lambda_init: f64,
    pub decoder_dims: Vec<usize>,
    pub decoder_heads: Vec<usize>,
    pub tau_init: f64,
    pub max_depth: f64,
    // loss
    pub min_depth: f64,
    pub silog_lambda: f64,
    pub silog_alpha: f64,
    // optimization
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub init_seed: u64,
    pub data_seed: u64,
    pub shuffle_seed: u64,
    pub flip: bool,
    // data
    pub train_size: usize,
    pub eval_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_manifest: Option<String>,
    pub eval_manifest: Option<String>,
    pub scene_rects: usize,
    pub scene_spheres: usize,
    pub scene_near: f64,
    pub scene_far: f64,
    pub scene_texture: f64,
    pub scene_fog: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            window_size: 7,
            mlp_ratio: 4,
            ha_enabled: true,
            hp_enabled: true,
            fc_enabled: true,
            hpf_scales: vec![1, 2, 3],
            hpf_msf: true,
            hpf_baf: true,
            adapter_ratio: 0.25,
            adapter_lambda_init: 1e-2,
            decoder_dims: vec![128, 64, 32, 32],
            decoder_heads: vec![4, 2, 2, 1],
            tau_init: 1.0,
            max_depth: 10.0,
            min_depth: 1e-3,
            silog_lambda: 0.85,
            silog_alpha: 10.0,
            lr_start: 2e-5,
            lr_end: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 30,
            max_steps: 0,
            init_seed: 0,
            data_seed: 0,
            shuffle_seed: 0,
            flip: true,
            train_size: 64,
            eval_size: 96,
            train_scenes: 32,
            eval_scenes: 8,
            train_manifest: None,
            eval_manifest: None,
            scene_rects: 3,
            scene_spheres: 2,
            scene_near: 0.5,
            scene_far: 10.0,
            scene_texture: 0.5,
            scene_fog: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl ModelConfig {
    /// The training-scale config with an outdoor depth range.
    pub fn outdoor() -> Self {
        ModelConfig { max_depth: 80.0, scene_far: 80.0, ..Self::default() }
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "depths" => self.depths = parse_list(key, value)?,
            "heads" => self.heads = parse_list(key, value)?,
            "window_size" => self.window_size = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "ha_enabled" => self.ha_enabled = parse_bool(key, value)?,
            "hp_enabled" => self.hp_enabled = parse_bool(key, value)?,
            "fc_enabled" => self.fc_enabled = parse_bool(key, value)?,
            "hpf_scales" => self.hpf_scales = parse_list(key, value)?,
            "hpf_msf" => self.hpf_msf = parse_bool(key, value)?,
            "hpf_baf" => self.hpf_baf = parse_bool(key, value)?,
            "adapter_ratio" => self.adapter_ratio = parse(key, value)?,
            "adapter_lambda_init" => self.adapter_lambda_init = parse(key, value)?,
            "decoder_dims" => self.decoder_dims = parse_list(key, value)?,
            "decoder_heads" => self.decoder_heads = parse_list(key, value)?,
            "tau_init" => self.tau_init = parse(key, value)?,
            "max_depth" => self.max_depth = parse(key, value)?,
            "min_depth" => self.min_depth = parse(key, value)?,
            "silog_lambda" => self.silog_lambda = parse(key, value)?,
            "silog_alpha" => self.silog_alpha = parse(key, value)?,
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "init_seed" => self.init_seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "shuffle_seed" => self.shuffle_seed = parse(key, value)?,
            "flip" => self.flip = parse_bool(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "eval_scenes" => self.eval_scenes = parse(key, value)?,
            "train_manifest" => self.train_manifest = opt_path(value),
            "eval_manifest" => self.eval_manifest = opt_path(value),
            "scene_rects" => self.scene_rects = parse(key, value)?,
            "scene_spheres" => self.scene_spheres = parse(key, value)?,
            "scene_near" => self.scene_near = parse(key, value)?,
            "scene_far" => self.scene_far = parse(key, value)?,
            "scene_texture" => self.scene_texture = parse(key, value)?,
            "scene_fog" => self.scene_fog = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Sets all three seeds from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.init_seed = seed;
        self.data_seed = seed;
        self.shuffle_seed = seed;
    }

    /// Channel width of encoder stage `i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return fail(format!("depths and heads need 4 stages, got {} and {}", self.depths.len(), self.heads.len()));
        }
        if self.decoder_dims.len() != 4 || self.decoder_heads.len() != 4 {
            return fail("decoder_dims and decoder_heads need 4 levels".into());
        }
        if self.embed_dim == 0 || self.mlp_ratio == 0 || self.window_size == 0 {
            return fail("embed_dim, mlp_ratio and window_size must be positive".into());
        }
        for i in 0..4 {
            let (c, h) = (self.stage_dim(i), self.heads[i]);
            if self.depths[i] == 0 || h == 0 || c % h != 0 {
                return fail(format!("stage {i}: width {c} not divisible by {h} heads (depth {})", self.depths[i]));
            }
            let (d, dh) = (self.decoder_dims[i], self.decoder_heads[i]);
            if d == 0 || dh == 0 || d % dh != 0 {
                return fail(format!("decoder level {i}: width {d} not divisible by {dh} heads"));
            }
        }
        if self.hpf_scales.is_empty() || self.hpf_scales[0] == 0 || self.hpf_scales.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("hpf_scales must be strictly increasing and ≥ 1, got {:?}", self.hpf_scales));
        }
        if self.hp_enabled && !self.hpf_msf && !self.hpf_baf {
            return fail("hp_enabled needs at least one of hpf_msf, hpf_baf".into());
        }
        if !(self.adapter_ratio > 0.0 && self.adapter_ratio <= 1.0) {
            return fail(format!("adapter_ratio must lie in (0, 1], got {}", self.adapter_ratio));
        }
        if !(self.tau_init > 0.0) {
            return fail("tau_init must be positive".into());
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return fail(format!("need 0 < min_depth < max_depth, got {} and {}", self.min_depth, self.max_depth));
        }
        if !(0.0..=1.0).contains(&self.silog_lambda) || !(self.silog_alpha > 0.0) {
            return fail("silog_lambda must lie in [0, 1] and silog_alpha be positive".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return fail("adam betas must lie in [0, 1) and adam_eps be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        for (k, s) in [("train_size", self.train_size), ("eval_size", self.eval_size)] {
            if s == 0 || s % 32 != 0 {
                return fail(format!("{k} must be a positive multiple of 32, got {s}"));
            }
        }
        if !(self.scene_near > 0.0 && self.scene_far > self.scene_near) {
            return fail(format!("need 0 < scene_near < scene_far, got {} and {}", self.scene_near, self.scene_far));
        }
        if !(0.0..=1.0).contains(&self.scene_texture) || !(0.0..=1.0).contains(&self.scene_fog) {
            return fail("scene_texture and scene_fog must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("embed_dim", self.embed_dim.to_string());
        kv("depths", list(&self.depths));
        kv("heads", list(&self.heads));
        kv("window_size", self.window_size.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("ha_enabled", self.ha_enabled.to_string());
        kv("hp_enabled", self.hp_enabled.to_string());
        kv("fc_enabled", self.fc_enabled.to_string());
        kv("hpf_scales", list(&self.hpf_scales));
        kv("hpf_msf", self.hpf_msf.to_string());
        kv("hpf_baf", self.hpf_baf.to_string());
        kv("adapter_ratio", self.adapter_ratio.to_string());
        kv("adapter_lambda_init", self.adapter_lambda_init.to_string());
        kv("decoder_dims", list(&self.decoder_dims));
        kv("decoder_heads", list(&self.decoder_heads));
        kv("tau_init", self.tau_init.to_string());
        kv("max_depth", self.max_depth.to_string());
        kv("min_depth", self.min_depth.to_string());
        kv("silog_lambda", self.silog_lambda.to_string());
        kv("silog_alpha", self.silog_alpha.to_string());
        kv("lr_start", self.lr_start.to_string());
        kv("lr_end", self.lr_end.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("init_seed", self.init_seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("shuffle_seed", self.shuffle_seed.to_string());
        kv("flip", self.flip.to_string());
        kv("train_size", self.train_size.to_string());
        kv("eval_size", self.eval_size.to_string());
        kv("train_scenes", self.train_scenes.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("train_manifest", self.train_manifest.clone().unwrap_or_default());
        kv("eval_manifest", self.eval_manifest.clone().unwrap_or_default());
        kv("scene_rects", self.scene_rects.to_string());
        kv("scene_spheres", self.scene_spheres.to_string());
        kv("scene_near", self.scene_near.to_string());
        kv("scene_far", self.scene_far.to_string());
        kv("scene_texture", self.scene_texture.to_string());
        kv("scene_fog", self.scene_fog.to_string());
        s
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}
