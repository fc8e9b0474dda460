//! Flat `key = value` run configuration.

use std::path::Path;

use gfmn_core::nets::{GeneratorConfig, PretrainConfig};
use gfmn_core::trainer::TrainConfig;

use crate::error::{IoError, Result};

pub const SEED_ENV: &str = "GFMN_SEED";

/// Encoder architecture knobs; the image shape comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSettings {
    pub latent_dim: usize,
    pub width_divisor: usize,
    pub batch_norm: bool,
    pub seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            width_divisor: 8,
            batch_norm: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoConfig {
    /// Training images (`.tnsr` or IDX).
    pub data: String,
    /// Extractor checkpoint, or `identity`.
    pub encoder: String,
    /// Precomputed statistics; empty means compute from `data`.
    pub stats: String,
    pub out_dir: String,
    /// Adds wall-clock milliseconds to the run log (breaks byte-identical logs).
    pub log_wall_clock: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            data: "data.tnsr".into(),
            encoder: "encoder.ckpt".into(),
            stats: String::new(),
            out_dir: "run".into(),
            log_wall_clock: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderSettings,
    pub pretrain: PretrainConfig,
    pub io: IoConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_layers(value: &str) -> std::result::Result<Option<usize>, String> {
    if value == "all" {
        Ok(None)
    } else {
        parse("trainer.layers", value).map(Some)
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let g: &GeneratorConfig = &t.generator;
        let e = &self.encoder;
        let p = &self.pretrain;
        let io = &self.io;
        vec![
            ("generator.kind", g.kind.to_string()),
            ("generator.n_z", g.latent_dim.to_string()),
            ("generator.image", g.image.to_string()),
            ("generator.width_divisor", g.width_divisor.to_string()),
            ("generator.batch_norm", g.batch_norm.to_string()),
            ("generator.seed", g.seed.to_string()),
            ("trainer.batch_size", t.batch_size.to_string()),
            ("trainer.lr_generator", t.lr_generator.to_string()),
            ("trainer.ama_rate", t.ama_rate.to_string()),
            ("trainer.estimator", t.estimator.to_string()),
            ("trainer.layers", t.layers.map_or("all".into(), |m| m.to_string())),
            ("trainer.mean_only", t.mean_only.to_string()),
            ("trainer.steps", t.steps.to_string()),
            ("trainer.seed", t.seed.to_string()),
            ("trainer.eval_interval", t.eval_interval.to_string()),
            ("trainer.eval_samples", t.eval_samples.to_string()),
            ("trainer.eval_frechet", t.eval_frechet.to_string()),
            ("trainer.v_init", t.v_init.to_string()),
            ("trainer.update_order", t.update_order.to_string()),
            ("trainer.weighting", t.weighting.to_string()),
            ("trainer.adam_beta1", t.adam_beta1.to_string()),
            ("trainer.adam_beta2", t.adam_beta2.to_string()),
            ("encoder.latent_dim", e.latent_dim.to_string()),
            ("encoder.width_divisor", e.width_divisor.to_string()),
            ("encoder.batch_norm", e.batch_norm.to_string()),
            ("encoder.seed", e.seed.to_string()),
            ("pretrain.loss", p.loss.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.lr", p.learning_rate.to_string()),
            ("pretrain.seed", p.seed.to_string()),
            ("io.data", io.data.clone()),
            ("io.encoder", io.encoder.clone()),
            ("io.stats", io.stats.clone()),
            ("io.out_dir", io.out_dir.clone()),
            ("io.log_wall_clock", io.log_wall_clock.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "generator.kind" => t.generator.kind = parse(key, v)?,
            "generator.n_z" => t.generator.latent_dim = parse(key, v)?,
            "generator.image" => t.generator.image = parse(key, v)?,
            "generator.width_divisor" => t.generator.width_divisor = parse(key, v)?,
            "generator.batch_norm" => t.generator.batch_norm = parse(key, v)?,
            "generator.seed" => t.generator.seed = parse(key, v)?,
            "trainer.batch_size" => t.batch_size = parse(key, v)?,
            "trainer.lr_generator" => t.lr_generator = parse(key, v)?,
            "trainer.ama_rate" => t.ama_rate = parse(key, v)?,
            "trainer.estimator" => t.estimator = parse(key, v)?,
            "trainer.layers" => t.layers = parse_layers(v)?,
            "trainer.mean_only" => t.mean_only = parse(key, v)?,
            "trainer.steps" => t.steps = parse(key, v)?,
            "trainer.seed" => t.seed = parse(key, v)?,
            "trainer.eval_interval" => t.eval_interval = parse(key, v)?,
            "trainer.eval_samples" => t.eval_samples = parse(key, v)?,
            "trainer.eval_frechet" => t.eval_frechet = parse(key, v)?,
            "trainer.v_init" => t.v_init = parse(key, v)?,
            "trainer.update_order" => t.update_order = parse(key, v)?,
            "trainer.weighting" => t.weighting = parse(key, v)?,
            "trainer.adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "trainer.adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "encoder.latent_dim" => self.encoder.latent_dim = parse(key, v)?,
            "encoder.width_divisor" => self.encoder.width_divisor = parse(key, v)?,
            "encoder.batch_norm" => self.encoder.batch_norm = parse(key, v)?,
            "encoder.seed" => self.encoder.seed = parse(key, v)?,
            "pretrain.loss" => self.pretrain.loss = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.learning_rate = parse(key, v)?,
            "pretrain.seed" => self.pretrain.seed = parse(key, v)?,
            "io.data" => self.io.data = v.to_string(),
            "io.encoder" => self.io.encoder = v.to_string(),
            "io.stats" => self.io.stats = v.to_string(),
            "io.out_dir" => self.io.out_dir = v.to_string(),
            "io.log_wall_clock" => self.io.log_wall_clock = parse(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# gfmn run configuration\n");
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses `text`; missing keys keep their defaults and are logged.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let content = content.split(" #").next().unwrap_or(content).trim();
            let (key, value) = content.split_once('=').ok_or_else(|| IoError::Config {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(IoError::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, value).map_err(|msg| IoError::Config { line, msg })?;
        }
        for (key, value) in RunConfig::default().entries() {
            if !seen.contains(key) {
                log::info!("{key} not set; using default `{value}`");
            }
        }
        cfg.train.validate().map_err(|e| IoError::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `GFMN_SEED` to the trainer and generator seeds.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed: u64 = raw.trim().parse().map_err(|_| IoError::Config {
                line: 0,
                msg: format!("{SEED_ENV}=`{raw}` is not an unsigned integer"),
            })?;
            log::info!("{SEED_ENV} overrides seed {} with {seed}", self.train.seed);
            self.train.seed = seed;
            self.train.generator.seed = seed;
        }
        Ok(())
    }
}
