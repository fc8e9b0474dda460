//! The training loop: noise → generator → features → moment estimator →
//! generator loss → ADAM step.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ama::{surrogate_loss_node, AdamMoments, AmaState, MaState, MovingAverage, VInit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{frechet_distance, GaussianAccumulator, GaussianStats};
use crate::moments::{
    batch_moment_nodes, delta, moment_loss_node, moment_loss_weighted, precompute_stats, LayerMoments,
    LayerWeighting, LossTerms, MomentStats,
};
use crate::nets::{build_generator, FeatureExtractor, GeneratorConfig, GeneratorNet};
use crate::optim::Adam;
use crate::tensor::Tensor;

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1_0000_0001;
const STATS_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Ma,
    Ama,
    /// The matching loss evaluated directly on each minibatch.
    NaiveEq1,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Ma => "ma",
            EstimatorKind::Ama => "ama",
            EstimatorKind::NaiveEq1 => "naive-eq1",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ma" => Ok(EstimatorKind::Ma),
            "ama" => Ok(EstimatorKind::Ama),
            "naive-eq1" => Ok(EstimatorKind::NaiveEq1),
            other => Err(Error::Config(alloc::format!(
                "unknown estimator `{other}` (expected ma, ama or naive-eq1)"
            ))),
        }
    }
}

/// Whether the tracked vectors are refreshed before or after the generator
/// loss of the same step is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UpdateOrder {
    #[default]
    UpdateFirst,
    LossFirst,
}

impl fmt::Display for UpdateOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateOrder::UpdateFirst => "update-first",
            UpdateOrder::LossFirst => "loss-first",
        })
    }
}

impl FromStr for UpdateOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "update-first" => Ok(UpdateOrder::UpdateFirst),
            "loss-first" => Ok(UpdateOrder::LossFirst),
            other => Err(Error::Config(alloc::format!(
                "unknown update order `{other}` (expected update-first or loss-first)"
            ))),
        }
    }
}

impl fmt::Display for VInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VInit::FirstDelta => "first-delta",
            VInit::Zero => "zero",
        })
    }
}

impl FromStr for VInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-delta" => Ok(VInit::FirstDelta),
            "zero" => Ok(VInit::Zero),
            other => Err(Error::Config(alloc::format!(
                "unknown v init `{other}` (expected first-delta or zero)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub batch_size: usize,
    pub lr_generator: f32,
    pub ama_rate: f32,
    pub estimator: EstimatorKind,
    /// Number of extractor taps to match; `None` uses all of them.
    pub layers: Option<usize>,
    pub mean_only: bool,
    pub steps: u64,
    pub seed: u64,
    /// Steps between held-out evaluations; 0 evaluates only after the last step.
    pub eval_interval: u64,
    pub eval_samples: usize,
    /// Whether evaluations include the Fréchet distance.
    pub eval_frechet: bool,
    pub v_init: VInit,
    pub update_order: UpdateOrder,
    pub weighting: LayerWeighting,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            batch_size: 64,
            lr_generator: 1e-4,
            ama_rate: 5e-5,
            estimator: EstimatorKind::Ama,
            layers: None,
            mean_only: false,
            steps: 1000,
            seed: 0,
            eval_interval: 100,
            eval_samples: 256,
            eval_frechet: true,
            v_init: VInit::FirstDelta,
            update_order: UpdateOrder::UpdateFirst,
            weighting: LayerWeighting::Unit,
            adam_beta1: crate::ama::ADAM_BETA1,
            adam_beta2: crate::ama::ADAM_BETA2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let min_batch = if self.mean_only { 1 } else { 2 };
        if self.batch_size < min_batch {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !self.mean_only && self.eval_samples < 2 {
            return Err(Error::BatchTooSmall(self.eval_samples));
        }
        if !(self.lr_generator > 0.0 && self.lr_generator.is_finite()) {
            return Err(Error::Config("generator learning rate must be positive".into()));
        }
        if !(self.ama_rate > 0.0 && self.ama_rate <= 1.0) {
            return Err(Error::Config(alloc::format!("moving-average rate {} outside (0, 1]", self.ama_rate)));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(alloc::format!("ADAM beta {b} outside [0, 1)")));
            }
        }
        if self.layers == Some(0) {
            return Err(Error::LayerCount {
                requested: 0,
                available: 0,
            });
        }
        Ok(())
    }

    fn layer_count(&self, extractor: &FeatureExtractor) -> Result<usize> {
        let m = self.layers.unwrap_or(extractor.num_taps());
        extractor.check_layers(m)?;
        Ok(m)
    }
}

/// One row of the run log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Mean part of the matching loss on this step's minibatch.
    pub mean_term: f64,
    /// Variance part of the matching loss on this step's minibatch.
    pub cov_term: f64,
    /// Matching loss of the fixed evaluation batch against the full-data moments.
    pub heldout_loss: Option<f64>,
    pub frechet: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Config(alloc::format!(
                    "log step {} does not follow {}",
                    record.step,
                    last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last_heldout(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.heldout_loss)
    }

    pub fn last_frechet(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.frechet)
    }
}

/// Hooks into the loop for timing and checkpointing.
pub trait TrainObserver {
    /// Milliseconds since some fixed origin; `None` leaves timings blank.
    fn elapsed_ms(&mut self) -> Option<f64> {
        None
    }

    /// Called after every evaluation.
    fn on_eval(&mut self, _trainer: &Trainer<'_>) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl TrainObserver for Silent {}

/// Position of the trainer's random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub step: u64,
    pub generator: GeneratorNet,
    pub optimizer: BTreeMap<String, AdamMoments>,
    pub estimator: Option<MovingAverage>,
    pub rng: RngState,
}

/// Draws `count × dim` standard normal values.
pub fn sample_latent(rng: &mut impl Rng, count: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[count, dim], |_| rng.sample::<f32, _>(StandardNormal))
}

/// `count` images from `generator` with latents drawn from `seed`.
pub fn sample(generator: &GeneratorNet, count: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_latent(&mut rng, count, generator.latent_dim());
    generator.generate(&z)
}

/// Gaussian fit to the deepest tap of `extractor` over `data`.
pub fn frechet_reference(data: &Tensor, extractor: &FeatureExtractor) -> Result<GaussianStats> {
    let deepest = extractor.num_taps();
    let mut acc = GaussianAccumulator::new(extractor.tap_widths()[deepest - 1]);
    let rows = data.shape().first().copied().unwrap_or(0);
    let mut start = 0;
    while start < rows {
        let end = (start + STATS_CHUNK).min(rows);
        let feats = extractor.extract(&data.slice_rows(start, end)?, deepest)?;
        acc.push(&feats[deepest - 1])?;
        start = end;
    }
    acc.finish()
}

pub struct Trainer<'a> {
    config: TrainConfig,
    extractor: &'a FeatureExtractor,
    real: MomentStats,
    reference: Option<GaussianStats>,
    weights: Vec<f64>,
    generator: GeneratorNet,
    optimizer: Adam,
    estimator: Option<MovingAverage>,
    rng: ChaCha8Rng,
    eval_z: Tensor,
    step: u64,
    log: RunLog,
}

impl<'a> Trainer<'a> {
    /// `real` must come from `extractor` and cover at least the configured
    /// number of taps; `reference` enables the Fréchet column.
    pub fn new(
        config: TrainConfig,
        extractor: &'a FeatureExtractor,
        real: &MomentStats,
        reference: Option<GaussianStats>,
    ) -> Result<Self> {
        config.validate()?;
        real.check_extractor(extractor)?;
        let m = config.layer_count(extractor)?;
        let mut real = real.truncate(m)?;
        if config.mean_only {
            real = real.mean_only();
        } else if !real.has_var() {
            return Err(Error::Config("real statistics lack variances".into()));
        }
        let generator = build_generator(&config.generator)?;
        let weights = config.weighting.weights(&real.widths());
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_SEED_SALT);
        let eval_z = sample_latent(&mut eval_rng, config.eval_samples, generator.latent_dim());
        let optimizer = Adam::with_betas(config.lr_generator, config.adam_beta1, config.adam_beta2);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            extractor,
            real,
            reference,
            weights,
            generator,
            optimizer,
            estimator: None,
            eval_z,
            step: 0,
            log: RunLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &GeneratorNet {
        &self.generator
    }

    pub fn into_generator(self) -> GeneratorNet {
        self.generator
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn real_stats(&self) -> &MomentStats {
        &self.real
    }

    pub fn estimator(&self) -> Option<&MovingAverage> {
        self.estimator.as_ref()
    }

    pub fn resume_state(&self) -> ResumeState {
        ResumeState {
            step: self.step,
            generator: self.generator.clone(),
            optimizer: self.optimizer.state().clone(),
            estimator: self.estimator.clone(),
            rng: RngState::of(&self.rng),
        }
    }

    /// Continues from a saved state; the log restarts empty.
    pub fn restore(&mut self, state: ResumeState) -> Result<()> {
        if state.generator.layers != self.generator.layers {
            return Err(Error::Config("checkpoint generator does not match the configuration".into()));
        }
        self.generator = state.generator;
        self.optimizer.set_state(state.optimizer);
        self.estimator = state.estimator;
        self.rng = state.rng.restore();
        self.step = state.step;
        self.log = RunLog::default();
        Ok(())
    }

    fn batch_moments(&self, g: &Graph, nodes: &[crate::moments::BatchMomentNodes], n: usize) -> MomentStats {
        MomentStats {
            layers: nodes
                .iter()
                .map(|b| LayerMoments {
                    mean: g.value(b.mean).data().to_vec(),
                    var: b.var.map(|v| g.value(v).data().to_vec()),
                })
                .collect(),
            count: n as u64,
            fingerprint: self.real.fingerprint,
        }
    }

    /// Runs one iteration and returns the minibatch loss terms.
    pub fn step(&mut self) -> Result<LossTerms> {
        let cfg = &self.config;
        let n = cfg.batch_size;
        let m = self.real.num_layers();
        let with_var = !cfg.mean_only;
        let z = sample_latent(&mut self.rng, n, self.generator.latent_dim());
        let mut g = Graph::new();
        let zn = g.input("z", z);
        let fake = self.generator.forward(&mut g, zn, true)?;
        let taps = self.extractor.taps(&mut g, fake, m, false)?;
        let nodes = batch_moment_nodes(&mut g, &taps, with_var)?;
        let batch = self.batch_moments(&g, &nodes, n);
        let terms = moment_loss_weighted(&self.real, &batch, &self.weights)?;
        if !terms.total().is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                last_finite: self.log.records.last().map(|r| r.mean_term + r.cov_term),
            });
        }
        let loss = match cfg.estimator {
            EstimatorKind::NaiveEq1 => moment_loss_node(&mut g, &self.real, &nodes, &self.weights)?,
            kind => {
                let d = delta(&self.real, &batch)?;
                let mut est = match self.estimator.take() {
                    Some(e) => e,
                    None => match kind {
                        EstimatorKind::Ma => MovingAverage::Ma(MaState::new(cfg.ama_rate, &d, cfg.v_init)?),
                        _ => MovingAverage::Ama(AmaState::new(cfg.ama_rate, &d, cfg.v_init)?),
                    },
                };
                if cfg.update_order == UpdateOrder::UpdateFirst {
                    est.update(&d)?;
                }
                let var = est.var();
                let loss = surrogate_loss_node(&mut g, &est.mean(), var.as_deref(), &self.real, &nodes, &self.weights)?;
                if cfg.update_order == UpdateOrder::LossFirst {
                    est.update(&d)?;
                }
                self.estimator = Some(est);
                loss
            }
        };
        let grads = g.backward(loss)?;
        self.optimizer.step(&mut self.generator.params, &grads)?;
        self.step += 1;
        Ok(terms)
    }

    /// Matching loss and Fréchet distance of the fixed evaluation batch.
    pub fn evaluate(&self) -> Result<(f64, Option<f64>)> {
        let m = self.real.num_layers();
        let fake = self.generator.generate(&self.eval_z)?;
        let mut g = Graph::new();
        let x = g.input("x", fake);
        let deepest = self.extractor.num_taps();
        let taps = self.extractor.taps(&mut g, x, m.max(if self.want_frechet() { deepest } else { 0 }), false)?;
        let nodes = batch_moment_nodes(&mut g, &taps[..m], !self.config.mean_only)?;
        let batch = self.batch_moments(&g, &nodes, self.config.eval_samples);
        let loss = moment_loss_weighted(&self.real, &batch, &self.weights)?.total();
        let fd = match (&self.reference, self.want_frechet()) {
            (Some(reference), true) => {
                let stats = GaussianStats::from_features(g.value(taps[deepest - 1]))?;
                Some(frechet_distance(reference, &stats)?)
            }
            _ => None,
        };
        Ok((loss, fd))
    }

    fn want_frechet(&self) -> bool {
        self.config.eval_frechet && self.reference.is_some()
    }

    /// Trains until `config.steps` iterations have run.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        let total = self.config.steps;
        while self.step < total {
            let terms = self.step()?;
            let step = self.step;
            let interval = self.config.eval_interval;
            let eval_now = step == total || (interval > 0 && step.is_multiple_of(interval));
            let (heldout_loss, frechet) = if eval_now {
                let (l, fd) = self.evaluate()?;
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        last_finite: self.log.last_heldout(),
                    });
                }
                (Some(l), fd)
            } else {
                (None, None)
            };
            self.log.push(StepRecord {
                step,
                mean_term: terms.mean,
                cov_term: terms.var,
                heldout_loss,
                frechet,
                wall_ms: observer.elapsed_ms(),
            })?;
            if eval_now {
                observer.on_eval(self)?;
            }
        }
        Ok(())
    }
}

/// Precomputes statistics from `data`, trains, and returns the generator and log.
pub fn train(
    config: &TrainConfig,
    data: &Tensor,
    extractor: &FeatureExtractor,
    observer: &mut dyn TrainObserver,
) -> Result<(GeneratorNet, RunLog)> {
    config.validate()?;
    let m = config.layer_count(extractor)?;
    let real = precompute_stats(data, extractor, m, STATS_CHUNK)?;
    let reference = if config.eval_frechet {
        Some(frechet_reference(data, extractor)?)
    } else {
        None
    };
    let mut trainer = Trainer::new(config.clone(), extractor, &real, reference)?;
    trainer.run(observer)?;
    let log = trainer.log.clone();
    Ok((trainer.into_generator(), log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub layers: usize,
    pub final_loss: f64,
    pub frechet: Option<f64>,
}

/// Direction of the Fréchet distance as more layers are matched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    Improving,
    Worsening,
    Mixed,
    Unknown,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Improving => "improving",
            Trend::Worsening => "worsening",
            Trend::Mixed => "mixed",
            Trend::Unknown => "unknown",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub trend: Trend,
}

/// One run per layer count with the shared seed.
pub fn layer_ablation(
    config: &TrainConfig,
    data: &Tensor,
    extractor: &FeatureExtractor,
    layer_counts: &[usize],
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(layer_counts.len());
    for &m in layer_counts {
        extractor.check_layers(m)?;
        let cfg = TrainConfig {
            layers: Some(m),
            ..config.clone()
        };
        let (_, log) = train(&cfg, data, extractor, &mut Silent)?;
        rows.push(AblationRow {
            layers: m,
            final_loss: log.last_heldout().unwrap_or(f64::NAN),
            frechet: log.last_frechet(),
        });
    }
    let trend = trend_of(&rows);
    Ok(AblationReport { rows, trend })
}

fn trend_of(rows: &[AblationRow]) -> Trend {
    let mut sorted: Vec<(usize, f64)> = rows.iter().filter_map(|r| r.frechet.map(|f| (r.layers, f))).collect();
    sorted.sort_by_key(|r| r.0);
    if sorted.len() < 2 {
        return Trend::Unknown;
    }
    let steps: Vec<f64> = sorted.windows(2).map(|w| w[1].1 - w[0].1).collect();
    if steps.iter().all(|&d| d <= 0.0) {
        Trend::Improving
    } else if steps.iter().all(|&d| d >= 0.0) {
        Trend::Worsening
    } else {
        Trend::Mixed
    }
}
