//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gfmn_core::ama::{surrogate_loss_node, VInit};
use gfmn_core::gradcheck::{grad_check, GradCheckOptions, GradReport};
use gfmn_core::metrics::{feature_mmd, frechet_distance, run_regret, Estimator, GaussianStats};
use gfmn_core::moments::{batch_moment_nodes, moment_loss, precompute_stats};
use gfmn_core::nets::{
    build_encoder, build_generator, pretrain_autoencoder, EncoderConfig, FeatureExtractor, GeneratorConfig,
    GeneratorKind, ImageShape, ReconLoss,
};
use gfmn_core::trainer::{frechet_reference, layer_ablation, sample, TrainObserver, Trainer};
use gfmn_core::{Graph, Tensor};

use crate::checkpoint::{self, get_extractor, get_generator, get_stats, load_with, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::error::{write_atomic, IoError, Result};
use crate::images::write_images;
use crate::runlog::{write_ablation, write_runlog};

const STATS_CHUNK: usize = 256;

#[derive(Parser, Debug)]
#[command(name = "gfmn", version, about = "Train image generators by matching extractor feature moments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Precompute real-data feature moments.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Extractor checkpoint or `identity`.
        #[arg(long)]
        encoder: String,
        /// Number of taps; defaults to all.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an autoencoder and save its frozen encoder.
    PretrainAe(PretrainArgs),
    /// Train a generator from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw images from a trained generator.
    Sample {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare two image sets under an extractor; prints one number.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long, value_enum, default_value_t = Metric::Fd)]
        metric: Metric,
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Train once per layer count and tabulate the results.
    AblateLayers {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated layer counts.
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on small networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Empirical regret of MA and AMA on a synthetic stream.
    RegretBench {
        #[arg(long, value_enum, default_value_t = Stream::Noisy)]
        stream: Stream,
        #[arg(long, default_value_t = 1000)]
        length: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.01)]
        alpha: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from the first observation instead of zero.
        #[arg(long)]
        first_delta: bool,
    },
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reads `encoder.*` and `pretrain.*` keys; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    width_divisor: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Fd,
    Mmd,
    Eq1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stream {
    Constant,
    Alternating,
    Noisy,
}

fn image_width(data: &Tensor) -> usize {
    data.shape()[1..].iter().product()
}

/// Loads an extractor checkpoint, or builds the identity map for `width`.
pub fn load_extractor(spec: &str, width: usize) -> Result<FeatureExtractor> {
    if spec == "identity" {
        Ok(FeatureExtractor::identity(width))
    } else {
        load_with(Path::new(spec), get_extractor)
    }
}

fn save_one(path: &Path, f: impl FnOnce(&mut Checkpoint)) -> Result<()> {
    let mut ck = Checkpoint::new();
    f(&mut ck);
    ck.save(path)
}

struct RunObserver {
    out_dir: PathBuf,
    start: Instant,
    wall_clock: bool,
}

impl RunObserver {
    fn persist(&self, trainer: &Trainer<'_>) -> Result<()> {
        checkpoint::training_checkpoint(&trainer.resume_state()).save(&self.out_dir.join("checkpoint.ckpt"))?;
        write_runlog(&self.out_dir.join("runlog.csv"), trainer.log())
    }
}

impl TrainObserver for RunObserver {
    fn elapsed_ms(&mut self) -> Option<f64> {
        self.wall_clock.then(|| self.start.elapsed().as_secs_f64() * 1e3)
    }

    fn on_eval(&mut self, trainer: &Trainer<'_>) -> gfmn_core::Result<()> {
        self.persist(trainer).map_err(|e| gfmn_core::Error::Observer(e.to_string()))?;
        let last = trainer.log().records.last();
        if let Some(r) = last {
            log::info!(
                "step {} heldout {:?} frechet {:?}",
                r.step,
                r.heldout_loss,
                r.frechet
            );
        }
        Ok(())
    }
}

/// Loads data, extractor and statistics named by a run configuration.
fn prepare(cfg: &RunConfig) -> Result<(Tensor, FeatureExtractor)> {
    let data = load_dataset(Path::new(&cfg.io.data))?;
    let extractor = load_extractor(&cfg.io.encoder, image_width(&data))?;
    Ok((data, extractor))
}

fn train(config: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply_env()?;
    let (data, extractor) = prepare(&cfg)?;
    let m = cfg.train.layers.unwrap_or(extractor.num_taps());
    let real = if cfg.io.stats.is_empty() {
        precompute_stats(&data, &extractor, m, STATS_CHUNK)?
    } else {
        load_with(Path::new(&cfg.io.stats), get_stats)?
    };
    let reference = if cfg.train.eval_frechet {
        Some(frechet_reference(&data, &extractor)?)
    } else {
        None
    };
    let out_dir = PathBuf::from(&cfg.io.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| IoError::io(&out_dir, e))?;
    write_atomic(&out_dir.join("config.cfg"), cfg.render().as_bytes())?;
    let mut trainer = Trainer::new(cfg.train.clone(), &extractor, &real, reference)?;
    if let Some(path) = resume {
        trainer.restore(load_with(path, checkpoint::resume_state)?)?;
        log::info!("resumed at step {}", trainer.step_count());
    }
    let mut observer = RunObserver {
        out_dir: out_dir.clone(),
        start: Instant::now(),
        wall_clock: cfg.io.log_wall_clock,
    };
    match trainer.run(&mut observer) {
        Ok(()) => observer.persist(&trainer),
        Err(e) => {
            write_runlog(&out_dir.join("runlog.csv"), trainer.log())?;
            Err(e.into())
        }
    }
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut enc = cfg.encoder;
    let mut pre = cfg.pretrain;
    if let Some(l) = &args.loss {
        pre.loss = l.parse::<ReconLoss>()?;
    }
    pre.epochs = args.epochs.unwrap_or(pre.epochs);
    pre.batch_size = args.batch_size.unwrap_or(pre.batch_size);
    pre.learning_rate = args.lr.unwrap_or(pre.learning_rate);
    pre.seed = args.seed.unwrap_or(pre.seed);
    enc.latent_dim = args.latent_dim.unwrap_or(enc.latent_dim);
    enc.width_divisor = args.width_divisor.unwrap_or(enc.width_divisor);
    enc.seed = args.seed.unwrap_or(enc.seed);
    let data = load_dataset(&args.data)?;
    let s = data.shape();
    if s.len() != 4 {
        return Err(IoError::format(&args.data, format!("expected [N, C, H, W] images, got {s:?}")));
    }
    let (encoder, decoder) = build_encoder(&EncoderConfig {
        image: ImageShape::new(s[1], s[2], s[3]),
        latent_dim: enc.latent_dim,
        width_divisor: enc.width_divisor,
        batch_norm: enc.batch_norm,
        seed: enc.seed,
    })?;
    let out = pretrain_autoencoder(encoder, decoder, &data, &pre)?;
    log::info!("reconstruction loss {} -> {}", out.initial_loss, out.final_loss);
    save_one(&args.out, |ck| checkpoint::put_extractor(ck, &out.extractor))?;
    println!("{}", out.final_loss);
    Ok(())
}

fn eval(a: &Path, b: &Path, encoder: &str, metric: Metric, layers: Option<usize>) -> Result<f64> {
    let da = load_dataset(a)?;
    let db = load_dataset(b)?;
    if da.shape()[1..] != db.shape()[1..] {
        return Err(IoError::format(b, format!("image shape {:?} differs from {:?}", &db.shape()[1..], &da.shape()[1..])));
    }
    let e = load_extractor(encoder, image_width(&da))?;
    let m = layers.unwrap_or(e.num_taps());
    Ok(match metric {
        Metric::Fd => {
            let ga: GaussianStats = frechet_reference(&da, &e)?;
            let gb = frechet_reference(&db, &e)?;
            frechet_distance(&ga, &gb)?
        }
        Metric::Mmd => feature_mmd(&da, &db, &e, m, STATS_CHUNK)?,
        Metric::Eq1 => {
            let sa = precompute_stats(&da, &e, m, STATS_CHUNK)?;
            let sb = precompute_stats(&db, &e, m, STATS_CHUNK)?;
            moment_loss(&sa, &sb)?.total()
        }
    })
}

fn print_report(label: &str, report: &GradReport, tolerance: f64) -> bool {
    for p in &report.params {
        println!(
            "{label} {} checked={} skipped={} max_rel_error={:.3e}",
            p.name, p.checked, p.skipped, p.max_rel_error
        );
    }
    let ok = report.passes(tolerance);
    println!("{label} {}", if ok { "PASS" } else { "FAIL" });
    ok
}

/// Gradient check of a two-layer conv net and of the surrogate loss through a
/// small generator.
fn gradcheck(seed: u64, epsilon: f64, tolerance: f64) -> Result<bool> {
    let opts = GradCheckOptions {
        epsilon,
        seed,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize], scale: f32| Tensor::from_fn(shape, |_| rng.random_range(-scale..scale));

    let mut g = Graph::new();
    let x = g.input("x", rand_t(&[2, 2, 6, 6], 1.0));
    let w1 = g.param("w1", rand_t(&[3, 2, 3, 3], 0.5), true);
    let w2 = g.param("w2", rand_t(&[2, 3, 3, 3], 0.5), true);
    let h = g.conv2d(x, w1, 1, 1)?;
    let h = g.tanh(h)?;
    let h = g.conv2d(h, w2, 2, 1)?;
    let h = g.square(h)?;
    let loss = g.mean(h)?;
    let conv_ok = print_report("conv", &grad_check(&g, loss, &opts)?, tolerance);

    let gen = build_generator(&GeneratorConfig {
        kind: GeneratorKind::Dcgan,
        latent_dim: 3,
        image: ImageShape::square(1, 8),
        width_divisor: 64,
        batch_norm: false,
        seed,
    })?;
    let e = FeatureExtractor::identity(64);
    let mut g = Graph::new();
    let z = g.input("z", rand_t(&[4, 3], 1.0));
    let fake = gen.forward(&mut g, z, true)?;
    let taps = e.taps(&mut g, fake, 1, false)?;
    let nodes = batch_moment_nodes(&mut g, &taps, true)?;
    let real = gfmn_core::moments::MomentStats {
        layers: vec![gfmn_core::moments::LayerMoments {
            mean: rand_t(&[64], 0.5).into_data(),
            var: Some(rand_t(&[64], 0.5).into_data().iter().map(|v| v.abs()).collect()),
        }],
        count: 1,
        fingerprint: e.fingerprint(),
    };
    let v = rand_t(&[64], 1.0).into_data();
    let vs = rand_t(&[64], 1.0).into_data();
    let loss = surrogate_loss_node(&mut g, &[&v], Some(&[&vs]), &real, &nodes, &[1.0])?;
    let sur_ok = print_report("surrogate", &grad_check(&g, loss, &opts)?, tolerance);
    Ok(conv_ok && sur_ok)
}

fn regret_bench(stream: Stream, length: usize, dim: usize, alpha: f32, seed: u64, first_delta: bool) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let other: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let deltas: Vec<Vec<f32>> = (0..length)
        .map(|t| match stream {
            Stream::Constant => center.clone(),
            Stream::Alternating => {
                if t % 2 == 0 {
                    center.clone()
                } else {
                    other.clone()
                }
            }
            Stream::Noisy => center.iter().map(|c| c + rng.random_range(-0.5..0.5)).collect(),
        })
        .collect();
    let init = if first_delta { VInit::FirstDelta } else { VInit::Zero };
    let v0 = match (init, deltas.first()) {
        (VInit::FirstDelta, Some(d)) => d.clone(),
        _ => vec![0.0; dim],
    };
    for r in run_regret(&deltas, &[Estimator::Ma, Estimator::Ama], &v0, alpha)? {
        println!(
            "{} rounds={} cost={} optimum={} regret={}",
            r.estimator, r.rounds, r.cumulative_cost, r.optimum_cost, r.regret
        );
    }
    Ok(())
}

/// Runs a parsed command; `Ok(false)` means a check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Stats {
            data,
            encoder,
            layers,
            out,
        } => {
            let d = load_dataset(&data)?;
            let e = load_extractor(&encoder, image_width(&d))?;
            let m = layers.unwrap_or(e.num_taps());
            let stats = precompute_stats(&d, &e, m, STATS_CHUNK)?;
            save_one(&out, |ck| checkpoint::put_stats(ck, &stats))?;
        }
        Command::PretrainAe(args) => pretrain(&args)?,
        Command::Train { config, resume } => train(&config, resume.as_deref())?,
        Command::Sample {
            generator,
            count,
            seed,
            out_dir,
        } => {
            let g = load_with(&generator, get_generator)?;
            let batch = sample(&g, count, seed)?;
            let files = write_images(&batch, &out_dir)?;
            println!("{}", files.len());
        }
        Command::Eval {
            a,
            b,
            encoder,
            metric,
            layers,
        } => println!("{}", eval(&a, &b, &encoder, metric, layers)?),
        Command::AblateLayers { config, layers, out } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply_env()?;
            let (data, extractor) = prepare(&cfg)?;
            let report = layer_ablation(&cfg.train, &data, &extractor, &layers)?;
            write_ablation(&out, &report)?;
            println!("trend {}", report.trend);
        }
        Command::Gradcheck {
            seed,
            epsilon,
            tolerance,
        } => return gradcheck(seed, epsilon, tolerance),
        Command::RegretBench {
            stream,
            length,
            dim,
            alpha,
            seed,
            first_delta,
        } => regret_bench(stream, length, dim, alpha, seed, first_delta)?,
    }
    Ok(true)
}
