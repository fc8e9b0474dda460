use gfmn::checkpoint::{self, Checkpoint, Tag};
use gfmn::config::RunConfig;
use gfmn::dataset::{decode_idx_images, decode_tnsr, encode_idx_images, encode_tnsr, load_dataset, save_tnsr};
use gfmn::images::{decode_pnm, encode_pnm, quantize, write_images};
use gfmn_core::ama::{AmaState, MovingAverage, VInit};
use gfmn_core::moments::{precompute_stats, LayerWeighting, MomentDelta};
use gfmn_core::nets::{build_encoder, build_generator, EncoderConfig, GeneratorConfig, GeneratorKind, ImageShape, ReconLoss};
use gfmn_core::trainer::{EstimatorKind, Silent, TrainConfig, Trainer, UpdateOrder};
use gfmn_core::Tensor;
use proptest::prelude::*;

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        kind: GeneratorKind::Dcgan,
        latent_dim: 4,
        image: ImageShape::square(1, 8),
        width_divisor: 32,
        batch_norm: true,
        seed: 3,
    }
}

fn toy_images(n: usize) -> Tensor {
    Tensor::from_fn(&[n, 1, 8, 8], |i| (((i * 37) % 101) as f32 / 50.0) - 1.0)
}

#[test]
fn training_checkpoint_round_trips_byte_identical() {
    let data = toy_images(32);
    let e = gfmn_core::nets::FeatureExtractor::identity(64);
    let real = precompute_stats(&data, &e, 1, 16).unwrap();
    let cfg = TrainConfig {
        generator: small_generator(),
        batch_size: 4,
        steps: 3,
        eval_interval: 0,
        eval_samples: 8,
        eval_frechet: false,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, &e, &real, None).unwrap();
    tr.run(&mut Silent).unwrap();
    let first = checkpoint::training_checkpoint(&tr.resume_state()).to_bytes();
    let parsed = Checkpoint::from_bytes(&first).unwrap();
    assert_eq!(parsed.to_bytes(), first);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    parsed.save(&path).unwrap();
    let again = Checkpoint::load(&path).unwrap();
    assert_eq!(again.to_bytes(), first);
    let state = checkpoint::resume_state(&again).unwrap();
    assert_eq!(state.step, 3);
}

#[test]
fn extractor_and_stats_round_trip() {
    let (enc, _) = build_encoder(&EncoderConfig {
        image: ImageShape::square(1, 8),
        latent_dim: 4,
        width_divisor: 32,
        batch_norm: false,
        seed: 2,
    })
    .unwrap();
    let mut ck = Checkpoint::new();
    checkpoint::put_extractor(&mut ck, &enc);
    let back = checkpoint::get_extractor(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.fingerprint(), enc.fingerprint());
    assert_eq!(back.tap_widths(), enc.tap_widths());

    let stats = precompute_stats(&toy_images(10), &back, back.num_taps(), 4).unwrap();
    let mut ck = Checkpoint::new();
    checkpoint::put_stats(&mut ck, &stats);
    let bytes = ck.to_bytes();
    let loaded = checkpoint::get_stats(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(loaded, stats);
}

#[test]
fn estimator_round_trip() {
    let first = MomentDelta {
        mean: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5]],
        var: Some(vec![vec![0.1, 0.2, 0.3], vec![0.0, 1.0]]),
    };
    let mut est = MovingAverage::Ama(AmaState::new(0.1, &first, VInit::FirstDelta).unwrap());
    est.update(&first).unwrap();
    let mut ck = Checkpoint::new();
    checkpoint::put_estimator(&mut ck, &est);
    let back = checkpoint::get_estimator(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap().unwrap();
    assert_eq!(back, est);
}

#[test]
fn truncated_and_corrupt_checkpoints_are_rejected() {
    let mut ck = Checkpoint::new();
    ck.push_vec(Tag::Stat, "x", &[1.0, 2.0]);
    let bytes = ck.to_bytes();
    for cut in 1..bytes.len() {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn generator_checkpoint_reproduces_samples() {
    let g = build_generator(&small_generator()).unwrap();
    let mut ck = Checkpoint::new();
    checkpoint::put_generator(&mut ck, &g);
    let back = checkpoint::get_generator(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
    let a = gfmn_core::trainer::sample(&g, 5, 11).unwrap();
    let b = gfmn_core::trainer::sample(&back, 5, 11).unwrap();
    assert_eq!(a, b);
}

#[test]
fn idx_and_native_loaders_agree() {
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 17 % 256) as u8).collect();
    let idx = encode_idx_images(&pixels, 3, 4, 5);
    let from_idx = decode_idx_images(&idx).unwrap();
    assert_eq!(from_idx.shape(), &[3, 1, 4, 5]);
    for (x, p) in from_idx.data().iter().zip(&pixels) {
        assert_eq!(*x, *p as f32 / 127.5 - 1.0);
    }
    let native = decode_tnsr(&encode_tnsr(&from_idx)).unwrap();
    assert_eq!(native, from_idx);

    let dir = tempfile::tempdir().unwrap();
    let idx_path = dir.path().join("images-idx3-ubyte");
    std::fs::write(&idx_path, &idx).unwrap();
    let tnsr_path = dir.path().join("images.tnsr");
    save_tnsr(&tnsr_path, &from_idx).unwrap();
    assert_eq!(load_dataset(&idx_path).unwrap(), load_dataset(&tnsr_path).unwrap());
}

#[test]
fn out_of_range_tensor_file_is_rejected() {
    let t = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.5]).unwrap();
    assert!(decode_tnsr(&encode_tnsr(&t)).is_err());
}

#[test]
fn pnm_read_back_matches_quantized_samples() {
    let rgb = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i % 9) as f32 / 4.0) - 1.0);
    let gray = Tensor::from_fn(&[1, 1, 5, 3], |i| ((i % 7) as f32 / 3.0) - 1.0);
    for batch in [rgb, gray] {
        let dir = tempfile::tempdir().unwrap();
        let files = write_images(&batch, dir.path()).unwrap();
        let [_, c, h, w] = [batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]];
        let plane = h * w;
        for (i, f) in files.iter().filter(|f| f.file_name().unwrap().to_string_lossy().starts_with("sample_")).enumerate() {
            let pnm = decode_pnm(&std::fs::read(f).unwrap()).unwrap();
            assert_eq!((pnm.channels, pnm.height, pnm.width), (c, h, w));
            let img = &batch.data()[i * c * plane..(i + 1) * c * plane];
            for p in 0..plane {
                for ch in 0..c {
                    assert_eq!(pnm.pixels[p * c + ch], quantize(img[ch * plane + p]));
                }
            }
        }
    }
}

#[test]
fn pnm_encode_decode() {
    let chw: Vec<f32> = (0..12).map(|i| i as f32 / 6.0 - 1.0).collect();
    let bytes = encode_pnm(3, 2, 2, &chw).unwrap();
    assert!(bytes.starts_with(b"P6\n"));
    let p = decode_pnm(&bytes).unwrap();
    assert_eq!(p.pixels.len(), 12);
    assert_eq!(p.pixels[0], quantize(chw[0]));
    assert_eq!(p.pixels[1], quantize(chw[4]));
}

fn path_strategy() -> impl Strategy<Value = String> {
    "[a-z0-9_/.]{1,12}"
}

prop_compose! {
    fn run_config()(
        kind in prop::sample::select(vec![GeneratorKind::Dcgan, GeneratorKind::Resnet, GeneratorKind::Linear]),
        n_z in 1usize..256,
        size in prop::sample::select(vec![8usize, 16, 28, 32]),
        channels in prop::sample::select(vec![1usize, 3]),
        div in prop::sample::select(vec![1usize, 2, 4, 8]),
        bn in any::<bool>(),
        seeds in any::<(u64, u64, u64, u64)>(),
        batch in 2usize..512,
        lr in 1e-6f32..1.0,
        rate in 1e-6f32..1.0,
        est in prop::sample::select(vec![EstimatorKind::Ma, EstimatorKind::Ama, EstimatorKind::NaiveEq1]),
        layers in prop::option::of(1usize..6),
        mean_only in any::<bool>(),
        steps in 0u64..1_000_000,
        interval in 0u64..1000,
        eval_samples in 2usize..4096,
        flags in any::<(bool, bool, bool, bool, bool)>(),
        betas in (0.0f32..0.999, 0.0f32..0.9999),
        enc in (1usize..512, 1usize..16),
        pre in (1usize..100, 1usize..512, 1e-6f32..1.0),
        paths in (path_strategy(), path_strategy(), prop::option::of(path_strategy()), path_strategy()),
    ) -> RunConfig {
        let mut c = RunConfig::default();
        c.train.generator = GeneratorConfig {
            kind,
            latent_dim: n_z,
            image: ImageShape::square(channels, size),
            width_divisor: div,
            batch_norm: bn,
            seed: seeds.0,
        };
        c.train.batch_size = batch;
        c.train.lr_generator = lr;
        c.train.ama_rate = rate;
        c.train.estimator = est;
        c.train.layers = layers;
        c.train.mean_only = mean_only;
        c.train.steps = steps;
        c.train.seed = seeds.1;
        c.train.eval_interval = interval;
        c.train.eval_samples = eval_samples;
        c.train.eval_frechet = flags.0;
        c.train.v_init = if flags.1 { VInit::FirstDelta } else { VInit::Zero };
        c.train.update_order = if flags.2 { UpdateOrder::UpdateFirst } else { UpdateOrder::LossFirst };
        c.train.weighting = if flags.3 { LayerWeighting::Unit } else { LayerWeighting::InverseWidth };
        c.train.adam_beta1 = betas.0;
        c.train.adam_beta2 = betas.1;
        c.encoder.latent_dim = enc.0;
        c.encoder.width_divisor = enc.1;
        c.encoder.batch_norm = !bn;
        c.encoder.seed = seeds.2;
        c.pretrain.loss = if flags.4 { ReconLoss::Lap1 } else { ReconLoss::Mse };
        c.pretrain.epochs = pre.0;
        c.pretrain.batch_size = pre.1;
        c.pretrain.learning_rate = pre.2;
        c.pretrain.seed = seeds.3;
        c.io.data = paths.0;
        c.io.encoder = paths.1;
        c.io.stats = paths.2.unwrap_or_default();
        c.io.out_dir = paths.3;
        c.io.log_wall_clock = !flags.0;
        c
    }
}

proptest! {
    #[test]
    fn config_render_parse_round_trip(c in run_config()) {
        let text = c.render();
        prop_assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }
}

#[test]
fn config_rejects_duplicates_and_bad_values() {
    let err = RunConfig::parse("trainer.steps = 1\ntrainer.steps = 2\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    let err = RunConfig::parse("trainer.batch_size = many\n").unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
    assert!(RunConfig::parse("trainer.ama_rate = 0\n").is_err());
}
