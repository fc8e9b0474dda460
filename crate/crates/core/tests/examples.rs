use gfmn_core::ama::{surrogate_loss_node, AdamMoments, ama_step};
use gfmn_core::metrics::{frechet_distance, lap1_loss, offline_optimum, run_regret, Estimator, GaussianStats};
use gfmn_core::moments::{
    batch_moment_nodes, batch_stats, delta, moment_loss, moment_loss_node, precompute_stats, LayerMoments, MomentStats,
};
use gfmn_core::nets::{
    build_encoder, build_generator, generator_layers, pretrain_autoencoder, EncoderConfig, FeatureExtractor,
    GeneratorConfig, GeneratorKind, ImageShape, LayerSpec, Params, PretrainConfig, ReconLoss,
};
use gfmn_core::trainer::{sample_latent, EstimatorKind, Silent, TrainConfig, Trainer};
use gfmn_core::{Graph, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(layers: Vec<(Vec<f32>, Vec<f32>)>) -> MomentStats {
    MomentStats {
        layers: layers.into_iter().map(|(mean, var)| LayerMoments { mean, var: Some(var) }).collect(),
        count: 1,
        fingerprint: 0,
    }
}

#[test]
fn two_point_dataset_moments() {
    let data = Tensor::new(&[2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
    let e = FeatureExtractor::identity(2);
    let s = precompute_stats(&data, &e, 1, 1).unwrap();
    assert_eq!(s.layers[0].mean, vec![1.0, 1.0]);
    assert_eq!(s.layers[0].var, Some(vec![1.0, 1.0]));
    assert_eq!(s.count, 2);

    let one = precompute_stats(&Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap(), &e, 1, 8).unwrap();
    assert_eq!(one.layers[0].var, Some(vec![0.0, 0.0]));
}

#[test]
fn batch_equal_to_dataset_has_zero_delta() {
    let data = Tensor::from_fn(&[6, 3], |i| (i as f32 * 0.37).sin());
    let e = FeatureExtractor::identity(3);
    let real = precompute_stats(&data, &e, 1, 4).unwrap();
    let fake = batch_stats(&data, &e, 1, true).unwrap();
    let d = delta(&real, &fake).unwrap();
    assert!(d.mean[0].iter().chain(&d.var.unwrap()[0]).all(|v| v.abs() < 1e-6));
    let same = batch_stats(&Tensor::full(&[4, 3], 0.25f32), &e, 1, true).unwrap();
    assert_eq!(same.layers[0].var, Some(vec![0.0; 3]));
}

#[test]
fn full_loss_arithmetic() {
    let real = stats(vec![(vec![3.0], vec![0.0]), (vec![0.0], vec![0.5])]);
    let fake = stats(vec![(vec![0.0], vec![4.0]), (vec![0.0], vec![0.0])]);
    assert_eq!(moment_loss(&real, &fake).unwrap().total(), 25.25);

    let a = stats(vec![(vec![1.0], vec![2.0])]);
    let b = stats(vec![(vec![0.0], vec![2.0])]);
    assert_eq!(moment_loss(&a, &b).unwrap().total(), 1.0);
}

#[test]
fn delta_is_elementwise_difference() {
    let real = stats(vec![(vec![1.0, 1.0], vec![0.0, 0.0])]);
    let fake = stats(vec![(vec![0.5, 2.0], vec![0.0, 0.0])]);
    assert_eq!(delta(&real, &fake).unwrap().mean, vec![vec![0.5, -1.0]]);
}

#[test]
fn hand_built_conv_encoder() {
    // 3x3 kernel with centre 1 and right neighbour -0.5, bias 0.1, padding 1.
    let image: Vec<f32> = (0..16).map(|i| i as f32 / 8.0 - 1.0).collect();
    let mut kernel = vec![0.0f32; 9];
    kernel[4] = 1.0;
    kernel[5] = -0.5;
    let mut params = Params::new();
    params.insert("enc.00.weight".into(), Tensor::new(&[1, 1, 3, 3], kernel).unwrap());
    params.insert("enc.00.bias".into(), Tensor::from_vec(vec![0.1]));
    let layers: Vec<LayerSpec> = ["conv:1:1:3:1:1", "relu"].iter().map(|s| s.parse().unwrap()).collect();
    let e = FeatureExtractor::from_layers(ImageShape::square(1, 4), layers, params, true).unwrap();
    let feats = e.extract(&Tensor::new(&[1, 1, 4, 4], image.clone()).unwrap(), 1).unwrap();
    assert_eq!(feats.len(), 1);
    let mut expect = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            let right = if c + 1 < 4 { image[r * 4 + c + 1] } else { 0.0 };
            expect.push((image[r * 4 + c] - 0.5 * right + 0.1).max(0.0));
        }
    }
    for (a, b) in feats[0].data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(feats[0].data().iter().all(|v| *v >= 0.0));
}

#[test]
fn tiny_autoencoder_overfits_four_points() {
    let data = Tensor::from_fn(&[4, 1, 8, 8], |i| {
        let (n, p) = (i / 64, i % 64);
        if (p / 8 < 4) ^ (n % 2 == 0) ^ (p % 8 < 4 && n >= 2) { 0.6 } else { -0.6 }
    });
    let (enc, dec) = build_encoder(&EncoderConfig {
        image: ImageShape::square(1, 8),
        latent_dim: 8,
        width_divisor: 8,
        batch_norm: false,
        seed: 5,
    })
    .unwrap();
    let out = pretrain_autoencoder(enc, dec, &data, &PretrainConfig {
        loss: ReconLoss::Mse,
        epochs: 400,
        batch_size: 4,
        learning_rate: 2e-3,
        seed: 0,
    })
    .unwrap();
    assert!(out.final_loss < 1e-2, "final mse {}", out.final_loss);
    assert!(out.extractor.is_frozen());
}

fn linear_setup(seed: u64) -> (Graph, gfmn_core::NodeId, Tensor, MomentStats, FeatureExtractor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = build_generator(&GeneratorConfig {
        kind: GeneratorKind::Linear,
        latent_dim: 2,
        image: ImageShape::new(3, 1, 1),
        width_divisor: 1,
        batch_norm: false,
        seed,
    })
    .unwrap();
    let e = FeatureExtractor::identity(3);
    let data = Tensor::from_fn(&[16, 3], |_| rng.random_range(-1.0f32..1.0));
    let real = precompute_stats(&data, &e, 1, 16).unwrap();
    let mut g = Graph::new();
    let z = g.input("z", sample_latent(&mut rng, 16, 2));
    let x = gen.forward(&mut g, z, true).unwrap();
    (g, x, data, real, e)
}

#[test]
fn surrogate_with_v_equal_delta_is_squared_norm() {
    let (mut g, x, _, real, e) = linear_setup(1);
    let taps = e.taps(&mut g, x, 1, false).unwrap();
    let nodes = batch_moment_nodes(&mut g, &taps, true).unwrap();
    let mut fake = stats(vec![(
        g.value(nodes[0].mean).data().to_vec(),
        g.value(nodes[0].var.unwrap()).data().to_vec(),
    )]);
    fake.fingerprint = real.fingerprint;
    let d = delta(&real, &fake).unwrap();
    let dv = d.var.as_ref().unwrap();
    let loss = surrogate_loss_node(&mut g, &[&d.mean[0]], Some(&[&dv[0]]), &real, &nodes, &[1.0]).unwrap();
    let expect: f64 = d.mean[0].iter().chain(&dv[0]).map(|v| (*v as f64).powi(2)).sum();
    assert!((g.value(loss).item() as f64 - expect).abs() < 1e-6 * expect.max(1.0));

    let zeros = vec![0.0f32; 3];
    let zero_loss = surrogate_loss_node(&mut g, &[&zeros], Some(&[&zeros]), &real, &nodes, &[1.0]).unwrap();
    assert_eq!(g.value(zero_loss).item(), 0.0);
    let grads = g.backward(zero_loss).unwrap();
    assert!(grads.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn full_batch_ma_surrogate_is_half_the_naive_gradient() {
    let (mut g, x, _, real, e) = linear_setup(2);
    let real = real.mean_only();
    let taps = e.taps(&mut g, x, 1, false).unwrap();
    let nodes = batch_moment_nodes(&mut g, &taps, false).unwrap();
    let naive = moment_loss_node(&mut g, &real, &nodes, &[1.0]).unwrap();
    let naive_grads = g.backward(naive).unwrap();

    // MA with alpha = 1 replaces v by the current difference.
    let mu: Vec<f32> = g.value(nodes[0].mean).data().to_vec();
    let v: Vec<f32> = real.layers[0].mean.iter().zip(&mu).map(|(r, m)| r - m).collect();
    let mut tracked = vec![0.0f32; 3];
    gfmn_core::ama::ma_step(&mut tracked, &v, 1.0);
    let sur = surrogate_loss_node(&mut g, &[&tracked], None, &real, &nodes, &[1.0]).unwrap();
    let sur_grads = g.backward(sur).unwrap();
    for (name, t) in naive_grads.iter() {
        for (a, b) in sur_grads.get(name).unwrap().data().iter().zip(t.data()) {
            assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn naive_loss_decreases_under_small_steps() {
    let (mut g, x, _, real, e) = linear_setup(3);
    let taps = e.taps(&mut g, x, 1, false).unwrap();
    let nodes = batch_moment_nodes(&mut g, &taps, true).unwrap();
    let loss = moment_loss_node(&mut g, &real, &nodes, &[1.0]).unwrap();
    let mut prev = g.value(loss).item();
    for step in 0..100 {
        let grads = g.backward(loss).unwrap();
        let updates: Vec<(String, Tensor)> = grads
            .iter()
            .map(|(name, gr)| {
                let id = g.leaf(name).unwrap();
                let p = g.value(id);
                let next = Tensor::from_fn(p.shape(), |i| p.data()[i] - 0.01 * gr.data()[i]);
                (name.to_string(), next)
            })
            .collect();
        let feeds: Vec<(&str, Tensor)> = updates.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
        g.forward(&feeds).unwrap();
        let now = g.value(loss).item();
        assert!(now <= prev, "step {step}: {now} > {prev}");
        prev = now;
    }
}

#[test]
fn latent_mean_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = sample_latent(&mut rng, 100_000, 4);
    for j in 0..4 {
        let m: f64 = (0..100_000).map(|i| z.data()[i * 4 + j] as f64).sum::<f64>() / 1e5;
        assert!(m.abs() < 0.02, "coordinate {j}: {m}");
    }
}

#[test]
fn frechet_cases() {
    let a = GaussianStats::new(vec![0.5, -1.0], vec![2.0, 0.3, 0.3, 1.0]).unwrap();
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    let b = GaussianStats::new(vec![1.5, 1.0], a.cov().to_vec()).unwrap();
    assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-6);
}

fn psd(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = DMatrix::from_row_slice(2, 2, &m);
    let s = &a * a.transpose() + DMatrix::identity(2, 2) * 0.05;
    s.as_slice().to_vec()
}

fn oracle_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[test]
fn frechet_matches_eigendecomposition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (ca, cb) = (psd(&mut rng), psd(&mut rng));
        let (ma, mb): (Vec<f64>, Vec<f64>) = ((0..2).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..2).map(|_| rng.random_range(-1.0..1.0)).collect());
        let a = DMatrix::from_row_slice(2, 2, &ca);
        let b = DMatrix::from_row_slice(2, 2, &cb);
        let ra = oracle_sqrt(&a);
        let cross = oracle_sqrt(&(&ra * &b * &ra));
        let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
        let oracle = mean_term + (a.trace() + b.trace() - 2.0 * cross.trace());
        let got = frechet_distance(&GaussianStats::new(ma, ca).unwrap(), &GaussianStats::new(mb, cb).unwrap()).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }
}

#[test]
fn lap1_hand_computed_4x4() {
    // Blur-and-decimate and upsample operators for length 4 with clamped borders.
    let d = DMatrix::from_row_slice(2, 4, &[11.0, 4.0, 1.0, 0.0, 1.0, 4.0, 6.0, 5.0]) / 16.0;
    let u = DMatrix::from_row_slice(4, 2, &[6.0 / 7.0, 1.0 / 7.0, 0.5, 0.5, 1.0 / 7.0, 6.0 / 7.0, 0.0, 1.0]);
    let x: Vec<f32> = vec![0.5, -0.25, 1.0, 0.0, 0.75, -1.0, 0.25, 0.5, -0.5, 0.0, 1.0, -0.75, 0.25, 0.5, -0.25, 1.0];
    let xm = DMatrix::from_row_slice(4, 4, &x.iter().map(|v| *v as f64).collect::<Vec<_>>());
    let coarse = &d * &xm * d.transpose();
    let band = &xm - &u * &coarse * u.transpose();
    let l1 = |m: &DMatrix<f64>| m.iter().map(|v| v.abs()).sum::<f64>();
    let expect = 1.0 * l1(&band) + 0.25 * l1(&coarse);
    let zero = Tensor::zeros(&[4, 4]);
    let got = lap1_loss(&Tensor::new(&[4, 4], x).unwrap(), &zero).unwrap();
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

#[test]
fn resnet_param_count_closed_form() {
    let cfg = GeneratorConfig {
        kind: GeneratorKind::Resnet,
        latent_dim: 16,
        image: ImageShape::square(3, 32),
        width_divisor: 8,
        batch_norm: true,
        seed: 0,
    };
    let layers = generator_layers(&cfg).unwrap();
    let blocks = layers.iter().filter(|l| matches!(l, LayerSpec::ResBlockUp { .. })).count();
    assert_eq!(blocks, 3);
    let mut closed = 0;
    for l in &layers {
        closed += match *l {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } | LayerSpec::ConvTranspose { in_ch, out_ch, kernel, .. } => {
                in_ch * out_ch * kernel * kernel + out_ch
            }
            LayerSpec::BatchNorm { channels } | LayerSpec::Affine { channels } => 2 * channels,
            LayerSpec::ResBlockUp { in_ch: i, out_ch: o } => 2 * i + (o * i * 9 + o) + 2 * o + (o * o * 9 + o) + (o * i + o),
            LayerSpec::Reshape { .. } | LayerSpec::Activation(_) => 0,
        };
    }
    assert_eq!(build_generator(&cfg).unwrap().param_count(), closed);
}

#[test]
fn generator_shapes() {
    let g = build_generator(&GeneratorConfig {
        kind: GeneratorKind::Dcgan,
        latent_dim: 100,
        image: ImageShape::square(3, 32),
        width_divisor: 8,
        batch_norm: true,
        seed: 0,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = g.generate(&sample_latent(&mut rng, 2, 100)).unwrap();
    assert_eq!(out.shape(), &[2, 3, 32, 32]);
    assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn ama_constant_stream_converges_monotonically() {
    let c = [0.7f32, -1.3];
    let mut v = vec![0.0f32; 2];
    let mut adam = AdamMoments::new(2);
    let mut errs = Vec::new();
    for _ in 0..1000 {
        ama_step(&mut v, &c, 0.01, &mut adam);
        errs.push(v.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max));
    }
    assert!(errs[999] < 0.05, "{}", errs[999]);
    for w in errs[..100].windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn regret_optimum_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let stream: Vec<Vec<f32>> = (0..40).map(|_| vec![rng.random_range(-1.0f32..1.0)]).collect();
    let v_star = offline_optimum(&stream).unwrap()[0];
    let cost = |v: f64| stream.iter().map(|d| (v - d[0] as f64).powi(2)).sum::<f64>();
    let best = (-2000..=2000).map(|i| i as f64 / 1000.0).min_by(|a, b| cost(*a).total_cmp(&cost(*b))).unwrap();
    assert!((best - v_star).abs() <= 1e-3);
    let r = run_regret(&stream, &[Estimator::Ma], &[0.0], 0.1).unwrap();
    assert!((r[0].optimum_cost - cost(v_star)).abs() < 1e-9);
}

#[test]
fn training_leaves_extractor_untouched() {
    let (enc, _) = build_encoder(&EncoderConfig {
        image: ImageShape::square(1, 8),
        latent_dim: 4,
        width_divisor: 32,
        batch_norm: true,
        seed: 1,
    })
    .unwrap();
    let data = Tensor::from_fn(&[16, 1, 8, 8], |i| ((i * 13 % 17) as f32 / 8.5) - 1.0);
    let e = enc.freeze(&data, 8).unwrap();
    let before = e.fingerprint();
    let real = precompute_stats(&data, &e, e.num_taps(), 8).unwrap();
    let cfg = TrainConfig {
        generator: GeneratorConfig {
            kind: GeneratorKind::Dcgan,
            latent_dim: 4,
            image: ImageShape::square(1, 8),
            width_divisor: 32,
            batch_norm: true,
            seed: 1,
        },
        batch_size: 4,
        estimator: EstimatorKind::Ama,
        steps: 5,
        eval_samples: 8,
        eval_frechet: false,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &e, &real, None).unwrap();
    t.run(&mut Silent).unwrap();
    assert_eq!(e.fingerprint(), before);
}
