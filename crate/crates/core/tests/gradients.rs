use gfmn_core::ama::surrogate_loss_node;
use gfmn_core::gradcheck::{grad_check, GradCheckOptions, GradReport};
use gfmn_core::moments::{batch_moment_nodes, LayerMoments, MomentStats};
use gfmn_core::nets::{FeatureExtractor, LayerSpec};
use gfmn_core::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: u64 = 100;
const TOLERANCE: f64 = 1e-3;
const EPSILON: f64 = 1e-4;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: EPSILON,
        seed,
        ..GradCheckOptions::default()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Contracts `out` with a random tensor so every output element matters.
fn check(seed: u64, build: impl Fn(&mut Graph, &mut ChaCha8Rng) -> NodeId) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let out = build(&mut g, &mut rng);
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(rand_t(&mut rng, &shape));
    let loss = g.dot(out, r).unwrap();
    grad_check(&g, loss, &opts(seed)).unwrap()
}

fn sweep(name: &str, build: impl Fn(&mut Graph, &mut ChaCha8Rng) -> NodeId) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..POINTS {
        let report = check(seed, &build);
        worst = worst.max(report.max_rel_error());
        checked += report.checked();
        assert!(
            report.passes(TOLERANCE),
            "{name} seed {seed}: {:?}",
            report.params.iter().map(|p| (&p.name, p.max_rel_error, p.worst)).collect::<Vec<_>>()
        );
    }
    assert!(checked > 0, "{name}: nothing checked");
    eprintln!("{name}: {checked} elements, max rel error {worst:.2e}");
}

fn param(g: &mut Graph, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> NodeId {
    let t = rand_t(rng, shape);
    g.param(name, t, true)
}

#[test]
fn matmul() {
    sweep("matmul", |g, r| {
        let a = param(g, r, "a", &[3, 4]);
        let b = param(g, r, "b", &[4, 2]);
        g.matmul(a, b).unwrap()
    });
}

#[test]
fn elementwise_binary() {
    sweep("add", |g, r| {
        let a = param(g, r, "a", &[2, 5]);
        let b = param(g, r, "b", &[2, 5]);
        g.add(a, b).unwrap()
    });
    sweep("sub", |g, r| {
        let a = param(g, r, "a", &[2, 5]);
        let b = param(g, r, "b", &[2, 5]);
        g.sub(a, b).unwrap()
    });
    sweep("mul", |g, r| {
        let a = param(g, r, "a", &[2, 5]);
        let b = param(g, r, "b", &[2, 5]);
        g.mul(a, b).unwrap()
    });
}

#[test]
fn elementwise_unary() {
    sweep("scale", |g, r| {
        let a = param(g, r, "a", &[7]);
        g.scale(a, -1.75).unwrap()
    });
    sweep("square", |g, r| {
        let a = param(g, r, "a", &[7]);
        g.square(a).unwrap()
    });
    sweep("relu", |g, r| {
        let a = param(g, r, "a", &[7]);
        g.relu(a).unwrap()
    });
    sweep("tanh", |g, r| {
        let a = param(g, r, "a", &[7]);
        g.tanh(a).unwrap()
    });
}

#[test]
fn channel_ops() {
    sweep("add_bias", |g, r| {
        let x = param(g, r, "x", &[2, 3, 2, 2]);
        let b = param(g, r, "b", &[3]);
        g.add_bias(x, b).unwrap()
    });
    sweep("channel_affine", |g, r| {
        let x = param(g, r, "x", &[2, 3, 2, 2]);
        let s = param(g, r, "s", &[3]);
        let b = param(g, r, "b", &[3]);
        g.channel_affine(x, s, b).unwrap()
    });
    sweep("batch_norm", |g, r| {
        let x = param(g, r, "x", &[4, 2, 2, 2]);
        g.batch_norm(x, 1e-5).unwrap()
    });
}

#[test]
fn convolutions() {
    sweep("conv2d", |g, r| {
        let x = param(g, r, "x", &[2, 2, 5, 5]);
        let w = param(g, r, "w", &[3, 2, 3, 3]);
        g.conv2d(x, w, 2, 1).unwrap()
    });
    sweep("conv_transpose2d", |g, r| {
        let x = param(g, r, "x", &[2, 3, 3, 3]);
        let w = param(g, r, "w", &[3, 2, 4, 4]);
        g.conv_transpose2d(x, w, 2, 1).unwrap()
    });
}

#[test]
fn shape_and_reduction_ops() {
    sweep("upsample2x", |g, r| {
        let x = param(g, r, "x", &[1, 2, 2, 3]);
        g.upsample2x(x).unwrap()
    });
    sweep("reshape", |g, r| {
        let x = param(g, r, "x", &[2, 6]);
        g.reshape(x, &[3, 4]).unwrap()
    });
    sweep("flatten", |g, r| {
        let x = param(g, r, "x", &[2, 2, 3]);
        g.flatten(x).unwrap()
    });
    sweep("mean_rows", |g, r| {
        let x = param(g, r, "x", &[5, 3]);
        g.mean_rows(x).unwrap()
    });
    sweep("sum", |g, r| {
        let x = param(g, r, "x", &[5, 3]);
        g.sum(x).unwrap()
    });
    sweep("mean", |g, r| {
        let x = param(g, r, "x", &[5, 3]);
        g.mean(x).unwrap()
    });
}

#[test]
fn laplacian_pyramid_loss() {
    sweep("lap1", |g, r| {
        let x = param(g, r, "x", &[2, 1, 4, 5]);
        let y = param(g, r, "y", &[2, 1, 4, 5]);
        g.lap1(x, y).unwrap()
    });
}

fn two_layer_generator(g: &mut Graph, rng: &mut ChaCha8Rng, z: NodeId) -> NodeId {
    let w1 = param(g, rng, "w1", &[3, 8]);
    let b1 = param(g, rng, "b1", &[8]);
    let w2 = param(g, rng, "w2", &[8, 6]);
    let h = g.matmul(z, w1).unwrap();
    let h = g.add_bias(h, b1).unwrap();
    let h = g.relu(h).unwrap();
    let h = g.matmul(h, w2).unwrap();
    g.tanh(h).unwrap()
}

#[test]
fn surrogate_loss_on_two_layer_generator() {
    let e = FeatureExtractor::identity(6);
    let mut worst = 0.0f64;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let z = g.input("z", rand_t(&mut rng, &[5, 3]));
        let x = two_layer_generator(&mut g, &mut rng, z);
        let taps = e.taps(&mut g, x, 1, false).unwrap();
        let nodes = batch_moment_nodes(&mut g, &taps, true).unwrap();
        let real = MomentStats {
            layers: vec![LayerMoments {
                mean: rand_t(&mut rng, &[6]).into_data(),
                var: Some(rand_t(&mut rng, &[6]).into_data().iter().map(|v| v.abs()).collect()),
            }],
            count: 1,
            fingerprint: e.fingerprint(),
        };
        let v = rand_t(&mut rng, &[6]).into_data();
        let vs = rand_t(&mut rng, &[6]).into_data();
        let loss = surrogate_loss_node(&mut g, &[&v], Some(&[&vs]), &real, &nodes, &[1.0]).unwrap();
        let report = grad_check(&g, loss, &opts(seed)).unwrap();
        assert!(report.passes(TOLERANCE), "seed {seed}: {report:?}");
        assert!(report.checked() > 0);
        worst = worst.max(report.max_rel_error());
    }
    eprintln!("surrogate: max rel error {worst:.2e}");
}

#[test]
fn batch_mean_gradient_through_generator() {
    let e = FeatureExtractor::identity(6);
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let z = g.input("z", rand_t(&mut rng, &[4, 3]));
        let x = two_layer_generator(&mut g, &mut rng, z);
        let taps = e.taps(&mut g, x, 1, false).unwrap();
        let nodes = batch_moment_nodes(&mut g, &taps, false).unwrap();
        let r = g.constant(rand_t(&mut rng, &[6]));
        let loss = g.dot(nodes[0].mean, r).unwrap();
        let report = grad_check(&g, loss, &opts(seed)).unwrap();
        assert!(report.passes(TOLERANCE), "seed {seed}: {report:?}");
    }
}

#[test]
fn conv_encoder_layers() {
    let layers: Vec<LayerSpec> = "conv:1:2:4:2:1,bn:2,relu,conv:2:3:2:1:0,relu"
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(layers.len(), 5);
    sweep("conv stack", |g, r| {
        let x = param(g, r, "x", &[3, 1, 4, 4]);
        let w1 = param(g, r, "w1", &[2, 1, 4, 4]);
        let w2 = param(g, r, "w2", &[3, 2, 2, 2]);
        let h = g.conv2d(x, w1, 2, 1).unwrap();
        let h = g.batch_norm(h, 1e-5).unwrap();
        let h = g.relu(h).unwrap();
        let h = g.conv2d(h, w2, 1, 0).unwrap();
        g.relu(h).unwrap()
    });
}
