mod support;

use funknn_core::model::{Architecture, FunkNN};
use funknn_core::sampler::{on_knot, ImageGrid, PatchQuery};
use funknn_core::tensor::Tensor;
use funknn_core::training::{batch_loss, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::reference::Reference;

fn small_arch() -> Architecture {
    Architecture {
        conv_width: 4,
        fc_width: 5,
        ..Architecture::new(1)
    }
}

/// FunkNN with every parameter random, including the output head and the
/// patch spacings.
fn random_model(seed: u64) -> FunkNN {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FunkNN::init(small_arch(), seed).unwrap();
    let mut params = model.param_tensors();
    let k = params.len();
    for p in params.iter_mut().take(k - 2) {
        *p = Tensor::randn(p.shape(), 0.5, &mut rng);
    }
    params[k - 2] = Tensor::scalar(rng.random_range(0.7..1.3));
    params[k - 1] = Tensor::scalar(rng.random_range(0.7..1.3));
    model.set_params(&params).unwrap();
    model
}

fn random_batch(seed: u64, images: usize, points: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low_res: Vec<ImageGrid> = (0..images)
        .map(|_| ImageGrid::new(10, 12, 1, (0..120).map(|_| rng.random::<f32>()).collect()).unwrap())
        .collect();
    let mut queries = Vec::new();
    let mut targets = Vec::new();
    while queries.len() < points {
        let image = rng.random_range(0..images);
        let coord = (rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95));
        if on_knot(coord, 10, 12) {
            continue;
        }
        queries.push(PatchQuery { image, coord });
        targets.push(rng.random::<f32>());
    }
    Batch {
        low_res,
        queries,
        targets: Tensor::new(&[points, 1], targets).unwrap(),
        d: 10,
        s: 1.0,
        target_size: 10,
    }
}

fn points(batch: &Batch) -> Vec<(usize, (f64, f64), Vec<f32>)> {
    batch
        .queries
        .iter()
        .zip(batch.targets.data())
        .map(|(q, &t)| (q.image, q.coord, vec![t]))
        .collect()
}

#[test]
fn reference_matches_network_output() {
    let model = random_model(3);
    let batch = random_batch(4, 2, 6);
    let (loss, _) = batch_loss(&model, &batch, 512, false).unwrap();
    let r = Reference::of(&model).loss(&batch.low_res, &points(&batch));
    assert!((loss - r).abs() <= 1e-5 * r.max(1.0), "{loss} vs {r}");
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..6 {
        let worst = worst_parameter_error(seed);
        eprintln!("seed {seed}: worst relative error {worst:.3e}");
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:.3e}");
    }
}

fn worst_parameter_error(seed: u64) -> f64 {
    let model = random_model(100 + seed);
    let batch = random_batch(200 + seed, 2, 4);
    let (_, grads) = batch_loss(&model, &batch, 512, true).unwrap();
    let grads = grads.unwrap();
    let pts = points(&batch);
    let mut reference = Reference::of(&model);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (t, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = reference.params[t][k];
            reference.params[t][k] = orig + eps;
            let up = reference.loss(&batch.low_res, &pts);
            reference.params[t][k] = orig - eps;
            let down = reference.loss(&batch.low_res, &pts);
            reference.params[t][k] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = g.data()[k] as f64;
            let rel = (an - fd).abs() / fd.abs().max(an.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}
