//! Test-side oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::PathBuf;

use advkit::models::Model;
use advkit::numerics::{loss, Layer, LabeledBatch, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Denominator floor for relative errors: coordinates whose gradient is
/// below this in magnitude are held to an absolute error of `floor · tol`.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates re-checked with a smaller step because the stencil
    /// crossed a ReLU or max-pool switch.
    pub refined: usize,
    /// Coordinates left unchecked because even the smaller stencil crossed
    /// a switch.
    pub skipped: usize,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.refined += o.refined;
        self.skipped += o.skipped;
    }
}

/// Central difference of `f` along one coordinate, retried at `h / 100`
/// when `pattern` changes across the stencil.
fn central(
    h: f64,
    mut f: impl FnMut(f64) -> f64,
    mut pattern: impl FnMut(f64) -> Vec<usize>,
    stats: &mut FdStats,
) -> Option<f64> {
    let base = pattern(0.0);
    for (i, step) in [h, h / 100.0].into_iter().enumerate() {
        if pattern(step) == base && pattern(-step) == base {
            if i > 0 {
                stats.refined += 1;
            }
            return Some((f(step) - f(-step)) / (2.0 * step));
        }
    }
    stats.skipped += 1;
    None
}

/// Compares `∇ₓL` against central differences on every input coordinate.
pub fn fd_check_input(model: &Model, x: &Tensor, y: &[usize], analytic: &Tensor, h: f64) -> FdStats {
    let mut stats = FdStats::default();
    for i in 0..x.len() {
        let shifted = |d: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += d;
            xp
        };
        let numeric = central(
            h,
            |d| loss(model, &shifted(d), y).unwrap(),
            |d| model.network().switching_pattern(&shifted(d)).unwrap(),
            &mut stats,
        );
        if let Some(n) = numeric {
            stats.checked += 1;
            stats.max_rel = stats.max_rel.max(rel_err(analytic.data()[i], n));
        }
    }
    stats
}

/// Compares `∇θL` against central differences on every parameter.
pub fn fd_check_params(model: &Model, x: &Tensor, y: &[usize], analytic: &[Tensor], h: f64) -> FdStats {
    let mut stats = FdStats::default();
    for (t, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let shifted = |d: f64| {
                let mut m = model.clone();
                m.params_mut()[t].data_mut()[j] += d;
                m
            };
            let numeric = central(
                h,
                |d| loss(&shifted(d), x, y).unwrap(),
                |d| shifted(d).network().switching_pattern(x).unwrap(),
                &mut stats,
            );
            if let Some(n) = numeric {
                stats.checked += 1;
                stats.max_rel = stats.max_rel.max(rel_err(g.data()[j], n));
            }
        }
    }
    stats
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn linear(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Layer {
    let s = 1.5 / (inp as f64).sqrt();
    Layer::Linear {
        weight: uniform(rng, &[out, inp], s),
        bias: uniform(rng, &[out], 0.2),
    }
}

fn conv(rng: &mut ChaCha8Rng, inp: usize, out: usize, k: usize, stride: usize, padding: usize) -> Layer {
    let s = 1.5 / ((inp * k * k) as f64).sqrt();
    Layer::Conv2d {
        weight: uniform(rng, &[out, inp, k, k], s),
        bias: uniform(rng, &[out], 0.2),
        stride,
        padding,
    }
}

/// A randomly shaped small network (≤ 5k parameters, ≤ 64 inputs) drawn
/// from one of five families: linear, MLP, conv + pool, residual with
/// identity shortcut, residual with strided projection.
pub fn random_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..=5);
    let (shape, layers) = match seed % 5 {
        0 => {
            let d = rng.gen_range(2..=8);
            ([1, d, d], vec![Layer::Flatten, linear(&mut rng, d * d, k)])
        }
        1 => {
            let (c, h) = (rng.gen_range(1..=2), rng.gen_range(2..=5));
            let hidden = rng.gen_range(4..=24);
            let d = c * h * h;
            (
                [c, h, h],
                vec![
                    Layer::Flatten,
                    linear(&mut rng, d, hidden),
                    Layer::Relu,
                    linear(&mut rng, hidden, hidden),
                    Layer::Relu,
                    linear(&mut rng, hidden, k),
                ],
            )
        }
        2 => {
            let c = rng.gen_range(1..=2);
            let f = rng.gen_range(2..=6);
            let h = if c == 1 { 6 } else { 4 };
            let pooled = f * (h / 2) * (h / 2);
            (
                [c, h, h],
                vec![
                    conv(&mut rng, c, f, 3, 1, 1),
                    Layer::Relu,
                    Layer::MaxPool2d { size: 2 },
                    Layer::Flatten,
                    linear(&mut rng, pooled, k),
                ],
            )
        }
        3 => {
            let f = rng.gen_range(2..=5);
            (
                [1, 6, 6],
                vec![
                    conv(&mut rng, 1, f, 3, 1, 1),
                    Layer::Relu,
                    Layer::Residual {
                        body: vec![conv(&mut rng, f, f, 3, 1, 1), Layer::Relu, conv(&mut rng, f, f, 3, 1, 1)],
                        shortcut: None,
                    },
                    Layer::Relu,
                    Layer::GlobalAvgPool,
                    linear(&mut rng, f, k),
                ],
            )
        }
        _ => {
            let (f, g) = (rng.gen_range(2..=4), rng.gen_range(3..=6));
            (
                [2, 5, 5],
                vec![
                    conv(&mut rng, 2, f, 3, 1, 1),
                    Layer::Relu,
                    Layer::Residual {
                        body: vec![conv(&mut rng, f, g, 3, 2, 1), Layer::Relu, conv(&mut rng, g, g, 3, 1, 1)],
                        shortcut: Some(Box::new(conv(&mut rng, f, g, 1, 2, 0))),
                    },
                    Layer::Relu,
                    Layer::Flatten,
                    linear(&mut rng, g * 9, k),
                ],
            )
        }
    };
    let model = Model::from_network(shape, k, Network::new(layers)).unwrap();
    assert!(model.param_count() <= 5000);
    assert!(shape.iter().product::<usize>() <= 64);
    model
}

/// Random inputs in [0, 1] and labels for `model`.
pub fn random_batch(model: &Model, n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let [c, h, w] = model.input_shape();
    let x = Tensor::from_fn(&[n, c, h, w], |_| rng.gen_range(0.0..1.0));
    let y = (0..n).map(|_| rng.gen_range(0..model.num_classes())).collect();
    (x, y)
}

/// Two-class logistic model on a 1×1×1 input: logits `(0, w·x + b)`.
pub fn logistic(w: f64, b: f64) -> Model {
    let layer = Layer::Linear {
        weight: Tensor::new(vec![2, 1], vec![0.0, w]).unwrap(),
        bias: Tensor::new(vec![2], vec![0.0, b]).unwrap(),
    };
    Model::from_network([1, 1, 1], 2, Network::new(vec![Layer::Flatten, layer])).unwrap()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/mnist-subset")
}

pub fn mnist() -> (LabeledBatch, LabeledBatch) {
    let d = mnist_dir();
    let train = advkit::harness::datasets::load_idx(
        &d.join("train-images-idx3-ubyte"),
        &d.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    let test =
        advkit::harness::datasets::load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"))
            .unwrap();
    (train, test)
}

/// Small synthetic experiment that runs end to end in seconds.
pub fn synthetic_config(out_dir: &std::path::Path) -> advkit::harness::ExperimentConfig {
    let text = format!(
        r#"
seed = 99
out_dir = "{}"
max_count = 40

[dataset]
source = "synthetic"
classes = 4
train_size = 160
test_size = 60
height = 8
width = 8
noise = 0.2

[model]
architecture = "convnet"

[train]
epochs = 4
batch_size = 16
learning_rate = 0.1

[attack]
epsilon = 0.1
step_size = 0.02
steps = 10
random_start = true

[defense]
mode = "pat"
pat_style = "per_batch"
epochs = 2

[defense.attack]
epsilon = 0.1
step_size = 0.05
steps = 3
random_start = true
"#,
        out_dir.display()
    );
    advkit::harness::ExperimentConfig::from_toml_str(&text).unwrap()
}
