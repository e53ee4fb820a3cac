//! Finite-difference gradient checks shared by the gradient tests and the
//! acceptance run. Each check returns the largest error it saw.

use dfp::numerics::{
    conv2d_backward, conv2d_layer, dense_backward, dense_layer, leaky_relu, leaky_relu_backward,
    masked_mse_backward, masked_mse_loss, Tensor,
};
use dfp::predictor::{ConvSpec, TrainingBatch};
use dfp::{Execution, PredictorConfig, PredictorNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{conv, dense, lrelu, rel_err, to64, RefNet};

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// A small predictor: 0 full, 1 no normalization, 2 no split, 3 no
/// measurement input.
pub fn small_config(variant: usize) -> PredictorConfig {
    PredictorConfig {
        image_height: 9,
        image_width: 9,
        image_channels: 2,
        input_measurements: 3,
        predicted_measurements: 2,
        offsets: 3,
        actions: 4,
        conv: vec![
            ConvSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            },
            ConvSpec {
                channels: 5,
                kernel: 2,
                stride: 1,
            },
        ],
        perception_width: 12,
        measurement_widths: vec![8, 6],
        goal_widths: vec![7, 5],
        expectation_hidden: 10,
        action_hidden: 9,
        disable_normalization: variant == 1,
        disable_split: variant == 2,
        disable_input_measurements: variant == 3,
    }
}

pub fn random_batch(cfg: &PredictorConfig, rows: usize, rng: &mut ChaCha8Rng) -> TrainingBatch {
    let g = cfg.target_dim();
    TrainingBatch {
        sensory: uniform(rng, rows * cfg.sensory_len(), 0.0, 1.0),
        measurements: uniform(rng, rows * cfg.input_measurements, -1.0, 1.0),
        goals: uniform(rng, rows * g, -1.0, 1.0),
        actions: (0..rows).map(|_| rng.random_range(0..cfg.actions)).collect(),
        targets: uniform(rng, rows * g, -2.0, 2.0),
        masks: (0..rows * g)
            .map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Central difference of the reference loss along `dirs` (one direction per
/// named tensor), shrinking the step until no activation changes sign inside
/// the interval. `None` if the point sits on a kink at every step size tried.
fn directional_difference(net: &RefNet, batch: &TrainingBatch, dirs: &[(String, Vec<f64>)]) -> Option<f64> {
    let (_, base) = net.loss(batch);
    let mut h = 1e-4;
    for _ in 0..6 {
        let shift = |sign: f64| {
            let mut n = net.clone();
            for (name, dir) in dirs {
                n = n.nudged(name, dir, sign * h);
            }
            n.loss(batch)
        };
        let ((plus, sp), (minus, sm)) = (shift(1.0), shift(-1.0));
        if sp == base && sm == base {
            return Some((plus - minus) / (2.0 * h));
        }
        h /= 10.0;
    }
    None
}

fn net_error(analytic: f64, numeric: f64) -> f64 {
    if (analytic - numeric).abs() < 1e-7 {
        0.0
    } else {
        rel_err(analytic, numeric)
    }
}

#[derive(Debug, Default)]
pub struct NetCheck {
    /// Relative error of the loss value against the reference.
    pub loss_err: f64,
    /// Largest relative error over all directional derivatives.
    pub max_err: f64,
    pub checked: usize,
    /// Directions skipped because every step size crossed a kink.
    pub kinks: usize,
}

impl NetCheck {
    pub fn merge(&mut self, other: NetCheck) {
        self.loss_err = self.loss_err.max(other.loss_err);
        self.max_err = self.max_err.max(other.max_err);
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Per-tensor and whole-network directional derivatives of one random net.
pub fn check_net(variant: usize, seed: u64) -> NetCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_config(variant);
    let mut net = PredictorNet::build(cfg.clone(), &mut rng).unwrap();
    // Non-zero biases so every bias gradient path is exercised.
    for id in net.parameters().ids().collect::<Vec<_>>() {
        for v in net.parameters_mut().get_mut(id).values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let batch = random_batch(&cfg, 5, &mut rng);
    let (loss, grads) = net.loss_and_gradients(&batch, Execution::Sequential).unwrap();
    let reference = RefNet::new(&net);
    let mut out = NetCheck {
        loss_err: rel_err(f64::from(loss), reference.loss(&batch).0),
        ..NetCheck::default()
    };

    let mut full_analytic = 0.0;
    let mut all_dirs = Vec::new();
    for id in net.parameters().ids() {
        let name = net.parameters().name(id).to_string();
        let g = to64(grads.get(id));
        let dir = unit_direction(&mut rng, g.len());
        let analytic: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        full_analytic += analytic;
        let dirs = vec![(name, dir)];
        match directional_difference(&reference, &batch, &dirs) {
            Some(numeric) => {
                out.max_err = out.max_err.max(net_error(analytic, numeric));
                out.checked += 1;
            }
            None => out.kinks += 1,
        }
        all_dirs.extend(dirs);
    }
    match directional_difference(&reference, &batch, &all_dirs) {
        Some(numeric) => {
            out.max_err = out.max_err.max(net_error(full_analytic, numeric));
            out.checked += 1;
        }
        None => out.kinks += 1,
    }
    out
}

fn tensor(shape: &[usize], values: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Derivative of `Σ c·f(x)` with respect to `x[i]` by central differences.
fn probe(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], c: &[f64], i: usize) -> f64 {
    let h = 1e-6;
    let mut a = x.to_vec();
    let mut b = x.to_vec();
    a[i] += h;
    b[i] -= h;
    let dot = |v: Vec<f64>| v.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
    (dot(f(&a)) - dot(f(&b))) / (2.0 * h)
}

/// Relative error with a floor of 1e-2 on the scale.
fn layer_error(analytic: f32, numeric: f64) -> f64 {
    let a = f64::from(analytic);
    (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2)
}

/// Worst of the forward mismatch and the gradient error of a dense layer.
pub fn dense_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, i, o) = (3, 5, 4);
    let mut x = tensor(&[rows, i], uniform(&mut rng, rows * i, -1.0, 1.0));
    let mut w = tensor(&[i, o], uniform(&mut rng, i * o, -1.0, 1.0));
    let mut b = tensor(&[o], uniform(&mut rng, o, -1.0, 1.0));
    let c = uniform(&mut rng, rows * o, -1.0, 1.0);
    let y = dense_layer(&x, &w, &b).unwrap();
    let expected = dense(&to64(x.values()), &to64(w.values()), &to64(b.values()), rows);
    let mut worst = y
        .values()
        .iter()
        .zip(&expected)
        .map(|(a, e)| layer_error(*a, *e))
        .fold(0.0, f64::max);
    dense_backward(&mut x, &mut w, &mut b, &c).unwrap();
    let (x64, w64, b64, c64) = (to64(x.values()), to64(w.values()), to64(b.values()), to64(&c));
    for k in 0..x64.len() {
        let n = probe(&|v| dense(v, &w64, &b64, rows), &x64, &c64, k);
        worst = worst.max(layer_error(x.grad().unwrap()[k], n));
    }
    for k in 0..w64.len() {
        let n = probe(&|v| dense(&x64, v, &b64, rows), &w64, &c64, k);
        worst = worst.max(layer_error(w.grad().unwrap()[k], n));
    }
    for k in 0..b64.len() {
        let n = probe(&|v| dense(&x64, &w64, v, rows), &b64, &c64, k);
        worst = worst.max(layer_error(b.grad().unwrap()[k], n));
    }
    worst
}

/// Same for a valid convolution; odd seeds use stride 2.
pub fn conv_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, ci, co) = (7, 6, 2, 3);
    let (ks, stride) = (3, 1 + (seed as usize % 2));
    let mut x = tensor(&[h, w, ci], uniform(&mut rng, h * w * ci, -1.0, 1.0));
    let mut k = tensor(&[ks, ks, ci, co], uniform(&mut rng, ks * ks * ci * co, -1.0, 1.0));
    let mut b = tensor(&[co], uniform(&mut rng, co, -1.0, 1.0));
    let y = conv2d_layer(&x, &k, &b, stride).unwrap();
    let (x64, k64, b64) = (to64(x.values()), to64(k.values()), to64(b.values()));
    let expected = conv(&x64, (h, w, ci), &k64, ks, &b64, stride);
    assert_eq!(y.len(), expected.len());
    let mut worst = y
        .values()
        .iter()
        .zip(&expected)
        .map(|(a, e)| layer_error(*a, *e))
        .fold(0.0, f64::max);
    let c = uniform(&mut rng, y.len(), -1.0, 1.0);
    let c64 = to64(&c);
    conv2d_backward(&mut x, &mut k, &mut b, stride, &c).unwrap();
    for i in 0..x64.len() {
        let n = probe(&|v| conv(v, (h, w, ci), &k64, ks, &b64, stride), &x64, &c64, i);
        worst = worst.max(layer_error(x.grad().unwrap()[i], n));
    }
    for i in 0..k64.len() {
        let n = probe(&|v| conv(&x64, (h, w, ci), v, ks, &b64, stride), &k64, &c64, i);
        worst = worst.max(layer_error(k.grad().unwrap()[i], n));
    }
    for i in 0..b64.len() {
        let n = probe(&|v| conv(&x64, (h, w, ci), &k64, ks, v, stride), &b64, &c64, i);
        worst = worst.max(layer_error(b.grad().unwrap()[i], n));
    }
    worst
}

pub fn leaky_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = tensor(&[64], uniform(&mut rng, 64, -2.0, 2.0));
    let y = leaky_relu(&x);
    let mut worst = y
        .values()
        .iter()
        .zip(x.values())
        .map(|(a, b)| layer_error(*a, lrelu(f64::from(*b))))
        .fold(0.0, f64::max);
    let c = uniform(&mut rng, 64, -1.0, 1.0);
    leaky_relu_backward(&mut x, &c).unwrap();
    let (x64, c64) = (to64(x.values()), to64(&c));
    let f = |v: &[f64]| v.iter().map(|&t| lrelu(t)).collect::<Vec<_>>();
    for i in 0..64 {
        worst = worst.max(layer_error(x.grad().unwrap()[i], probe(&f, &x64, &c64, i)));
    }
    worst
}

/// Masked squared error; masked-out entries must get exactly zero gradient.
pub fn mse_check(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let mut p = tensor(&[4, 6], uniform(&mut rng, n, -2.0, 2.0));
    let t = tensor(&[4, 6], uniform(&mut rng, n, -2.0, 2.0));
    let mask: Vec<f32> = (0..n)
        .map(|i| if i % 3 == 0 || rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    let m = tensor(&[4, 6], mask.clone());
    let (t64, m64) = (to64(t.values()), to64(&mask));
    let count = m64.iter().filter(|&&v| v != 0.0).count() as f64;
    let loss = |v: &[f64]| {
        vec![
            v.iter()
                .zip(&t64)
                .zip(&m64)
                .filter(|(_, &m)| m != 0.0)
                .map(|((p, t), _)| (p - t) * (p - t))
                .sum::<f64>()
                / count,
        ]
    };
    let p64 = to64(p.values());
    let mut worst = layer_error(masked_mse_loss(&p, &t, &m).unwrap(), loss(&p64)[0]);
    masked_mse_backward(&mut p, &t, &m).unwrap();
    for (i, &w) in mask.iter().enumerate().take(n) {
        let g = p.grad().unwrap()[i];
        worst = worst.max(layer_error(g, probe(&loss, &p64, &[1.0], i)));
        if w == 0.0 && g != 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst
}
