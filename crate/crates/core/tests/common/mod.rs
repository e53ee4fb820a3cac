//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code)]

pub mod gradcheck;
pub mod targets;

use std::collections::HashMap;

use dfp::predictor::TrainingBatch;
use dfp::{PredictorConfig, PredictorNet};

pub fn lrelu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.2 * x
    }
}

/// `y[r, o] = b[o] + Σ_i x[r, i] w[i, o]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64], rows: usize) -> Vec<f64> {
    let out = b.len();
    let inp = w.len() / out;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = s;
        }
    }
    y
}

/// Valid-padding convolution of an HWC image with `[k, k, cin, cout]` kernels.
pub fn conv(x: &[f64], (h, w, c): (usize, usize, usize), k: &[f64], ks: usize, b: &[f64], stride: usize) -> Vec<f64> {
    let co = b.len();
    let oh = (h - ks) / stride + 1;
    let ow = (w - ks) / stride + 1;
    let mut y = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut s = b[o];
                for ky in 0..ks {
                    for kx in 0..ks {
                        for ci in 0..c {
                            let xi = ((oy * stride + ky) * w + ox * stride + kx) * c + ci;
                            let ki = ((ky * ks + kx) * c + ci) * co + o;
                            s += x[xi] * k[ki];
                        }
                    }
                }
                y[(oy * ow + ox) * co + o] = s;
            }
        }
    }
    y
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// The predictor evaluated in f64 directly from its parameter values, plus
/// the sign pattern of every pre-activation (to detect kinks).
#[derive(Clone)]
pub struct RefNet {
    pub config: PredictorConfig,
    pub params: HashMap<String, Vec<f64>>,
}

impl RefNet {
    pub fn new(net: &PredictorNet) -> Self {
        let params = net
            .parameters()
            .iter()
            .map(|(n, t)| (n.to_string(), to64(t.values())))
            .collect();
        RefNet {
            config: net.config().clone(),
            params,
        }
    }

    fn p(&self, name: &str) -> &[f64] {
        &self.params[name]
    }

    fn layer(&self, name: &str, x: &[f64], act: bool, signs: &mut Vec<bool>) -> Vec<f64> {
        let mut y = dense(x, self.p(&format!("{name}.weight")), self.p(&format!("{name}.bias")), 1);
        if act {
            signs.extend(y.iter().map(|&v| v >= 0.0));
            y.iter_mut().for_each(|v| *v = lrelu(*v));
        }
        y
    }

    /// Predictions (actions × dim f) for one row, and the kink signature.
    pub fn forward(&self, sensory: &[f64], meas: &[f64], goal: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let c = &self.config;
        let mut signs = Vec::new();
        let mut x = sensory.to_vec();
        let (mut h, mut w, mut ch) = (c.image_height, c.image_width, c.image_channels);
        for (i, spec) in c.conv.iter().enumerate() {
            let mut y = conv(
                &x,
                (h, w, ch),
                self.p(&format!("perception.conv{i}.kernel")),
                spec.kernel,
                self.p(&format!("perception.conv{i}.bias")),
                spec.stride,
            );
            signs.extend(y.iter().map(|&v| v >= 0.0));
            y.iter_mut().for_each(|v| *v = lrelu(*v));
            h = (h - spec.kernel) / spec.stride + 1;
            w = (w - spec.kernel) / spec.stride + 1;
            ch = spec.channels;
            x = y;
        }
        let mut joint = self.layer("perception.dense", &x, true, &mut signs);
        if !c.disable_input_measurements {
            let mut m = meas.to_vec();
            for i in 0..c.measurement_widths.len() {
                m = self.layer(&format!("measurement.{i}"), &m, true, &mut signs);
            }
            joint.extend(m);
        }
        let mut g = goal.to_vec();
        for i in 0..c.goal_widths.len() {
            g = self.layer(&format!("goal.{i}"), &g, true, &mut signs);
        }
        joint.extend(g);

        let dim_f = c.target_dim();
        let n = c.actions;
        let ah = self.layer("action.0", &joint, true, &mut signs);
        let mut p = self.layer("action.1", &ah, false, &mut signs);
        if !c.disable_split {
            let eh = self.layer("expectation.0", &joint, true, &mut signs);
            let e = self.layer("expectation.1", &eh, false, &mut signs);
            if !c.disable_normalization {
                for j in 0..dim_f {
                    let mean = (0..n).map(|a| p[a * dim_f + j]).sum::<f64>() / n as f64;
                    for a in 0..n {
                        p[a * dim_f + j] -= mean;
                    }
                }
            }
            for a in 0..n {
                for j in 0..dim_f {
                    p[a * dim_f + j] += e[j];
                }
            }
        }
        (p, signs)
    }

    /// Masked MSE over the taken actions of a batch, with the kink signature
    /// of every row.
    pub fn loss(&self, batch: &TrainingBatch) -> (f64, Vec<bool>) {
        let c = &self.config;
        let (s, m, g) = (c.sensory_len(), c.input_measurements, c.target_dim());
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut signs = Vec::new();
        for r in 0..batch.len() {
            let (p, sig) = self.forward(
                &to64(&batch.sensory[r * s..(r + 1) * s]),
                &to64(&batch.measurements[r * m..(r + 1) * m]),
                &to64(&batch.goals[r * g..(r + 1) * g]),
            );
            signs.extend(sig);
            let a = batch.actions[r];
            for j in 0..g {
                if batch.masks[r * g + j] != 0.0 {
                    let d = p[a * g + j] - f64::from(batch.targets[r * g + j]);
                    sum += d * d;
                    count += 1;
                }
            }
        }
        (if count == 0 { 0.0 } else { sum / count as f64 }, signs)
    }

    /// Copy with `params[name] += h · dir`.
    pub fn nudged(&self, name: &str, dir: &[f64], h: f64) -> RefNet {
        let mut out = self.clone();
        for (v, d) in out.params.get_mut(name).unwrap().iter_mut().zip(dir) {
            *v += h * d;
        }
        out
    }
}

/// Relative error `|a − n| / max(|a|, |n|)`, or 0 when both are negligible.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
