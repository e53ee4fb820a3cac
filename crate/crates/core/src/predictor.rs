//! The future-measurement predictor.
//!
//! Three input modules (a convolutional perception module over the sensory
//! grid, and fully connected measurement and goal modules) are concatenated
//! into a joint representation. Two heads read it: an expectation head that
//! predicts the action-averaged future measurement changes, and an action
//! head whose per-action outputs are re-centred to zero mean over actions
//! before being added to the expectation. Every hidden layer is followed by
//! a leaky ReLU; head outputs are linear.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::{
    adam_step, conv_output_extent, he_init, zeros_bias, AdamConfig, Gradients, ParamId,
    ParameterStore,
};
use crate::parallel::Execution;

/// Rows per gradient chunk. Fixed so that parallel and sequential runs sum
/// partial gradients in the same order.
pub const GRADIENT_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Named network size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Reduced-size network for the 15×15 grid observations.
    Desk,
    /// `Desk` with every layer from the third onwards twice as wide.
    DeskLarge,
    /// The 84×84×1 reference architecture.
    A1,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::DeskLarge => "desk-large",
            Preset::A1 => "a1",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "desk-large" => Ok(Preset::DeskLarge),
            "a1" => Ok(Preset::A1),
            other => Err(Error::Config(format!("unknown preset {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Length of the measurement vector fed to the measurement module.
    pub input_measurements: usize,
    /// Number of measurements whose future changes are predicted.
    pub predicted_measurements: usize,
    /// Number of temporal offsets.
    pub offsets: usize,
    pub actions: usize,
    pub conv: Vec<ConvSpec>,
    pub perception_width: usize,
    pub measurement_widths: Vec<usize>,
    pub goal_widths: Vec<usize>,
    pub expectation_hidden: usize,
    pub action_hidden: usize,
    pub disable_normalization: bool,
    pub disable_split: bool,
    pub disable_input_measurements: bool,
}

impl PredictorConfig {
    pub fn preset(
        preset: Preset,
        image: (usize, usize, usize),
        measurements: usize,
        offsets: usize,
        actions: usize,
    ) -> Self {
        let (h, w, c) = image;
        let base = |conv: Vec<ConvSpec>, perception, module, head| PredictorConfig {
            image_height: h,
            image_width: w,
            image_channels: c,
            input_measurements: measurements,
            predicted_measurements: measurements,
            offsets,
            actions,
            conv,
            perception_width: perception,
            measurement_widths: vec![module; 3],
            goal_widths: vec![module; 3],
            expectation_hidden: head,
            action_hidden: head,
            disable_normalization: false,
            disable_split: false,
            disable_input_measurements: false,
        };
        let spec = |channels, kernel, stride| ConvSpec {
            channels,
            kernel,
            stride,
        };
        match preset {
            Preset::Desk => base(vec![spec(16, 3, 2), spec(32, 3, 2)], 128, 64, 128),
            Preset::DeskLarge => base(vec![spec(16, 3, 2), spec(32, 3, 2)], 256, 128, 256),
            Preset::A1 => base(
                vec![spec(32, 8, 4), spec(64, 4, 2), spec(64, 3, 1)],
                512,
                128,
                512,
            ),
        }
    }

    pub fn desk(image: (usize, usize, usize), measurements: usize, offsets: usize, actions: usize) -> Self {
        Self::preset(Preset::Desk, image, measurements, offsets, actions)
    }

    /// The reference architecture on 84×84 grayscale input.
    pub fn a1(measurements: usize, offsets: usize, actions: usize) -> Self {
        Self::preset(Preset::A1, (84, 84, 1), measurements, offsets, actions)
    }

    /// `dim(f)`: predicted measurements × offsets.
    pub fn target_dim(&self) -> usize {
        self.predicted_measurements * self.offsets
    }

    pub fn sensory_len(&self) -> usize {
        self.image_height * self.image_width * self.image_channels
    }

    fn conv_geometries(&self) -> Result<Vec<ConvGeometry>> {
        let (mut h, mut w, mut c) = (self.image_height, self.image_width, self.image_channels);
        let mut out = Vec::with_capacity(self.conv.len());
        for (i, spec) in self.conv.iter().enumerate() {
            let oh = conv_output_extent(h, spec.kernel, spec.stride);
            let ow = conv_output_extent(w, spec.kernel, spec.stride);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::invalid_argument(format!(
                    "conv layer {i} (kernel {}, stride {}) does not fit {h}x{w}",
                    spec.kernel, spec.stride
                )));
            };
            if spec.channels == 0 {
                return Err(Error::invalid_argument("conv layer with zero channels"));
            }
            out.push(ConvGeometry {
                in_h: h,
                in_w: w,
                in_c: c,
                out_c: spec.channels,
                kernel: spec.kernel,
                stride: spec.stride,
            });
            (h, w, c) = (oh, ow, spec.channels);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions == 0 {
            return Err(Error::invalid_argument("predictor needs at least one action"));
        }
        if self.predicted_measurements == 0 || self.input_measurements == 0 {
            return Err(Error::invalid_argument("predictor needs at least one measurement"));
        }
        if self.offsets == 0 {
            return Err(Error::invalid_argument("predictor needs at least one offset"));
        }
        if self.sensory_len() == 0 {
            return Err(Error::invalid_argument("empty sensory input"));
        }
        let widths = [self.perception_width, self.expectation_hidden, self.action_hidden];
        if widths.contains(&0)
            || self.measurement_widths.contains(&0)
            || self.goal_widths.contains(&0)
            || self.measurement_widths.is_empty()
            || self.goal_widths.is_empty()
        {
            return Err(Error::invalid_argument("layer widths must be positive"));
        }
        self.conv_geometries().map(|_| ())
    }

    /// Width of the concatenated representation read by both heads.
    pub fn joint_width(&self) -> usize {
        let meas = if self.disable_input_measurements {
            0
        } else {
            *self.measurement_widths.last().unwrap_or(&0)
        };
        self.perception_width + meas + *self.goal_widths.last().unwrap_or(&0)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("image_height", self.image_height);
        kv.set("image_width", self.image_width);
        kv.set("image_channels", self.image_channels);
        kv.set("input_measurements", self.input_measurements);
        kv.set("predicted_measurements", self.predicted_measurements);
        kv.set("offsets", self.offsets);
        kv.set("actions", self.actions);
        let conv: Vec<String> = self
            .conv
            .iter()
            .map(|c| format!("{}x{}s{}", c.channels, c.kernel, c.stride))
            .collect();
        kv.set("conv", conv.join(","));
        kv.set("perception_width", self.perception_width);
        kv.set("measurement_widths", crate::config::join_list(&self.measurement_widths));
        kv.set("goal_widths", crate::config::join_list(&self.goal_widths));
        kv.set("expectation_hidden", self.expectation_hidden);
        kv.set("action_hidden", self.action_hidden);
        kv.set("disable_normalization", self.disable_normalization);
        kv.set("disable_split", self.disable_split);
        kv.set("disable_input_measurements", self.disable_input_measurements);
        kv
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let conv = kv
            .get_list::<String>("conv")?
            .ok_or_else(|| Error::Config("missing key conv".into()))?
            .iter()
            .map(|s| parse_conv_spec(s))
            .collect::<Result<Vec<_>>>()?;
        let cfg = PredictorConfig {
            image_height: kv.require("image_height")?,
            image_width: kv.require("image_width")?,
            image_channels: kv.require("image_channels")?,
            input_measurements: kv.require("input_measurements")?,
            predicted_measurements: kv.require("predicted_measurements")?,
            offsets: kv.require("offsets")?,
            actions: kv.require("actions")?,
            conv,
            perception_width: kv.require("perception_width")?,
            measurement_widths: kv
                .get_list("measurement_widths")?
                .ok_or_else(|| Error::Config("missing key measurement_widths".into()))?,
            goal_widths: kv
                .get_list("goal_widths")?
                .ok_or_else(|| Error::Config("missing key goal_widths".into()))?,
            expectation_hidden: kv.require("expectation_hidden")?,
            action_hidden: kv.require("action_hidden")?,
            disable_normalization: kv.require("disable_normalization")?,
            disable_split: kv.require("disable_split")?,
            disable_input_measurements: kv.require("disable_input_measurements")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_conv_spec(s: &str) -> Result<ConvSpec> {
    let bad = || Error::Config(format!("bad conv spec {s:?}, expected CxKsS"));
    let (channels, rest) = s.split_once('x').ok_or_else(bad)?;
    let (kernel, stride) = rest.split_once('s').ok_or_else(bad)?;
    Ok(ConvSpec {
        channels: channels.parse().map_err(|_| bad())?,
        kernel: kernel.parse().map_err(|_| bad())?,
        stride: stride.parse().map_err(|_| bad())?,
    })
}

/// Predictions for every action: `actions` rows of `dim(f)` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    actions: usize,
    width: usize,
    values: Vec<f32>,
}

impl PredictionSet {
    pub fn new(actions: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != actions * width {
            return Err(Error::shape(format!(
                "{} values cannot form {actions}x{width} predictions",
                values.len()
            )));
        }
        Ok(PredictionSet {
            actions,
            width,
            values,
        })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, action: usize) -> &[f32] {
        &self.values[action * self.width..(action + 1) * self.width]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Index of the action maximizing `goal · p^a`; ties go to the lowest index.
pub fn choose_action(predictions: &PredictionSet, goal: &[f32]) -> Result<usize> {
    if goal.len() != predictions.width {
        return Err(Error::shape(format!(
            "goal has length {}, predictions have width {}",
            goal.len(),
            predictions.width
        )));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for a in 0..predictions.actions {
        let score: f64 = predictions
            .row(a)
            .iter()
            .zip(goal)
            .map(|(&p, &g)| f64::from(p) * f64::from(g))
            .sum();
        if score > best_score {
            best = a;
            best_score = score;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug)]
struct DenseLayer {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<ConvLayer>,
    perception: DenseLayer,
    measurement: Vec<DenseLayer>,
    goal: Vec<DenseLayer>,
    expectation: Option<(DenseLayer, DenseLayer)>,
    action: (DenseLayer, DenseLayer),
}

/// The predictor network: configuration, parameters and wiring.
#[derive(Clone, Debug)]
pub struct PredictorNet {
    config: PredictorConfig,
    params: ParameterStore,
    layout: Layout,
}

/// A mini-batch in network-ready form (measurements already normalized).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingBatch {
    pub sensory: Vec<f32>,
    pub measurements: Vec<f32>,
    pub goals: Vec<f32>,
    pub actions: Vec<usize>,
    pub targets: Vec<f32>,
    pub masks: Vec<f32>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Cached activations of a forward pass over a block of rows.
struct Activations {
    rows: usize,
    sensory: Vec<f32>,
    conv: Vec<Vec<f32>>,
    perception: Vec<f32>,
    measurement_input: Vec<f32>,
    measurement: Vec<Vec<f32>>,
    goal_input: Vec<f32>,
    goal: Vec<Vec<f32>>,
    joint: Vec<f32>,
    expectation_hidden: Vec<f32>,
    expectation: Vec<f32>,
    action_hidden: Vec<f32>,
    predictions: Vec<f32>,
}

impl PredictorNet {
    pub fn build<R: Rng + ?Sized>(config: PredictorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterStore::new();
        let dense = |params: &mut ParameterStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R| {
            let weight = params.add(format!("{name}.weight"), he_init(vec![in_dim, out_dim], in_dim, rng)?);
            let bias = params.add(format!("{name}.bias"), zeros_bias(vec![out_dim]));
            Ok::<_, Error>(DenseLayer {
                weight,
                bias,
                in_dim,
                out_dim,
            })
        };

        let mut convs = Vec::new();
        for (i, g) in config.conv_geometries()?.into_iter().enumerate() {
            let fan_in = g.kernel * g.kernel * g.in_c;
            let kernel = params.add(
                format!("perception.conv{i}.kernel"),
                he_init(vec![g.kernel, g.kernel, g.in_c, g.out_c], fan_in, rng)?,
            );
            let bias = params.add(format!("perception.conv{i}.bias"), zeros_bias(vec![g.out_c]));
            convs.push(ConvLayer {
                kernel,
                bias,
                geometry: g,
            });
        }
        let flat = convs
            .last()
            .map_or(config.sensory_len(), |c| c.geometry.output_len());
        let perception = dense(&mut params, "perception.dense", flat, config.perception_width, rng)?;

        let stack = |params: &mut ParameterStore, name: &str, input: usize, widths: &[usize], rng: &mut R| {
            let mut layers = Vec::new();
            let mut prev = input;
            for (i, &w) in widths.iter().enumerate() {
                layers.push(dense(params, &format!("{name}.{i}"), prev, w, rng)?);
                prev = w;
            }
            Ok::<_, Error>(layers)
        };
        let measurement = if config.disable_input_measurements {
            Vec::new()
        } else {
            stack(&mut params, "measurement", config.input_measurements, &config.measurement_widths, rng)?
        };
        let goal = stack(&mut params, "goal", config.target_dim(), &config.goal_widths, rng)?;

        let joint = config.joint_width();
        let dim_f = config.target_dim();
        let expectation = if config.disable_split {
            None
        } else {
            Some((
                dense(&mut params, "expectation.0", joint, config.expectation_hidden, rng)?,
                dense(&mut params, "expectation.1", config.expectation_hidden, dim_f, rng)?,
            ))
        };
        let action = (
            dense(&mut params, "action.0", joint, config.action_hidden, rng)?,
            dense(&mut params, "action.1", config.action_hidden, config.actions * dim_f, rng)?,
        );

        Ok(PredictorNet {
            config,
            params,
            layout: Layout {
                convs,
                perception,
                measurement,
                goal,
                expectation,
                action,
            },
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn parameters(&self) -> &ParameterStore {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Output width of the expectation head, if present.
    pub fn expectation_width(&self) -> Option<usize> {
        self.layout.expectation.map(|(_, out)| out.out_dim)
    }

    pub fn action_head_width(&self) -> usize {
        self.layout.action.1.out_dim
    }

    fn check_inputs(&self, rows: usize, sensory: &[f32], measurements: &[f32], goals: &[f32]) -> Result<()> {
        let c = &self.config;
        if sensory.len() != rows * c.sensory_len() {
            return Err(Error::shape(format!(
                "sensory input has {} values, expected {}",
                sensory.len(),
                rows * c.sensory_len()
            )));
        }
        if measurements.len() != rows * c.input_measurements {
            return Err(Error::shape(format!(
                "measurement input has {} values, expected {}",
                measurements.len(),
                rows * c.input_measurements
            )));
        }
        if goals.len() != rows * c.target_dim() {
            return Err(Error::shape(format!(
                "goal has {} values, expected {}",
                goals.len(),
                rows * c.target_dim()
            )));
        }
        Ok(())
    }

    /// Predictions for every action given one observation and goal.
    pub fn forward(&self, sensory: &[f32], measurements: &[f32], goal: &[f32]) -> Result<PredictionSet> {
        self.check_inputs(1, sensory, measurements, goal)?;
        let acts = self.forward_rows(1, sensory, measurements, goal);
        PredictionSet::new(self.config.actions, self.config.target_dim(), acts.predictions)
    }

    /// Like [`forward`](Self::forward) but also returns the expectation head
    /// output `E(j)` (absent when the split is disabled).
    pub fn forward_with_expectation(
        &self,
        sensory: &[f32],
        measurements: &[f32],
        goal: &[f32],
    ) -> Result<(PredictionSet, Option<Vec<f32>>)> {
        self.check_inputs(1, sensory, measurements, goal)?;
        let acts = self.forward_rows(1, sensory, measurements, goal);
        let expectation = self.layout.expectation.map(|_| acts.expectation.clone());
        Ok((
            PredictionSet::new(self.config.actions, self.config.target_dim(), acts.predictions)?,
            expectation,
        ))
    }

    /// Forward passes over `rows` stacked observations.
    pub fn forward_batch(
        &self,
        rows: usize,
        sensory: &[f32],
        measurements: &[f32],
        goals: &[f32],
        exec: Execution,
    ) -> Result<Vec<PredictionSet>> {
        self.check_inputs(rows, sensory, measurements, goals)?;
        let c = &self.config;
        let (s, m, g) = (c.sensory_len(), c.input_measurements, c.target_dim());
        Ok(exec.map_indices(rows, |r| {
            let acts = self.forward_rows(
                1,
                &sensory[r * s..(r + 1) * s],
                &measurements[r * m..(r + 1) * m],
                &goals[r * g..(r + 1) * g],
            );
            PredictionSet {
                actions: c.actions,
                width: g,
                values: acts.predictions,
            }
        }))
    }

    fn dense_forward(&self, layer: &DenseLayer, x: &[f32], rows: usize, activate: bool) -> Vec<f32> {
        let mut y = vec![0.0; rows * layer.out_dim];
        kernels::dense_forward(
            x,
            self.params.get(layer.weight).values(),
            self.params.get(layer.bias).values(),
            &mut y,
            rows,
        );
        if activate {
            kernels::leaky_relu_forward(&mut y);
        }
        y
    }

    fn forward_rows(&self, rows: usize, sensory: &[f32], measurements: &[f32], goals: &[f32]) -> Activations {
        let c = &self.config;
        let l = &self.layout;

        let mut conv: Vec<Vec<f32>> = Vec::with_capacity(l.convs.len());
        for (i, layer) in l.convs.iter().enumerate() {
            let g = &layer.geometry;
            let input: &[f32] = if i == 0 { sensory } else { conv[i - 1].as_slice() };
            let mut out = vec![0.0; rows * g.output_len()];
            let k = self.params.get(layer.kernel).values();
            let b = self.params.get(layer.bias).values();
            for r in 0..rows {
                kernels::conv2d_forward(
                    g,
                    &input[r * g.input_len()..(r + 1) * g.input_len()],
                    k,
                    b,
                    &mut out[r * g.output_len()..(r + 1) * g.output_len()],
                );
            }
            kernels::leaky_relu_forward(&mut out);
            conv.push(out);
        }
        let flat: &[f32] = conv.last().map_or(sensory, Vec::as_slice);
        let perception = self.dense_forward(&l.perception, flat, rows, true);

        let mut measurement: Vec<Vec<f32>> = Vec::with_capacity(l.measurement.len());
        for layer in &l.measurement {
            let x = measurement.last().map_or(measurements, Vec::as_slice);
            let y = self.dense_forward(layer, x, rows, true);
            measurement.push(y);
        }
        let mut goal: Vec<Vec<f32>> = Vec::with_capacity(l.goal.len());
        for layer in &l.goal {
            let x = goal.last().map_or(goals, Vec::as_slice);
            let y = self.dense_forward(layer, x, rows, true);
            goal.push(y);
        }

        let jw = c.joint_width();
        let mut joint = Vec::with_capacity(rows * jw);
        for r in 0..rows {
            let pw = c.perception_width;
            joint.extend_from_slice(&perception[r * pw..(r + 1) * pw]);
            if let Some(m) = measurement.last() {
                let mw = m.len() / rows;
                joint.extend_from_slice(&m[r * mw..(r + 1) * mw]);
            }
            let g = goal.last().expect("goal module has at least one layer");
            let gw = g.len() / rows;
            joint.extend_from_slice(&g[r * gw..(r + 1) * gw]);
        }

        let dim_f = c.target_dim();
        let w = c.actions;
        let action_hidden = self.dense_forward(&l.action.0, &joint, rows, true);
        let mut predictions = self.dense_forward(&l.action.1, &action_hidden, rows, false);
        let (expectation_hidden, expectation) = match &l.expectation {
            Some((h, o)) => {
                let hidden = self.dense_forward(h, &joint, rows, true);
                let e = self.dense_forward(o, &hidden, rows, false);
                (hidden, e)
            }
            None => (Vec::new(), Vec::new()),
        };
        if l.expectation.is_some() {
            for r in 0..rows {
                let block = &mut predictions[r * w * dim_f..(r + 1) * w * dim_f];
                if !c.disable_normalization {
                    normalize_over_actions(block, w, dim_f);
                }
                let e = &expectation[r * dim_f..(r + 1) * dim_f];
                for a in 0..w {
                    kernels::axpy(1.0, e, &mut block[a * dim_f..(a + 1) * dim_f]);
                }
            }
        }

        Activations {
            rows,
            sensory: sensory.to_vec(),
            conv,
            perception,
            measurement_input: measurements.to_vec(),
            measurement,
            goal_input: goals.to_vec(),
            goal,
            joint,
            expectation_hidden,
            expectation,
            action_hidden,
            predictions,
        }
    }

    fn dense_backward(
        &self,
        layer: &DenseLayer,
        x: &[f32],
        grad_y: &[f32],
        rows: usize,
        grads: &mut Gradients,
        want_input_grad: bool,
    ) -> Option<Vec<f32>> {
        let mut gx = want_input_grad.then(|| vec![0.0; rows * layer.in_dim]);
        let w = self.params.get(layer.weight).values();
        let (gw, gb) = grads.pair_mut(layer.weight, layer.bias);
        kernels::dense_backward(x, w, grad_y, gx.as_deref_mut(), gw, gb, rows);
        gx
    }

    /// Backpropagates `grad_predictions` (rows × actions × dim(f)) into `grads`.
    fn backward_rows(&self, acts: &Activations, grad_predictions: &[f32], grads: &mut Gradients) {
        let c = &self.config;
        let l = &self.layout;
        let rows = acts.rows;
        let w = c.actions;
        let dim_f = c.target_dim();
        let jw = c.joint_width();

        let mut grad_joint = vec![0.0; rows * jw];
        let mut grad_action_out = grad_predictions.to_vec();
        if let Some((hidden, out)) = &l.expectation {
            let mut grad_e = vec![0.0; rows * dim_f];
            for r in 0..rows {
                let block = &grad_predictions[r * w * dim_f..(r + 1) * w * dim_f];
                let ge = &mut grad_e[r * dim_f..(r + 1) * dim_f];
                for a in 0..w {
                    kernels::axpy(1.0, &block[a * dim_f..(a + 1) * dim_f], ge);
                }
                if !c.disable_normalization {
                    normalize_over_actions(&mut grad_action_out[r * w * dim_f..(r + 1) * w * dim_f], w, dim_f);
                }
            }
            let mut gh = self
                .dense_backward(out, &acts.expectation_hidden, &grad_e, rows, grads, true)
                .expect("requested");
            kernels::leaky_relu_backward(&acts.expectation_hidden, &mut gh);
            let gj = self
                .dense_backward(hidden, &acts.joint, &gh, rows, grads, true)
                .expect("requested");
            kernels::axpy(1.0, &gj, &mut grad_joint);
        }
        let mut gh = self
            .dense_backward(&l.action.1, &acts.action_hidden, &grad_action_out, rows, grads, true)
            .expect("requested");
        kernels::leaky_relu_backward(&acts.action_hidden, &mut gh);
        let gj = self
            .dense_backward(&l.action.0, &acts.joint, &gh, rows, grads, true)
            .expect("requested");
        kernels::axpy(1.0, &gj, &mut grad_joint);

        // Split the joint gradient back into the three input modules.
        let pw = c.perception_width;
        let mw = l.measurement.last().map_or(0, |d| d.out_dim);
        let gw = l.goal.last().map_or(0, |d| d.out_dim);
        let mut grad_perception = Vec::with_capacity(rows * pw);
        let mut grad_meas = Vec::with_capacity(rows * mw);
        let mut grad_goal = Vec::with_capacity(rows * gw);
        for r in 0..rows {
            let row = &grad_joint[r * jw..(r + 1) * jw];
            grad_perception.extend_from_slice(&row[..pw]);
            grad_meas.extend_from_slice(&row[pw..pw + mw]);
            grad_goal.extend_from_slice(&row[pw + mw..]);
        }

        self.backward_stack(&l.goal, &acts.goal_input, &acts.goal, grad_goal, grads);
        if !l.measurement.is_empty() {
            self.backward_stack(&l.measurement, &acts.measurement_input, &acts.measurement, grad_meas, grads);
        }

        kernels::leaky_relu_backward(&acts.perception, &mut grad_perception);
        let flat: &[f32] = acts.conv.last().map_or(&acts.sensory, Vec::as_slice);
        let mut grad_flat = self.dense_backward(
            &l.perception,
            flat,
            &grad_perception,
            rows,
            grads,
            !l.convs.is_empty(),
        );
        for (i, layer) in l.convs.iter().enumerate().rev() {
            let g = &layer.geometry;
            let mut gy = grad_flat.take().expect("conv layers need an upstream gradient");
            kernels::leaky_relu_backward(&acts.conv[i], &mut gy);
            let input: &[f32] = if i == 0 { &acts.sensory } else { &acts.conv[i - 1] };
            let k = self.params.get(layer.kernel).values();
            let (gk, gb) = grads.pair_mut(layer.kernel, layer.bias);
            let mut gx = (i > 0).then(|| vec![0.0; rows * g.input_len()]);
            for r in 0..rows {
                kernels::conv2d_backward(
                    g,
                    &input[r * g.input_len()..(r + 1) * g.input_len()],
                    k,
                    &gy[r * g.output_len()..(r + 1) * g.output_len()],
                    gx.as_deref_mut().map(|v| &mut v[r * g.input_len()..(r + 1) * g.input_len()]),
                    gk,
                    gb,
                );
            }
            grad_flat = gx;
        }
    }

    fn backward_stack(
        &self,
        layers: &[DenseLayer],
        input: &[f32],
        outputs: &[Vec<f32>],
        mut grad: Vec<f32>,
        grads: &mut Gradients,
    ) {
        let rows = grad.len() / layers.last().map_or(1, |l| l.out_dim);
        for i in (0..layers.len()).rev() {
            kernels::leaky_relu_backward(&outputs[i], &mut grad);
            let x: &[f32] = if i == 0 { input } else { &outputs[i - 1] };
            match self.dense_backward(&layers[i], x, &grad, rows, grads, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }
}

/// Subtracts, for each column, the mean over the `actions` rows.
fn normalize_over_actions(block: &mut [f32], actions: usize, width: usize) {
    let inv = 1.0 / actions as f32;
    let mut mean = vec![0.0f32; width];
    for a in 0..actions {
        kernels::axpy(inv, &block[a * width..(a + 1) * width], &mut mean);
    }
    for a in 0..actions {
        kernels::axpy(-1.0, &mean, &mut block[a * width..(a + 1) * width]);
    }
}

impl PredictorNet {
    /// Masked mean-squared error of the taken actions' predictions against
    /// the targets, with its gradient. The mean is over every unmasked
    /// component in the batch.
    pub fn loss_and_gradients(&self, batch: &TrainingBatch, exec: Execution) -> Result<(f32, Gradients)> {
        let rows = batch.len();
        let c = &self.config;
        let dim_f = c.target_dim();
        self.check_inputs(rows, &batch.sensory, &batch.measurements, &batch.goals)?;
        if batch.targets.len() != rows * dim_f || batch.masks.len() != rows * dim_f {
            return Err(Error::shape("targets and masks must be rows × dim(f)"));
        }
        if let Some(&a) = batch.actions.iter().find(|&&a| a >= c.actions) {
            return Err(Error::invalid_argument(format!("action {a} out of range")));
        }
        let count = batch.masks.iter().filter(|&&m| m != 0.0).count() as f32;
        let chunks = rows.div_ceil(GRADIENT_CHUNK);
        let (s, m) = (c.sensory_len(), c.input_measurements);
        let w = c.actions;

        let partials = exec.map_indices(chunks, |chunk| {
            let lo = chunk * GRADIENT_CHUNK;
            let hi = (lo + GRADIENT_CHUNK).min(rows);
            let n = hi - lo;
            let acts = self.forward_rows(
                n,
                &batch.sensory[lo * s..hi * s],
                &batch.measurements[lo * m..hi * m],
                &batch.goals[lo * dim_f..hi * dim_f],
            );
            let mut sq = 0.0f64;
            let mut grad_pred = vec![0.0; n * w * dim_f];
            for r in 0..n {
                let a = batch.actions[lo + r];
                let off = (r * w + a) * dim_f;
                let pred = &acts.predictions[off..off + dim_f];
                let target = &batch.targets[(lo + r) * dim_f..(lo + r + 1) * dim_f];
                let mask = &batch.masks[(lo + r) * dim_f..(lo + r + 1) * dim_f];
                sq += kernels::masked_squared_error(pred, target, mask);
                kernels::masked_mse_grad(pred, target, mask, count, &mut grad_pred[off..off + dim_f]);
            }
            let mut grads = Gradients::zeros_like(&self.params);
            self.backward_rows(&acts, &grad_pred, &mut grads);
            (sq, grads)
        });

        let mut total = 0.0f64;
        let mut grads: Option<Gradients> = None;
        for (sq, g) in partials {
            total += sq;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        let grads = grads.unwrap_or_else(|| Gradients::zeros_like(&self.params));
        let loss = if count == 0.0 { 0.0 } else { (total / f64::from(count)) as f32 };
        Ok((loss, grads))
    }

    /// One Adam step on the batch loss; returns the loss before the update.
    pub fn train_step(
        &mut self,
        batch: &TrainingBatch,
        learning_rate: f64,
        adam: &AdamConfig,
        exec: Execution,
    ) -> Result<f32> {
        let (loss, grads) = self.loss_and_gradients(batch, exec)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss,
                step: self.params.step(),
            });
        }
        self.params.accumulate(&grads)?;
        adam_step(&mut self.params, learning_rate, adam)?;
        Ok(loss)
    }
}
