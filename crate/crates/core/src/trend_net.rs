//! Small fully connected regression network over close-price differences.
//!
//! The production architecture is fixed at 5-10-10-10-5-1 with ReLU on every
//! hidden layer and a linear output, trained on mean squared error with
//! Adam. [`MlpModel`] itself accepts any layer sizes so the gradient code can
//! be exercised on small networks as well.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::direction::Direction;
use crate::error::{Error, Result};
use crate::marketdata::close_diffs;

/// Layer widths from input to output.
pub const ARCHITECTURE: [usize; 6] = [5, 10, 10, 10, 5, 1];
/// Number of trailing close differences fed to the network.
pub const INPUT_SIZE: usize = ARCHITECTURE[0];

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub input_size: usize,
    pub layer_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Divide inputs and targets by the training-set stdev of the inputs.
    pub normalize_inputs: bool,
    /// Set per symbol by the caller; not part of the configuration file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_size: INPUT_SIZE,
            layer_sizes: ARCHITECTURE.to_vec(),
            learning_rate: 0.001,
            epochs: 5,
            batch_size: 16,
            normalize_inputs: false,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size != INPUT_SIZE || self.layer_sizes != ARCHITECTURE {
            return Err(Error::Parameter(format!(
                "network shape must be {ARCHITECTURE:?} with input size {INPUT_SIZE}"
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Dense layer, `weights` row-major with shape `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            out.push(self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Adam moment estimates, flattened in parameter order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub adam: AdamState,
    /// Input/target scale learnt when normalisation is enabled (1 otherwise).
    pub input_scale: f64,
}

/// Sliding-window samples: each input is five consecutive close
/// differences, the target the difference that follows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-dataset MSE before the first update.
    pub initial_mse: f64,
    /// Mean per-sample MSE of the mini-batches seen in each epoch.
    pub epoch_mse: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetForecast {
    /// Predicted next close difference, in price units.
    pub prediction: f64,
    pub direction: Direction,
}

impl MlpModel {
    /// Glorot-uniform weights from a seeded generator, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    inputs: fan_in,
                    outputs: fan_out,
                    weights: (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Self::with_layers(layers)
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Self::with_layers(layers)
    }

    pub fn from_config(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::new(&config.layer_sizes, config.seed))
    }

    fn with_layers(layers: Vec<Layer>) -> Self {
        let n: usize = layers.iter().map(Layer::param_count).sum();
        Self {
            layers,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
            input_scale: 1.0,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_size())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Inverse of [`MlpModel::parameters`].
    ///
    /// # Panics
    /// If `params` has the wrong length.
    pub fn set_parameters(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter count mismatch");
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Network output in the units of the training targets.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.input_size() {
            return Err(Error::InvalidInput(format!(
                "expected {} inputs, got {}",
                self.input_size(),
                input.len()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("network input must be finite".into()));
        }
        let scaled: Vec<f64> = input.iter().map(|v| v / self.input_scale).collect();
        Ok(self.forward_raw(&scaled) * self.input_scale)
    }

    fn forward_raw(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&cur, &mut next);
            if i != last {
                for v in &mut next {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur[0]
    }

    /// Mean squared error over `(inputs, targets)` and its gradient with
    /// respect to [`MlpModel::parameters`]. Inputs are taken as already
    /// scaled.
    pub fn loss_and_gradient(&self, inputs: &[&[f64]], targets: &[f64]) -> (f64, Vec<f64>) {
        let batch = targets.len() as f64;
        let mut grad = vec![0.0; self.param_count()];
        let mut loss = 0.0;
        let last = self.layers.len() - 1;

        // activations[0] is the input; activations[l + 1] the output of layer l.
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        let mut pre: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.param_count();
                Some(o)
            })
            .collect();

        for (x, &y) in inputs.iter().zip(targets) {
            activations[0].clear();
            activations[0].extend_from_slice(x);
            for (l, layer) in self.layers.iter().enumerate() {
                let mut z = Vec::with_capacity(layer.outputs);
                layer.affine(&activations[l], &mut z);
                activations[l + 1] = if l == last {
                    z.clone()
                } else {
                    z.iter().map(|v| v.max(0.0)).collect()
                };
                pre[l] = z;
            }
            let err = activations[last + 1][0] - y;
            loss += err * err;

            let mut delta = vec![2.0 * err / batch];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let a_prev = &activations[l];
                let base = offsets[l];
                for o in 0..layer.outputs {
                    let row = base + o * layer.inputs;
                    for i in 0..layer.inputs {
                        grad[row + i] += delta[o] * a_prev[i];
                    }
                    grad[base + layer.weights.len() + o] += delta[o];
                }
                if l > 0 {
                    let mut prev = vec![0.0; layer.inputs];
                    for o in 0..layer.outputs {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * delta[o];
                        }
                    }
                    for (p, z) in prev.iter_mut().zip(&pre[l - 1]) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        (loss / batch, grad)
    }

    /// One Adam update with the standard bias-corrected moments.
    pub fn adam_step(&mut self, grad: &[f64], learning_rate: f64) {
        let mut params = self.parameters();
        let state = &mut self.adam;
        state.step += 1;
        let t = state.step as i32;
        let correction1 = 1.0 - ADAM_BETA1.powi(t);
        let correction2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
            state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = state.m[i] / correction1;
            let v_hat = state.v[i] / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        self.set_parameters(&params);
    }
}

pub fn build_training_set(closes: &[f64]) -> Result<TrainingSet> {
    let needed = INPUT_SIZE + 2;
    if closes.len() < needed {
        return Err(Error::insufficient(
            "network training set",
            needed,
            closes.len(),
        ));
    }
    let diffs = close_diffs(closes)?;
    let (inputs, targets) = diffs
        .windows(INPUT_SIZE + 1)
        .map(|w| (w[..INPUT_SIZE].to_vec(), w[INPUT_SIZE]))
        .unzip();
    Ok(TrainingSet { inputs, targets })
}

/// Mini-batch Adam on MSE. Each epoch visits the samples in a permutation
/// drawn from `config.seed`.
pub fn train(
    mut model: MlpModel,
    data: &TrainingSet,
    config: &MlpConfig,
) -> Result<(MlpModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::insufficient("network training", 1, 0));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0)
        || config.epochs == 0
        || config.batch_size == 0
    {
        return Err(Error::Parameter(
            "learning_rate, epochs and batch_size must be positive".into(),
        ));
    }
    if data.inputs.len() != data.targets.len()
        || data.inputs.iter().any(|x| x.len() != model.input_size())
    {
        return Err(Error::InvalidInput(
            "training set shape does not match the network".into(),
        ));
    }

    model.input_scale = if config.normalize_inputs {
        input_stdev(&data.inputs)
    } else {
        1.0
    };
    let scale = model.input_scale;
    let inputs: Vec<Vec<f64>> = data
        .inputs
        .iter()
        .map(|x| x.iter().map(|v| v / scale).collect())
        .collect();
    let targets: Vec<f64> = data.targets.iter().map(|y| y / scale).collect();

    let all: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let (initial_mse, _) = model.loss_and_gradient(&all, &targets);
    if !initial_mse.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_mse = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| inputs[i].as_slice()).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&xs, &ys);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            total += loss * chunk.len() as f64;
            model.adam_step(&grad, config.learning_rate);
        }
        if !model.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        epoch_mse.push(total / data.len() as f64);
    }
    Ok((
        model,
        TrainReport {
            initial_mse,
            epoch_mse,
        },
    ))
}

fn input_stdev(inputs: &[Vec<f64>]) -> f64 {
    let n = inputs.iter().map(Vec::len).sum::<usize>() as f64;
    let mean = inputs.iter().flatten().sum::<f64>() / n;
    let var = inputs
        .iter()
        .flatten()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt();
    if sd.is_finite() && sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Sign of the predicted next difference given the five most recent ones.
pub fn predict_direction(model: &MlpModel, recent_diffs: &[f64]) -> Result<NetForecast> {
    let n = model.input_size();
    if recent_diffs.len() < n {
        return Err(Error::insufficient(
            "network forecast",
            n,
            recent_diffs.len(),
        ));
    }
    let prediction = model.forward(recent_diffs)?;
    Ok(NetForecast {
        prediction,
        direction: Direction::from_value(prediction),
    })
}
