//! One-hidden-layer perceptron: tanh hidden units, sigmoid output,
//! cross-entropy loss, Adam updates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{logit_loss, sigmoid, Adam, LearnerError};
use crate::features::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpParams {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams { hidden: 32, learning_rate: 1e-3, epochs: 200, batch_size: 64 }
    }
}

impl MlpParams {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.hidden == 0 {
            e.push("mlp.hidden must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            e.push("mlp.learning_rate must be > 0".into());
        }
        if self.batch_size == 0 {
            e.push("mlp.batch_size must be >= 1".into());
        }
        e
    }
}

/// Parameters in one flat vector: hidden weights (row per input, so a
/// nonzero input touches one contiguous slice), hidden biases, output
/// weights, output bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub inputs: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl MlpModel {
    pub fn n_params(inputs: usize, hidden: usize) -> usize {
        hidden * inputs + 2 * hidden + 1
    }

    /// Uniform initialization in ±1/sqrt(fan_in) per layer.
    pub fn init(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; Self::n_params(inputs, hidden)];
        let a1 = 1.0 / (inputs.max(1) as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        for (k, p) in params.iter_mut().enumerate() {
            let bound = if k < hidden * (inputs + 1) { a1 } else { a2 };
            *p = rng.gen_range(-bound..=bound);
        }
        MlpModel { inputs, hidden, params }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for f in 0..self.inputs {
            for j in 0..self.hidden {
                names.push(format!("W1[{j},{f}]"));
            }
        }
        names.extend((0..self.hidden).map(|j| format!("b1[{j}]")));
        names.extend((0..self.hidden).map(|j| format!("w2[{j}]")));
        names.push("b2".into());
        names
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        (b1, b1 + self.hidden, b1 + 2 * self.hidden)
    }

    /// Hidden activations into `h`; returns the output logit.
    fn forward(&self, params: &[f64], row: &[f64], h: &mut [f64]) -> f64 {
        let (b1, w2, b2) = self.offsets();
        h.copy_from_slice(&params[b1..b1 + self.hidden]);
        for (f, &xf) in row.iter().enumerate() {
            if xf != 0.0 {
                let w = &params[f * self.hidden..(f + 1) * self.hidden];
                for (a, wf) in h.iter_mut().zip(w) {
                    *a += wf * xf;
                }
            }
        }
        let mut z = params[b2];
        for (a, w) in h.iter_mut().zip(&params[w2..w2 + self.hidden]) {
            *a = a.tanh();
            z += w * *a;
        }
        z
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut h = vec![0.0; self.hidden];
        sigmoid(self.forward(&self.params, row, &mut h))
    }

    /// Summed loss over `rows` under `params`; gradient accumulated into
    /// `grad` (which is overwritten).
    pub fn loss_and_grad(&self, params: &[f64], x: &Matrix, y: &[u8], rows: &[usize], grad: &mut [f64]) -> f64 {
        let (b1, w2, b2) = self.offsets();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut h = vec![0.0; self.hidden];
        let mut da = vec![0.0; self.hidden];
        let mut loss = 0.0;
        for &i in rows {
            let row = x.row(i);
            let z = self.forward(params, row, &mut h);
            let t = f64::from(y[i]);
            loss += logit_loss(z, t);
            let dz = sigmoid(z) - t;
            grad[b2] += dz;
            for j in 0..self.hidden {
                grad[w2 + j] += dz * h[j];
                da[j] = dz * params[w2 + j] * (1.0 - h[j] * h[j]);
                grad[b1 + j] += da[j];
            }
            for (f, &xf) in row.iter().enumerate() {
                if xf != 0.0 {
                    for (g, d) in grad[f * self.hidden..(f + 1) * self.hidden].iter_mut().zip(&da) {
                        *g += d * xf;
                    }
                }
            }
        }
        loss
    }
}

pub fn fit_mlp(x: &Matrix, y: &[u8], params: &MlpParams, seed: u64) -> Result<MlpModel, LearnerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MlpModel::init(x.cols, params.hidden, &mut rng);
    let mut adam = Adam::new(model.params.len(), params.learning_rate);
    let mut grad = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..x.rows).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            epoch_loss += model.loss_and_grad(&model.params, x, y, batch, &mut grad);
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grad);
        }
        if !epoch_loss.is_finite() || model.params.iter().any(|p| !p.is_finite()) {
            return Err(LearnerError::Diverged { epoch, detail: format!("mlp loss {epoch_loss}") });
        }
    }
    Ok(model)
}
