//! Gradient boosting on log-loss with Newton leaf values.

use serde::{Deserialize, Serialize};

use super::tree::{Binned, Builder, Criterion, Node, Tree};
use super::sigmoid;
use crate::features::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams { rounds: 200, max_depth: 3, learning_rate: 0.1, min_samples_leaf: 10 }
    }
}

impl GbtParams {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            e.push("gbt.learning_rate must lie in (0, 1]".into());
        }
        if self.max_depth == 0 || self.max_depth > 16 {
            e.push("gbt.max_depth must lie in [1, 16]".into());
        }
        if self.min_samples_leaf == 0 {
            e.push("gbt.min_samples_leaf must be >= 1".into());
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    /// Log-odds of the training base rate.
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Mean training log-loss before the first round and after each round.
    pub training_loss: Vec<f64>,
}

impl GbtModel {
    pub fn margin(&self, row: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(self.margin(row))
    }
}

/// Log-loss at margin `z` for target `t`, and the predicted probability,
/// sharing one exponential.
fn loss_and_prob(z: f64, t: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let p = if z >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (z.max(0.0) + e.ln_1p() - t * z, p)
}

/// Mean loss of `margin` with the matching probabilities written to `prob`.
fn evaluate(margin: &[f64], y: &[f64], prob: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..margin.len() {
        let (l, p) = loss_and_prob(margin[i], y[i]);
        total += l;
        prob[i] = p;
    }
    total / margin.len() as f64
}

pub fn fit_gbt(x: &Matrix, y: &[u8], params: &GbtParams) -> GbtModel {
    let n = y.len();
    let pos = y.iter().filter(|&&v| v == 1).count() as f64;
    let rate = (pos / n as f64).clamp(1e-12, 1.0 - 1e-12);
    let base_score = (rate / (1.0 - rate)).ln();
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let mut margin = vec![base_score; n];
    let mut prob = vec![0.0; n];
    let mut training_loss = vec![evaluate(&margin, &yf, &mut prob)];
    let binned = Binned::new(x);
    let mut residual = vec![0.0; n];
    let mut hessian = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial_prob = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        for i in 0..n {
            residual[i] = yf[i] - prob[i];
            hessian[i] = prob[i] * (1.0 - prob[i]);
        }
        let builder = Builder {
            x,
            target: &residual,
            hessian: Some(&hessian),
            criterion: Criterion::SquaredError,
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf,
        };
        let mut tree = builder.build(&binned);
        let step: Vec<f64> = (0..n).map(|i| params.learning_rate * tree.predict(x.row(i))).collect();
        // Newton leaves can overshoot where curvature is tiny; halve the
        // whole tree until the loss does not go up.
        let previous = *training_loss.last().unwrap();
        let mut scale = 1.0;
        let loss = loop {
            for i in 0..n {
                trial[i] = margin[i] + scale * step[i];
            }
            let loss = evaluate(&trial, &yf, &mut trial_prob);
            if loss <= previous || scale == 0.0 {
                break loss;
            }
            scale = if scale < 1e-6 { 0.0 } else { scale * 0.5 };
        };
        if scale != 1.0 {
            for node in &mut tree.nodes {
                if let Node::Leaf { value, .. } = node {
                    *value *= scale;
                }
            }
        }
        std::mem::swap(&mut margin, &mut trial);
        std::mem::swap(&mut prob, &mut trial_prob);
        training_loss.push(loss);
        trees.push(tree);
    }
    GbtModel { base_score, learning_rate: params.learning_rate, trees, training_loss }
}
