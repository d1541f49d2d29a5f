//! Analytic gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::lstm::{LstmModel, SeqExample};
use super::mlp::MlpModel;
use super::{Family, LearnerError};
use crate::features::Matrix;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so gradients that are zero in both computations do not
/// divide by zero.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub family: Family,
    pub configurations: usize,
    pub tolerance: f64,
    pub worst_relative_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

/// Largest relative error between `analytic` and the central difference of
/// `loss` at `params`, with the offending parameter's name.
pub fn compare_gradients(params: &[f64], names: &[String], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> (f64, String) {
    let mut p = params.to_vec();
    let mut worst = (0.0, String::new());
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + FD_STEP;
        let up = loss(&p);
        p[k] = orig - FD_STEP;
        let down = loss(&p);
        p[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let denom = analytic[k].abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        let err = (analytic[k] - numeric).abs() / denom;
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, names[k].clone());
        }
    }
    worst
}

fn spread(rng: &mut ChaCha8Rng, params: &mut [f64]) {
    for p in params {
        *p = rng.gen_range(-1.0..1.0);
    }
}

fn check_mlp(rng: &mut ChaCha8Rng) -> (f64, String) {
    let inputs = rng.gen_range(1..=6);
    let hidden = rng.gen_range(1..=5);
    let mut m = MlpModel::init(inputs, hidden, rng);
    spread(rng, &mut m.params);
    let mut x = Matrix::zeros(5, inputs);
    for v in &mut x.data {
        // some exact zeros exercise the sparse paths
        *v = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(-2.0..2.0) };
    }
    let y: Vec<u8> = (0..5).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    let rows: Vec<usize> = (0..5).collect();
    let mut grad = vec![0.0; m.params.len()];
    m.loss_and_grad(&m.params, &x, &y, &rows, &mut grad);
    let mut scratch = vec![0.0; m.params.len()];
    compare_gradients(&m.params, &m.param_names(), &grad, |p| m.loss_and_grad(p, &x, &y, &rows, &mut scratch))
}

fn check_lstm(rng: &mut ChaCha8Rng) -> (f64, String) {
    let (inputs, hidden, steps) = (rng.gen_range(2..=5), 3, 4);
    let statics = rng.gen_range(1..=4);
    let static_hidden = rng.gen_range(1..=3);
    let mut m = LstmModel::init(inputs, hidden, statics, static_hidden, rng);
    spread(rng, &mut m.params);
    let data: Vec<(Vec<f64>, Vec<f64>, u8)> = (0..5)
        .map(|i| {
            let steps: Vec<f64> = (0..steps * inputs)
                .map(|k| if i == 0 && k < inputs { 0.0 } else { rng.gen_range(-1.5..1.5) })
                .collect();
            let st: Vec<f64> = (0..statics).map(|_| rng.gen_range(-1.5..1.5)).collect();
            (steps, st, u8::from(rng.gen_bool(0.5)))
        })
        .collect();
    let batch: Vec<SeqExample> = data.iter().map(|(s, st, y)| SeqExample { steps: s, statics: st, label: *y }).collect();
    let mut grad = vec![0.0; m.params.len()];
    m.loss_and_grad(&m.params, &batch, &mut grad);
    let mut scratch = vec![0.0; m.params.len()];
    compare_gradients(&m.params, &m.param_names(), &grad, |p| m.loss_and_grad(p, &batch, &mut scratch))
}

/// Runs `configurations` random small networks of a differentiable family
/// and reports the worst relative gradient error seen.
pub fn gradient_check(family: Family, tolerance: f64, configurations: usize, seed: u64) -> Result<GradCheckReport, LearnerError> {
    let check: fn(&mut ChaCha8Rng) -> (f64, String) = match family {
        Family::Mlp => check_mlp,
        Family::LstmHybrid => check_lstm,
        other => return Err(LearnerError::InvalidHyperparameters(format!("{other} has no analytic gradient"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for _ in 0..configurations {
        let (err, name) = check(&mut rng);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name);
        }
    }
    Ok(GradCheckReport {
        family,
        configurations,
        tolerance,
        worst_relative_error: worst.0,
        worst_parameter: worst.1,
        passed: worst.0 < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_gradients_match() {
        let r = gradient_check(Family::Mlp, 1e-4, 20, 1).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn lstm_gradients_match() {
        let r = gradient_check(Family::LstmHybrid, 1e-4, 20, 1).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_names_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpModel::init(3, 2, &mut rng);
        let x = Matrix::from_rows(3, &[[0.5, -1.0, 2.0], [1.0, 0.3, -0.2]]);
        let y = [1, 0];
        let mut grad = vec![0.0; m.params.len()];
        m.loss_and_grad(&m.params, &x, &y, &[0, 1], &mut grad);
        let names = m.param_names();
        let target = names.iter().position(|n| n == "b1[1]").unwrap();
        grad[target] += 0.5;
        let mut scratch = grad.clone();
        let (err, name) = compare_gradients(&m.params, &names, &grad, |p| m.loss_and_grad(p, &x, &y, &[0, 1], &mut scratch));
        assert!(err > 1e-4);
        assert_eq!(name, "b1[1]");
    }

    #[test]
    fn non_differentiable_family_rejected() {
        assert!(gradient_check(Family::DecisionTree, 1e-4, 1, 0).is_err());
    }
}
