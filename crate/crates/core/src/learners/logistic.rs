//! Logistic regression by iteratively reweighted least squares, with Wald
//! p-values and a second fit restricted to significant features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{sigmoid, logit_loss, FittedModel, LearnerError, Model, ModelSpec, TrainingMetadata, MODEL_FORMAT_VERSION};
use crate::features::{Dataset, Matrix, Scaler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticParams {
    pub ridge: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub p_threshold: f64,
    /// Drop the first column of every one-hot group so the intercept stays
    /// identifiable.
    pub reference_coding: bool,
    pub standardize: bool,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams { ridge: 1e-8, tolerance: 1e-8, max_iterations: 100, p_threshold: 0.05, reference_coding: true, standardize: true }
    }
}

impl LogisticParams {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.ridge >= 0.0 && self.ridge <= 1e-2) {
            e.push("logistic.ridge must lie in [0, 1e-2]".into());
        }
        if !(self.tolerance > 0.0) {
            e.push("logistic.tolerance must be > 0".into());
        }
        if self.max_iterations == 0 {
            e.push("logistic.max_iterations must be >= 1".into());
        }
        if !(self.p_threshold > 0.0 && self.p_threshold <= 1.0) {
            e.push("logistic.p_threshold must lie in (0, 1]".into());
        }
        e
    }
}

/// Coefficients over a subset of input columns, intercept first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub columns: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let z = self.coefficients[0] + self.columns.iter().zip(&self.coefficients[1..]).map(|(&c, b)| b * row[c]).sum::<f64>();
        sigmoid(z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueEntry {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub retained: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PValueReport {
    /// Intercept first, then the candidate features of the full fit.
    pub entries: Vec<PValueEntry>,
}

impl PValueReport {
    pub fn retained_names(&self) -> Vec<&str> {
        self.entries.iter().skip(1).filter(|e| e.retained).map(|e| e.name.as_str()).collect()
    }
}

/// Two-sided p-value of a Wald statistic.
pub fn wald_p_value(z: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * normal.cdf(-z.abs())).clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct IrlsFit {
    /// Intercept first.
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

fn design_row(x: &Matrix, cols: &[usize], i: usize, out: &mut [f64]) {
    out[0] = 1.0;
    let r = x.row(i);
    for (k, &c) in cols.iter().enumerate() {
        out[k + 1] = r[c];
    }
}

fn mean_loss(x: &Matrix, cols: &[usize], y: &[u8], beta: &[f64]) -> f64 {
    let mut row = vec![0.0; beta.len()];
    let mut total = 0.0;
    for i in 0..x.rows {
        design_row(x, cols, i, &mut row);
        let z: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        total += logit_loss(z, f64::from(y[i]));
    }
    total / x.rows as f64
}

/// Newton iterations on the mean log-loss with a small ridge term. On a
/// singular information matrix the ridge grows tenfold up to 1e-2.
pub fn irls(x: &Matrix, cols: &[usize], y: &[u8], params: &LogisticParams) -> Result<IrlsFit, LearnerError> {
    let k = cols.len() + 1;
    let n = x.rows as f64;
    let mut beta = vec![0.0; k];
    let mut ridge = params.ridge;
    let mut loss = mean_loss(x, cols, y, &beta);
    let mut converged = false;
    let mut iterations = 0;
    let mut row = vec![0.0; k];
    let information = |beta: &[f64], row: &mut Vec<f64>| {
        let mut h = DMatrix::<f64>::zeros(k, k);
        let mut g = DVector::<f64>::zeros(k);
        for i in 0..x.rows {
            design_row(x, cols, i, row);
            let z: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
            let p = sigmoid(z);
            let w = p * (1.0 - p);
            let r = f64::from(y[i]) - p;
            for a in 0..k {
                g[a] += r * row[a];
                let wa = w * row[a];
                if wa != 0.0 {
                    for b in 0..=a {
                        h[(a, b)] += wa * row[b];
                    }
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        (h / n, g / n)
    };
    let solve = |h: &DMatrix<f64>, ridge: &mut f64| -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, LearnerError> {
        loop {
            let damped = h + DMatrix::<f64>::identity(k, k) * *ridge;
            if let Some(ch) = damped.cholesky() {
                return Ok(ch);
            }
            if *ridge >= 1e-2 {
                return Err(LearnerError::Singular { damping: *ridge });
            }
            *ridge = if *ridge == 0.0 { 1e-8 } else { (*ridge * 10.0).min(1e-2) };
        }
    };
    while iterations < params.max_iterations {
        iterations += 1;
        let (h, g) = information(&beta, &mut row);
        let ch = solve(&h, &mut ridge)?;
        let penalized = g - DVector::from_column_slice(&beta) * ridge;
        let step = ch.solve(&penalized);
        let mut scale = 1.0;
        let mut candidate;
        let mut new_loss;
        loop {
            candidate = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect::<Vec<_>>();
            new_loss = mean_loss(x, cols, y, &candidate);
            if new_loss <= loss + 1e-15 || scale < 1e-6 {
                break;
            }
            scale *= 0.5;
        }
        beta = candidate;
        let change = (loss - new_loss).abs();
        loss = new_loss;
        if change < params.tolerance {
            converged = true;
            break;
        }
    }
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("logistic fit stopped at the iteration limit ({iterations})"));
    }
    if loss < 1e-6 {
        warnings.push("training data look perfectly separated; coefficients are held finite by damping".into());
    }
    let (h, _) = information(&beta, &mut row);
    let ch = solve(&h, &mut ridge)?;
    let cov = ch.inverse() / n;
    let std_errors = (0..k).map(|a| cov[(a, a)].max(0.0).sqrt()).collect();
    Ok(IrlsFit { beta, std_errors, converged, iterations, warnings })
}

/// Full fit, Wald p-values, then a refit on features with p below the
/// threshold. The intercept is always kept.
pub fn fit_logistic_pfiltered(train: &Dataset, spec: &ModelSpec) -> Result<(FittedModel, PValueReport), LearnerError> {
    spec.validate()?;
    let super::Hyperparameters::Logistic(params) = &spec.params else {
        return Err(LearnerError::WrongInput { family: spec.family, expected: "sequence" });
    };
    let n_positive = super::check_labels(&train.y)?;
    if n_positive == 0 || n_positive == train.len() {
        return Err(LearnerError::SingleClass);
    }
    let scaler = if params.standardize {
        Scaler::fit(&train.x, &train.dictionary)
    } else {
        Scaler::identity(train.x.cols)
    };
    let x = scaler.transform(&train.x);
    let candidates: Vec<usize> = if params.reference_coding {
        train.dictionary.reference_coded()
    } else {
        (0..train.x.cols).collect()
    };

    let full = irls(&x, &candidates, &train.y, params)?;
    let mut entries = Vec::with_capacity(candidates.len() + 1);
    let names = std::iter::once("(intercept)".to_string()).chain(candidates.iter().map(|&c| train.dictionary.columns[c].name.clone()));
    for (a, name) in names.enumerate() {
        let se = full.std_errors[a];
        let z = if se > 0.0 { full.beta[a] / se } else { 0.0 };
        let p_value = if se > 0.0 { wald_p_value(z) } else { 1.0 };
        entries.push(PValueEntry { name, estimate: full.beta[a], std_error: se, z, p_value, retained: a == 0 || p_value < params.p_threshold });
    }
    let retained: Vec<usize> = candidates.iter().zip(&entries[1..]).filter(|(_, e)| e.retained).map(|(&c, _)| c).collect();
    let refit = irls(&x, &retained, &train.y, params)?;

    let mut warnings = full.warnings.clone();
    warnings.extend(refit.warnings.iter().cloned());
    let model = LogisticModel { columns: retained, coefficients: refit.beta, converged: refit.converged, iterations: refit.iterations };
    let fitted = FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        fingerprint: train.dictionary.fingerprint(),
        dictionary: train.dictionary.clone(),
        scaler: Some(scaler),
        sequence_scaler: None,
        metadata: TrainingMetadata { n_train: train.len(), n_positive, warnings, ..Default::default() },
        model: Model::Logistic(model),
    };
    Ok((fitted, PValueReport { entries }))
}

#[cfg(test)]
mod tests {
    use super::super::tests::toy_dataset;
    use super::super::{Family, Hyperparameters};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(params: LogisticParams) -> ModelSpec {
        ModelSpec::new(Hyperparameters::Logistic(params), 0)
    }

    fn simulate(n: usize, beta: &[f64], noise_cols: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = beta.len() - 1 + noise_cols;
        let mut x = Matrix::zeros(n, cols);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row_mut(i);
            for v in row.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
            let z = beta[0] + beta[1..].iter().zip(row.iter()).map(|(b, v)| b * v).sum::<f64>();
            y.push(u8::from(rng.gen::<f64>() < sigmoid(z)));
        }
        toy_dataset(x, y)
    }

    #[test]
    fn z_of_196_gives_five_percent() {
        assert!((wald_p_value(1.96) - 0.05).abs() < 1e-3);
        assert!((wald_p_value(-1.96) - 0.05).abs() < 1e-3);
        assert_eq!(wald_p_value(0.0), 1.0);
    }

    #[test]
    fn recovers_known_coefficients() {
        let data = simulate(20_000, &[-1.0, 2.0], 0, 11);
        let params = LogisticParams { standardize: false, ..Default::default() };
        let (model, report) = fit_logistic_pfiltered(&data, &spec(params)).unwrap();
        let Model::Logistic(m) = &model.model else { panic!() };
        assert!((m.coefficients[0] + 1.0).abs() < 0.1, "{:?}", m.coefficients);
        assert!((m.coefficients[1] - 2.0).abs() < 0.1, "{:?}", m.coefficients);
        assert!(m.converged);
        assert!(report.entries.iter().all(|e| (0.0..=1.0).contains(&e.p_value)));
    }

    #[test]
    fn noise_feature_is_filtered_out() {
        let data = simulate(5_000, &[0.5, 1.5], 1, 3);
        let (model, report) = fit_logistic_pfiltered(&data, &spec(LogisticParams::default())).unwrap();
        assert!(report.entries[0].retained);
        let Model::Logistic(m) = &model.model else { panic!() };
        assert_eq!(m.columns, [0], "{report:?}");
    }

    #[test]
    fn all_zero_coefficients_score_half() {
        let m = LogisticModel { columns: vec![0, 1], coefficients: vec![0.0, 0.0, 0.0], converged: true, iterations: 0 };
        assert_eq!(m.predict(&[3.0, -7.0]), 0.5);
    }

    #[test]
    fn separated_data_stay_finite_with_warning() {
        let x = Matrix::from_rows(1, &[[-2.0], [-1.0], [1.0], [2.0]]);
        let data = toy_dataset(x, vec![0, 0, 1, 1]);
        let (model, _) = fit_logistic_pfiltered(&data, &spec(LogisticParams { p_threshold: 1.0, ..Default::default() })).unwrap();
        let Model::Logistic(m) = &model.model else { panic!() };
        assert!(m.coefficients.iter().all(|b| b.is_finite()));
        assert!(!model.metadata.warnings.is_empty());
    }

    #[test]
    fn single_class_rejected() {
        let data = toy_dataset(Matrix::from_rows(1, &[[0.0], [1.0]]), vec![1, 1]);
        assert!(matches!(fit_logistic_pfiltered(&data, &ModelSpec::default_for(Family::Logistic, 0)), Err(LearnerError::SingleClass)));
    }

    #[test]
    fn rescaled_inputs_keep_ranking_after_refit() {
        let data = simulate(600, &[0.2, 1.0, -0.7], 0, 9);
        let params = LogisticParams { standardize: false, p_threshold: 1.0, ..Default::default() };
        let (a, _) = fit_logistic_pfiltered(&data, &spec(params.clone())).unwrap();
        let mut scaled = data.clone();
        scaled.x.data.iter_mut().for_each(|v| *v *= 3.5);
        let (b, _) = fit_logistic_pfiltered(&scaled, &spec(params)).unwrap();
        let sa = a.predict_dataset(&data).unwrap();
        let sb = b.predict_dataset(&scaled).unwrap();
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&i, &j| s[i].total_cmp(&s[j]).then(i.cmp(&j)));
            idx
        };
        assert_eq!(order(&sa), order(&sb));
    }
}
