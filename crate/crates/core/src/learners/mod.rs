//! The five model families behind one fit/score interface.
//!
//! Tabular families train on a [`Dataset`]; the recurrent hybrid trains on a
//! [`SequenceDataset`]. Every fitted model carries its input scaling and the
//! fingerprint of the feature dictionary it was trained against.

pub mod gbt;
pub mod gradcheck;
pub mod logistic;
pub mod lstm;
pub mod mlp;
pub mod tree;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::Provenance;
use crate::features::{Dataset, FeatureDictionary, Scaler, SequenceDataset, SequenceScaler};

pub use gbt::{GbtModel, GbtParams};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use logistic::{fit_logistic_pfiltered, wald_p_value, LogisticModel, LogisticParams, PValueEntry, PValueReport};
pub use lstm::{LstmModel, LstmParams};
pub use mlp::{MlpModel, MlpParams};
pub use tree::{TreeModel, TreeParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logistic,
    DecisionTree,
    GradientBoosting,
    Mlp,
    LstmHybrid,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Logistic, Family::DecisionTree, Family::GradientBoosting, Family::Mlp, Family::LstmHybrid];

    /// Short name used on the command line and in reports.
    pub fn short_name(self) -> &'static str {
        match self {
            Family::Logistic => "logistic",
            Family::DecisionTree => "tree",
            Family::GradientBoosting => "gbt",
            Family::Mlp => "mlp",
            Family::LstmHybrid => "lstm",
        }
    }

    pub fn is_sequence(self) -> bool {
        self == Family::LstmHybrid
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.short_name() == s)
            .ok_or_else(|| format!("unknown model '{s}' (expected logistic, tree, gbt, mlp or lstm)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyperparameters {
    Logistic(LogisticParams),
    DecisionTree(TreeParams),
    GradientBoosting(GbtParams),
    Mlp(MlpParams),
    LstmHybrid(LstmParams),
}

impl Hyperparameters {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Logistic => Hyperparameters::Logistic(LogisticParams::default()),
            Family::DecisionTree => Hyperparameters::DecisionTree(TreeParams::default()),
            Family::GradientBoosting => Hyperparameters::GradientBoosting(GbtParams::default()),
            Family::Mlp => Hyperparameters::Mlp(MlpParams::default()),
            Family::LstmHybrid => Hyperparameters::LstmHybrid(LstmParams::default()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Hyperparameters::Logistic(_) => Family::Logistic,
            Hyperparameters::DecisionTree(_) => Family::DecisionTree,
            Hyperparameters::GradientBoosting(_) => Family::GradientBoosting,
            Hyperparameters::Mlp(_) => Family::Mlp,
            Hyperparameters::LstmHybrid(_) => Family::LstmHybrid,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        match self {
            Hyperparameters::Logistic(p) => p.validate(),
            Hyperparameters::DecisionTree(p) => p.validate(),
            Hyperparameters::GradientBoosting(p) => p.validate(),
            Hyperparameters::Mlp(p) => p.validate(),
            Hyperparameters::LstmHybrid(p) => p.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub params: Hyperparameters,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(params: Hyperparameters, seed: u64) -> Self {
        ModelSpec { family: params.family(), params, seed }
    }

    pub fn default_for(family: Family, seed: u64) -> Self {
        ModelSpec::new(Hyperparameters::default_for(family), seed)
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let mut errors = self.params.validate();
        if self.params.family() != self.family {
            errors.push(format!("hyperparameters for {} given to {}", self.params.family(), self.family));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(LearnerError::InvalidHyperparameters(errors.join("; ")))
        }
    }
}

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),
    #[error("training data is empty")]
    EmptyTrain,
    #[error("training data has a single label")]
    SingleClass,
    #[error("information matrix singular even with damping {damping}")]
    Singular { damping: f64 },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("feature fingerprint mismatch: model expects {expected}, input has {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{family} models score {expected} inputs")]
    WrongInput { family: Family, expected: &'static str },
    #[error("model file {path}: {reason}")]
    Load { path: PathBuf, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Logistic(LogisticModel),
    DecisionTree(TreeModel),
    GradientBoosting(GbtModel),
    Mlp(MlpModel),
    LstmHybrid(LstmModel),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub n_train: usize,
    pub n_positive: usize,
    pub fold: Option<usize>,
    pub balancing_seed: Option<u64>,
    /// Non-fatal fit diagnostics, such as a logistic fit that hit the
    /// iteration limit.
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub fingerprint: String,
    pub dictionary: FeatureDictionary,
    pub scaler: Option<Scaler>,
    pub sequence_scaler: Option<SequenceScaler>,
    pub metadata: TrainingMetadata,
    pub model: Model,
}

fn check_labels(y: &[u8]) -> Result<usize, LearnerError> {
    if y.is_empty() {
        return Err(LearnerError::EmptyTrain);
    }
    Ok(y.iter().filter(|&&l| l == 1).count())
}

/// Fits a tabular family. Logistic regression goes through the two-stage
/// p-value filter; its report is dropped here.
pub fn fit(spec: &ModelSpec, train: &Dataset) -> Result<FittedModel, LearnerError> {
    spec.validate()?;
    let n_positive = check_labels(&train.y)?;
    let metadata = TrainingMetadata { n_train: train.len(), n_positive, ..Default::default() };
    let wrap = |model: Model, scaler: Option<Scaler>, metadata: TrainingMetadata| FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        fingerprint: train.dictionary.fingerprint(),
        dictionary: train.dictionary.clone(),
        scaler,
        sequence_scaler: None,
        metadata,
        model,
    };
    match &spec.params {
        Hyperparameters::Logistic(_) => fit_logistic_pfiltered(train, spec).map(|(m, _)| m),
        Hyperparameters::DecisionTree(p) => Ok(wrap(Model::DecisionTree(tree::fit_cart(&train.x, &train.y, p)), None, metadata)),
        Hyperparameters::GradientBoosting(p) => Ok(wrap(Model::GradientBoosting(gbt::fit_gbt(&train.x, &train.y, p)), None, metadata)),
        Hyperparameters::Mlp(p) => {
            let scaler = Scaler::fit(&train.x, &train.dictionary);
            let x = scaler.transform(&train.x);
            let model = mlp::fit_mlp(&x, &train.y, p, spec.seed)?;
            Ok(wrap(Model::Mlp(model), Some(scaler), metadata))
        }
        Hyperparameters::LstmHybrid(_) => Err(LearnerError::WrongInput { family: Family::LstmHybrid, expected: "sequence" }),
    }
}

/// Fits the recurrent hybrid on per-transaction samples.
pub fn fit_sequences(spec: &ModelSpec, train: &SequenceDataset) -> Result<FittedModel, LearnerError> {
    spec.validate()?;
    let Hyperparameters::LstmHybrid(p) = &spec.params else {
        return Err(LearnerError::WrongInput { family: spec.family, expected: "tabular" });
    };
    let labels = train.labels();
    let n_positive = check_labels(&labels)?;
    let scaler = SequenceScaler::fit(train);
    let model = lstm::fit_lstm_hybrid(train, &scaler, p, spec.seed)?;
    let dictionary = train.table.phases.dictionary.clone();
    Ok(FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        spec: spec.clone(),
        fingerprint: dictionary.fingerprint(),
        dictionary,
        scaler: None,
        sequence_scaler: Some(scaler),
        metadata: TrainingMetadata { n_train: train.len(), n_positive, ..Default::default() },
        model: Model::LstmHybrid(model),
    })
}

impl FittedModel {
    pub fn family(&self) -> Family {
        self.spec.family
    }

    fn check_fingerprint(&self, found: &str) -> Result<(), LearnerError> {
        if found == self.fingerprint {
            Ok(())
        } else {
            Err(LearnerError::FingerprintMismatch { expected: self.fingerprint.clone(), found: found.to_string() })
        }
    }

    /// Risk for one unscaled feature row encoded under the dictionary with
    /// fingerprint `fingerprint`.
    pub fn predict_risk(&self, fingerprint: &str, row: &[f64]) -> Result<f64, LearnerError> {
        self.check_fingerprint(fingerprint)?;
        let mut scaled;
        let row = match &self.scaler {
            Some(s) => {
                scaled = row.to_vec();
                s.transform_row(&mut scaled);
                &scaled[..]
            }
            None => row,
        };
        let p = match &self.model {
            Model::Logistic(m) => m.predict(row),
            Model::DecisionTree(m) => m.predict(row),
            Model::GradientBoosting(m) => m.predict(row),
            Model::Mlp(m) => m.predict(row),
            Model::LstmHybrid(_) => return Err(LearnerError::WrongInput { family: Family::LstmHybrid, expected: "sequence" }),
        };
        Ok(p)
    }

    pub fn predict_dataset(&self, data: &Dataset) -> Result<Vec<f64>, LearnerError> {
        let fp = data.dictionary.fingerprint();
        (0..data.x.rows).map(|i| self.predict_risk(&fp, data.x.row(i))).collect()
    }

    pub fn predict_sequences(&self, data: &SequenceDataset) -> Result<Vec<f64>, LearnerError> {
        self.check_fingerprint(&data.table.phases.dictionary.fingerprint())?;
        let (Model::LstmHybrid(m), Some(scaler)) = (&self.model, &self.sequence_scaler) else {
            return Err(LearnerError::WrongInput { family: self.family(), expected: "tabular" });
        };
        Ok(m.predict_dataset(data, scaler))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("models serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Writes the provenance comment line followed by the model JSON.
    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<(), LearnerError> {
        let body = format!("{}{}\n", provenance.comment_line(), self.to_json());
        std::fs::write(path, body).map_err(|e| LearnerError::Load { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, LearnerError> {
        let err = |reason: String| LearnerError::Load { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let json: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
        let model = FittedModel::from_json(&json).map_err(|e| err(e.to_string()))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(err(format!("format version {} not supported", model.format_version)));
        }
        Ok(model)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy of logit `z` against label `y`.
pub(crate) fn logit_loss(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Adam state over a flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct Adam {
    rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub(crate) fn new(n: usize, rate: f64) -> Self {
        Adam { rate, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::{ColumnKind, FeatureColumn, Matrix};

    pub(crate) fn toy_dataset(x: Matrix, y: Vec<u8>) -> Dataset {
        let dictionary = FeatureDictionary {
            columns: (0..x.cols).map(|i| FeatureColumn { name: format!("x{i}"), kind: ColumnKind::Continuous }).collect(),
        };
        let groups = (0..y.len()).map(|i| format!("P{i}")).collect();
        Dataset { dictionary, x, y, groups }
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.short_name().parse::<Family>().unwrap(), f);
        }
        assert!("svm".parse::<Family>().is_err());
    }

    #[test]
    fn mismatched_fingerprint_rejected() {
        let x = Matrix::from_rows(1, &[[0.0], [1.0], [2.0], [3.0]]);
        let data = toy_dataset(x, vec![0, 0, 1, 1]);
        let model = fit(&ModelSpec::default_for(Family::DecisionTree, 1), &data).unwrap();
        assert!(model.predict_risk(&data.dictionary.fingerprint(), &[2.5]).is_ok());
        assert!(matches!(model.predict_risk("0000", &[2.5]), Err(LearnerError::FingerprintMismatch { .. })));
    }

    #[test]
    fn lstm_rejects_tabular_fit() {
        let data = toy_dataset(Matrix::from_rows(1, &[[0.0], [1.0]]), vec![0, 1]);
        assert!(matches!(fit(&ModelSpec::default_for(Family::LstmHybrid, 1), &data), Err(LearnerError::WrongInput { .. })));
    }

    #[test]
    fn json_round_trip_reproduces_scores() {
        let rows: Vec<[f64; 2]> = (0..200).map(|i| [(i % 17) as f64 * 0.3, (i % 5) as f64]).collect();
        let y = rows.iter().map(|r| u8::from(r[0] + r[1] > 4.0)).collect();
        let data = toy_dataset(Matrix::from_rows(2, &rows), y);
        for family in [Family::Logistic, Family::DecisionTree, Family::GradientBoosting, Family::Mlp] {
            let mut spec = ModelSpec::default_for(family, 3);
            if let Hyperparameters::Mlp(p) = &mut spec.params {
                p.epochs = 5;
            }
            let model = fit(&spec, &data).unwrap();
            let back = FittedModel::from_json(&model.to_json()).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.predict_dataset(&data).unwrap(), model.predict_dataset(&data).unwrap());

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.model");
            model.save(&path, &Provenance::unconfigured(3)).unwrap();
            assert!(std::fs::read_to_string(&path).unwrap().starts_with("# adherence"));
            assert_eq!(FittedModel::load(&path).unwrap(), model);
        }
    }

    #[test]
    fn stable_logistic_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }
}
