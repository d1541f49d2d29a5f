//! The cross-validated benchmark: every family at every horizon.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cv::{balance_training, derive_seed, expand_lattice, grid_search, stratified_kfold, Samples};
use super::metrics::{cap_at, cap_curve, mean, roc_auc, roc_curve, std_dev, thin};
use super::EvalError;
use crate::claims::ClaimsStore;
use crate::features::{build_phase_features, transaction_sequences, FeatureConfig, Padding, PhaseFeatureTable, SequenceTable};
use crate::learners::{Family, GbtParams, Hyperparameters, LogisticParams, LstmParams, MlpParams, ModelSpec, TreeParams};
use crate::phases::{label_cohort, PhaseConfig};

/// Field name -> candidate values, expanded as a cartesian product.
pub type Lattice = BTreeMap<String, Vec<serde_json::Value>>;

/// Hyperparameters used when a family has no grid (or as the base that a
/// grid varies).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDefaults {
    pub logistic: LogisticParams,
    pub decision_tree: TreeParams,
    pub gradient_boosting: GbtParams,
    pub mlp: MlpParams,
    pub lstm_hybrid: LstmParams,
}

impl ModelDefaults {
    pub fn params(&self, family: Family) -> Hyperparameters {
        match family {
            Family::Logistic => Hyperparameters::Logistic(self.logistic.clone()),
            Family::DecisionTree => Hyperparameters::DecisionTree(self.decision_tree.clone()),
            Family::GradientBoosting => Hyperparameters::GradientBoosting(self.gradient_boosting.clone()),
            Family::Mlp => Hyperparameters::Mlp(self.mlp.clone()),
            Family::LstmHybrid => Hyperparameters::LstmHybrid(self.lstm_hybrid.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub folds: usize,
    /// Folds of the grid search inside each outer training fold.
    pub inner_folds: usize,
    pub horizons: Vec<i64>,
    pub families: Vec<Family>,
    pub models: ModelDefaults,
    pub grids: BTreeMap<Family, Lattice>,
    /// Also run the recurrent model with the other padding mode.
    pub padding_ablation: bool,
    /// Curve points kept per model and horizon in roc.csv / cap.csv.
    pub curve_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let int = |v: &[i64]| v.iter().map(|&x| serde_json::Value::from(x)).collect::<Vec<_>>();
        let grids = BTreeMap::from([
            (Family::DecisionTree, Lattice::from([("max_depth".into(), int(&[4, 6, 8])), ("min_samples_leaf".into(), int(&[20, 50]))])),
            (Family::GradientBoosting, Lattice::from([("max_depth".into(), int(&[2, 3]))])),
        ]);
        EvalConfig {
            folds: 5,
            inner_folds: 3,
            horizons: vec![90, 180, 360],
            families: Family::ALL.to_vec(),
            models: ModelDefaults::default(),
            grids,
            padding_ablation: true,
            curve_points: 101,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.folds < 2 {
            e.push("evaluation.folds must be >= 2".into());
        }
        if self.inner_folds < 2 {
            e.push("evaluation.inner_folds must be >= 2".into());
        }
        if self.horizons.is_empty() {
            e.push("evaluation.horizons must not be empty".into());
        }
        if self.families.is_empty() {
            e.push("evaluation.families must not be empty".into());
        }
        if self.curve_points < 2 {
            e.push("evaluation.curve_points must be >= 2".into());
        }
        for family in Family::ALL {
            e.extend(self.models.params(family).validate());
        }
        for family in self.grids.keys() {
            if let Err(err) = self.grid(*family) {
                e.push(err.to_string());
            }
        }
        e
    }

    /// Candidate hyperparameters for `family`: its lattice over the
    /// configured defaults, or the defaults alone.
    pub fn grid(&self, family: Family) -> Result<Vec<Hyperparameters>, EvalError> {
        let base = self.models.params(family);
        match self.grids.get(&family) {
            Some(lattice) => expand_lattice(&base, lattice),
            None => Ok(vec![base]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub auc: f64,
    pub cap20: f64,
    pub cap40: f64,
    pub n_test: usize,
    pub n_train_balanced: usize,
}

/// Mean and sample standard deviation of each metric over folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub auc_mean: f64,
    pub auc_std: f64,
    pub cap20_mean: f64,
    pub cap20_std: f64,
    pub cap40_mean: f64,
    pub cap40_std: f64,
}

/// One family at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCell {
    pub family: Family,
    pub horizon: i64,
    /// Padding of the recurrent model's windows; `None` for tabular models.
    pub padding: Option<Padding>,
    pub folds: Vec<FoldResult>,
    /// Hyperparameters used in each outer fold.
    pub chosen: Vec<Hyperparameters>,
    /// Pooled out-of-fold ROC points, thinned.
    pub roc: Vec<(f64, f64)>,
    /// Pooled out-of-fold CAP points, thinned.
    pub cap: Vec<(f64, f64)>,
}

impl SuiteCell {
    pub fn summary(&self) -> Summary {
        let pick = |f: fn(&FoldResult) -> f64| self.folds.iter().map(f).collect::<Vec<_>>();
        let (auc, c20, c40) = (pick(|f| f.auc), pick(|f| f.cap20), pick(|f| f.cap40));
        Summary {
            auc_mean: mean(&auc),
            auc_std: std_dev(&auc),
            cap20_mean: mean(&c20),
            cap20_std: std_dev(&c20),
            cap40_mean: mean(&c40),
            cap40_std: std_dev(&c40),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PaddingRow {
    pub horizon: i64,
    pub zero: Summary,
    pub first: Summary,
}

impl PaddingRow {
    /// FirstDuplicate minus ZeroFill mean AUC.
    pub fn auc_delta(&self) -> f64 {
        self.first.auc_mean - self.zero.auc_mean
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    /// In configured family order, horizons ascending within a family.
    pub cells: Vec<SuiteCell>,
    /// Recurrent-model cells run with the other padding mode.
    pub ablation: Vec<SuiteCell>,
}

impl EvalReport {
    pub fn cell(&self, family: Family, horizon: i64) -> Option<&SuiteCell> {
        self.cells.iter().find(|c| c.family == family && c.horizon == horizon)
    }

    pub fn padding_rows(&self) -> Vec<PaddingRow> {
        self.ablation
            .iter()
            .filter_map(|other| {
                let main = self.cells.iter().find(|c| c.family == other.family && c.horizon == other.horizon)?;
                let (zero, first) = if other.padding == Some(Padding::FirstDuplicate) { (main, other) } else { (other, main) };
                Some(PaddingRow { horizon: other.horizon, zero: zero.summary(), first: first.summary() })
            })
            .collect()
    }
}

/// Outer cross-validation of one family on one horizon's samples.
fn cross_validate<S: Samples>(data: &S, family: Family, grid: &[Hyperparameters], cfg: &EvalConfig, seed: u64, horizon: i64) -> Result<(Vec<FoldResult>, Vec<Hyperparameters>, Vec<f64>), EvalError> {
    let labels = data.labels();
    // Fold assignment depends on the horizon only, so families share splits.
    let folds = stratified_kfold(&labels, &data.groups(), cfg.folds, derive_seed(seed, &[horizon as u64]))?;
    let family_index = Family::ALL.iter().position(|&f| f == family).unwrap() as u64;
    let per_fold = (0..cfg.folds)
        .into_par_iter()
        .map(|f| {
            let fold_seed = derive_seed(seed, &[horizon as u64, f as u64]);
            let test_rows = folds.test_rows(f);
            let train = data.subset(&folds.train_rows(f));
            let test = data.subset(&test_rows);
            let train = train.subset(&balance_training(&train.labels(), derive_seed(fold_seed, &[1]))?);
            let params = if grid.len() > 1 {
                grid_search(grid, &train, cfg.inner_folds, derive_seed(fold_seed, &[2, family_index]))?.best.params
            } else {
                grid[0].clone()
            };
            let spec = ModelSpec::new(params, derive_seed(fold_seed, &[3, family_index]));
            let model = train.fit(&spec)?;
            let scores = test.score(&model)?;
            let test_labels = test.labels();
            let curve = cap_curve(&scores, &test_labels)?;
            let result = FoldResult {
                fold: f,
                auc: roc_auc(&scores, &test_labels)?,
                cap20: cap_at(&curve, 0.2),
                cap40: cap_at(&curve, 0.4),
                n_test: test_rows.len(),
                n_train_balanced: train.labels().len(),
            };
            Ok((result, spec.params, test_rows, scores))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mut pooled = vec![0.0; labels.len()];
    let mut results = Vec::new();
    let mut chosen = Vec::new();
    for (result, params, rows, scores) in per_fold {
        for (r, s) in rows.into_iter().zip(scores) {
            pooled[r] = s;
        }
        results.push(result);
        chosen.push(params);
    }
    Ok((results, chosen, pooled))
}

fn run_cell<S: Samples>(data: &S, family: Family, horizon: i64, padding: Option<Padding>, cfg: &EvalConfig, seed: u64) -> Result<SuiteCell, EvalError> {
    let started = Instant::now();
    let grid = cfg.grid(family)?;
    let wrap = |e: EvalError| EvalError::Cell { family, horizon, source: Box::new(e) };
    let (folds, chosen, pooled) = cross_validate(data, family, &grid, cfg, seed, horizon).map_err(wrap)?;
    let labels = data.labels();
    let roc = thin(&roc_curve(&pooled, &labels).map_err(wrap)?, cfg.curve_points);
    let cap = thin(&cap_curve(&pooled, &labels).map_err(wrap)?.points(), cfg.curve_points);
    let cell = SuiteCell { family, horizon, padding, folds, chosen, roc, cap };
    log::info!(
        "{family} h{horizon}{}: auc {:.4} over {} rows in {:.1}s",
        padding.map(|p| format!(" ({p} padding)")).unwrap_or_default(),
        cell.summary().auc_mean,
        labels.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(cell)
}

/// Runs every configured family at every configured horizon over prepared
/// tables. `sequences` is required when the recurrent family is included.
pub fn evaluate_tables(phases: &PhaseFeatureTable, sequences: Option<&SequenceTable>, cfg: &EvalConfig, seed: u64) -> Result<EvalReport, EvalError> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(EvalError::InvalidConfig(errors));
    }
    if let Some(&h) = cfg.horizons.iter().find(|h| !phases.horizons.contains(h)) {
        return Err(EvalError::MissingHorizon(h));
    }
    let mut report = EvalReport { seed, ..Default::default() };
    for &family in &cfg.families {
        for &horizon in &cfg.horizons {
            if family.is_sequence() {
                let table = sequences.ok_or(EvalError::MissingSequences)?;
                report.cells.push(run_cell(&table.dataset(horizon), family, horizon, Some(table.padding), cfg, seed)?);
                if cfg.padding_ablation {
                    let other = match table.padding {
                        Padding::ZeroFill => Padding::FirstDuplicate,
                        Padding::FirstDuplicate => Padding::ZeroFill,
                    };
                    let swapped = table.with_padding(other);
                    report.ablation.push(run_cell(&swapped.dataset(horizon), family, horizon, Some(other), cfg, seed)?);
                }
            } else {
                report.cells.push(run_cell(&phases.dataset(horizon), family, horizon, None, cfg, seed)?);
            }
        }
    }
    Ok(report)
}

/// Labels, encodes and evaluates a claims store end to end.
pub fn evaluate_suite(store: &ClaimsStore, phase_cfg: &PhaseConfig, feature_cfg: &FeatureConfig, cfg: &EvalConfig, seed: u64) -> Result<EvalReport, EvalError> {
    let labeled = label_cohort(store, phase_cfg);
    let table = build_phase_features(store, &labeled.phases, feature_cfg);
    let sequences = cfg.families.iter().any(|f| f.is_sequence()).then(|| transaction_sequences(store, &labeled.phases, table.clone(), feature_cfg));
    evaluate_tables(&table, sequences.as_ref(), cfg, seed)
}
