//! The command-line stages as library calls. Every stage reads the files
//! the previous one wrote, so any stage can be rerun on its own.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::claims::{load_claims, ClaimsError, ClaimsPaths, ClaimsStore};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{balance_training, derive_seed, evaluate_tables, grid_search, write_report, EvalError, EvalReport, Samples};
use crate::features::{
    build_phase_features, read_features_csv, read_sequences_jsonl, transaction_sequences, write_features_csv, write_sequences_jsonl, FeatureFileError,
    Padding, SequenceDataset, SequenceTable,
};
use crate::learners::{fit_logistic_pfiltered, Family, FittedModel, LearnerError, ModelSpec, PValueReport};
use crate::phases::oracle::{oracle_check, OracleReport};
use crate::phases::{label_cohort, read_phases_csv, write_phases_csv, PhaseFileError};
use crate::provenance::Provenance;
use crate::sim::{emit_claims, simulate_cohort, SimError};

pub const PHASES_FILE: &str = "phases.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";
pub const SCORES_FILE: &str = "scores.csv";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Claims(#[from] ClaimsError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Phases(#[from] PhaseFileError),
    #[error(transparent)]
    Features(#[from] FeatureFileError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("oracle disagreement on {} rows", .0.mismatches.len())]
    OracleMismatch(Box<OracleReport>),
    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    /// Stable category name for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Claims(_) => "claims",
            PipelineError::Simulation(_) => "simulation",
            PipelineError::Phases(_) => "phases",
            PipelineError::Features(_) => "features",
            PipelineError::Learner(_) => "learner",
            PipelineError::Eval(_) => "evaluation",
            PipelineError::Io { .. } => "io",
            PipelineError::OracleMismatch(_) => "oracle_mismatch",
            PipelineError::Usage(_) => "usage",
        }
    }

    pub fn details(&self) -> Vec<String> {
        match self {
            PipelineError::Config(e) => e.details(),
            PipelineError::OracleMismatch(r) => r.mismatches.clone(),
            other => vec![other.to_string()],
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })
}

fn write_file(path: &Path, body: &str) -> Result<PathBuf, PipelineError> {
    std::fs::write(path, body).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
    Ok(path.to_path_buf())
}

/// Simulated cohort plus ground truth into `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let (store, truth) = simulate_cohort(&cfg.simulation)?;
    log::info!("simulated {} patients, {} dispensings", store.len(), store.n_dispensings());
    Ok(emit_claims(&store, &truth, out, &cfg.provenance())?)
}

pub fn load_store(cfg: &RunConfig, claims: &Path) -> Result<ClaimsStore, PipelineError> {
    let (store, summary) = load_claims(&ClaimsPaths::in_dir(claims), cfg.window)?;
    if summary.dropped() > 0 {
        log::warn!("dropped {} out-of-window events while loading {}", summary.dropped(), claims.display());
    }
    Ok(store)
}

/// Labeled phases of the claims in `claims` into `out/phases.csv`.
pub fn phases(cfg: &RunConfig, claims: &Path, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let store = load_store(cfg, claims)?;
    let table = label_cohort(&store, &cfg.phases);
    log::info!("{} phases from {} patients", table.phases.len(), store.len());
    create_dir(out)?;
    let path = out.join(PHASES_FILE);
    write_phases_csv(&table.phases, &cfg.phases.horizons, &path, &cfg.provenance())?;
    Ok(vec![path])
}

/// Phase features and transaction sequences into `out`.
pub fn features(cfg: &RunConfig, claims: &Path, phases_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let store = load_store(cfg, claims)?;
    let phases = read_phases_csv(&phases_dir.join(PHASES_FILE))?;
    let table = build_phase_features(&store, &phases, &cfg.features);
    create_dir(out)?;
    let prov = cfg.provenance();
    let features_path = out.join(FEATURES_FILE);
    write_features_csv(&table, &features_path, &prov)?;
    let sequences = transaction_sequences(&store, &phases, table, &cfg.features);
    let sequences_path = out.join(SEQUENCES_FILE);
    write_sequences_jsonl(&sequences, FEATURES_FILE, &sequences_path, &prov)?;
    log::info!("{} phase rows, {} transaction samples", sequences.phases.rows.len(), sequences.samples.len());
    Ok(vec![features_path, sequences_path])
}

fn load_sequences(features_dir: &Path, padding: Option<Padding>) -> Result<SequenceTable, PipelineError> {
    let table = read_sequences_jsonl(&features_dir.join(SEQUENCES_FILE))?;
    Ok(match padding {
        Some(p) if p != table.padding => table.with_padding(p),
        _ => table,
    })
}

/// Balances all labeled rows, picks hyperparameters by grid search when the
/// family has a grid, and fits once on the balanced rows.
pub fn train_final<S: Samples>(data: &S, family: Family, cfg: &RunConfig, horizon: i64) -> Result<FittedModel, PipelineError> {
    let family_index = Family::ALL.iter().position(|&f| f == family).unwrap() as u64;
    let balancing_seed = derive_seed(cfg.seed, &[horizon as u64, u64::MAX, 1]);
    let rows = balance_training(&data.labels(), balancing_seed)?;
    let train = data.subset(&rows);
    let grid = cfg.evaluation.grid(family)?;
    let params = if grid.len() > 1 {
        grid_search(&grid, &train, cfg.evaluation.inner_folds, derive_seed(cfg.seed, &[horizon as u64, u64::MAX, 2, family_index]))?.best.params
    } else {
        grid[0].clone()
    };
    let spec = ModelSpec::new(params, derive_seed(cfg.seed, &[horizon as u64, u64::MAX, 3, family_index]));
    let mut model = train.fit(&spec)?;
    model.metadata.balancing_seed = Some(balancing_seed);
    Ok(model)
}

fn pvalue_csv(report: &PValueReport, provenance: &Provenance) -> String {
    let mut out = provenance.comment_line();
    out.push_str("name,estimate,std_error,z,p_value,retained\n");
    for e in &report.entries {
        out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6e},{}\n", e.name, e.estimate, e.std_error, e.z, e.p_value, u8::from(e.retained)));
    }
    out
}

/// One model per family and horizon, saved as `{model}_{horizon}.model`.
/// Logistic fits also write their coefficient p-values.
pub fn train(cfg: &RunConfig, features_dir: &Path, padding: Option<Padding>, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let table = read_features_csv(&features_dir.join(FEATURES_FILE))?;
    let sequences = if cfg.evaluation.families.iter().any(|f| f.is_sequence()) { Some(load_sequences(features_dir, padding)?) } else { None };
    create_dir(out)?;
    let prov = cfg.provenance();
    let mut written = Vec::new();
    for &family in &cfg.evaluation.families {
        for &h in &cfg.evaluation.horizons {
            let model = if family.is_sequence() {
                let seq = sequences.as_ref().expect("loaded above");
                train_final(&seq.dataset(h), family, cfg, h)?
            } else {
                let data = table.dataset(h);
                let model = train_final(&data, family, cfg, h)?;
                if family == Family::Logistic {
                    // refit through the filter to keep its report
                    let rows = balance_training(&data.y, model.metadata.balancing_seed.expect("set by train_final"))?;
                    let (_, report) = fit_logistic_pfiltered(&data.subset(&rows), &model.spec)?;
                    written.push(write_file(&out.join(format!("{family}_{h}_pvalues.csv")), &pvalue_csv(&report, &prov))?);
                }
                model
            };
            let path = out.join(format!("{family}_{h}.model"));
            model.save(&path, &prov)?;
            log::info!("trained {family} at {h} days on {} rows", model.metadata.n_train);
            written.push(path);
        }
    }
    Ok(written)
}

/// Cross-validated benchmark over saved features.
pub fn evaluate(cfg: &RunConfig, features_dir: &Path, padding: Option<Padding>) -> Result<EvalReport, PipelineError> {
    let table = read_features_csv(&features_dir.join(FEATURES_FILE))?;
    let sequences = if cfg.evaluation.families.iter().any(|f| f.is_sequence()) { Some(load_sequences(features_dir, padding)?) } else { None };
    Ok(evaluate_tables(&table, sequences.as_ref(), &cfg.evaluation, cfg.seed)?)
}

pub fn evaluate_to(cfg: &RunConfig, features_dir: &Path, padding: Option<Padding>, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let report = evaluate(cfg, features_dir, padding)?;
    Ok(write_report(&report, out, &cfg.provenance(), cfg.svg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub patient_id: String,
    pub therapy: String,
    pub phase_start: String,
    /// Transaction date for the recurrent model; empty for phase-level models.
    pub transaction_date: String,
    pub risk: f64,
}

/// Scores new claims with a saved model: every phase for tabular models,
/// every transaction for the recurrent one.
pub fn score_rows(cfg: &RunConfig, model: &FittedModel, claims: &Path, padding: Option<Padding>) -> Result<Vec<ScoreRow>, PipelineError> {
    let store = load_store(cfg, claims)?;
    let labeled = label_cohort(&store, &cfg.phases);
    let mut fcfg = cfg.features.clone();
    if let Some(p) = padding {
        fcfg.padding = p;
    }
    let table = build_phase_features(&store, &labeled.phases, &fcfg);
    if model.family().is_sequence() {
        let seq = transaction_sequences(&store, &labeled.phases, table, &fcfg);
        let all = SequenceDataset { table: &seq, samples: seq.samples.clone() };
        let risks = model.predict_sequences(&all)?;
        Ok(all
            .samples
            .iter()
            .zip(risks)
            .map(|(s, risk)| {
                let row = &seq.phases.rows[s.phase_row];
                ScoreRow { patient_id: s.patient_id.clone(), therapy: row.therapy.to_string(), phase_start: row.start_date.to_string(), transaction_date: s.date.to_string(), risk }
            })
            .collect())
    } else {
        let fp = table.dictionary.fingerprint();
        table
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let risk = model.predict_risk(&fp, table.x.row(i))?;
                Ok(ScoreRow { patient_id: row.patient_id.clone(), therapy: row.therapy.to_string(), phase_start: row.start_date.to_string(), transaction_date: String::new(), risk })
            })
            .collect()
    }
}

pub fn score(cfg: &RunConfig, model_path: &Path, claims: &Path, padding: Option<Padding>, out: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let model = FittedModel::load(model_path)?;
    let rows = score_rows(cfg, &model, claims, padding)?;
    create_dir(out)?;
    let mut body = cfg.provenance().comment_line();
    body.push_str("patient_id,therapy,phase_start,transaction_date,risk\n");
    for r in &rows {
        body.push_str(&format!("{},{},{},{},{:.6}\n", r.patient_id, r.therapy, r.phase_start, r.transaction_date, r.risk));
    }
    log::info!("scored {} rows with {}", rows.len(), model_path.display());
    Ok(vec![write_file(&out.join(SCORES_FILE), &body)?])
}

/// Compares the phase engine with the reference labeler; mismatches are an
/// error carrying the report.
pub fn oracle(cfg: &RunConfig, claims: &Path) -> Result<OracleReport, PipelineError> {
    let store = load_store(cfg, claims)?;
    let report = oracle_check(&store, &cfg.phases);
    if report.passed() {
        Ok(report)
    } else {
        Err(PipelineError::OracleMismatch(Box::new(report)))
    }
}
