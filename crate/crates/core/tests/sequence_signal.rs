//! The recurrent hybrid should pick up a purely temporal signal (purchase
//! gaps that lengthen before a dropout) that phase-level static features
//! cannot see.

use adherence::eval::{balance_training, roc_auc, stratified_kfold, Samples};
use adherence::features::{build_phase_features, transaction_sequences, Dataset, FeatureConfig, Matrix, SequenceTable};
use adherence::learners::{Family, ModelSpec};
use adherence::phases::{label_cohort, PhaseConfig};
use adherence::sim::{simulate_cohort, RiskSignal, SimConfig};

const PATIENTS: usize = 4_000;
const HORIZON: i64 = 360;

fn sequences(sim: &SimConfig) -> SequenceTable {
    let (store, _) = simulate_cohort(sim).unwrap();
    let labeled = label_cohort(&store, &PhaseConfig::default());
    let cfg = FeatureConfig::default();
    let table = build_phase_features(&store, &labeled.phases, &cfg);
    transaction_sequences(&store, &labeled.phases, table, &cfg)
}

/// Static phase features of each transaction sample, as a tabular dataset
/// aligned row for row with the sequence samples.
fn static_view(table: &SequenceTable, samples: &[adherence::features::SequenceSample]) -> Dataset {
    let cols = table.phases.dictionary.len();
    let mut x = Matrix::zeros(samples.len(), cols);
    for (i, s) in samples.iter().enumerate() {
        x.row_mut(i).copy_from_slice(table.static_features(s));
    }
    Dataset {
        dictionary: table.phases.dictionary.clone(),
        x,
        y: samples.iter().map(|s| s.label).collect(),
        groups: samples.iter().map(|s| s.patient_id.clone()).collect(),
    }
}

/// Held-out AUC of (recurrent hybrid, logistic on static features) on one
/// patient-grouped split.
fn held_out(sim: &SimConfig) -> (f64, f64) {
    let table = sequences(sim);
    let seq = table.dataset(HORIZON);
    let tab = static_view(&table, &seq.samples);
    let labels = seq.labels();
    let folds = stratified_kfold(&labels, &seq.groups(), 4, 17).unwrap();
    let (train, test) = (folds.train_rows(0), folds.test_rows(0));
    let test_labels: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
    let train_labels: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let balanced: Vec<usize> = balance_training(&train_labels, 5).unwrap().into_iter().map(|k| train[k]).collect();

    let lstm_model = seq.subset(&balanced).fit(&ModelSpec::default_for(Family::LstmHybrid, 1)).unwrap();
    let lstm = roc_auc(&seq.subset(&test).score(&lstm_model).unwrap(), &test_labels).unwrap();
    let logistic_model = tab.subset(&balanced).fit(&ModelSpec::default_for(Family::Logistic, 1)).unwrap();
    let logistic = roc_auc(&tab.subset(&test).score(&logistic_model).unwrap(), &test_labels).unwrap();
    (lstm, logistic)
}

#[test]
fn recurrent_model_beats_static_baseline_on_temporal_signal() {
    let sim = SimConfig { risk_signal: RiskSignal::zero(), ..SimConfig::realistic(PATIENTS, 31) };
    assert!(sim.late_gap_days > 0);
    let (lstm, logistic) = held_out(&sim);
    println!("temporal signal only: lstm {lstm:.3}, static logistic {logistic:.3}");
    assert!(lstm >= logistic, "lstm {lstm:.3} < static logistic {logistic:.3}");
}
