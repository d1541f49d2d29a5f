//! Patient-grouped stratified folds, training-set balancing and grid search.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean, roc_auc};
use super::EvalError;
use crate::features::{Dataset, SequenceDataset};
use crate::learners::{fit, fit_sequences, FittedModel, Hyperparameters, LearnerError, ModelSpec};

/// SplitMix64 finalizer over a seed and a path of indices, for independent
/// per-stage seeds.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut z = seed;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Fold index of every row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Folds {
    pub k: usize,
    pub fold_of_row: Vec<usize>,
}

impl Folds {
    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] != fold).collect()
    }
}

/// Deals patients into `k` folds: patients with any positive row first,
/// then the rest, each group shuffled and dealt round-robin, so every fold
/// gets the same share of positive patients up to one.
pub fn stratified_kfold(labels: &[u8], groups: &[String], k: usize, seed: u64) -> Result<Folds, EvalError> {
    if labels.len() != groups.len() {
        return Err(EvalError::LengthMismatch { scores: groups.len(), labels: labels.len() });
    }
    let mut positive: BTreeMap<&str, bool> = BTreeMap::new();
    for (g, &y) in groups.iter().zip(labels) {
        *positive.entry(g.as_str()).or_default() |= y == 1;
    }
    if k < 2 || positive.len() < k {
        return Err(EvalError::TooFewGroups { groups: positive.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<&str>, Vec<&str>) = (Vec::new(), Vec::new());
    for (&g, &p) in &positive {
        if p {
            pos.push(g);
        } else {
            neg.push(g);
        }
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let fold_of: BTreeMap<&str, usize> = pos.iter().chain(&neg).enumerate().map(|(i, &g)| (g, i % k)).collect();
    Ok(Folds { k, fold_of_row: groups.iter().map(|g| fold_of[g.as_str()]).collect() })
}

/// Keeps every minority row and an equal-sized seeded random subset of the
/// majority. Returns positions into `labels`, ascending.
pub fn balance_training(labels: &[u8], seed: u64) -> Result<Vec<usize>, EvalError> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::EmptyMinority);
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = index::sample(&mut rng, majority.len(), minority.len()).into_iter().map(|i| majority[i]).collect();
    keep.extend(minority);
    keep.sort_unstable();
    Ok(keep)
}

/// What cross-validation needs from a dataset, tabular or per-transaction.
pub trait Samples: Sized + Sync {
    fn labels(&self) -> Vec<u8>;
    fn groups(&self) -> Vec<String>;
    fn subset(&self, rows: &[usize]) -> Self;
    fn fit(&self, spec: &ModelSpec) -> Result<FittedModel, LearnerError>;
    fn score(&self, model: &FittedModel) -> Result<Vec<f64>, LearnerError>;
}

impl Samples for Dataset {
    fn labels(&self) -> Vec<u8> {
        self.y.clone()
    }

    fn groups(&self) -> Vec<String> {
        self.groups.clone()
    }

    fn subset(&self, rows: &[usize]) -> Self {
        Dataset::subset(self, rows)
    }

    fn fit(&self, spec: &ModelSpec) -> Result<FittedModel, LearnerError> {
        fit(spec, self)
    }

    fn score(&self, model: &FittedModel) -> Result<Vec<f64>, LearnerError> {
        model.predict_dataset(self)
    }
}

impl Samples for SequenceDataset<'_> {
    fn labels(&self) -> Vec<u8> {
        SequenceDataset::labels(self)
    }

    fn groups(&self) -> Vec<String> {
        SequenceDataset::groups(self)
    }

    fn subset(&self, rows: &[usize]) -> Self {
        SequenceDataset::subset(self, rows)
    }

    fn fit(&self, spec: &ModelSpec) -> Result<FittedModel, LearnerError> {
        fit_sequences(spec, self)
    }

    fn score(&self, model: &FittedModel) -> Result<Vec<f64>, LearnerError> {
        model.predict_sequences(self)
    }
}

/// Hyperparameter values in field-name order, for tie-breaking.
pub fn param_tuple(params: &Hyperparameters) -> Vec<f64> {
    fn flatten(v: &serde_json::Value, out: &mut Vec<f64>) {
        match v {
            serde_json::Value::Number(n) => out.push(n.as_f64().unwrap_or(f64::NAN)),
            serde_json::Value::Bool(b) => out.push(f64::from(u8::from(*b))),
            serde_json::Value::Object(m) => m.values().for_each(|x| flatten(x, out)),
            serde_json::Value::Array(a) => a.iter().for_each(|x| flatten(x, out)),
            _ => {}
        }
    }
    let mut out = Vec::new();
    flatten(&serde_json::to_value(params).expect("hyperparameters serialize"), &mut out);
    out
}

fn tuple_less(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).find(|(x, y)| x != y).map_or(a.len() < b.len(), |(x, y)| x < y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub params: Hyperparameters,
    pub fold_aucs: Vec<f64>,
    pub mean_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: ModelSpec,
    pub cells: Vec<GridCell>,
}

/// Mean AUC of `spec` over `k` grouped folds of `data`, each training fold
/// balanced.
pub fn cross_validated_auc<S: Samples>(spec: &ModelSpec, data: &S, k: usize, seed: u64) -> Result<Vec<f64>, EvalError> {
    let folds = stratified_kfold(&data.labels(), &data.groups(), k, derive_seed(seed, &[0]))?;
    (0..k)
        .into_par_iter()
        .map(|f| {
            let train = data.subset(&folds.train_rows(f));
            let test = data.subset(&folds.test_rows(f));
            let train = train.subset(&balance_training(&train.labels(), derive_seed(seed, &[1, f as u64]))?);
            let model = train.fit(spec)?;
            roc_auc(&test.score(&model)?, &test.labels())
        })
        .collect()
}

/// Scores every cell by inner k-fold mean AUC. The best mean wins; exact
/// ties go to the lexicographically smaller hyperparameter tuple.
pub fn grid_search<S: Samples>(grid: &[Hyperparameters], data: &S, k: usize, seed: u64) -> Result<GridResult, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let cells = grid
        .par_iter()
        .map(|params| {
            let spec = ModelSpec::new(params.clone(), seed);
            let fold_aucs = cross_validated_auc(&spec, data, k, seed)?;
            Ok(GridCell { params: params.clone(), mean_auc: mean(&fold_aucs), fold_aucs })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mut best = 0;
    for (i, c) in cells.iter().enumerate().skip(1) {
        let b = &cells[best];
        if c.mean_auc > b.mean_auc || (c.mean_auc == b.mean_auc && tuple_less(&param_tuple(&c.params), &param_tuple(&b.params))) {
            best = i;
        }
    }
    Ok(GridResult { best: ModelSpec::new(cells[best].params.clone(), seed), cells })
}

/// Expands a lattice (field name -> candidate values) over `base`. Fields
/// not named in the lattice keep their base values; unknown field names
/// are all reported together.
pub fn expand_lattice(base: &Hyperparameters, lattice: &BTreeMap<String, Vec<serde_json::Value>>) -> Result<Vec<Hyperparameters>, EvalError> {
    let serde_json::Value::Object(outer) = serde_json::to_value(base).expect("hyperparameters serialize") else {
        unreachable!("hyperparameters serialize as a tagged object")
    };
    let (tag, fields) = outer.into_iter().next().expect("one variant tag");
    let serde_json::Value::Object(fields) = fields else { unreachable!("parameter structs serialize as objects") };
    let unknown: Vec<String> = lattice.keys().filter(|k| !fields.contains_key(*k)).map(|k| format!("{tag}.{k}")).collect();
    if !unknown.is_empty() {
        return Err(EvalError::BadGrid(format!("unknown grid fields: {}", unknown.join(", "))));
    }
    if let Some((k, _)) = lattice.iter().find(|(_, v)| v.is_empty()) {
        return Err(EvalError::BadGrid(format!("grid field {tag}.{k} has no values")));
    }
    let mut cells = vec![fields];
    for (key, values) in lattice {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    cells
        .into_iter()
        .map(|fields| {
            let mut outer = serde_json::Map::new();
            outer.insert(tag.clone(), serde_json::Value::Object(fields));
            let params: Hyperparameters = serde_json::from_value(serde_json::Value::Object(outer)).map_err(|e| EvalError::BadGrid(format!("{tag}: {e}")))?;
            let errors = params.validate();
            if errors.is_empty() {
                Ok(params)
            } else {
                Err(EvalError::BadGrid(errors.join("; ")))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Matrix;
    use crate::learners::tests::toy_dataset;
    use crate::learners::{Family, TreeParams};
    use proptest::prelude::*;
    use rand::Rng;
    use serde_json::json;

    /// Two uniform features, positive when x0 > 0.6.
    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
        let y = rows.iter().map(|r| u8::from(r[0] > 0.6)).collect();
        toy_dataset(Matrix::from_rows(2, &rows), y)
    }

    fn patients(n: usize, rate: f64, per_patient: usize) -> (Vec<u8>, Vec<String>) {
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        let n_pos = (n as f64 * rate).round() as usize;
        for p in 0..n {
            for r in 0..per_patient {
                labels.push(u8::from(p < n_pos && r == 0));
                groups.push(format!("P{p:04}"));
            }
        }
        (labels, groups)
    }

    #[test]
    fn folds_are_stratified() {
        let (y, g) = patients(100, 0.2, 1);
        for seed in 0..20 {
            let f = stratified_kfold(&y, &g, 5, seed).unwrap();
            for fold in 0..5 {
                let rows = f.test_rows(fold);
                let share = rows.iter().filter(|&&i| y[i] == 1).count() as f64 / rows.len() as f64;
                assert!((share - 0.2).abs() <= 0.05, "seed {seed} fold {fold}: {share}");
            }
        }
    }

    #[test]
    fn patient_rows_share_a_fold() {
        let (y, g) = patients(30, 0.3, 3);
        let f = stratified_kfold(&y, &g, 5, 9).unwrap();
        for p in g.chunks(3).enumerate() {
            let folds: Vec<usize> = (0..3).map(|r| f.fold_of_row[p.0 * 3 + r]).collect();
            assert!(folds.iter().all(|&x| x == folds[0]));
        }
    }

    #[test]
    fn folds_are_seeded() {
        let (y, g) = patients(50, 0.2, 2);
        assert_eq!(stratified_kfold(&y, &g, 5, 4).unwrap(), stratified_kfold(&y, &g, 5, 4).unwrap());
        assert_ne!(stratified_kfold(&y, &g, 5, 4).unwrap(), stratified_kfold(&y, &g, 5, 5).unwrap());
    }

    #[test]
    fn too_few_patients_rejected() {
        let (y, g) = patients(4, 0.5, 2);
        assert!(matches!(stratified_kfold(&y, &g, 5, 0), Err(EvalError::TooFewGroups { groups: 4, k: 5 })));
    }

    #[test]
    fn balancing_undersamples_majority() {
        let y: Vec<u8> = (0..1000).map(|i| u8::from(i < 100)).collect();
        let keep = balance_training(&y, 3).unwrap();
        assert_eq!(keep.len(), 200);
        assert_eq!(keep.iter().filter(|&&i| y[i] == 1).count(), 100);
        assert_eq!(keep, balance_training(&y, 3).unwrap());
        let even = [1, 0, 0, 1];
        assert_eq!(balance_training(&even, 1).unwrap(), vec![0, 1, 2, 3]);
        assert!(matches!(balance_training(&[0, 0], 1), Err(EvalError::EmptyMinority)));
    }

    #[test]
    fn tuple_order_is_lexicographic() {
        assert!(tuple_less(&[1.0, 5.0], &[2.0, 0.0]));
        assert!(tuple_less(&[1.0, 5.0], &[1.0, 6.0]));
        assert!(!tuple_less(&[1.0, 5.0], &[1.0, 5.0]));
        let small = Hyperparameters::DecisionTree(TreeParams { max_depth: 2, min_samples_leaf: 50 });
        let big = Hyperparameters::DecisionTree(TreeParams { max_depth: 3, min_samples_leaf: 1 });
        assert!(tuple_less(&param_tuple(&small), &param_tuple(&big)));
    }

    #[test]
    fn singleton_grid_returns_its_cell() {
        let data = separable(200, 1);
        let cell = Hyperparameters::DecisionTree(TreeParams { max_depth: 3, min_samples_leaf: 5 });
        let r = grid_search(std::slice::from_ref(&cell), &data, 3, 2).unwrap();
        assert_eq!(r.best.params, cell);
        assert_eq!(r.cells.len(), 1);
    }

    #[test]
    fn capacity_wins_on_separable_data() {
        let data = separable(300, 5);
        let stump = Hyperparameters::DecisionTree(TreeParams { max_depth: 0, min_samples_leaf: 1 });
        let deep = Hyperparameters::DecisionTree(TreeParams { max_depth: 4, min_samples_leaf: 5 });
        let r = grid_search(&[stump, deep.clone()], &data, 3, 8).unwrap();
        assert_eq!(r.best.params, deep);
        assert_eq!(r, grid_search(&r.cells.iter().map(|c| c.params.clone()).collect::<Vec<_>>(), &data, 3, 8).unwrap());
    }

    #[test]
    fn tied_cells_pick_smaller_tuple() {
        let data = separable(200, 2);
        // both depth-0 trees score a constant, so their AUCs tie at 0.5
        let a = Hyperparameters::DecisionTree(TreeParams { max_depth: 0, min_samples_leaf: 9 });
        let b = Hyperparameters::DecisionTree(TreeParams { max_depth: 0, min_samples_leaf: 3 });
        let r = grid_search(&[a, b.clone()], &data, 3, 1).unwrap();
        assert_eq!(r.best.params, b);
    }

    #[test]
    fn lattice_expands_and_reports_unknown_fields() {
        let base = Hyperparameters::default_for(Family::DecisionTree);
        let lattice = BTreeMap::from([("max_depth".to_string(), vec![json!(2), json!(4)]), ("min_samples_leaf".to_string(), vec![json!(10), json!(20), json!(30)])]);
        let cells = expand_lattice(&base, &lattice).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], Hyperparameters::DecisionTree(TreeParams { max_depth: 2, min_samples_leaf: 10 }));
        let bad = BTreeMap::from([("depth".to_string(), vec![json!(2)]), ("leaves".to_string(), vec![json!(2)])]);
        let err = expand_lattice(&base, &bad).unwrap_err().to_string();
        assert!(err.contains("decision_tree.depth") && err.contains("decision_tree.leaves"), "{err}");
        assert_eq!(expand_lattice(&base, &BTreeMap::new()).unwrap(), vec![base]);
    }

    proptest! {
        #[test]
        fn folds_never_split_patients(n in 5usize..60, per in 1usize..4, seed in 0u64..500, k in 2usize..6) {
            let (y, g) = patients(n, 0.3, per);
            prop_assume!(n >= k);
            let f = stratified_kfold(&y, &g, k, seed).unwrap();
            for fold in 0..k {
                let test: std::collections::BTreeSet<&String> = f.test_rows(fold).iter().map(|&i| &g[i]).collect();
                prop_assert!(f.train_rows(fold).iter().all(|&i| !test.contains(&g[i])));
            }
        }

        #[test]
        fn balanced_rows_are_even(y in prop::collection::vec(0u8..2, 2..300), seed in 0u64..100) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let keep = balance_training(&y, seed).unwrap();
            let pos = keep.iter().filter(|&&i| y[i] == 1).count();
            prop_assert_eq!(pos * 2, keep.len());
            prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
