//! Binary decision trees grown by histogram split search over binned
//! columns. The same builder serves classification trees (Gini)
//! and the squared-error regression trees inside gradient boosting.

use serde::{Deserialize, Serialize};

use crate::features::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams { max_depth: 6, min_samples_leaf: 20 }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.min_samples_leaf == 0 {
            e.push("tree.min_samples_leaf must be >= 1".into());
        }
        if self.max_depth > 32 {
            e.push("tree.max_depth must be <= 32".into());
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64, n: usize },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right } => i = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

/// Classification tree whose leaves hold the training positive rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub tree: Tree,
}

impl TreeModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.tree.predict(row)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Criterion {
    Gini,
    SquaredError,
}

/// Most bins per feature. Features with at most this many distinct values
/// get one bin per value, so split search is exhaustive on them.
pub(crate) const MAX_BINS: usize = 1024;

/// Binned columns in sparse row form: each feature's most common bin is
/// its default, and a row lists only the bins where it differs. Bins are
/// numbered globally so one flat histogram holds every feature.
pub(crate) struct Binned {
    cols: usize,
    /// Start of each feature's bins in the flat numbering; `cols + 1` entries.
    offsets: Vec<usize>,
    default_bin: Vec<usize>,
    row_start: Vec<usize>,
    entries: Vec<u32>,
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
}

impl Binned {
    pub(crate) fn new(x: &Matrix) -> Self {
        let mut codes = vec![0u32; x.rows * x.cols];
        let mut offsets = vec![0];
        let mut default_bin = Vec::with_capacity(x.cols);
        let mut lower = Vec::with_capacity(x.cols);
        let mut upper = Vec::with_capacity(x.cols);
        for c in 0..x.cols {
            let mut values: Vec<f64> = (0..x.rows).map(|i| x.row(i)[c]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            // Upper edge of each bin: every value, or evenly spaced quantiles
            // of the distinct values when there are too many.
            let edges: Vec<f64> = if values.len() <= MAX_BINS {
                values.clone()
            } else {
                let mut e: Vec<f64> = (1..=MAX_BINS).map(|b| values[b * values.len() / MAX_BINS - 1]).collect();
                e.dedup();
                e
            };
            let base = *offsets.last().unwrap();
            let mut lo = vec![f64::INFINITY; edges.len()];
            let mut hi = vec![f64::NEG_INFINITY; edges.len()];
            let mut count = vec![0usize; edges.len()];
            for i in 0..x.rows {
                let v = x.row(i)[c];
                let b = edges.partition_point(|&e| e < v);
                codes[i * x.cols + c] = (base + b) as u32;
                lo[b] = lo[b].min(v);
                hi[b] = hi[b].max(v);
                count[b] += 1;
            }
            let most = (0..edges.len()).max_by_key(|&b| (count[b], std::cmp::Reverse(b))).unwrap_or(0);
            default_bin.push(base + most);
            offsets.push(base + edges.len().max(1));
            lower.push(lo);
            upper.push(hi);
        }
        let mut row_start = Vec::with_capacity(x.rows + 1);
        let mut entries = Vec::new();
        row_start.push(0);
        for i in 0..x.rows {
            for c in 0..x.cols {
                let code = codes[i * x.cols + c];
                if code as usize != default_bin[c] {
                    entries.push(code);
                }
            }
            row_start.push(entries.len());
        }
        Binned { cols: x.cols, offsets, default_bin, row_start, entries, lower, upper }
    }
}

#[derive(Clone, Copy, Default)]
struct Stats {
    n: f64,
    s: f64,
    h: f64,
}

impl Stats {
    fn add(&mut self, t: f64, h: f64) {
        self.n += 1.0;
        self.s += t;
        self.h += h;
    }

    fn merge(&mut self, o: Stats) {
        self.n += o.n;
        self.s += o.s;
        self.h += o.h;
    }

    fn minus(self, o: Stats) -> Stats {
        Stats { n: self.n - o.n, s: self.s - o.s, h: self.h - o.h }
    }

    /// The part of a node's weighted impurity that varies with the split:
    /// impurity = (terms linear in the rows) - score, so a split's gain is
    /// score(left) + score(right) - score(parent).
    fn score(self, c: Criterion) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        let q = self.s * self.s / self.n;
        match c {
            Criterion::Gini => 2.0 * q,
            Criterion::SquaredError => q,
        }
    }
}

pub(crate) struct Builder<'a> {
    pub x: &'a Matrix,
    /// Labels for Gini, residuals for squared error.
    pub target: &'a [f64],
    /// Per-row curvature for Newton leaf values; `None` leaves hold means.
    pub hessian: Option<&'a [f64]>,
    pub criterion: Criterion,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Builder<'_> {
    pub(crate) fn build(&self, binned: &Binned) -> Tree {
        let mut nodes = Vec::new();
        let rows: Vec<u32> = (0..self.x.rows as u32).collect();
        self.grow(binned, rows, None, 0, &mut nodes);
        Tree { nodes }
    }

    fn leaf_value(&self, total: Stats) -> f64 {
        match self.hessian {
            None => total.s / total.n,
            Some(_) if total.h > 1e-12 => total.s / total.h,
            Some(_) => 0.0,
        }
    }

    fn curvature(&self, r: usize) -> f64 {
        self.hessian.map_or(0.0, |h| h[r])
    }

    /// Every feature's histogram over `rows`, whose summed stats are
    /// `total`. Default bins are filled by subtraction.
    fn histogram(&self, binned: &Binned, rows: &[u32], total: Stats) -> Vec<Stats> {
        let mut hist = vec![Stats::default(); binned.offsets[binned.cols]];
        for &r in rows {
            let r = r as usize;
            let (t, hr) = (self.target[r], self.curvature(r));
            for &code in &binned.entries[binned.row_start[r]..binned.row_start[r + 1]] {
                hist[code as usize].add(t, hr);
            }
        }
        for f in 0..binned.cols {
            let mut rest = total;
            for (b, bin) in hist.iter().enumerate().take(binned.offsets[f + 1]).skip(binned.offsets[f]) {
                if b != binned.default_bin[f] {
                    rest = rest.minus(*bin);
                }
            }
            hist[binned.default_bin[f]] = rest;
        }
        hist
    }

    fn is_pure(&self, rows: &[u32], total: Stats) -> bool {
        match self.criterion {
            Criterion::Gini => total.s == 0.0 || total.s == total.n,
            Criterion::SquaredError => {
                let mean = total.s / total.n;
                rows.iter().map(|&r| (self.target[r as usize] - mean).powi(2)).sum::<f64>() <= 1e-12
            }
        }
    }

    /// `hist` is this node's histogram when the parent could derive it.
    fn grow(&self, binned: &Binned, rows: Vec<u32>, hist: Option<Vec<Stats>>, depth: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        let n = rows.len();
        let mut total = Stats::default();
        for &r in &rows {
            total.add(self.target[r as usize], self.curvature(r as usize));
        }
        nodes.push(Node::Leaf { value: self.leaf_value(total), n });
        if depth >= self.max_depth || n < 2 * self.min_samples_leaf || self.is_pure(&rows, total) {
            return id;
        }

        let hist = hist.unwrap_or_else(|| self.histogram(binned, &rows, total));
        let parent = total.score(self.criterion);
        // (gain, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..binned.cols {
            let (lower, upper) = (&binned.lower[f], &binned.upper[f]);
            let bins = &hist[binned.offsets[f]..binned.offsets[f + 1]];
            let mut left = Stats::default();
            let mut last: Option<usize> = None;
            for (b, &bin) in bins.iter().enumerate() {
                if bin.n == 0.0 {
                    continue;
                }
                if let Some(prev) = last {
                    let (nl, nr) = (left.n as usize, n - left.n as usize);
                    if nl >= self.min_samples_leaf && nr >= self.min_samples_leaf {
                        let gain = left.score(self.criterion) + total.minus(left).score(self.criterion) - parent;
                        if best.is_none_or(|(g, ..)| gain > g + 1e-12) {
                            let (a, c) = (upper[prev], lower[b]);
                            let mut threshold = a + (c - a) / 2.0;
                            if threshold >= c {
                                threshold = a;
                            }
                            best = Some((gain, f, threshold));
                        }
                    }
                }
                left.merge(bin);
                last = Some(b);
            }
        }
        let Some((_, feature, threshold)) = best else { return id };

        let (lefts, rights): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| self.x.row(r as usize)[feature] <= threshold);
        // Children that may split get histograms: the smaller child's by a
        // pass over its rows, the larger one's by subtraction.
        let (left_hist, right_hist) = if depth + 1 < self.max_depth {
            let small_is_left = lefts.len() <= rights.len();
            let small_rows = if small_is_left { &lefts } else { &rights };
            let mut small_total = Stats::default();
            for &r in small_rows {
                small_total.add(self.target[r as usize], self.curvature(r as usize));
            }
            let small = self.histogram(binned, small_rows, small_total);
            let large: Vec<Stats> = hist.iter().zip(&small).map(|(p, c)| p.minus(*c)).collect();
            if small_is_left {
                (Some(small), Some(large))
            } else {
                (Some(large), Some(small))
            }
        } else {
            (None, None)
        };
        drop(hist);
        let left = self.grow(binned, lefts, left_hist, depth + 1, nodes);
        let right = self.grow(binned, rights, right_hist, depth + 1, nodes);
        nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }
}

pub fn fit_cart(x: &Matrix, y: &[u8], params: &TreeParams) -> TreeModel {
    let target: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let builder = Builder {
        x,
        target: &target,
        hessian: None,
        criterion: Criterion::Gini,
        max_depth: params.max_depth,
        min_samples_leaf: params.min_samples_leaf,
    };
    TreeModel { tree: builder.build(&Binned::new(x)) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy(m: &TreeModel, x: &Matrix, y: &[u8]) -> f64 {
        let hits = (0..x.rows).filter(|&i| u8::from(m.predict(x.row(i)) > 0.5) == y[i]).count();
        hits as f64 / x.rows as f64
    }

    #[test]
    fn separable_feature_gives_stump() {
        let x = Matrix::from_rows(1, &[[1.0], [2.0], [3.0], [10.0], [11.0], [12.0]]);
        let y = [0, 0, 0, 1, 1, 1];
        let m = fit_cart(&x, &y, &TreeParams { max_depth: 5, min_samples_leaf: 1 });
        assert_eq!(m.tree.depth(), 1);
        assert_eq!(accuracy(&m, &x, &y), 1.0);
        assert_eq!(m.tree.nodes[0], Node::Split { feature: 0, threshold: 6.5, left: 1, right: 2 });
    }

    #[test]
    fn xor_needs_two_levels() {
        let x = Matrix::from_rows(2, &[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let y = [0, 1, 1, 0];
        let m = fit_cart(&x, &y, &TreeParams { max_depth: 2, min_samples_leaf: 1 });
        assert_eq!(accuracy(&m, &x, &y), 1.0);
        // zero-gain tie at the root resolves to the lower feature index
        assert!(matches!(m.tree.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn pure_node_is_a_leaf() {
        let x = Matrix::from_rows(1, &[[1.0], [2.0], [3.0]]);
        let m = fit_cart(&x, &[1, 1, 1], &TreeParams { max_depth: 10, min_samples_leaf: 1 });
        assert_eq!(m.tree.nodes, [Node::Leaf { value: 1.0, n: 3 }]);
    }

    #[test]
    fn leaf_scores_positive_rate() {
        let x = Matrix::from_rows(1, &(0..10).map(|i| [i as f64]).collect::<Vec<_>>());
        let y = [1, 0, 0, 1, 0, 0, 1, 0, 0, 0];
        let m = fit_cart(&x, &y, &TreeParams { max_depth: 0, min_samples_leaf: 1 });
        assert_eq!(m.predict(&[4.0]), 0.3);
    }

    #[test]
    fn min_samples_leaf_respected() {
        let x = Matrix::from_rows(1, &(0..40).map(|i| [i as f64]).collect::<Vec<_>>());
        let y: Vec<u8> = (0..40).map(|i| u8::from(i % 3 == 0)).collect();
        let m = fit_cart(&x, &y, &TreeParams { max_depth: 8, min_samples_leaf: 7 });
        for n in &m.tree.nodes {
            if let Node::Leaf { n, .. } = n {
                assert!(*n >= 7);
            }
        }
    }

    #[test]
    fn many_distinct_values_use_quantile_bins() {
        let n = 5000;
        let x = Matrix::from_rows(1, &(0..n).map(|i| [(i as f64 * 0.7351).sin() * 100.0]).collect::<Vec<_>>());
        let y: Vec<u8> = (0..n).map(|i| u8::from(x.row(i)[0] > 12.5)).collect();
        let m = fit_cart(&x, &y, &TreeParams { max_depth: 3, min_samples_leaf: 1 });
        assert!(accuracy(&m, &x, &y) >= 0.999);
    }

    #[test]
    fn sparse_default_bins_match_dense_counts() {
        // mostly-zero column where the default bin must be reconstructed
        let x = Matrix::from_rows(2, &[[0.0, 1.0], [0.0, 2.0], [1.0, 3.0], [0.0, 4.0], [1.0, 5.0], [0.0, 6.0]]);
        let y = [0, 0, 1, 0, 1, 0];
        let m = fit_cart(&x, &y, &TreeParams { max_depth: 1, min_samples_leaf: 1 });
        assert_eq!(m.tree.nodes[0], Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 });
        assert_eq!(accuracy(&m, &x, &y), 1.0);
    }
}
