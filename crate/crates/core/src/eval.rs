//! Metrics and analyses over stored predictions: top-k accuracy, macro F1,
//! paired bootstrap tests, and clustering of classes by how their
//! predicted probabilities co-vary.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction row {row} sums to {sum}, expected 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{rows} prediction rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("k = {k} outside 1..={classes}")]
    InvalidK { k: usize, classes: usize },
    #[error("prediction sets cover different examples")]
    DifferentExamples,
    #[error("class {0} has constant predicted probability")]
    ConstantColumn(usize),
    #[error("need at least {need} examples, have {have}")]
    TooFewExamples { have: usize, need: usize },
    #[error("correlation matrix: {0}")]
    BadMatrix(String),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("predictions line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

const SUM_TOLERANCE: f64 = 1e-6;

/// Per-example class probabilities with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    probs: Array2<f64>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Array2<f64>, labels: Vec<usize>) -> Result<Self, EvalError> {
        if probs.nrows() != labels.len() {
            return Err(EvalError::LengthMismatch { rows: probs.nrows(), labels: labels.len() });
        }
        let classes = probs.ncols();
        for (row, p) in probs.rows().into_iter().enumerate() {
            let sum = p.sum();
            if sum.is_nan() || (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(EvalError::NotNormalized { row, sum });
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(EvalError::LabelOutOfRange { label, classes });
        }
        Ok(Self { probs, labels })
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.probs.rows().into_iter().map(|r| ranked(r)[0]).collect()
    }

    /// Tab-separated: label, then one probability per class.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (row, &label) in self.probs.rows().into_iter().zip(&self.labels) {
            let _ = write!(s, "{label}");
            for p in row {
                let _ = write!(s, "\t{p:.9}");
            }
            s.push('\n');
        }
        s
    }

    /// Inverse of [`PredictionSet::to_tsv`]; skips blank and `#` lines.
    /// Rows are renormalized to absorb printing round-off.
    pub fn parse_tsv(text: &str) -> Result<Self, EvalError> {
        let mut labels = Vec::new();
        let mut data = Vec::new();
        let mut classes = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| EvalError::Malformed { line: line_no, reason };
            let mut fields = line.split('\t');
            let label: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("bad label".into()))?;
            let row: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad probability {f:?}"))))
                .collect::<Result<_, _>>()?;
            match classes {
                None => classes = Some(row.len()),
                Some(c) if c != row.len() => return Err(bad(format!("expected {c} columns"))),
                _ => {}
            }
            let sum: f64 = row.iter().sum();
            if sum.is_nan() || sum <= 0.0 {
                return Err(bad("probabilities sum to zero".into()));
            }
            labels.push(label);
            data.extend(row.into_iter().map(|p| p / sum));
        }
        let c = classes.unwrap_or(0);
        let probs = Array2::from_shape_vec((labels.len(), c), data).expect("rows have equal width");
        Self::new(probs, labels)
    }
}

/// Class indices by descending score; equal scores keep the lower index
/// first.
pub fn ranked(scores: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub fn top_k_accuracy(preds: &PredictionSet, k: usize) -> Result<f64, EvalError> {
    let classes = preds.classes();
    if k == 0 || k > classes {
        return Err(EvalError::InvalidK { k, classes });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .probs
        .rows()
        .into_iter()
        .zip(&preds.labels)
        .filter(|(row, &label)| ranked(*row)[..k].contains(&label))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// F1 of each class from argmax decisions. A class that is neither
/// predicted nor present scores 0.
pub fn per_class_f1(predicted: &[usize], labels: &[usize], classes: usize) -> Vec<f64> {
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect()
}

pub fn macro_f1(preds: &PredictionSet) -> f64 {
    let f1 = per_class_f1(&preds.argmax(), &preds.labels, preds.classes());
    if f1.is_empty() {
        return 0.0;
    }
    f1.iter().sum::<f64>() / f1.len() as f64
}

/// Metrics computed from argmax decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Accuracy,
    MacroF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro-f1",
        }
    }

    pub fn score(self, preds: &PredictionSet) -> f64 {
        self.from_decisions(&preds.argmax(), &preds.labels, preds.classes())
    }

    pub fn from_decisions(self, predicted: &[usize], labels: &[usize], classes: usize) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        match self {
            Metric::Accuracy => {
                predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
            }
            Metric::MacroF1 => {
                let f1 = per_class_f1(predicted, labels, classes);
                f1.iter().sum::<f64>() / classes.max(1) as f64
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro-f1" | "f1" => Ok(Metric::MacroF1),
            _ => Err(EvalError::UnknownMetric(s.to_string())),
        }
    }
}

pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sided {
    /// Tests whether `a` is better than `b`.
    #[default]
    One,
    Two,
}

/// Paired bootstrap over test indices. One-sided: the fraction of
/// resamples in which `a` does not beat `b`.
pub fn bootstrap_compare(
    a: &PredictionSet,
    b: &PredictionSet,
    metric: Metric,
    samples: usize,
    seed: u64,
    sided: Sided,
) -> Result<f64, EvalError> {
    if a.labels != b.labels || a.classes() != b.classes() {
        return Err(EvalError::DifferentExamples);
    }
    let n = a.len();
    if n == 0 || samples == 0 {
        return Err(EvalError::TooFewExamples { have: n.min(samples), need: 1 });
    }
    let (pa, pb) = (a.argmax(), b.argmax());
    let classes = a.classes();
    // Each resample has its own stream, so the counts do not depend on how
    // rayon splits the work.
    let (not_better, not_worse) = (0..samples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut sa = Vec::with_capacity(n);
            let mut sb = Vec::with_capacity(n);
            let mut sl = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.random_range(0..n);
                sa.push(pa[i]);
                sb.push(pb[i]);
                sl.push(a.labels[i]);
            }
            let ma = metric.from_decisions(&sa, &sl, classes);
            let mb = metric.from_decisions(&sb, &sl, classes);
            ((ma <= mb) as usize, (ma >= mb) as usize)
        })
        .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
    let p_le = not_better as f64 / samples as f64;
    Ok(match sided {
        Sided::One => p_le,
        Sided::Two => (2.0 * p_le.min(not_worse as f64 / samples as f64)).min(1.0),
    })
}

/// Pearson correlation between the class columns of the predicted
/// probabilities. The diagonal is exactly 1.
pub fn prediction_correlation(preds: &PredictionSet) -> Result<Array2<f64>, EvalError> {
    let n = preds.len();
    if n < 2 {
        return Err(EvalError::TooFewExamples { have: n, need: 2 });
    }
    let c = preds.classes();
    let mut centered = preds.probs.clone();
    let mut norms = vec![0.0; c];
    for (j, mut col) in centered.columns_mut().into_iter().enumerate() {
        let mean = col.sum() / n as f64;
        col.mapv_inplace(|x| x - mean);
        norms[j] = col.dot(&col).sqrt();
        if norms[j] <= f64::EPSILON * n as f64 {
            return Err(EvalError::ConstantColumn(j));
        }
    }
    let cov = centered.t().dot(&centered);
    let mut corr = Array2::<f64>::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            corr[[i, j]] = if i == j { 1.0 } else { (cov[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0) };
        }
    }
    // Symmetrize exactly; the two triangles can differ in the last bit.
    for i in 0..c {
        for j in 0..i {
            corr[[j, i]] = corr[[i, j]];
        }
    }
    Ok(corr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// Id of the merged node; leaves are `0..C`, merges count up from `C`.
    pub node: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Leaves in drawing order, left subtree first.
    pub fn leaf_order(&self) -> Vec<usize> {
        if self.leaves == 0 {
            return Vec::new();
        }
        let Some(root) = self.merges.last() else {
            return vec![0];
        };
        let mut out = Vec::with_capacity(self.leaves);
        let mut stack = vec![root.node];
        while let Some(node) = stack.pop() {
            if node < self.leaves {
                out.push(node);
            } else {
                let m = &self.merges[node - self.leaves];
                stack.push(m.b);
                stack.push(m.a);
            }
        }
        out
    }

    pub fn is_monotone(&self) -> bool {
        self.merges.windows(2).all(|w| w[1].distance >= w[0].distance - 1e-12)
    }

    /// Leaves under `node`.
    pub fn members(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if n < self.leaves {
                out.push(n);
            } else {
                let m = &self.merges[n - self.leaves];
                stack.push(m.a);
                stack.push(m.b);
            }
        }
        out.sort_unstable();
        out
    }

    /// One merge per line: `node_a  node_b  distance  new_node`.
    pub fn to_merge_list(&self) -> String {
        let mut s = String::from("node_a\tnode_b\tdistance\tnew_node\n");
        for m in &self.merges {
            let _ = writeln!(s, "{}\t{}\t{:.9}\t{}", m.a, m.b, m.distance, m.node);
        }
        s
    }

    /// Newick tree with branch lengths. Node heights are half the merge
    /// distance, as usual for average linkage.
    pub fn to_newick(&self, labels: &[String]) -> String {
        if self.leaves == 0 {
            return ";".into();
        }
        let height = |n: usize| if n < self.leaves { 0.0 } else { self.merges[n - self.leaves].distance / 2.0 };
        let name = |n: usize| labels.get(n).map(|l| escape_newick(l)).unwrap_or_else(|| n.to_string());
        fn render(d: &Dendrogram, n: usize, height: &dyn Fn(usize) -> f64, name: &dyn Fn(usize) -> String) -> String {
            if n < d.leaves {
                return name(n);
            }
            let m = &d.merges[n - d.leaves];
            let h = height(n);
            format!(
                "({}:{:.6},{}:{:.6})",
                render(d, m.a, height, name),
                h - height(m.a),
                render(d, m.b, height, name),
                h - height(m.b)
            )
        }
        let root = self.merges.last().map_or(0, |m| m.node);
        format!("{};", render(self, root, &height, &name))
    }
}

fn escape_newick(label: &str) -> String {
    if label.chars().any(|c| "()[]':;, \t".contains(c)) {
        format!("'{}'", label.replace('\'', "''"))
    } else {
        label.to_string()
    }
}

/// Average-linkage agglomerative clustering with distance `1 − corr`.
/// Among equally close pairs the one with the smallest node ids merges
/// first.
pub fn cluster_classes(corr: ArrayView2<f64>) -> Result<Dendrogram, EvalError> {
    let c = corr.nrows();
    if corr.ncols() != c {
        return Err(EvalError::BadMatrix(format!("{}x{} is not square", c, corr.ncols())));
    }
    for i in 0..c {
        for j in 0..c {
            if !corr[[i, j]].is_finite() || (corr[[i, j]] - corr[[j, i]]).abs() > 1e-9 {
                return Err(EvalError::BadMatrix(format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    // Active clusters as (node id, size); `dist` indexed by position in
    // `active`.
    let mut active: Vec<(usize, usize)> = (0..c).map(|i| (i, 1)).collect();
    let mut dist: Vec<Vec<f64>> = (0..c).map(|i| (0..c).map(|j| 1.0 - corr[[i, j]]).collect()).collect();
    let mut merges = Vec::with_capacity(c.saturating_sub(1));
    #[allow(clippy::needless_range_loop)]
    while active.len() > 1 {
        let mut best = (f64::INFINITY, 0, 1);
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                let d = dist[i][j];
                let key = |p: usize, q: usize| {
                    let (x, y) = (active[p].0, active[q].0);
                    (x.min(y), x.max(y))
                };
                if d < best.0 || (d == best.0 && key(i, j) < key(best.1, best.2)) {
                    best = (d, i, j);
                }
            }
        }
        let (d, i, j) = best;
        let (ni, si) = active[i];
        let (nj, sj) = active[j];
        let node = c + merges.len();
        merges.push(Merge { a: ni.min(nj), b: ni.max(nj), distance: d, node, size: si + sj });
        // Lance-Williams update for average linkage, stored in slot i.
        let (wi, wj) = (si as f64, sj as f64);
        for k in 0..active.len() {
            if k != i && k != j {
                let v = (wi * dist[i][k] + wj * dist[j][k]) / (wi + wj);
                dist[i][k] = v;
                dist[k][i] = v;
            }
        }
        active[i] = (node, si + sj);
        active.remove(j);
        dist.remove(j);
        for row in dist.iter_mut() {
            row.remove(j);
        }
    }
    Ok(Dendrogram { leaves: c, merges })
}
