//! Depth-bounded CART classification tree.
//!
//! Splits minimise weighted Gini impurity. Candidate thresholds are midpoints
//! between consecutive distinct values of a column; a row goes left when its
//! value is `<= threshold`. Equal-gain candidates resolve to the lowest column
//! index, then the lowest threshold. Gains are compared exactly in integer
//! arithmetic so the tie rule does not depend on rounding.
//!
//! Growth stops at `max_depth`, at a pure node, below two rows, or when no
//! column has two distinct values. There is no pruning. A split is accepted
//! even when its gain is zero (XOR-like layouts need this).

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{class_names, CaseRecord, Dataset, Label};
use crate::digest;
use crate::encode::{column_stats, Encoder};
use crate::par::{self, Execution};
use crate::schema::Attribute;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Split {
        column: usize,
        threshold: f64,
        left: usize,
        right: usize,
        class_counts: Vec<usize>,
        depth: usize,
    },
    Leaf {
        class_counts: Vec<usize>,
        depth: usize,
    },
}

impl Node {
    pub fn class_counts(&self) -> &[usize] {
        match self {
            Node::Split { class_counts, .. } | Node::Leaf { class_counts, .. } => class_counts,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Split { depth, .. } | Node::Leaf { depth, .. } => *depth,
        }
    }

    pub fn mass(&self) -> usize {
        self.class_counts().iter().sum()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Majority class; ties go to the lowest class index.
pub fn argmax_counts(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Bare tree structure over encoded feature vectors. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub n_classes: usize,
}

/// Where a vector ended up and which unknown values were routed by mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub leaf: usize,
    pub path: Vec<(usize, bool)>,
    /// Columns whose value was NaN at a split.
    pub mass_routed: Vec<usize>,
}

impl Tree {
    /// Grows a tree on a column-major matrix.
    pub fn grow(columns: &[Vec<f64>], labels: &[usize], n_classes: usize, max_depth: usize) -> Tree {
        let rows: Vec<usize> = (0..labels.len()).collect();
        let mut nodes = Vec::new();
        grow_node(columns, labels, n_classes, max_depth, rows, 0, &mut nodes);
        Tree { nodes, n_classes }
    }

    /// Follows splits from the root. `path` records `(node, went_right)`.
    pub fn traverse(&self, x: &[f64]) -> Traversal {
        let mut at = 0;
        let mut path = Vec::new();
        let mut mass_routed = Vec::new();
        while let Node::Split {
            column,
            threshold,
            left,
            right,
            ..
        } = &self.nodes[at]
        {
            let v = x[*column];
            let go_right = if v.is_nan() {
                mass_routed.push(*column);
                self.nodes[*right].mass() > self.nodes[*left].mass()
            } else {
                v > *threshold
            };
            path.push((at, go_right));
            at = if go_right { *right } else { *left };
        }
        Traversal {
            leaf: at,
            path,
            mass_routed,
        }
    }

    pub fn leaf_distribution(&self, leaf: usize) -> Vec<f64> {
        let counts = self.nodes[leaf].class_counts();
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.leaf_distribution(self.traverse(x).leaf)
    }

    /// Longest root-to-leaf path in edges.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(Node::depth).max().unwrap_or(0)
    }
}

fn class_counts(labels: &[usize], rows: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &r in rows {
        counts[labels[r]] += 1;
    }
    counts
}

fn grow_node(
    columns: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    max_depth: usize,
    rows: Vec<usize>,
    depth: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let counts = class_counts(labels, &rows, n_classes);
    let id = nodes.len();
    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    let split = if depth >= max_depth || pure || rows.len() < 2 {
        None
    } else {
        best_split(columns, labels, n_classes, &rows)
    };
    let Some(best) = split else {
        nodes.push(Node::Leaf {
            class_counts: counts,
            depth,
        });
        return id;
    };
    // Placeholder, patched once both children exist.
    nodes.push(Node::Leaf {
        class_counts: Vec::new(),
        depth,
    });
    let col = &columns[best.column];
    let (lrows, rrows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| col[r] <= best.threshold);
    let left = grow_node(columns, labels, n_classes, max_depth, lrows, depth + 1, nodes);
    let right = grow_node(columns, labels, n_classes, max_depth, rrows, depth + 1, nodes);
    nodes[id] = Node::Split {
        column: best.column,
        threshold: best.threshold,
        left,
        right,
        class_counts: counts,
        depth,
    };
    id
}

/// A candidate split with its exact purity score `num / den`, where
/// `num / den = Σ_k l_k² / n_L + Σ_k r_k² / n_R`. Larger is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub column: usize,
    pub threshold: f64,
    pub num: u128,
    pub den: u128,
}

impl SplitCandidate {
    /// Exact comparison of purity scores.
    pub fn cmp_score(&self, other: &SplitCandidate) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }

    /// Weighted Gini impurity of the children, `Σ n_c/n · gini_c`.
    pub fn weighted_gini(&self, n: usize) -> f64 {
        1.0 - (self.num as f64 / self.den as f64) / n as f64
    }
}

fn score(left: &[usize], right: &[usize]) -> (u128, u128) {
    let nl: u128 = left.iter().map(|&c| c as u128).sum();
    let nr: u128 = right.iter().map(|&c| c as u128).sum();
    let a: u128 = left.iter().map(|&c| (c as u128) * (c as u128)).sum();
    let b: u128 = right.iter().map(|&c| (c as u128) * (c as u128)).sum();
    (a * nr + b * nl, nl * nr)
}

/// Best split of `rows`, or `None` if no column has two distinct values.
pub fn best_split(
    columns: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    rows: &[usize],
) -> Option<SplitCandidate> {
    let total = class_counts(labels, rows, n_classes);
    let mut best: Option<SplitCandidate> = None;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
    for (j, col) in columns.iter().enumerate() {
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (col[r], labels[r])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = vec![0usize; n_classes];
        for k in 0..pairs.len() - 1 {
            left[pairs[k].1] += 1;
            let (x, next) = (pairs[k].0, pairs[k + 1].0);
            if x == next {
                continue;
            }
            let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
            let (num, den) = score(&left, &right);
            let cand = SplitCandidate {
                column: j,
                threshold: x + (next - x) / 2.0,
                num,
                den,
            };
            if best.is_none_or(|b| cand.cmp_score(&b) == Ordering::Greater) {
                best = Some(cand);
            }
        }
    }
    best
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("training data is empty")]
    Empty,
    #[error("unlabeled rows present at indices {0:?}")]
    Unlabeled(Vec<usize>),
    #[error("evaluation data is empty")]
    EmptyEvaluation,
    #[error("model artifact io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model artifact is malformed: {0}")]
    Format(String),
    #[error("model hash mismatch: expected {expected}, content hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train_accuracy: f64,
    /// Training rows per class, class-index order.
    pub class_counts: Vec<usize>,
}

/// A trained tree plus everything needed to apply and reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub format_version: u32,
    pub schema_version: String,
    pub classes: Vec<String>,
    pub encoder: Encoder,
    /// Training mean of every encoded column; the neutral occlusion baseline.
    pub column_means: Vec<f64>,
    pub tree: Tree,
    pub max_depth: usize,
    pub train_seed: u64,
    pub train_hash: String,
    pub model_hash: String,
    pub metrics: TrainMetrics,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    format_version: u32,
    schema_version: &'a str,
    classes: &'a [String],
    encoder: &'a Encoder,
    column_means: &'a [f64],
    tree: &'a Tree,
    max_depth: usize,
    train_seed: u64,
    train_hash: &'a str,
}

/// Class probabilities in class-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub classes: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl ClassDistribution {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distribution: ClassDistribution,
    pub predicted: usize,
    pub leaf: usize,
    /// Attributes whose unseen category was routed to the heavier branch.
    pub unknown_routes: Vec<Attribute>,
}

impl Prediction {
    pub fn label(&self) -> Label {
        Label::from_class_index(self.predicted).expect("binary model")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl TreeModel {
    fn compute_hash(&self) -> String {
        digest::digest_of(&HashedPart {
            format_version: self.format_version,
            schema_version: &self.schema_version,
            classes: &self.classes,
            encoder: &self.encoder,
            column_means: &self.column_means,
            tree: &self.tree,
            max_depth: self.max_depth,
            train_seed: self.train_seed,
            train_hash: &self.train_hash,
        })
    }

    pub fn encode(&self, case: &CaseRecord) -> (Vec<f64>, Vec<Attribute>) {
        let e = self.encoder.encode(case);
        (e.values, e.unknown)
    }

    /// Class probabilities for an already encoded vector.
    pub fn predict_encoded(&self, x: &[f64]) -> Vec<f64> {
        self.tree.predict_proba(x)
    }

    pub fn predict_distribution(&self, case: &CaseRecord) -> Prediction {
        let (x, unknown) = self.encode(case);
        let t = self.tree.traverse(&x);
        let probabilities = self.tree.leaf_distribution(t.leaf);
        let predicted = argmax_counts(self.tree.nodes[t.leaf].class_counts());
        let routed: Vec<Attribute> = t
            .mass_routed
            .iter()
            .map(|&c| self.encoder.columns[c].attribute())
            .collect();
        Prediction {
            distribution: ClassDistribution {
                classes: self.classes.clone(),
                probabilities,
            },
            predicted,
            leaf: t.leaf,
            unknown_routes: unknown.into_iter().filter(|a| routed.contains(a)).collect(),
        }
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics, TreeError> {
        self.evaluate_with(data, Execution::default())
    }

    pub fn evaluate_with(&self, data: &Dataset, exec: Execution) -> Result<Metrics, TreeError> {
        if data.is_empty() {
            return Err(TreeError::EmptyEvaluation);
        }
        let missing = data.unlabeled_indices();
        if !missing.is_empty() {
            return Err(TreeError::Unlabeled(missing));
        }
        let predicted = par::map_slice(exec, &data.records, |r| self.predict_distribution(r).predicted);
        let k = self.classes.len();
        let mut confusion = vec![vec![0; k]; k];
        for (r, p) in data.records.iter().zip(&predicted) {
            confusion[r.label.expect("checked").class_index()][*p] += 1;
        }
        let correct = (0..k).map(|i| confusion[i][i]).sum();
        Ok(Metrics {
            total: data.len(),
            correct,
            accuracy: correct as f64 / data.len() as f64,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<TreeModel, TreeError> {
        let model: TreeModel = serde_json::from_str(text).map_err(|e| TreeError::Format(e.to_string()))?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(TreeError::Format(format!(
                "unsupported format version {}",
                model.format_version
            )));
        }
        let actual = model.compute_hash();
        if actual != model.model_hash {
            return Err(TreeError::HashMismatch {
                expected: model.model_hash,
                actual,
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TreeModel, TreeError> {
        TreeModel::from_json(&fs::read_to_string(path)?)
    }
}

/// Trains a binary loan tree on `train`.
///
/// The seed is recorded and hashed with the model; split search itself is
/// exhaustive and uses no randomness.
pub fn train_tree(train: &Dataset, max_depth: usize, seed: u64) -> Result<TreeModel, TreeError> {
    if train.is_empty() {
        return Err(TreeError::Empty);
    }
    let missing = train.unlabeled_indices();
    if !missing.is_empty() {
        return Err(TreeError::Unlabeled(missing));
    }
    let encoder = Encoder::fit(train);
    let rows: Vec<Vec<f64>> = train.records.iter().map(|r| encoder.encode(r).values).collect();
    let (column_means, _, _) = column_stats(&rows);
    let columns: Vec<Vec<f64>> = (0..encoder.width())
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect();
    let labels: Vec<usize> = train
        .records
        .iter()
        .map(|r| r.label.expect("checked").class_index())
        .collect();
    let classes = class_names();
    let tree = Tree::grow(&columns, &labels, classes.len(), max_depth);

    let correct = rows
        .iter()
        .zip(&labels)
        .filter(|(x, y)| argmax_counts(tree.nodes[tree.traverse(x).leaf].class_counts()) == **y)
        .count();
    let metrics = TrainMetrics {
        train_accuracy: correct as f64 / labels.len() as f64,
        class_counts: tree.nodes[0].class_counts().to_vec(),
    };

    let mut model = TreeModel {
        format_version: MODEL_FORMAT_VERSION,
        schema_version: train.schema.version.clone(),
        classes,
        encoder,
        column_means,
        tree,
        max_depth,
        train_seed: seed,
        train_hash: train.content_hash.clone(),
        model_hash: String::new(),
        metrics,
    };
    model.model_hash = model.compute_hash();
    Ok(model)
}

pub fn predict_distribution(model: &TreeModel, case: &CaseRecord) -> Prediction {
    model.predict_distribution(case)
}

pub fn evaluate(model: &TreeModel, data: &Dataset) -> Result<Metrics, TreeError> {
    model.evaluate(data)
}
