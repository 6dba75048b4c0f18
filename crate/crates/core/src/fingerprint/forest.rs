//! Random forest classifier: bootstrap-sampled CART trees with random
//! feature subsets per split, majority vote at prediction time.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::FingerprintError;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SplitCriterion {
    #[default]
    Gini,
    /// Squared error against one-hot class targets.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum MaxFeatures {
    #[default]
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, n_features: usize) -> usize {
        let k = match self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().floor() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Count(k) => k,
        };
        k.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub criterion: SplitCriterion,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 150,
            max_depth: 15,
            min_samples_split: 10,
            min_samples_leaf: 1,
            criterion: SplitCriterion::Gini,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), FingerprintError> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 || self.min_samples_split < 2 {
            return Err(FingerprintError::InvalidConfig(
                "n_trees >= 1, min_samples_leaf >= 1 and min_samples_split >= 2 are required"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Feature vectors with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct LabeledDataset {
    pub vectors: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub traces_per_query: usize,
}

impl LabeledDataset {
    pub fn new(
        vectors: Vec<Vec<f64>>,
        labels: Vec<usize>,
        label_names: Vec<String>,
        traces_per_query: usize,
    ) -> Result<Self, FingerprintError> {
        if vectors.len() != labels.len() {
            return Err(FingerprintError::InvalidDataset(
                "vector and label counts differ".into(),
            ));
        }
        if let Some(first) = vectors.first() {
            if vectors.iter().any(|v| v.len() != first.len()) {
                return Err(FingerprintError::InvalidDataset(
                    "vectors differ in length".into(),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= label_names.len()) {
            return Err(FingerprintError::InvalidDataset(format!(
                "label {bad} has no name"
            )));
        }
        Ok(Self {
            vectors,
            labels,
            label_names,
            traces_per_query,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.n_classes()];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.into_iter().filter(|&s| s).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
enum Node {
    Leaf {
        class: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    depth: usize,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Smallest sample count that reached any leaf during training is not
    /// stored; this reports the leaf count instead.
    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }
}

/// Weighted impurity `n * impurity` of a node with the given class counts.
fn weighted_impurity(criterion: SplitCriterion, counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n_f = n as f64;
    match criterion {
        SplitCriterion::Gini => {
            let sum_sq: f64 = counts.iter().map(|&c| (c as f64).powi(2)).sum();
            n_f * (1.0 - sum_sq / (n_f * n_f))
        }
        SplitCriterion::Mse => {
            // Σ_i ||onehot(y_i) - mean||², accumulated per class column.
            counts
                .iter()
                .map(|&c| {
                    let c = c as f64;
                    let mean = c / n_f;
                    c * (1.0 - mean).powi(2) + (n_f - c) * mean * mean
                })
                .sum()
        }
    }
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

struct TreeBuilder<'a> {
    columns: &'a [Vec<f64>],
    labels: &'a [usize],
    n_classes: usize,
    cfg: &'a ForestConfig,
    n_try: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    depth: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeBuilder<'_> {
    fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in idx {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    fn best_split(&mut self, idx: &[usize], total: &[usize]) -> Option<BestSplit> {
        let n_features = self.columns.len();
        let mut order: Vec<usize> = (0..n_features).collect();
        order.shuffle(&mut self.rng);
        let mut best: Option<BestSplit> = None;
        let mut tried = 0;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        let mut left = vec![0usize; self.n_classes];
        let mut right = vec![0usize; self.n_classes];
        let n = idx.len();
        for &f in &order {
            if tried >= self.n_try {
                break;
            }
            let col = &self.columns[f];
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (col[i], self.labels[i])));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if pairs[0].0 == pairs[n - 1].0 {
                // constant here; does not count toward the feature budget
                continue;
            }
            tried += 1;
            left.iter_mut().for_each(|c| *c = 0);
            right.copy_from_slice(total);
            for pos in 0..n - 1 {
                let (value, class) = pairs[pos];
                left[class] += 1;
                right[class] -= 1;
                let next = pairs[pos + 1].0;
                if value == next {
                    continue;
                }
                let n_left = pos + 1;
                if n_left < self.cfg.min_samples_leaf || n - n_left < self.cfg.min_samples_leaf {
                    continue;
                }
                let score = weighted_impurity(self.cfg.criterion, &left, n_left)
                    + weighted_impurity(self.cfg.criterion, &right, n - n_left);
                if best.as_ref().is_none_or(|b| score < b.score - 1e-12) {
                    best = Some(BestSplit {
                        feature: f,
                        threshold: value + (next - value) / 2.0,
                        score,
                    });
                }
            }
        }
        best
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        self.depth = self.depth.max(depth);
        let counts = self.class_counts(&idx);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf {
            class: majority(&counts),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.cfg.max_depth || idx.len() < self.cfg.min_samples_split {
            return slot;
        }
        let Some(split) = self.best_split(&idx, &counts) else {
            return slot;
        };
        let col = &self.columns[split.feature];
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| col[i] <= split.threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[slot] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        slot
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ForestModel {
    trees: Vec<DecisionTree>,
    n_features: usize,
    label_names: Vec<String>,
}

pub fn train_forest(
    ds: &LabeledDataset,
    cfg: &ForestConfig,
) -> Result<ForestModel, FingerprintError> {
    cfg.validate()?;
    if ds.distinct_labels() < 2 {
        return Err(FingerprintError::InvalidDataset(
            "training needs at least two distinct labels".into(),
        ));
    }
    if ds.traces_per_query == 0 {
        return Err(FingerprintError::InvalidDataset(
            "traces per query must be >= 1".into(),
        ));
    }
    let n_features = ds.n_features();
    if n_features == 0 {
        return Err(FingerprintError::InvalidDataset(
            "feature vectors are empty".into(),
        ));
    }
    let columns: Vec<Vec<f64>> = (0..n_features)
        .map(|f| ds.vectors.iter().map(|v| v[f]).collect())
        .collect();
    let n = ds.len();
    let n_try = cfg.max_features.resolve(n_features);
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[t as u64]));
            let idx: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut builder = TreeBuilder {
                columns: &columns,
                labels: &ds.labels,
                n_classes: ds.n_classes(),
                cfg,
                n_try,
                rng,
                nodes: Vec::new(),
                depth: 0,
            };
            builder.build(idx, 0);
            DecisionTree {
                nodes: builder.nodes,
                depth: builder.depth,
            }
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_features,
        label_names: ds.label_names.clone(),
    })
}

impl ForestModel {
    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// Majority label across trees (lowest label on ties) and its vote share.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64), FingerprintError> {
        if x.len() != self.n_features {
            return Err(FingerprintError::LengthMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        let mut votes = vec![0usize; self.label_names.len()];
        for tree in &self.trees {
            votes[tree.predict(x)] += 1;
        }
        let label = majority(&votes);
        Ok((label, votes[label] as f64 / self.trees.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn separable_constant_vectors() {
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10 {
            vectors.push(vec![1.0, 5.0, 0.0]);
            labels.push(0);
            vectors.push(vec![2.0, 5.0, 0.0]);
            labels.push(1);
        }
        let ds = LabeledDataset::new(vectors.clone(), labels.clone(), names(2), 10).unwrap();
        let model = train_forest(&ds, &ForestConfig::default()).unwrap();
        for (v, l) in vectors.iter().zip(&labels) {
            assert_eq!(model.predict(v).unwrap().0, *l);
        }
    }

    #[test]
    fn indistinguishable_vectors_fall_to_prior() {
        let vectors = vec![vec![3.0, 3.0]; 30];
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i % 3 == 0)).collect();
        let ds = LabeledDataset::new(vectors.clone(), labels.clone(), names(2), 15).unwrap();
        let model = train_forest(&ds, &ForestConfig::default()).unwrap();
        let correct = vectors
            .iter()
            .zip(&labels)
            .filter(|(v, l)| model.predict(v).unwrap().0 == **l)
            .count();
        let prior = 20.0 / 30.0;
        assert!(correct as f64 / 30.0 <= prior + 1e-9);
    }

    #[test]
    fn single_label_is_rejected() {
        let ds = LabeledDataset::new(vec![vec![1.0]; 4], vec![0; 4], names(2), 4).unwrap();
        assert!(train_forest(&ds, &ForestConfig::default()).is_err());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let ds = LabeledDataset::new(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![0, 1],
            names(2),
            1,
        )
        .unwrap();
        let model = train_forest(
            &ds,
            &ForestConfig {
                min_samples_split: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(
            model.predict(&[1.0]),
            Err(FingerprintError::LengthMismatch { .. })
        ));
        let (_, frac) = model.predict(&[0.0, 0.0]).unwrap();
        assert!(frac > 0.0 && frac <= 1.0);
    }

    #[test]
    fn gini_and_one_hot_mse_agree() {
        for counts in [vec![3, 0, 1], vec![5, 5], vec![0, 7, 2, 1]] {
            let n = counts.iter().sum();
            let g = weighted_impurity(SplitCriterion::Gini, &counts, n);
            let m = weighted_impurity(SplitCriterion::Mse, &counts, n);
            assert!((g - m).abs() < 1e-9, "{counts:?}: {g} vs {m}");
        }
    }

    #[test]
    fn trees_respect_depth_bound_and_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vectors: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..8).map(|_| rng.gen_range(0..20) as f64).collect())
            .collect();
        let labels: Vec<usize> = (0..300).map(|i| i % 6).collect();
        let ds = LabeledDataset::new(vectors, labels, names(6), 50).unwrap();
        let cfg = ForestConfig {
            n_trees: 20,
            max_depth: 4,
            seed: 9,
            ..Default::default()
        };
        let a = train_forest(&ds, &cfg).unwrap();
        assert!(a.trees().iter().all(|t| t.depth() <= 4));
        assert_eq!(a, train_forest(&ds, &cfg).unwrap());
    }

    /// A single unbootstrapped tree over all features on a hand-checkable
    /// dataset: the first split must isolate the class that a threshold on
    /// feature 0 separates perfectly.
    #[test]
    fn single_tree_matches_hand_trace() {
        let vectors = vec![
            vec![1.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 0.0],
            vec![2.0, 1.0],
            vec![8.0, 0.0],
            vec![8.0, 1.0],
            vec![9.0, 0.0],
            vec![9.0, 1.0],
            vec![9.0, 5.0],
            vec![1.0, 5.0],
        ];
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 0];
        let ds = LabeledDataset::new(vectors.clone(), labels.clone(), names(2), 5).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            bootstrap: false,
            max_features: MaxFeatures::All,
            min_samples_split: 2,
            ..Default::default()
        };
        let model = train_forest(&ds, &cfg).unwrap();
        let tree = &model.trees()[0];
        assert_eq!(
            tree.nodes[0],
            Node::Split {
                feature: 0,
                threshold: 5.0,
                left: 1,
                right: 2
            }
        );
        assert_eq!(tree.leaf_count(), 2);
        for (v, l) in vectors.iter().zip(&labels) {
            assert_eq!(model.predict(v).unwrap(), (*l, 1.0));
        }
        // hold-out points on either side of the threshold
        assert_eq!(model.predict(&[4.9, 3.0]).unwrap().0, 0);
        assert_eq!(model.predict(&[5.1, 3.0]).unwrap().0, 1);
    }
}
