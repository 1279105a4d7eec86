//! CART random forest over per-patch band statistics.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{LczClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::raster::Patch;
use crate::rng;
use crate::sampling::SampleSet;

/// Per channel: mean, then population standard deviation.
pub fn patch_features(patch: &Patch) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * patch.n_channels);
    for ch in 0..patch.n_channels {
        let values = patch.channel(ch);
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        out.push(mean as f32);
        out.push(var.sqrt() as f32);
    }
    out
}

/// Row-major sample-by-feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub n_features: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n_features = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_features) {
            return Err(Error::ShapeMismatch("feature rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("feature values must be finite".into()));
        }
        Ok(FeatureMatrix {
            n_features,
            data: rows.concat(),
        })
    }

    pub fn from_samples(set: &SampleSet) -> Result<Self> {
        let rows: Vec<Vec<f32>> = set.patches.par_iter().map(patch_features).collect();
        let mut m = FeatureMatrix::from_rows(&rows)?;
        if rows.is_empty() {
            m.n_features = 2 * set.n_channels;
        }
        Ok(m)
    }

    pub fn n_rows(&self) -> usize {
        self.data.len().checked_div(self.n_features).unwrap_or(0)
    }

    #[inline]
    pub fn get(&self, row: usize, feature: usize) -> f32 {
        self.data[row * self.n_features + feature]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.n_features..(row + 1) * self.n_features]
    }
}

pub fn gini(counts: &[u32; N_CLASSES]) -> Result<f64> {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return Err(Error::Empty("gini of an empty node".into()));
    }
    let t = total as f64;
    Ok(1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f32,
    pub impurity_decrease: f64,
}

/// Exact non-negative fraction for comparing split scores without rounding.
#[derive(Clone, Copy)]
struct Frac {
    num: u128,
    den: u128,
}

impl Frac {
    fn cmp(self, other: Frac) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// Midpoint of two distinct sorted values, kept strictly below `hi`.
fn midpoint(lo: f32, hi: f32) -> f32 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// Best weighted-Gini split over the given rows and candidate features.
///
/// A sample goes left when `value <= threshold`. Ties in the decrease go to
/// the lower feature index, then the lower threshold.
fn best_split_rows(
    x: &FeatureMatrix,
    y: &[u8],
    rows: &[usize],
    candidates: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 || n < 2 * min_leaf.max(1) {
        return None;
    }
    let mut parent = [0u64; N_CLASSES];
    for &r in rows {
        parent[y[r] as usize] += 1;
    }
    let parent_sumsq: u128 = parent.iter().map(|&c| (c * c) as u128).sum();

    let mut features: Vec<usize> = candidates.to_vec();
    features.sort_unstable();
    features.dedup();

    // score = sumsq_l / n_l + sumsq_r / n_r; decrease = (score - parent_sumsq / n) / n
    let mut best: Option<(Frac, usize, f32)> = None;
    let mut pairs: Vec<(f32, u8)> = Vec::with_capacity(n);
    for &f in &features {
        pairs.clear();
        pairs.extend(rows.iter().map(|&r| (x.get(r, f), y[r])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0u64; N_CLASSES];
        let mut right = parent;
        let (mut sumsq_l, mut sumsq_r) = (0u128, parent_sumsq);
        for i in 0..n - 1 {
            let k = pairs[i].1 as usize;
            sumsq_l += (2 * left[k] + 1) as u128;
            sumsq_r -= (2 * right[k] - 1) as u128;
            left[k] += 1;
            right[k] -= 1;
            let (n_l, n_r) = (i + 1, n - i - 1);
            if pairs[i].0 == pairs[i + 1].0 || n_l < min_leaf || n_r < min_leaf {
                continue;
            }
            let score = Frac {
                num: sumsq_l * n_r as u128 + sumsq_r * n_l as u128,
                den: (n_l * n_r) as u128,
            };
            if best.is_none_or(|(b, _, _)| score.cmp(b) == Ordering::Greater) {
                best = Some((score, f, midpoint(pairs[i].0, pairs[i + 1].0)));
            }
        }
    }
    let (score, feature, threshold) = best?;
    let parent_frac = Frac {
        num: parent_sumsq,
        den: n as u128,
    };
    if score.cmp(parent_frac) != Ordering::Greater {
        return None;
    }
    let decrease = (score.num as f64 / score.den as f64 - parent_sumsq as f64 / n as f64) / n as f64;
    Some(SplitChoice {
        feature,
        threshold,
        impurity_decrease: decrease,
    })
}

/// Exhaustive split search over all rows of `x`.
pub fn best_split(x: &FeatureMatrix, labels: &[LczClass], candidates: &[usize], min_leaf: usize) -> Option<SplitChoice> {
    let y: Vec<u8> = labels.iter().map(|l| l.code()).collect();
    let rows: Vec<usize> = (0..x.n_rows()).collect();
    best_split_rows(x, &y, &rows, candidates, min_leaf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `floor(sqrt(n_features))`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 20,
            min_leaf: 1,
            mtry: None,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Internal {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: [u32; N_CLASSES],
    },
}

/// Nodes in depth-first order; the root is node 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn leaf_counts(&self, features: &[f32]) -> &[u32; N_CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if features[*feature] <= *threshold { *left } else { *right },
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    fn check(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::MalformedModel("empty tree".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                TreeNode::Internal {
                    feature, left, right, ..
                } => {
                    if *feature >= n_features || *left >= self.nodes.len() || *right >= self.nodes.len() || *left <= i || *right <= i {
                        return Err(Error::MalformedModel(format!("node {i} has invalid references")));
                    }
                }
                TreeNode::Leaf { counts } => {
                    if counts.iter().all(|&c| c == 0) {
                        return Err(Error::MalformedModel(format!("leaf {i} is empty")));
                    }
                }
            }
        }
        Ok(())
    }
}

struct TreeBuilder<'a> {
    x: &'a FeatureMatrix,
    y: &'a [u8],
    params: &'a ForestParams,
    mtry: usize,
    rng: rng::Rng,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let mut counts = [0u32; N_CLASSES];
        for &r in rows {
            counts[self.y[r] as usize] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { counts });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.params.max_depth || pure || rows.len() < 2 * self.params.min_leaf.max(1) {
            return id;
        }
        let candidates: Vec<usize> = sample_indices(&mut self.rng, self.x.n_features, self.mtry).into_vec();
        let Some(split) = best_split_rows(self.x, self.y, rows, &candidates, self.params.min_leaf) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&r| self.x.get(r, split.feature) <= split.threshold);
        let left = self.grow(&left_rows, depth + 1);
        let right = self.grow(&right_rows, depth + 1);
        self.nodes[id] = TreeNode::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub n_features: usize,
    pub mtry: usize,
    pub seed: u64,
    pub params: ForestParams,
}

impl RandomForest {
    /// Trains `params.n_trees` trees; tree `i` draws from the stream
    /// `seed ^ splitmix64(i)`.
    pub fn fit(x: &FeatureMatrix, labels: &[LczClass], params: &ForestParams, seed: u64) -> Result<Self> {
        let n = x.n_rows();
        if n == 0 || labels.is_empty() {
            return Err(Error::Empty("random forest needs at least one training sample".into()));
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} feature rows but {} labels", labels.len())));
        }
        if params.n_trees == 0 {
            return Err(Error::InvalidConfig("n_trees must be at least 1".into()));
        }
        let default_mtry = ((x.n_features as f64).sqrt().floor() as usize).max(1);
        let mtry = params.mtry.unwrap_or(default_mtry);
        if mtry == 0 || mtry > x.n_features {
            return Err(Error::InvalidConfig(format!("mtry {mtry} outside 1..={}", x.n_features)));
        }
        let y: Vec<u8> = labels.iter().map(|l| l.code()).collect();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::stream(seed, t as u64);
                let rows: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut builder = TreeBuilder {
                    x,
                    y: &y,
                    params,
                    mtry,
                    rng,
                    nodes: Vec::new(),
                };
                builder.grow(&rows, 0);
                DecisionTree { nodes: builder.nodes }
            })
            .collect();
        Ok(RandomForest {
            trees,
            n_features: x.n_features,
            mtry,
            seed,
            params: params.clone(),
        })
    }

    /// Mean of per-tree leaf class frequencies, summed in tree order; the
    /// predicted class is the argmax with ties to the lower code.
    pub fn predict_proba(&self, features: &[f32]) -> Result<[f64; N_CLASSES]> {
        if features.len() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.n_features,
                features.len()
            )));
        }
        let mut probs = [0.0f64; N_CLASSES];
        for tree in &self.trees {
            let counts = tree.leaf_counts(features);
            let total: u32 = counts.iter().sum();
            for (p, &c) in probs.iter_mut().zip(counts) {
                *p += c as f64 / total as f64;
            }
        }
        let n = self.trees.len() as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        Ok(probs)
    }

    pub fn predict(&self, features: &[f32]) -> Result<(LczClass, [f64; N_CLASSES])> {
        let probs = self.predict_proba(features)?;
        Ok((argmax_class(&probs), probs))
    }

    pub fn predict_patch(&self, patch: &Patch) -> Result<LczClass> {
        Ok(self.predict(&patch_features(patch))?.0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = ForestFile {
            magic: MAGIC.into(),
            version: 1,
            n_features: self.n_features,
            mtry: self.mtry,
            hyperparameters: self.params.clone(),
            seed: self.seed,
            trees: self.trees.clone(),
        };
        let mut bytes = serde_json::to_vec(&file)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&read_file(path.as_ref())?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ForestFile = serde_json::from_slice(bytes)
            .map_err(|e| Error::MalformedModel(format!("random forest json: {e}")))?;
        if file.magic != MAGIC || file.version != 1 {
            return Err(Error::MalformedModel(format!("unsupported magic/version {}/{}", file.magic, file.version)));
        }
        if file.trees.len() != file.hyperparameters.n_trees {
            return Err(Error::MalformedModel("tree count disagrees with hyperparameters".into()));
        }
        for t in &file.trees {
            t.check(file.n_features)?;
        }
        Ok(RandomForest {
            trees: file.trees,
            n_features: file.n_features,
            mtry: file.mtry,
            seed: file.seed,
            params: file.hyperparameters,
        })
    }
}

const MAGIC: &str = "LCZRF";

#[derive(Serialize, Deserialize)]
struct ForestFile {
    magic: String,
    version: u32,
    n_features: usize,
    mtry: usize,
    hyperparameters: ForestParams,
    seed: u64,
    trees: Vec<DecisionTree>,
}

pub(crate) fn argmax_class(probs: &[f64; N_CLASSES]) -> LczClass {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    LczClass::ALL[best]
}

/// Trains on patch statistics of every sample in `train`.
pub fn train_rf(train: &SampleSet, params: &ForestParams, seed: u64) -> Result<RandomForest> {
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let x = FeatureMatrix::from_samples(train)?;
    RandomForest::fit(&x, &train.labels, params, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(usize, u32)]) -> [u32; N_CLASSES] {
        let mut c = [0; N_CLASSES];
        for &(i, n) in pairs {
            c[i] = n;
        }
        c
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&counts(&[(3, 7)])).unwrap(), 0.0);
        assert_eq!(gini(&counts(&[(0, 5), (1, 5)])).unwrap(), 0.5);
        assert_eq!(gini(&counts(&[(0, 1), (1, 1), (2, 1), (3, 1)])).unwrap(), 0.75);
        assert!(gini(&[0; N_CLASSES]).is_err());
    }

    #[test]
    fn patch_feature_examples() {
        let p = Patch::new(2, 1, vec![2.0; 4]).unwrap();
        assert_eq!(patch_features(&p), vec![2.0, 0.0]);
        let p = Patch::new(2, 1, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(patch_features(&p), vec![1.0, 1.0]);
        let p = Patch::new(4, 3, vec![0.5; 48]).unwrap();
        assert_eq!(patch_features(&p).len(), 6);
    }

    #[test]
    fn split_on_separable_feature() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![0.0], vec![1.0], vec![1.0]]).unwrap();
        let y = [LczClass::LCZ1, LczClass::LCZ1, LczClass::LCZ2, LczClass::LCZ2];
        let s = best_split(&x, &y, &[0], 1).unwrap();
        assert_eq!((s.feature, s.threshold), (0, 0.5));
        assert!((s.impurity_decrease - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_split_for_pure_node_or_xor() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(best_split(&x, &[LczClass::A; 3], &[0], 1), None);

        let x = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let y = [LczClass::A, LczClass::B, LczClass::B, LczClass::A];
        assert_eq!(best_split(&x, &y, &[0, 1], 1), None);
    }

    #[test]
    fn min_leaf_blocks_small_children() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = [LczClass::A, LczClass::B, LczClass::B, LczClass::B];
        assert_eq!(best_split(&x, &y, &[0], 1).unwrap().threshold, 0.5);
        // with min_leaf 2 only the 2|2 cut is allowed
        assert_eq!(best_split(&x, &y, &[0], 2).unwrap().threshold, 1.5);
        assert_eq!(best_split(&x, &y, &[0], 3), None);
    }

    #[test]
    fn ties_prefer_lower_feature() {
        let x = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let y = [LczClass::A, LczClass::B];
        assert_eq!(best_split(&x, &y, &[1, 0], 1).unwrap().feature, 0);
    }

    #[test]
    fn degenerate_forest_predicts_majority() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let y = [LczClass::C, LczClass::D, LczClass::D];
        let params = ForestParams {
            n_trees: 1,
            max_depth: 0,
            bootstrap: false,
            ..ForestParams::default()
        };
        let f = RandomForest::fit(&x, &y, &params, 1).unwrap();
        for v in [-5.0, 0.0, 9.0] {
            assert_eq!(f.predict(&[v]).unwrap().0, LczClass::D);
        }
    }

    fn leaf_forest(leaves: &[[u32; N_CLASSES]]) -> RandomForest {
        RandomForest {
            trees: leaves.iter().map(|&counts| DecisionTree { nodes: vec![TreeNode::Leaf { counts }] }).collect(),
            n_features: 1,
            mtry: 1,
            seed: 0,
            params: ForestParams {
                n_trees: leaves.len(),
                ..ForestParams::default()
            },
        }
    }

    #[test]
    fn prediction_averages_and_breaks_ties_low() {
        let f = leaf_forest(&[counts(&[(3, 4)]), counts(&[(3, 9)])]);
        let (c, p) = f.predict(&[0.0]).unwrap();
        assert_eq!(c, LczClass::LCZ4);
        assert_eq!(p[3], 1.0);

        let f = leaf_forest(&[counts(&[(0, 6), (1, 4)]), counts(&[(0, 4), (1, 6)])]);
        let (_, p) = f.predict(&[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let f = leaf_forest(&[counts(&[(2, 1), (5, 1)])]);
        assert_eq!(f.predict(&[0.0]).unwrap().0, LczClass::LCZ3);
        assert!(matches!(f.predict(&[0.0, 1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let x = FeatureMatrix { n_features: 2, data: vec![] };
        assert!(RandomForest::fit(&x, &[], &ForestParams::default(), 0).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let x = FeatureMatrix::from_rows(&(0..20).map(|i| vec![i as f32, (i % 3) as f32]).collect::<Vec<_>>()).unwrap();
        let y: Vec<LczClass> = (0..20).map(|i| LczClass::ALL[i % 3]).collect();
        let params = ForestParams { n_trees: 5, ..ForestParams::default() };
        let f = RandomForest::fit(&x, &y, &params, 9).unwrap();
        let file = ForestFile {
            magic: MAGIC.into(),
            version: 1,
            n_features: f.n_features,
            mtry: f.mtry,
            hyperparameters: f.params.clone(),
            seed: f.seed,
            trees: f.trees.clone(),
        };
        let json = serde_json::to_vec(&file).unwrap();
        assert_eq!(RandomForest::from_json(&json).unwrap(), f);
        let bad = String::from_utf8(json).unwrap().replace("LCZRF", "LCZXX");
        assert!(RandomForest::from_json(bad.as_bytes()).is_err());
    }
}
