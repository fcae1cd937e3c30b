//! Gradient-boosted regression trees with second-order (Newton) updates.
//!
//! The ensemble is a softmax classifier with one tree per class per round,
//! trained against soft (row-stochastic) targets. For class `c` the gradient
//! of the soft cross-entropy is `p_c - y_c` and the diagonal hessian is
//! `p_c (1 - p_c)`. Leaf weights are `-G / (H + lambda)` and splits are
//! chosen by exact greedy search over sorted feature values using the
//! usual second-order gain.
//!
//! Missing values are `NaN`. At every split the missing rows are tried on
//! both sides during training and the better side becomes the node's
//! default direction.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_HESSIAN: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub reg_lambda: f64,
    /// Minimum hessian sum in each child of a split.
    pub min_child_weight: f64,
    /// Minimum gain for a split to be kept.
    pub min_split_gain: f64,
    /// Fraction of features sampled for each tree.
    pub colsample: f64,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            reg_lambda: 1.0,
            min_child_weight: 1.0,
            min_split_gain: 0.0,
            colsample: 1.0,
            seed: 0,
        }
    }
}

impl BoostParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.reg_lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive; reg_lambda and min_child_weight non-negative".into(),
            ));
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return Err(Error::InvalidConfig("colsample must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// A binary regression tree stored as a flat node list; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
    pub max_depth: usize,
}

impl RegressionTree {
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                } => {
                    let v = row[*feature];
                    let go_left = if v.is_nan() { *default_left } else { v < *threshold };
                    idx = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            match &nodes[idx] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedEnsemble {
    pub n_classes: usize,
    pub n_features: usize,
    pub params: BoostParams,
    /// `trees[class][round]`.
    pub trees: Vec<Vec<RegressionTree>>,
    /// Mean soft cross-entropy on the training rows before the first round
    /// and after each round.
    pub train_loss: Vec<f64>,
}

impl BoostedEnsemble {
    pub fn n_rounds(&self) -> usize {
        self.trees.first().map_or(0, Vec::len)
    }

    fn raw_scores(&self, row: ArrayView1<'_, f64>, out: &mut [f64]) {
        let eta = self.params.learning_rate;
        for (c, class_trees) in self.trees.iter().enumerate() {
            let mut s = 0.0;
            for tree in class_trees {
                s += eta * tree.predict_row(row);
            }
            out[c] = s;
        }
    }

    /// Class probabilities for each row, `T x n_classes`.
    pub fn predict_proba(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_features(features, self.n_features)?;
        let mut out = Array2::<f64>::zeros((features.nrows(), self.n_classes));
        let mut scores = vec![0.0; self.n_classes];
        for (t, row) in features.outer_iter().enumerate() {
            self.raw_scores(row, &mut scores);
            softmax_in_place(&mut scores);
            for (c, p) in scores.iter().enumerate() {
                out[[t, c]] = *p;
            }
        }
        Ok(out)
    }
}

fn check_features(features: ArrayView2<'_, f64>, n_features: usize) -> Result<()> {
    if features.ncols() != n_features {
        return Err(Error::DimensionMismatch {
            context: "feature count",
            expected: n_features,
            got: features.ncols(),
        });
    }
    if let Some(((row, column), _)) = features.indexed_iter().find(|(_, v)| v.is_infinite()) {
        return Err(Error::NonFinite {
            context: "features".into(),
            row,
            column,
        });
    }
    Ok(())
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn soft_cross_entropy(probs: &Array2<f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(targets.iter()) {
        if *y > 0.0 {
            total -= y * p.ln();
        }
    }
    total / probs.nrows() as f64
}

/// Fit a softmax ensemble to soft targets (`T x N`, rows summing to one).
pub fn fit_soft(
    features: ArrayView2<'_, f64>,
    soft_targets: ArrayView2<'_, f64>,
    params: &BoostParams,
) -> Result<BoostedEnsemble> {
    params.validate()?;
    let t_len = features.nrows();
    let d = features.ncols();
    let n_classes = soft_targets.ncols();
    if t_len == 0 || d == 0 || n_classes == 0 {
        return Err(Error::InsufficientData("boosting needs rows, features and classes".into()));
    }
    if soft_targets.nrows() != t_len {
        return Err(Error::DimensionMismatch {
            context: "soft target rows",
            expected: t_len,
            got: soft_targets.nrows(),
        });
    }
    check_features(features, d)?;
    for (t, row) in soft_targets.outer_iter().enumerate() {
        if row.iter().any(|y| !y.is_finite() || *y < 0.0) || (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution(format!(
                "soft target row {t} is not a probability vector"
            )));
        }
    }

    let presorted: Vec<Vec<usize>> = (0..d)
        .map(|f| {
            let mut rows: Vec<usize> = (0..t_len).filter(|&t| !features[[t, f]].is_nan()).collect();
            rows.sort_by(|a, b| features[[*a, f]].total_cmp(&features[[*b, f]]));
            rows
        })
        .collect();
    let missing: Vec<Vec<usize>> = (0..d)
        .map(|f| (0..t_len).filter(|&t| features[[t, f]].is_nan()).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_sampled = ((params.colsample * d as f64).round() as usize).clamp(1, d);

    let mut scores = Array2::<f64>::zeros((t_len, n_classes));
    let mut probs = Array2::<f64>::from_elem((t_len, n_classes), 1.0 / n_classes as f64);
    let mut trees: Vec<Vec<RegressionTree>> = vec![Vec::with_capacity(params.n_rounds); n_classes];
    let mut train_loss = vec![soft_cross_entropy(&probs, soft_targets)];
    let mut grad = vec![0.0; t_len];
    let mut hess = vec![0.0; t_len];

    for _round in 0..params.n_rounds {
        let mut round_trees = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            for t in 0..t_len {
                let p = probs[[t, c]];
                grad[t] = p - soft_targets[[t, c]];
                hess[t] = (p * (1.0 - p)).max(MIN_HESSIAN);
            }
            let feature_set: Vec<usize> = if n_sampled < d {
                let mut fs = sample(&mut rng, d, n_sampled).into_vec();
                fs.sort_unstable();
                fs
            } else {
                (0..d).collect()
            };
            let builder = TreeBuilder {
                features,
                presorted: &presorted,
                missing: &missing,
                grad: &grad,
                hess: &hess,
                params,
            };
            round_trees.push(builder.build(&feature_set));
        }
        for (c, tree) in round_trees.into_iter().enumerate() {
            for (t, row) in features.outer_iter().enumerate() {
                scores[[t, c]] += params.learning_rate * tree.predict_row(row);
            }
            trees[c].push(tree);
        }
        let mut buf = vec![0.0; n_classes];
        for t in 0..t_len {
            for c in 0..n_classes {
                buf[c] = scores[[t, c]];
            }
            softmax_in_place(&mut buf);
            for c in 0..n_classes {
                probs[[t, c]] = buf[c];
            }
        }
        train_loss.push(soft_cross_entropy(&probs, soft_targets));
    }

    Ok(BoostedEnsemble {
        n_classes,
        n_features: d,
        params: params.clone(),
        trees,
        train_loss,
    })
}

struct TreeBuilder<'a> {
    features: ArrayView2<'a, f64>,
    presorted: &'a [Vec<usize>],
    missing: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostParams,
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct ScanState {
    g_left: f64,
    h_left: f64,
    last: f64,
    seen: bool,
}

impl TreeBuilder<'_> {
    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.reg_lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.reg_lambda)
    }

    fn gain(&self, gl: f64, hl: f64, g: f64, h: f64) -> Option<f64> {
        let (gr, hr) = (g - gl, h - hl);
        if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
            return None;
        }
        Some(0.5 * (self.score(gl, hl) + self.score(gr, hr) - self.score(g, h)) - self.params.min_split_gain)
    }

    /// Level-wise exact greedy construction. Each level makes one pass over
    /// the presorted rows of every candidate feature.
    fn build(&self, feature_set: &[usize]) -> RegressionTree {
        let t_len = self.grad.len();
        let total_g: f64 = self.grad.iter().sum();
        let total_h: f64 = self.hess.iter().sum();
        let mut nodes = vec![TreeNode::Leaf {
            weight: self.leaf_weight(total_g, total_h),
        }];
        let mut sums = vec![(total_g, total_h)];
        let mut node_of = vec![0usize; t_len];
        let mut open: Vec<usize> = vec![0];

        for _depth in 0..self.params.max_depth {
            if open.is_empty() {
                break;
            }
            let mut slot = vec![usize::MAX; nodes.len()];
            for (k, &n) in open.iter().enumerate() {
                slot[n] = k;
            }
            let mut best: Vec<Option<SplitChoice>> = vec![None; open.len()];

            for &f in feature_set {
                let mut miss = vec![(0.0, 0.0, 0usize); open.len()];
                for &t in &self.missing[f] {
                    let k = slot[node_of[t]];
                    if k != usize::MAX {
                        miss[k].0 += self.grad[t];
                        miss[k].1 += self.hess[t];
                        miss[k].2 += 1;
                    }
                }
                let mut state = vec![ScanState::default(); open.len()];
                for &t in &self.presorted[f] {
                    let k = slot[node_of[t]];
                    if k == usize::MAX {
                        continue;
                    }
                    let x = self.features[[t, f]];
                    let st = state[k];
                    if st.seen && x > st.last {
                        let (g, h) = sums[open[k]];
                        let (mg, mh, mcount) = miss[k];
                        let mut threshold = st.last + (x - st.last) / 2.0;
                        if threshold <= st.last {
                            threshold = x;
                        }
                        let mut consider = |gl: f64, hl: f64, default_left: bool| {
                            if let Some(gain) = self.gain(gl, hl, g, h) {
                                if gain > 0.0 && best[k].is_none_or(|b| gain > b.gain) {
                                    best[k] = Some(SplitChoice {
                                        gain,
                                        feature: f,
                                        threshold,
                                        default_left,
                                    });
                                }
                            }
                        };
                        consider(st.g_left + mg, st.h_left + mh, true);
                        if mcount > 0 {
                            consider(st.g_left, st.h_left, false);
                        }
                    }
                    let st = &mut state[k];
                    st.g_left += self.grad[t];
                    st.h_left += self.hess[t];
                    st.last = x;
                    st.seen = true;
                }
            }

            let mut next_open = Vec::new();
            let mut child_of = vec![None; open.len()];
            for (k, choice) in best.iter().enumerate() {
                let Some(choice) = choice else { continue };
                let left = nodes.len();
                let right = left + 1;
                nodes.push(TreeNode::Leaf { weight: 0.0 });
                nodes.push(TreeNode::Leaf { weight: 0.0 });
                sums.push((0.0, 0.0));
                sums.push((0.0, 0.0));
                nodes[open[k]] = TreeNode::Split {
                    feature: choice.feature,
                    threshold: choice.threshold,
                    default_left: choice.default_left,
                    left,
                    right,
                };
                child_of[k] = Some((*choice, left, right));
                next_open.push(left);
                next_open.push(right);
            }
            if next_open.is_empty() {
                break;
            }
            for t in 0..t_len {
                let n = node_of[t];
                let k = if n < slot.len() { slot[n] } else { usize::MAX };
                if k == usize::MAX {
                    continue;
                }
                if let Some((choice, left, right)) = child_of[k] {
                    let v = self.features[[t, choice.feature]];
                    let go_left = if v.is_nan() { choice.default_left } else { v < choice.threshold };
                    let child = if go_left { left } else { right };
                    node_of[t] = child;
                    sums[child].0 += self.grad[t];
                    sums[child].1 += self.hess[t];
                }
            }
            for &n in &next_open {
                let (g, h) = sums[n];
                nodes[n] = TreeNode::Leaf {
                    weight: self.leaf_weight(g, h),
                };
            }
            open = next_open;
        }

        RegressionTree {
            nodes,
            max_depth: self.params.max_depth,
        }
    }
}
