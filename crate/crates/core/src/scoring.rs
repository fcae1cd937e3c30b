//! Count-matrix feature score.
//!
//! A single feature is decoded into states by a one-dimensional mixture HMM
//! and the states are cross-tabulated against triple-barrier labels. With
//! `MR = M / rowsum(M)`, state `i` contributes
//! `max_j MR_ij * 1 / (1 + H_i) * w_i`, where `H_i` is the natural-log
//! entropy of row `i` and `w_i` its share of all counts. Empty rows
//! contribute nothing.

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::BarSeries;
use crate::error::{Error, Result};
use crate::labeling::{triple_barrier, BarrierConfig, LabelSeries};
use crate::trainers::{fit_mixture_hmm, EmissionConfig, FitConfig};

/// Column order of the count matrix.
pub const LABEL_ORDER: [i8; 3] = [-1, 0, 1];

pub fn label_column(label: i8) -> Option<usize> {
    LABEL_ORDER.iter().position(|l| *l == label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    /// `counts[i][j]`: bars decoded as state `i` with label `LABEL_ORDER[j]`.
    pub counts: Vec<[u64; 3]>,
}

impl CountMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    /// `None` for states that were never decoded.
    pub acc: Vec<Option<f64>>,
    pub entropy: Vec<Option<f64>>,
    pub weight: Vec<f64>,
    pub total: f64,
}

/// Cross-tabulate decoded states against labels, skipping bars whose label
/// is undefined.
pub fn count_matrix(states: &[usize], n_states: usize, labels: &[Option<i8>]) -> Result<CountMatrix> {
    if states.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "states vs labels",
            expected: labels.len(),
            got: states.len(),
        });
    }
    let mut counts = vec![[0u64; 3]; n_states];
    let mut any = false;
    for (s, l) in states.iter().zip(labels) {
        let Some(l) = l else { continue };
        let j = label_column(*l)
            .ok_or_else(|| Error::InvalidConfig(format!("label {l} is not one of -1, 0, 1")))?;
        if *s >= n_states {
            return Err(Error::DimensionMismatch {
                context: "state index",
                expected: n_states,
                got: *s,
            });
        }
        counts[*s][j] += 1;
        any = true;
    }
    if !any {
        return Err(Error::NoDefinedLabels);
    }
    Ok(CountMatrix { counts })
}

pub fn score(counts: &CountMatrix) -> Result<FeatureScore> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::NoDefinedLabels);
    }
    let n = counts.counts.len();
    let mut acc = vec![None; n];
    let mut entropy = vec![None; n];
    let mut weight = vec![0.0; n];
    let mut score = 0.0;
    for (i, row) in counts.counts.iter().enumerate() {
        let row_sum: u64 = row.iter().sum();
        if row_sum == 0 {
            continue;
        }
        let ratios = row.map(|c| c as f64 / row_sum as f64);
        let a = ratios.iter().copied().fold(0.0, f64::max);
        let h: f64 = ratios
            .iter()
            .filter(|r| **r > 0.0)
            .map(|r| -r * r.ln())
            .sum();
        let w = row_sum as f64 / total as f64;
        acc[i] = Some(a);
        entropy[i] = Some(h);
        weight[i] = w;
        score += a / (1.0 + h) * w;
    }
    Ok(FeatureScore {
        acc,
        entropy,
        weight,
        total: score,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRanking {
    /// Descending by total score, ties broken by name.
    pub scored: Vec<(String, FeatureScore)>,
    /// Features whose evaluation failed, with the reason.
    pub failed: Vec<(String, String)>,
}

fn score_feature(
    values: &[f64],
    labels: &LabelSeries,
    fit_cfg: &FitConfig,
) -> Result<FeatureScore> {
    let rows: Vec<usize> = (0..values.len()).filter(|&t| values[t].is_finite()).collect();
    let obs = Array2::from_shape_fn((rows.len(), 1), |(k, _)| values[rows[k]]);
    let model = fit_mixture_hmm(obs.view(), fit_cfg)?;
    let path = model.decode(obs.view())?;
    let aligned: Vec<Option<i8>> = rows.iter().map(|&t| labels.labels[t]).collect();
    let counts = count_matrix(&path.states, fit_cfg.n_states, &aligned)?;
    score(&counts)
}

/// Score each named column with a one-dimensional mixture HMM and rank the
/// results. Bars where a feature is missing are dropped for that feature.
/// A feature that fails to fit is reported in `failed` rather than aborting
/// the ranking.
pub fn rank_features(
    series: &BarSeries,
    feature_names: &[String],
    barrier_cfg: &BarrierConfig,
    fit_cfg: &FitConfig,
) -> Result<FeatureRanking> {
    for name in feature_names {
        series.column(name)?;
    }
    let labels = triple_barrier(series, barrier_cfg)?;
    let mixture_cfg = match &fit_cfg.emission {
        EmissionConfig::Mixture(_) => fit_cfg.clone(),
        EmissionConfig::Boosted { init, .. } => FitConfig {
            emission: EmissionConfig::Mixture(init.clone()),
            ..fit_cfg.clone()
        },
    };

    let results: Vec<(String, Result<FeatureScore>)> = feature_names
        .par_iter()
        .map(|name| {
            let values = series.column(name).expect("checked above");
            (name.clone(), score_feature(values, &labels, &mixture_cfg))
        })
        .collect();

    let mut scored = Vec::new();
    let mut failed = Vec::new();
    for (name, res) in results {
        match res {
            Ok(s) => scored.push((name, s)),
            Err(e) => {
                warn!("feature `{name}` skipped: {e}");
                failed.push((name, e.to_string()));
            }
        }
    }
    scored.sort_by(|a, b| b.1.total.total_cmp(&a.1.total).then_with(|| a.0.cmp(&b.0)));
    Ok(FeatureRanking { scored, failed })
}
