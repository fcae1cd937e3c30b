//! End-to-end pipeline: factor groups, per-group regime models, the stacked
//! posterior input and the LSTM head.
//!
//! Everything here works on in-memory [`BarSeries`]; file handling lives in
//! [`crate::commands`].

use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{GroupModel, HeadModel, ModelBundle, SCHEMA_VERSION};
use crate::data::{BarSeries, CLOSE, HIGH, LOW, OPEN, PRE_CLOSE, VOLUME};
use crate::error::{Error, Result};
use crate::features::{derive_market_features, MARKET_FEATURES};
use crate::hmm::PosteriorMatrix;
use crate::labeling::{triple_barrier, BarrierConfig, LabelSeries};
use crate::lstm::{evaluate_probs, fit_lstm, lstm_forward, stack_state_probas, Evaluation, LstmHyper};
use crate::synth::{SynthConfig, TRUE_STATE};
use crate::trainers::{fit, EmissionConfig, FitConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGroup {
    pub name: String,
    #[serde(default)]
    pub columns: Vec<String>,
    /// Overrides the pipeline-wide fit settings for this group.
    #[serde(default)]
    pub fit: Option<FitConfig>,
}

impl FactorGroup {
    fn named(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            fit: None,
        }
    }
}

/// The eight factor families of a typical equity factor library. Only the
/// market group has default columns (the derived market factors); the
/// others are placeholders to be filled from the input's own columns, and
/// empty groups are skipped.
pub fn default_groups() -> Vec<FactorGroup> {
    let mut groups = vec![FactorGroup::named("market", &MARKET_FEATURES)];
    for name in ["quality", "income_risk", "value", "mood", "index", "momentum", "rise"] {
        groups.push(FactorGroup::named(name, &[]));
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub groups: Vec<FactorGroup>,
    pub barrier: BarrierConfig,
    pub fit: FitConfig,
    pub lstm: LstmHyper,
    /// Generator settings for the `synth` command.
    pub synth: Option<SynthConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            groups: default_groups(),
            barrier: BarrierConfig::default(),
            fit: FitConfig::default(),
            lstm: LstmHyper::default(),
            synth: None,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parse a TOML config. Relative paths are taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.train = cfg.train.map(|p| resolve(base, &p));
        cfg.test = cfg.test.map(|p| resolve(base, &p));
        cfg.out_dir = resolve(base, &cfg.out_dir);
        Ok(cfg)
    }

    pub fn train_path(&self) -> Result<&Path> {
        self.train
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no training file configured".into()))
    }

    pub fn test_path(&self) -> Result<&Path> {
        self.test
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no test file configured".into()))
    }

    /// Switch every group between mixture and boosted emissions, keeping the
    /// mixture settings.
    pub fn set_emission(&mut self, boosted: bool) {
        let switch = |fit: &mut FitConfig| {
            fit.emission = match (&fit.emission, boosted) {
                (EmissionConfig::Mixture(m), true) => EmissionConfig::Boosted {
                    init: m.clone(),
                    boost: Default::default(),
                },
                (EmissionConfig::Boosted { init, .. }, false) => EmissionConfig::Mixture(init.clone()),
                (e, _) => e.clone(),
            };
        };
        switch(&mut self.fit);
        for g in &mut self.groups {
            if let Some(f) = g.fit.as_mut() {
                switch(f);
            }
        }
    }

    /// Groups with at least one column.
    pub fn active_groups(&self) -> Vec<&FactorGroup> {
        self.groups.iter().filter(|g| !g.columns.is_empty()).collect()
    }

    /// Fit settings of the `k`-th active group. Seeds are derived from the
    /// pipeline seed so that groups differ but runs repeat.
    pub fn group_fit(&self, k: usize, group: &FactorGroup) -> FitConfig {
        let mut fit = group.fit.clone().unwrap_or_else(|| self.fit.clone());
        fit.seed = self.seed.wrapping_add(k as u64);
        if let EmissionConfig::Boosted { boost, .. } = &mut fit.emission {
            boost.seed = fit.seed;
        }
        fit
    }

    pub fn validate(&self) -> Result<()> {
        self.barrier.validate()?;
        let active = self.active_groups();
        if active.is_empty() {
            return Err(Error::InvalidConfig("no factor group has any columns".into()));
        }
        for (k, g) in active.iter().enumerate() {
            if self.groups.iter().filter(|o| o.name == g.name).count() > 1 {
                return Err(Error::InvalidConfig(format!("duplicate group name `{}`", g.name)));
            }
            self.group_fit(k, g).validate()?;
        }
        Ok(())
    }
}

/// Inputs aligned for the models: leading warmup bars removed, labels
/// computed on the full close path and then cut to match.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub series: BarSeries,
    pub labels: LabelSeries,
    /// Row of the raw file that became row 0.
    pub offset: usize,
}

fn needs_market_features(series: &BarSeries, columns: &[String]) -> bool {
    columns
        .iter()
        .any(|c| MARKET_FEATURES.contains(&c.as_str()) && series.optional(c).is_none())
}

/// Leading rows on which any of `columns` is missing.
pub fn leading_gap(series: &BarSeries, columns: &[String]) -> Result<usize> {
    let cols: Vec<&[f64]> = columns.iter().map(|c| series.column(c)).collect::<Result<_>>()?;
    Ok((0..series.len())
        .find(|&t| cols.iter().all(|c| !c[t].is_nan()))
        .unwrap_or(series.len()))
}

/// Derive market features when a group asks for them, then drop `warmup`
/// leading bars. `warmup = None` measures it from the data.
pub fn prepare(
    mut series: BarSeries,
    columns: &[String],
    barrier: &BarrierConfig,
    warmup: Option<usize>,
) -> Result<Prepared> {
    if needs_market_features(&series, columns) {
        derive_market_features(&mut series)?;
    }
    for c in columns {
        series.column(c)?;
    }
    let offset = match warmup {
        Some(w) => w,
        None => leading_gap(&series, columns)?,
    };
    if offset >= series.len() {
        return Err(Error::InsufficientData(format!(
            "{} bars leave nothing after dropping {offset} warmup bars",
            series.len()
        )));
    }
    let n = series.len();
    // a factor-only file can still be decoded; it just has no labels
    let full = if series.optional(CLOSE).is_some() {
        triple_barrier(&series, barrier)?
    } else {
        LabelSeries {
            labels: vec![None; n],
            touch_index: vec![None; n],
            barrier: vec![None; n],
        }
    };
    let labels = LabelSeries {
        labels: full.labels[offset..].to_vec(),
        // touch indices are rebased onto the trimmed rows
        touch_index: full.touch_index[offset..]
            .iter()
            .map(|t| t.map(|t| t - offset))
            .collect(),
        barrier: full.barrier[offset..].to_vec(),
    };
    Ok(Prepared {
        series: series.slice(offset, n),
        labels,
        offset,
    })
}

/// Rebase row indices in an error onto the raw input rows.
pub fn shift_rows(err: Error, offset: usize) -> Error {
    match err {
        Error::NonFinite { context, row, column } => Error::NonFinite {
            context,
            row: row + offset,
            column,
        },
        Error::NonPositivePrice { column, row } => Error::NonPositivePrice {
            column,
            row: row + offset,
        },
        Error::InvalidBar { row, message } => Error::InvalidBar {
            row: row + offset,
            message,
        },
        other => other,
    }
}

/// Columns in the file that are candidate factors: not prices, volume or the
/// synthetic truth.
pub fn factor_columns(series: &BarSeries) -> Vec<String> {
    const RESERVED: [&str; 7] = [OPEN, HIGH, LOW, CLOSE, PRE_CLOSE, VOLUME, TRUE_STATE];
    series
        .columns
        .keys()
        .filter(|k| !RESERVED.contains(&k.as_str()))
        .cloned()
        .collect()
}

/// Fit one regime model per active group, concurrently. Results keep the
/// config's group order.
pub fn train_groups(config: &PipelineConfig, raw: BarSeries) -> Result<ModelBundle> {
    config.validate()?;
    let active = config.active_groups();
    let mut columns: Vec<String> = Vec::new();
    for g in &active {
        for c in &g.columns {
            if !columns.contains(c) {
                columns.push(c.clone());
            }
        }
    }
    let prepared = prepare(raw, &columns, &config.barrier, None)?;
    let offset = prepared.offset;
    info!(
        "training {} group models on {} bars ({offset} warmup bars dropped)",
        active.len(),
        prepared.series.len()
    );

    let jobs: Vec<(String, Vec<String>, FitConfig)> = active
        .iter()
        .enumerate()
        .map(|(k, g)| (g.name.clone(), g.columns.clone(), config.group_fit(k, g)))
        .collect();
    let fitted: Vec<Result<GroupModel>> = jobs
        .into_par_iter()
        .map(|(name, columns, fit_cfg)| {
            let obs = prepared.series.matrix(&columns)?;
            let model = fit(obs.view(), &fit_cfg).map_err(|e| shift_rows(e, offset))?;
            info!(
                "group `{name}`: {} iterations, log-likelihood {}",
                model.trace.iterations, model.log_likelihood
            );
            Ok(GroupModel {
                name,
                columns,
                fit: fit_cfg,
                model,
            })
        })
        .collect();

    Ok(ModelBundle {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        barrier: config.barrier.clone(),
        warmup: offset,
        groups: fitted.into_iter().collect::<Result<_>>()?,
        head: None,
    })
}

/// Inputs for a trained bundle: same market features and warmup as in
/// training. Columns are looked up by name, so their file order is free.
pub fn prepare_for(bundle: &ModelBundle, raw: BarSeries) -> Result<Prepared> {
    prepare(raw, &bundle.columns(), &bundle.barrier, Some(bundle.warmup))
}

pub fn group_observations(group: &GroupModel, prepared: &Prepared) -> Result<Array2<f64>> {
    prepared.series.matrix(&group.columns)
}

pub fn group_posteriors(bundle: &ModelBundle, prepared: &Prepared) -> Result<Vec<PosteriorMatrix>> {
    bundle
        .groups
        .par_iter()
        .map(|g| {
            let obs = group_observations(g, prepared)?;
            g.model
                .state_proba(obs.view())
                .map_err(|e| shift_rows(e, prepared.offset))
        })
        .collect()
}

/// Fit the LSTM head on the stacked group posteriors of the training data.
pub fn train_head(bundle: &mut ModelBundle, prepared: &Prepared, hyper: &LstmHyper) -> Result<()> {
    let x = stack_state_probas(&group_posteriors(bundle, prepared)?)?;
    let mut hyper = hyper.clone();
    hyper.seed = bundle.seed;
    let fit = fit_lstm(x.view(), &prepared.labels.labels, &hyper)?;
    info!(
        "lstm head: best loss {}, train accuracy {}",
        fit.best_loss, fit.train_accuracy
    );
    bundle.head = Some(HeadModel {
        params: fit.params,
        hyper,
        train_accuracy: fit.train_accuracy,
        best_loss: fit.best_loss,
        loss_trace: fit.loss_trace,
    });
    Ok(())
}

/// `3 x T` class probabilities of the head, in `-1, 0, +1` order.
pub fn predict_proba(bundle: &ModelBundle, prepared: &Prepared) -> Result<Array2<f64>> {
    let head = bundle.head()?;
    let x = stack_state_probas(&group_posteriors(bundle, prepared)?)?;
    lstm_forward(&head.params, x.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub evaluation: Evaluation,
    /// Most frequent label among the evaluated bars (lowest on ties).
    pub majority_label: i8,
    /// Accuracy of always predicting `majority_label`.
    pub majority_accuracy: f64,
}

pub fn evaluate_bundle(bundle: &ModelBundle, prepared: &Prepared) -> Result<EvalReport> {
    let probs = predict_proba(bundle, prepared)?;
    let evaluation = evaluate_probs(probs.view(), &prepared.labels.labels)?;
    let counts = evaluation.confusion.map(|row| row.iter().sum::<u64>());
    let best = crate::lstm::argmax_class(&counts.map(|c| c as f64));
    Ok(EvalReport {
        majority_label: crate::scoring::LABEL_ORDER[best],
        majority_accuracy: counts[best] as f64 / evaluation.n_bars as f64,
        evaluation,
    })
}
