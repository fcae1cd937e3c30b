//! File-level pipeline commands. Each reads its inputs, runs one stage and
//! writes its outputs into the output directory, returning the paths
//! written.
//!
//! Output files:
//!
//! | command          | files |
//! |------------------|-------|
//! | `label`          | `labels.csv` |
//! | `score-features` | `feature_scores.csv` |
//! | `train`          | `bundle.json`, `train_report.csv` |
//! | `decode`         | `decode.csv`, `decode_report.csv` |
//! | `train-lstm`     | `bundle.json` (with head), `lstm_report.json` |
//! | `predict`        | `predictions.csv` |
//! | `eval`           | `eval.json`, `confusion.csv` |
//! | `export-plot`    | `plot_<group>.csv` per group |
//! | `synth`          | `synth.csv`, or `train.csv` and `test.csv` |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::bundle::ModelBundle;
use crate::data::{format_float, BarSeries, CLOSE, HIGH, LOW, OPEN, PRE_CLOSE};
use crate::error::{Error, Result};
use crate::features::derive_market_features;
use crate::labeling::ewma_volatility;
use crate::pipeline::{
    evaluate_bundle, factor_columns, group_observations, group_posteriors, predict_proba, prepare,
    prepare_for, train_groups, train_head, PipelineConfig,
};
use crate::scoring::{rank_features, LABEL_ORDER};
use crate::synth::{synth, SynthConfig};
use crate::trainers::EmissionModel;

pub const BUNDLE_FILE: &str = "bundle.json";

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn label(config: &PipelineConfig, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let series = BarSeries::read_csv(input)?;
    let prepared = prepare(series, &[], &config.barrier, Some(0))?;
    let sigma = ewma_volatility(prepared.series.close()?, config.barrier.vol_span)?;
    let path = out_dir.join("labels.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["date", "close", "volatility", "label", "touch_index", "barrier"])?;
    let close = prepared.series.close()?;
    let l = &prepared.labels;
    for t in 0..prepared.series.len() {
        w.write_record([
            prepared.series.timestamps[t].clone(),
            format_float(close[t]),
            format_float(sigma[t]),
            opt(l.labels[t]),
            opt(l.touch_index[t]),
            opt(l.barrier[t].map(|b| b.as_str())),
        ])?;
    }
    w.flush()?;
    Ok(vec![path])
}

/// Score every factor column of the input (the derived market factors
/// included when prices allow it).
pub fn score_features(config: &PipelineConfig, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut series = BarSeries::read_csv(input)?;
    if [OPEN, HIGH, LOW, CLOSE, PRE_CLOSE].iter().all(|c| series.optional(c).is_some()) {
        derive_market_features(&mut series)?;
    }
    let names = factor_columns(&series);
    let mut fit_cfg = config.fit.clone();
    fit_cfg.seed = config.seed;
    let ranking = rank_features(&series, &names, &config.barrier, &fit_cfg)?;

    let path = out_dir.join("feature_scores.csv");
    let mut w = csv_writer(&path)?;
    let n = fit_cfg.n_states;
    let mut header: Vec<String> = ["rank", "feature", "score"].map(String::from).to_vec();
    for part in ["acc", "entropy", "weight"] {
        header.extend((0..n).map(|i| format!("{part}_{i}")));
    }
    header.push("error".into());
    w.write_record(&header)?;
    // never-decoded states leave their acc and entropy cells empty
    let opt = |v: &Option<f64>| v.map(format_float).unwrap_or_default();
    for (rank, (name, score)) in ranking.scored.iter().enumerate() {
        let mut rec = vec![(rank + 1).to_string(), name.clone(), format_float(score.total)];
        rec.extend(score.acc.iter().map(opt));
        rec.extend(score.entropy.iter().map(opt));
        rec.extend(score.weight.iter().map(|v| format_float(*v)));
        rec.push(String::new());
        w.write_record(&rec)?;
    }
    for (name, reason) in &ranking.failed {
        let mut rec = vec![String::new(), name.clone()];
        rec.resize(header.len() - 1, String::new());
        rec.push(reason.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(vec![path])
}

pub fn train(config: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let series = BarSeries::read_csv(config.train_path()?)?;
    let bundle = train_groups(config, series)?;
    let bundle_path = out_dir.join(BUNDLE_FILE);
    bundle.save(&bundle_path)?;

    let report = out_dir.join("train_report.csv");
    let mut w = csv_writer(&report)?;
    w.write_record(["group", "emission", "columns", "iterations", "converged", "log_likelihood"])?;
    for g in &bundle.groups {
        let emission = match g.model.emission {
            EmissionModel::Mixture(_) => "gmm",
            EmissionModel::Boosted { .. } => "boosted",
        };
        w.write_record([
            g.name.clone(),
            emission.to_string(),
            g.columns.join(" "),
            g.model.trace.iterations.to_string(),
            g.model.trace.converged.to_string(),
            format_float(g.model.log_likelihood),
        ])?;
    }
    w.flush()?;
    Ok(vec![bundle_path, report])
}

pub fn decode(bundle_path: &Path, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let bundle = ModelBundle::load(bundle_path)?;
    let prepared = prepare_for(&bundle, BarSeries::read_csv(input)?)?;
    let mut paths = Vec::new();
    let mut lls = Vec::new();
    for g in &bundle.groups {
        let obs = group_observations(g, &prepared)?;
        let post = g.model.state_proba(obs.view())?;
        let path = g.model.decode(obs.view())?;
        lls.push((post.log_likelihood, path.path_log_score));
        paths.push(path.states);
    }

    let decode = out_dir.join("decode.csv");
    let mut w = csv_writer(&decode)?;
    let mut header = vec!["date".to_string()];
    header.extend(bundle.groups.iter().map(|g| format!("state_{}", g.name)));
    w.write_record(&header)?;
    for t in 0..prepared.series.len() {
        let mut rec = vec![prepared.series.timestamps[t].clone()];
        rec.extend(paths.iter().map(|p| p[t].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let report = out_dir.join("decode_report.csv");
    let mut w = csv_writer(&report)?;
    w.write_record(["group", "log_likelihood", "path_log_score"])?;
    for (g, (ll, score)) in bundle.groups.iter().zip(&lls) {
        w.write_record([g.name.clone(), format_float(*ll), format_float(*score)])?;
    }
    w.flush()?;
    Ok(vec![decode, report])
}

pub fn train_lstm(config: &PipelineConfig, bundle_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let mut bundle = ModelBundle::load(bundle_path)?;
    let prepared = prepare_for(&bundle, BarSeries::read_csv(config.train_path()?)?)?;
    train_head(&mut bundle, &prepared, &config.lstm)?;
    let out_bundle = out_dir.join(BUNDLE_FILE);
    bundle.save(&out_bundle)?;

    let head = bundle.head()?;
    let report = out_dir.join("lstm_report.json");
    let body = serde_json::json!({
        "train_accuracy": head.train_accuracy,
        "best_loss": head.best_loss,
        "epochs": head.hyper.epochs,
        "input_dim": head.params.input_dim,
        "hidden_dim": head.params.hidden_dim,
    });
    std::fs::write(&report, serde_json::to_string_pretty(&body)? + "\n")?;
    Ok(vec![out_bundle, report])
}

pub fn predict(bundle_path: &Path, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let bundle = ModelBundle::load(bundle_path)?;
    let prepared = prepare_for(&bundle, BarSeries::read_csv(input)?)?;
    let probs = predict_proba(&bundle, &prepared)?;
    let path = out_dir.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["date", "p_down", "p_flat", "p_up", "predicted"])?;
    for t in 0..probs.ncols() {
        let col: Vec<f64> = probs.column(t).to_vec();
        let pred = LABEL_ORDER[crate::lstm::argmax_class(&col)];
        w.write_record([
            prepared.series.timestamps[t].clone(),
            format_float(col[0]),
            format_float(col[1]),
            format_float(col[2]),
            pred.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![path])
}

/// Accuracy on the configured test file. Only the test file and the bundle
/// are read.
pub fn eval(config: &PipelineConfig, bundle_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let bundle = ModelBundle::load(bundle_path)?;
    let prepared = prepare_for(&bundle, BarSeries::read_csv(config.test_path()?)?)?;
    let report = evaluate_bundle(&bundle, &prepared)?;

    let json = out_dir.join("eval.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)? + "\n")?;
    let confusion = out_dir.join("confusion.csv");
    let mut w = csv_writer(&confusion)?;
    w.write_record(["true\\pred", "-1", "0", "1"])?;
    for (i, row) in report.evaluation.confusion.iter().enumerate() {
        let mut rec = vec![LABEL_ORDER[i].to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(vec![json, confusion])
}

pub fn export_plot(bundle_path: &Path, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let bundle = ModelBundle::load(bundle_path)?;
    let prepared = prepare_for(&bundle, BarSeries::read_csv(input)?)?;
    let close = prepared.series.close()?;
    let posts = group_posteriors(&bundle, &prepared)?;
    let mut written = Vec::new();
    for (g, post) in bundle.groups.iter().zip(&posts) {
        let obs = group_observations(g, &prepared)?;
        let states = g.model.decode(obs.view())?.states;
        let path = out_dir.join(format!("plot_{}.csv", g.name));
        let mut w = csv_writer(&path)?;
        let mut header: Vec<String> = ["date", "close", "state"].map(String::from).to_vec();
        header.extend((0..g.model.n_states()).map(|i| format!("p_state_{i}")));
        header.push("label".into());
        w.write_record(&header)?;
        for t in 0..prepared.series.len() {
            let mut rec = vec![
                prepared.series.timestamps[t].clone(),
                format_float(close[t]),
                states[t].to_string(),
            ];
            rec.extend(post.gamma.column(t).iter().map(|p| format_float(*p)));
            rec.push(opt(prepared.labels.labels[t]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Write a synthetic series. With `train_fraction`, the series is split in
/// time into `train.csv` and `test.csv`.
pub fn write_synth(config: &SynthConfig, train_fraction: Option<f64>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out_dir)?;
    let series = synth(config)?;
    match train_fraction {
        None => {
            let path = out_dir.join("synth.csv");
            series.write_csv(&path)?;
            Ok(vec![path])
        }
        Some(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig("train fraction must lie in (0, 1)".into()));
            }
            let cut = (series.len() as f64 * f).round() as usize;
            let (train, test) = (out_dir.join("train.csv"), out_dir.join("test.csv"));
            series.slice(0, cut).write_csv(&train)?;
            series.slice(cut, series.len()).write_csv(&test)?;
            Ok(vec![train, test])
        }
    }
}

/// Write a line-per-path manifest, handy for scripts.
pub fn print_paths<W: Write>(mut out: W, paths: &[PathBuf]) -> Result<()> {
    for p in paths {
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}
