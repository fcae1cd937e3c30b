//! Fitting loops: Baum-Welch for mixture-emission HMMs and the hybrid loop
//! that alternates posterior computation with boosted-tree emission refits.

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::boosted::{fit_soft, BoostParams, BoostedEnsemble};
use crate::error::{Error, Result};
use crate::gmm::{init_emission, MixtureEmission, MixtureParams};
use crate::hmm::{
    posteriors, reestimate_initial, reestimate_transitions, viterbi, ChainParams, EmissionLogMatrix,
    PosteriorMatrix, StatePath,
};

/// Consecutive sub-tolerance iterations that stop the hybrid loop.
const HYBRID_PATIENCE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissionConfig {
    Mixture(MixtureParams),
    Boosted {
        /// Mixture used for the initial HMM fit.
        #[serde(default)]
        init: MixtureParams,
        #[serde(default)]
        boost: BoostParams,
    },
}

impl Default for EmissionConfig {
    fn default() -> Self {
        EmissionConfig::Mixture(MixtureParams::default())
    }
}

impl EmissionConfig {
    pub fn boosted() -> Self {
        EmissionConfig::Boosted {
            init: MixtureParams::default(),
            boost: BoostParams::default(),
        }
    }

    fn mixture_params(&self) -> &MixtureParams {
        match self {
            EmissionConfig::Mixture(p) => p,
            EmissionConfig::Boosted { init, .. } => init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub n_states: usize,
    pub max_iters: usize,
    /// Minimum relative log-likelihood improvement per iteration.
    pub tol: f64,
    pub seed: u64,
    pub emission: EmissionConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_states: 3,
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
            emission: EmissionConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::InvalidConfig("n_states must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmissionModel {
    Mixture(MixtureEmission),
    /// Discriminative emissions: `ln b_j(o) = ln P(j | o) - ln prior_j`.
    Boosted {
        ensemble: BoostedEnsemble,
        state_priors: Array1<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeModel {
    pub chain: ChainParams,
    pub emission: EmissionModel,
    pub trace: FitTrace,
    /// Log-likelihood of the training observations under exactly these
    /// parameters.
    pub log_likelihood: f64,
}

impl RegimeModel {
    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    pub fn emission_logs(&self, observations: ArrayView2<'_, f64>) -> Result<EmissionLogMatrix> {
        match &self.emission {
            EmissionModel::Mixture(m) => m.log_emissions(observations),
            EmissionModel::Boosted {
                ensemble,
                state_priors,
            } => scaled_likelihood(ensemble, state_priors, observations),
        }
    }

    /// Per-bar state posteriors (the `N x T` "state_proba" matrix).
    pub fn state_proba(&self, observations: ArrayView2<'_, f64>) -> Result<PosteriorMatrix> {
        posteriors(&self.chain, &self.emission_logs(observations)?)
    }

    pub fn decode(&self, observations: ArrayView2<'_, f64>) -> Result<StatePath> {
        viterbi(&self.chain, &self.emission_logs(observations)?)
    }
}

fn scaled_likelihood(
    ensemble: &BoostedEnsemble,
    priors: &Array1<f64>,
    observations: ArrayView2<'_, f64>,
) -> Result<EmissionLogMatrix> {
    if priors.len() != ensemble.n_classes {
        return Err(Error::DimensionMismatch {
            context: "state priors",
            expected: ensemble.n_classes,
            got: priors.len(),
        });
    }
    let probs = ensemble.predict_proba(observations)?;
    let log_priors = priors.mapv(f64::ln);
    let values = Array2::from_shape_fn((ensemble.n_classes, observations.nrows()), |(j, t)| {
        probs[[t, j]].ln() - log_priors[j]
    });
    EmissionLogMatrix::floored(values)
}

fn relative_improvement(prev: f64, next: f64) -> f64 {
    (next - prev) / prev.abs().max(f64::MIN_POSITIVE)
}

fn check_length(observations: ArrayView2<'_, f64>, n_states: usize) -> Result<()> {
    if observations.nrows() <= n_states {
        return Err(Error::InsufficientData(format!(
            "{} observations for {n_states} states",
            observations.nrows()
        )));
    }
    Ok(())
}

/// Baum-Welch for a Gaussian-mixture HMM, starting from a seeded k-means++
/// emission and a uniform chain.
pub fn fit_mixture_hmm(observations: ArrayView2<'_, f64>, config: &FitConfig) -> Result<RegimeModel> {
    config.validate()?;
    check_length(observations, config.n_states)?;
    let emission = init_emission(
        observations,
        config.n_states,
        config.emission.mixture_params(),
        config.seed,
    )?;
    let start = RegimeModel {
        chain: ChainParams::uniform(config.n_states),
        emission: EmissionModel::Mixture(emission),
        trace: FitTrace::default(),
        log_likelihood: f64::NEG_INFINITY,
    };
    refine_mixture_hmm(&start, observations, config.max_iters, config.tol)
}

/// Continue Baum-Welch from an existing mixture model for up to `max_iters`
/// E-steps. The returned parameters are the ones whose likelihood is the last
/// trace entry, so `max_iters == 1` only evaluates the model.
pub fn refine_mixture_hmm(
    model: &RegimeModel,
    observations: ArrayView2<'_, f64>,
    max_iters: usize,
    tol: f64,
) -> Result<RegimeModel> {
    let EmissionModel::Mixture(mut emission) = model.emission.clone() else {
        return Err(Error::InvalidConfig("refine_mixture_hmm needs a mixture model".into()));
    };
    let mut chain = model.chain.clone();
    let mut trace = FitTrace::default();
    let mut last_ll = model.log_likelihood;

    for iter in 0..max_iters {
        let post = posteriors(&chain, &emission.log_emissions(observations)?)?;
        let ll = post.log_likelihood;
        trace.log_likelihoods.push(ll);
        trace.iterations = iter + 1;
        last_ll = ll;
        debug!("baum-welch iteration {iter}: log-likelihood {ll:.6}");
        if iter > 0 {
            let prev = trace.log_likelihoods[iter - 1];
            if relative_improvement(prev, ll) < tol {
                trace.converged = true;
                break;
            }
        }
        if iter + 1 == max_iters {
            break;
        }
        let trans = reestimate_transitions(&post)?;
        let pi = reestimate_initial(&post);
        chain = ChainParams::new(pi, trans)?;
        emission = emission.m_step(observations, post.gamma.view())?;
    }

    Ok(RegimeModel {
        chain,
        emission: EmissionModel::Mixture(emission),
        trace,
        log_likelihood: last_ll,
    })
}

/// Mean-impute missing cells column by column. Only used to seed the mixture
/// initialization of the hybrid loop.
fn impute_missing(observations: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut filled = observations.to_owned();
    for mut col in filled.axis_iter_mut(Axis(1)) {
        let (sum, count) = col
            .iter()
            .filter(|v| v.is_finite())
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        col.mapv_inplace(|v| if v.is_nan() { mean } else { v });
    }
    filled
}

/// Hybrid EM with gradient-boosted emissions.
///
/// 1. Fit a mixture HMM and take its posteriors.
/// 2. Re-estimate the chain from the posteriors, fit the ensemble to
///    `gamma^T`, convert its predictions to scaled likelihoods
///    `P(j | o_t) / prior_j` and recompute posteriors and likelihood.
/// 3. Stop after three consecutive sub-`tol` relative improvements or at
///    `max_iters`, returning the best-likelihood iterate.
///
/// The trace holds the hybrid likelihoods only; they are in scaled-likelihood
/// units and not comparable with the initial mixture fit.
pub fn fit_boosted_hmm(observations: ArrayView2<'_, f64>, config: &FitConfig) -> Result<RegimeModel> {
    config.validate()?;
    check_length(observations, config.n_states)?;
    let EmissionConfig::Boosted { init, boost } = &config.emission else {
        return Err(Error::InvalidConfig("fit_boosted_hmm needs a boosted emission config".into()));
    };
    let seed_obs = impute_missing(observations);
    let init_config = FitConfig {
        emission: EmissionConfig::Mixture(init.clone()),
        ..config.clone()
    };
    let init_model = fit_mixture_hmm(seed_obs.view(), &init_config)?;
    info!(
        "hybrid loop seeded by mixture HMM (log-likelihood {:.4}, {} iterations)",
        init_model.log_likelihood, init_model.trace.iterations
    );
    let mut post = init_model.state_proba(seed_obs.view())?;

    let mut trace = FitTrace::default();
    let mut best: Option<RegimeModel> = None;
    let mut streak = 0;

    for iter in 0..config.max_iters {
        let chain = ChainParams::new(reestimate_initial(&post), reestimate_transitions(&post)?)?;
        let targets = post.gamma.t().to_owned();
        let params = BoostParams {
            seed: boost.seed.wrapping_add(iter as u64),
            ..boost.clone()
        };
        let ensemble = fit_soft(observations, targets.view(), &params)?;
        let probs = ensemble.predict_proba(observations)?;
        let mut priors = probs.mean_axis(Axis(0)).expect("non-empty observations");
        let s = priors.sum();
        priors.mapv_inplace(|p| p / s);

        let candidate = RegimeModel {
            chain,
            emission: EmissionModel::Boosted {
                ensemble,
                state_priors: priors,
            },
            trace: FitTrace::default(),
            log_likelihood: f64::NAN,
        };
        post = candidate.state_proba(observations)?;
        let ll = post.log_likelihood;
        debug!("hybrid iteration {iter}: log-likelihood {ll:.6}");
        trace.log_likelihoods.push(ll);
        trace.iterations = iter + 1;

        if best.as_ref().is_none_or(|b| ll > b.log_likelihood) {
            best = Some(RegimeModel {
                log_likelihood: ll,
                ..candidate
            });
        }
        if iter > 0 {
            let prev = trace.log_likelihoods[iter - 1];
            if relative_improvement(prev, ll) < config.tol {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= HYBRID_PATIENCE {
                trace.converged = true;
                break;
            }
        }
    }

    let mut model = best.expect("max_iters >= 1");
    model.trace = trace;
    Ok(model)
}

/// Fit with whichever emission family the config names.
pub fn fit(observations: ArrayView2<'_, f64>, config: &FitConfig) -> Result<RegimeModel> {
    match config.emission {
        EmissionConfig::Mixture(_) => fit_mixture_hmm(observations, config),
        EmissionConfig::Boosted { .. } => fit_boosted_hmm(observations, config),
    }
}
