//! Emission-agnostic hidden Markov model machinery.
//!
//! Everything here works on an [`EmissionLogMatrix`] (entry `(j, t)` holds
//! `ln b_j(O_t)`), so the same forward/backward, posterior, Viterbi and
//! transition re-estimation code serves both the Gaussian-mixture and the
//! boosted-tree emission models.
//!
//! The forward pass is normalized at every step. `alpha_hat[., t]` is the
//! filtered distribution `P(S_t | O_0..O_t)` and `log_scale[t]` is
//! `ln P(O_t | O_0..O_{t-1})`, so the sequence log-likelihood is the sum of
//! the log scales. The backward variables are scaled with the same factors,
//! which makes `gamma = alpha_hat * beta_hat` exact with no further division.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest log-density an emission model may report.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

const STOCHASTIC_TOL: f64 = 1e-9;

/// Initial distribution and transition matrix of an N-state chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChain")]
pub struct ChainParams {
    pi: Array1<f64>,
    trans: Array2<f64>,
}

#[derive(Deserialize)]
struct RawChain {
    pi: Array1<f64>,
    trans: Array2<f64>,
}

impl TryFrom<RawChain> for ChainParams {
    type Error = Error;

    fn try_from(raw: RawChain) -> Result<Self> {
        ChainParams::new(raw.pi, raw.trans)
    }
}

fn check_probability_vector(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let sum: f64 = v.sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{what} sums to {sum}, not 1"
        )));
    }
    Ok(())
}

impl ChainParams {
    pub fn new(pi: Array1<f64>, trans: Array2<f64>) -> Result<Self> {
        let n = pi.len();
        if n == 0 {
            return Err(Error::InvalidDistribution("chain has no states".into()));
        }
        if trans.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "transition matrix",
                expected: n,
                got: if trans.nrows() != n { trans.nrows() } else { trans.ncols() },
            });
        }
        check_probability_vector(pi.view(), "initial distribution")?;
        for (i, row) in trans.outer_iter().enumerate() {
            check_probability_vector(row, &format!("transition row {i}"))?;
        }
        Ok(Self { pi, trans })
    }

    /// Uniform initial distribution and uniform transitions.
    pub fn uniform(n_states: usize) -> Self {
        let p = 1.0 / n_states as f64;
        Self {
            pi: Array1::from_elem(n_states, p),
            trans: Array2::from_elem((n_states, n_states), p),
        }
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &Array1<f64> {
        &self.pi
    }

    pub fn trans(&self) -> &Array2<f64> {
        &self.trans
    }

    fn log_trans(&self) -> Array2<f64> {
        self.trans.mapv(f64::ln)
    }
}

/// Per-state, per-step emission log-densities, `N x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionLogMatrix {
    values: Array2<f64>,
}

impl EmissionLogMatrix {
    /// Wraps an `N x T` matrix of log-densities. Every entry must be finite.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(((row, column), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "emission log matrix".into(),
                row,
                column,
            });
        }
        Ok(Self { values })
    }

    /// Like [`EmissionLogMatrix::new`], but first clamps every entry at
    /// [`LOG_DENSITY_FLOOR`]. `-inf` is clamped; NaN and `+inf` are rejected.
    pub fn floored(mut values: Array2<f64>) -> Result<Self> {
        values.mapv_inplace(|v| if v < LOG_DENSITY_FLOOR { LOG_DENSITY_FLOOR } else { v });
        Self::new(values)
    }

    pub fn n_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

fn check_shapes(chain: &ChainParams, emis: &EmissionLogMatrix) -> Result<()> {
    if emis.n_states() != chain.n_states() {
        return Err(Error::DimensionMismatch {
            context: "emission rows vs chain states",
            expected: chain.n_states(),
            got: emis.n_states(),
        });
    }
    if emis.is_empty() {
        return Err(Error::InsufficientData("observation sequence is empty".into()));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Output of the normalized forward recursion.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `N x T`; column `t` is `P(S_t | O_0..O_t)` and sums to 1.
    pub alpha_hat: Array2<f64>,
    /// `ln P(O_t | O_0..O_{t-1})` per step.
    pub log_scale: Array1<f64>,
    pub log_likelihood: f64,
}

impl ForwardPass {
    /// Classic per-step scaling factors `c_t = 1 / P(O_t | O_0..O_{t-1})`,
    /// so that `log_likelihood = -sum(ln c_t)`.
    pub fn scalers(&self) -> Array1<f64> {
        self.log_scale.mapv(|l| (-l).exp())
    }
}

pub fn forward(chain: &ChainParams, emis: &EmissionLogMatrix) -> Result<ForwardPass> {
    check_shapes(chain, emis)?;
    let n = chain.n_states();
    let t_len = emis.len();
    let logs = emis.values();
    let trans = chain.trans();

    let mut alpha = Array2::<f64>::zeros((n, t_len));
    let mut log_scale = Array1::<f64>::zeros(t_len);
    let mut log_joint = vec![0.0; n];
    let mut pred = vec![0.0; n];

    for t in 0..t_len {
        if t == 0 {
            pred.copy_from_slice(chain.pi().as_slice().expect("contiguous pi"));
        } else {
            for (j, p) in pred.iter_mut().enumerate() {
                *p = (0..n).map(|i| alpha[[i, t - 1]] * trans[[i, j]]).sum();
            }
        }
        for j in 0..n {
            log_joint[j] = pred[j].ln() + logs[[j, t]];
        }
        let norm = log_sum_exp(log_joint.iter().copied());
        if !norm.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "observation sequence has zero probability at step {t}"
            )));
        }
        for j in 0..n {
            alpha[[j, t]] = (log_joint[j] - norm).exp();
        }
        log_scale[t] = norm;
    }

    let log_likelihood = log_scale.sum();
    Ok(ForwardPass {
        alpha_hat: alpha,
        log_scale,
        log_likelihood,
    })
}

/// `exp(ln b_j(O_t) - log_scale[t])`, i.e. `b_j(O_t) / P(O_t | past)`.
fn scaled_emission(logs: &Array2<f64>, log_scale: ArrayView1<'_, f64>, j: usize, t: usize) -> f64 {
    (logs[[j, t]] - log_scale[t]).exp()
}

/// Scaled backward variables. The last column is all ones; earlier columns
/// carry the same per-step scaling as the forward pass.
pub fn backward(
    chain: &ChainParams,
    emis: &EmissionLogMatrix,
    log_scale: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    check_shapes(chain, emis)?;
    let n = chain.n_states();
    let t_len = emis.len();
    if log_scale.len() != t_len {
        return Err(Error::DimensionMismatch {
            context: "forward scaling factors",
            expected: t_len,
            got: log_scale.len(),
        });
    }
    let logs = emis.values();
    let trans = chain.trans();

    let mut beta = Array2::<f64>::zeros((n, t_len));
    beta.column_mut(t_len - 1).fill(1.0);
    let mut weighted = vec![0.0; n];
    for t in (0..t_len - 1).rev() {
        for (j, w) in weighted.iter_mut().enumerate() {
            *w = scaled_emission(logs, log_scale, j, t + 1) * beta[[j, t + 1]];
        }
        for i in 0..n {
            beta[[i, t]] = (0..n).map(|j| trans[[i, j]] * weighted[j]).sum();
        }
    }
    Ok(beta)
}

/// State and state-pair posteriors given the whole observation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    /// `N x T`; `gamma[[i, t]] = P(S_t = i | O)`.
    pub gamma: Array2<f64>,
    /// `T - 1` matrices; `xi[t][[i, j]] = P(S_t = i, S_{t+1} = j | O)`.
    pub xi: Vec<Array2<f64>>,
    pub log_likelihood: f64,
}

impl PosteriorMatrix {
    pub fn n_states(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn len(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.ncols() == 0
    }
}

pub fn posteriors(chain: &ChainParams, emis: &EmissionLogMatrix) -> Result<PosteriorMatrix> {
    let fwd = forward(chain, emis)?;
    let beta = backward(chain, emis, fwd.log_scale.view())?;
    let n = chain.n_states();
    let t_len = emis.len();
    let logs = emis.values();
    let trans = chain.trans();

    let mut gamma = &fwd.alpha_hat * &beta;
    for mut col in gamma.axis_iter_mut(Axis(1)) {
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }

    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let mut m = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let right = scaled_emission(logs, fwd.log_scale.view(), j, t + 1) * beta[[j, t + 1]];
            for i in 0..n {
                m[[i, j]] = fwd.alpha_hat[[i, t]] * trans[[i, j]] * right;
            }
        }
        xi.push(m);
    }

    Ok(PosteriorMatrix {
        gamma,
        xi,
        log_likelihood: fwd.log_likelihood,
    })
}

/// Most probable state sequence and its joint log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub states: Vec<usize>,
    pub path_log_score: f64,
}

/// Viterbi decoding. Ties go to the lowest state index, both when choosing a
/// predecessor and when choosing the final state.
pub fn viterbi(chain: &ChainParams, emis: &EmissionLogMatrix) -> Result<StatePath> {
    check_shapes(chain, emis)?;
    let n = chain.n_states();
    let t_len = emis.len();
    let logs = emis.values();
    let log_a = chain.log_trans();

    let mut delta: Vec<f64> = (0..n).map(|j| chain.pi()[j].ln() + logs[[j, 0]]).collect();
    let mut next = vec![0.0; n];
    let mut back = vec![0usize; n * t_len];

    for t in 1..t_len {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, d) in delta.iter().enumerate() {
                let v = d + log_a[[i, j]];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + logs[[j, t]];
            back[t * n + j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let mut last = 0;
    let mut best = f64::NEG_INFINITY;
    for (j, d) in delta.iter().enumerate() {
        if *d > best {
            best = *d;
            last = j;
        }
    }

    let mut states = vec![0usize; t_len];
    states[t_len - 1] = last;
    for t in (1..t_len).rev() {
        states[t - 1] = back[t * n + states[t]];
    }
    Ok(StatePath {
        states,
        path_log_score: best,
    })
}

/// Joint log-probability `ln P(path, O)` of an explicit state path.
pub fn joint_log_score(chain: &ChainParams, emis: &EmissionLogMatrix, path: &[usize]) -> Result<f64> {
    check_shapes(chain, emis)?;
    if path.len() != emis.len() {
        return Err(Error::DimensionMismatch {
            context: "state path length",
            expected: emis.len(),
            got: path.len(),
        });
    }
    let logs = emis.values();
    let mut score = chain.pi()[path[0]].ln() + logs[[path[0], 0]];
    for t in 1..path.len() {
        score += chain.trans()[[path[t - 1], path[t]]].ln() + logs[[path[t], t]];
    }
    Ok(score)
}

/// Transition re-estimate `a_ij = sum_t xi_t(i,j) / sum_t gamma_t(i)` over
/// `t = 0..T-2`. Rows with no posterior mass become uniform.
pub fn reestimate_transitions(post: &PosteriorMatrix) -> Result<Array2<f64>> {
    let n = post.n_states();
    let t_len = post.len();
    if t_len < 2 || post.xi.len() != t_len - 1 {
        return Err(Error::InsufficientData(
            "transition re-estimation needs at least two steps".into(),
        ));
    }
    let mut num = Array2::<f64>::zeros((n, n));
    for m in &post.xi {
        num += m;
    }
    let mut trans = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let den: f64 = (0..t_len - 1).map(|t| post.gamma[[i, t]]).sum();
        let row_mass: f64 = num.row(i).sum();
        if den <= 0.0 || row_mass <= 0.0 {
            trans.row_mut(i).fill(1.0 / n as f64);
            continue;
        }
        for j in 0..n {
            trans[[i, j]] = num[[i, j]] / den;
        }
        // Sum_j xi equals gamma only up to rounding; renormalize so the row
        // stays stochastic to machine precision.
        let s = trans.row(i).sum();
        trans.row_mut(i).mapv_inplace(|v| v / s);
    }
    Ok(trans)
}

/// `pi <- gamma[., 0]`.
pub fn reestimate_initial(post: &PosteriorMatrix) -> Array1<f64> {
    let mut pi = post.gamma.column(0).to_owned();
    let s = pi.sum();
    pi.mapv_inplace(|v| v / s);
    pi
}
