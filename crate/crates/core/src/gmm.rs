//! Per-state diagonal Gaussian mixture emissions.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{EmissionLogMatrix, LOG_DENSITY_FLOOR};

pub const DEFAULT_VAR_FLOOR: f64 = 1e-6;

/// States whose total posterior mass is below this keep their parameters.
const MIN_STATE_MASS: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureParams {
    pub n_components: usize,
    pub var_floor: f64,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            n_components: 2,
            var_floor: DEFAULT_VAR_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEmission {
    /// `N x M` component weights; each row sums to one.
    pub weights: Array2<f64>,
    /// `N x M x d`.
    pub means: Array3<f64>,
    /// `N x M x d` diagonal variances, all at least `var_floor`.
    pub variances: Array3<f64>,
    pub var_floor: f64,
}

impl MixtureEmission {
    pub fn new(
        weights: Array2<f64>,
        means: Array3<f64>,
        mut variances: Array3<f64>,
        var_floor: f64,
    ) -> Result<Self> {
        let (n, m) = weights.dim();
        if means.dim().0 != n || means.dim().1 != m {
            return Err(Error::DimensionMismatch {
                context: "mixture means",
                expected: n * m,
                got: means.dim().0 * means.dim().1,
            });
        }
        if variances.dim() != means.dim() {
            return Err(Error::DimensionMismatch {
                context: "mixture variances",
                expected: means.len(),
                got: variances.len(),
            });
        }
        for (j, row) in weights.outer_iter().enumerate() {
            if row.iter().any(|w| *w < 0.0 || !w.is_finite()) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution(format!(
                    "mixture weights of state {j} are not a probability vector"
                )));
            }
        }
        variances.mapv_inplace(|v| v.max(var_floor));
        Ok(Self {
            weights,
            means,
            variances,
            var_floor,
        })
    }

    pub fn n_states(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dim(&self) -> usize {
        self.means.dim().2
    }

    fn component_log_density(&self, state: usize, k: usize, obs: ArrayView1<'_, f64>) -> f64 {
        let mut acc = 0.0;
        for (d, x) in obs.iter().enumerate() {
            let var = self.variances[[state, k, d]];
            let diff = x - self.means[[state, k, d]];
            acc -= 0.5 * (LN_2PI + var.ln() + diff * diff / var);
        }
        acc
    }

    /// Unclamped per-component `ln w_jk + ln N(obs; mu_jk, var_jk)`.
    fn weighted_component_logs(&self, state: usize, obs: ArrayView1<'_, f64>, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[[state, k]].ln() + self.component_log_density(state, k, obs);
        }
    }

    /// Mixture log-density of `obs` under `state`, floored at
    /// [`LOG_DENSITY_FLOOR`].
    pub fn log_density(&self, state: usize, obs: ArrayView1<'_, f64>) -> Result<f64> {
        if obs.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "observation dimension",
                expected: self.dim(),
                got: obs.len(),
            });
        }
        if state >= self.n_states() {
            return Err(Error::DimensionMismatch {
                context: "state index",
                expected: self.n_states(),
                got: state,
            });
        }
        let mut parts = vec![0.0; self.n_components()];
        self.weighted_component_logs(state, obs, &mut parts);
        Ok(log_sum_exp(&parts).max(LOG_DENSITY_FLOOR))
    }

    /// Emission log-densities for a `T x d` observation matrix.
    pub fn log_emissions(&self, observations: ArrayView2<'_, f64>) -> Result<EmissionLogMatrix> {
        check_observations(observations, self.dim())?;
        let n = self.n_states();
        let t_len = observations.nrows();
        let mut parts = vec![0.0; self.n_components()];
        let mut values = Array2::<f64>::zeros((n, t_len));
        for (t, obs) in observations.outer_iter().enumerate() {
            for j in 0..n {
                self.weighted_component_logs(j, obs, &mut parts);
                values[[j, t]] = log_sum_exp(&parts);
            }
        }
        EmissionLogMatrix::floored(values)
    }

    /// One EM update of weights, means and variances given state posteriors
    /// `gamma` (`N x T`). Component responsibilities are split out of gamma
    /// in proportion to each component's share of the state density.
    pub fn m_step(&self, observations: ArrayView2<'_, f64>, gamma: ArrayView2<'_, f64>) -> Result<Self> {
        check_observations(observations, self.dim())?;
        let n = self.n_states();
        let m = self.n_components();
        let d = self.dim();
        let t_len = observations.nrows();
        if gamma.dim() != (n, t_len) {
            return Err(Error::DimensionMismatch {
                context: "posterior matrix",
                expected: n * t_len,
                got: gamma.len(),
            });
        }

        let mut next = self.clone();
        let mut parts = vec![0.0; m];
        let mut resp = Array2::<f64>::zeros((m, t_len));
        for j in 0..n {
            let mass: f64 = gamma.row(j).sum();
            if mass < MIN_STATE_MASS {
                continue;
            }
            for (t, obs) in observations.outer_iter().enumerate() {
                self.weighted_component_logs(j, obs, &mut parts);
                let total = log_sum_exp(&parts);
                for k in 0..m {
                    let share = if total.is_finite() {
                        (parts[k] - total).exp()
                    } else {
                        1.0 / m as f64
                    };
                    resp[[k, t]] = gamma[[j, t]] * share;
                }
            }
            for k in 0..m {
                let nk: f64 = resp.row(k).sum();
                next.weights[[j, k]] = nk / mass;
                if nk < MIN_STATE_MASS {
                    continue;
                }
                for dd in 0..d {
                    let mean: f64 = resp
                        .row(k)
                        .iter()
                        .zip(observations.column(dd))
                        .map(|(r, x)| r * x)
                        .sum::<f64>()
                        / nk;
                    let var: f64 = resp
                        .row(k)
                        .iter()
                        .zip(observations.column(dd))
                        .map(|(r, x)| r * (x - mean) * (x - mean))
                        .sum::<f64>()
                        / nk;
                    next.means[[j, k, dd]] = mean;
                    next.variances[[j, k, dd]] = var.max(self.var_floor);
                }
            }
            let ws = next.weights.row(j).sum();
            next.weights.row_mut(j).mapv_inplace(|w| w / ws);
        }
        Ok(next)
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_observations(observations: ArrayView2<'_, f64>, dim: usize) -> Result<()> {
    if observations.ncols() != dim {
        return Err(Error::DimensionMismatch {
            context: "observation dimension",
            expected: dim,
            got: observations.ncols(),
        });
    }
    if let Some(((row, column), _)) = observations.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "observations".into(),
            row,
            column,
        });
    }
    Ok(())
}

/// Seeded k-means++ initialization.
///
/// States are found by k-means++ seeding plus a fixed number of Lloyd passes
/// over all observations (distances on standardized features); each state's
/// components are then seeded the same way within its cluster. States are
/// ordered by the first coordinate of their centroid. Weights start uniform
/// and every variance starts at the global per-feature sample variance.
pub fn init_emission(
    observations: ArrayView2<'_, f64>,
    n_states: usize,
    params: &MixtureParams,
    seed: u64,
) -> Result<MixtureEmission> {
    let t_len = observations.nrows();
    let d = observations.ncols();
    let m = params.n_components;
    if n_states == 0 || m == 0 {
        return Err(Error::InvalidConfig(
            "mixture needs at least one state and one component".into(),
        ));
    }
    check_observations(observations, d)?;
    if t_len < n_states * m {
        return Err(Error::InsufficientData(format!(
            "{t_len} observations cannot seed {n_states} states x {m} components"
        )));
    }

    let mean = observations.mean_axis(Axis(0)).expect("non-empty");
    let var = observations.var_axis(Axis(0), 0.0).mapv(|v| v.max(params.var_floor));
    let scale = var.mapv(f64::sqrt);
    let standardized = Array2::from_shape_fn((t_len, d), |(t, k)| (observations[[t, k]] - mean[k]) / scale[k]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..t_len).collect();
    let (state_centres, assignment) = kmeans(standardized.view(), &all, n_states, &mut rng);

    // order states by the first coordinate of their centroid
    let mut order: Vec<usize> = (0..n_states).collect();
    order.sort_by(|a, b| state_centres[*a][0].total_cmp(&state_centres[*b][0]));

    let mut means = Array3::<f64>::zeros((n_states, m, d));
    for (new_j, &old_j) in order.iter().enumerate() {
        let members: Vec<usize> = all.iter().copied().filter(|&t| assignment[t] == old_j).collect();
        let comp_centres = if members.len() >= m {
            kmeans(standardized.view(), &members, m, &mut rng).0
        } else {
            vec![state_centres[old_j].clone(); m]
        };
        for (k, c) in comp_centres.iter().enumerate() {
            for dd in 0..d {
                means[[new_j, k, dd]] = mean[dd] + c[dd] * scale[dd];
            }
        }
    }

    let weights = Array2::from_elem((n_states, m), 1.0 / m as f64);
    let variances = Array3::from_shape_fn((n_states, m, d), |(_, _, dd)| var[dd]);
    MixtureEmission::new(weights, means, variances, params.var_floor)
}

const LLOYD_PASSES: usize = 20;

fn sq_dist(a: ArrayView1<'_, f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd passes over the rows in `members`.
/// Returns the centroids and a full-length assignment vector (only entries in
/// `members` are meaningful).
fn kmeans(
    data: ArrayView2<'_, f64>,
    members: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = members[rng.random_range(0..members.len())];
    centres.push(data.row(first).to_vec());
    let mut nearest: Vec<f64> = members.iter().map(|&t| sq_dist(data.row(t), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = members.len() - 1;
            for (i, w) in nearest.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..members.len())
        };
        let c = data.row(members[pick]).to_vec();
        for (i, &t) in members.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(data.row(t), &c));
        }
        centres.push(c);
    }

    let d = data.ncols();
    let mut assignment = vec![0usize; data.nrows()];
    for _ in 0..LLOYD_PASSES {
        let mut changed = false;
        for &t in members {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centre) in centres.iter().enumerate() {
                let dist = sq_dist(data.row(t), centre);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignment[t] != best {
                changed = true;
                assignment[t] = best;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for &t in members {
            let c = assignment[t];
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(data.row(t)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    (centres, assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    fn single(mean: f64, var: f64) -> MixtureEmission {
        MixtureEmission::new(
            array![[1.0]],
            Array3::from_elem((1, 1, 1), mean),
            Array3::from_elem((1, 1, 1), var),
            DEFAULT_VAR_FLOOR,
        )
        .unwrap()
    }

    fn normal_pdf(x: f64, mu: f64, var: f64) -> f64 {
        (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn standard_normal_at_mode() {
        let e = single(0.0, 1.0);
        let v = e.log_density(0, array![0.0].view()).unwrap();
        assert_abs_diff_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(v, -0.91894, epsilon = 1e-5);
    }

    #[test]
    fn duplicate_components_collapse() {
        let dup = MixtureEmission::new(
            array![[0.4, 0.6]],
            Array3::from_elem((1, 2, 1), 1.5),
            Array3::from_elem((1, 2, 1), 0.7),
            DEFAULT_VAR_FLOOR,
        )
        .unwrap();
        let one = single(1.5, 0.7);
        for x in [-3.0, 0.0, 1.5, 4.2] {
            assert_abs_diff_eq!(
                dup.log_density(0, array![x].view()).unwrap(),
                one.log_density(0, array![x].view()).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn two_component_closed_form() {
        let e = MixtureEmission::new(
            array![[0.3, 0.7]],
            Array3::from_shape_vec((1, 2, 1), vec![-1.0, 2.0]).unwrap(),
            Array3::from_elem((1, 2, 1), 1.0),
            DEFAULT_VAR_FLOOR,
        )
        .unwrap();
        let expected = (0.3 * normal_pdf(0.0, -1.0, 1.0) + 0.7 * normal_pdf(0.0, 2.0, 1.0)).ln();
        assert_abs_diff_eq!(e.log_density(0, array![0.0].view()).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn density_is_floored_and_dimension_checked() {
        let e = single(0.0, 1e-6);
        assert_eq!(e.log_density(0, array![50.0].view()).unwrap(), LOG_DENSITY_FLOOR);
        assert!(matches!(
            e.log_density(0, array![0.0, 1.0].view()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        let e = MixtureEmission::new(
            array![[0.25, 0.75]],
            Array3::from_shape_vec((1, 2, 1), vec![-0.5, 1.0]).unwrap(),
            Array3::from_shape_vec((1, 2, 1), vec![0.8, 1.2]).unwrap(),
            DEFAULT_VAR_FLOOR,
        )
        .unwrap();
        let sigma = 1.2f64.sqrt();
        let (lo, hi) = (-0.5 - 10.0 * sigma, 1.0 + 10.0 * sigma);
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let f = |x: f64| e.log_density(0, array![x].view()).unwrap().exp();
        let mut integral = 0.5 * (f(lo) + f(hi));
        for i in 1..steps {
            integral += f(lo + i as f64 * h);
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 1e-3, "integral = {integral}");
    }

    #[test]
    fn degenerate_em_gives_sample_moments() {
        let xs = array![[1.0], [2.0], [4.0], [7.0]];
        let e = single(0.0, 1.0);
        let gamma = Array2::from_elem((1, 4), 1.0);
        let next = e.m_step(xs.view(), gamma.view()).unwrap();
        assert_abs_diff_eq!(next.means[[0, 0, 0]], 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(next.variances[[0, 0, 0]], 5.25, epsilon = 1e-12);

        let constant = array![[3.0], [3.0], [3.0]];
        let next = e.m_step(constant.view(), Array2::from_elem((1, 3), 1.0).view()).unwrap();
        assert_eq!(next.variances[[0, 0, 0]], DEFAULT_VAR_FLOOR);
    }

    #[test]
    fn state_without_evidence_is_unchanged() {
        let xs = array![[1.0], [2.0], [3.0]];
        let e = init_emission(xs.view(), 2, &MixtureParams { n_components: 1, var_floor: 1e-6 }, 3).unwrap();
        let gamma = array![[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        let next = e.m_step(xs.view(), gamma.view()).unwrap();
        assert_eq!(next.means.index_axis(Axis(0), 1), e.means.index_axis(Axis(0), 1));
        assert_eq!(next.variances.index_axis(Axis(0), 1), e.variances.index_axis(Axis(0), 1));
        assert_eq!(next.weights.row(1), e.weights.row(1));
    }

    #[test]
    fn init_is_deterministic_and_reduces_to_mean() {
        let xs = Array2::from_shape_fn((40, 2), |(t, k)| ((t * 7 + k * 3) % 11) as f64);
        let p = MixtureParams::default();
        let a = init_emission(xs.view(), 3, &p, 17).unwrap();
        let b = init_emission(xs.view(), 3, &p, 17).unwrap();
        assert_eq!(a, b);

        let one = init_emission(xs.view(), 1, &MixtureParams { n_components: 1, var_floor: 1e-6 }, 5).unwrap();
        let mean: Array1<f64> = xs.mean_axis(Axis(0)).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(one.means[[0, 0, k]], mean[k], epsilon = 1e-12);
        }
        assert!(init_emission(xs.view(), 30, &p, 1).is_err());
    }

    #[test]
    fn log_emissions_reject_non_finite_rows() {
        let e = single(0.0, 1.0);
        let xs = array![[0.0], [f64::NAN]];
        assert!(matches!(
            e.log_emissions(xs.view()),
            Err(Error::NonFinite { row: 1, .. })
        ));
    }
}
