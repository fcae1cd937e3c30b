//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the algorithms under test.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use regime_hmm::hmm::{ChainParams, EmissionLogMatrix};
use regime_hmm::labeling::BarrierConfig;

/// Random probability vector with every entry at least `floor / n`.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + floor).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn random_chain(rng: &mut ChaCha8Rng, n: usize) -> ChainParams {
    let pi = random_simplex(rng, n, 0.05);
    let rows: Vec<f64> = (0..n).flat_map(|_| random_simplex(rng, n, 0.05)).collect();
    ChainParams::new(Array1::from(pi), Array2::from_shape_vec((n, n), rows).unwrap()).unwrap()
}

pub fn random_emissions(rng: &mut ChaCha8Rng, n: usize, t_len: usize) -> EmissionLogMatrix {
    EmissionLogMatrix::new(Array2::from_shape_fn((n, t_len), |_| -6.0 * rng.random::<f64>())).unwrap()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact quantities from summing over all `N^T` state paths.
pub struct Enumeration {
    pub log_likelihood: f64,
    pub gamma: Array2<f64>,
    pub xi: Vec<Array2<f64>>,
    pub best_path: Vec<usize>,
    pub best_score: f64,
}

pub fn all_paths(n: usize, t_len: usize) -> Vec<Vec<usize>> {
    let total = n.pow(t_len as u32);
    (0..total)
        .map(|mut code| {
            let mut path = vec![0; t_len];
            for slot in path.iter_mut().rev() {
                *slot = code % n;
                code /= n;
            }
            path
        })
        .collect()
}

pub fn path_score(chain: &ChainParams, logs: &Array2<f64>, path: &[usize]) -> f64 {
    let mut s = chain.pi()[path[0]].ln() + logs[[path[0], 0]];
    for t in 1..path.len() {
        s += chain.trans()[[path[t - 1], path[t]]].ln() + logs[[path[t], t]];
    }
    s
}

pub fn enumerate(chain: &ChainParams, emis: &EmissionLogMatrix) -> Enumeration {
    let n = chain.n_states();
    let logs = emis.values();
    let t_len = logs.ncols();
    let paths = all_paths(n, t_len);
    let scores: Vec<f64> = paths.iter().map(|p| path_score(chain, logs, p)).collect();
    let log_likelihood = log_sum_exp(&scores);

    let mut gamma = Array2::<f64>::zeros((n, t_len));
    let mut xi = vec![Array2::<f64>::zeros((n, n)); t_len.saturating_sub(1)];
    let mut best = 0;
    for (k, (p, s)) in paths.iter().zip(&scores).enumerate() {
        let w = (s - log_likelihood).exp();
        for t in 0..t_len {
            gamma[[p[t], t]] += w;
            if t + 1 < t_len {
                xi[t][[p[t], p[t + 1]]] += w;
            }
        }
        if *s > scores[best] {
            best = k;
        }
    }
    Enumeration {
        log_likelihood,
        gamma,
        xi,
        best_path: paths[best].clone(),
        best_score: scores[best],
    }
}

/// Plain-loop triple-barrier labels: for each entry bar, collect every bar
/// in the horizon touching each barrier and compare the earliest ones.
pub fn scan_labels(
    close: &[f64],
    high: Option<&[f64]>,
    low: Option<&[f64]>,
    sigma: &[f64],
    cfg: &BarrierConfig,
) -> (Vec<Option<i8>>, Vec<Option<usize>>) {
    let n = close.len();
    let h = cfg.horizon;
    let mut labels = vec![None; n];
    let mut touch = vec![None; n];
    for t0 in 0..n {
        if t0 + h > n - 1 {
            continue;
        }
        let entry = close[t0];
        let up_level = entry * (1.0 + cfg.pt_mult * sigma[t0]);
        let down_level = entry * (1.0 - cfg.sl_mult * sigma[t0]);
        let hi_at = |s: usize| high.map_or(close[s], |v| if v[s].is_nan() { close[s] } else { v[s] });
        let lo_at = |s: usize| low.map_or(close[s], |v| if v[s].is_nan() { close[s] } else { v[s] });
        let ups: Vec<usize> = (t0 + 1..=t0 + h)
            .filter(|&s| hi_at(s) >= up_level && hi_at(s) > entry)
            .collect();
        let downs: Vec<usize> = (t0 + 1..=t0 + h)
            .filter(|&s| lo_at(s) <= down_level && lo_at(s) < entry)
            .collect();
        let (label, at) = match (ups.first(), downs.first()) {
            (None, None) => (0, t0 + h),
            (Some(&u), None) => (1, u),
            (None, Some(&d)) => (-1, d),
            (Some(&u), Some(&d)) if u < d => (1, u),
            (Some(&u), Some(&d)) if d < u => (-1, d),
            (Some(&u), Some(_)) => (0, u),
        };
        labels[t0] = Some(label);
        touch[t0] = Some(at);
    }
    (labels, touch)
}

/// Count-matrix score evaluated term by term.
pub fn direct_score(counts: &[[u64; 3]]) -> f64 {
    let total: u64 = counts.iter().flatten().sum();
    let mut score = 0.0;
    for row in counts {
        let r: u64 = row.iter().sum();
        if r == 0 {
            continue;
        }
        let mr: Vec<f64> = row.iter().map(|c| *c as f64 / r as f64).collect();
        let acc = mr.iter().cloned().fold(0.0, f64::max);
        let mut h = 0.0;
        for p in &mr {
            if *p > 0.0 {
                h -= p * p.ln();
            }
        }
        score += acc * (1.0 / (1.0 + h)) * (r as f64 / total as f64);
    }
    score
}

/// Every permutation of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Decode accuracy after the best relabeling of predicted states; returns the
/// accuracy and `perm` with `perm[predicted] = true`.
pub fn aligned_accuracy(pred: &[usize], truth: &[usize], n: usize) -> (f64, Vec<usize>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for perm in permutations(n) {
        let hits = pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count();
        let acc = hits as f64 / pred.len() as f64;
        if acc > best.0 {
            best = (acc, perm);
        }
    }
    best
}

/// Best single-threshold split of `x` by exhaustive scan of every cut
/// between consecutive distinct sorted values, using the second-order gain.
/// Returns the cut's neighbouring values `(below, above)`.
pub fn exhaustive_split(x: &[f64], g: &[f64], h: &[f64], lambda: f64) -> (f64, f64) {
    let mut xs: Vec<f64> = x.to_vec();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let leaf = |gs: f64, hs: f64| gs * gs / (hs + lambda);
    let (gt, ht): (f64, f64) = (g.iter().sum(), h.iter().sum());
    let mut best = (f64::NEG_INFINITY, (0.0, 0.0));
    for w in xs.windows(2) {
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..x.len() {
            if x[k] <= w[0] {
                gl += g[k];
                hl += h[k];
            }
        }
        let gain = leaf(gl, hl) + leaf(gt - gl, ht - hl) - leaf(gt, ht);
        if gain > best.0 {
            best = (gain, (w[0], w[1]));
        }
    }
    best.1
}
