//! Single-layer LSTM sequence labeller over stacked state posteriors.
//!
//! Input is a `k x T` matrix (rows are features, columns are bars). Each bar
//! gets a probability over the three label classes `-1, 0, +1` (indices 0, 1,
//! 2). The cell is the standard one:
//!
//! ```text
//! z_t = [h_{t-1}; x_t]
//! f = sigmoid(W_f z + b_f)    i = sigmoid(W_i z + b_i)
//! g = tanh(W_c z + b_c)       o = sigmoid(W_o z + b_o)
//! c_t = f * c_{t-1} + i * g   h_t = o * tanh(c_t)
//! p_t = softmax(W_y h_t + b_y)
//! ```
//!
//! with `c_0 = h_0 = 0`. Training is full-sequence BPTT with plain gradient
//! descent and global gradient-norm clipping.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::PosteriorMatrix;
use crate::scoring::label_column;

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Gate weights, each `hidden x (hidden + input)`.
    pub w_forget: Array2<f64>,
    pub w_input: Array2<f64>,
    pub w_cand: Array2<f64>,
    pub w_output: Array2<f64>,
    pub b_forget: Array1<f64>,
    pub b_input: Array1<f64>,
    pub b_cand: Array1<f64>,
    pub b_output: Array1<f64>,
    /// Readout, `3 x hidden`.
    pub w_readout: Array2<f64>,
    pub b_readout: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let gate = || Array2::zeros((hidden_dim, hidden_dim + input_dim));
        Self {
            input_dim,
            hidden_dim,
            w_forget: gate(),
            w_input: gate(),
            w_cand: gate(),
            w_output: gate(),
            b_forget: Array1::zeros(hidden_dim),
            b_input: Array1::zeros(hidden_dim),
            b_cand: Array1::zeros(hidden_dim),
            b_output: Array1::zeros(hidden_dim),
            w_readout: Array2::zeros((N_CLASSES, hidden_dim)),
            b_readout: Array1::zeros(N_CLASSES),
        }
    }

    /// Uniform `+/- 1/sqrt(hidden)` weights, zero biases except a forget
    /// bias of one.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut p = Self::zeros(input_dim, hidden_dim);
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in [&mut p.w_forget, &mut p.w_input, &mut p.w_cand, &mut p.w_output, &mut p.w_readout] {
            w.mapv_inplace(|_| rng.random_range(-scale..scale));
        }
        p.b_forget.fill(1.0);
        p
    }

    pub fn slices(&self) -> [&[f64]; 10] {
        [
            self.w_forget.as_slice().expect("standard layout"),
            self.w_input.as_slice().expect("standard layout"),
            self.w_cand.as_slice().expect("standard layout"),
            self.w_output.as_slice().expect("standard layout"),
            self.b_forget.as_slice().expect("standard layout"),
            self.b_input.as_slice().expect("standard layout"),
            self.b_cand.as_slice().expect("standard layout"),
            self.b_output.as_slice().expect("standard layout"),
            self.w_readout.as_slice().expect("standard layout"),
            self.b_readout.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.w_forget.as_slice_mut().expect("standard layout"),
            self.w_input.as_slice_mut().expect("standard layout"),
            self.w_cand.as_slice_mut().expect("standard layout"),
            self.w_output.as_slice_mut().expect("standard layout"),
            self.b_forget.as_slice_mut().expect("standard layout"),
            self.b_input.as_slice_mut().expect("standard layout"),
            self.b_cand.as_slice_mut().expect("standard layout"),
            self.b_output.as_slice_mut().expect("standard layout"),
            self.w_readout.as_slice_mut().expect("standard layout"),
            self.b_readout.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// All parameters in a fixed order (gate weights, gate biases, readout).
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.nrows() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "lstm input rows",
                expected: self.input_dim,
                got: x.nrows(),
            });
        }
        if let Some(((row, column), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "lstm input".into(),
                row,
                column,
            });
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softmax3(logits: [f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|l| (l - max).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Activations kept for the backward pass, each `hidden x T`.
struct Tape {
    f: Array2<f64>,
    i: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
    probs: Array2<f64>,
}

fn run(params: &LstmParams, x: ArrayView2<'_, f64>) -> Tape {
    let hd = params.hidden_dim;
    let k = params.input_dim;
    let t_len = x.ncols();
    let mut tape = Tape {
        f: Array2::zeros((hd, t_len)),
        i: Array2::zeros((hd, t_len)),
        g: Array2::zeros((hd, t_len)),
        o: Array2::zeros((hd, t_len)),
        c: Array2::zeros((hd, t_len)),
        tanh_c: Array2::zeros((hd, t_len)),
        h: Array2::zeros((hd, t_len)),
        probs: Array2::zeros((N_CLASSES, t_len)),
    };
    let mut z = vec![0.0; hd + k];
    let mut c_prev = vec![0.0; hd];
    let affine = |w: &Array2<f64>, b: &Array1<f64>, row: usize, z: &[f64]| -> f64 {
        b[row] + w.row(row).iter().zip(z).map(|(a, b)| a * b).sum::<f64>()
    };
    for t in 0..t_len {
        for r in 0..k {
            z[hd + r] = x[[r, t]];
        }
        for u in 0..hd {
            let f = sigmoid(affine(&params.w_forget, &params.b_forget, u, &z));
            let i = sigmoid(affine(&params.w_input, &params.b_input, u, &z));
            let g = affine(&params.w_cand, &params.b_cand, u, &z).tanh();
            let o = sigmoid(affine(&params.w_output, &params.b_output, u, &z));
            let c = f * c_prev[u] + i * g;
            let tc = c.tanh();
            tape.f[[u, t]] = f;
            tape.i[[u, t]] = i;
            tape.g[[u, t]] = g;
            tape.o[[u, t]] = o;
            tape.c[[u, t]] = c;
            tape.tanh_c[[u, t]] = tc;
            tape.h[[u, t]] = o * tc;
        }
        let mut logits = [0.0; N_CLASSES];
        for (cls, l) in logits.iter_mut().enumerate() {
            *l = params.b_readout[cls]
                + (0..hd).map(|u| params.w_readout[[cls, u]] * tape.h[[u, t]]).sum::<f64>();
        }
        let p = softmax3(logits);
        for cls in 0..N_CLASSES {
            tape.probs[[cls, t]] = p[cls];
        }
        for u in 0..hd {
            c_prev[u] = tape.c[[u, t]];
            z[u] = tape.h[[u, t]];
        }
    }
    tape
}

/// Per-bar class probabilities, `3 x T`.
pub fn lstm_forward(params: &LstmParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    params.check_input(x)?;
    Ok(run(params, x).probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Average over bars with a defined label.
    Mean,
    Sum,
}

fn targets(labels: &[Option<i8>], t_len: usize) -> Result<Vec<Option<usize>>> {
    if labels.len() != t_len {
        return Err(Error::DimensionMismatch {
            context: "labels vs input columns",
            expected: t_len,
            got: labels.len(),
        });
    }
    labels
        .iter()
        .map(|l| match l {
            None => Ok(None),
            Some(v) => label_column(*v)
                .map(Some)
                .ok_or_else(|| Error::InvalidConfig(format!("label {v} is not one of -1, 0, 1"))),
        })
        .collect()
}

/// Cross-entropy loss and its gradient with respect to every parameter.
pub fn lstm_gradients(
    params: &LstmParams,
    x: ArrayView2<'_, f64>,
    labels: &[Option<i8>],
    reduction: Reduction,
) -> Result<(f64, LstmParams)> {
    params.check_input(x)?;
    let t_len = x.ncols();
    let ys = targets(labels, t_len)?;
    let n_defined = ys.iter().filter(|y| y.is_some()).count();
    if n_defined == 0 {
        return Err(Error::NoDefinedLabels);
    }
    let norm = match reduction {
        Reduction::Mean => 1.0 / n_defined as f64,
        Reduction::Sum => 1.0,
    };
    let hd = params.hidden_dim;
    let k = params.input_dim;
    let tape = run(params, x);
    let mut grad = LstmParams::zeros(k, hd);

    let mut loss = 0.0;
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut dh = vec![0.0; hd];
    let mut z = vec![0.0; hd + k];
    let mut da = [vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]];

    for t in (0..t_len).rev() {
        dh.copy_from_slice(&dh_next);
        if let Some(y) = ys[t] {
            loss -= tape.probs[[y, t]].ln() * norm;
            for cls in 0..N_CLASSES {
                let dl = (tape.probs[[cls, t]] - if cls == y { 1.0 } else { 0.0 }) * norm;
                grad.b_readout[cls] += dl;
                for u in 0..hd {
                    grad.w_readout[[cls, u]] += dl * tape.h[[u, t]];
                    dh[u] += params.w_readout[[cls, u]] * dl;
                }
            }
        }

        for u in 0..hd {
            z[u] = if t > 0 { tape.h[[u, t - 1]] } else { 0.0 };
        }
        for r in 0..k {
            z[hd + r] = x[[r, t]];
        }
        for u in 0..hd {
            let (f, i, g, o, tc) = (
                tape.f[[u, t]],
                tape.i[[u, t]],
                tape.g[[u, t]],
                tape.o[[u, t]],
                tape.tanh_c[[u, t]],
            );
            let c_prev = if t > 0 { tape.c[[u, t - 1]] } else { 0.0 };
            let d_o = dh[u] * tc;
            let dc = dh[u] * o * (1.0 - tc * tc) + dc_next[u];
            da[0][u] = dc * c_prev * f * (1.0 - f);
            da[1][u] = dc * g * i * (1.0 - i);
            da[2][u] = dc * i * (1.0 - g * g);
            da[3][u] = d_o * o * (1.0 - o);
            dc_next[u] = dc * f;
        }

        dh_next.fill(0.0);
        let gates = [
            (&params.w_forget, &mut grad.w_forget, &mut grad.b_forget),
            (&params.w_input, &mut grad.w_input, &mut grad.b_input),
            (&params.w_cand, &mut grad.w_cand, &mut grad.b_cand),
            (&params.w_output, &mut grad.w_output, &mut grad.b_output),
        ];
        for ((w, gw, gb), d) in gates.into_iter().zip(&da) {
            for u in 0..hd {
                let du = d[u];
                if du == 0.0 {
                    continue;
                }
                gb[u] += du;
                let mut grow = gw.row_mut(u);
                let wrow = w.row(u);
                for (col, zc) in z.iter().enumerate() {
                    grow[col] += du * zc;
                }
                for (prev, wv) in dh_next.iter_mut().zip(wrow.iter()) {
                    *prev += wv * du;
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over bars with a defined label.
pub fn lstm_loss(params: &LstmParams, x: ArrayView2<'_, f64>, labels: &[Option<i8>]) -> Result<f64> {
    let probs = lstm_forward(params, x)?;
    let ys = targets(labels, x.ncols())?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (t, y) in ys.iter().enumerate() {
        if let Some(y) = y {
            total -= probs[[*y, t]].ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoDefinedLabels);
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmHyper {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LstmHyper {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            learning_rate: 0.05,
            epochs: 300,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmFit {
    pub params: LstmParams,
    pub train_accuracy: f64,
    /// Loss of the iterate evaluated at each epoch, plus the final iterate.
    pub loss_trace: Vec<f64>,
    pub best_loss: f64,
}

/// Gradient descent on the mean cross-entropy, keeping the best-loss
/// parameters seen.
pub fn fit_lstm(x: ArrayView2<'_, f64>, labels: &[Option<i8>], hyper: &LstmHyper) -> Result<LstmFit> {
    if hyper.hidden_dim == 0 || !(hyper.learning_rate > 0.0) || !(hyper.clip_norm > 0.0) {
        return Err(Error::InvalidConfig(
            "lstm needs hidden_dim >= 1 and positive learning rate and clip norm".into(),
        ));
    }
    let mut params = LstmParams::init(x.nrows(), hyper.hidden_dim, hyper.seed);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut loss_trace = Vec::with_capacity(hyper.epochs + 1);

    for _ in 0..hyper.epochs {
        let (loss, grad) = lstm_gradients(&params, x, labels, Reduction::Mean)?;
        loss_trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best = params.clone();
        }
        let g = grad.flatten();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if norm > hyper.clip_norm { hyper.clip_norm / norm } else { 1.0 };
        let step = hyper.learning_rate * scale;
        for (p, gs) in params.slices_mut().into_iter().zip(grad.slices()) {
            for (pv, gv) in p.iter_mut().zip(gs) {
                *pv -= step * gv;
            }
        }
    }
    let final_loss = lstm_loss(&params, x, labels)?;
    loss_trace.push(final_loss);
    if final_loss < best_loss {
        best_loss = final_loss;
        best = params;
    }
    let train_accuracy = evaluate(&best, x, labels)?.accuracy;
    Ok(LstmFit {
        params: best,
        train_accuracy,
        loss_trace,
        best_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Rows are true labels, columns predictions, both in `-1, 0, +1` order.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub n_bars: usize,
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (c, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = c;
        }
    }
    best
}

pub fn evaluate(params: &LstmParams, x: ArrayView2<'_, f64>, labels: &[Option<i8>]) -> Result<Evaluation> {
    let probs = lstm_forward(params, x)?;
    evaluate_probs(probs.view(), labels)
}

/// Accuracy and confusion of `3 x T` class probabilities.
pub fn evaluate_probs(probs: ArrayView2<'_, f64>, labels: &[Option<i8>]) -> Result<Evaluation> {
    let ys = targets(labels, probs.ncols())?;
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    let mut hits = 0usize;
    let mut n = 0usize;
    for (t, y) in ys.iter().enumerate() {
        let Some(y) = y else { continue };
        let col: Vec<f64> = probs.column(t).to_vec();
        let pred = argmax_class(&col);
        confusion[*y][pred] += 1;
        n += 1;
        if pred == *y {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoDefinedLabels);
    }
    Ok(Evaluation {
        accuracy: hits as f64 / n as f64,
        confusion,
        n_bars: n,
    })
}

/// Row-concatenate `N x T` posterior matrices into a `(K N) x T` input.
pub fn stack_state_probas(posteriors: &[PosteriorMatrix]) -> Result<Array2<f64>> {
    let gammas: Vec<_> = posteriors.iter().map(|p| p.gamma.view()).collect();
    if gammas.is_empty() {
        return Err(Error::InsufficientData("nothing to stack".into()));
    }
    let t_len = gammas[0].ncols();
    for g in &gammas {
        if g.ncols() != t_len {
            return Err(Error::DimensionMismatch {
                context: "posterior lengths",
                expected: t_len,
                got: g.ncols(),
            });
        }
    }
    Ok(ndarray::concatenate(Axis(0), &gammas).expect("equal column counts"))
}
