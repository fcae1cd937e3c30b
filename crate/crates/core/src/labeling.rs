//! Triple-barrier labels.
//!
//! For every entry bar `t0` with a full horizon ahead of it, an upper
//! (profit-taking) and a lower (stop-loss) barrier are placed at
//! `close[t0] * (1 +/- mult * sigma[t0])`, where `sigma` is an EWMA estimate
//! of log-return volatility. The bars `t0+1 ..= t0+h` are scanned in order:
//! the first bar that reaches the upper barrier gives `+1`, the lower one
//! `-1`. A bar that reaches both is ambiguous and gives `0`, and so does
//! reaching the vertical barrier `t0+h` without a touch.
//!
//! A touch also requires the price to have moved strictly past the entry
//! price, so zero-width barriers (`sigma = 0` or a zero multiplier) are not
//! touched by a flat path.

use serde::{Deserialize, Serialize};

use crate::data::{BarSeries, HIGH, LOW};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarrierConfig {
    pub pt_mult: f64,
    pub sl_mult: f64,
    /// Vertical barrier, in bars.
    pub horizon: usize,
    pub vol_span: usize,
    pub use_high_low: bool,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            pt_mult: 2.0,
            sl_mult: 2.0,
            horizon: 5,
            vol_span: 20,
            use_high_low: true,
        }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::InvalidConfig("horizon must be at least 1 bar".into()));
        }
        if self.vol_span < 2 {
            return Err(Error::InvalidConfig("vol_span must be at least 2".into()));
        }
        if !(self.pt_mult >= 0.0 && self.sl_mult >= 0.0) {
            return Err(Error::InvalidConfig("barrier multipliers must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Barrier {
    Upper,
    Lower,
    Vertical,
    /// Both horizontal barriers reached within the same bar.
    Ambiguous,
}

impl Barrier {
    pub fn as_str(self) -> &'static str {
        match self {
            Barrier::Upper => "upper",
            Barrier::Lower => "lower",
            Barrier::Vertical => "vertical",
            Barrier::Ambiguous => "ambiguous",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSeries {
    /// `-1`, `0` or `+1`; `None` for the last `horizon` bars.
    pub labels: Vec<Option<i8>>,
    pub touch_index: Vec<Option<usize>>,
    pub barrier: Vec<Option<Barrier>>,
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn defined(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

fn check_prices(close: &[f64], name: &str) -> Result<()> {
    for (row, p) in close.iter().enumerate() {
        if p.is_nan() {
            return Err(Error::NonFinite {
                context: name.to_string(),
                row,
                column: 0,
            });
        }
        if *p <= 0.0 {
            return Err(Error::NonPositivePrice {
                column: name.to_string(),
                row,
            });
        }
    }
    Ok(())
}

/// EWMA volatility of log-returns with decay `alpha = 2 / (span + 1)`.
///
/// With `r_t = ln(close_t / close_{t-1})`, the running mean and variance are
/// seeded with `m_1 = r_1`, `v_1 = r_1^2` and updated as
/// `m_t = (1 - alpha) m_{t-1} + alpha r_t`,
/// `v_t = (1 - alpha) v_{t-1} + alpha (r_t - m_t)^2`.
/// The result is `sqrt(v_t)`; bar 0 has no return and copies bar 1.
pub fn ewma_volatility(close: &[f64], span: usize) -> Result<Vec<f64>> {
    if span < 2 {
        return Err(Error::InvalidConfig("vol_span must be at least 2".into()));
    }
    if close.len() < 2 {
        return Err(Error::InsufficientData("volatility needs at least two bars".into()));
    }
    check_prices(close, "close")?;
    let alpha = 2.0 / (span as f64 + 1.0);
    let mut out = vec![0.0; close.len()];
    let mut mean = 0.0;
    let mut var = 0.0;
    for t in 1..close.len() {
        let r = (close[t] / close[t - 1]).ln();
        if t == 1 {
            mean = r;
            var = r * r;
        } else {
            mean = (1.0 - alpha) * mean + alpha * r;
            var = (1.0 - alpha) * var + alpha * (r - mean) * (r - mean);
        }
        out[t] = var.sqrt();
    }
    out[0] = out[1];
    Ok(out)
}

/// Label a price path given an explicit volatility series. `high`/`low`,
/// when given, are used for the touch tests; missing (`NaN`) cells fall back
/// to the close.
pub fn label_path(
    close: &[f64],
    high: Option<&[f64]>,
    low: Option<&[f64]>,
    sigma: &[f64],
    cfg: &BarrierConfig,
) -> Result<LabelSeries> {
    cfg.validate()?;
    let n = close.len();
    for (name, col) in [("high", high), ("low", low), ("sigma", Some(sigma))] {
        if let Some(col) = col {
            if col.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "barrier input length",
                    expected: n,
                    got: col.len(),
                });
            }
            if name == "sigma" && col.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::InvalidConfig("volatility must be finite and non-negative".into()));
            }
        }
    }
    check_prices(close, "close")?;

    let h = cfg.horizon;
    let mut labels = vec![None; n];
    let mut touch_index = vec![None; n];
    let mut barrier = vec![None; n];
    if n <= h {
        return Ok(LabelSeries {
            labels,
            touch_index,
            barrier,
        });
    }
    let pick = |series: Option<&[f64]>, s: usize| match series {
        Some(v) if !v[s].is_nan() => v[s],
        _ => close[s],
    };

    for t0 in 0..n - h {
        let entry = close[t0];
        let upper = entry * (1.0 + cfg.pt_mult * sigma[t0]);
        let lower = entry * (1.0 - cfg.sl_mult * sigma[t0]);
        let mut outcome = (0i8, t0 + h, Barrier::Vertical);
        for s in t0 + 1..=t0 + h {
            let hi = pick(high, s);
            let lo = pick(low, s);
            let up = hi >= upper && hi > entry;
            let down = lo <= lower && lo < entry;
            if up && down {
                outcome = (0, s, Barrier::Ambiguous);
                break;
            }
            if up {
                outcome = (1, s, Barrier::Upper);
                break;
            }
            if down {
                outcome = (-1, s, Barrier::Lower);
                break;
            }
        }
        labels[t0] = Some(outcome.0);
        touch_index[t0] = Some(outcome.1);
        barrier[t0] = Some(outcome.2);
    }
    Ok(LabelSeries {
        labels,
        touch_index,
        barrier,
    })
}

/// Triple-barrier labels for a bar series, with EWMA volatility of closes.
pub fn triple_barrier(series: &BarSeries, cfg: &BarrierConfig) -> Result<LabelSeries> {
    cfg.validate()?;
    let close = series.close()?;
    if close.len() <= cfg.horizon {
        return Err(Error::InsufficientData(format!(
            "{} bars cannot cover a horizon of {}",
            close.len(),
            cfg.horizon
        )));
    }
    let sigma = ewma_volatility(close, cfg.vol_span)?;
    let (high, low) = if cfg.use_high_low {
        (series.optional(HIGH), series.optional(LOW))
    } else {
        (None, None)
    };
    label_path(close, high, low, &sigma, cfg)
}
