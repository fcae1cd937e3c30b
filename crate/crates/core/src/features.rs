//! Market-derived factor columns computed from OHLC and previous close.

use crate::data::{BarSeries, CLOSE, HIGH, LOW, OPEN, PRE_CLOSE};
use crate::error::{Error, Result};

pub const LOG_RETURN_5: &str = "log_return_5";
pub const LOG_HIGH_LOW: &str = "log_high_low";
pub const CLOSE_TO_PRE: &str = "close_to_pre_close";
pub const OPEN_TO_PRE: &str = "open_to_pre_close";
pub const HIGH_TO_PRE: &str = "high_to_pre_close";
pub const LOW_TO_PRE: &str = "low_to_pre_close";

/// Names of the columns appended by [`derive_market_features`], in order.
pub const MARKET_FEATURES: [&str; 6] = [
    LOG_RETURN_5,
    LOG_HIGH_LOW,
    CLOSE_TO_PRE,
    OPEN_TO_PRE,
    HIGH_TO_PRE,
    LOW_TO_PRE,
];

const RETURN_LAG: usize = 5;

fn positive(series: &BarSeries, name: &str) -> Result<Vec<f64>> {
    let col = series.column(name)?;
    if let Some(row) = col.iter().position(|v| *v <= 0.0) {
        return Err(Error::NonPositivePrice {
            column: name.to_string(),
            row,
        });
    }
    Ok(col.to_vec())
}

/// Appends the six market factors:
///
/// * `log_return_5`: `ln(close_t / close_{t-5})`, missing for the first 5 bars
/// * `log_high_low`: `ln(high / low)`
/// * `close_to_pre_close`, `open_to_pre_close`, `high_to_pre_close`,
///   `low_to_pre_close`: price ratios against the previous close
///
/// Missing inputs give missing outputs.
pub fn derive_market_features(series: &mut BarSeries) -> Result<()> {
    let open = positive(series, OPEN)?;
    let high = positive(series, HIGH)?;
    let low = positive(series, LOW)?;
    let close = positive(series, CLOSE)?;
    let pre = positive(series, PRE_CLOSE)?;
    let n = series.len();

    let ret5 = (0..n)
        .map(|t| {
            if t < RETURN_LAG {
                f64::NAN
            } else {
                (close[t] / close[t - RETURN_LAG]).ln()
            }
        })
        .collect();
    let log_hl = (0..n).map(|t| (high[t] / low[t]).ln()).collect();
    let ratio = |num: &[f64]| -> Vec<f64> { (0..n).map(|t| num[t] / pre[t]).collect() };

    series.push_column(LOG_RETURN_5, ret5)?;
    series.push_column(LOG_HIGH_LOW, log_hl)?;
    series.push_column(CLOSE_TO_PRE, ratio(&close))?;
    series.push_column(OPEN_TO_PRE, ratio(&open))?;
    series.push_column(HIGH_TO_PRE, ratio(&high))?;
    series.push_column(LOW_TO_PRE, ratio(&low))?;
    Ok(())
}

/// Number of leading bars on which `log_return_5` is undefined.
pub fn warmup_bars() -> usize {
    RETURN_LAG
}
