//! Bar series and the wide CSV format used for every input file.
//!
//! A file has a header row. The first column holds ISO-8601 dates or
//! date-times and must be strictly increasing; every other column is a named
//! numeric series. Empty cells and `NaN` mark missing values.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use indexmap::IndexMap;
use ndarray::Array2;

use crate::error::{Error, Result};

pub const OPEN: &str = "open";
pub const HIGH: &str = "high";
pub const LOW: &str = "low";
pub const CLOSE: &str = "close";
pub const PRE_CLOSE: &str = "pre_close";
pub const VOLUME: &str = "volume";

#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub timestamps: Vec<String>,
    /// Named per-bar columns in file order. Prices use the names above;
    /// anything else is a factor column.
    pub columns: IndexMap<String, Vec<f64>>,
}

pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt);
        }
    }
    chrono::DateTime::parse_from_rfc3339(raw).ok().map(|dt| dt.naive_utc())
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{s}` is not a number"),
    })?;
    if v.is_infinite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: "infinite values are not allowed".into(),
        });
    }
    Ok(v)
}

/// Shortest text that parses back to the same `f64`, switching to
/// exponent notation for very large or small magnitudes.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format_float(v)
    }
}

impl BarSeries {
    pub fn new(timestamps: Vec<String>, columns: IndexMap<String, Vec<f64>>) -> Result<Self> {
        let series = Self { timestamps, columns };
        series.validate()?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn optional(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn close(&self) -> Result<&[f64]> {
        self.column(CLOSE)
    }

    /// Checks column lengths, timestamp order and the OHLC ordering
    /// `low <= min(open, close) <= max(open, close) <= high` on every bar
    /// where the values are present.
    pub fn validate(&self) -> Result<()> {
        let n = self.timestamps.len();
        for (name, col) in &self.columns {
            if col.len() != n {
                return Err(Error::InvalidBar {
                    row: col.len().min(n),
                    message: format!("column `{name}` has {} values for {n} timestamps", col.len()),
                });
            }
        }
        let mut prev: Option<NaiveDateTime> = None;
        for (row, raw) in self.timestamps.iter().enumerate() {
            let ts = parse_timestamp(raw).ok_or_else(|| Error::Parse {
                row,
                column: "date".into(),
                message: format!("`{raw}` is not an ISO-8601 date"),
            })?;
            if prev.is_some_and(|p| ts <= p) {
                return Err(Error::InvalidBar {
                    row,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
            prev = Some(ts);
        }
        let get = |name: &str| self.optional(name);
        if let (Some(high), Some(low)) = (get(HIGH), get(LOW)) {
            for row in 0..n {
                let (h, l) = (high[row], low[row]);
                if h.is_nan() || l.is_nan() {
                    continue;
                }
                let mut body: Vec<f64> = [get(OPEN), get(CLOSE)]
                    .into_iter()
                    .flatten()
                    .map(|c| c[row])
                    .filter(|v| !v.is_nan())
                    .collect();
                body.push(l);
                let lo = body.iter().copied().fold(f64::INFINITY, f64::min);
                body.push(h);
                let hi = body.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if lo < l || hi > h {
                    return Err(Error::InvalidBar {
                        row,
                        message: "expected low <= open, close <= high".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() {
            return Err(Error::InsufficientData("csv has no columns".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut columns: IndexMap<String, Vec<f64>> = IndexMap::new();
        for name in &names {
            if columns.insert(name.clone(), Vec::new()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate column `{name}`")));
            }
        }
        let mut timestamps = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            timestamps.push(record.get(0).unwrap_or("").trim().to_string());
            for (k, name) in names.iter().enumerate() {
                let v = parse_cell(record.get(k + 1).unwrap_or(""), row, name)?;
                columns[k].push(v);
            }
        }
        Self::new(timestamps, columns)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.columns.keys().cloned());
        wtr.write_record(&header)?;
        for (row, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.clone()];
            rec.extend(self.columns.values().map(|c| format_cell(c[row])));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(file))
    }

    /// `T x d` matrix of the named columns, in the order given.
    pub fn matrix(&self, names: &[String]) -> Result<Array2<f64>> {
        let cols: Vec<&[f64]> = names.iter().map(|n| self.column(n)).collect::<Result<_>>()?;
        Ok(Array2::from_shape_fn((self.len(), cols.len()), |(t, k)| cols[k][t]))
    }

    /// Rows `start..end` of every column.
    pub fn slice(&self, start: usize, end: usize) -> BarSeries {
        BarSeries {
            timestamps: self.timestamps[start..end].to_vec(),
            columns: self
                .columns
                .iter()
                .map(|(k, v)| (k.clone(), v[start..end].to_vec()))
                .collect(),
        }
    }

    pub fn push_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "appended column",
                expected: self.len(),
                got: values.len(),
            });
        }
        self.columns.insert(name.to_string(), values);
        Ok(())
    }
}
