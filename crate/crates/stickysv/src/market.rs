//! Option-chain ingestion, quote filters, and moneyness-maturity bucketing
//! for calibration reports.
//!
//! Chains arrive as CSV with columns `quote_date, expiry_date, strike, bid,
//! ask, underlying_close, rate` (ISO-8601 dates, decimal prices). The filter
//! step keeps quotes with 6 < days-to-expiry < 365, a mid of at least one
//! dollar, and a mid respecting the forward-intrinsic arbitrage bound.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::heston::black_scholes_call;

pub const CHAIN_COLUMNS: [&str; 7] = [
    "quote_date",
    "expiry_date",
    "strike",
    "bid",
    "ask",
    "underlying_close",
    "rate",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptionQuote {
    pub quote_date: NaiveDate,
    pub expiry_date: NaiveDate,
    pub strike: f64,
    pub bid: f64,
    pub ask: f64,
    pub underlying_close: f64,
    pub rate: f64,
}

impl OptionQuote {
    /// Bid-ask midpoint: the market price used throughout calibration.
    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }

    /// Half the effective spread (ask minus mid).
    pub fn half_spread(&self) -> f64 {
        self.ask - self.mid()
    }

    pub fn days_to_expiry(&self) -> i64 {
        (self.expiry_date - self.quote_date).num_days()
    }

    /// Time to expiry in years (365-day convention).
    pub fn tau(&self) -> f64 {
        self.days_to_expiry() as f64 / 365.0
    }

    pub fn moneyness(&self) -> f64 {
        self.underlying_close / self.strike
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("missing column `{0}` in chain header")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("model and market price vectors differ in length")]
    LengthMismatch,
    #[error("implied volatility bracket failed for price {0}")]
    NoImpliedVol(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct SkippedRow {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ChainLoad {
    pub quotes: Vec<OptionQuote>,
    pub skipped: Vec<SkippedRow>,
}

/// Parse a chain CSV. Malformed rows (bad numbers, bad dates, inverted
/// bid/ask, non-positive strike, expiry not after the quote date) are
/// reported with their line numbers and skipped; in strict mode the first
/// one is an error instead.
pub fn load_chain(path: &Path, strict: bool) -> Result<ChainLoad, ChainError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut idx = [0usize; 7];
    for (k, name) in CHAIN_COLUMNS.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or(ChainError::MissingColumn(CHAIN_COLUMNS[k]))?;
    }
    let mut quotes = Vec::new();
    let mut skipped = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no as u64 + 2; // 1-based, after the header
        let record = record?;
        match parse_row(&record, &idx) {
            Ok(q) => quotes.push(q),
            Err(message) => {
                if strict {
                    return Err(ChainError::ParseError { line, message });
                }
                skipped.push(SkippedRow { line, message });
            }
        }
    }
    Ok(ChainLoad { quotes, skipped })
}

fn parse_row(record: &csv::StringRecord, idx: &[usize; 7]) -> Result<OptionQuote, String> {
    let field = |k: usize| record.get(idx[k]).unwrap_or("");
    let date = |k: usize| -> Result<NaiveDate, String> {
        NaiveDate::parse_from_str(field(k), "%Y-%m-%d")
            .map_err(|e| format!("column `{}`: {e}", CHAIN_COLUMNS[k]))
    };
    let num = |k: usize| -> Result<f64, String> {
        field(k)
            .parse::<f64>()
            .map_err(|e| format!("column `{}`: {e}", CHAIN_COLUMNS[k]))
    };
    let q = OptionQuote {
        quote_date: date(0)?,
        expiry_date: date(1)?,
        strike: num(2)?,
        bid: num(3)?,
        ask: num(4)?,
        underlying_close: num(5)?,
        rate: num(6)?,
    };
    if !(q.strike > 0.0) {
        return Err("strike must be positive".into());
    }
    if q.bid < 0.0 || q.ask < q.bid {
        return Err(format!("need ask >= bid >= 0, got bid {} ask {}", q.bid, q.ask));
    }
    if q.expiry_date <= q.quote_date {
        return Err("expiry must be after the quote date".into());
    }
    Ok(q)
}

/// Keep the valuation day's quotes passing the standard filters: maturities
/// more than 6 and less than 365 days out, mids of at least one dollar, and
/// mids at or above the forward-intrinsic lower bound. Idempotent.
pub fn filter_chain(quotes: &[OptionQuote], valuation_date: NaiveDate) -> Vec<OptionQuote> {
    quotes
        .iter()
        .filter(|q| {
            if q.quote_date != valuation_date {
                return false;
            }
            let dte = q.days_to_expiry();
            if !(dte > 6 && dte < 365) {
                return false;
            }
            let mid = q.mid();
            if mid < 1.0 {
                return false;
            }
            let bound =
                (q.underlying_close - q.strike * (-q.rate * q.tau()).exp()).max(0.0);
            mid >= bound
        })
        .copied()
        .collect()
}

/// All quote dates present, ascending.
pub fn chain_dates(quotes: &[OptionQuote]) -> Vec<NaiveDate> {
    let mut dates: Vec<NaiveDate> = quotes.iter().map(|q| q.quote_date).collect();
    dates.sort();
    dates.dedup();
    dates
}

pub const MONEYNESS_EDGES: [f64; 5] = [0.94, 0.97, 1.00, 1.03, 1.06];
pub const MATURITY_EDGES_DAYS: [i64; 2] = [60, 180];

/// Moneyness bucket index (0..6): < 0.94, [0.94, 0.97), [0.97, 1.00),
/// [1.00, 1.03), [1.03, 1.06), >= 1.06.
pub fn moneyness_bucket(s_over_k: f64) -> usize {
    MONEYNESS_EDGES.iter().position(|&e| s_over_k < e).unwrap_or(5)
}

/// Maturity bucket index (0..3): < 60 days, [60, 180), >= 180.
pub fn maturity_bucket(days: i64) -> usize {
    MATURITY_EDGES_DAYS.iter().position(|&e| days < e).unwrap_or(2)
}

pub fn moneyness_bucket_label(i: usize) -> &'static str {
    ["<0.94", "0.94-0.97", "0.97-1.00", "1.00-1.03", "1.03-1.06", ">=1.06"][i]
}

pub fn maturity_bucket_label(i: usize) -> &'static str {
    ["<60", "60-180", ">=180"][i]
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BucketCell {
    pub count: usize,
    pub mean_mid: f64,
    pub mean_half_spread: f64,
    pub ape: Option<f64>,
    pub aae: Option<f64>,
}

/// Per (moneyness x maturity) aggregates; pricing-error columns are present
/// when model prices were supplied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BucketReport {
    pub cells: [[BucketCell; 3]; 6],
}

impl BucketReport {
    pub fn total_count(&self) -> usize {
        self.cells.iter().flatten().map(|c| c.count).sum()
    }
}

/// Deterministic bucket assignment and aggregation. Every quote lands in
/// exactly one cell.
pub fn bucket_report(
    quotes: &[OptionQuote],
    model_prices: Option<&[f64]>,
) -> Result<BucketReport, ChainError> {
    if let Some(m) = model_prices {
        if m.len() != quotes.len() {
            return Err(ChainError::LengthMismatch);
        }
    }
    let mut mid_sum = [[0.0f64; 3]; 6];
    let mut spread_sum = [[0.0f64; 3]; 6];
    let mut abs_err_sum = [[0.0f64; 3]; 6];
    let mut count = [[0usize; 3]; 6];
    for (i, q) in quotes.iter().enumerate() {
        let mb = moneyness_bucket(q.moneyness());
        let tb = maturity_bucket(q.days_to_expiry());
        count[mb][tb] += 1;
        mid_sum[mb][tb] += q.mid();
        spread_sum[mb][tb] += q.half_spread();
        if let Some(m) = model_prices {
            abs_err_sum[mb][tb] += (m[i] - q.mid()).abs();
        }
    }
    let mut report = BucketReport::default();
    for mb in 0..6 {
        for tb in 0..3 {
            let n = count[mb][tb];
            report.cells[mb][tb] = BucketCell {
                count: n,
                mean_mid: if n > 0 { mid_sum[mb][tb] / n as f64 } else { 0.0 },
                mean_half_spread: if n > 0 {
                    spread_sum[mb][tb] / n as f64
                } else {
                    0.0
                },
                ape: model_prices.and_then(|_| {
                    (mid_sum[mb][tb] > 0.0).then(|| abs_err_sum[mb][tb] / mid_sum[mb][tb])
                }),
                aae: model_prices.and_then(|_| {
                    (n > 0).then(|| abs_err_sum[mb][tb] / n as f64)
                }),
            };
        }
    }
    Ok(report)
}

/// Black-Scholes implied volatility of a call by bisection to 1e-8; the
/// smile-level diagnostic for calibration plots.
pub fn implied_vol(
    price: f64,
    spot: f64,
    strike: f64,
    rate: f64,
    tau: f64,
) -> Result<f64, ChainError> {
    let (mut lo, mut hi) = (1e-9, 5.0);
    let p_lo = black_scholes_call(spot, strike, rate, lo, tau);
    let p_hi = black_scholes_call(spot, strike, rate, hi, tau);
    if price < p_lo || price > p_hi {
        return Err(ChainError::NoImpliedVol(price));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if black_scholes_call(spot, strike, rate, mid, tau) > price {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-8 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
