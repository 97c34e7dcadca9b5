//! Affine coefficients from daily prices, the amount-weighted conventional
//! index, and OU short-rate parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AffineCoeff;
use crate::rng::NormalStream;

pub const DAYS_PER_YEAR: f64 = 365.25;
const MIN_OBSERVATIONS: usize = 30;
const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    pub prices: Vec<f64>,
    pub amount_issued: f64,
    /// Years to maturity from the first date.
    pub maturity: f64,
}

impl PriceSeries {
    pub fn new(ticker: &str, dates: Vec<NaiveDate>, prices: Vec<f64>, amount_issued: f64, maturity: f64) -> Result<Self> {
        if dates.len() != prices.len() {
            return Err(Error::Dimension(format!("{} dates but {} prices", dates.len(), prices.len())));
        }
        if let Some(w) = dates.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(format!("{ticker}: dates not strictly increasing at {}", w[1])));
        }
        if let Some(p) = prices.iter().find(|p| !(**p > 0.0)) {
            return Err(Error::InvalidParameter(format!("{ticker}: non-positive price {p}")));
        }
        Ok(PriceSeries { ticker: ticker.to_string(), dates, prices, amount_issued, maturity })
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Year fractions since the first date.
    pub fn times(&self) -> Vec<f64> {
        let d0 = self.dates[0];
        self.dates.iter().map(|d| (*d - d0).num_days() as f64 / DAYS_PER_YEAR).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentMeta {
    pub ticker: String,
    pub maturity_years: f64,
    pub amount_issued: f64,
}

fn data_lines<R: BufRead>(input: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    input
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty() && !s.starts_with('#')))
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse().map_err(|_| Error::Parse { line, message: format!("bad {what} '{}'", field.trim()) })
}

/// Reads `date,ticker,price` rows (ISO dates, header line required).
pub fn read_prices<R: BufRead>(input: R) -> Result<BTreeMap<String, Vec<(NaiveDate, f64)>>> {
    let mut out: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    let mut header_seen = false;
    for (line, text) in data_lines(input) {
        let text = text?;
        let fields: Vec<&str> = text.split(',').collect();
        if !header_seen {
            header_seen = true;
            let names: Vec<String> = fields.iter().map(|f| f.trim().to_ascii_lowercase()).collect();
            if names != ["date", "ticker", "price"] {
                return Err(Error::Parse { line, message: format!("expected header date,ticker,price, got '{text}'") });
            }
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse { line, message: format!("expected 3 fields, got {}", fields.len()) });
        }
        let date = NaiveDate::parse_from_str(fields[0].trim(), "%Y-%m-%d")
            .map_err(|e| Error::Parse { line, message: format!("bad date '{}': {e}", fields[0].trim()) })?;
        let price = parse_f64(fields[2], line, "price")?;
        out.entry(fields[1].trim().to_string()).or_default().push((date, price));
    }
    for rows in out.values_mut() {
        rows.sort_by_key(|r| r.0);
    }
    Ok(out)
}

/// Reads `ticker,maturity_years,amount_issued` rows (header line required).
pub fn read_metadata<R: BufRead>(input: R) -> Result<Vec<InstrumentMeta>> {
    let mut out = Vec::new();
    let mut header_seen = false;
    for (line, text) in data_lines(input) {
        let text = text?;
        let fields: Vec<&str> = text.split(',').collect();
        if !header_seen {
            header_seen = true;
            let names: Vec<String> = fields.iter().map(|f| f.trim().to_ascii_lowercase()).collect();
            if names != ["ticker", "maturity_years", "amount_issued"] {
                return Err(Error::Parse {
                    line,
                    message: format!("expected header ticker,maturity_years,amount_issued, got '{text}'"),
                });
            }
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Parse { line, message: format!("expected 3 fields, got {}", fields.len()) });
        }
        let meta = InstrumentMeta {
            ticker: fields[0].trim().to_string(),
            maturity_years: parse_f64(fields[1], line, "maturity")?,
            amount_issued: parse_f64(fields[2], line, "amount issued")?,
        };
        if !(meta.amount_issued > 0.0) || !(meta.maturity_years > 0.0) {
            return Err(Error::Parse { line, message: format!("{}: maturity and amount must be positive", meta.ticker) });
        }
        out.push(meta);
    }
    Ok(out)
}

/// Joins prices and metadata into one series per ticker listed in the
/// metadata.
pub fn assemble_series(
    prices: &BTreeMap<String, Vec<(NaiveDate, f64)>>,
    meta: &[InstrumentMeta],
) -> Result<Vec<PriceSeries>> {
    meta.iter()
        .map(|m| {
            let rows = prices.get(&m.ticker).ok_or_else(|| Error::MissingTicker(m.ticker.clone()))?;
            PriceSeries::new(
                &m.ticker,
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                m.amount_issued,
                m.maturity_years,
            )
        })
        .collect()
}

/// Geometric average of the series weighted by amount issued, on the dates
/// common to all of them. The index maturity is the weighted mean maturity.
pub fn build_index(series: &[PriceSeries]) -> Result<PriceSeries> {
    if series.is_empty() {
        return Err(Error::InvalidParameter("index needs at least one series".into()));
    }
    let mut common: BTreeSet<NaiveDate> = series[0].dates.iter().copied().collect();
    for s in &series[1..] {
        let d: BTreeSet<NaiveDate> = s.dates.iter().copied().collect();
        common = common.intersection(&d).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let total: f64 = series.iter().map(|s| s.amount_issued).sum();
    let lookup: Vec<BTreeMap<NaiveDate, f64>> =
        series.iter().map(|s| s.dates.iter().copied().zip(s.prices.iter().copied()).collect()).collect();
    let dates: Vec<NaiveDate> = common.into_iter().collect();
    let prices = dates
        .iter()
        .map(|d| {
            let log: f64 = series.iter().zip(&lookup).map(|(s, l)| s.amount_issued / total * l[d].ln()).sum();
            log.exp()
        })
        .collect();
    let maturity = series.iter().map(|s| s.amount_issued / total * s.maturity).sum();
    PriceSeries::new("index", dates, prices, total, maturity)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineFit {
    pub rate: AffineCoeff,
    pub premium: AffineCoeff,
    pub vol: AffineCoeff,
}

/// Least squares of `y` on `(1, x)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (my, 0.0);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// Gauss–Newton for `s ≈ (a + b τ)²`.
fn fit_squared_line(tau: &[f64], s: &[f64], mut a: f64, mut b: f64) -> (f64, f64) {
    for _ in 0..50 {
        let (mut j11, mut j12, mut j22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&t, &y) in tau.iter().zip(s) {
            let v = a + b * t;
            let r = y - v * v;
            let (da, db) = (2.0 * v, 2.0 * v * t);
            j11 += da * da;
            j12 += da * db;
            j22 += db * db;
            g1 += da * r;
            g2 += db * r;
        }
        let det = j11 * j22 - j12 * j12;
        if !(det.abs() > 1e-300) {
            break;
        }
        let sa = (j22 * g1 - j12 * g2) / det;
        let sb = (j11 * g2 - j12 * g1) / det;
        a += sa;
        b += sb;
        if sa.abs() <= 1e-15 * (1.0 + a.abs()) && sb.abs() <= 1e-15 * (1.0 + b.abs()) {
            break;
        }
    }
    (a, b)
}

/// Fits `σ(τ) = a + bτ` to squared log-returns and then the drift
/// `r(τ) + η(τ)σ(τ)` to mean log-returns, with `τ` the time to maturity and
/// the premium `η` given.
pub fn fit_affine(series: &PriceSeries, premium: AffineCoeff) -> Result<AffineFit> {
    let n = series.len();
    if n < MIN_OBSERVATIONS {
        return Err(Error::InsufficientData { needed: MIN_OBSERVATIONS, got: n });
    }
    let times = series.times();
    let mut tau = Vec::with_capacity(n - 1);
    let mut dt = Vec::with_capacity(n - 1);
    let mut ret = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        tau.push(series.maturity - times[k]);
        dt.push(times[k + 1] - times[k]);
        ret.push((series.prices[k + 1] / series.prices[k]).ln());
    }
    let floor_warned = std::cell::Cell::new(false);
    let vol_at = |a: f64, b: f64, t: f64| -> f64 {
        let v = a + b * t;
        if v * v < VARIANCE_FLOOR {
            if !floor_warned.replace(true) {
                log::warn!("{}: fitted variance below {VARIANCE_FLOOR:e}, clipped", series.ticker);
            }
            VARIANCE_FLOOR.sqrt()
        } else {
            v.abs()
        }
    };

    // Annualized squared returns, less the drift contribution once a drift
    // estimate exists.
    let mut drift_sq = vec![0.0; n - 1];
    let mut vol = AffineCoeff::ZERO;
    let mut rate = AffineCoeff::ZERO;
    for _ in 0..4 {
        let s: Vec<f64> = (0..n - 1).map(|k| ret[k] * ret[k] / dt[k] - drift_sq[k]).collect();
        if s.iter().all(|v| v.abs() < 1e-300) {
            vol = AffineCoeff::ZERO;
        } else {
            let (c0, c1) = linear_fit(&tau, &s);
            let (t_lo, t_hi) = (tau[n - 2], tau[0]);
            let v_lo = (c0 + c1 * t_lo).max(VARIANCE_FLOOR).sqrt();
            let v_hi = (c0 + c1 * t_hi).max(VARIANCE_FLOOR).sqrt();
            let b0 = if t_hi > t_lo { (v_hi - v_lo) / (t_hi - t_lo) } else { 0.0 };
            let (mut a, mut b) = fit_squared_line(&tau, &s, v_lo - b0 * t_lo, b0);
            let mid = 0.5 * (t_lo + t_hi);
            if a + b * mid < 0.0 {
                a = -a;
                b = -b;
            }
            vol = AffineCoeff::new(a, b);
        }
        let sig: Vec<f64> = tau.iter().map(|&t| if vol == AffineCoeff::ZERO { 0.0 } else { vol_at(vol.a, vol.b, t) }).collect();
        let y: Vec<f64> = (0..n - 1)
            .map(|k| ret[k] / dt[k] + 0.5 * sig[k] * sig[k] - (premium.a + premium.b * tau[k]) * sig[k])
            .collect();
        let (ra, rb) = linear_fit(&tau, &y);
        rate = AffineCoeff::new(ra, rb);
        for k in 0..n - 1 {
            let m = rate.a + rate.b * tau[k] + (premium.a + premium.b * tau[k]) * sig[k];
            drift_sq[k] = (m - 0.5 * sig[k] * sig[k]).powi(2) * dt[k];
        }
    }
    Ok(AffineFit { rate, premium, vol })
}

/// `(θ, m, σ)` of `dr = θ(m − r)dt + σ dW`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuParams {
    pub theta: f64,
    pub m: f64,
    pub sigma: f64,
}

/// Exact-discretization maximum likelihood on a uniformly spaced series.
pub fn fit_ou(values: &[f64], dt: f64) -> Result<OuParams> {
    let n = values.len();
    if n < MIN_OBSERVATIONS {
        return Err(Error::InsufficientData { needed: MIN_OBSERVATIONS, got: n });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("spacing must be positive, got {dt}")));
    }
    let x = &values[..n - 1];
    let y = &values[1..];
    let c = values[0];
    if values.iter().all(|v| *v == c) {
        return Ok(OuParams { theta: 0.0, m: c, sigma: 0.0 });
    }
    let (intercept, phi) = linear_fit(x, y);
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::DegenerateSeries(format!("autoregression slope {phi} outside (0, 1)")));
    }
    let theta = -phi.ln() / dt;
    let m = intercept / (1.0 - phi);
    let resid_var = x.iter().zip(y).map(|(a, b)| (b - intercept - phi * a).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma = (resid_var * 2.0 * theta / (1.0 - phi * phi)).sqrt();
    Ok(OuParams { theta, m, sigma })
}

/// Exact OU simulation with `n` values starting at `r0`.
pub fn synthetic_ou(p: OuParams, r0: f64, dt: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = NormalStream::new(&mut rng);
    let phi = (-p.theta * dt).exp();
    let sd = if p.theta > 0.0 { p.sigma * ((1.0 - phi * phi) / (2.0 * p.theta)).sqrt() } else { p.sigma * dt.sqrt() };
    let mut out = Vec::with_capacity(n);
    let mut r = r0;
    for _ in 0..n {
        out.push(r);
        r = p.m + (r - p.m) * phi + sd * z.next();
    }
    out
}

/// `±1` Thue–Morse sequence: balanced on every dyadic block, so its sums
/// against low-degree polynomials vanish.
pub fn thue_morse(n: usize) -> Vec<f64> {
    (0..n).map(|k| if (k as u32).count_ones() % 2 == 0 { 1.0 } else { -1.0 }).collect()
}

/// `±1` innovations of length `n` whose sums against polynomials of low
/// degree vanish: Thue–Morse on the largest multiple of 16, then a searched
/// tail block cancelling as many moments as its length allows.
pub fn balanced_signs(n: usize) -> Vec<f64> {
    let head = n - n % 16;
    let mut out = thue_morse(head);
    let r = n - head;
    let moment = |bits: u32, d: u32| -> i64 {
        (0..r as u32).map(|k| if bits >> k & 1 == 0 { (k as i64).pow(d) } else { -(k as i64).pow(d) }).sum()
    };
    let tail = (0..=3u32).rev().find_map(|deg| (0..1u32 << r).find(|&bits| (0..=deg).all(|d| moment(bits, d) == 0)));
    match tail {
        Some(bits) => out.extend((0..r).map(|k| if bits >> k & 1 == 0 { 1.0 } else { -1.0 })),
        None => out.extend(thue_morse(n).into_iter().skip(head)),
    }
    out
}

/// Weekday dates starting at `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    use chrono::Datelike;
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if d.weekday().number_from_monday() <= 5 {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}

/// Prices following the affine model with the given innovations
/// (one per return): `ln P` moves by `(m − ½σ²)Δ + σ√Δ ε`.
pub fn synthetic_affine_series(
    ticker: &str,
    fit: &AffineFit,
    maturity: f64,
    dates: Vec<NaiveDate>,
    innovations: &[f64],
    p0: f64,
) -> Result<PriceSeries> {
    if innovations.len() + 1 != dates.len() {
        return Err(Error::Dimension(format!("{} dates need {} innovations", dates.len(), dates.len() - 1)));
    }
    let d0 = dates[0];
    let t: Vec<f64> = dates.iter().map(|d| (*d - d0).num_days() as f64 / DAYS_PER_YEAR).collect();
    let mut prices = Vec::with_capacity(dates.len());
    let mut lp = p0.ln();
    prices.push(p0);
    for k in 0..innovations.len() {
        let dt = t[k + 1] - t[k];
        let s = fit.vol.eval(maturity, t[k]);
        let m = fit.rate.eval(maturity, t[k]) + fit.premium.eval(maturity, t[k]) * s;
        lp += (m - 0.5 * s * s) * dt + s * dt.sqrt() * innovations[k];
        prices.push(lp.exp());
    }
    PriceSeries::new(ticker, dates, prices, 1.0, maturity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn index_of_two_series() {
        let dates = vec![d("2024-01-02")];
        let a = PriceSeries::new("a", dates.clone(), vec![100.0], 1.0, 5.0).unwrap();
        let b = PriceSeries::new("b", dates, vec![121.0], 1.0, 7.0).unwrap();
        let idx = build_index(&[a, b]).unwrap();
        assert!((idx.prices[0] - 110.0).abs() < 1e-12);
        assert!((idx.maturity - 6.0).abs() < 1e-12);
    }

    #[test]
    fn index_needs_common_dates() {
        let a = PriceSeries::new("a", vec![d("2024-01-02")], vec![1.0], 1.0, 5.0).unwrap();
        let b = PriceSeries::new("b", vec![d("2024-01-03")], vec![1.0], 1.0, 5.0).unwrap();
        assert!(matches!(build_index(&[a, b]), Err(Error::EmptyIntersection)));
    }

    #[test]
    fn constant_prices_fit_to_zero() {
        let dates = business_days(d("2024-01-01"), 60);
        let s = PriceSeries::new("c", dates, vec![97.0; 60], 1.0, 10.0).unwrap();
        let f = fit_affine(&s, AffineCoeff::ZERO).unwrap();
        assert!(f.rate.a.abs() < 1e-12 && f.rate.b.abs() < 1e-12);
        assert!(f.vol.a.abs() < 1e-3 && f.vol.b.abs() < 1e-3);
    }

    #[test]
    fn short_series_rejected() {
        let dates = business_days(d("2024-01-01"), 10);
        let s = PriceSeries::new("c", dates, vec![1.0; 10], 1.0, 10.0).unwrap();
        assert!(matches!(fit_affine(&s, AffineCoeff::ZERO), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn constant_rate_series() {
        let p = fit_ou(&[0.03; 40], 1.0 / 252.0).unwrap();
        assert_eq!(p, OuParams { theta: 0.0, m: 0.03, sigma: 0.0 });
    }

    #[test]
    fn csv_parsing_reports_line() {
        let text = "date,ticker,price\n2024-01-02,A,100\n2024-01-03,A,abc\n";
        match read_prices(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let meta = "ticker,maturity_years,amount_issued\nA,5,100\n";
        assert_eq!(read_metadata(meta.as_bytes()).unwrap()[0].amount_issued, 100.0);
    }
}
