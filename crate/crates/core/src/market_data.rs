//! Price panel ingestion, return construction and rolling train/test windows.
//!
//! Two CSV layouts are accepted, detected from the header:
//!
//! * long: columns `date,ticker,close` (any order), one row per observation;
//! * wide: first column `date`, one further column per ticker, empty cells
//!   meaning "no price".
//!
//! Dates are ISO-8601 `YYYY-MM-DD`. Assets missing any date of the aligned
//! calendar are dropped and reported instead of being imputed.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Rectangular close-price panel: `prices[(n, t)]` is asset `n` on `dates[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    prices: DMatrix<f64>,
}

impl PricePanel {
    pub fn new(assets: Vec<String>, dates: Vec<NaiveDate>, prices: DMatrix<f64>) -> Result<Self> {
        if prices.shape() != (assets.len(), dates.len()) {
            return Err(Error::Shape {
                expected: (assets.len(), dates.len()),
                found: prices.shape(),
            });
        }
        if assets.is_empty() {
            return Err(Error::EmptyPanel);
        }
        check_strictly_increasing(&dates)?;
        if let Some(p) = prices.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Domain(format!("price {p} is not strictly positive")));
        }
        Ok(Self {
            assets,
            dates,
            prices,
        })
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    /// Writes the panel in the long `date,ticker,close` layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["date", "ticker", "close"])?;
        for (t, date) in self.dates.iter().enumerate() {
            let date = date.format(DATE_FORMAT).to_string();
            for (n, ticker) in self.assets.iter().enumerate() {
                out.write_record([
                    date.as_str(),
                    ticker.as_str(),
                    &format!("{:?}", self.prices[(n, t)]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `N x T` arithmetic returns. Column `t` is the transition from price date
/// `t` to `t + 1` and is labelled with the later date, on which it is realized.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMatrix {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    values: DMatrix<f64>,
}

impl ReturnMatrix {
    pub fn new(assets: Vec<String>, dates: Vec<NaiveDate>, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != (assets.len(), dates.len()) {
            return Err(Error::Shape {
                expected: (assets.len(), dates.len()),
                found: values.shape(),
            });
        }
        check_strictly_increasing(&dates)?;
        if let Some(r) = values.iter().find(|r| !(r.is_finite() && **r > -1.0)) {
            return Err(Error::Domain(format!("return {r} is not greater than -1")));
        }
        Ok(Self {
            assets,
            dates,
            values,
        })
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_periods(&self) -> usize {
        self.dates.len()
    }

    /// Columns `range.start..range.end`.
    pub fn slice_periods(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.n_periods() {
            return Err(Error::InsufficientData(format!(
                "period range {range:?} exceeds {} periods",
                self.n_periods()
            )));
        }
        Ok(Self {
            assets: self.assets.clone(),
            dates: self.dates[range.clone()].to_vec(),
            values: self.values.columns(range.start, range.len()).into_owned(),
        })
    }

    /// Keeps the listed asset rows, in the listed order.
    pub fn select_assets(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_assets()) {
            return Err(Error::Index {
                index: bad + 1,
                max: self.n_assets(),
            });
        }
        Ok(Self {
            assets: rows.iter().map(|&r| self.assets[r].clone()).collect(),
            dates: self.dates.clone(),
            values: self.values.select_rows(rows),
        })
    }
}

/// One rolling window: the transform is estimated on `train` and frozen on `test`.
#[derive(Debug, Clone)]
pub struct WindowSplit {
    pub train: ReturnMatrix,
    pub test: ReturnMatrix,
    pub label: String,
}

/// An asset removed during alignment and how many calendar dates it lacked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedAsset {
    pub ticker: String,
    pub missing_dates: usize,
}

#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: PricePanel,
    pub dropped: Vec<DroppedAsset>,
}

/// Inclusive date bounds; `None` leaves that side open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
}

impl DateRange {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start.is_none_or(|s| date >= s) && self.end.is_none_or(|e| date <= e)
    }
}

fn check_strictly_increasing(dates: &[NaiveDate]) -> Result<()> {
    if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::Domain(format!(
            "dates must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

fn parse_date(field: &str, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(field, DATE_FORMAT)
        .map_err(|e| Error::parse(line, format!("bad date {field:?}: {e}")))
}

fn parse_price(field: &str, line: u64) -> Result<f64> {
    let price: f64 = field
        .parse()
        .map_err(|_| Error::parse(line, format!("bad price {field:?}")))?;
    if !(price.is_finite() && price > 0.0) {
        return Err(Error::parse(
            line,
            format!("price {field:?} is not strictly positive"),
        ));
    }
    Ok(price)
}

fn csv_error(err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::parse(line, err.to_string())
}

/// Observations keyed by ticker (first-appearance order) and date.
#[derive(Default)]
struct Observations {
    order: Vec<String>,
    series: HashMap<String, BTreeMap<NaiveDate, f64>>,
}

impl Observations {
    fn insert(&mut self, ticker: &str, date: NaiveDate, price: f64, line: u64) -> Result<()> {
        let series = match self.series.get_mut(ticker) {
            Some(s) => s,
            None => {
                self.order.push(ticker.to_string());
                self.series.entry(ticker.to_string()).or_default()
            }
        };
        if series.insert(date, price).is_some() {
            return Err(Error::parse(
                line,
                format!("duplicate observation for {ticker} on {date}"),
            ));
        }
        Ok(())
    }
}

/// Reads a price CSV (long or wide), restricts it to `range` and aligns it.
pub fn load_price_panel<R: Read>(reader: R, range: &DateRange) -> Result<LoadedPanel> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = csv_reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();

    let column = |name: &str| header.iter().position(|h| h == name);
    let mut obs = Observations::default();
    let mut calendar = BTreeSet::new();

    match (column("date"), column("ticker"), column("close")) {
        (Some(di), Some(ti), Some(ci)) => {
            for record in csv_reader.records() {
                let record = record.map_err(csv_error)?;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let date = parse_date(&record[di], line)?;
                let ticker = &record[ti];
                if ticker.is_empty() {
                    return Err(Error::parse(line, "empty ticker"));
                }
                let price = parse_price(&record[ci], line)?;
                if range.contains(date) {
                    calendar.insert(date);
                    obs.insert(ticker, date, price, line)?;
                }
            }
        }
        (Some(0), None, None) if header.len() >= 2 => {
            let tickers: Vec<String> = csv_reader
                .headers()
                .map_err(csv_error)?
                .iter()
                .skip(1)
                .map(str::to_string)
                .collect();
            for record in csv_reader.records() {
                let record = record.map_err(csv_error)?;
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let date = parse_date(&record[0], line)?;
                if !range.contains(date) {
                    continue;
                }
                calendar.insert(date);
                for (ticker, field) in tickers.iter().zip(record.iter().skip(1)) {
                    if field.is_empty() {
                        continue;
                    }
                    obs.insert(ticker, date, parse_price(field, line)?, line)?;
                }
            }
            // Tickers that never appear in range still count as dropped.
            for ticker in &tickers {
                if !obs.series.contains_key(ticker) {
                    obs.order.push(ticker.clone());
                    obs.series.insert(ticker.clone(), BTreeMap::new());
                }
            }
        }
        _ => {
            return Err(Error::parse(
                1,
                "header must be `date,ticker,close` (long) or start with `date` (wide)",
            ))
        }
    }

    align(obs, calendar)
}

fn align(obs: Observations, calendar: BTreeSet<NaiveDate>) -> Result<LoadedPanel> {
    let dates: Vec<NaiveDate> = calendar.into_iter().collect();
    let mut assets = Vec::new();
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for ticker in obs.order {
        let series = &obs.series[&ticker];
        let missing = dates.iter().filter(|d| !series.contains_key(d)).count();
        if missing > 0 || dates.is_empty() {
            log::warn!(
                "dropping {ticker}: {missing} of {} dates missing",
                dates.len()
            );
            dropped.push(DroppedAsset {
                ticker,
                missing_dates: missing,
            });
        } else {
            rows.push(dates.iter().map(|d| series[d]).collect::<Vec<_>>());
            assets.push(ticker);
        }
    }
    if assets.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let prices = DMatrix::from_fn(assets.len(), dates.len(), |n, t| rows[n][t]);
    Ok(LoadedPanel {
        panel: PricePanel::new(assets, dates, prices)?,
        dropped,
    })
}

/// `x[n][t] = p[n][t+1] / p[n][t] - 1`.
pub fn to_returns(panel: &PricePanel) -> Result<ReturnMatrix> {
    let (n, t1) = panel.prices.shape();
    if t1 < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 dates to form returns, got {t1}"
        )));
    }
    let p = &panel.prices;
    let values = DMatrix::from_fn(n, t1 - 1, |i, t| p[(i, t + 1)] / p[(i, t)] - 1.0);
    ReturnMatrix::new(panel.assets.clone(), panel.dates[1..].to_vec(), values)
}

/// Rolling window lengths in calendar months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub train_months: u32,
    pub test_months: u32,
    pub stride_months: u32,
}

#[derive(Debug, Clone)]
pub struct RollingSplits {
    pub splits: Vec<WindowSplit>,
    /// The data span is shorter than one train + test window.
    pub span_too_short: bool,
}

fn month_index(date: NaiveDate) -> i64 {
    date.year() as i64 * 12 + date.month0() as i64
}

fn month_label(index: i64) -> String {
    format!(
        "{:04}/{:02}",
        index.div_euclid(12),
        index.rem_euclid(12) + 1
    )
}

/// Calendar-month windows anchored at the month of the first return.
///
/// A window is kept only if the data reaches into the final month of its test
/// period; trailing partial windows are dropped.
pub fn rolling_splits(returns: &ReturnMatrix, spec: &WindowSpec) -> Result<RollingSplits> {
    if spec.train_months == 0 || spec.test_months == 0 || spec.stride_months == 0 {
        return Err(Error::Config(
            "window lengths and stride must be at least one month".into(),
        ));
    }
    let (Some(&first), Some(&last)) = (returns.dates.first(), returns.dates.last()) else {
        return Ok(RollingSplits {
            splits: Vec::new(),
            span_too_short: true,
        });
    };
    let first_month = month_index(first);
    let span = month_index(last) - first_month + 1;
    let (train, test, stride) = (
        spec.train_months as i64,
        spec.test_months as i64,
        spec.stride_months as i64,
    );
    if train + test > span {
        log::warn!("data spans {span} months, shorter than one {train}+{test} month window");
        return Ok(RollingSplits {
            splits: Vec::new(),
            span_too_short: true,
        });
    }

    let months: Vec<i64> = returns
        .dates
        .iter()
        .map(|&d| month_index(d) - first_month)
        .collect();
    let columns_in = |lo: i64, hi: i64| {
        let start = months.partition_point(|&m| m < lo);
        let end = months.partition_point(|&m| m < hi);
        start..end
    };

    let mut splits = Vec::new();
    let mut offset = 0;
    while offset + train + test <= span {
        let train_cols = columns_in(offset, offset + train);
        let test_cols = columns_in(offset + train, offset + train + test);
        if !train_cols.is_empty() && !test_cols.is_empty() {
            let label = format!(
                "train {}-{} / test {}-{}",
                month_label(first_month + offset),
                month_label(first_month + offset + train - 1),
                month_label(first_month + offset + train),
                month_label(first_month + offset + train + test - 1),
            );
            splits.push(WindowSplit {
                train: returns.slice_periods(train_cols)?,
                test: returns.slice_periods(test_cols)?,
                label,
            });
        }
        offset += stride;
    }
    Ok(RollingSplits {
        splits,
        span_too_short: false,
    })
}

/// Windows of a fixed number of periods, `stride` periods apart.
pub fn period_splits(
    returns: &ReturnMatrix,
    train: usize,
    test: usize,
    stride: usize,
) -> Result<RollingSplits> {
    if train == 0 || test == 0 || stride == 0 {
        return Err(Error::Config(
            "window lengths and stride must be at least one period".into(),
        ));
    }
    let t = returns.n_periods();
    let day = |i: usize| returns.dates[i].format(DATE_FORMAT);
    let mut splits = Vec::new();
    let mut offset = 0;
    while offset + train + test <= t {
        let (a, b, c) = (offset, offset + train, offset + train + test);
        splits.push(WindowSplit {
            train: returns.slice_periods(a..b)?,
            test: returns.slice_periods(b..c)?,
            label: format!(
                "train {}..{} / test {}..{}",
                day(a),
                day(b - 1),
                day(b),
                day(c - 1)
            ),
        });
        offset += stride;
    }
    Ok(RollingSplits {
        span_too_short: splits.is_empty(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Weekday;
    use proptest::prelude::*;

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, DATE_FORMAT).unwrap()
    }

    fn load(text: &str) -> Result<LoadedPanel> {
        load_price_panel(text.as_bytes(), &DateRange::default())
    }

    #[test]
    fn long_format_full_panel() {
        let text = "date,ticker,close\n\
                    2020-01-02,A,100\n2020-01-02,B,50\n\
                    2020-01-03,A,101\n2020-01-03,B,51\n\
                    2020-01-06,A,102\n2020-01-06,B,52\n";
        let loaded = load(text).unwrap();
        assert_eq!(loaded.panel.assets(), ["A", "B"]);
        assert_eq!(loaded.panel.dates().len(), 3);
        assert!(loaded.dropped.is_empty());
        assert_eq!(loaded.panel.prices()[(1, 2)], 52.0);
    }

    #[test]
    fn incomplete_asset_is_dropped_and_reported() {
        let text = "date,ticker,close\n\
                    2020-01-02,A,100\n2020-01-02,B,50\n\
                    2020-01-03,A,101\n\
                    2020-01-06,A,102\n2020-01-06,B,52\n";
        let loaded = load(text).unwrap();
        assert_eq!(loaded.panel.assets(), ["A"]);
        assert_eq!(
            loaded.dropped,
            vec![DroppedAsset {
                ticker: "B".into(),
                missing_dates: 1
            }]
        );
    }

    #[test]
    fn zero_price_is_a_parse_error_with_line() {
        let text = "date,ticker,close\n2020-01-02,A,100\n2020-01-03,A,0.0\n";
        match load(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let bad_date = "date,ticker,close\n2020-01-02,A,100\n2020/01/03,A,101\n";
        assert!(matches!(load(bad_date), Err(Error::Parse { line: 3, .. })));
        let short_row = "date,ticker,close\n2020-01-02,A\n";
        assert!(matches!(load(short_row), Err(Error::Parse { line: 2, .. })));
        let dup = "date,ticker,close\n2020-01-02,A,100\n2020-01-02,A,100\n";
        assert!(matches!(load(dup), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn unknown_header_is_rejected() {
        assert!(matches!(
            load("when,what\n1,2\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn wide_format_with_gaps() {
        let text =
            "date,AAA,BBB,CCC\n2020-01-02,1,2,3\n2020-01-03,1.1,,3.3\n2020-01-06,1.2,2.2,3.6\n";
        let loaded = load(text).unwrap();
        assert_eq!(loaded.panel.assets(), ["AAA", "CCC"]);
        assert_eq!(loaded.dropped[0].ticker, "BBB");
        assert_eq!(loaded.panel.prices()[(1, 2)], 3.6);
    }

    #[test]
    fn all_assets_dropped_is_empty_panel() {
        let text = "date,ticker,close\n2020-01-02,A,100\n2020-01-03,B,50\n";
        assert!(matches!(load(text), Err(Error::EmptyPanel)));
    }

    #[test]
    fn date_range_limits_coverage_requirement() {
        let text = "date,ticker,close\n\
                    2020-01-02,A,100\n\
                    2020-01-03,A,101\n2020-01-03,B,51\n\
                    2020-01-06,A,102\n2020-01-06,B,52\n";
        let range = DateRange {
            start: Some(date("2020-01-03")),
            end: None,
        };
        let loaded = load_price_panel(text.as_bytes(), &range).unwrap();
        assert_eq!(loaded.panel.assets(), ["A", "B"]);
        assert_eq!(loaded.panel.dates().len(), 2);
    }

    fn one_asset(prices: &[f64]) -> PricePanel {
        let dates: Vec<NaiveDate> = (0..prices.len())
            .map(|i| date("2021-03-01") + chrono::Days::new(i as u64))
            .collect();
        PricePanel::new(
            vec!["X".into()],
            dates,
            DMatrix::from_row_slice(1, prices.len(), prices),
        )
        .unwrap()
    }

    #[test]
    fn returns_examples() {
        let r = to_returns(&one_asset(&[100.0, 110.0])).unwrap();
        assert!((r.values()[(0, 0)] - 0.10).abs() < 1e-15);
        let r = to_returns(&one_asset(&[100.0, 100.0, 100.0])).unwrap();
        assert_eq!(r.values().as_slice(), &[0.0, 0.0]);
        let r = to_returns(&one_asset(&[100.0, 90.0, 99.0])).unwrap();
        assert!((r.values()[(0, 0)] + 0.10).abs() < 1e-15);
        assert!((r.values()[(0, 1)] - 0.10).abs() < 1e-15);
        assert_eq!(r.dates()[0], date("2021-03-02"));
    }

    #[test]
    fn single_date_cannot_form_returns() {
        assert!(matches!(
            to_returns(&one_asset(&[100.0])),
            Err(Error::InsufficientData(_))
        ));
    }

    /// Weekday calendar returns covering `years` whole calendar years.
    fn calendar_returns(start_year: i32, years: i32) -> ReturnMatrix {
        let mut dates = Vec::new();
        let mut d = NaiveDate::from_ymd_opt(start_year, 1, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(start_year + years, 1, 1).unwrap();
        while d < end {
            if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
                dates.push(d);
            }
            d = d.succ_opt().unwrap();
        }
        let values = DMatrix::from_fn(2, dates.len(), |i, t| 0.001 * ((i + t) % 5) as f64 - 0.002);
        ReturnMatrix::new(vec!["A".into(), "B".into()], dates, values).unwrap()
    }

    fn years(train: u32, test: u32, stride: u32) -> WindowSpec {
        WindowSpec {
            train_months: 12 * train,
            test_months: 12 * test,
            stride_months: 12 * stride,
        }
    }

    #[test]
    fn thirteen_years_five_by_five_gives_four_splits() {
        let r = calendar_returns(2012, 13);
        let out = rolling_splits(&r, &years(5, 5, 1)).unwrap();
        assert_eq!(out.splits.len(), 4);
        assert_eq!(
            out.splits[0].label,
            "train 2012/01-2016/12 / test 2017/01-2021/12"
        );
        assert_eq!(
            out.splits[3].label,
            "train 2015/01-2019/12 / test 2020/01-2024/12"
        );
    }

    #[test]
    fn short_span_gives_no_splits() {
        let r = calendar_returns(2015, 4);
        let out = rolling_splits(&r, &years(5, 5, 1)).unwrap();
        assert!(out.splits.is_empty());
        assert!(out.span_too_short);
    }

    #[test]
    fn four_years_three_by_one_gives_one_split() {
        let r = calendar_returns(2015, 4);
        let out = rolling_splits(&r, &years(3, 1, 1)).unwrap();
        assert_eq!(out.splits.len(), 1);
        assert_eq!(
            out.splits[0].label,
            "train 2015/01-2017/12 / test 2018/01-2018/12"
        );
        assert!(!out.span_too_short);
    }

    #[test]
    fn splits_never_look_ahead() {
        let r = calendar_returns(2010, 6);
        for split in rolling_splits(&r, &years(2, 1, 1)).unwrap().splits {
            assert!(split.train.dates().last() < split.test.dates().first());
            assert_eq!(split.train.assets(), split.test.assets());
        }
    }

    #[test]
    fn period_windows_tile_the_sample() {
        let r = calendar_returns(2010, 1);
        let t = r.n_periods();
        let out = period_splits(&r, 100, 50, 50).unwrap();
        assert_eq!(out.splits.len(), (t - 150) / 50 + 1);
        let first = &out.splits[0];
        assert_eq!((first.train.n_periods(), first.test.n_periods()), (100, 50));
        assert_eq!(out.splits[1].train.dates()[0], r.dates()[50]);
        assert!(first.label.starts_with("train "));
        assert!(period_splits(&r, t, 1, 1).unwrap().span_too_short);
        assert!(period_splits(&r, 0, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn returns_round_trip_through_prices(
            start in 1.0f64..500.0,
            rets in proptest::collection::vec(-0.5f64..0.5, 1..40),
        ) {
            let mut prices = vec![start];
            for r in &rets {
                let last = *prices.last().unwrap();
                prices.push(last * (1.0 + r));
            }
            let out = to_returns(&one_asset(&prices)).unwrap();
            for (a, b) in out.values().iter().zip(&rets) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
