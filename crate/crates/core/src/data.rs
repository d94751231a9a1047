//! Rating-matrix data model, CSV ingestion, column scales and rounding.
//!
//! A [`RatingMatrix`] holds `m` subjects (rows) rated by `n` rating providers
//! (columns). Missing cells are `None`. Ratings are stored as `f64` so the same
//! type serves continuous scores; in integer mode every observed value is an
//! integer.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens treated as missing when no explicit set is given.
pub const DEFAULT_MISSING_TOKENS: [&str; 4] = ["", "NA", "NaN", "null"];

/// An `m x n` ordinal rating matrix with missing entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    rows: usize,
    cols: usize,
    cells: Vec<Option<f64>>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    integer_mode: bool,
}

#[derive(Serialize, Deserialize)]
struct RatingMatrixJson {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    integer_mode: bool,
    values: Vec<Vec<Option<f64>>>,
}

impl RatingMatrix {
    /// Builds a matrix from row-major optional values with generated labels
    /// (`s1..sm`, `rp1..rpn`).
    pub fn from_rows(rows: Vec<Vec<Option<f64>>>, integer_mode: bool) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let row_labels = (1..=m).map(|i| format!("s{i}")).collect();
        let col_labels = (1..=n).map(|j| format!("rp{j}")).collect();
        Self::with_labels(rows, row_labels, col_labels, integer_mode)
    }

    pub fn with_labels(
        rows: Vec<Vec<Option<f64>>>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        integer_mode: bool,
    ) -> Result<Self> {
        let m = rows.len();
        let n = col_labels.len();
        if row_labels.len() != m {
            return Err(Error::Dimension(format!(
                "{} row labels for {m} rows",
                row_labels.len()
            )));
        }
        let mut cells = Vec::with_capacity(m * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension(format!(
                    "row {i} has {} cells, expected {n}",
                    row.len()
                )));
            }
            for (j, v) in row.into_iter().enumerate() {
                if let Some(x) = v {
                    check_value(x, integer_mode).map_err(|message| Error::Parse {
                        row: i + 1,
                        message: format!("column {j}: {message}"),
                    })?;
                }
                cells.push(v);
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            cells,
            row_labels,
            col_labels,
            integer_mode,
        })
    }

    /// Parses a compact literal such as `"1 1; 2 2; 3 ."`, where `.` (or `?`)
    /// marks a missing cell. Handy for fixtures and documentation.
    pub fn parse_grid(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.split([';', '\n']).enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| match tok {
                    "." | "?" => Ok(None),
                    t => t.parse::<f64>().map(Some).map_err(|e| Error::Parse {
                        row: i + 1,
                        message: format!("bad token {t:?}: {e}"),
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let integer_mode = rows
            .iter()
            .flatten()
            .flatten()
            .all(|x| x.fract() == 0.0);
        Self::from_rows(rows, integer_mode)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn integer_mode(&self) -> bool {
        self.integer_mode
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.cols + j]
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.cols + j].is_some()
    }

    /// Row-major view of all cells.
    pub fn cells(&self) -> &[Option<f64>] {
        &self.cells
    }

    pub fn row(&self, i: usize) -> &[Option<f64>] {
        &self.cells[i * self.cols..(i + 1) * self.cols]
    }

    pub fn set(&mut self, i: usize, j: usize, value: Option<f64>) {
        self.cells[i * self.cols + j] = value;
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn missing_count(&self) -> usize {
        self.cells.len() - self.observed_count()
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(Option::is_some)
    }

    /// Rows with no observed entry (violations of the rated-by-one rule).
    pub fn empty_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| self.row(i).iter().all(Option::is_none))
            .collect()
    }

    /// Observed values of column `j` together with their row indices.
    pub fn column_observed(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.rows).filter_map(move |i| self.get(i, j).map(|x| (i, x)))
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut cells = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            cells.extend_from_slice(self.row(i));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            cells,
            row_labels: rows.iter().map(|&i| self.row_labels[i].clone()).collect(),
            col_labels: self.col_labels.clone(),
            integer_mode: self.integer_mode,
        }
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut cells = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            cells.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            cells,
            row_labels: self.row_labels.clone(),
            col_labels: cols.iter().map(|&j| self.col_labels[j].clone()).collect(),
            integer_mode: self.integer_mode,
        }
    }

    /// Drops fully-missing rows, returning the cleaned matrix and the count
    /// of dropped rows.
    pub fn drop_empty_rows(&self) -> (Self, usize) {
        let keep: Vec<usize> = (0..self.rows)
            .filter(|&i| self.row(i).iter().any(Option::is_some))
            .collect();
        let dropped = self.rows - keep.len();
        (self.select_rows(&keep), dropped)
    }

    pub fn missing_index(&self) -> MissingIndex {
        MissingIndex::new(
            (0..self.rows)
                .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
                .filter(|&(i, j)| !self.is_observed(i, j))
                .collect(),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(RatingMatrixJson {
            row_labels: self.row_labels.clone(),
            col_labels: self.col_labels.clone(),
            integer_mode: self.integer_mode,
            values: (0..self.rows).map(|i| self.row(i).to_vec()).collect(),
        })
        .expect("rating matrix is always serializable")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let raw: RatingMatrixJson = serde_json::from_value(value)?;
        Self::with_labels(raw.values, raw.row_labels, raw.col_labels, raw.integer_mode)
    }
}

fn check_value(x: f64, integer_mode: bool) -> std::result::Result<(), String> {
    if !x.is_finite() {
        return Err(format!("non-finite rating {x}"));
    }
    if integer_mode && x.round() != x {
        return Err(format!("non-integer rating {x} in integer mode"));
    }
    Ok(())
}

/// Result of [`load_csv`]: the cleaned matrix and how many rows were dropped
/// for having no observed rating.
#[derive(Debug, Clone)]
pub struct LoadedCsv {
    pub matrix: RatingMatrix,
    pub dropped_rows: usize,
}

/// Options for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub missing_tokens: HashSet<String>,
    pub integer_mode: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            missing_tokens: DEFAULT_MISSING_TOKENS.iter().map(|s| s.to_string()).collect(),
            integer_mode: true,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    parse_csv(&text, opts)
}

/// Parses CSV text: header row of provider names, first column subject id.
pub fn parse_csv(text: &str, opts: &CsvOptions) -> Result<LoadedCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            message: "header needs a subject-id column and at least one provider".into(),
        });
    }
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut row_labels = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            message: e.to_string(),
        })?;
        let mut fields = record.iter();
        row_labels.push(fields.next().unwrap_or_default().to_string());
        let mut row = Vec::with_capacity(col_labels.len());
        for (j, tok) in fields.enumerate() {
            if opts.missing_tokens.contains(tok) {
                row.push(None);
                continue;
            }
            let x: f64 = tok.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("non-numeric rating {tok:?} in column {}", col_labels[j]),
            })?;
            check_value(x, opts.integer_mode).map_err(|message| Error::Parse {
                row: line,
                message,
            })?;
            row.push(Some(x));
        }
        rows.push(row);
    }
    let full = RatingMatrix::with_labels(rows, row_labels, col_labels, opts.integer_mode)?;
    let (matrix, dropped_rows) = full.drop_empty_rows();
    if dropped_rows > 0 {
        log::warn!("dropped {dropped_rows} row(s) with no observed rating");
    }
    if matrix.rows() == 0 {
        return Err(Error::EmptyData {
            dropped: dropped_rows,
        });
    }
    Ok(LoadedCsv {
        matrix,
        dropped_rows,
    })
}

/// Formats a rating for CSV output: integers without a fractional part in
/// integer mode, shortest round-trip representation otherwise.
pub fn format_value(x: f64, integer_mode: bool) -> String {
    if integer_mode {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

pub fn write_csv(matrix: &RatingMatrix, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Parse {
        row: 0,
        message: e.to_string(),
    };
    let mut header = vec!["subject".to_string()];
    header.extend(matrix.col_labels().iter().cloned());
    w.write_record(&header).map_err(io)?;
    for i in 0..matrix.rows() {
        let mut rec = vec![matrix.row_labels()[i].clone()];
        rec.extend(matrix.row(i).iter().map(|c| match c {
            Some(x) => format_value(*x, matrix.integer_mode()),
            None => String::new(),
        }));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Parse {
        row: 0,
        message: e.to_string(),
    })?;
    Ok(())
}

pub fn save_csv(matrix: &RatingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(matrix, file)
}

/// Per-column observed minimum `l_j`, maximum `u_j` and category count
/// `c_j = u_j - l_j + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub categories: Vec<f64>,
}

impl ColumnScale {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

pub fn column_scales(m: &RatingMatrix) -> Result<ColumnScale> {
    let mut lower = Vec::with_capacity(m.cols());
    let mut upper = Vec::with_capacity(m.cols());
    for j in 0..m.cols() {
        let (lo, hi) = m
            .column_observed(j)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, x)| {
                (lo.min(x), hi.max(x))
            });
        if lo > hi {
            return Err(Error::DegenerateColumn {
                col: j,
                label: m.col_labels()[j].clone(),
            });
        }
        lower.push(lo);
        upper.push(hi);
    }
    let categories = lower.iter().zip(&upper).map(|(l, u)| u - l + 1.0).collect();
    Ok(ColumnScale {
        lower,
        upper,
        categories,
    })
}

/// Divides every observed entry of column `j` by `c_j`.
pub fn normalize(m: &RatingMatrix, scale: &ColumnScale) -> RatingMatrix {
    rescale(m, scale, |x, c| x / c)
}

/// Inverse of [`normalize`].
pub fn denormalize(m: &RatingMatrix, scale: &ColumnScale) -> RatingMatrix {
    rescale(m, scale, |x, c| x * c)
}

fn rescale(m: &RatingMatrix, scale: &ColumnScale, f: impl Fn(f64, f64) -> f64) -> RatingMatrix {
    let mut out = m.clone();
    out.integer_mode = false;
    let n = m.cols();
    for (k, cell) in out.cells.iter_mut().enumerate() {
        if let Some(x) = cell {
            *x = f(*x, scale.categories[k % n]);
        }
    }
    out
}

/// `min(u_col, max(l_col, round(value)))`, rounding half away from zero.
pub fn round_clamp(value: f64, scale: &ColumnScale, col: usize) -> f64 {
    value.round().max(scale.lower[col]).min(scale.upper[col])
}

/// How continuous scores are cut into five rating categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ConversionSpec {
    /// Cutoffs are the given quantiles of the score distribution.
    FixedQuantile { cutoffs: [f64; 4] },
    /// Clip at the `(low, high)` percentiles (fractions in `[0, 1]`) and
    /// split the clipped range into five equal-width bins.
    EqualWidth { low: f64, high: f64 },
    /// Five equal-width bins over a fixed range `[lo, hi]`.
    FixedRange { lo: f64, hi: f64 },
}

impl ConversionSpec {
    /// Cutoffs used for the US News hospital scores.
    pub const US_NEWS: ConversionSpec = ConversionSpec::FixedQuantile {
        cutoffs: [0.1, 0.35, 0.65, 0.9],
    };

    /// Equal-width bins between the 1st and 99th percentiles.
    pub const PERCENTILE_1_99: ConversionSpec = ConversionSpec::EqualWidth {
        low: 0.01,
        high: 0.99,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            ConversionSpec::FixedQuantile { cutoffs: d } => {
                let ok = d[0] > 0.0 && d[3] < 1.0 && d.windows(2).all(|w| w[0] < w[1]);
                if !ok {
                    return Err(Error::InvalidParameter(format!(
                        "quantile cutoffs must satisfy 0 < d1 < d2 < d3 < d4 < 1, got {d:?}"
                    )));
                }
            }
            ConversionSpec::EqualWidth { low, high } => {
                if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low >= high {
                    return Err(Error::InvalidParameter(format!(
                        "percentile clips must satisfy 0 <= low < high <= 1, got ({low}, {high})"
                    )));
                }
            }
            ConversionSpec::FixedRange { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::InvalidParameter(format!(
                        "range must satisfy lo < hi, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted data (`h = (N - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-bin rule: `< d1 -> 1`, `[d1, d2) -> 2`, ..., `>= d4 -> 5`.
pub fn bin_rating(score: f64, cutoffs: &[f64; 4]) -> u8 {
    1 + cutoffs.iter().filter(|&&d| score >= d).count() as u8
}

/// Converts continuous scores to 1-5 ratings.
pub fn convert_scores(scores: &[f64], spec: &ConversionSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    if let Some(bad) = scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("non-finite score {bad}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoffs = match *spec {
        ConversionSpec::FixedQuantile { cutoffs } => {
            if scores.is_empty() {
                return Err(Error::InvalidParameter(
                    "fixed-quantile conversion needs at least one score".into(),
                ));
            }
            cutoffs.map(|d| quantile_sorted(&sorted, d))
        }
        ConversionSpec::EqualWidth { low, high } => {
            if scores.len() < 5 {
                return Err(Error::InvalidParameter(format!(
                    "equal-width conversion needs at least 5 scores, got {}",
                    scores.len()
                )));
            }
            let smin = quantile_sorted(&sorted, low);
            let smax = quantile_sorted(&sorted, high);
            let range = smax - smin;
            if range <= 0.0 {
                log::warn!("all clipped scores identical; assigning the middle rating");
                return Ok(vec![3; scores.len()]);
            }
            [1.0, 2.0, 3.0, 4.0].map(|k| smin + k * range / 5.0)
        }
        ConversionSpec::FixedRange { lo, hi } => {
            [1.0, 2.0, 3.0, 4.0].map(|k| lo + k * (hi - lo) / 5.0)
        }
    };
    Ok(scores.iter().map(|&s| bin_rating(s, &cutoffs)).collect())
}

/// One-dimensional index over the missing cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingIndex {
    entries: Vec<(usize, usize)>,
}

impl MissingIndex {
    /// Sorts and deduplicates the entries.
    pub fn new(mut entries: Vec<(usize, usize)>) -> Self {
        entries.sort_unstable();
        entries.dedup();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    /// `(i_q, j_q)` for index `q`.
    pub fn cell(&self, q: usize) -> (usize, usize) {
        self.entries[q]
    }

    /// Index `q` of cell `(i, j)`, if it is listed.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        self.entries.binary_search(&(i, j)).ok()
    }
}

/// Table-1 style summary of a data set.
#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub rows: usize,
    pub cols: usize,
    pub column_missing_rates: Vec<f64>,
    pub missing_rate_avg: f64,
    pub missing_rate_median: f64,
    pub missing_rate_min: f64,
    pub missing_rate_max: f64,
    pub rows_rated_by_one: f64,
    pub rows_rated_by_all: f64,
}

pub fn summarize(m: &RatingMatrix) -> DataSummary {
    let rates: Vec<f64> = (0..m.cols())
        .map(|j| {
            let missing = (0..m.rows()).filter(|&i| !m.is_observed(i, j)).count();
            missing as f64 / m.rows().max(1) as f64
        })
        .collect();
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let counts: Vec<usize> = (0..m.rows())
        .map(|i| m.row(i).iter().filter(|c| c.is_some()).count())
        .collect();
    let frac = |pred: &dyn Fn(usize) -> bool| {
        counts.iter().filter(|&&c| pred(c)).count() as f64 / m.rows().max(1) as f64
    };
    DataSummary {
        rows: m.rows(),
        cols: m.cols(),
        missing_rate_avg: rates.iter().sum::<f64>() / rates.len().max(1) as f64,
        missing_rate_median: if sorted.is_empty() {
            0.0
        } else {
            quantile_sorted(&sorted, 0.5)
        },
        missing_rate_min: sorted.first().copied().unwrap_or(0.0),
        missing_rate_max: sorted.last().copied().unwrap_or(0.0),
        rows_rated_by_one: frac(&|c| c == 1),
        rows_rated_by_all: frac(&|c| c == m.cols()),
        column_missing_rates: rates,
    }
}
