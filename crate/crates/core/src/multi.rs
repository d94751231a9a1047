//! Multiple imputation by repeated row subsampling.
//!
//! Each round draws `ceil(fraction * m)` rows without replacement, imputes
//! the subsample with a base imputer and records the value of every missing
//! cell of the sampled rows. Rounds continue until every row has been drawn
//! `min_coverage` times. The spread of the recorded values shows how stable
//! the imputation is.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::WeightMatrix;
use crate::data::{column_scales, round_clamp, RatingMatrix};
use crate::dqp::{impute_dqp_svas, impute_dqp_svas_levels};
use crate::error::{Error, Result};
use crate::estimatability::{is_estimatable, is_level1};
use crate::evaluation::Algorithm;
use crate::qp::{impute_qp_as, ImputationResult, QpOptions, DEFAULT_MAX_UNKNOWNS};

/// How the per-cell samples are combined into one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of the continuous values, then rounded.
    Mean,
    /// Most frequent rounded value; ties go to the smaller value.
    Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiOptions {
    pub base: Algorithm,
    pub row_fraction: f64,
    pub min_coverage: usize,
    /// Draws allowed per round before giving up on a usable subsample.
    pub max_retries: usize,
    pub aggregation: Aggregation,
    pub integer_mode: bool,
    /// dQP-SVAS base only: accept estimatable subsamples that are not
    /// level-1 and impute them level by level.
    pub fallback: bool,
    pub dedupe: bool,
    pub max_unknowns: usize,
}

impl Default for MiOptions {
    fn default() -> Self {
        Self {
            base: Algorithm::DqpSvas,
            row_fraction: 0.8,
            min_coverage: 10,
            max_retries: 100,
            aggregation: Aggregation::Mean,
            integer_mode: true,
            fallback: false,
            dedupe: false,
            max_unknowns: DEFAULT_MAX_UNKNOWNS,
        }
    }
}

/// Values recorded for one missing cell of the source matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiEntry {
    pub row: usize,
    pub col: usize,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiResult {
    pub entries: Vec<MiEntry>,
    /// Number of subsamples imputed.
    pub sample_count: usize,
    /// Share of cells whose rounded values never changed.
    pub zero_sd_fraction: f64,
    /// Mean over cells of the standard deviation of the continuous values.
    pub avg_sd: f64,
    pub aggregated: RatingMatrix,
    /// Times each row was drawn.
    pub coverage: Vec<usize>,
}

impl MiResult {
    /// Summary as JSON; per-cell samples only when `full` is set.
    pub fn to_json(&self, full: bool) -> serde_json::Value {
        let mut v = serde_json::json!({
            "sample_count": self.sample_count,
            "zero_sd_fraction": self.zero_sd_fraction,
            "avg_sd": self.avg_sd,
            "imputed_cells": self.entries.len(),
            "min_coverage": self.coverage.iter().min(),
        });
        if full {
            v["entries"] = serde_json::to_value(&self.entries).expect("entries serialize");
        }
        v
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn usable(sub: &RatingMatrix, opts: &MiOptions) -> bool {
    if !is_estimatable(sub).is_estimatable {
        return false;
    }
    opts.base != Algorithm::DqpSvas || opts.fallback || is_level1(sub).is_level1
}

fn run_base(sub: &RatingMatrix, w: &WeightMatrix, opts: &MiOptions) -> Result<ImputationResult> {
    match opts.base {
        Algorithm::QpAs => impute_qp_as(
            sub,
            w,
            &QpOptions {
                dedupe: opts.dedupe,
                integer_mode: false,
                max_unknowns: opts.max_unknowns,
            },
        ),
        Algorithm::DqpSvas if opts.fallback => impute_dqp_svas_levels(sub, w, false),
        Algorithm::DqpSvas => impute_dqp_svas(sub, w, false),
        other => Err(Error::InvalidParameter(format!(
            "{other} cannot serve as a multiple-imputation base"
        ))),
    }
}

/// Repeats subsample imputation until every row is covered
/// `opts.min_coverage` times.
pub fn impute_mi<R: Rng + ?Sized>(
    m: &RatingMatrix,
    w: &WeightMatrix,
    opts: &MiOptions,
    rng: &mut R,
) -> Result<MiResult> {
    if !(opts.row_fraction > 0.0 && opts.row_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "row fraction must be in (0, 1], got {}",
            opts.row_fraction
        )));
    }
    if !matches!(opts.base, Algorithm::QpAs | Algorithm::DqpSvas) {
        return Err(Error::InvalidParameter(format!(
            "{} cannot serve as a multiple-imputation base",
            opts.base
        )));
    }
    let connectivity = is_estimatable(m);
    if !connectivity.is_estimatable {
        return Err(Error::NotEstimatable {
            components: connectivity.components,
        });
    }
    let rows = m.rows();
    let take = ((opts.row_fraction * rows as f64).ceil() as usize).clamp(1, rows);
    let scale = column_scales(m)?;
    let missing = m.missing_index();
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); missing.len()];
    let mut coverage = vec![0usize; rows];
    let mut sample_count = 0;

    while coverage.iter().any(|&c| c < opts.min_coverage) {
        let mut picked = None;
        for _ in 0..=opts.max_retries {
            let mut idx = sample(rng, rows, take).into_vec();
            idx.sort_unstable();
            let sub = m.select_rows(&idx);
            if usable(&sub, opts) {
                picked = Some((idx, sub));
                break;
            }
        }
        let Some((idx, sub)) = picked else {
            return Err(Error::MultipleImputation(format!(
                "no usable subsample of {take} rows in {} draws; try a larger row fraction",
                opts.max_retries + 1
            )));
        };
        let result = run_base(&sub, w, opts)?;
        for &(si, j, v) in &result.continuous {
            let q = missing
                .position(idx[si], j)
                .expect("cells missing in the subsample are missing in the source");
            samples[q].push(v);
        }
        for &i in &idx {
            coverage[i] += 1;
        }
        sample_count += 1;
    }

    let integer = opts.integer_mode && m.integer_mode();
    let round = |v: f64, j: usize| if integer { round_clamp(v, &scale, j) } else { v };
    let entries: Vec<MiEntry> = missing
        .entries()
        .iter()
        .zip(samples)
        .map(|(&(row, col), samples)| MiEntry { row, col, samples })
        .collect();
    let mut aggregated = m.clone();
    let mut zero_sd = 0usize;
    let mut sd_sum = 0.0;
    for e in &entries {
        let mut rounded: Vec<f64> = e.samples.iter().map(|&v| round(v, e.col)).collect();
        if rounded.windows(2).all(|w| w[0] == w[1]) {
            zero_sd += 1;
        }
        sd_sum += std_dev(&e.samples);
        let value = match opts.aggregation {
            Aggregation::Mean => round(e.samples.iter().sum::<f64>() / e.samples.len() as f64, e.col),
            Aggregation::Mode => {
                rounded.sort_by(f64::total_cmp);
                let mut best = (rounded[0], 0);
                for run in rounded.chunk_by(|a, b| a == b) {
                    if run.len() > best.1 {
                        best = (run[0], run.len());
                    }
                }
                best.0
            }
        };
        aggregated.set(e.row, e.col, Some(value));
    }
    let cells = entries.len().max(1) as f64;
    Ok(MiResult {
        zero_sd_fraction: if entries.is_empty() { 1.0 } else { zero_sd as f64 / cells },
        avg_sd: sd_sum / cells,
        entries,
        sample_count,
        aggregated,
        coverage,
    })
}
