//! QP-AS: exact imputation through the first-order conditions of the
//! weighted discordance objective.
//!
//! After dividing every column by its category count, each missing cell
//! `z_q = x(i_q, j_q)` enters the squared discordance
//! `(x_kl - x_il + x_ij - x_kj)^2` of every 2x2 submatrix it belongs to.
//! Setting the partial derivatives to zero yields a dense symmetric system
//! `A z = b` with
//!
//! ```text
//! A_qs =  2 (m-1) W_q        i_q = i_s, j_q = j_s
//!        -2 (m-1) w(j_q,j_s) i_q = i_s, j_q != j_s
//!        -2 W_q              i_q != i_s, j_q = j_s
//!         2 w(j_q,j_s)       i_q != i_s, j_q != j_s
//! ```
//!
//! where `W_q = sum_{j != j_q} w(j_q, j)`. Identical rows can be collapsed
//! with multiplicities `d_i`, which turns `m - 1` into `sum_{i != i_q} d_i d_{i_q}`
//! and the cross-row terms into `d_{i_q} d_{i_s}` multiples. A single assembly
//! routine handles both (all `d_i = 1` is the plain system).

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::consensus::WeightMatrix;
use crate::data::{column_scales, normalize, round_clamp, ColumnScale, MissingIndex, RatingMatrix};
use crate::error::{Error, Result};
use crate::estimatability::is_estimatable;

/// Default cap on the number of unknowns accepted by the dense solver.
pub const DEFAULT_MAX_UNKNOWNS: usize = 20_000;

/// The assembled first-order system in normalized scale.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Unknowns of the (possibly reduced) system, indexing rows of the
    /// reduced matrix when `multiplicities` is set.
    pub index: MissingIndex,
    pub scale: ColumnScale,
    /// Row multiplicities `d_i` of the reduced matrix (deduplicated systems).
    pub multiplicities: Option<Vec<usize>>,
    /// For deduplicated systems: original row -> reduced row.
    pub row_map: Option<Vec<usize>>,
}

impl LinearSystem {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// `max |A z - b|`.
    pub fn residual(&self, z: &DVector<f64>) -> f64 {
        (&self.a * z - &self.b).amax()
    }

    /// Plain-text dump: dimension line, then `A` row by row, then `b`.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.len());
        for r in 0..self.len() {
            let row: Vec<String> = (0..self.len()).map(|c| format!("{:e}", self.a[(r, c)])).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        let b: Vec<String> = self.b.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&b.join(" "));
        out.push('\n');
        out
    }
}

/// Options for [`assemble_system`] and [`impute_qp_as`].
#[derive(Debug, Clone)]
pub struct QpOptions {
    pub dedupe: bool,
    pub integer_mode: bool,
    pub max_unknowns: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            dedupe: false,
            integer_mode: true,
            max_unknowns: DEFAULT_MAX_UNKNOWNS,
        }
    }
}

/// Groups identical rows (values and missingness). Returns the reduced row
/// list (first occurrence of each pattern), multiplicities and the
/// original-to-reduced row map.
fn group_rows(m: &RatingMatrix) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut seen: HashMap<Vec<Option<u64>>, usize> = HashMap::new();
    let mut reps = Vec::new();
    let mut counts = Vec::new();
    let mut map = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let key: Vec<Option<u64>> = m.row(i).iter().map(|c| c.map(f64::to_bits)).collect();
        let r = *seen.entry(key).or_insert_with(|| {
            reps.push(i);
            counts.push(0);
            reps.len() - 1
        });
        counts[r] += 1;
        map.push(r);
    }
    (reps, counts, map)
}

fn check_shape(m: &RatingMatrix) -> Result<()> {
    if m.cols() < 2 || m.rows() < 2 {
        return Err(Error::Dimension(format!(
            "imputation needs at least 2 rows and 2 columns, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

/// Builds `A z = b` for the missing cells of `m`.
pub fn assemble_system(m: &RatingMatrix, w: &WeightMatrix, dedupe: bool) -> Result<LinearSystem> {
    check_shape(m)?;
    if w.len() != m.cols() {
        return Err(Error::Dimension(format!(
            "weight matrix is {0}x{0} for {1} columns",
            w.len(),
            m.cols()
        )));
    }
    let conn = is_estimatable(m);
    if !conn.is_estimatable {
        return Err(Error::NotEstimatable {
            components: conn.components,
        });
    }
    let scale = column_scales(m)?;
    let norm = normalize(m, &scale);
    let (reduced, mult, row_map) = if dedupe {
        let (reps, counts, map) = group_rows(&norm);
        (norm.select_rows(&reps), counts, Some(map))
    } else {
        (norm.clone(), vec![1; norm.rows()], None)
    };
    let (a, b, index) = assemble_weighted(&reduced, w, &mult);
    Ok(LinearSystem {
        a,
        b,
        index,
        scale,
        multiplicities: dedupe.then_some(mult),
        row_map,
    })
}

/// Core assembly on a normalized matrix with row multiplicities `d`.
/// Precomputes per-column sums so the cost is `O(|Q|^2 + m n)` plus the
/// per-row weighted sums.
fn assemble_weighted(
    x: &RatingMatrix,
    w: &WeightMatrix,
    d: &[usize],
) -> (DMatrix<f64>, DVector<f64>, MissingIndex) {
    let (m, n) = (x.rows(), x.cols());
    let index = x.missing_index();
    let p = index.len();
    let total: f64 = d.iter().map(|&k| k as f64).sum();
    let y = |i: usize, j: usize| x.get(i, j).unwrap_or(0.0);
    // weighted column sums of y: sum_i d_i y_ij
    let col_sum: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| d[i] as f64 * y(i, j)).sum())
        .collect();
    let wsum: Vec<f64> = (0..n).map(|l| w.off_diagonal_row_sum(l)).collect();

    let b: Vec<f64> = (0..p)
        .into_par_iter()
        .map(|q| {
            let (iq, jq) = index.cell(q);
            let di = d[iq] as f64;
            let pair_mass = (total - di) * di;
            let mut own = 0.0;
            let mut cross = 0.0;
            for j in (0..n).filter(|&j| j != jq) {
                own += w.get(jq, j) * y(iq, j);
                cross += w.get(jq, j) * (col_sum[j] - di * y(iq, j));
            }
            let col_other = col_sum[jq] - di * y(iq, jq);
            2.0 * pair_mass * own + 2.0 * wsum[jq] * di * col_other - 2.0 * di * cross
        })
        .collect();

    let mut a = DMatrix::<f64>::zeros(p, p);
    // nalgebra is column-major; fill column s = row s by symmetry
    a.as_mut_slice()
        .par_chunks_mut(p.max(1))
        .enumerate()
        .for_each(|(q, col)| {
            let (iq, jq) = index.cell(q);
            let di = d[iq] as f64;
            let pair_mass = (total - di) * di;
            for (s, out) in col.iter_mut().enumerate() {
                let (is, js) = index.cell(s);
                *out = match (iq == is, jq == js) {
                    (true, true) => 2.0 * pair_mass * wsum[jq],
                    (true, false) => -2.0 * pair_mass * w.get(jq, js),
                    (false, true) => -2.0 * di * d[is] as f64 * wsum[jq],
                    (false, false) => 2.0 * di * d[is] as f64 * w.get(jq, js),
                };
            }
        });
    (a, DVector::from_vec(b), index)
}

/// Solves `A z = b` by Cholesky factorization.
pub fn solve_system(system: &LinearSystem) -> Result<DVector<f64>> {
    if system.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let chol = system
        .a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("matrix is not numerically positive definite".into()))?;
    let z = chol.solve(&system.b);
    let res = system.residual(&z);
    let tol = 1e-8 * (1.0 + system.b.amax());
    if !(res <= tol) {
        return Err(Error::Solver(format!(
            "residual {res:e} exceeds tolerance {tol:e}"
        )));
    }
    Ok(z)
}

/// Which objective [`objective_value`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveForm {
    /// Every 2x2 submatrix with at least one missing corner counted once.
    /// This is the function whose stationary point `A z = b` describes.
    Rectangles,
    /// Sum over missing cells `(k, l)` and all `(i, j)` off row `k` and
    /// column `l`; a submatrix with several missing corners is counted once
    /// per missing corner.
    PerMissingEntry,
}

/// Weighted discordance of a completed matrix, normalized by `scale`, over
/// the submatrices touching a cell of `missing`.
pub fn objective_value(
    filled: &RatingMatrix,
    scale: &ColumnScale,
    w: &WeightMatrix,
    missing: &MissingIndex,
    form: ObjectiveForm,
) -> Result<f64> {
    if !filled.is_complete() {
        return Err(Error::Contract("objective needs a fully observed matrix".into()));
    }
    let (m, n) = (filled.rows(), filled.cols());
    let x = |i: usize, j: usize| filled.get(i, j).unwrap_or(0.0) / scale.categories[j];
    let is_missing = |i: usize, j: usize| missing.position(i, j).is_some();
    let total = missing
        .entries()
        .par_iter()
        .map(|&(k, l)| {
            let mut acc = 0.0;
            for i in (0..m).filter(|&i| i != k) {
                for j in (0..n).filter(|&j| j != l) {
                    let dval = x(k, l) - x(i, l) + x(i, j) - x(k, j);
                    let mult = match form {
                        ObjectiveForm::PerMissingEntry => 1.0,
                        ObjectiveForm::Rectangles => {
                            1 + is_missing(i, l) as u32 + is_missing(k, j) as u32 + is_missing(i, j) as u32
                        }
                        .into(),
                    };
                    acc += w.get(l, j) * dval * dval / mult;
                }
            }
            acc
        })
        .sum();
    Ok(total)
}

/// Imputed cells and diagnostics shared by all imputers.
#[derive(Debug, Clone, Serialize)]
pub struct ImputationResult {
    pub algorithm: String,
    /// `(row, col, value)` in the original rating scale, before rounding.
    pub continuous: Vec<(usize, usize, f64)>,
    #[serde(skip)]
    pub rounded: RatingMatrix,
    pub objective_value: Option<f64>,
    pub residual_norm: Option<f64>,
    pub wall_time: f64,
}

impl ImputationResult {
    pub fn value_at(&self, i: usize, j: usize) -> Option<f64> {
        self.continuous
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&(i, j)))
            .ok()
            .map(|k| self.continuous[k].2)
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "algorithm": self.algorithm,
            "imputed_cells": self.continuous.len(),
            "objective_value": self.objective_value,
            "residual_norm": self.residual_norm,
            "wall_time": self.wall_time,
            "continuous": self.continuous,
        })
    }
}

/// Writes continuous values into `m`, rounding and clamping in integer mode.
pub(crate) fn fill_matrix(
    m: &RatingMatrix,
    scale: &ColumnScale,
    continuous: &[(usize, usize, f64)],
    integer_mode: bool,
) -> RatingMatrix {
    let mut out = m.clone();
    for &(i, j, v) in continuous {
        let v = if integer_mode {
            round_clamp(v, scale, j)
        } else {
            v
        };
        out.set(i, j, Some(v));
    }
    out
}

/// Assemble, solve, map back to the original scale and round/clamp.
pub fn impute_qp_as(m: &RatingMatrix, w: &WeightMatrix, opts: &QpOptions) -> Result<ImputationResult> {
    let start = Instant::now();
    let missing = m.missing_index();
    if missing.len() > opts.max_unknowns {
        return Err(Error::ResourceCap {
            count: missing.len(),
            cap: opts.max_unknowns,
        });
    }
    let system = assemble_system(m, w, opts.dedupe)?;
    let z = solve_system(&system)?;
    let residual = if system.is_empty() {
        0.0
    } else {
        system.residual(&z)
    };
    let continuous: Vec<(usize, usize, f64)> = match &system.row_map {
        None => system
            .index
            .entries()
            .iter()
            .zip(z.iter())
            .map(|(&(i, j), &v)| (i, j, v * system.scale.categories[j]))
            .collect(),
        Some(map) => missing
            .entries()
            .iter()
            .map(|&(i, j)| {
                let q = system
                    .index
                    .position(map[i], j)
                    .expect("duplicate rows share their missing cells");
                (i, j, z[q] * system.scale.categories[j])
            })
            .collect(),
    };
    let mut exact = m.clone();
    for &(i, j, v) in &continuous {
        exact.set(i, j, Some(v));
    }
    let objective = objective_value(&exact, &system.scale, w, &missing, ObjectiveForm::Rectangles)?;
    let rounded = fill_matrix(m, &system.scale, &continuous, opts.integer_mode && m.integer_mode());
    Ok(ImputationResult {
        algorithm: "qp-as".into(),
        continuous,
        rounded,
        objective_value: Some(objective),
        residual_norm: Some(residual),
        wall_time: start.elapsed().as_secs_f64(),
    })
}
