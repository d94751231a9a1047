//! dQP-SVAS: every missing cell imputed on its own by a closed form.
//!
//! For a missing cell `(p, q)` only the 2x2 submatrices whose other three
//! corners are observed are used (the corner set `R_pq`). Each sub-problem
//! is a one-variable quadratic, minimized at
//!
//! ```text
//!          sum_R w_qj (x_iq / c_q + (x_pj - x_ij) / c_j)
//! x*_pq = -----------------------------------------------
//!                    sum_R w_qj / c_q
//! ```
//!
//! The sums over `R_pq` split by column `j`: the rows contributing for `j`
//! are exactly the rows observing both `q` and `j`, so per-column-pair counts
//! and sums give every cell in `O(n)`.

use std::time::Instant;

use rayon::prelude::*;

use crate::consensus::WeightMatrix;
use crate::data::{column_scales, ColumnScale, RatingMatrix};
use crate::error::{Error, Result};
use crate::qp::{fill_matrix, ImputationResult};

/// Fully observed corners `(i, j)` for missing cell `(p, q)`.
pub fn corner_set(m: &RatingMatrix, p: usize, q: usize) -> Result<Vec<(usize, usize)>> {
    if m.is_observed(p, q) {
        return Err(Error::Contract(format!("cell ({p}, {q}) is observed")));
    }
    let set: Vec<(usize, usize)> = (0..m.rows())
        .filter(|&i| i != p && m.is_observed(i, q))
        .flat_map(|i| {
            (0..m.cols())
                .filter(move |&j| j != q && m.is_observed(i, j) && m.is_observed(p, j))
                .map(move |j| (i, j))
        })
        .collect();
    if set.is_empty() {
        return Err(Error::NotLevel1 {
            entries: vec![(p, q)],
        });
    }
    Ok(set)
}

/// One-variable objective of cell `(p, q)` evaluated at `value`.
pub fn entry_objective(
    m: &RatingMatrix,
    scale: &ColumnScale,
    w: &WeightMatrix,
    p: usize,
    q: usize,
    value: f64,
) -> Result<f64> {
    let c = &scale.categories;
    Ok(corner_set(m, p, q)?
        .into_iter()
        .map(|(i, j)| {
            let x = |a: usize, b: usize| m.get(a, b).expect("corner cells are observed");
            let d = (value - x(i, q)) / c[q] + (x(i, j) - x(p, j)) / c[j];
            w.get(q, j) * d * d
        })
        .sum())
}

/// Per column pair `(q, j)`: rows observing both, and the sums of each
/// column's values over those rows.
struct PairSums {
    n: usize,
    count: Vec<f64>,
    /// `sum x_iq` over rows observing q and j, at `[q * n + j]`.
    sum_first: Vec<f64>,
}

impl PairSums {
    fn new(m: &RatingMatrix) -> Self {
        let n = m.cols();
        let mut count = vec![0.0; n * n];
        let mut sum_first = vec![0.0; n * n];
        let mut obs = Vec::with_capacity(n);
        for i in 0..m.rows() {
            obs.clear();
            obs.extend((0..n).filter_map(|j| m.get(i, j).map(|x| (j, x))));
            for &(a, xa) in &obs {
                for &(b, _) in &obs {
                    count[a * n + b] += 1.0;
                    sum_first[a * n + b] += xa;
                }
            }
        }
        Self {
            n,
            count,
            sum_first,
        }
    }

    fn count(&self, a: usize, b: usize) -> f64 {
        self.count[a * self.n + b]
    }

    /// Sum of column `a` over rows observing `a` and `b`.
    fn sum(&self, a: usize, b: usize) -> f64 {
        self.sum_first[a * self.n + b]
    }
}

/// Closed-form value of one missing cell, in the original scale.
fn closed_form(
    m: &RatingMatrix,
    scale: &ColumnScale,
    w: &WeightMatrix,
    sums: &PairSums,
    p: usize,
    q: usize,
) -> Option<f64> {
    let c = &scale.categories;
    let (mut num, mut den) = (0.0, 0.0);
    for j in (0..m.cols()).filter(|&j| j != q) {
        let Some(xpj) = m.get(p, j) else { continue };
        let k = sums.count(q, j);
        if k == 0.0 {
            continue;
        }
        let wq = w.get(q, j);
        num += wq * (sums.sum(q, j) / c[q] + (k * xpj - sums.sum(j, q)) / c[j]);
        den += wq * k / c[q];
    }
    (den > 0.0).then(|| num / den)
}

/// Imputes every missing cell by the closed form. Fails with the list of
/// cells that have an empty corner set.
pub fn impute_dqp_svas(m: &RatingMatrix, w: &WeightMatrix, integer_mode: bool) -> Result<ImputationResult> {
    let start = Instant::now();
    if m.cols() < 2 || m.rows() < 2 {
        return Err(Error::Dimension(format!(
            "imputation needs at least 2 rows and 2 columns, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if w.len() != m.cols() {
        return Err(Error::Dimension(format!(
            "weight matrix is {0}x{0} for {1} columns",
            w.len(),
            m.cols()
        )));
    }
    let scale = column_scales(m)?;
    let sums = PairSums::new(m);
    let missing = m.missing_index();
    let values: Vec<Option<f64>> = missing
        .entries()
        .par_iter()
        .map(|&(p, q)| closed_form(m, &scale, w, &sums, p, q))
        .collect();
    let failed: Vec<(usize, usize)> = missing
        .entries()
        .iter()
        .zip(&values)
        .filter(|(_, v)| v.is_none())
        .map(|(&cell, _)| cell)
        .collect();
    if !failed.is_empty() {
        return Err(Error::NotLevel1 { entries: failed });
    }
    let continuous: Vec<(usize, usize, f64)> = missing
        .entries()
        .iter()
        .zip(values)
        .map(|(&(p, q), v)| (p, q, v.expect("checked above")))
        .collect();
    let rounded = fill_matrix(m, &scale, &continuous, integer_mode && m.integer_mode());
    Ok(ImputationResult {
        algorithm: "dqp-svas".into(),
        continuous,
        rounded,
        objective_value: None,
        residual_norm: None,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Like [`impute_dqp_svas`] but for data that is estimatable without being
/// level-1: cells are imputed level by level, each round treating the
/// continuous values from earlier rounds as known.
pub fn impute_dqp_svas_levels(
    m: &RatingMatrix,
    w: &WeightMatrix,
    integer_mode: bool,
) -> Result<ImputationResult> {
    let start = Instant::now();
    if w.len() != m.cols() {
        return Err(Error::Dimension(format!(
            "weight matrix is {0}x{0} for {1} columns",
            w.len(),
            m.cols()
        )));
    }
    let scale = column_scales(m)?;
    let mut work = m.clone();
    let mut pending = m.missing_index().entries().to_vec();
    let mut continuous = Vec::with_capacity(pending.len());
    while !pending.is_empty() {
        let sums = PairSums::new(&work);
        let values: Vec<Option<f64>> = pending
            .par_iter()
            .map(|&(p, q)| closed_form(&work, &scale, w, &sums, p, q))
            .collect();
        let before = pending.len();
        let mut rest = Vec::new();
        for ((p, q), v) in pending.into_iter().zip(values) {
            match v {
                Some(x) => continuous.push((p, q, x)),
                None => rest.push((p, q)),
            }
        }
        if rest.len() == before {
            return Err(Error::NotEstimatable {
                components: crate::estimatability::rp_graph(m).components(),
            });
        }
        for &(p, q, x) in &continuous[continuous.len() - (before - rest.len())..] {
            work.set(p, q, Some(x));
        }
        pending = rest;
    }
    continuous.sort_by_key(|&(p, q, _)| (p, q));
    let rounded = fill_matrix(m, &scale, &continuous, integer_mode && m.integer_mode());
    Ok(ImputationResult {
        algorithm: "dqp-svas".into(),
        continuous,
        rounded,
        objective_value: None,
        residual_norm: None,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{build_weights, WeightMode};
    use crate::qp::{impute_qp_as, QpOptions};

    fn fixture() -> RatingMatrix {
        RatingMatrix::parse_grid("1 1; 2 2; 3 .").unwrap()
    }

    #[test]
    fn hand_closed_form() {
        let r = impute_dqp_svas(&fixture(), &WeightMatrix::uniform(2), true).unwrap();
        // numerator (1/2 + 2/3) + (1 + 1/3) = 2.5, denominator 2 * (1/2) = 1
        assert!((r.continuous[0].2 - 2.5).abs() < 1e-12);
        assert_eq!(r.rounded.get(2, 1), Some(2.0));
    }

    #[test]
    fn corner_sets() {
        assert_eq!(corner_set(&fixture(), 2, 1).unwrap(), [(0, 0), (1, 0)]);
        let full_minus_one = RatingMatrix::parse_grid("1 2 3; 2 . 1; 3 1 2; 1 1 1").unwrap();
        assert_eq!(corner_set(&full_minus_one, 1, 1).unwrap().len(), 3 * 2);
        // row 1 misses column 1 as well, so column 1 drops out
        let m = RatingMatrix::parse_grid("1 2 3; . . 1; 3 1 .; 1 1 1").unwrap();
        let r = corner_set(&m, 1, 0).unwrap();
        assert_eq!(r, [(0, 2), (3, 2)]);
        assert!(matches!(
            corner_set(&RatingMatrix::parse_grid("1 .; . 2; 3 .").unwrap(), 0, 1),
            Err(Error::NotLevel1 { .. })
        ));
    }

    #[test]
    fn fast_path_matches_corner_enumeration() {
        let m = RatingMatrix::parse_grid("1 . 3 2; 2 2 . 1; . 3 3 3; 4 . 1 2; 2 2 2 .; 3 4 . 4").unwrap();
        let w = build_weights(&m, WeightMode::Kendall, 0.01);
        let s = column_scales(&m).unwrap();
        let r = impute_dqp_svas(&m, &w, false).unwrap();
        for &(p, q, v) in &r.continuous {
            let set = corner_set(&m, p, q).unwrap();
            let x = |a, b| m.get(a, b).unwrap();
            let c = &s.categories;
            let num: f64 = set
                .iter()
                .map(|&(i, j)| w.get(q, j) * (x(i, q) / c[q] + (x(p, j) - x(i, j)) / c[j]))
                .sum();
            let den: f64 = set.iter().map(|&(_, j)| w.get(q, j) / c[q]).sum();
            assert!((v - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn complete_matrix_unchanged() {
        let m = RatingMatrix::parse_grid("1 2; 2 1; 3 3").unwrap();
        let r = impute_dqp_svas(&m, &WeightMatrix::uniform(2), true).unwrap();
        assert!(r.continuous.is_empty());
        assert_eq!(r.rounded, m);
    }

    #[test]
    fn agrees_with_qp_on_single_missing() {
        let m = RatingMatrix::parse_grid("1 2 3; 2 . 1; 3 1 2; 1 1 1; 4 3 2").unwrap();
        let w = build_weights(&m, WeightMode::Kendall, 0.01);
        let a = impute_dqp_svas(&m, &w, false).unwrap();
        let b = impute_qp_as(&m, &w, &QpOptions::default()).unwrap();
        assert!((a.continuous[0].2 - b.continuous[0].2).abs() < 1e-10);
    }

    #[test]
    fn level1_violation_lists_cells() {
        let m = RatingMatrix::parse_grid("1 . . .; 2 3 . 1; 4 2 . 5; . . 3 3; . . 2 .").unwrap();
        match impute_dqp_svas(&m, &WeightMatrix::uniform(4), true) {
            Err(Error::NotLevel1 { entries }) => assert_eq!(entries.len(), 3),
            other => panic!("expected level-1 error, got {other:?}"),
        }
    }

    #[test]
    fn levels_fill_level2_cells() {
        let m = RatingMatrix::parse_grid("1 . . .; 2 3 . 1; 4 2 . 5; . . 3 3; . . 2 .").unwrap();
        let w = WeightMatrix::uniform(4);
        let r = impute_dqp_svas_levels(&m, &w, true).unwrap();
        assert_eq!(r.continuous.len(), 10);
        assert!(r.rounded.is_complete());
        // level-1 cells agree with the plain closed form on the original data
        let s = column_scales(&m).unwrap();
        let sums = PairSums::new(&m);
        for &(p, q, v) in &r.continuous {
            if let Some(x) = closed_form(&m, &s, &w, &sums, p, q) {
                assert!((x - v).abs() < 1e-12);
            }
        }
        let level1 = RatingMatrix::parse_grid("1 2 3; 2 . 1; 3 1 .; 1 1 1").unwrap();
        let w3 = WeightMatrix::uniform(3);
        let a = impute_dqp_svas_levels(&level1, &w3, false).unwrap();
        let b = impute_dqp_svas(&level1, &w3, false).unwrap();
        assert_eq!(a.continuous, b.continuous);
        let split = RatingMatrix::parse_grid("1 .; 2 .; . 1; . 2").unwrap();
        assert!(matches!(
            impute_dqp_svas_levels(&split, &WeightMatrix::uniform(2), true),
            Err(Error::NotEstimatable { .. })
        ));
    }

    #[test]
    fn entry_objective_minimized() {
        let m = fixture();
        let s = column_scales(&m).unwrap();
        let w = WeightMatrix::uniform(2);
        let f = |v| entry_objective(&m, &s, &w, 2, 1, v).unwrap();
        assert!(f(2.5 - 1e-3) > f(2.5) && f(2.5 + 1e-3) > f(2.5));
    }
}
