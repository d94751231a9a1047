//! Slow, direct implementations used as oracles by the integration tests.
#![allow(dead_code)]

use ordinal_impute::consensus::WeightMatrix;
use ordinal_impute::data::RatingMatrix;
use rand::Rng;

/// Levels by the definition: a missing cell gets level `v` when some other
/// row and column make the three remaining corners known before round `v`.
pub fn reference_levels(m: &RatingMatrix) -> Vec<Vec<Option<u32>>> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut level: Vec<Vec<Option<u32>>> = (0..rows)
        .map(|i| (0..cols).map(|j| m.get(i, j).map(|_| 0)).collect())
        .collect();
    for v in 1.. {
        let known = level.clone();
        let mut changed = false;
        for i in 0..rows {
            for j in 0..cols {
                if known[i][j].is_some() {
                    continue;
                }
                let found = (0..rows).filter(|&a| a != i).any(|a| {
                    (0..cols)
                        .filter(|&b| b != j)
                        .any(|b| known[a][j].is_some() && known[i][b].is_some() && known[a][b].is_some())
                });
                if found {
                    level[i][j] = Some(v);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    level
}

/// Random matrix with values 1..=5 and each cell missing with probability
/// `p_missing`; rows are never left empty.
pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, p_missing: f64) -> RatingMatrix {
    let grid: Vec<Vec<Option<f64>>> = (0..rows)
        .map(|_| {
            let mut row: Vec<Option<f64>> = (0..cols)
                .map(|_| (!rng.random_bool(p_missing)).then(|| f64::from(rng.random_range(1..=5u8))))
                .collect();
            if row.iter().all(Option::is_none) {
                let j = rng.random_range(0..cols);
                row[j] = Some(f64::from(rng.random_range(1..=5u8)));
            }
            row
        })
        .collect();
    RatingMatrix::from_rows(grid, true).unwrap()
}

/// Per-column category counts `max - min + 1` over observed values.
pub fn categories(m: &RatingMatrix) -> Vec<f64> {
    (0..m.cols())
        .map(|j| {
            let vals: Vec<f64> = (0..m.rows()).filter_map(|i| m.get(i, j)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo + 1.0
        })
        .collect()
}

/// Brute-force discordance over every 2x2 submatrix with at least one
/// missing corner, with the missing cells (row-major order) set to `z`.
/// Returns the value and its gradient with respect to `z`.
pub fn rectangle_objective(m: &RatingMatrix, w: &WeightMatrix, c: &[f64], z: &[f64]) -> (f64, Vec<f64>) {
    let (rows, cols) = (m.rows(), m.cols());
    let mut slot = vec![vec![None; cols]; rows];
    let mut x = vec![vec![0.0; cols]; rows];
    let mut q = 0;
    for i in 0..rows {
        for j in 0..cols {
            match m.get(i, j) {
                Some(v) => x[i][j] = v,
                None => {
                    x[i][j] = z[q];
                    slot[i][j] = Some(q);
                    q += 1;
                }
            }
        }
    }
    let mut f = 0.0;
    let mut g = vec![0.0; z.len()];
    for a in 0..rows {
        for b in (a + 1)..rows {
            for j in 0..cols {
                for l in (j + 1)..cols {
                    let corners = [(a, j), (b, j), (a, l), (b, l)];
                    if corners.iter().all(|&(i, jj)| slot[i][jj].is_none()) {
                        continue;
                    }
                    let d = (x[a][j] - x[b][j]) / c[j] - (x[a][l] - x[b][l]) / c[l];
                    let wt = w.get(j, l);
                    f += wt * d * d;
                    let partial = [1.0 / c[j], -1.0 / c[j], -1.0 / c[l], 1.0 / c[l]];
                    for (&(i, jj), p) in corners.iter().zip(partial) {
                        if let Some(s) = slot[i][jj] {
                            g[s] += 2.0 * wt * d * p;
                        }
                    }
                }
            }
        }
    }
    (f, g)
}

/// Minimizes [`rectangle_objective`] by conjugate gradients, using only
/// gradient evaluations (the objective is quadratic, so `H v` is a gradient
/// difference).
pub fn conjugate_gradient_oracle(m: &RatingMatrix, w: &WeightMatrix, c: &[f64]) -> Vec<f64> {
    let k = m.missing_count();
    let grad = |z: &[f64]| rectangle_objective(m, w, c, z).1;
    let mut z = vec![3.0; k];
    let g0 = grad(&vec![0.0; k]);
    let mut r: Vec<f64> = grad(&z).iter().map(|g| -g).collect();
    let mut p = r.clone();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..(20 * k + 100) {
        let rr = dot(&r, &r);
        if rr.sqrt() < 1e-13 {
            break;
        }
        let gp = grad(&p);
        let hp: Vec<f64> = gp.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let alpha = rr / dot(&p, &hp);
        for i in 0..k {
            z[i] += alpha * p[i];
        }
        // recompute the residual from scratch to avoid drift
        r = grad(&z).iter().map(|g| -g).collect();
        let beta = dot(&r, &r) / rr;
        for i in 0..k {
            p[i] = r[i] + beta * p[i];
        }
    }
    z
}

/// Central finite-difference gradient of [`rectangle_objective`].
pub fn finite_difference_gradient(m: &RatingMatrix, w: &WeightMatrix, c: &[f64], z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|q| {
            let mut up = z.to_vec();
            let mut down = z.to_vec();
            up[q] += h;
            down[q] -= h;
            (rectangle_objective(m, w, c, &up).0 - rectangle_objective(m, w, c, &down).0) / (2.0 * h)
        })
        .collect()
}

/// One-variable objective of missing cell `(p, q)` built from its fully
/// observed corners.
pub fn entry_objective(m: &RatingMatrix, w: &WeightMatrix, c: &[f64], p: usize, q: usize, v: f64) -> f64 {
    let mut f = 0.0;
    for i in (0..m.rows()).filter(|&i| i != p) {
        for j in (0..m.cols()).filter(|&j| j != q) {
            if let (Some(xiq), Some(xij), Some(xpj)) = (m.get(i, q), m.get(i, j), m.get(p, j)) {
                let d = (v - xiq) / c[q] - (xpj - xij) / c[j];
                f += w.get(q, j) * d * d;
            }
        }
    }
    f
}

/// Golden-section search for the minimum of a unimodal function on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Kendall tau-B by enumerating every pair.
pub fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            }
            if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if dx * dy > 0.0 {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let denom = (((conc + disc + tx) * (conc + disc + ty)) as f64).sqrt();
    (denom > 0.0).then(|| (conc - disc) as f64 / denom)
}

/// Two-sided rank-sum p-value by listing every assignment of the pooled
/// sample to the first group.
pub fn permutation_u_p(g1: &[f64], g2: &[f64]) -> f64 {
    let pooled: Vec<f64> = g1.iter().chain(g2).copied().collect();
    let n = pooled.len();
    let rank = |v: f64| {
        let below = pooled.iter().filter(|&&x| x < v).count() as f64;
        let equal = pooled.iter().filter(|&&x| x == v).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = pooled.iter().map(|&v| rank(v)).collect();
    let k = g1.len();
    let mean = k as f64 * (n as f64 + 1.0) / 2.0;
    let observed = (ranks[..k].iter().sum::<f64>() - mean).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (s - mean).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Probability that G(n, p) is connected, by the standard recurrence over
/// the size of the component containing a fixed vertex.
pub fn exact_connectivity(n: usize, p: f64) -> f64 {
    let q = 1.0 - p;
    let mut conn = vec![0.0; n + 1];
    let binom = |a: usize, b: usize| -> f64 { (0..b).fold(1.0, |acc, i| acc * (a - i) as f64 / (i + 1) as f64) };
    if n >= 1 {
        conn[1] = 1.0;
    }
    for size in 2..=n {
        let split: f64 = (1..size)
            .map(|k| binom(size - 1, k - 1) * conn[k] * q.powi((k * (size - k)) as i32))
            .sum();
        conn[size] = 1.0 - split;
    }
    conn[n]
}
