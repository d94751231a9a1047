//! Pairwise consensus between rating providers.
//!
//! Kendall's tau-b between columns feeds the solver weights; the Mann-Whitney
//! U test checks whether subjects missing from one provider are rated
//! differently by another.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::RatingMatrix;

/// Default truncation floor for weights.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Significance level used to report a direction for the U test.
pub const SIGNIFICANCE: f64 = 0.05;

/// Total sample size up to which the U test null distribution is exact.
pub const EXACT_U_LIMIT: usize = 12;

fn std_normal_sf(z: f64) -> f64 {
    Normal::standard().sf(z)
}

/// Sizes of runs of equal values in sorted data.
fn tie_groups(sorted: &[f64]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < sorted.len() {
        let mut e = k + 1;
        while e < sorted.len() && sorted[e] == sorted[k] {
            e += 1;
        }
        out.push((e - k) as u64);
        k = e;
    }
    out
}

fn pairs(t: u64) -> i64 {
    (t * t.saturating_sub(1) / 2) as i64
}

/// Concordance counts behind tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub n: usize,
    /// Concordant minus discordant pairs.
    pub score: i64,
    pub total_pairs: i64,
    pub ties_x: i64,
    pub ties_y: i64,
}

impl PairCounts {
    pub fn tau_b(&self) -> Option<f64> {
        let denom = ((self.total_pairs - self.ties_x) as f64) * ((self.total_pairs - self.ties_y) as f64);
        if self.n < 2 || denom <= 0.0 {
            return None;
        }
        Some(self.score as f64 / denom.sqrt())
    }
}

/// Counts via Knight's algorithm: sort by `(x, y)`, then count the strict
/// `y` inversions with a merge sort. `O(k log k)`.
pub fn pair_counts(x: &[f64], y: &[f64]) -> PairCounts {
    assert_eq!(x.len(), y.len(), "paired lists must have equal length");
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = idx.iter().map(|&k| x[k]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&k| y[k]).collect();

    let ties_x: i64 = tie_groups(&xs).into_iter().map(pairs).sum();
    // joint ties: consecutive equal (x, y)
    let mut joint = 0i64;
    let mut k = 0;
    while k < n {
        let mut e = k + 1;
        while e < n && xs[e] == xs[k] && ys[e] == ys[k] {
            e += 1;
        }
        joint += pairs((e - k) as u64);
        k = e;
    }
    let mut buf = vec![0.0; n];
    let discordant = merge_count(&mut ys, &mut buf) as i64;
    let ties_y: i64 = tie_groups(&ys).into_iter().map(pairs).sum();
    let total_pairs = pairs(n as u64);
    let concordant = total_pairs - ties_x - ties_y + joint - discordant;
    PairCounts {
        n,
        score: concordant - discordant,
        total_pairs,
        ties_x,
        ties_y,
    }
}

/// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut a, mut b, mut k) = (0, mid, 0);
    while a < mid && b < n {
        if v[b] < v[a] {
            buf[k] = v[b];
            swaps += (mid - a) as u64;
            b += 1;
        } else {
            buf[k] = v[a];
            a += 1;
        }
        k += 1;
    }
    buf[k..k + mid - a].copy_from_slice(&v[a..mid]);
    k += mid - a;
    buf[k..k + n - b].copy_from_slice(&v[b..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b of two equal-length lists; `None` when fewer than two
/// pairs or one list is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    pair_counts(x, y).tau_b()
}

/// Tau-b with a two-sided p-value from the tie-corrected normal
/// approximation of the score variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauTest {
    pub tau: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn kendall_tau_b_test(x: &[f64], y: &[f64]) -> Option<TauTest> {
    let counts = pair_counts(x, y);
    let tau = counts.tau_b()?;
    let n = counts.n as f64;
    let groups = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        tie_groups(&s)
    };
    let (gx, gy) = (groups(x), groups(y));
    let sum = |g: &[u64], f: &dyn Fn(f64) -> f64| g.iter().map(|&t| f(t as f64)).sum::<f64>();
    let v0 = n * (n - 1.0) * (2.0 * n + 5.0);
    let vt = sum(&gx, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let vu = sum(&gy, &|t| t * (t - 1.0) * (2.0 * t + 5.0));
    let v1 = sum(&gx, &|t| t * (t - 1.0)) * sum(&gy, &|t| t * (t - 1.0)) / (2.0 * n * (n - 1.0));
    let v2 = if n > 2.0 {
        sum(&gx, &|t| t * (t - 1.0) * (t - 2.0)) * sum(&gy, &|t| t * (t - 1.0) * (t - 2.0))
            / (9.0 * n * (n - 1.0) * (n - 2.0))
    } else {
        0.0
    };
    let var = (v0 - vt - vu) / 18.0 + v1 + v2;
    let p_value = if var > 0.0 {
        (2.0 * std_normal_sf(counts.score.abs() as f64 / var.sqrt())).min(1.0)
    } else {
        1.0
    };
    Some(TauTest {
        tau,
        p_value,
        n: counts.n,
    })
}

/// Values of columns `a` and `b` on rows where both are observed.
pub fn common_pairs(m: &RatingMatrix, a: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
    (0..m.rows())
        .filter_map(|i| Some((m.get(i, a)?, m.get(i, b)?)))
        .unzip()
}

/// Result of a two-sided Mann-Whitney U test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UTest {
    /// `U` of the first group: pairs where it is larger, ties counting half.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of the pooled sample.
fn mid_ranks(pooled: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    idx.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k + 1;
        while e < idx.len() && pooled[idx[e]] == pooled[idx[k]] {
            e += 1;
        }
        let r = (k + 1 + e) as f64 / 2.0;
        for &p in &idx[k..e] {
            ranks[p] = r;
        }
        k = e;
    }
    ranks
}

/// Two-sided U test of `g1` against `g2`. Exact null distribution (with the
/// observed ties) when `g1.len() + g2.len() <= EXACT_U_LIMIT`, otherwise
/// the normal approximation with tie and continuity corrections. `None` if a
/// group is empty.
pub fn mann_whitney_u(g1: &[f64], g2: &[f64]) -> Option<UTest> {
    let (n1, n2) = (g1.len(), g2.len());
    if n1 == 0 || n2 == 0 {
        return None;
    }
    let pooled: Vec<f64> = g1.iter().chain(g2).copied().collect();
    let ranks = mid_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let total = n1 + n2;
    if total <= EXACT_U_LIMIT {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let observed: usize = doubled[..n1].iter().sum();
        return Some(UTest {
            u,
            p_value: exact_rank_sum_p(&doubled, n1, observed),
            exact: true,
        });
    }
    let (f1, f2, nt) = (n1 as f64, n2 as f64, total as f64);
    let mu = f1 * f2 / 2.0;
    let mut sorted = pooled;
    sorted.sort_by(f64::total_cmp);
    let tie_term: f64 = tie_groups(&sorted)
        .into_iter()
        .map(|t| (t as f64).powi(3) - t as f64)
        .sum();
    let var = f1 * f2 / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * std_normal_sf(z)).min(1.0)
    };
    Some(UTest {
        u,
        p_value,
        exact: false,
    })
}

/// Two-sided p-value of the rank sum of a size-`k` subset, over all
/// equally likely subsets of `scores`, via subset-sum counting.
fn exact_rank_sum_p(scores: &[usize], k: usize, observed: usize) -> f64 {
    let max_sum: usize = scores.iter().sum();
    // ways[c][s]: subsets of size c with score sum s
    let mut ways = vec![vec![0f64; max_sum + 1]; k + 1];
    ways[0][0] = 1.0;
    for &sc in scores {
        for c in (1..=k).rev() {
            for s in (sc..=max_sum).rev() {
                let add = ways[c - 1][s - sc];
                if add != 0.0 {
                    ways[c][s] += add;
                }
            }
        }
    }
    let n = scores.len();
    // doubled mean rank sum: k (n + 1)
    let mean2 = (k * (n + 1)) as i64;
    let dev = |s: usize| (s as i64 - mean2).abs();
    let obs_dev = dev(observed);
    let total: f64 = ways[k].iter().sum();
    let tail: f64 = ways[k]
        .iter()
        .enumerate()
        .filter(|&(s, _)| dev(s) >= obs_dev)
        .map(|(_, w)| w)
        .sum();
    (tail / total).min(1.0)
}

/// Which way the missing group leans when the U test is significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Subjects unrated by `j` get lower ratings from `l`.
    MissingWorse,
    /// Subjects unrated by `j` get higher ratings from `l`.
    MissingBetter,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MissingnessTest {
    pub p_value: f64,
    pub direction: Direction,
    pub exact: bool,
}

/// Compares column-`l` ratings of subjects missing from `j` against those of
/// subjects rated by `j`. `None` when either group is empty.
pub fn mann_whitney_missingness(m: &RatingMatrix, j: usize, l: usize) -> Option<MissingnessTest> {
    let (mut g1, mut g2) = (Vec::new(), Vec::new());
    for i in 0..m.rows() {
        if let Some(x) = m.get(i, l) {
            if m.is_observed(i, j) {
                g2.push(x);
            } else {
                g1.push(x);
            }
        }
    }
    let t = mann_whitney_u(&g1, &g2)?;
    let mu = (g1.len() * g2.len()) as f64 / 2.0;
    let direction = if t.p_value >= SIGNIFICANCE {
        Direction::None
    } else if t.u < mu {
        Direction::MissingWorse
    } else {
        Direction::MissingBetter
    };
    Some(MissingnessTest {
        p_value: t.p_value,
        direction,
        exact: t.exact,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Kendall,
    Uniform,
}

impl std::str::FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kendall" => Ok(Self::Kendall),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown weight mode {other:?}")),
        }
    }
}

/// Symmetric `n x n` pair weights `w_lj`. The diagonal is stored as 1 and
/// never read by the solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    n: usize,
    values: Vec<f64>,
    pub epsilon: f64,
    pub mode: WeightMode,
    /// Pairs whose tau-b was undefined and fell back to `epsilon`.
    pub undefined_pairs: Vec<(usize, usize)>,
}

impl WeightMatrix {
    pub fn uniform(n: usize) -> Self {
        Self {
            n,
            values: vec![1.0; n * n],
            epsilon: DEFAULT_EPSILON,
            mode: WeightMode::Uniform,
            undefined_pairs: Vec::new(),
        }
    }

    /// Builds from a full symmetric grid, truncating off-diagonal entries at
    /// `epsilon`.
    pub fn from_values(n: usize, values: Vec<f64>, epsilon: f64) -> Self {
        assert_eq!(values.len(), n * n);
        let mut w = Self {
            n,
            values,
            epsilon,
            mode: WeightMode::Kendall,
            undefined_pairs: Vec::new(),
        };
        for a in 0..n {
            w.values[a * n + a] = 1.0;
            for b in 0..n {
                if a != b {
                    w.values[a * n + b] = w.values[a * n + b].max(epsilon);
                }
            }
        }
        w
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, l: usize, j: usize) -> f64 {
        self.values[l * self.n + j]
    }

    /// `sum_{j != l} w_lj`.
    pub fn off_diagonal_row_sum(&self, l: usize) -> f64 {
        (0..self.n).filter(|&j| j != l).map(|j| self.get(l, j)).sum()
    }

    /// Multiplies every weight by `c` (for invariance checks).
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|w| *w *= c);
        out
    }

    pub fn grid(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.n.max(1)).map(<[_]>::to_vec).collect()
    }
}

/// `w_lj = max(tau_b(l, j), epsilon)` over common rows (kendall mode) or all
/// ones (uniform mode).
pub fn build_weights(m: &RatingMatrix, mode: WeightMode, epsilon: f64) -> WeightMatrix {
    let n = m.cols();
    match mode {
        WeightMode::Uniform => WeightMatrix {
            epsilon,
            ..WeightMatrix::uniform(n)
        },
        WeightMode::Kendall => {
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .collect();
            let taus: Vec<Option<f64>> = pairs
                .par_iter()
                .map(|&(a, b)| {
                    let (x, y) = common_pairs(m, a, b);
                    kendall_tau_b(&x, &y)
                })
                .collect();
            let mut values = vec![1.0; n * n];
            let mut undefined = Vec::new();
            for (&(a, b), tau) in pairs.iter().zip(taus) {
                let w = match tau {
                    Some(t) => t.max(epsilon),
                    None => {
                        log::warn!(
                            "tau-b undefined for columns {a} and {b}; using weight {epsilon}"
                        );
                        undefined.push((a, b));
                        epsilon
                    }
                };
                values[a * n + b] = w;
                values[b * n + a] = w;
            }
            WeightMatrix {
                n,
                values,
                epsilon,
                mode,
                undefined_pairs: undefined,
            }
        }
    }
}

/// All pairwise tau-b and U-test results; `None` cells are not available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTestReport {
    pub labels: Vec<String>,
    pub tau: Vec<Vec<Option<f64>>>,
    pub tau_p: Vec<Vec<Option<f64>>>,
    /// Row `j`, column `l`: U test of column `l` split by missingness in `j`.
    pub u_p: Vec<Vec<Option<f64>>>,
    pub u_direction: Vec<Vec<Direction>>,
    pub method: String,
}

impl PairTestReport {
    /// Report carrying only a tau-b grid (U-test cells unavailable).
    pub fn from_tau_matrix(labels: Vec<String>, tau: Vec<Vec<Option<f64>>>) -> Self {
        let n = labels.len();
        Self {
            labels,
            tau_p: vec![vec![None; n]; n],
            u_p: vec![vec![None; n]; n],
            u_direction: vec![vec![Direction::None; n]; n],
            tau,
            method: "tau-b only".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Mean of the defined off-diagonal tau-b cells.
    pub fn mean_off_diagonal_tau(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.len())
            .flat_map(|a| (0..self.len()).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .filter_map(|(a, b)| self.tau[a][b])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// CSV dump of one grid, `NA` for unavailable cells.
    pub fn grid_csv(&self, grid: &[Vec<Option<f64>>]) -> String {
        let mut out = String::from("rp");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (label, row) in self.labels.iter().zip(grid) {
            out.push_str(label);
            for cell in row {
                out.push(',');
                match cell {
                    Some(v) => out.push_str(&format!("{v:.4}")),
                    None => out.push_str("NA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn pair_report(m: &RatingMatrix) -> PairTestReport {
    let n = m.cols();
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    let results: Vec<(Option<TauTest>, Option<MissingnessTest>)> = cells
        .par_iter()
        .map(|&(a, b)| {
            let tau = if a < b {
                let (x, y) = common_pairs(m, a, b);
                kendall_tau_b_test(&x, &y)
            } else {
                None
            };
            (tau, mann_whitney_missingness(m, a, b))
        })
        .collect();
    let mut tau = vec![vec![None; n]; n];
    let mut tau_p = vec![vec![None; n]; n];
    let mut u_p = vec![vec![None; n]; n];
    let mut u_direction = vec![vec![Direction::None; n]; n];
    for (&(a, b), (t, u)) in cells.iter().zip(results) {
        if a == b {
            tau[a][a] = Some(1.0);
        } else if let Some(t) = t {
            tau[a][b] = Some(t.tau);
            tau[b][a] = Some(t.tau);
            tau_p[a][b] = Some(t.p_value);
            tau_p[b][a] = Some(t.p_value);
        }
        if let Some(u) = u {
            u_p[a][b] = Some(u.p_value);
            u_direction[a][b] = u.direction;
        }
    }
    PairTestReport {
        labels: m.col_labels().to_vec(),
        tau,
        tau_p,
        u_p,
        u_direction,
        method: format!(
            "tau-b with tie correction (normal approximation p-values); two-sided Mann-Whitney U \
             with tie correction, exact for n <= {EXACT_U_LIMIT}, normal approximation with \
             continuity correction otherwise"
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSelection {
    pub columns: Vec<usize>,
    pub warning: Option<String>,
}

/// `target` plus every column whose tau-b with it reaches `threshold`. When
/// nothing qualifies, falls back to the single best-correlated neighbour.
pub fn select_columns(
    report: &PairTestReport,
    target: usize,
    threshold: f64,
) -> crate::Result<ColumnSelection> {
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(crate::Error::InvalidParameter(format!(
            "threshold {threshold} outside [-1, 1]"
        )));
    }
    if target >= report.len() {
        return Err(crate::Error::InvalidParameter(format!(
            "target column {target} out of range"
        )));
    }
    let row = &report.tau[target];
    let mut columns: Vec<usize> = (0..report.len())
        .filter(|&j| j == target || threshold <= -1.0 || row[j].is_some_and(|t| t >= threshold))
        .collect();
    let mut warning = None;
    if columns.len() == 1 {
        let best = (0..report.len())
            .filter(|&j| j != target)
            .filter_map(|j| row[j].map(|t| (j, t)))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let msg = match best {
            Some((j, t)) => {
                columns.push(j);
                columns.sort_unstable();
                format!(
                    "no column reaches tau-b {threshold} with {}; keeping best neighbour {} (tau-b {t:.4})",
                    report.labels[target], report.labels[j]
                )
            }
            None => format!("no column has a defined tau-b with {}", report.labels[target]),
        };
        log::warn!("{msg}");
        warning = Some(msg);
    }
    Ok(ColumnSelection { columns, warning })
}
