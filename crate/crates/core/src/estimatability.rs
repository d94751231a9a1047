//! When is imputation well defined?
//!
//! An observed cell has level 0. A missing cell `(i, j)` is level-`v`
//! estimatable when it has no lower level and some other cell `(i', j')`
//! (`i' != i`, `j' != j`) makes all three corners `(i', j)`, `(i, j')`,
//! `(i', j')` of the 2x2 submatrix known at a level below `v`. A data set is
//! estimatable when every cell gets a level, which happens exactly when the
//! rating-provider graph (providers joined when they share a rated subject)
//! is connected.

use std::collections::VecDeque;

use serde::Serialize;

use crate::data::RatingMatrix;

/// Undirected graph over columns; `j -- j'` when some row observes both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RpGraph {
    adjacency: Vec<Vec<usize>>,
}

impl RpGraph {
    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.adjacency[j]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Connected components by breadth-first search, each sorted, ordered by
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.adjacency.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut comp = Vec::new();
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for &v in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}

pub fn rp_graph(m: &RatingMatrix) -> RpGraph {
    let n = m.cols();
    let mut linked = vec![false; n * n];
    let mut obs = Vec::with_capacity(n);
    for i in 0..m.rows() {
        obs.clear();
        obs.extend((0..n).filter(|&j| m.is_observed(i, j)));
        for (a, &ja) in obs.iter().enumerate() {
            for &jb in &obs[a + 1..] {
                linked[ja * n + jb] = true;
                linked[jb * n + ja] = true;
            }
        }
    }
    let adjacency = (0..n)
        .map(|a| (0..n).filter(|&b| linked[a * n + b]).collect())
        .collect();
    RpGraph { adjacency }
}

/// Estimatability verdict plus the graph components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Connectivity {
    pub is_estimatable: bool,
    pub components: Vec<Vec<usize>>,
}

pub fn is_estimatable(m: &RatingMatrix) -> Connectivity {
    let components = rp_graph(m).components();
    Connectivity {
        is_estimatable: components.len() <= 1,
        components,
    }
}

/// First column whose neighbourhood fails to cover every subject, and the
/// uncovered subjects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Level1Violation {
    pub column: usize,
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Level1Check {
    pub is_level1: bool,
    pub violation: Option<Level1Violation>,
}

/// Level-1 test: for every column `j'`, the subjects rated by some provider
/// in `N(j')` (providers sharing a subject with `j'`, plus `j'`) must be all
/// subjects.
pub fn is_level1(m: &RatingMatrix) -> Level1Check {
    let graph = rp_graph(m);
    for col in 0..m.cols() {
        let subjects: Vec<usize> = (0..m.rows())
            .filter(|&i| {
                !m.is_observed(i, col) && !graph.neighbors(col).iter().any(|&j| m.is_observed(i, j))
            })
            .collect();
        if !subjects.is_empty() {
            return Level1Check {
                is_level1: false,
                violation: Some(Level1Violation {
                    column: col,
                    subjects,
                }),
            };
        }
    }
    Level1Check {
        is_level1: true,
        violation: None,
    }
}

/// Per-entry levels and data-set verdicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatabilityReport {
    rows: usize,
    cols: usize,
    /// Row-major; `Some(0)` observed, `Some(v)` level-`v`, `None` not estimatable.
    pub entry_level: Vec<Option<u32>>,
    pub dataset_level: Option<u32>,
    pub components: Vec<Vec<usize>>,
    pub is_estimatable: bool,
    pub is_level1: bool,
}

impl EstimatabilityReport {
    pub fn level(&self, i: usize, j: usize) -> Option<u32> {
        self.entry_level[i * self.cols + j]
    }

    /// Number of cells at exactly level `v`.
    pub fn count_at_level(&self, v: u32) -> usize {
        self.entry_level.iter().filter(|&&l| l == Some(v)).count()
    }

    pub fn unestimatable_count(&self) -> usize {
        self.entry_level.iter().filter(|l| l.is_none()).count()
    }

    pub fn levels_grid(&self) -> Vec<Vec<Option<u32>>> {
        self.entry_level
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(<[_]>::to_vec)
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rows": self.rows,
            "cols": self.cols,
            "levels": self.levels_grid(),
            "dataset_level": self.dataset_level,
            "components": self.components,
            "is_estimatable": self.is_estimatable,
            "is_level1": self.is_level1,
        })
    }
}

struct BitRows {
    words: usize,
    bits: Vec<u64>,
}

impl BitRows {
    fn new(rows: usize, cols: usize) -> Self {
        let words = cols.div_ceil(64).max(1);
        Self {
            words,
            bits: vec![0; rows * words],
        }
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn rows_intersect(&self, a: usize, b: usize) -> bool {
        self.row(a).iter().zip(self.row(b)).any(|(x, y)| x & y != 0)
    }
}

/// Computes `E_1, E_2, ...` round by round, stopping at the first empty
/// round. Each round tests candidates against the cells known before the
/// round began, so every cell receives its minimal level.
pub fn closure_levels(m: &RatingMatrix) -> EstimatabilityReport {
    let (rows, cols) = (m.rows(), m.cols());
    let mut level: Vec<Option<u32>> = m.cells().iter().map(|c| c.map(|_| 0)).collect();
    let mut known = BitRows::new(rows, cols);
    // per column: rows whose cell is known
    let mut col_rows: Vec<Vec<usize>> = vec![Vec::new(); cols];
    for i in 0..rows {
        for j in 0..cols {
            if m.is_observed(i, j) {
                known.set(i, j);
                col_rows[j].push(i);
            }
        }
    }
    let mut pending: Vec<(usize, usize)> = m.missing_index().entries().to_vec();
    let mut v = 0;
    loop {
        v += 1;
        let (fresh, rest): (Vec<_>, Vec<_>) = pending.into_iter().partition(|&(i, j)| {
            col_rows[j]
                .iter()
                .any(|&other| known.rows_intersect(i, other))
        });
        if fresh.is_empty() {
            pending = rest;
            break;
        }
        for &(i, j) in &fresh {
            level[i * cols + j] = Some(v);
            known.set(i, j);
            col_rows[j].push(i);
        }
        pending = rest;
    }
    let components = rp_graph(m).components();
    let all_covered = pending.is_empty();
    let max_level = level.iter().flatten().copied().max();
    EstimatabilityReport {
        rows,
        cols,
        dataset_level: if all_covered { max_level } else { None },
        is_estimatable: all_covered,
        is_level1: all_covered && max_level.unwrap_or(0) <= 1,
        entry_level: level,
        components,
    }
}
