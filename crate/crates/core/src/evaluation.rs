//! Benchmarking: k-fold deletion instances, error metrics, Kendall
//! correlation deltas, baseline imputers and an experiment runner.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{build_weights, common_pairs, kendall_tau_b, WeightMode, DEFAULT_EPSILON};
use crate::data::{column_scales, load_csv, CsvOptions, RatingMatrix};
use crate::dqp::{impute_dqp_svas, impute_dqp_svas_levels};
use crate::error::{Error, Result};
use crate::estimatability::rp_graph;
use crate::qp::{fill_matrix, impute_qp_as, ImputationResult, QpOptions, DEFAULT_MAX_UNKNOWNS};
use crate::synthetic::{generate, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    QpAs,
    DqpSvas,
    #[serde(alias = "mean")]
    ColumnMean,
    #[serde(alias = "mode")]
    ColumnMode,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::QpAs => "qp-as",
            Algorithm::DqpSvas => "dqp-svas",
            Algorithm::ColumnMean => "column-mean",
            Algorithm::ColumnMode => "column-mode",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "qp-as" => Ok(Self::QpAs),
            "dqp-svas" => Ok(Self::DqpSvas),
            "mean" | "column-mean" => Ok(Self::ColumnMean),
            "mode" | "column-mode" => Ok(Self::ColumnMode),
            other => Err(format!("unknown algorithm {other:?}")),
        }
    }
}

/// Settings shared by every imputer call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputeOptions {
    pub weights: WeightMode,
    pub epsilon: f64,
    pub dedupe: bool,
    /// Let dQP-SVAS impute estimatable but non-level-1 data level by level.
    pub fallback: bool,
    pub max_unknowns: usize,
    pub integer_mode: bool,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            weights: WeightMode::Kendall,
            epsilon: DEFAULT_EPSILON,
            dedupe: false,
            fallback: false,
            max_unknowns: DEFAULT_MAX_UNKNOWNS,
            integer_mode: true,
        }
    }
}

/// Runs one imputer, building the weight matrix from `m` when needed.
pub fn impute(algorithm: Algorithm, m: &RatingMatrix, opts: &ImputeOptions) -> Result<ImputationResult> {
    let start = Instant::now();
    let mut result = match algorithm {
        Algorithm::QpAs => {
            let w = build_weights(m, opts.weights, opts.epsilon);
            let qp = QpOptions {
                dedupe: opts.dedupe,
                integer_mode: opts.integer_mode,
                max_unknowns: opts.max_unknowns,
            };
            impute_qp_as(m, &w, &qp)?
        }
        Algorithm::DqpSvas => {
            let w = build_weights(m, opts.weights, opts.epsilon);
            match impute_dqp_svas(m, &w, opts.integer_mode) {
                Err(Error::NotLevel1 { .. }) if opts.fallback => {
                    log::warn!("data is not level-1; imputing level by level");
                    impute_dqp_svas_levels(m, &w, opts.integer_mode)?
                }
                other => other?,
            }
        }
        Algorithm::ColumnMean => impute_baseline(m, BaselineMethod::Mean, opts.integer_mode)?,
        Algorithm::ColumnMode => impute_baseline(m, BaselineMethod::Mode, opts.integer_mode)?,
    };
    result.wall_time = start.elapsed().as_secs_f64();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Mean,
    /// Most frequent value; ties go to the smaller value.
    Mode,
}

pub fn impute_baseline(m: &RatingMatrix, method: BaselineMethod, integer_mode: bool) -> Result<ImputationResult> {
    let start = Instant::now();
    let scale = column_scales(m)?;
    let fills: Vec<f64> = (0..m.cols())
        .map(|j| {
            let mut vals: Vec<f64> = m.column_observed(j).map(|(_, x)| x).collect();
            match method {
                BaselineMethod::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                BaselineMethod::Mode => {
                    vals.sort_by(f64::total_cmp);
                    let mut best = (vals[0], 0);
                    for run in vals.chunk_by(|a, b| a == b) {
                        if run.len() > best.1 {
                            best = (run[0], run.len());
                        }
                    }
                    best.0
                }
            }
        })
        .collect();
    let continuous: Vec<(usize, usize, f64)> = m
        .missing_index()
        .entries()
        .iter()
        .map(|&(i, j)| (i, j, fills[j]))
        .collect();
    let rounded = fill_matrix(m, &scale, &continuous, integer_mode && m.integer_mode());
    Ok(ImputationResult {
        algorithm: match method {
            BaselineMethod::Mean => "column-mean",
            BaselineMethod::Mode => "column-mode",
        }
        .into(),
        continuous,
        rounded,
        objective_value: None,
        residual_norm: None,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// One cross-validation instance: the source with one group of observed
/// cells removed.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldInstance {
    pub fold_id: usize,
    pub observed: RatingMatrix,
    /// `(row, col, true value)` of every removed cell.
    pub deleted: Vec<(usize, usize, f64)>,
    /// Cells of this fold's group that were kept to preserve usability.
    pub protected: Vec<(usize, usize)>,
}

/// Partitions the observed cells into `k` random groups; fold `g` deletes
/// group `g`. Deletions that would empty a row or column, or split the
/// rating-provider graph, are put back.
pub fn make_folds<R: Rng + ?Sized>(m: &RatingMatrix, k: usize, rng: &mut R) -> Result<Vec<FoldInstance>> {
    if k == 0 {
        return Err(Error::InvalidParameter("fold count must be at least 1".into()));
    }
    if m.observed_count() < k {
        return Err(Error::Fold(format!(
            "{} observed cells cannot fill {k} folds",
            m.observed_count()
        )));
    }
    if !m.empty_rows().is_empty() {
        return Err(Error::Contract("every row needs an observed cell".into()));
    }
    if !rp_graph(m).is_connected() {
        return Err(Error::NotEstimatable {
            components: rp_graph(m).components(),
        });
    }
    if k == 1 {
        log::warn!("a single fold deletes every cell it can; the instance will be near degenerate");
    }
    let mut cells: Vec<(usize, usize)> = (0..m.rows())
        .flat_map(|i| (0..m.cols()).map(move |j| (i, j)))
        .filter(|&(i, j)| m.is_observed(i, j))
        .collect();
    cells.shuffle(rng);
    (0..k)
        .map(|g| {
            let group: Vec<(usize, usize)> = cells.iter().skip(g).step_by(k).copied().collect();
            let mut observed = m.clone();
            for &(i, j) in &group {
                observed.set(i, j, None);
            }
            let protected = restore_needed(m, &mut observed, &group)?;
            let deleted = group
                .iter()
                .filter(|c| !protected.contains(c))
                .map(|&(i, j)| (i, j, m.get(i, j).expect("group cells are observed")))
                .collect();
            Ok(FoldInstance {
                fold_id: g,
                observed,
                deleted,
                protected,
            })
        })
        .collect()
}

/// Restores removed cells until every row and column has an observation
/// and the rating-provider graph is connected.
fn restore_needed(
    source: &RatingMatrix,
    mat: &mut RatingMatrix,
    removed: &[(usize, usize)],
) -> Result<Vec<(usize, usize)>> {
    let mut restored = Vec::new();
    let mut put_back = |mat: &mut RatingMatrix, cell: (usize, usize)| {
        mat.set(cell.0, cell.1, source.get(cell.0, cell.1));
        restored.push(cell);
    };
    for i in 0..mat.rows() {
        if mat.row(i).iter().all(Option::is_none) {
            let cell = *removed.iter().find(|c| c.0 == i).expect("row was observed in the source");
            put_back(mat, cell);
        }
    }
    for j in 0..mat.cols() {
        if mat.column_observed(j).next().is_none() {
            let cell = *removed.iter().find(|c| c.1 == j).expect("column was observed in the source");
            put_back(mat, cell);
        }
    }
    loop {
        let components = rp_graph(mat).components();
        if components.len() <= 1 {
            break;
        }
        let mut comp_of = vec![0; mat.cols()];
        for (c, members) in components.iter().enumerate() {
            for &j in members {
                comp_of[j] = c;
            }
        }
        let bridge = removed.iter().copied().find(|&(i, j)| {
            !mat.is_observed(i, j)
                && (0..mat.cols()).any(|jj| mat.is_observed(i, jj) && comp_of[jj] != comp_of[j])
        });
        match bridge {
            Some(cell) => put_back(mat, cell),
            None => {
                return Err(Error::Fold(format!(
                    "cannot reconnect {} provider groups",
                    components.len()
                )))
            }
        }
    }
    restored.sort_unstable();
    Ok(restored)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub rmse: f64,
    pub mad: f64,
}

/// Accuracy, RMSE and MAD of `imputed` over the deleted cells.
pub fn score(imputed: &RatingMatrix, deleted: &[(usize, usize, f64)]) -> Result<Scores> {
    if deleted.is_empty() {
        return Err(Error::Contract("no deleted cells to score".into()));
    }
    let (mut hits, mut sq, mut abs) = (0usize, 0.0, 0.0);
    for &(i, j, truth) in deleted {
        let x = imputed
            .get(i, j)
            .ok_or_else(|| Error::Contract(format!("cell ({i}, {j}) was not imputed")))?;
        if x == truth {
            hits += 1;
        }
        sq += (x - truth) * (x - truth);
        abs += (x - truth).abs();
    }
    let n = deleted.len() as f64;
    Ok(Scores {
        accuracy: hits as f64 / n,
        rmse: (sq / n).sqrt(),
        mad: abs / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallDelta {
    pub rmse_tau: f64,
    pub mad_tau: f64,
    /// Mean signed change; positive when imputation raised the correlations.
    pub avgd_tau: f64,
    pub compared_pairs: usize,
    pub skipped_pairs: usize,
}

/// Change of every pairwise tau-B between `original` (pairwise-complete
/// rows) and `imputed`.
pub fn kendall_delta(original: &RatingMatrix, imputed: &RatingMatrix) -> Result<KendallDelta> {
    if (original.rows(), original.cols()) != (imputed.rows(), imputed.cols()) {
        return Err(Error::Dimension(format!(
            "original is {}x{}, imputed is {}x{}",
            original.rows(),
            original.cols(),
            imputed.rows(),
            imputed.cols()
        )));
    }
    let n = original.cols();
    let deltas: Vec<Option<f64>> = (0..n)
        .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
        .map(|(a, b)| {
            let (x, y) = common_pairs(original, a, b);
            let before = kendall_tau_b(&x, &y)?;
            let (x, y) = common_pairs(imputed, a, b);
            let after = kendall_tau_b(&x, &y)?;
            Some(after - before)
        })
        .collect();
    let used: Vec<f64> = deltas.iter().flatten().copied().collect();
    let skipped = deltas.len() - used.len();
    if skipped > 0 {
        log::warn!("{skipped} provider pairs have an undefined tau and were skipped");
    }
    let k = used.len().max(1) as f64;
    Ok(KendallDelta {
        rmse_tau: (used.iter().map(|d| d * d).sum::<f64>() / k).sqrt(),
        mad_tau: used.iter().map(|d| d.abs()).sum::<f64>() / k,
        avgd_tau: used.iter().sum::<f64>() / k,
        compared_pairs: used.len(),
        skipped_pairs: skipped,
    })
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// k-fold deletion instances of a CSV data set.
    Csv { path: PathBuf },
    /// Every combination of the listed parameters, one instance per seed,
    /// scored against the generating truth.
    Synthetic {
        m: Vec<usize>,
        n: Vec<usize>,
        s: Vec<f64>,
        r: Vec<f64>,
    },
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_k() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub options: ImputeOptions,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms listed".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds listed".into()));
        }
        if let DataSource::Synthetic { m, n, s, r } = &self.source {
            if m.is_empty() || n.is_empty() || s.is_empty() || r.is_empty() {
                return Err(Error::Config("every synthetic parameter needs at least one value".into()));
            }
        }
        Ok(())
    }
}

/// Metrics of one (algorithm, instance) run. Fields are `None` when they do
/// not apply or the run failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub group: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub fold: Option<usize>,
    pub time: Option<f64>,
    pub scores: Option<Scores>,
    pub kendall: Option<KendallDelta>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub group: String,
    pub algorithm: Algorithm,
    pub runs: usize,
    pub failures: usize,
    pub time: Option<f64>,
    pub accuracy: Option<f64>,
    pub rmse: Option<f64>,
    pub mad: Option<f64>,
    pub rmse_tau: Option<f64>,
    pub mad_tau: Option<f64>,
    pub avgd_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub cells: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.4}"))
}

impl EvalReport {
    fn from_cells(cells: Vec<CellResult>) -> Self {
        let mut groups: Vec<(String, Algorithm)> = Vec::new();
        for c in &cells {
            let key = (c.group.clone(), c.algorithm);
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        let aggregate = groups
            .into_iter()
            .map(|(group, algorithm)| {
                let mine: Vec<&CellResult> =
                    cells.iter().filter(|c| c.group == group && c.algorithm == algorithm).collect();
                let mean = |f: &dyn Fn(&CellResult) -> Option<f64>| {
                    let v: Vec<f64> = mine.iter().filter_map(|c| f(c)).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                };
                AggregateRow {
                    runs: mine.len(),
                    failures: mine.iter().filter(|c| c.error.is_some()).count(),
                    time: mean(&|c| c.time),
                    accuracy: mean(&|c| c.scores.map(|s| s.accuracy)),
                    rmse: mean(&|c| c.scores.map(|s| s.rmse)),
                    mad: mean(&|c| c.scores.map(|s| s.mad)),
                    rmse_tau: mean(&|c| c.kendall.map(|k| k.rmse_tau)),
                    mad_tau: mean(&|c| c.kendall.map(|k| k.mad_tau)),
                    avgd_tau: mean(&|c| c.kendall.map(|k| k.avgd_tau)),
                    group,
                    algorithm,
                }
            })
            .collect();
        Self { cells, aggregate }
    }

    pub fn row(&self, group: &str, algorithm: Algorithm) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.group == group && r.algorithm == algorithm)
    }

    pub fn cells_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut write = |rec: Vec<String>| {
            w.write_record(rec)
                .map_err(|e| Error::Contract(format!("csv write failed: {e}")))
        };
        write(
            [
                "group", "algorithm", "seed", "fold", "time", "accuracy", "rmse", "mad", "rmse_tau", "mad_tau",
                "avgd_tau", "error",
            ]
            .map(String::from)
            .to_vec(),
        )?;
        for c in &self.cells {
            write(vec![
                c.group.clone(),
                c.algorithm.to_string(),
                c.seed.to_string(),
                c.fold.map_or_else(|| "NA".into(), |f| f.to_string()),
                fmt_opt(c.time),
                fmt_opt(c.scores.map(|s| s.accuracy)),
                fmt_opt(c.scores.map(|s| s.rmse)),
                fmt_opt(c.scores.map(|s| s.mad)),
                fmt_opt(c.kendall.map(|k| k.rmse_tau)),
                fmt_opt(c.kendall.map(|k| k.mad_tau)),
                fmt_opt(c.kendall.map(|k| k.avgd_tau)),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        into_string(w)
    }

    pub fn aggregate_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut write = |rec: Vec<String>| {
            w.write_record(rec)
                .map_err(|e| Error::Contract(format!("csv write failed: {e}")))
        };
        write(
            [
                "group", "algorithm", "runs", "failures", "time", "accuracy", "rmse", "mad", "rmse_tau", "mad_tau",
                "avgd_tau",
            ]
            .map(String::from)
            .to_vec(),
        )?;
        for r in &self.aggregate {
            write(vec![
                r.group.clone(),
                r.algorithm.to_string(),
                r.runs.to_string(),
                r.failures.to_string(),
                fmt_opt(r.time),
                fmt_opt(r.accuracy),
                fmt_opt(r.rmse),
                fmt_opt(r.mad),
                fmt_opt(r.rmse_tau),
                fmt_opt(r.mad_tau),
                fmt_opt(r.avgd_tau),
            ])?;
        }
        into_string(w)
    }

    /// Fixed-width table of the aggregate rows.
    pub fn table(&self) -> String {
        let header = [
            "group", "algorithm", "time", "accuracy", "rmse", "mad", "rmse_tau", "mad_tau", "avgd_tau",
        ];
        let rows: Vec<Vec<String>> = self
            .aggregate
            .iter()
            .map(|r| {
                vec![
                    r.group.clone(),
                    r.algorithm.to_string(),
                    fmt_opt(r.time),
                    fmt_opt(r.accuracy),
                    fmt_opt(r.rmse),
                    fmt_opt(r.mad),
                    fmt_opt(r.rmse_tau),
                    fmt_opt(r.mad_tau),
                    fmt_opt(r.avgd_tau),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: Vec<String>| {
            cells
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(header.map(String::from).to_vec());
        out.push('\n');
        for r in rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv flush failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// What each run imputes and how it is scored.
struct Task {
    group: String,
    seed: u64,
    fold: Option<usize>,
    input: RatingMatrix,
    /// Cells scored for accuracy, RMSE and MAD.
    truth: Option<Vec<(usize, usize, f64)>>,
    /// Compute tau deltas against `input`.
    kendall: bool,
}

fn run_task(task: &Task, algorithm: Algorithm, opts: &ImputeOptions) -> CellResult {
    let mut cell = CellResult {
        group: task.group.clone(),
        algorithm,
        seed: task.seed,
        fold: task.fold,
        time: None,
        scores: None,
        kendall: None,
        error: None,
    };
    let outcome = impute(algorithm, &task.input, opts).and_then(|r| {
        let scores = task.truth.as_ref().map(|t| score(&r.rounded, t)).transpose()?;
        let kendall = if task.kendall {
            Some(kendall_delta(&task.input, &r.rounded)?)
        } else {
            None
        };
        Ok((r.wall_time, scores, kendall))
    });
    match outcome {
        Ok((time, scores, kendall)) => {
            cell.time = Some(time);
            cell.scores = scores;
            cell.kendall = kendall;
        }
        Err(e) => {
            log::warn!("{algorithm} on {} seed {} failed: {e}", task.group, task.seed);
            cell.error = Some(e.to_string());
        }
    }
    cell
}

fn synthetic_label(spec: &SynthSpec) -> String {
    format!("m={} n={} s={} r={}", spec.m, spec.n, spec.s, spec.r)
}

fn build_tasks(config: &ExperimentConfig) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    match &config.source {
        DataSource::Csv { path } => {
            let loaded = load_csv(path, &CsvOptions::default())?;
            let group = path
                .file_stem()
                .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
            // correlation changes are measured once on the full data
            tasks.push(Task {
                group: group.clone(),
                seed: config.seeds[0],
                fold: None,
                input: loaded.matrix.clone(),
                truth: None,
                kendall: true,
            });
            for &seed in &config.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for fold in make_folds(&loaded.matrix, config.k, &mut rng)? {
                    tasks.push(Task {
                        group: group.clone(),
                        seed,
                        fold: Some(fold.fold_id),
                        input: fold.observed,
                        truth: Some(fold.deleted),
                        kendall: false,
                    });
                }
            }
        }
        DataSource::Synthetic { m, n, s, r } => {
            let mut specs = Vec::new();
            for &m in m {
                for &n in n {
                    for &s in s {
                        for &r in r {
                            for &seed in &config.seeds {
                                specs.push(SynthSpec::new(m, n, s, r, seed));
                            }
                        }
                    }
                }
            }
            let instances: Vec<Result<Task>> = specs
                .par_iter()
                .map(|spec| {
                    let inst = generate(spec)?;
                    let truth = inst
                        .observed
                        .missing_index()
                        .entries()
                        .iter()
                        .map(|&(i, j)| (i, j, inst.truth.get(i, j).expect("truth is complete")))
                        .collect();
                    Ok(Task {
                        group: synthetic_label(spec),
                        seed: spec.seed,
                        fold: None,
                        input: inst.observed,
                        truth: Some(truth),
                        kendall: true,
                    })
                })
                .collect();
            for t in instances {
                tasks.push(t?);
            }
        }
    }
    Ok(tasks)
}

/// Runs every algorithm on every instance the config describes. Failures of
/// single runs are recorded and reported as NA.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let tasks = build_tasks(config)?;
    let jobs: Vec<(&Task, Algorithm)> = tasks
        .iter()
        .flat_map(|t| config.algorithms.iter().map(move |&a| (t, a)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(t, a)| run_task(t, a, &config.options))
        .collect();
    Ok(EvalReport::from_cells(cells))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense() -> RatingMatrix {
        RatingMatrix::parse_grid(
            "1 2 1; 2 2 3; 3 3 3; 4 5 4; 5 4 5; 2 1 2; 3 4 3; 4 4 5; 1 1 2; 5 5 5",
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        let imputed = RatingMatrix::parse_grid("2 2").unwrap();
        let s = score(&imputed, &[(0, 0, 1.0), (0, 1, 3.0)]).unwrap();
        assert_eq!((s.accuracy, s.rmse, s.mad), (0.0, 1.0, 1.0));
        let imputed = RatingMatrix::parse_grid("1 3").unwrap();
        let s = score(&imputed, &[(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        assert_eq!(s.accuracy, 0.5);
        assert!((s.rmse - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.mad, 1.0);
        let perfect = score(&imputed, &[(0, 0, 1.0), (0, 1, 3.0)]).unwrap();
        assert_eq!((perfect.accuracy, perfect.rmse, perfect.mad), (1.0, 0.0, 0.0));
        let holes = RatingMatrix::parse_grid("1 .").unwrap();
        assert!(matches!(score(&holes, &[(0, 1, 2.0)]), Err(Error::Contract(_))));
    }

    #[test]
    fn baselines_by_hand() {
        let m = RatingMatrix::parse_grid("1 1; 1 2; 5 2; . 1; 2 1").unwrap();
        let mean = impute_baseline(&m, BaselineMethod::Mean, true).unwrap();
        // column 0 mean 9/4 rounds to 2
        assert_eq!(mean.rounded.get(3, 0), Some(2.0));
        let mode = impute_baseline(&m, BaselineMethod::Mode, true).unwrap();
        assert_eq!(mode.rounded.get(3, 0), Some(1.0));
        let m = RatingMatrix::parse_grid("1 1; 1 2; 5 3; . 4").unwrap();
        assert_eq!(impute_baseline(&m, BaselineMethod::Mean, true).unwrap().rounded.get(3, 0), Some(2.0));
        let tie = RatingMatrix::parse_grid("2 1; 1 1; 2 1; 1 1; . 1").unwrap();
        assert_eq!(impute_baseline(&tie, BaselineMethod::Mode, true).unwrap().rounded.get(4, 0), Some(1.0));
        let constant = RatingMatrix::parse_grid("3 1; 3 2; . 3").unwrap();
        assert_eq!(impute_baseline(&constant, BaselineMethod::Mean, true).unwrap().rounded.get(2, 0), Some(3.0));
    }

    #[test]
    fn folds_partition_observed_cells() {
        let m = dense();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let folds = make_folds(&m, 10, &mut rng).unwrap();
        assert_eq!(folds.len(), 10);
        let mut all: Vec<(usize, usize)> = folds
            .iter()
            .flat_map(|f| f.deleted.iter().map(|&(i, j, _)| (i, j)).chain(f.protected.iter().copied()))
            .collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        assert_eq!(before, all.len());
        assert_eq!(all.len(), m.observed_count());
        for f in &folds {
            assert_eq!(f.deleted.len() + f.protected.len(), 3);
            for &(i, j, v) in &f.deleted {
                assert!(!f.observed.is_observed(i, j));
                assert_eq!(m.get(i, j), Some(v));
            }
            assert!(f.observed.empty_rows().is_empty());
            assert!(rp_graph(&f.observed).is_connected());
        }
    }

    #[test]
    fn folds_are_seeded() {
        let m = dense();
        let a = make_folds(&m, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = make_folds(&m, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_fold_keeps_instance_usable() {
        let m = RatingMatrix::parse_grid("1 2 .; 2 . 3; . 3 1; 4 4 4").unwrap();
        let folds = make_folds(&m, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let f = &folds[0];
        assert!(f.observed.empty_rows().is_empty());
        assert!(rp_graph(&f.observed).is_connected());
        assert!(!f.protected.is_empty() && !f.deleted.is_empty());
        assert_eq!(f.deleted.len() + f.protected.len(), m.observed_count());
    }

    #[test]
    fn fold_errors() {
        let m = dense();
        assert!(make_folds(&m, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(make_folds(&m, 31, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let split = RatingMatrix::parse_grid("1 .; 2 .; . 1; . 2").unwrap();
        assert!(matches!(
            make_folds(&split, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::NotEstimatable { .. })
        ));
    }

    #[test]
    fn kendall_delta_zero_when_orders_kept() {
        let original = RatingMatrix::parse_grid("1 1 2; 2 2 3; 3 3 .; 4 . 5").unwrap();
        let imputed = RatingMatrix::parse_grid("1 1 2; 2 2 3; 3 3 4; 4 4 5").unwrap();
        let d = kendall_delta(&original, &imputed).unwrap();
        assert_eq!((d.rmse_tau, d.mad_tau, d.avgd_tau), (0.0, 0.0, 0.0));
        assert_eq!(d.compared_pairs, 3);
    }

    #[test]
    fn kendall_delta_by_hand() {
        // tau(a, b) = -1/3 on the three common rows, 1/3 once the fourth is filled
        let original = RatingMatrix::parse_grid("1 2; 2 3; 3 1; 4 .").unwrap();
        let imputed = RatingMatrix::parse_grid("1 2; 2 3; 3 1; 4 4").unwrap();
        let d = kendall_delta(&original, &imputed).unwrap();
        assert!((d.avgd_tau - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.mad_tau - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_algorithm_list_rejected() {
        let config = ExperimentConfig {
            source: DataSource::Synthetic {
                m: vec![40],
                n: vec![3],
                s: vec![0.5],
                r: vec![0.2],
            },
            algorithms: vec![],
            seeds: vec![0],
            k: 10,
            options: ImputeOptions::default(),
        };
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_experiment_runs() {
        let config = ExperimentConfig {
            source: DataSource::Synthetic {
                m: vec![60],
                n: vec![4],
                s: vec![0.5],
                r: vec![0.2],
            },
            algorithms: vec![Algorithm::DqpSvas, Algorithm::ColumnMean, Algorithm::QpAs],
            seeds: vec![1, 2],
            k: 10,
            options: ImputeOptions {
                fallback: true,
                ..ImputeOptions::default()
            },
        };
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.cells.len(), 6);
        assert_eq!(report.aggregate.len(), 3);
        let row = report.row("m=60 n=4 s=0.5 r=0.2", Algorithm::DqpSvas).unwrap();
        let acc = row.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(row.mad_tau.unwrap() >= row.avgd_tau.unwrap().abs());
        let untimed = |r: EvalReport| r.cells.into_iter().map(|c| (c.scores, c.kendall)).collect::<Vec<_>>();
        assert_eq!(untimed(report.clone()), untimed(run_experiment(&config).unwrap()));
        let csv = report.aggregate_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(report.table().contains("dqp-svas"));
    }

    #[test]
    fn failed_runs_are_na() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "id,a,b,c\n1,1,2,1\n2,2,2,3\n3,3,3,3\n4,4,5,4\n5,5,4,5\n6,2,1,2\n").unwrap();
        let config = ExperimentConfig {
            source: DataSource::Csv { path },
            algorithms: vec![Algorithm::QpAs],
            seeds: vec![0],
            k: 3,
            options: ImputeOptions {
                max_unknowns: 0,
                ..ImputeOptions::default()
            },
        };
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.cells.len(), 4);
        assert!(report.cells.iter().filter(|c| c.fold.is_some()).all(|c| c.error.is_some()));
        assert_eq!(report.aggregate[0].accuracy, None);
        assert!(report.aggregate_csv().unwrap().contains("NA"));
    }
}
