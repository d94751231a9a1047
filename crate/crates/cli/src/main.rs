//! `ordimpute`: analyze, impute, generate and evaluate ordinal rating matrices.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ordinal_impute::consensus::{build_weights, pair_report, select_columns, WeightMode, DEFAULT_EPSILON};
use ordinal_impute::data::{load_csv, save_csv, summarize, CsvOptions, RatingMatrix};
use ordinal_impute::estimatability::{closure_levels, rp_graph};
use ordinal_impute::evaluation::{impute, run_experiment, Algorithm, DataSource, ExperimentConfig, ImputeOptions};
use ordinal_impute::multi::{impute_mi, Aggregation, MiOptions};
use ordinal_impute::qp::{ImputationResult, DEFAULT_MAX_UNKNOWNS};
use ordinal_impute::synthetic::{connectivity_probability, edge_probability, generate, EdgeSampling, SynthSpec};
use ordinal_impute::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "ordimpute", version, about = "Imputation of ordinal rating matrices")]
struct Cli {
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true, env = "ORDIMPUTE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Summary, pairwise tau-b and U tests, estimatability report.
    Analyze(AnalyzeArgs),
    /// Fill the missing entries of a CSV.
    Impute(ImputeArgs),
    /// Generate a synthetic instance.
    Synth(SynthArgs),
    /// Run an evaluation experiment.
    Eval(EvalArgs),
    /// Keep a target column and the columns that agree with it.
    SelectColumns(SelectArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Input CSV: first column row labels, header row column labels.
    input: PathBuf,
    /// Accept non-integer ratings.
    #[arg(long)]
    continuous: bool,
}

impl InputArgs {
    fn load(&self) -> Result<RatingMatrix, Error> {
        let opts = CsvOptions {
            integer_mode: !self.continuous,
            ..CsvOptions::default()
        };
        let loaded = load_csv(&self.input, &opts)?;
        if loaded.dropped_rows > 0 {
            log::warn!("dropped {} rows with no observed rating", loaded.dropped_rows);
        }
        Ok(loaded.matrix)
    }
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Write the JSON report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgorithmArg {
    QpAs,
    DqpSvas,
    Both,
    Mean,
    Mode,
}

impl AlgorithmArg {
    fn algorithms(self) -> Vec<Algorithm> {
        match self {
            Self::QpAs => vec![Algorithm::QpAs],
            Self::DqpSvas => vec![Algorithm::DqpSvas],
            Self::Both => vec![Algorithm::QpAs, Algorithm::DqpSvas],
            Self::Mean => vec![Algorithm::ColumnMean],
            Self::Mode => vec![Algorithm::ColumnMode],
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightArg {
    Kendall,
    Uniform,
}

impl From<WeightArg> for WeightMode {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Kendall => WeightMode::Kendall,
            WeightArg::Uniform => WeightMode::Uniform,
        }
    }
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "kendall")]
    weights: WeightArg,
    /// Weight floor.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Collapse identical rows before the dense solve.
    #[arg(long)]
    dedupe: bool,
    /// Impute level by level when dqp-svas meets a non-level-1 data set.
    #[arg(long)]
    fallback: bool,
    /// Missing-entry cap for qp-as.
    #[arg(long, default_value_t = DEFAULT_MAX_UNKNOWNS)]
    max_unknowns: usize,
}

impl SolverArgs {
    fn options(&self, integer_mode: bool) -> Result<ImputeOptions, Error> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidParameter(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        Ok(ImputeOptions {
            weights: self.weights.into(),
            epsilon: self.epsilon,
            dedupe: self.dedupe,
            fallback: self.fallback,
            max_unknowns: self.max_unknowns,
            integer_mode,
        })
    }
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, short, value_enum, default_value = "dqp-svas")]
    algorithm: AlgorithmArg,
    #[command(flatten)]
    solver: SolverArgs,
    /// Impute each connected group of columns on its own.
    #[arg(long)]
    per_component: bool,
    /// Output CSV. With `--algorithm both` the algorithm name is inserted
    /// before the extension.
    #[arg(long, short)]
    out: PathBuf,
    /// Diagnostics JSON (default: output path with a `.json` extension).
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    /// Centre of the correlation band.
    #[arg(long)]
    s: f64,
    /// Per-column deletion rate.
    #[arg(long)]
    r: f64,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Experiment config (JSON, or TOML by extension).
    config: Option<PathBuf>,
    /// Directory for cells.csv, aggregate.csv and report.json.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also print the edge-probability and connectivity tables.
    #[arg(long)]
    connectivity_tables: bool,
    /// Monte Carlo trials per connectivity cell.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Run multiple imputation with this base on every instance.
    #[arg(long, value_enum)]
    mi: Option<MiBase>,
    #[arg(long, value_enum, default_value = "mean")]
    mi_aggregation: AggregationArg,
    /// Seed for Monte Carlo and multiple-imputation draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MiBase {
    QpAs,
    DqpSvas,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregationArg {
    Mean,
    Mode,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Target column, by label or zero-based index.
    #[arg(long)]
    target: String,
    /// Minimum tau-b with the target.
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    /// Output CSV (default: stdout).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Impute(a) => impute_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::SelectColumns(a) => select(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NotEstimatable { components } = &e {
                for (k, c) in components.iter().enumerate() {
                    eprintln!("  component {k}: columns {c:?}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn emit_json(value: &Value, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => write_text(path, &text),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn analyze(args: AnalyzeArgs) -> Result<(), Error> {
    let m = args.input.load()?;
    let graph = rp_graph(&m);
    let report = json!({
        "summary": summarize(&m),
        "pairs": pair_report(&m),
        "rp_graph": { "edges": graph.edge_count(), "components": graph.components() },
        "estimatability": closure_levels(&m).to_json(),
    });
    emit_json(&report, args.out.as_deref())
}

/// Output path for one algorithm when several are written.
fn tagged(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

/// Imputes every connected group of columns separately. Rows with nothing
/// observed inside a group keep their missing cells.
fn impute_components(alg: Algorithm, m: &RatingMatrix, opts: &ImputeOptions) -> Result<(RatingMatrix, Value), Error> {
    let mut out = m.clone();
    let mut diagnostics = Vec::new();
    for cols in rp_graph(m).components() {
        let sub = m.select_columns(&cols);
        let rows: Vec<usize> = (0..sub.rows()).filter(|&i| sub.row(i).iter().any(Option::is_some)).collect();
        let sub = sub.select_rows(&rows);
        if sub.missing_count() == 0 {
            continue;
        }
        let r = impute(alg, &sub, opts)?;
        for &(i, j, _) in &r.continuous {
            out.set(rows[i], cols[j], r.rounded.get(i, j));
        }
        let mut d = r.diagnostics_json();
        d["columns"] = json!(cols.iter().map(|&j| &m.col_labels()[j]).collect::<Vec<_>>());
        diagnostics.push(d);
    }
    let left = out.missing_count();
    if left > 0 {
        log::warn!("{left} cells have no observed rating in their column group and stay missing");
    }
    Ok((out, json!({ "algorithm": alg.name(), "components": diagnostics, "unfilled": left })))
}

fn impute_cmd(args: ImputeArgs) -> Result<(), Error> {
    let m = args.input.load()?;
    let opts = args.solver.options(!args.input.continuous)?;
    let algorithms = args.algorithm.algorithms();
    let mut diagnostics = Vec::new();
    for alg in &algorithms {
        let (filled, diag) = if args.per_component {
            impute_components(*alg, &m, &opts)?
        } else {
            let r: ImputationResult = impute(*alg, &m, &opts)?;
            let d = r.diagnostics_json();
            (r.rounded, d)
        };
        let path = if algorithms.len() > 1 {
            tagged(&args.out, alg.name())
        } else {
            args.out.clone()
        };
        save_csv(&filled, &path)?;
        diagnostics.push(diag);
    }
    let diag_path = args.diagnostics.unwrap_or_else(|| args.out.with_extension("json"));
    let value = if diagnostics.len() == 1 {
        diagnostics.remove(0)
    } else {
        Value::Array(diagnostics)
    };
    emit_json(&value, Some(&diag_path))
}

fn synth(args: SynthArgs) -> Result<(), Error> {
    let spec = SynthSpec::new(args.m, args.n, args.s, args.r, args.seed);
    spec.validate()?;
    let inst = generate(&spec)?;
    inst.save(&args.out)?;
    if !inst.rescued.is_empty() {
        log::info!("restored {} cells to keep rows non-empty", inst.rescued.len());
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let config: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    config.validate()?;
    Ok(config)
}

const TABLE_RATES: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 0.95];
const TABLE_ROWS: [usize; 5] = [50, 100, 500, 1000, 5000];
const TABLE_P: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const TABLE_NODES: [usize; 6] = [4, 8, 12, 16, 20, 50];

fn probability_tables(trials: usize, seed: u64) -> Result<Value, Error> {
    let edge: Vec<Value> = TABLE_RATES
        .iter()
        .map(|&r| json!({ "r": r, "p_edge": TABLE_ROWS.iter().map(|&m| edge_probability(r, m)).collect::<Vec<_>>() }))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut connect = Vec::new();
    for &p in &TABLE_P {
        let mut row = Vec::new();
        for &n in &TABLE_NODES {
            row.push(connectivity_probability(p, n, trials, EdgeSampling::OrderedPairs, &mut rng)?.value);
        }
        connect.push(json!({ "p_edge": p, "p_connect": row }));
    }
    Ok(json!({
        "edge": { "m": TABLE_ROWS, "rows": edge },
        "connectivity": { "n": TABLE_NODES, "trials": trials, "rows": connect },
    }))
}

fn print_tables(tables: &Value) {
    println!("P_edge");
    print!("{:>6}", "r \\ m");
    for m in TABLE_ROWS {
        print!("{m:>9}");
    }
    println!();
    for row in tables["edge"]["rows"].as_array().into_iter().flatten() {
        print!("{:>6}", row["r"].as_f64().unwrap_or(f64::NAN));
        for v in row["p_edge"].as_array().into_iter().flatten() {
            print!("{:>9.4}", v.as_f64().unwrap_or(f64::NAN));
        }
        println!();
    }
    println!("\nP_connect");
    print!("{:>6}", "p \\ n");
    for n in TABLE_NODES {
        print!("{n:>9}");
    }
    println!();
    for row in tables["connectivity"]["rows"].as_array().into_iter().flatten() {
        print!("{:>6}", row["p_edge"].as_f64().unwrap_or(f64::NAN));
        for v in row["p_connect"].as_array().into_iter().flatten() {
            print!("{:>9.4}", v.as_f64().unwrap_or(f64::NAN));
        }
        println!();
    }
}

/// Observed matrices of every instance an experiment would use.
fn mi_instances(config: &ExperimentConfig) -> Result<Vec<(String, RatingMatrix)>, Error> {
    match &config.source {
        DataSource::Csv { path } => {
            let opts = CsvOptions {
                integer_mode: config.options.integer_mode,
                ..CsvOptions::default()
            };
            Ok(vec![(path.display().to_string(), load_csv(path, &opts)?.matrix)])
        }
        DataSource::Synthetic { m, n, s, r } => {
            let mut out = Vec::new();
            for &m in m {
                for &n in n {
                    for &s in s {
                        for &r in r {
                            for &seed in &config.seeds {
                                let inst = generate(&SynthSpec::new(m, n, s, r, seed))?;
                                out.push((format!("m={m} n={n} s={s} r={r} seed={seed}"), inst.observed));
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

fn multiple_imputation(config: &ExperimentConfig, base: MiBase, aggregation: AggregationArg, seed: u64) -> Result<Value, Error> {
    let opts = MiOptions {
        base: match base {
            MiBase::QpAs => Algorithm::QpAs,
            MiBase::DqpSvas => Algorithm::DqpSvas,
        },
        aggregation: match aggregation {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Mode => Aggregation::Mode,
        },
        integer_mode: config.options.integer_mode,
        fallback: config.options.fallback,
        dedupe: config.options.dedupe,
        max_unknowns: config.options.max_unknowns,
        ..MiOptions::default()
    };
    let mut rows = Vec::new();
    for (k, (label, m)) in mi_instances(config)?.into_iter().enumerate() {
        let w = build_weights(&m, config.options.weights, config.options.epsilon);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let row = match impute_mi(&m, &w, &opts, &mut rng) {
            Ok(r) => json!({
                "instance": label,
                "samples": r.sample_count,
                "zero_sd_pct": 100.0 * r.zero_sd_fraction,
                "avg_sd": r.avg_sd,
            }),
            Err(e) => json!({ "instance": label, "error": e.to_string() }),
        };
        rows.push(row);
    }
    Ok(Value::Array(rows))
}

fn print_mi(rows: &Value) {
    println!("\n{:<40} {:>8} {:>10} {:>10}", "instance", "samples", "%ZeroSD", "AvgSD");
    for row in rows.as_array().into_iter().flatten() {
        let label = row["instance"].as_str().unwrap_or("");
        match row.get("error") {
            Some(e) => println!("{label:<40} NA ({})", e.as_str().unwrap_or("")),
            None => println!(
                "{label:<40} {:>8} {:>10.2} {:>10.4}",
                row["samples"],
                row["zero_sd_pct"].as_f64().unwrap_or(f64::NAN),
                row["avg_sd"].as_f64().unwrap_or(f64::NAN)
            ),
        }
    }
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let config = args.config.as_deref().map(load_config).transpose()?;
    if config.is_none() && !args.connectivity_tables {
        return Err(Error::Config("eval needs a config file or --connectivity-tables".into()));
    }
    if args.mi.is_some() && config.is_none() {
        return Err(Error::Config("--mi needs a config file".into()));
    }
    let mut output = serde_json::Map::new();
    if let Some(config) = &config {
        let report = run_experiment(config)?;
        if let Some(dir) = &args.out {
            write_text(&dir.join("cells.csv"), &report.cells_csv()?)?;
            write_text(&dir.join("aggregate.csv"), &report.aggregate_csv()?)?;
            write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        }
        if !args.json {
            print!("{}", report.table());
        }
        output.insert("aggregate".into(), serde_json::to_value(&report.aggregate)?);
        if let Some(base) = args.mi {
            let mi = multiple_imputation(config, base, args.mi_aggregation, args.seed)?;
            if let Some(dir) = &args.out {
                write_text(&dir.join("mi.json"), &serde_json::to_string_pretty(&mi)?)?;
            }
            if !args.json {
                print_mi(&mi);
            }
            output.insert("multiple_imputation".into(), mi);
        }
    }
    if args.connectivity_tables {
        let tables = probability_tables(args.trials, args.seed)?;
        if !args.json {
            if config.is_some() {
                println!();
            }
            print_tables(&tables);
        }
        output.insert("tables".into(), tables);
    }
    if args.json {
        emit_json(&Value::Object(output), None)?;
    }
    Ok(())
}

fn select(args: SelectArgs) -> Result<(), Error> {
    let m = args.input.load()?;
    let labels = m.col_labels();
    let target = labels
        .iter()
        .position(|l| *l == args.target)
        .or_else(|| args.target.parse::<usize>().ok().filter(|&j| j < labels.len()))
        .ok_or_else(|| Error::InvalidParameter(format!("no column {:?}", args.target)))?;
    let selection = select_columns(&pair_report(&m), target, args.threshold)?;
    if let Some(w) = &selection.warning {
        log::warn!("{w}");
    }
    let reduced = m.select_columns(&selection.columns);
    match &args.out {
        Some(path) => save_csv(&reduced, path),
        None => ordinal_impute::data::write_csv(&reduced, io::stdout().lock()),
    }
}
