//! Command-line entry point. Every subcommand validates its inputs before
//! computing, writes machine-readable outputs plus `manifest.json` into
//! `--out`, and maps errors to exit code 2 (configuration) or 1 (compute).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::equilibrium::{brute_force_solve, solve_fixed_point, EpsSampler, SolverOptions, BRUTE_FORCE_MAX_N};
use crate::error::{Error, Result};
use crate::estimator::{
    build_aggregator_spec, build_design, estimate, Aggregator, EstimationOptions, InstrumentSet, Method, Mode,
    VcovKind,
};
use crate::exec::Threads;
use crate::graph::{
    degree_histogram, generate_logit_network_oriented, read_edge_list_path, trim_degrees, trim_degrees_undirected,
    write_edge_list, LinkRule, Network, Orientation,
};
use crate::mc::presets::{run_table, Preset, DEFAULT_REPS, DEFAULT_SEED};
use crate::mc::{run_mc, SimConfig};
use crate::misspec::{build_instruments, decompose, InstrumentSpec, Target};
use crate::model::{beta_name, build_restriction, check_bounded, load_coefficients, tri_pairs, RestrictionKind, TieRule};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Parser)]
#[command(name = "rankpeer", version, about = "Rank-dependent peer effects: simulate, solve, estimate")]
pub struct Cli {
    /// Worker threads for replication loops (1 = sequential).
    #[arg(long, global = true, env = "RANKPEER_THREADS", value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a logit network, optionally trimmed, and optionally outcomes on it.
    Simulate(SimulateArgs),
    /// Solve for the equilibrium outcome vector.
    Solve(SolveArgs),
    /// Estimate peer coefficients by OLS or TSLS.
    Estimate(EstimateArgs),
    /// Decompose the linear-in-means or linear-in-sums estimand into weights on the true coefficients.
    Misspec(MisspecArgs),
    /// Run a replication study from a preset or a JSON config.
    Mc(McArgs),
}

fn serde_name<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = -4.5, allow_hyphen_values = true)]
    pub threshold: f64,
    /// calibrated | literal
    #[arg(long, default_value = "calibrated", value_parser = serde_name::<LinkRule>)]
    pub link_rule: LinkRule,
    /// directed | undirected
    #[arg(long, default_value = "directed", value_parser = serde_name::<Orientation>)]
    pub orientation: Orientation,
    /// Degree cap applied after drawing.
    #[arg(long)]
    pub dbar: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    /// Also draw `x ~ N(0,1)`, `eps ~ N(0,1)` and solve for outcomes with these coefficients.
    #[arg(long)]
    pub coeffs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub coeffs: PathBuf,
    /// CSV with an `intrinsic` column (optional `node` column).
    #[arg(long, conflicts_with_all = ["data", "schema"])]
    pub intrinsic: Option<PathBuf>,
    /// Dataset whose covariates give `x'gamma`; requires `--schema`.
    #[arg(long, requires = "schema")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Cross-check against exhaustive enumeration (at most 8 nodes).
    #[arg(long)]
    pub verify: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// ols | tsls
    #[arg(long, default_value = "tsls", value_parser = serde_name::<Method>)]
    pub method: Method,
    /// stratified | pooled
    #[arg(long, default_value = "stratified", value_parser = serde_name::<Mode>)]
    pub mode: Mode,
    /// saturated | lim | lis | minmax_split | max_only | restricted_maxsplit | restricted_maxsplit_over_d | min_max_mid
    #[arg(long, value_parser = serde_name::<RestrictionKind>, conflicts_with = "aggregators")]
    pub restriction: Option<RestrictionKind>,
    /// Comma-separated aggregator columns (lim_bar, bar_minus_low, bar_minus_high, bar_minus_both, min_only, max_only).
    #[arg(long, value_delimiter = ',', value_parser = serde_name::<Aggregator>)]
    pub aggregators: Vec<Aggregator>,
    /// Drop nodes with fewer peers.
    #[arg(long, default_value_t = 0)]
    pub min_degree: usize,
    /// full | restricted
    #[arg(long, default_value = "full", value_parser = serde_name::<InstrumentSet>)]
    pub instruments: InstrumentSet,
    /// hc0 | homoskedastic
    #[arg(long, default_value = "hc0", value_parser = serde_name::<VcovKind>)]
    pub vcov: VcovKind,
    /// Largest degree in the saturated layout; defaults to the network's maximum.
    #[arg(long)]
    pub dbar: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MisspecArgs {
    #[arg(long)]
    pub network: PathBuf,
    #[arg(long)]
    pub coeffs: PathBuf,
    /// lim | lis
    #[arg(long, value_parser = serde_name::<Target>)]
    pub target: Target,
    /// Comma-separated instruments built from the first covariate (peer_mean_x, peer_sum_x, peer_mean2_x).
    #[arg(long, value_delimiter = ',', default_value = "peer_mean_x", value_parser = serde_name::<InstrumentSpec>)]
    pub instruments: Vec<InstrumentSpec>,
    /// Fixed covariates; drawn from `N(0,1)` with `--seed` when absent.
    #[arg(long, requires = "schema")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub schema: Option<PathBuf>,
    /// Standard deviation of the normal disturbances.
    #[arg(long, default_value_t = 1.0)]
    pub eps_sd: f64,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// table1 | table2 | table3 | table5 | table6 | table7 | table8 | empirical_sim
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    /// JSON simulation config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the preset default or the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the replication count.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Exit 1 when a preset's acceptance band is missed.
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .try_init();
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<i32> {
    let threads = Threads(cli.threads.map(|t| t as usize));
    let started = Instant::now();
    let (name, out, record) = match &cli.command {
        Command::Simulate(a) => ("simulate", &a.out, cmd_simulate(a)?),
        Command::Solve(a) => ("solve", &a.out, cmd_solve(a)?),
        Command::Estimate(a) => ("estimate", &a.out, cmd_estimate(a)?),
        Command::Misspec(a) => ("misspec", &a.out, cmd_misspec(a, threads)?),
        Command::Mc(a) => ("mc", &a.out, cmd_mc(a, threads)?),
    };
    let manifest = json!({
        "tool": "rankpeer",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": name,
        "argv": argv,
        "threads": threads.0,
        "parallel_feature": cfg!(feature = "parallel"),
        "seed": record.seed,
        "config": record.config,
        "outputs": record.outputs,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    if let Some(text) = &record.stdout {
        print!("{text}");
    }
    Ok(record.exit_code)
}

/// What a subcommand reports back for the manifest.
struct Record {
    seed: Option<u64>,
    config: Value,
    outputs: Vec<String>,
    stdout: Option<String>,
    exit_code: i32,
}

impl Record {
    fn new(seed: Option<u64>, config: Value, outputs: &[&str]) -> Self {
        Record {
            seed,
            config,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            stdout: None,
            exit_code: 0,
        }
    }
}

/// `%.17g`: 17 significant digits, trailing zeros dropped.
pub fn sig17(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let fixed = format!("{:.*}", (16 - exp) as usize, v);
        trim_zeros(&fixed)
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input {
        path: dir.to_path_buf(),
        message: format!("cannot create output directory: {e}"),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn require_file(path: &Path, field: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input {
            path: path.to_path_buf(),
            message: format!("--{field}: file not found"),
        })
    }
}

/// Column roles in a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    /// Node id column (values `0..n-1`); row order is used when absent.
    #[serde(default)]
    pub id: Option<String>,
    /// Outcome column; required for estimation.
    #[serde(default)]
    pub outcome: Option<String>,
    /// Control covariates, in coefficient order after the intercept.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Exogenous column whose peer order statistics serve as instruments.
    pub instrument_source: String,
    #[serde(default = "yes")]
    pub intercept: bool,
}

fn yes() -> bool {
    true
}

impl DatasetSchema {
    pub fn load(path: &Path) -> Result<Self> {
        require_file(path, "schema")?;
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Input {
            path: path.to_path_buf(),
            message: format!("invalid schema: {e}"),
        })
    }
}

/// Validated, node-ordered columns.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Option<Vec<f64>>,
    /// Intercept column first when the schema asks for one.
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub source: Vec<f64>,
    pub unused_columns: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// Read `data_csv`, check its header against `schema`, and reject rows with
/// missing or non-numeric required fields, listing their 1-based data row
/// numbers. Extra columns are accepted and logged.
pub fn ingest_dataset(data_csv: &Path, schema: &DatasetSchema) -> Result<Dataset> {
    require_file(data_csv, "data")?;
    let input_err = |message: String| Error::Input {
        path: data_csv.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(data_csv)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let mut required: Vec<(String, &str)> = Vec::new();
    if let Some(id) = &schema.id {
        required.push((id.clone(), "id"));
    }
    if let Some(y) = &schema.outcome {
        required.push((y.clone(), "outcome"));
    }
    for c in &schema.covariates {
        required.push((c.clone(), "covariates"));
    }
    required.push((schema.instrument_source.clone(), "instrument_source"));
    let missing_cols: Vec<String> = required
        .iter()
        .filter(|(c, _)| find(c).is_none())
        .map(|(c, role)| format!("`{c}` ({role})"))
        .collect();
    if !missing_cols.is_empty() {
        return Err(input_err(format!(
            "header lacks schema column(s) {}; found {}",
            missing_cols.join(", "),
            header.join(",")
        )));
    }
    let unused: Vec<String> = header
        .iter()
        .filter(|h| !required.iter().any(|(c, _)| c == *h))
        .cloned()
        .collect();
    if !unused.is_empty() {
        log::info!("{}: ignoring unused column(s) {}", data_csv.display(), unused.join(", "));
    }

    let mut numeric_cols: Vec<(String, usize)> = Vec::new();
    for (c, _) in &required {
        if !numeric_cols.iter().any(|(seen, _)| seen == c) {
            numeric_cols.push((c.clone(), find(c).unwrap()));
        }
    }
    let mut values: BTreeMap<String, Vec<f64>> = numeric_cols.iter().map(|(c, _)| (c.clone(), Vec::new())).collect();
    let mut problems: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (name, idx) in &numeric_cols {
            let raw = record.get(*idx).unwrap_or("");
            let v = match raw {
                "" | "NA" | "na" | "NaN" | "nan" | "." => None,
                s => s.parse::<f64>().ok().filter(|v| v.is_finite()),
            };
            match v {
                Some(v) => values.get_mut(name).unwrap().push(v),
                None => {
                    problems.entry(name.clone()).or_default().push(row);
                    values.get_mut(name).unwrap().push(f64::NAN);
                }
            }
        }
    }
    if !problems.is_empty() {
        let detail: Vec<String> = problems
            .iter()
            .map(|(c, rows)| {
                let shown: Vec<String> = rows.iter().take(20).map(|r| r.to_string()).collect();
                let more = if rows.len() > 20 { format!(" and {} more", rows.len() - 20) } else { String::new() };
                format!("`{c}` missing or non-numeric on row(s) {}{more}", shown.join(", "))
            })
            .collect();
        return Err(input_err(detail.join("; ")));
    }
    let n = values[&schema.instrument_source].len();
    if n == 0 {
        return Err(input_err("no data rows".into()));
    }

    // node order
    let order: Vec<usize> = match &schema.id {
        None => (0..n).collect(),
        Some(id) => {
            let ids = &values[id];
            let mut order = vec![usize::MAX; n];
            for (row, &v) in ids.iter().enumerate() {
                let node = v as usize;
                if v < 0.0 || v.fract() != 0.0 || node >= n || order[node] != usize::MAX {
                    return Err(input_err(format!(
                        "`{id}` must hold each node id 0..{} exactly once (row {})",
                        n - 1,
                        row + 1
                    )));
                }
                order[node] = row;
            }
            order
        }
    };
    let column = |name: &str| -> Vec<f64> { order.iter().map(|&r| values[name][r]).collect() };

    let mut x_names = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if schema.intercept {
        x_names.push("intercept".to_string());
        cols.push(vec![1.0; n]);
    }
    for c in &schema.covariates {
        x_names.push(c.clone());
        cols.push(column(c));
    }
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    Ok(Dataset {
        y: schema.outcome.as_deref().map(column),
        x,
        x_names,
        source: column(&schema.instrument_source),
        unused_columns: unused,
    })
}

fn load_network(path: &Path, n: Option<usize>) -> Result<Network> {
    require_file(path, "network")?;
    read_edge_list_path(path, n)
}

fn load_coeffs(path: &Path) -> Result<(crate::model::PeerCoefficients, RestrictionKind)> {
    require_file(path, "coeffs")?;
    load_coefficients(path)
}

fn read_intrinsic(path: &Path) -> Result<Vec<f64>> {
    require_file(path, "intrinsic")?;
    let err = |message: String| Error::Input {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = header
        .iter()
        .position(|h| h == "intrinsic")
        .ok_or_else(|| err("missing `intrinsic` column".into()))?;
    let node_col = header.iter().position(|h| h == "node");
    let mut pairs = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec
            .get(col)
            .and_then(|s| s.parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| err(format!("`intrinsic` missing or non-numeric on row {}", r + 1)))?;
        let node = match node_col {
            Some(c) => rec
                .get(c)
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| err(format!("bad `node` on row {}", r + 1)))?,
            None => r,
        };
        pairs.push((node, v));
    }
    let n = pairs.len();
    let mut out = vec![f64::NAN; n];
    for (node, v) in pairs {
        if node >= n || !out[node].is_nan() {
            return Err(err(format!("`node` values must be 0..{} without repeats", n.saturating_sub(1))));
        }
        out[node] = v;
    }
    Ok(out)
}

fn x_gamma(x: &DMatrix<f64>, gamma: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient file has {} gamma entries for {} covariate columns (intercept included)",
            gamma.len(),
            x.ncols()
        )));
    }
    Ok((0..x.nrows()).map(|i| (0..x.ncols()).map(|j| x[(i, j)] * gamma[j]).sum()).collect())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Record> {
    if a.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let coeffs = match &a.coeffs {
        Some(p) => {
            let (c, _) = load_coeffs(p)?;
            if c.gamma.len() < 2 {
                return Err(Error::Config("--coeffs: gamma needs an intercept and one covariate".into()));
            }
            Some(c)
        }
        None => None,
    };
    prepare_out(&a.out)?;
    let base = generate_logit_network_oriented(a.n, a.threshold, a.link_rule, a.orientation, a.seed)?;
    let net = match (a.dbar, a.orientation) {
        (Some(d), Orientation::Directed) => trim_degrees(&base, d, a.seed),
        (Some(d), Orientation::Undirected) => trim_degrees_undirected(&base, d, a.seed),
        (None, _) => base,
    };
    write_edge_list(&net, fs::File::create(a.out.join("network.csv"))?)?;
    write_csv(
        &a.out.join("degrees.csv"),
        &["degree", "count"],
        degree_histogram(&net).into_iter().map(|(d, c)| vec![d.to_string(), c.to_string()]),
    )?;
    let mut outputs = vec!["network.csv", "degrees.csv"];
    if let Some(c) = &coeffs {
        if net.max_degree() > c.dbar {
            return Err(Error::DegreeOverflow {
                node: (0..net.n()).find(|&i| net.degree(i) > c.dbar).unwrap_or(0),
                degree: net.max_degree(),
                dbar: c.dbar,
            });
        }
        let l = c.gamma.len();
        let mut xr = stream_rng(a.seed, Stream::Covariates, 0);
        let x = DMatrix::from_fn(a.n, l, |_, j| if j == 0 { 1.0 } else { xr.sample(StandardNormal) });
        let mut er = stream_rng(a.seed, Stream::Disturbance, 0);
        let eps: Vec<f64> = (0..a.n).map(|_| er.sample(StandardNormal)).collect();
        let intrinsic = crate::equilibrium::intrinsic_vector(&x, &c.gamma, &eps)?;
        let sol = solve_fixed_point(&net, c, &intrinsic, TieRule::default(), &SolverOptions::default())?;
        let mut header = vec!["id".to_string(), "y".to_string()];
        header.extend((1..l).map(|j| format!("x{j}")));
        let rows = (0..a.n).map(|i| {
            let mut r = vec![i.to_string(), sig17(sol.y[i])];
            r.extend((1..l).map(|j| sig17(x[(i, j)])));
            r
        });
        let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&a.out.join("data.csv"), &header_ref, rows)?;
        let schema = DatasetSchema {
            id: Some("id".into()),
            outcome: Some("y".into()),
            covariates: (1..l).map(|j| format!("x{j}")).collect(),
            instrument_source: "x1".into(),
            intercept: true,
        };
        write_json(&a.out.join("schema.json"), &schema)?;
        outputs.extend(["data.csv", "schema.json"]);
    }
    let config = json!({
        "n": a.n, "threshold": a.threshold, "link_rule": a.link_rule, "orientation": a.orientation,
        "dbar": a.dbar, "coeffs": a.coeffs, "network_edges": net.edge_count(),
    });
    Ok(Record::new(Some(a.seed), config, &outputs))
}

fn cmd_solve(a: &SolveArgs) -> Result<Record> {
    let (coeffs, _) = load_coeffs(&a.coeffs)?;
    let (intrinsic, n_hint) = match (&a.intrinsic, &a.data, &a.schema) {
        (Some(p), _, _) => {
            let v = read_intrinsic(p)?;
            let n = v.len();
            (v, n)
        }
        (None, Some(d), Some(s)) => {
            let ds = ingest_dataset(d, &DatasetSchema::load(s)?)?;
            (x_gamma(&ds.x, &coeffs.gamma)?, ds.n())
        }
        _ => return Err(Error::Config("solve needs --intrinsic or --data with --schema".into())),
    };
    let net = load_network(&a.network, Some(n_hint))?;
    if let Some(tol) = a.tol {
        if !(tol > 0.0) {
            return Err(Error::Config("--tol must be positive".into()));
        }
    }
    let bound = check_bounded(&coeffs);
    if !bound.ok {
        return Err(Error::ContractionPrecondition { beta_bar: bound.beta_bar });
    }
    prepare_out(&a.out)?;
    let opts = SolverOptions {
        tol: a.tol,
        max_iter: a.max_iter,
        polish: true,
    };
    let sol = solve_fixed_point(&net, &coeffs, &intrinsic, TieRule::default(), &opts)?;
    let ranks = sol.pi.ranks();
    write_csv(
        &a.out.join("y.csv"),
        &["node", "y", "rank"],
        (0..net.n()).map(|i| vec![i.to_string(), sig17(sol.y[i]), (ranks[i] + 1).to_string()]),
    )?;
    write_csv(
        &a.out.join("pi.csv"),
        &["rank", "node"],
        sol.pi.0.iter().enumerate().map(|(r, &i)| vec![(r + 1).to_string(), i.to_string()]),
    )?;
    let mut diag = json!({
        "n": net.n(),
        "beta_bar": bound.beta_bar,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "converged": sol.converged,
        "polished": sol.polished,
    });
    if a.verify {
        if net.n() > BRUTE_FORCE_MAX_N {
            return Err(Error::TooLarge { n: net.n(), max: BRUTE_FORCE_MAX_N });
        }
        let bf = brute_force_solve(&net, &coeffs, &intrinsic, TieRule::default())?;
        let gap = bf.y.iter().zip(&sol.y).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        diag["brute_force_max_abs_diff"] = json!(gap);
        diag["brute_force_same_ordering"] = json!(bf.pi == sol.pi);
    }
    write_json(&a.out.join("diagnostics.json"), &diag)?;
    let config = json!({
        "network": a.network, "coeffs": a.coeffs, "intrinsic": a.intrinsic, "data": a.data,
        "schema": a.schema, "tol": a.tol, "max_iter": a.max_iter, "verify": a.verify,
    });
    Ok(Record::new(None, config, &["y.csv", "pi.csv", "diagnostics.json"]))
}

fn cmd_estimate(a: &EstimateArgs) -> Result<Record> {
    let schema = DatasetSchema::load(&a.schema)?;
    if schema.outcome.is_none() {
        return Err(Error::Input {
            path: a.schema.clone(),
            message: "estimation needs an `outcome` column in the schema".into(),
        });
    }
    let ds = ingest_dataset(&a.data, &schema)?;
    let net = load_network(&a.network, Some(ds.n()))?;
    let y = ds.y.as_ref().expect("outcome checked above");
    let tie = TieRule::default();
    let (design, restriction) = if a.aggregators.is_empty() {
        let dbar = a.dbar.unwrap_or_else(|| net.max_degree()).max(1);
        let design = build_design(&net, y, &ds.x, &ds.source, tie, dbar)?;
        let restriction = match a.restriction {
            None | Some(RestrictionKind::Saturated) => None,
            Some(RestrictionKind::Custom) => {
                return Err(Error::Config("--restriction custom is only available through the library".into()))
            }
            Some(kind) => Some(build_restriction(kind, dbar)?),
        };
        (design, restriction)
    } else {
        if a.dbar.is_some() {
            return Err(Error::Config("--dbar does not apply to aggregator designs".into()));
        }
        (build_aggregator_spec(&net, y, &ds.x, &ds.source, tie, &a.aggregators)?, None)
    };
    prepare_out(&a.out)?;
    let opts = EstimationOptions {
        mode: a.mode,
        restriction,
        min_degree: a.min_degree,
        instruments: a.instruments,
        vcov: a.vcov,
    };
    let res = estimate(&design, a.method, &opts)?;
    if !res.skipped_strata.is_empty() {
        log::warn!("strata with fewer rows than parameters were skipped: d = {:?}", res.skipped_strata);
    }
    let mut rows = Vec::new();
    for (name, (est, se)) in res.param_names.iter().zip(res.theta.iter().zip(&res.theta_se)) {
        rows.push(vec![name.clone(), sig17(*est), sig17(*se)]);
    }
    for (name, (est, se)) in res.gamma_names.iter().zip(res.gamma_hat.iter().zip(&res.gamma_se)) {
        // covariate names from the schema replace positional ones
        let pretty = rename_gamma(name, &ds.x_names);
        rows.push(vec![pretty, sig17(*est), sig17(*se)]);
    }
    write_csv(&a.out.join("estimates.csv"), &["name", "estimate", "se"], rows)?;
    let mut outputs = vec!["estimates.csv", "result.json"];
    if !res.first_stage_r2.is_empty() {
        write_csv(
            &a.out.join("first_stage.csv"),
            &["name", "r2"],
            res.param_names
                .iter()
                .zip(&res.first_stage_r2)
                .map(|(n, r)| vec![n.clone(), sig17(*r)]),
        )?;
        outputs.push("first_stage.csv");
    }
    write_json(&a.out.join("result.json"), &res)?;
    let config = json!({
        "network": a.network, "data": a.data, "schema": schema, "method": a.method, "mode": a.mode,
        "restriction": a.restriction, "aggregators": a.aggregators, "min_degree": a.min_degree,
        "instruments": a.instruments, "vcov": a.vcov, "dbar": a.dbar,
        "unused_columns": ds.unused_columns,
    });
    let mut rec = Record::new(None, config, &outputs);
    rec.stdout = Some(format_estimates(&res, &ds.x_names));
    Ok(rec)
}

/// `gamma_{j}` (optionally with a `[d=..]` suffix) to the schema's column name.
fn rename_gamma(name: &str, x_names: &[String]) -> String {
    let (base, suffix) = match name.find('[') {
        Some(p) => name.split_at(p),
        None => (name, ""),
    };
    base.strip_prefix("gamma_")
        .and_then(|j| j.parse::<usize>().ok())
        .and_then(|j| x_names.get(j))
        .map(|n| format!("{n}{suffix}"))
        .unwrap_or_else(|| name.to_string())
}

fn format_estimates(res: &crate::estimator::EstimateResult, x_names: &[String]) -> String {
    let mut s = format!("{:?} ({:?}), {} observations\n", res.method, res.mode, res.n_obs);
    let names = res
        .param_names
        .iter()
        .cloned()
        .chain(res.gamma_names.iter().map(|n| rename_gamma(n, x_names)));
    let est = res.theta.iter().chain(&res.gamma_hat);
    let se = res.theta_se.iter().chain(&res.gamma_se);
    let width = names.clone().map(|n| n.len()).max().unwrap_or(8).max(8);
    s.push_str(&format!("{:width$}  {:>10}  {:>10}\n", "", "estimate", "se"));
    for ((n, e), v) in names.zip(est).zip(se) {
        s.push_str(&format!("{n:width$}  {e:>10.3}  {v:>10.3}\n"));
    }
    s
}

fn cmd_misspec(a: &MisspecArgs, threads: Threads) -> Result<Record> {
    let (coeffs, _) = load_coeffs(&a.coeffs)?;
    if a.instruments.is_empty() {
        return Err(Error::Config("--instruments: at least one instrument required".into()));
    }
    if !(a.eps_sd > 0.0) {
        return Err(Error::Config("--eps-sd must be positive".into()));
    }
    let ds = match (&a.data, &a.schema) {
        (Some(d), Some(s)) => Some(ingest_dataset(d, &DatasetSchema::load(s)?)?),
        _ => None,
    };
    let net = load_network(&a.network, ds.as_ref().map(Dataset::n))?;
    let n = net.n();
    let x = match &ds {
        Some(ds) => ds.x.clone(),
        None => {
            let mut xr = stream_rng(a.seed, Stream::Covariates, 0);
            DMatrix::from_fn(n, coeffs.gamma.len().max(2), |_, j| {
                if j == 0 {
                    1.0
                } else {
                    xr.sample(StandardNormal)
                }
            })
        }
    };
    if x.ncols() < 2 {
        return Err(Error::Config("misspec needs at least one non-constant covariate".into()));
    }
    prepare_out(&a.out)?;
    let z = build_instruments(&net, &x, 1, &a.instruments)?;
    let sampler = EpsSampler::Normal { sd: a.eps_sd };
    let dec = decompose(&net, &coeffs, &x, &z, a.target, &sampler, a.reps, a.seed, TieRule::default(), threads)?;
    write_csv(
        &a.out.join("weights.csv"),
        &["name", "k", "d", "weight", "beta"],
        tri_pairs(coeffs.dbar).enumerate().map(|(idx, (k, d))| {
            vec![
                beta_name(k, d),
                k.to_string(),
                d.to_string(),
                sig17(dec.weights[idx]),
                sig17(coeffs.beta[idx]),
            ]
        }),
    )?;
    write_json(&a.out.join("decomposition.json"), &dec)?;
    let config = json!({
        "network": a.network, "coeffs": a.coeffs, "target": a.target, "instruments": a.instruments,
        "data": a.data, "schema": a.schema, "eps_sd": a.eps_sd, "reps": a.reps,
    });
    let mut rec = Record::new(Some(a.seed), config, &["weights.csv", "decomposition.json"]);
    rec.stdout = Some(format!(
        "{:?} estimand {:.4} (MC se {:.2e}); {} negative weight(s)\n",
        a.target, dec.estimand, dec.mc_se, dec.negative_weight_count
    ));
    Ok(rec)
}

fn cmd_mc(a: &McArgs, threads: Threads) -> Result<Record> {
    if a.reps == Some(0) {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    if let Some(name) = &a.preset {
        let preset: Preset = name.parse()?;
        let reps = a.reps.unwrap_or(DEFAULT_REPS);
        let seed = a.seed.unwrap_or(DEFAULT_SEED);
        prepare_out(&a.out)?;
        let run = run_table(preset, reps, seed, threads)?;
        write_json(&a.out.join("summary.json"), &run)?;
        fs::write(a.out.join("table.txt"), &run.text)?;
        write_csv(
            &a.out.join("table.csv"),
            &["row", "column", "stat", "value", "reference", "cite"],
            run.cells.iter().map(|c| {
                vec![
                    c.row.clone(),
                    (c.column + 1).to_string(),
                    c.stat.clone(),
                    c.value.map(sig17).unwrap_or_default(),
                    c.reference.map(sig17).unwrap_or_default(),
                    c.cite.clone(),
                ]
            }),
        )?;
        write_json(&a.out.join("checks.json"), &run.checks)?;
        let mut text = run.text.clone();
        text.push('\n');
        for c in &run.checks {
            text.push_str(&format!(
                "{} {}: {:.3} in [{:.3}, {:.3}]\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.label,
                c.value,
                c.lo,
                c.hi
            ));
        }
        let failed = run.checks.iter().filter(|c| !c.pass).count();
        let config = json!({ "preset": preset, "reps": reps, "seed": seed, "columns": run.columns.iter().map(|c| &c.config).collect::<Vec<_>>() });
        let mut rec = Record::new(Some(seed), config, &["summary.json", "table.txt", "table.csv", "checks.json"]);
        rec.stdout = Some(text);
        if a.check && failed > 0 {
            log::error!("{failed} acceptance band(s) missed");
            rec.exit_code = 1;
        }
        return Ok(rec);
    }
    let path = a.config.as_ref().expect("clap requires --preset or --config");
    require_file(path, "config")?;
    let text = fs::read_to_string(path)?;
    let mut cfg: SimConfig = serde_json::from_str(&text).map_err(|e| Error::Input {
        path: path.clone(),
        message: format!("invalid simulation config: {e}"),
    })?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = a.reps {
        cfg.reps = reps;
    }
    cfg.validate()?;
    prepare_out(&a.out)?;
    let summary = run_mc(&cfg, threads)?;
    write_json(&a.out.join("summary.json"), &summary)?;
    let mut rows = Vec::new();
    for e in &summary.estimators {
        for c in &e.coefficients {
            rows.push(vec![
                e.label.clone(),
                c.name.clone(),
                sig17(c.truth),
                sig17(c.bias),
                sig17(c.mse),
                sig17(c.coverage95),
                c.n.to_string(),
            ]);
        }
    }
    write_csv(
        &a.out.join("coefficients.csv"),
        &["estimator", "coef", "truth", "bias", "mse", "coverage95", "n"],
        rows,
    )?;
    if a.check {
        log::warn!("--check has no bands for custom configs");
    }
    let config = serde_json::to_value(&cfg)?;
    Ok(Record::new(Some(cfg.seed), config, &["summary.json", "coefficients.csv"]))
}
