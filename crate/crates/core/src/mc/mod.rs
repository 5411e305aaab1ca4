//! Seeded replication studies: network, covariates and disturbances are drawn
//! per replication from separate streams, the equilibrium is solved, and
//! every configured estimator is run and scored against the truth.

pub mod presets;

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{intrinsic_vector, solve_fixed_point, SolverOptions};
use crate::error::{Error, Result};
use crate::estimator::{build_design, estimate, EstimateResult, EstimationOptions, InstrumentSet, Method, Mode, VcovKind};
use crate::exec::{map_indexed, Threads};
use crate::graph::{
    degree_histogram, generate_logit_network_oriented, trim_degrees, trim_degrees_undirected, LinkRule, Network,
    Orientation,
};
use crate::model::{build_restriction, check_bounded, tri_len, PeerCoefficients, RestrictionKind, TieRule};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkMode {
    /// Replication 0's network is reused by every replication.
    #[default]
    Fixed,
    Redraw,
}

/// True peer coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// Flat triangular `beta`; requires a fixed `dbar`.
    Saturated { beta: Vec<f64> },
    /// `beta = R theta` for a named restriction, at whatever `dbar` the network has.
    Restricted { restriction: RestrictionKind, theta: Vec<f64> },
}

impl TruthSpec {
    pub fn coefficients(&self, dbar: usize, gamma: &[f64]) -> Result<PeerCoefficients> {
        match self {
            TruthSpec::Saturated { beta } => PeerCoefficients::new(dbar, beta.clone(), gamma.to_vec()),
            TruthSpec::Restricted { restriction, theta } => {
                let r = build_restriction(*restriction, dbar)?;
                if theta.len() != r.n_params() {
                    return Err(Error::Config(format!(
                        "restriction `{restriction:?}` has {} parameters, theta has {}",
                        r.n_params(),
                        theta.len()
                    )));
                }
                PeerCoefficients::new(dbar, r.expand(theta), gamma.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub label: String,
    pub method: Method,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "saturated")]
    pub restriction: RestrictionKind,
    #[serde(default)]
    pub min_degree: usize,
    #[serde(default)]
    pub instruments: InstrumentSet,
    #[serde(default)]
    pub vcov: VcovKind,
}

fn saturated() -> RestrictionKind {
    RestrictionKind::Saturated
}

impl EstimatorSpec {
    pub fn new(label: &str, method: Method, mode: Mode) -> Self {
        EstimatorSpec {
            label: label.into(),
            method,
            mode,
            restriction: RestrictionKind::Saturated,
            min_degree: 0,
            instruments: InstrumentSet::Full,
            vcov: VcovKind::Hc0,
        }
    }

    pub fn restricted(mut self, restriction: RestrictionKind) -> Self {
        self.restriction = restriction;
        self
    }

    pub fn min_degree(mut self, d: usize) -> Self {
        self.min_degree = d;
        self
    }

    pub fn instruments(mut self, set: InstrumentSet) -> Self {
        self.instruments = set;
        self
    }
}

fn one() -> usize {
    1
}

fn default_threshold() -> f64 {
    -4.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub label: String,
    /// Nodes per network copy.
    pub n: usize,
    /// Degree cap; `None` keeps the untrimmed network.
    #[serde(default)]
    pub dbar: Option<usize>,
    /// Identical copies of the network stacked into one sample.
    #[serde(default = "one")]
    pub n_networks: usize,
    #[serde(default)]
    pub network_mode: NetworkMode,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub link_rule: LinkRule,
    #[serde(default)]
    pub orientation: Orientation,
    /// Intercept first, then one coefficient per standard normal covariate;
    /// the first covariate is the instrument source.
    pub gamma: Vec<f64>,
    pub truth: TruthSpec,
    pub reps: usize,
    pub estimators: Vec<EstimatorSpec>,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.n < 2 || self.n_networks == 0 {
            return Err(Error::Config("need n >= 2 nodes and at least one network".into()));
        }
        if self.gamma.len() < 2 {
            return Err(Error::Config(
                "gamma needs an intercept and at least one covariate (the instrument source)".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators configured".into()));
        }
        let probe = match (&self.truth, self.dbar) {
            (_, Some(d)) => d,
            (TruthSpec::Saturated { .. }, None) => {
                return Err(Error::Config("a saturated truth needs a fixed dbar".into()))
            }
            (TruthSpec::Restricted { .. }, None) => self.n - 1,
        };
        if probe == 0 {
            return Err(Error::Config("dbar must be at least 1".into()));
        }
        let coeffs = self.truth.coefficients(probe, &self.gamma)?;
        let b = check_bounded(&coeffs);
        if !b.ok {
            return Err(Error::Config(format!(
                "true coefficients are not bounded (beta_bar = {})",
                b.beta_bar
            )));
        }
        for e in &self.estimators {
            if e.restriction == RestrictionKind::Custom {
                return Err(Error::Config(format!(
                    "estimator `{}`: custom restrictions are not available in simulations",
                    e.label
                )));
            }
        }
        Ok(())
    }

    /// Network used by replication `rep` (ignores the network mode).
    pub fn draw_network(&self, rep: usize) -> Result<Network> {
        let key: u64 = stream_rng(self.seed, Stream::Network, rep as u64).random();
        let base = generate_logit_network_oriented(self.n, self.threshold, self.link_rule, self.orientation, key)?;
        let net = match (self.dbar, self.orientation) {
            (Some(d), Orientation::Directed) => trim_degrees(&base, d, key),
            (Some(d), Orientation::Undirected) => trim_degrees_undirected(&base, d, key),
            (None, _) => base,
        };
        Ok(net.replicate(self.n_networks))
    }

    fn rep_network<'a>(&self, rep: usize, fixed: &'a Network) -> Result<std::borrow::Cow<'a, Network>> {
        Ok(match self.network_mode {
            NetworkMode::Fixed => std::borrow::Cow::Borrowed(fixed),
            NetworkMode::Redraw => std::borrow::Cow::Owned(self.draw_network(rep)?),
        })
    }

    /// Covariates `(1, x_1, ...)` and disturbances for replication `rep`.
    pub fn draw_data(&self, rep: usize, n_total: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut xr = stream_rng(self.seed, Stream::Covariates, rep as u64);
        let l = self.gamma.len();
        let mut x = DMatrix::from_element(n_total, l, 1.0);
        for j in 1..l {
            for i in 0..n_total {
                x[(i, j)] = xr.sample(StandardNormal);
            }
        }
        let mut er = stream_rng(self.seed, Stream::Disturbance, rep as u64);
        let eps = (0..n_total).map(|_| er.sample(StandardNormal)).collect();
        (x, eps)
    }
}

/// One coefficient in one replication.
#[derive(Debug, Clone)]
struct CoefRecord {
    name: String,
    estimate: f64,
    se: f64,
    truth: f64,
    misspecified: bool,
    r2: f64,
}

type EstimatorOutcome = std::result::Result<Vec<CoefRecord>, &'static str>;

struct RepOutcome {
    solved: bool,
    estimators: Vec<EstimatorOutcome>,
}

fn failure_kind(e: &Error) -> &'static str {
    match e {
        Error::Relevance { .. } => "relevance",
        Error::SingularDesign { .. } => "singular_design",
        Error::EmptySample(_) => "empty_sample",
        Error::NonConvergence { .. } => "non_convergence",
        _ => "other",
    }
}

fn records(res: &EstimateResult, coeffs: &PeerCoefficients, spec: &EstimatorSpec, dbar: usize) -> Result<Vec<CoefRecord>> {
    let mut out = Vec::new();
    let (theta_true, misfit) = if spec.restriction == RestrictionKind::Saturated {
        (coeffs.beta.clone(), 0.0)
    } else {
        let r = build_restriction(spec.restriction, dbar)?;
        r.project(&coeffs.beta, |d| res.n_used.get(&d).is_some_and(|&c| c > 0))
    };
    for (k, name) in res.param_names.iter().enumerate() {
        out.push(CoefRecord {
            name: name.clone(),
            estimate: res.theta[k],
            se: res.theta_se[k],
            truth: theta_true[k],
            misspecified: misfit > 1e-9,
            r2: res.first_stage_r2[k],
        });
    }
    let l = coeffs.gamma.len();
    for (g, name) in res.gamma_names.iter().enumerate() {
        out.push(CoefRecord {
            name: name.clone(),
            estimate: res.gamma_hat[g],
            se: res.gamma_se[g],
            truth: coeffs.gamma[g % l],
            misspecified: false,
            r2: f64::NAN,
        });
    }
    Ok(out)
}

fn run_rep(cfg: &SimConfig, rep: usize, fixed: &Network, fixed_coeffs: &PeerCoefficients) -> Result<RepOutcome> {
    let net = cfg.rep_network(rep, fixed)?;
    let dbar = cfg.dbar.unwrap_or(net.max_degree()).max(1);
    let coeffs = match cfg.network_mode {
        NetworkMode::Fixed => fixed_coeffs.clone(),
        NetworkMode::Redraw => cfg.truth.coefficients(dbar, &cfg.gamma)?,
    };
    let n = net.n();
    let (x, eps) = cfg.draw_data(rep, n);
    let intrinsic = intrinsic_vector(&x, &coeffs.gamma, &eps)?;
    let tie = TieRule::default();
    let sol = match solve_fixed_point(&net, &coeffs, &intrinsic, tie, &SolverOptions::default()) {
        Ok(s) => s,
        Err(Error::NonConvergence { .. }) => {
            return Ok(RepOutcome {
                solved: false,
                estimators: vec![Err("non_convergence"); cfg.estimators.len()],
            })
        }
        Err(e) => return Err(e),
    };
    let source: Vec<f64> = x.column(1).iter().copied().collect();
    let design = build_design(&net, &sol.y, &x, &source, tie, dbar)?;
    let mut estimators = Vec::with_capacity(cfg.estimators.len());
    for spec in &cfg.estimators {
        let restriction = match spec.restriction {
            RestrictionKind::Saturated => None,
            kind => Some(build_restriction(kind, dbar)?),
        };
        let opts = EstimationOptions {
            mode: spec.mode,
            restriction,
            min_degree: spec.min_degree,
            instruments: spec.instruments,
            vcov: spec.vcov,
        };
        estimators.push(match estimate(&design, spec.method, &opts) {
            Ok(res) => Ok(records(&res, &coeffs, spec, dbar)?),
            Err(e) => Err(failure_kind(&e)),
        });
    }
    Ok(RepOutcome {
        solved: true,
        estimators,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefSummary {
    pub name: String,
    /// Average truth over the replications that estimated this coefficient.
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub mse: f64,
    /// Share of replications whose 95% interval covers the truth.
    pub coverage95: f64,
    pub mean_se: f64,
    /// Replications with a finite estimate.
    pub n: usize,
    /// Truth is a projection onto a restriction that does not hold exactly.
    pub misspecified: bool,
    pub first_stage_r2_mean: Option<f64>,
    pub first_stage_r2_ge_07: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub method: Method,
    pub mode: Mode,
    pub restriction: RestrictionKind,
    pub successes: usize,
    pub failures: BTreeMap<String, usize>,
    pub coefficients: Vec<CoefSummary>,
}

impl EstimatorSummary {
    pub fn coef(&self, name: &str) -> Option<&CoefSummary> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NetworkSummary {
    pub nodes: usize,
    pub edges: usize,
    pub mean_degree: f64,
    pub max_degree: usize,
    pub degree_histogram: BTreeMap<usize, usize>,
}

impl NetworkSummary {
    pub fn of(net: &Network) -> Self {
        NetworkSummary {
            nodes: net.n(),
            edges: net.edge_count(),
            mean_degree: net.edge_count() as f64 / net.n() as f64,
            max_degree: net.max_degree(),
            degree_histogram: degree_histogram(net),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    pub config: SimConfig,
    /// Network of replication 0.
    pub network: NetworkSummary,
    pub solver_failures: usize,
    pub estimators: Vec<EstimatorSummary>,
}

impl SimSummary {
    pub fn estimator(&self, label: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.label == label)
    }
}

#[derive(Default)]
struct CoefAcc {
    n: usize,
    sum_est: f64,
    sum_err: f64,
    sum_sq: f64,
    sum_truth: f64,
    sum_se: f64,
    covered: usize,
    misspecified: bool,
    r2_n: usize,
    r2_sum: f64,
    r2_hi: usize,
}

impl CoefAcc {
    fn push(&mut self, r: &CoefRecord) {
        if !r.estimate.is_finite() {
            return;
        }
        let err = r.estimate - r.truth;
        self.n += 1;
        self.sum_est += r.estimate;
        self.sum_err += err;
        self.sum_sq += err * err;
        self.sum_truth += r.truth;
        self.sum_se += r.se;
        if err.abs() <= 1.959_963_984_540_054 * r.se {
            self.covered += 1;
        }
        self.misspecified |= r.misspecified;
        if r.r2.is_finite() {
            self.r2_n += 1;
            self.r2_sum += r.r2;
            if r.r2 >= 0.7 {
                self.r2_hi += 1;
            }
        }
    }

    fn finish(&self, name: String) -> CoefSummary {
        let n = self.n as f64;
        let avg = |s: f64| if self.n > 0 { s / n } else { f64::NAN };
        let r2n = self.r2_n as f64;
        CoefSummary {
            name,
            truth: avg(self.sum_truth),
            mean: avg(self.sum_est),
            bias: avg(self.sum_err),
            mse: avg(self.sum_sq),
            coverage95: avg(self.covered as f64),
            mean_se: avg(self.sum_se),
            n: self.n,
            misspecified: self.misspecified,
            first_stage_r2_mean: (self.r2_n > 0).then(|| self.r2_sum / r2n),
            first_stage_r2_ge_07: (self.r2_n > 0).then(|| self.r2_hi as f64 / r2n),
        }
    }
}

/// Run every replication and summarize each estimator. The summary is a
/// function of the configuration alone, whatever the thread count.
pub fn run_mc(config: &SimConfig, threads: Threads) -> Result<SimSummary> {
    config.validate()?;
    let fixed = config.draw_network(0)?;
    let dbar0 = config.dbar.unwrap_or(fixed.max_degree()).max(1);
    let fixed_coeffs = config.truth.coefficients(dbar0, &config.gamma)?;
    if fixed_coeffs.beta.len() != tri_len(dbar0) {
        return Err(Error::Config("truth does not match the network's maximum degree".into()));
    }
    let outcomes: Vec<Result<RepOutcome>> =
        map_indexed(config.reps, threads, |rep| run_rep(config, rep, &fixed, &fixed_coeffs));

    let mut solver_failures = 0;
    let k = config.estimators.len();
    let mut successes = vec![0usize; k];
    let mut failures: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); k];
    let mut accs: Vec<Vec<(String, CoefAcc)>> = (0..k).map(|_| Vec::new()).collect();
    let mut index: Vec<HashMap<String, usize>> = vec![HashMap::new(); k];
    for outcome in outcomes {
        let outcome = outcome?;
        if !outcome.solved {
            solver_failures += 1;
        }
        for (e, res) in outcome.estimators.iter().enumerate() {
            match res {
                Ok(recs) => {
                    successes[e] += 1;
                    for r in recs {
                        let pos = *index[e].entry(r.name.clone()).or_insert_with(|| {
                            accs[e].push((r.name.clone(), CoefAcc::default()));
                            accs[e].len() - 1
                        });
                        accs[e][pos].1.push(r);
                    }
                }
                Err(kind) => *failures[e].entry((*kind).to_string()).or_insert(0) += 1,
            }
        }
    }
    let estimators = config
        .estimators
        .iter()
        .enumerate()
        .map(|(e, spec)| EstimatorSummary {
            label: spec.label.clone(),
            method: spec.method,
            mode: spec.mode,
            restriction: spec.restriction,
            successes: successes[e],
            failures: failures[e].clone(),
            coefficients: accs[e].iter().map(|(name, acc)| acc.finish(name.clone())).collect(),
        })
        .collect();
    Ok(SimSummary {
        config: config.clone(),
        network: NetworkSummary::of(&fixed),
        solver_failures,
        estimators,
    })
}
