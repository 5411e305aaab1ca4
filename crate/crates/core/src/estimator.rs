//! Stacked designs, OLS and TSLS for rank-dependent peer effects.
//!
//! All estimators run through one instrumental-variables engine. Regressors
//! are the endogenous peer block (optionally mapped through a restriction)
//! followed by the covariates; in stratified mode the covariates are
//! interacted with degree indicators, which makes the joint fit identical to
//! separate per-degree fits whenever the peer parameters do not cross strata.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;
use crate::model::{beta_name, block_offset, tri_len, tri_pairs, Restriction, TieRule};

/// Row-aligned estimation inputs. Row `i` is node `i`.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub y: Vec<f64>,
    /// Endogenous peer columns: ordered outcomes in the triangular layout, or aggregates.
    pub peer: DMatrix<f64>,
    pub peer_names: Vec<String>,
    /// Degree stratum a peer column lives in; `None` for columns spanning degrees.
    pub peer_degree: Vec<Option<usize>>,
    /// Excluded instruments, one per peer column and built the same way.
    pub instr: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub degrees: Vec<usize>,
    pub dbar: usize,
    /// Whether `peer` follows the triangular `beta[k, d]` layout.
    pub layout: bool,
    /// Nodes that cannot enter the sample (aggregator not defined).
    pub excluded: Vec<usize>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// `[peer | x]`
    pub fn w(&self) -> DMatrix<f64> {
        hcat(&self.peer, &self.x)
    }

    /// `[instr | x]`
    pub fn z(&self) -> DMatrix<f64> {
        hcat(&self.instr, &self.x)
    }

    pub fn with_instruments(mut self, instr: DMatrix<f64>) -> Result<Self> {
        if instr.nrows() != self.n() || instr.ncols() != self.peer.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "instrument block is {}x{}, expected {}x{}",
                instr.nrows(),
                instr.ncols(),
                self.n(),
                self.peer.ncols()
            )));
        }
        self.instr = instr;
        Ok(self)
    }
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

fn default_x_names(l: usize) -> Vec<String> {
    (0..l).map(|j| format!("gamma_{j}")).collect()
}

fn check_rows(net: &Network, y: &[f64], x: &DMatrix<f64>, dbar: usize) -> Result<()> {
    let n = net.n();
    if y.len() != n || x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} nodes but y has {} entries and x has {} rows",
            y.len(),
            x.nrows()
        )));
    }
    for i in 0..n {
        if net.degree(i) > dbar {
            return Err(Error::DegreeOverflow {
                node: i,
                degree: net.degree(i),
                dbar,
            });
        }
    }
    Ok(())
}

fn sorted_values(net: &Network, v: &[f64], i: usize, tie: TieRule) -> Vec<f64> {
    let mut p = net.peers(i).to_vec();
    p.sort_by(|&a, &b| tie.compare(v, a, b));
    p.into_iter().map(|j| v[j]).collect()
}

/// Triangular block of ordered values: row `i` holds the sorted `v` of its
/// peers in the degree-`d_i` block and zeros elsewhere.
fn ordered_block(net: &Network, v: &[f64], tie: TieRule, dbar: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(net.n(), tri_len(dbar));
    for i in 0..net.n() {
        let off = block_offset(net.degree(i));
        for (k, val) in sorted_values(net, v, i, tie).into_iter().enumerate() {
            m[(i, off + k)] = val;
        }
    }
    m
}

/// Design with ordered peer outcomes as regressors; the instrument block is
/// empty until [`DesignMatrices::with_instruments`] is called.
pub fn build_w(
    net: &Network,
    y: &[f64],
    x: &DMatrix<f64>,
    tie: TieRule,
    dbar: usize,
) -> Result<DesignMatrices> {
    check_rows(net, y, x, dbar)?;
    Ok(DesignMatrices {
        y: y.to_vec(),
        peer: ordered_block(net, y, tie, dbar),
        peer_names: tri_pairs(dbar).map(|(k, d)| beta_name(k, d)).collect(),
        peer_degree: tri_pairs(dbar).map(|(_, d)| Some(d)).collect(),
        instr: DMatrix::zeros(net.n(), 0),
        x: x.clone(),
        x_names: default_x_names(x.ncols()),
        degrees: net.out_degrees(),
        dbar,
        layout: true,
        excluded: Vec::new(),
    })
}

/// Ordered peer values of an exogenous covariate, in the triangular layout.
pub fn build_instruments_ordered_covariates(
    net: &Network,
    source: &[f64],
    tie: TieRule,
    dbar: usize,
) -> Result<DMatrix<f64>> {
    if source.len() != net.n() {
        return Err(Error::DimensionMismatch(format!(
            "instrument source has {} entries for {} nodes",
            source.len(),
            net.n()
        )));
    }
    if net.max_degree() > dbar {
        let node = (0..net.n()).find(|&i| net.degree(i) > dbar).unwrap_or(0);
        return Err(Error::DegreeOverflow {
            node,
            degree: net.degree(node),
            dbar,
        });
    }
    Ok(ordered_block(net, source, tie, dbar))
}

/// [`build_w`] plus ordered-covariate instruments.
pub fn build_design(
    net: &Network,
    y: &[f64],
    x: &DMatrix<f64>,
    source: &[f64],
    tie: TieRule,
    dbar: usize,
) -> Result<DesignMatrices> {
    let instr = build_instruments_ordered_covariates(net, source, tie, dbar)?;
    build_w(net, y, x, tie, dbar)?.with_instruments(instr)
}

/// Summary of the ordered peer values used as one regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Mean of all peers.
    LimBar,
    /// Mean without the lowest peer.
    BarMinusLow,
    /// Mean without the highest peer.
    BarMinusHigh,
    /// Mean without the lowest and highest peers.
    BarMinusBoth,
    /// Lowest peer.
    MinOnly,
    /// Highest peer.
    MaxOnly,
}

impl Aggregator {
    pub fn min_degree(self) -> usize {
        match self {
            Aggregator::LimBar | Aggregator::MinOnly | Aggregator::MaxOnly => 1,
            Aggregator::BarMinusLow | Aggregator::BarMinusHigh => 2,
            Aggregator::BarMinusBoth => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::LimBar => "lim_bar",
            Aggregator::BarMinusLow => "bar_minus_low",
            Aggregator::BarMinusHigh => "bar_minus_high",
            Aggregator::BarMinusBoth => "bar_minus_both",
            Aggregator::MinOnly => "min_only",
            Aggregator::MaxOnly => "max_only",
        }
    }

    /// Value on ascending `sorted`; `None` when too few peers.
    pub fn apply(self, sorted: &[f64]) -> Option<f64> {
        let d = sorted.len();
        if d < self.min_degree() {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some(match self {
            Aggregator::LimBar => mean(sorted),
            Aggregator::BarMinusLow => mean(&sorted[1..]),
            Aggregator::BarMinusHigh => mean(&sorted[..d - 1]),
            Aggregator::BarMinusBoth => mean(&sorted[1..d - 1]),
            Aggregator::MinOnly => sorted[0],
            Aggregator::MaxOnly => sorted[d - 1],
        })
    }
}

/// Design whose regressors are the given aggregates of peer outcomes, each
/// instrumented by the same aggregate of the peers' instrument covariate.
/// Nodes where some aggregate is undefined are excluded.
pub fn build_aggregator_spec(
    net: &Network,
    y: &[f64],
    x: &DMatrix<f64>,
    source: &[f64],
    tie: TieRule,
    spec: &[Aggregator],
) -> Result<DesignMatrices> {
    if spec.is_empty() {
        return Err(Error::Config("aggregator spec is empty".into()));
    }
    let dbar = net.max_degree();
    check_rows(net, y, x, dbar)?;
    if source.len() != net.n() {
        return Err(Error::DimensionMismatch(format!(
            "instrument source has {} entries for {} nodes",
            source.len(),
            net.n()
        )));
    }
    let n = net.n();
    let a = spec.len();
    let mut peer = DMatrix::zeros(n, a);
    let mut instr = DMatrix::zeros(n, a);
    let mut excluded = Vec::new();
    for i in 0..n {
        let sy = sorted_values(net, y, i, tie);
        let sz = sorted_values(net, source, i, tie);
        let vals: Option<Vec<(f64, f64)>> = spec
            .iter()
            .map(|g| Some((g.apply(&sy)?, g.apply(&sz)?)))
            .collect();
        match vals {
            Some(v) => {
                for (c, (wy, wz)) in v.into_iter().enumerate() {
                    peer[(i, c)] = wy;
                    instr[(i, c)] = wz;
                }
            }
            None => excluded.push(i),
        }
    }
    if excluded.len() == n {
        return Err(Error::EmptySample(format!(
            "no node has enough peers for {}",
            spec.iter().map(|g| g.name()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(DesignMatrices {
        y: y.to_vec(),
        peer,
        peer_names: spec.iter().map(|g| g.name().to_string()).collect(),
        peer_degree: vec![None; a],
        instr,
        x: x.clone(),
        x_names: default_x_names(x.ncols()),
        degrees: net.out_degrees(),
        dbar,
        layout: false,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ols,
    Tsls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pooled,
    #[default]
    Stratified,
}

/// Which excluded instruments enter the first stage under a restriction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentSet {
    /// Every instrument column.
    #[default]
    Full,
    /// Instruments combined through the restriction matrix, like the regressors.
    Restricted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VcovKind {
    #[default]
    Hc0,
    Homoskedastic,
}

#[derive(Debug, Clone, Default)]
pub struct EstimationOptions {
    pub mode: Mode,
    /// Restriction on the peer block; `None` estimates every column freely.
    pub restriction: Option<Restriction>,
    pub min_degree: usize,
    pub instruments: InstrumentSet,
    pub vcov: VcovKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumDiagnostics {
    pub degree: usize,
    pub n: usize,
    pub min_singular: f64,
    pub condition_number: f64,
    pub rank: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub method: Method,
    pub mode: Mode,
    /// Peer parameters (restricted `theta`, or the free peer columns).
    pub param_names: Vec<String>,
    pub theta: Vec<f64>,
    pub theta_se: Vec<f64>,
    /// `R theta` in the triangular layout, for layout designs.
    pub beta_names: Vec<String>,
    pub beta_hat: Vec<f64>,
    pub beta_se: Vec<f64>,
    /// Covariate coefficients; stratified names carry a `[d=..]` suffix.
    pub gamma_names: Vec<String>,
    pub gamma_hat: Vec<f64>,
    pub gamma_se: Vec<f64>,
    /// Covariance of `(theta, gamma)`; NaN rows for parameters not estimated.
    pub vcov: DMatrix<f64>,
    /// First-stage R² per peer parameter (NaN for OLS or not estimated).
    pub first_stage_r2: Vec<f64>,
    pub diagnostics: Vec<StratumDiagnostics>,
    pub n_used: BTreeMap<usize, usize>,
    pub skipped_strata: Vec<usize>,
    pub excluded_nodes: Vec<usize>,
    pub n_obs: usize,
}

impl EstimateResult {
    /// Estimate and standard error by name, searching peer parameters,
    /// expanded coefficients and covariates in that order.
    pub fn coef(&self, name: &str) -> Option<(f64, f64)> {
        let find = |names: &[String], v: &[f64], s: &[f64]| {
            names.iter().position(|n| n == name).map(|p| (v[p], s[p]))
        };
        find(&self.param_names, &self.theta, &self.theta_se)
            .or_else(|| find(&self.beta_names, &self.beta_hat, &self.beta_se))
            .or_else(|| find(&self.gamma_names, &self.gamma_hat, &self.gamma_se))
    }

    pub fn se(&self) -> Vec<f64> {
        self.vcov.diagonal().iter().map(|v| v.sqrt()).collect()
    }
}

/// Smallest and largest singular value and numerical rank (relative 1e-10).
fn sv_summary(m: &DMatrix<f64>) -> (f64, f64, usize) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0.0, 0.0, 0);
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = if m.nrows() < m.ncols() { 0.0 } else { sv.min() };
    let rank = sv.iter().filter(|&&s| s > 1e-10 * max).count();
    (min, max, rank)
}

/// Per-degree relevance check on `Q_d = sum_{d_i = d} (z_i; x_i)(w_i; x_i)'`.
pub fn relevance_diagnostics(design: &DesignMatrices) -> Vec<StratumDiagnostics> {
    relevance_on_rows(design, &usable_rows(design, 0))
}

fn relevance_on_rows(design: &DesignMatrices, rows: &[usize]) -> Vec<StratumDiagnostics> {
    let l = design.x.ncols();
    (1..=design.dbar)
        .map(|d| {
            let sub: Vec<usize> = rows.iter().copied().filter(|&i| design.degrees[i] == d).collect();
            let cols: Vec<usize> = if design.layout {
                (block_offset(d)..block_offset(d) + d).collect()
            } else {
                (0..design.peer.ncols()).collect()
            };
            let dim = cols.len() + l;
            if sub.is_empty() {
                return StratumDiagnostics {
                    degree: d,
                    n: 0,
                    min_singular: 0.0,
                    condition_number: f64::INFINITY,
                    rank: 0,
                    dim,
                };
            }
            let mut q = DMatrix::<f64>::zeros(dim, dim);
            let mut zi = DVector::zeros(dim);
            let mut wi = DVector::zeros(dim);
            for &i in &sub {
                for (a, &c) in cols.iter().enumerate() {
                    zi[a] = design.instr[(i, c)];
                    wi[a] = design.peer[(i, c)];
                }
                for j in 0..l {
                    zi[cols.len() + j] = design.x[(i, j)];
                    wi[cols.len() + j] = design.x[(i, j)];
                }
                q.ger(1.0, &zi, &wi, 1.0);
            }
            let (min, max, rank) = sv_summary(&q);
            StratumDiagnostics {
                degree: d,
                n: sub.len(),
                min_singular: min,
                condition_number: if min > 0.0 { max / min } else { f64::INFINITY },
                rank,
                dim,
            }
        })
        .collect()
}

fn usable_rows(design: &DesignMatrices, min_degree: usize) -> Vec<usize> {
    let excluded: BTreeSet<usize> = design.excluded.iter().copied().collect();
    (0..design.n())
        .filter(|&i| !excluded.contains(&i) && design.degrees[i] >= min_degree)
        .collect()
}

fn is_zero_col(m: &DMatrix<f64>, c: usize) -> bool {
    m.column(c).iter().all(|&v| v == 0.0)
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |r, c| m[(rows[r], c)])
}

fn select_cols(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |r, c| m[(r, cols[c])])
}

enum FitFailure {
    Instruments(f64),
    Regressors(f64),
}

struct Fit {
    coef: DVector<f64>,
    vcov: DMatrix<f64>,
}

fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

fn scale_columns(m: &DMatrix<f64>, norms: &[f64]) -> DMatrix<f64> {
    let mut s = m.clone();
    for (c, &nrm) in norms.iter().enumerate() {
        if nrm > 0.0 {
            s.column_mut(c).scale_mut(1.0 / nrm);
        }
    }
    s
}

const REL_RANK_TOL: f64 = 1e-9;

/// Generic IV fit; `z == None` means the regressors instrument themselves.
fn iv_fit(
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    z: Option<&DMatrix<f64>>,
    kind: VcovKind,
) -> Result<Fit, FitFailure> {
    let wn = column_norms(w);
    let ws = scale_columns(w, &wn);
    let what = match z {
        Some(z) => {
            let zs = scale_columns(z, &column_norms(z));
            let (min, max, _) = sv_summary(&zs);
            if !(min > REL_RANK_TOL * max) {
                return Err(FitFailure::Instruments(min));
            }
            let g = zs.transpose() * &zs;
            let chol = g.cholesky().ok_or(FitFailure::Instruments(min))?;
            &zs * chol.solve(&(zs.transpose() * &ws))
        }
        None => ws.clone(),
    };
    let (min, max, _) = sv_summary(&what);
    if !(min > REL_RANK_TOL * max) {
        return Err(FitFailure::Regressors(min));
    }
    let a = what.transpose() * &what;
    let a_inv = a
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| a.try_inverse())
        .ok_or(FitFailure::Regressors(min))?;
    let coef_s = &a_inv * (what.transpose() * y);
    let resid = y - &ws * &coef_s;
    let vs = match kind {
        VcovKind::Hc0 => {
            let mut scaled = what.clone();
            for (r, e) in resid.iter().enumerate() {
                scaled.row_mut(r).scale_mut(*e);
            }
            let meat = scaled.transpose() * &scaled;
            &a_inv * meat * &a_inv
        }
        VcovKind::Homoskedastic => {
            let dof = (y.len() as f64 - w.ncols() as f64).max(1.0);
            &a_inv * (resid.norm_squared() / dof)
        }
    };
    let k = w.ncols();
    let coef = DVector::from_fn(k, |c, _| coef_s[c] / wn[c]);
    let mut vcov = DMatrix::from_fn(k, k, |r, c| vs[(r, c)] / (wn[r] * wn[c]));
    vcov = (&vcov + vcov.transpose()) * 0.5;
    Ok(Fit { coef, vcov })
}

/// Everything the engine needs after rows, strata and columns are settled.
struct Prepared {
    rows: Vec<usize>,
    strata: Vec<usize>,
    skipped: Vec<usize>,
    r: DMatrix<f64>,
    param_names: Vec<String>,
    /// Restricted endogenous columns on kept rows, all parameters.
    endog: DMatrix<f64>,
    kept_params: Vec<usize>,
    instr: DMatrix<f64>,
    cov: DMatrix<f64>,
    cov_names: Vec<String>,
    y: DVector<f64>,
}

fn restriction_matrix(design: &DesignMatrices, opts: &EstimationOptions) -> Result<(DMatrix<f64>, Vec<String>)> {
    let t = design.peer.ncols();
    match &opts.restriction {
        None => Ok((DMatrix::identity(t, t), design.peer_names.clone())),
        Some(r) => {
            if !design.layout {
                return Err(Error::Config(
                    "restrictions apply to ordered-outcome designs, not aggregator designs".into(),
                ));
            }
            if r.matrix.nrows() != t {
                return Err(Error::DimensionMismatch(format!(
                    "restriction has {} rows but the design has {t} peer columns",
                    r.matrix.nrows()
                )));
            }
            Ok((r.matrix.clone(), r.param_names.clone()))
        }
    }
}

fn prepare(design: &DesignMatrices, method: Method, opts: &EstimationOptions) -> Result<Prepared> {
    let (r, param_names) = restriction_matrix(design, opts)?;
    if method == Method::Tsls && design.instr.ncols() != design.peer.ncols() {
        return Err(Error::Config("design has no instrument block".into()));
    }
    let l = design.x.ncols();
    let mut rows = usable_rows(design, opts.min_degree);
    let full_endog = &design.peer * &r;
    let mut skipped = Vec::new();
    let strata: Vec<usize>;
    match opts.mode {
        Mode::Pooled => {
            strata = rows.iter().map(|&i| design.degrees[i]).collect::<BTreeSet<_>>().into_iter().collect();
        }
        Mode::Stratified => {
            let mut by_degree: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &rows {
                by_degree.entry(design.degrees[i]).or_default().push(i);
            }
            let mut keep = Vec::new();
            let mut kept_strata = Vec::new();
            for (d, members) in by_degree {
                let touched = (0..full_endog.ncols())
                    .filter(|&c| members.iter().any(|&i| full_endog[(i, c)] != 0.0))
                    .count();
                if members.len() < l + touched {
                    log::debug!(
                        "skipping stratum d={d}: {} rows for {} parameters",
                        members.len(),
                        l + touched
                    );
                    skipped.push(d);
                } else {
                    keep.extend(members);
                    kept_strata.push(d);
                }
            }
            keep.sort_unstable();
            rows = keep;
            strata = kept_strata;
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptySample(format!(
            "no usable rows with degree >= {}",
            opts.min_degree
        )));
    }
    let endog = select_rows(&full_endog, &rows);
    let kept_params: Vec<usize> = (0..endog.ncols()).filter(|&c| !is_zero_col(&endog, c)).collect();
    let instr = match (method, opts.instruments) {
        (Method::Ols, _) => DMatrix::zeros(rows.len(), 0),
        (Method::Tsls, InstrumentSet::Full) => select_rows(&design.instr, &rows),
        (Method::Tsls, InstrumentSet::Restricted) => select_rows(&(&design.instr * &r), &rows),
    };
    let nz: Vec<usize> = (0..instr.ncols()).filter(|&c| !is_zero_col(&instr, c)).collect();
    let instr = select_cols(&instr, &nz);
    let xr = select_rows(&design.x, &rows);
    let (cov, cov_names) = match opts.mode {
        Mode::Pooled => (xr, design.x_names.clone()),
        Mode::Stratified => {
            let mut cols = Vec::new();
            let mut names = Vec::new();
            for &d in &strata {
                for j in 0..l {
                    cols.push(DVector::from_fn(rows.len(), |r, _| {
                        if design.degrees[rows[r]] == d {
                            xr[(r, j)]
                        } else {
                            0.0
                        }
                    }));
                    names.push(format!("{}[d={d}]", design.x_names[j]));
                }
            }
            (DMatrix::from_columns(&cols), names)
        }
    };
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| design.y[i]));
    Ok(Prepared {
        rows,
        strata,
        skipped,
        r,
        param_names,
        endog,
        kept_params,
        instr,
        cov,
        cov_names,
        y,
    })
}

/// Centered R² of every kept endogenous column on the instruments, over the
/// rows whose degree the column can be nonzero on.
fn first_stage(design: &DesignMatrices, p: &Prepared) -> Vec<f64> {
    let z = hcat(&p.instr, &p.cov);
    (0..p.endog.ncols())
        .map(|c| {
            if !p.kept_params.contains(&c) {
                return f64::NAN;
            }
            let mut spans_all = false;
            let mut support = BTreeSet::new();
            for t in 0..p.r.nrows() {
                if p.r[(t, c)] != 0.0 {
                    match design.peer_degree[t] {
                        Some(d) => {
                            support.insert(d);
                        }
                        None => spans_all = true,
                    }
                }
            }
            let active: Vec<usize> = (0..p.rows.len())
                .filter(|&r| spans_all || support.contains(&design.degrees[p.rows[r]]))
                .collect();
            let zs = select_rows(&z, &active);
            let nz: Vec<usize> = (0..zs.ncols()).filter(|&k| !is_zero_col(&zs, k)).collect();
            let zs = select_cols(&zs, &nz);
            let v = DVector::from_iterator(active.len(), active.iter().map(|&r| p.endog[(r, c)]));
            r_squared(&v, &zs)
        })
        .collect()
}

fn r_squared(v: &DVector<f64>, z: &DMatrix<f64>) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    let mean = v.mean();
    let sst: f64 = v.iter().map(|a| (a - mean).powi(2)).sum();
    if sst == 0.0 {
        return f64::NAN;
    }
    if z.ncols() == 0 {
        return 0.0;
    }
    let svd = z.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let Ok(coef) = svd.solve(v, tol) else {
        return f64::NAN;
    };
    let ssr = (v - z * coef).norm_squared();
    1.0 - ssr / sst
}

/// Stratum responsible for a rank failure, if one can be isolated.
fn blame_stratum(design: &DesignMatrices, p: &Prepared, regressors: &DMatrix<f64>) -> Option<usize> {
    p.strata.iter().copied().find(|&d| {
        let rows: Vec<usize> = (0..p.rows.len()).filter(|&r| design.degrees[p.rows[r]] == d).collect();
        let sub = select_rows(regressors, &rows);
        let cols: Vec<usize> = (0..sub.ncols()).filter(|&c| !is_zero_col(&sub, c)).collect();
        let sub = scale_columns(&select_cols(&sub, &cols), &column_norms(&select_cols(&sub, &cols)));
        let (min, max, _) = sv_summary(&sub);
        !(min > REL_RANK_TOL * max) || rows.len() < cols.len()
    })
}

pub fn estimate(design: &DesignMatrices, method: Method, opts: &EstimationOptions) -> Result<EstimateResult> {
    let p = prepare(design, method, opts)?;
    let endog_kept = select_cols(&p.endog, &p.kept_params);
    let regressors = hcat(&endog_kept, &p.cov);
    let k = regressors.ncols();
    if p.rows.len() < k {
        return Err(Error::SingularDesign {
            stratum: None,
            detail: format!("{} rows for {k} parameters", p.rows.len()),
        });
    }
    let instruments = match method {
        Method::Ols => None,
        Method::Tsls => {
            let z = hcat(&p.instr, &p.cov);
            if z.ncols() < k {
                return Err(Error::Relevance {
                    stratum: None,
                    min_singular: 0.0,
                    detail: format!("{} instruments for {k} regressors", z.ncols()),
                });
            }
            Some(z)
        }
    };
    let fit = iv_fit(&p.y, &regressors, instruments.as_ref(), opts.vcov).map_err(|f| match (method, f) {
        (Method::Ols, FitFailure::Regressors(min) | FitFailure::Instruments(min)) => Error::SingularDesign {
            stratum: blame_stratum(design, &p, &regressors),
            detail: format!("regressors are collinear (min singular value {min:e})"),
        },
        (Method::Tsls, FitFailure::Instruments(min)) => Error::Relevance {
            stratum: instruments.as_ref().and_then(|z| blame_stratum(design, &p, z)),
            min_singular: min,
            detail: "instruments are collinear".into(),
        },
        (Method::Tsls, FitFailure::Regressors(min)) => Error::Relevance {
            stratum: None,
            min_singular: min,
            detail: "projected regressors are rank deficient".into(),
        },
    })?;

    let np = p.endog.ncols();
    let ng = p.cov.ncols();
    // Map fitted positions back to (theta, gamma) positions.
    let pos: Vec<usize> = p.kept_params.iter().copied().chain((0..ng).map(|g| np + g)).collect();
    let mut coef = vec![f64::NAN; np + ng];
    let mut vcov = DMatrix::from_element(np + ng, np + ng, f64::NAN);
    for (a, &pa) in pos.iter().enumerate() {
        coef[pa] = fit.coef[a];
        for (b, &pb) in pos.iter().enumerate() {
            vcov[(pa, pb)] = fit.vcov[(a, b)];
        }
    }
    let se: Vec<f64> = (0..np + ng).map(|c| vcov[(c, c)].sqrt()).collect();

    let (beta_names, beta_hat, beta_se) = if design.layout {
        let theta = DVector::from_column_slice(&coef[..np]);
        let vt = vcov.view((0, 0), (np, np)).into_owned();
        let bhat = &p.r * theta;
        let bv = &p.r * vt * p.r.transpose();
        (
            design.peer_names.clone(),
            bhat.iter().copied().collect(),
            bv.diagonal().iter().map(|v| v.sqrt()).collect(),
        )
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };

    let first_stage_r2 = match method {
        Method::Ols => vec![f64::NAN; np],
        Method::Tsls => first_stage(design, &p),
    };
    let diagnostics: Vec<StratumDiagnostics> = relevance_on_rows(design, &p.rows)
        .into_iter()
        .filter(|s| p.strata.contains(&s.degree))
        .collect();
    let mut n_used = BTreeMap::new();
    for &i in &p.rows {
        *n_used.entry(design.degrees[i]).or_insert(0) += 1;
    }
    Ok(EstimateResult {
        method,
        mode: opts.mode,
        param_names: p.param_names,
        theta: coef[..np].to_vec(),
        theta_se: se[..np].to_vec(),
        beta_names,
        beta_hat,
        beta_se,
        gamma_names: p.cov_names,
        gamma_hat: coef[np..].to_vec(),
        gamma_se: se[np..].to_vec(),
        vcov,
        first_stage_r2,
        diagnostics,
        n_used,
        skipped_strata: p.skipped,
        excluded_nodes: design.excluded.clone(),
        n_obs: p.rows.len(),
    })
}

pub fn ols(design: &DesignMatrices, opts: &EstimationOptions) -> Result<EstimateResult> {
    estimate(design, Method::Ols, opts)
}

pub fn tsls(design: &DesignMatrices, opts: &EstimationOptions) -> Result<EstimateResult> {
    estimate(design, Method::Tsls, opts)
}

/// First-stage R² per peer parameter, as reported by [`tsls`].
pub fn first_stage_r2(design: &DesignMatrices, opts: &EstimationOptions) -> Result<Vec<f64>> {
    let p = prepare(design, Method::Tsls, opts)?;
    Ok(first_stage(design, &p))
}
