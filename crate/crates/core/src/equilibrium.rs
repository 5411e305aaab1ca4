//! Equilibrium of the rank-dependent model.
//!
//! The best-response map `g(y)_i = sum_k beta[k, d_i] * y~_{i,k} + intrinsic_i`
//! is a sup-norm contraction with modulus `beta_bar` whenever the peer
//! coefficients are bounded, so plain iteration from any start converges to
//! the unique equilibrium. Once the ordering of peers stops changing, the
//! solver switches to the linear system `(I - B(pi)) y = intrinsic` for that
//! ordering and keeps the result if it reproduces the ordering, which gives
//! equilibria exact to rounding.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Threads};
use crate::graph::Network;
use crate::model::{check_bounded, PeerCoefficients, TieRule};
use crate::rng::{stream_rng, Stream};

/// Permutation listing nodes from lowest to highest outcome.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Ordering(pub Vec<usize>);

impl Ordering {
    pub fn from_outcomes(y: &[f64], tie: TieRule) -> Self {
        let mut pi: Vec<usize> = (0..y.len()).collect();
        pi.sort_by(|&a, &b| tie.compare(y, a, b));
        Ordering(pi)
    }

    /// Position of every node in the ordering.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.0.len()];
        for (pos, &node) in self.0.iter().enumerate() {
            r[node] = pos;
        }
        r
    }

    pub fn is_valid(&self) -> bool {
        let n = self.0.len();
        let mut seen = vec![false; n];
        self.0
            .iter()
            .all(|&v| v < n && !std::mem::replace(&mut seen[v], true))
    }

    pub fn is_consistent_with(&self, y: &[f64], tie: TieRule) -> bool {
        *self == Ordering::from_outcomes(y, tie)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSolution {
    pub y: Vec<f64>,
    pub pi: Ordering,
    pub iterations: usize,
    /// `||y - g(y)||_inf`
    pub residual: f64,
    pub converged: bool,
    /// Whether the final step was the linear solve for a fixed ordering.
    pub polished: bool,
}

/// `x_i' gamma + eps_i` for every row of `x`.
pub fn intrinsic_vector(x: &DMatrix<f64>, gamma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x.ncols() != gamma.len() || x.nrows() != eps.len() {
        return Err(Error::DimensionMismatch(format!(
            "x is {}x{}, gamma has {} entries, eps has {}",
            x.nrows(),
            x.ncols(),
            gamma.len(),
            eps.len()
        )));
    }
    Ok((0..x.nrows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(gamma)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + eps[i]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Absolute tolerance on `||y - g(y)||_inf`; default `1e-10 * (1 + ||intrinsic||_inf)`.
    pub tol: Option<f64>,
    /// Iteration cap; default `ceil(ln(tol) / ln(beta_bar)) + 50`, at most 1e5.
    pub max_iter: Option<usize>,
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: None,
            max_iter: None,
            polish: true,
        }
    }
}

const MAX_ITER_CAP: usize = 100_000;

impl SolverOptions {
    fn resolve(&self, beta_bar: f64, intrinsic: &[f64]) -> (f64, usize) {
        let scale = 1.0 + inf_norm(intrinsic);
        let tol = self.tol.unwrap_or(1e-10 * scale);
        let max_iter = self.max_iter.unwrap_or_else(|| {
            let steps = if beta_bar > 0.0 && tol < 1.0 {
                (tol.ln() / beta_bar.ln()).ceil().max(0.0)
            } else {
                0.0
            };
            ((steps as usize).saturating_add(50)).min(MAX_ITER_CAP)
        });
        (tol, max_iter)
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_instance(net: &Network, coeffs: &PeerCoefficients, intrinsic: &[f64]) -> Result<f64> {
    if intrinsic.len() != net.n() {
        return Err(Error::DimensionMismatch(format!(
            "intrinsic vector has {} entries for {} nodes",
            intrinsic.len(),
            net.n()
        )));
    }
    for i in 0..net.n() {
        if net.degree(i) > coeffs.dbar {
            return Err(Error::DegreeOverflow {
                node: i,
                degree: net.degree(i),
                dbar: coeffs.dbar,
            });
        }
    }
    let b = check_bounded(coeffs);
    if !b.ok {
        return Err(Error::ContractionPrecondition { beta_bar: b.beta_bar });
    }
    Ok(b.beta_bar)
}

/// One application of the best-response map. Writes `g(y)` into `out` and the
/// peers of every node sorted by `y` (concatenated in node order) into `arrangement`.
fn best_response(
    net: &Network,
    coeffs: &PeerCoefficients,
    y: &[f64],
    intrinsic: &[f64],
    tie: TieRule,
    out: &mut [f64],
    arrangement: &mut Vec<usize>,
) {
    arrangement.clear();
    for i in 0..net.n() {
        let start = arrangement.len();
        arrangement.extend_from_slice(net.peers(i));
        let sorted = &mut arrangement[start..];
        sorted.sort_by(|&a, &b| tie.compare(y, a, b));
        let block = coeffs.block(sorted.len());
        out[i] = intrinsic[i] + sorted.iter().zip(block).map(|(&j, b)| b * y[j]).sum::<f64>();
    }
}

/// `B` for a given peer arrangement (see [`best_response`]).
fn b_from_arrangement(net: &Network, coeffs: &PeerCoefficients, arrangement: &[usize]) -> DMatrix<f64> {
    let n = net.n();
    let mut b = DMatrix::zeros(n, n);
    let mut pos = 0;
    for i in 0..n {
        let d = net.degree(i);
        for (&j, &beta) in arrangement[pos..pos + d].iter().zip(coeffs.block(d)) {
            b[(i, j)] = beta;
        }
        pos += d;
    }
    b
}

fn solve_linear(b: &DMatrix<f64>, intrinsic: &[f64]) -> Option<Vec<f64>> {
    let n = b.nrows();
    let a = DMatrix::identity(n, n) - b;
    a.lu()
        .solve(&DVector::from_column_slice(intrinsic))
        .map(|v| v.iter().copied().collect())
}

fn residual_of(
    net: &Network,
    coeffs: &PeerCoefficients,
    y: &[f64],
    intrinsic: &[f64],
    tie: TieRule,
) -> (f64, Vec<usize>) {
    let mut gy = vec![0.0; y.len()];
    let mut arr = Vec::new();
    best_response(net, coeffs, y, intrinsic, tie, &mut gy, &mut arr);
    let res = y.iter().zip(&gy).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    (res, arr)
}

/// Unique equilibrium by fixed-point iteration started at `intrinsic`.
pub fn solve_fixed_point(
    net: &Network,
    coeffs: &PeerCoefficients,
    intrinsic: &[f64],
    tie: TieRule,
    opts: &SolverOptions,
) -> Result<EquilibriumSolution> {
    iterate(net, coeffs, intrinsic, tie, opts, None)
}

/// Plain iteration (no polishing) that also returns every iterate `y^0, y^1, ...`.
pub fn solve_fixed_point_traced(
    net: &Network,
    coeffs: &PeerCoefficients,
    intrinsic: &[f64],
    tie: TieRule,
    opts: &SolverOptions,
) -> Result<(EquilibriumSolution, Vec<Vec<f64>>)> {
    let mut trace = Vec::new();
    let opts = SolverOptions {
        polish: false,
        ..*opts
    };
    let sol = iterate(net, coeffs, intrinsic, tie, &opts, Some(&mut trace))?;
    Ok((sol, trace))
}

fn iterate(
    net: &Network,
    coeffs: &PeerCoefficients,
    intrinsic: &[f64],
    tie: TieRule,
    opts: &SolverOptions,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<EquilibriumSolution> {
    let beta_bar = check_instance(net, coeffs, intrinsic)?;
    let (tol, max_iter) = opts.resolve(beta_bar, intrinsic);
    let n = net.n();
    let mut y = intrinsic.to_vec();
    let mut gy = vec![0.0; n];
    let mut arr = Vec::new();
    let mut prev_arr: Option<Vec<usize>> = None;
    let mut tried: Option<Vec<usize>> = None;
    let mut residual = f64::INFINITY;

    for it in 1..=max_iter {
        if let Some(t) = trace.as_deref_mut() {
            t.push(y.clone());
        }
        best_response(net, coeffs, &y, intrinsic, tie, &mut gy, &mut arr);
        residual = y.iter().zip(&gy).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if residual <= tol {
            return Ok(EquilibriumSolution {
                pi: Ordering::from_outcomes(&y, tie),
                y,
                iterations: it,
                residual,
                converged: true,
                polished: false,
            });
        }
        if opts.polish && prev_arr.as_ref() == Some(&arr) && tried.as_ref() != Some(&arr) {
            let b = b_from_arrangement(net, coeffs, &arr);
            if let Some(ys) = solve_linear(&b, intrinsic) {
                let (res, arr_s) = residual_of(net, coeffs, &ys, intrinsic, tie);
                if arr_s == arr && res <= tol {
                    return Ok(EquilibriumSolution {
                        pi: Ordering::from_outcomes(&ys, tie),
                        y: ys,
                        iterations: it,
                        residual: res,
                        converged: true,
                        polished: true,
                    });
                }
            }
            tried = Some(arr.clone());
        }
        prev_arr = Some(std::mem::take(&mut arr));
        std::mem::swap(&mut y, &mut gy);
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Peer-effect matrix for a fixed global ordering: entry `(i, j)` is
/// `beta[k, d_i]` where `k` is the rank of `j` among the peers of `i`.
pub fn build_b(net: &Network, coeffs: &PeerCoefficients, pi: &Ordering) -> DMatrix<f64> {
    let ranks = pi.ranks();
    let mut arr = Vec::with_capacity(net.edge_count());
    for i in 0..net.n() {
        let start = arr.len();
        arr.extend_from_slice(net.peers(i));
        arr[start..].sort_by_key(|&j| ranks[j]);
    }
    b_from_arrangement(net, coeffs, &arr)
}

/// Largest network size accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_MAX_N: usize = 8;

/// Enumerate every ordering, solve the linear system it implies and keep the
/// solutions that reproduce their own ordering. Exactly one must survive.
pub fn brute_force_solve(
    net: &Network,
    coeffs: &PeerCoefficients,
    intrinsic: &[f64],
    tie: TieRule,
) -> Result<EquilibriumSolution> {
    let n = net.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::TooLarge {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    if intrinsic.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "intrinsic vector has {} entries for {n} nodes",
            intrinsic.len()
        )));
    }
    if net.max_degree() > coeffs.dbar {
        return Err(Error::DegreeOverflow {
            node: (0..n).find(|&i| net.degree(i) > coeffs.dbar).unwrap_or(0),
            degree: net.max_degree(),
            dbar: coeffs.dbar,
        });
    }
    let mut found: Vec<(Ordering, Vec<f64>)> = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count = 0usize;
    loop {
        count += 1;
        let pi = Ordering(perm.clone());
        let b = build_b(net, coeffs, &pi);
        if let Some(y) = solve_linear(&b, intrinsic) {
            if y.iter().all(|v| v.is_finite()) && pi.is_consistent_with(&y, tie) {
                found.push((pi, y));
            }
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    if found.len() != 1 {
        return Err(Error::Multiplicity {
            orderings: found.into_iter().map(|(pi, _)| pi.0).collect(),
        });
    }
    let (pi, y) = found.pop().expect("one ordering");
    let (residual, _) = residual_of(net, coeffs, &y, intrinsic, tie);
    Ok(EquilibriumSolution {
        y,
        pi,
        iterations: count,
        residual,
        converged: true,
        polished: true,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Whether `I - B` is numerically nonsingular.
pub fn invertibility_check(b: &DMatrix<f64>) -> bool {
    if b.nrows() != b.ncols() {
        return false;
    }
    let n = b.nrows();
    if n == 0 {
        return true;
    }
    let a = DMatrix::identity(n, n) - b;
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    min > 1e-10 * max.max(1.0)
}

/// Distribution of the disturbances used in Monte Carlo expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsSampler {
    Normal { sd: f64 },
    Uniform { half_width: f64 },
}

impl Default for EpsSampler {
    fn default() -> Self {
        EpsSampler::Normal { sd: 1.0 }
    }
}

impl EpsSampler {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        match *self {
            EpsSampler::Normal { sd } => (0..n)
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            EpsSampler::Uniform { half_width } => (0..n)
                .map(|_| half_width * (2.0 * rng.random::<f64>() - 1.0))
                .collect(),
        }
    }
}

/// Monte Carlo estimates of the reduced-form objects: averages over draws of
/// `(I - B(pi))^{-1}` and `(I - B(pi))^{-1} eps`, and the rows belonging to
/// the k-th ranked peer of every node.
#[derive(Debug, Clone, Serialize)]
pub struct ReducedForm {
    pub theta: DMatrix<f64>,
    pub theta_se: DMatrix<f64>,
    pub eta: Vec<f64>,
    pub eta_se: Vec<f64>,
    /// `(i, k)` labels of the rows of `theta_tilde`, `k` 1-based.
    pub tilde_index: Vec<(usize, usize)>,
    pub theta_tilde: DMatrix<f64>,
    pub eta_tilde: Vec<f64>,
    pub eta_tilde_se: Vec<f64>,
    pub reps: usize,
}

struct RfAccum {
    theta: DMatrix<f64>,
    theta_sq: DMatrix<f64>,
    eta: DVector<f64>,
    eta_sq: DVector<f64>,
    theta_tilde: DMatrix<f64>,
    eta_tilde: DVector<f64>,
    eta_tilde_sq: DVector<f64>,
}

impl RfAccum {
    fn zeros(n: usize, m: usize) -> Self {
        RfAccum {
            theta: DMatrix::zeros(n, n),
            theta_sq: DMatrix::zeros(n, n),
            eta: DVector::zeros(n),
            eta_sq: DVector::zeros(n),
            theta_tilde: DMatrix::zeros(m, n),
            eta_tilde: DVector::zeros(m),
            eta_tilde_sq: DVector::zeros(m),
        }
    }

    fn add(&mut self, o: &RfAccum) {
        self.theta += &o.theta;
        self.theta_sq += &o.theta_sq;
        self.eta += &o.eta;
        self.eta_sq += &o.eta_sq;
        self.theta_tilde += &o.theta_tilde;
        self.eta_tilde += &o.eta_tilde;
        self.eta_tilde_sq += &o.eta_tilde_sq;
    }
}

const RF_CHUNK: usize = 32;

/// Reduced form with covariates `x` held fixed and fresh disturbances per draw.
#[allow(clippy::too_many_arguments)]
pub fn estimate_reduced_form(
    net: &Network,
    coeffs: &PeerCoefficients,
    x: &DMatrix<f64>,
    sampler: &EpsSampler,
    reps: usize,
    rng_seed: u64,
    tie: TieRule,
    threads: Threads,
) -> Result<ReducedForm> {
    if reps == 0 {
        return Err(Error::Config("reduced form needs at least one draw".into()));
    }
    let n = net.n();
    let zero_eps = vec![0.0; x.nrows()];
    let xg = intrinsic_vector(x, &coeffs.gamma, &zero_eps)?;
    check_instance(net, coeffs, &xg)?;
    let tilde_index: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (1..=net.degree(i)).map(move |k| (i, k)))
        .collect();
    let m = tilde_index.len();
    let chunks = reps.div_ceil(RF_CHUNK);

    let partials: Vec<Result<RfAccum>> = map_indexed(chunks, threads, |c| {
        let mut acc = RfAccum::zeros(n, m);
        for r in c * RF_CHUNK..((c + 1) * RF_CHUNK).min(reps) {
            let mut rng = stream_rng(rng_seed, Stream::Disturbance, r as u64);
            let eps = sampler.draw(&mut rng, n);
            let intrinsic: Vec<f64> = xg.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let sol = solve_fixed_point(net, coeffs, &intrinsic, tie, &SolverOptions::default())?;
            let b = build_b(net, coeffs, &sol.pi);
            let inv = (DMatrix::identity(n, n) - b)
                .try_inverse()
                .ok_or_else(|| Error::SingularDesign {
                    stratum: None,
                    detail: "I - B(pi) is singular".into(),
                })?;
            let e = DVector::from_column_slice(&eps);
            let me = &inv * &e;
            acc.theta += &inv;
            acc.theta_sq += inv.component_mul(&inv);
            acc.eta += &me;
            acc.eta_sq += me.component_mul(&me);
            let mut row = 0;
            for i in 0..n {
                let ordered = crate::model::ordered_peers(net, &sol.y, i, tie);
                for &j in &ordered {
                    let mut dst = acc.theta_tilde.row_mut(row);
                    dst += inv.row(j);
                    acc.eta_tilde[row] += me[j];
                    acc.eta_tilde_sq[row] += me[j] * me[j];
                    row += 1;
                }
            }
        }
        Ok(acc)
    });

    let mut total = RfAccum::zeros(n, m);
    for p in partials {
        total.add(&p?);
    }
    let r = reps as f64;
    let se = |sum: f64, sq: f64| {
        if reps < 2 {
            return f64::NAN;
        }
        let mean = sum / r;
        let var = ((sq / r - mean * mean) * r / (r - 1.0)).max(0.0);
        (var / r).sqrt()
    };
    let theta_se = total.theta.zip_map(&total.theta_sq, se);
    let eta_se = total.eta.iter().zip(total.eta_sq.iter()).map(|(&s, &q)| se(s, q)).collect();
    let eta_tilde_se = total
        .eta_tilde
        .iter()
        .zip(total.eta_tilde_sq.iter())
        .map(|(&s, &q)| se(s, q))
        .collect();
    Ok(ReducedForm {
        theta: total.theta / r,
        theta_se,
        eta: (total.eta / r).iter().copied().collect(),
        eta_se,
        tilde_index,
        theta_tilde: total.theta_tilde / r,
        eta_tilde: (total.eta_tilde / r).iter().copied().collect(),
        eta_tilde_se,
        reps,
    })
}
