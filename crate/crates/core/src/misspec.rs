//! Pseudo-true linear-in-means and linear-in-sums parameters under the
//! rank-dependent model, written as weighted sums of the true coefficients.
//!
//! With `r_i` the instrument residualized on the covariates, the building
//! block is `S[k, d] = sum_i E[r_i * y~_{i,k} * 1{d_i = d}]`. The expectation
//! runs over the disturbances with the network and covariates held fixed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{intrinsic_vector, solve_fixed_point, EpsSampler, SolverOptions};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Threads};
use crate::graph::Network;
use crate::model::{beta_name, check_bounded, ordered_peer_outcomes, tri_index, tri_len, tri_pairs, PeerCoefficients, TieRule};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Lim,
    Lis,
}

/// Network-based instrument built from one covariate column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumentSpec {
    /// Peer mean `G x`.
    PeerMeanX,
    /// Peer sum `A x`.
    PeerSumX,
    /// Peers-of-peers mean `G G x`.
    PeerMean2X,
}

/// Instrument columns for `specs`, built from covariate column `source_col`.
pub fn build_instruments(net: &Network, x: &DMatrix<f64>, source_col: usize, specs: &[InstrumentSpec]) -> Result<DMatrix<f64>> {
    if source_col >= x.ncols() || x.nrows() != net.n() {
        return Err(Error::DimensionMismatch(format!(
            "instrument source column {source_col} of a {}x{} covariate matrix for {} nodes",
            x.nrows(),
            x.ncols(),
            net.n()
        )));
    }
    let v = x.column(source_col).into_owned();
    let g = net.row_normalized();
    let cols: Vec<DVector<f64>> = specs
        .iter()
        .map(|s| match s {
            InstrumentSpec::PeerMeanX => &g * &v,
            InstrumentSpec::PeerSumX => net.adjacency_matrix() * &v,
            InstrumentSpec::PeerMean2X => &g * (&g * &v),
        })
        .collect();
    Ok(DMatrix::from_columns(&cols))
}

/// `z - x (x'x)^{-1} x'z`, column by column.
pub fn projection_residualizer(z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "z has {} rows, x has {}",
            z.nrows(),
            x.nrows()
        )));
    }
    if x.ncols() == 0 {
        return Ok(z.clone());
    }
    let xtx = x.transpose() * x;
    let (min, max) = {
        let sv = xtx.singular_values();
        (sv.min(), sv.max())
    };
    let chol = (min > 1e-12 * max)
        .then(|| xtx.cholesky())
        .flatten()
        .ok_or_else(|| Error::SingularDesign {
            stratum: None,
            detail: "x'x is singular".into(),
        })?;
    let coef = chol.solve(&(x.transpose() * z));
    Ok(z - x * coef)
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightDecomposition {
    pub target: Target,
    pub estimand: f64,
    /// Weights in the triangular `beta[k, d]` layout.
    pub weights: Vec<f64>,
    pub weight_names: Vec<String>,
    /// `sum_{k,d} S[k, d] beta[k, d]`
    pub numerator: f64,
    pub denominator: f64,
    pub denominator_se: f64,
    /// Zero for the sample analogue.
    pub mc_reps: usize,
    /// Delta-method standard error of the estimand; NaN for the sample analogue.
    pub mc_se: f64,
    /// Instrument weighting applied before aggregation (length 1 for a scalar instrument).
    pub instrument_weights: Vec<f64>,
    pub negative_weight_count: usize,
}

impl WeightDecomposition {
    /// `sum_{k,d} w[k, d] * beta[k, d]`, scaled by `d` for the mean target.
    pub fn reconstruct(&self, coeffs: &PeerCoefficients) -> f64 {
        tri_pairs(coeffs.dbar)
            .map(|(k, d)| {
                let scale = match self.target {
                    Target::Lim => d as f64,
                    Target::Lis => 1.0,
                };
                self.weights[tri_index(k, d)] * scale * coeffs.beta_at(k, d)
            })
            .sum()
    }
}

/// Per-draw sums for one equilibrium: `s[t][j] = sum_i r_ij y~_{i,k} 1{d_i = d}`
/// with `t` the flat `(k, d)` index, plus the outcome vector.
struct DrawMoments {
    s: DMatrix<f64>,
    y: DVector<f64>,
}

fn moments(net: &Network, r: &DMatrix<f64>, y: &[f64], dbar: usize, tie: TieRule) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(tri_len(dbar), r.ncols());
    for i in 0..net.n() {
        let d = net.degree(i);
        for (k0, v) in ordered_peer_outcomes(net, y, i, tie).into_iter().enumerate() {
            let t = tri_index(k0 + 1, d);
            for j in 0..r.ncols() {
                s[(t, j)] += r[(i, j)] * v;
            }
        }
    }
    s
}

/// Aggregation shared by the simulated and sample versions. `s_draws` holds
/// one moment matrix per draw (a single entry for the sample analogue).
fn assemble(
    net: &Network,
    coeffs: &PeerCoefficients,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    r: &DMatrix<f64>,
    target: Target,
    s_draws: &[DMatrix<f64>],
    mean_y: &DVector<f64>,
) -> Result<WeightDecomposition> {
    let dbar = coeffs.dbar;
    let t = tri_len(dbar);
    let m = r.ncols();
    // Canonical weighting of several instruments: c' = E[Y]' P' M_X Z (Z'Z)^{-1},
    // P the row-normalized (mean target) or raw (sum target) adjacency.
    let c = if m == 1 {
        DVector::from_element(1, 1.0)
    } else {
        let p = match target {
            Target::Lim => net.row_normalized(),
            Target::Lis => net.adjacency_matrix(),
        };
        let py = p * mean_y;
        let mx_py = projection_residualizer(&DMatrix::from_column_slice(py.len(), 1, py.as_slice()), x)?;
        let ztz = z.transpose() * z;
        let rhs = z.transpose() * mx_py.column(0);
        ztz.lu().solve(&rhs).ok_or_else(|| Error::Relevance {
            stratum: None,
            min_singular: 0.0,
            detail: "instrument cross-product is singular".into(),
        })?
    };
    let scale = |d: usize| match target {
        Target::Lim => 1.0 / d as f64,
        Target::Lis => 1.0,
    };
    let pairs: Vec<(usize, usize)> = tri_pairs(dbar).collect();
    // Per-draw numerator and denominator after weighting.
    let per_draw: Vec<(f64, f64)> = s_draws
        .iter()
        .map(|s| {
            let sc = s * &c;
            let num: f64 = pairs.iter().enumerate().map(|(i, &(k, d))| sc[i] * coeffs.beta_at(k, d)).sum();
            let den: f64 = pairs.iter().enumerate().map(|(i, &(_, d))| sc[i] * scale(d)).sum();
            (num, den)
        })
        .collect();
    let reps = s_draws.len() as f64;
    let mut s_mean = DMatrix::zeros(t, m);
    for s in s_draws {
        s_mean += s;
    }
    s_mean /= reps;
    let sc = &s_mean * &c;
    let scaled: Vec<f64> = pairs.iter().enumerate().map(|(i, &(_, d))| sc[i] * scale(d)).collect();
    let denominator: f64 = scaled.iter().sum();
    let numerator: f64 = pairs.iter().enumerate().map(|(i, &(k, d))| sc[i] * coeffs.beta_at(k, d)).sum();
    let estimand = numerator / denominator;

    let (denominator_se, mc_se) = if s_draws.len() > 1 {
        let var = |f: &dyn Fn(&(f64, f64)) -> f64| {
            let mean = per_draw.iter().map(f).sum::<f64>() / reps;
            per_draw.iter().map(|p| (f(p) - mean).powi(2)).sum::<f64>() / (reps - 1.0)
        };
        let den_se = (var(&|p| p.1) / reps).sqrt();
        let lin = var(&|p| p.0 - estimand * p.1);
        (den_se, (lin / reps).sqrt() / denominator.abs())
    } else {
        (f64::NAN, f64::NAN)
    };
    if !(denominator.abs() > 0.0) || (denominator_se.is_finite() && denominator.abs() <= 5.0 * denominator_se) {
        return Err(Error::Relevance {
            stratum: None,
            min_singular: denominator.abs(),
            detail: format!(
                "denominator {denominator:e} is not distinguishable from zero (MC standard error {denominator_se:e})"
            ),
        });
    }
    let weights: Vec<f64> = scaled.iter().map(|v| v / denominator).collect();
    Ok(WeightDecomposition {
        target,
        estimand,
        negative_weight_count: weights.iter().filter(|&&w| w < 0.0).count(),
        weights,
        weight_names: pairs.iter().map(|&(k, d)| beta_name(k, d)).collect(),
        numerator,
        denominator,
        denominator_se,
        mc_reps: if s_draws.len() > 1 { s_draws.len() } else { 0 },
        mc_se,
        instrument_weights: c.iter().copied().collect(),
    })
}

fn check_inputs(net: &Network, coeffs: &PeerCoefficients, x: &DMatrix<f64>) -> Result<()> {
    let b = check_bounded(coeffs);
    if !b.ok {
        return Err(Error::ContractionPrecondition { beta_bar: b.beta_bar });
    }
    if x.nrows() != net.n() || x.ncols() != coeffs.gamma.len() {
        return Err(Error::DimensionMismatch(format!(
            "x is {}x{} for {} nodes and {} covariate coefficients",
            x.nrows(),
            x.ncols(),
            net.n(),
            coeffs.gamma.len()
        )));
    }
    if net.max_degree() > coeffs.dbar {
        let node = (0..net.n()).find(|&i| net.degree(i) > coeffs.dbar).unwrap_or(0);
        return Err(Error::DegreeOverflow {
            node,
            degree: net.degree(node),
            dbar: coeffs.dbar,
        });
    }
    Ok(())
}

const MC_CHUNK: usize = 32;

/// Simulated decomposition with fresh disturbances per draw.
#[allow(clippy::too_many_arguments)]
pub fn decompose(
    net: &Network,
    coeffs: &PeerCoefficients,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    target: Target,
    sampler: &EpsSampler,
    reps: usize,
    rng_seed: u64,
    tie: TieRule,
    threads: Threads,
) -> Result<WeightDecomposition> {
    check_inputs(net, coeffs, x)?;
    if reps < 2 {
        return Err(Error::Config("the simulated decomposition needs at least two draws".into()));
    }
    let r = projection_residualizer(z, x)?;
    let n = net.n();
    let xg = intrinsic_vector(x, &coeffs.gamma, &vec![0.0; n])?;
    let chunks = reps.div_ceil(MC_CHUNK);
    let parts: Vec<Result<Vec<DrawMoments>>> = map_indexed(chunks, threads, |c| {
        (c * MC_CHUNK..((c + 1) * MC_CHUNK).min(reps))
            .map(|rep| {
                let mut rng = stream_rng(rng_seed, Stream::Disturbance, rep as u64);
                let eps = sampler.draw(&mut rng, n);
                let b: Vec<f64> = xg.iter().zip(&eps).map(|(a, e)| a + e).collect();
                let sol = solve_fixed_point(net, coeffs, &b, tie, &SolverOptions::default())?;
                Ok(DrawMoments {
                    s: moments(net, &r, &sol.y, coeffs.dbar, tie),
                    y: DVector::from_vec(sol.y),
                })
            })
            .collect()
    });
    let mut s_draws = Vec::with_capacity(reps);
    let mut mean_y = DVector::zeros(n);
    for part in parts {
        for dm in part? {
            mean_y += &dm.y;
            s_draws.push(dm.s);
        }
    }
    mean_y /= reps as f64;
    assemble(net, coeffs, x, z, &r, target, &s_draws, &mean_y)
}

/// Feasible analogue on one observed outcome vector: expectations are
/// replaced by the realized values.
pub fn decompose_sample(
    net: &Network,
    coeffs: &PeerCoefficients,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &[f64],
    target: Target,
    tie: TieRule,
) -> Result<WeightDecomposition> {
    check_inputs(net, coeffs, x)?;
    if y.len() != net.n() {
        return Err(Error::DimensionMismatch(format!("y has {} entries for {} nodes", y.len(), net.n())));
    }
    let r = projection_residualizer(z, x)?;
    let s = moments(net, &r, y, coeffs.dbar, tie);
    assemble(net, coeffs, x, z, &r, target, &[s], &DVector::from_column_slice(y))
}
