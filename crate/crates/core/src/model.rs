//! Structural parameters of the rank-dependent peer effect model.
//!
//! The peer coefficients form a triangular array `beta[k, d]`, 1 <= k <= d <= dbar:
//! the weight on the k-th lowest peer outcome of a node with `d` peers. It is
//! stored flat in degree-major order
//!
//! ```text
//! beta_11 | beta_12 beta_22 | beta_13 beta_23 beta_33 | ...
//! ```
//!
//! and every module (design matrices, restrictions, JSON files) uses this
//! layout.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Network;

/// Length of the flat triangular layout for maximum degree `dbar`.
pub fn tri_len(dbar: usize) -> usize {
    dbar * (dbar + 1) / 2
}

/// Flat position of `beta[k, d]` (both 1-based).
pub fn tri_index(k: usize, d: usize) -> usize {
    debug_assert!(1 <= k && k <= d);
    d * (d - 1) / 2 + (k - 1)
}

/// Offset of the degree-`d` block in the flat layout.
pub fn block_offset(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

/// `(k, d)` pairs in layout order.
pub fn tri_pairs(dbar: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..=dbar).flat_map(|d| (1..=d).map(move |k| (k, d)))
}

/// Name of a flat coefficient, e.g. `beta_2_5`.
pub fn beta_name(k: usize, d: usize) -> String {
    format!("beta_{k}_{d}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerCoefficients {
    pub dbar: usize,
    pub beta: Vec<f64>,
    /// Covariate coefficients; the intercept comes first when present.
    pub gamma: Vec<f64>,
}

impl PeerCoefficients {
    pub fn new(dbar: usize, beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        let expected = tri_len(dbar);
        if beta.len() != expected {
            return Err(Error::CoefficientLayout {
                dbar,
                expected,
                got: beta.len(),
            });
        }
        Ok(PeerCoefficients { dbar, beta, gamma })
    }

    pub fn from_fn(dbar: usize, gamma: Vec<f64>, f: impl Fn(usize, usize) -> f64) -> Self {
        let beta = tri_pairs(dbar).map(|(k, d)| f(k, d)).collect();
        PeerCoefficients { dbar, beta, gamma }
    }

    pub fn zeros(dbar: usize, gamma: Vec<f64>) -> Self {
        PeerCoefficients {
            dbar,
            beta: vec![0.0; tri_len(dbar)],
            gamma,
        }
    }

    pub fn beta_at(&self, k: usize, d: usize) -> f64 {
        self.beta[tri_index(k, d)]
    }

    /// Coefficients `(beta_1d, ..., beta_dd)`; empty for `d = 0`.
    pub fn block(&self, d: usize) -> &[f64] {
        let off = block_offset(d);
        &self.beta[off..off + d]
    }

    pub fn check_bounded(&self) -> Boundedness {
        check_bounded(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Boundedness {
    /// `max_d sum_k |beta[k, d]|`
    pub beta_bar: f64,
    /// `beta_bar < 1`
    pub ok: bool,
}

pub fn check_bounded(coeffs: &PeerCoefficients) -> Boundedness {
    let beta_bar = (1..=coeffs.dbar)
        .map(|d| coeffs.block(d).iter().map(|b| b.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Boundedness {
        beta_bar,
        ok: beta_bar < 1.0,
    }
}

/// Deterministic tie-break between peers holding equal outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// Equal outcomes are ranked by ascending node index.
    #[default]
    ByIndexAscending,
}

impl TieRule {
    pub fn compare(self, y: &[f64], a: usize, b: usize) -> Ordering {
        match self {
            TieRule::ByIndexAscending => y[a].total_cmp(&y[b]).then(a.cmp(&b)),
        }
    }
}

/// Peers of `i` sorted from lowest to highest outcome.
pub fn ordered_peers(net: &Network, y: &[f64], i: usize, tie: TieRule) -> Vec<usize> {
    let mut peers = net.peers(i).to_vec();
    peers.sort_by(|&a, &b| tie.compare(y, a, b));
    peers
}

/// Ordered peer outcomes of `i`, nondecreasing.
pub fn ordered_peer_outcomes(net: &Network, y: &[f64], i: usize, tie: TieRule) -> Vec<f64> {
    ordered_peers(net, y, i, tie)
        .into_iter()
        .map(|j| y[j])
        .collect()
}

/// `sum_k ordered[k] * beta[k, len(ordered)]`.
pub fn peer_effect(coeffs: &PeerCoefficients, ordered: &[f64]) -> Result<f64> {
    let d = ordered.len();
    if d > coeffs.dbar {
        return Err(Error::DegreeOverflow {
            node: usize::MAX,
            degree: d,
            dbar: coeffs.dbar,
        });
    }
    Ok(ordered
        .iter()
        .zip(coeffs.block(d))
        .map(|(y, b)| y * b)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictionKind {
    /// Every `beta[k, d]` free.
    Saturated,
    /// `beta[k, d] = theta / d`: peer mean.
    Lim,
    /// `beta[k, d] = theta`: peer sum.
    Lis,
    /// `theta_low` on the lower `ceil(d/2)` ranks, `theta_high` above.
    MinmaxSplit,
    /// Only the best peer counts: `beta[d, d] = theta`.
    MaxOnly,
    /// `beta[k, d] = theta_1 / (d - 1)` for `k < d`, `beta[d, d] = theta_2`.
    RestrictedMaxsplit,
    /// `beta[k, d] = theta_1 / d` for `k < d`, `beta[d, d] = theta_2`.
    RestrictedMaxsplitOverD,
    /// Free `beta[1, 1]`, then lowest, highest and middle-mean roles for `d >= 2`.
    MinMaxMid,
    /// Caller-supplied matrix.
    Custom,
}

/// Linear map `beta = R theta` from reduced parameters to the flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Restriction {
    pub kind: RestrictionKind,
    pub dbar: usize,
    pub matrix: DMatrix<f64>,
    pub param_names: Vec<String>,
}

impl Restriction {
    pub fn n_params(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn expand(&self, theta: &[f64]) -> Vec<f64> {
        let t = nalgebra::DVector::from_column_slice(theta);
        (&self.matrix * t).iter().copied().collect()
    }

    /// Least-squares `theta` for `beta` over the degree blocks in `degrees`,
    /// together with the largest absolute misfit on those blocks.
    pub fn project(&self, beta: &[f64], degrees: impl Fn(usize) -> bool) -> (Vec<f64>, f64) {
        let rows: Vec<usize> = tri_pairs(self.dbar)
            .enumerate()
            .filter(|(_, (_, d))| degrees(*d))
            .map(|(r, _)| r)
            .collect();
        let p = self.n_params();
        if rows.is_empty() {
            return (vec![f64::NAN; p], 0.0);
        }
        let sub = DMatrix::from_fn(rows.len(), p, |r, c| self.matrix[(rows[r], c)]);
        let b = nalgebra::DVector::from_iterator(rows.len(), rows.iter().map(|&r| beta[r]));
        let svd = sub.clone().svd(true, true);
        let theta = svd
            .solve(&b, 1e-12)
            .unwrap_or_else(|_| nalgebra::DVector::from_element(p, f64::NAN));
        let misfit = (&sub * &theta - &b).amax();
        (theta.iter().copied().collect(), misfit)
    }

    /// Custom restriction; `matrix` must be `tri_len(dbar) x p` with full column rank.
    pub fn custom(dbar: usize, matrix: DMatrix<f64>, param_names: Vec<String>) -> Result<Self> {
        if matrix.nrows() != tri_len(dbar) {
            return Err(Error::InvalidRestriction(format!(
                "restriction matrix needs {} rows for dbar = {dbar}, got {}",
                tri_len(dbar),
                matrix.nrows()
            )));
        }
        if param_names.len() != matrix.ncols() {
            return Err(Error::InvalidRestriction(format!(
                "{} parameter names for {} columns",
                param_names.len(),
                matrix.ncols()
            )));
        }
        let r = Restriction {
            kind: RestrictionKind::Custom,
            dbar,
            matrix,
            param_names,
        };
        r.validate_rank()?;
        Ok(r)
    }

    /// A free `beta_1_1`, then for `d >= 2` a lowest-peer coefficient, a
    /// highest-peer coefficient and a middle-peer mean coefficient
    /// (`beta[k, d] = theta_mid / d` for `1 < k < d`). Needs `dbar >= 3`.
    pub fn min_max_mid(dbar: usize) -> Result<Self> {
        build_restriction(RestrictionKind::MinMaxMid, dbar)
    }

    fn validate_rank(&self) -> Result<()> {
        let cols = self.matrix.ncols();
        if cols == 0 {
            return Err(Error::RestrictionRank { rank: 0, cols });
        }
        let rank = self.matrix.clone().svd(false, false).rank(1e-10);
        if rank < cols {
            return Err(Error::RestrictionRank { rank, cols });
        }
        Ok(())
    }
}

pub fn build_restriction(kind: RestrictionKind, dbar: usize) -> Result<Restriction> {
    if dbar == 0 {
        return Err(Error::InvalidRestriction("dbar must be at least 1".into()));
    }
    let t = tri_len(dbar);
    let (matrix, names): (DMatrix<f64>, Vec<String>) = match kind {
        RestrictionKind::Saturated => (
            DMatrix::identity(t, t),
            tri_pairs(dbar).map(|(k, d)| beta_name(k, d)).collect(),
        ),
        RestrictionKind::Lim => (
            DMatrix::from_iterator(t, 1, tri_pairs(dbar).map(|(_, d)| 1.0 / d as f64)),
            vec!["beta_lim".into()],
        ),
        RestrictionKind::Lis => (DMatrix::from_element(t, 1, 1.0), vec!["beta_lis".into()]),
        RestrictionKind::MinmaxSplit => {
            let mut m = DMatrix::zeros(t, 2);
            for (row, (k, d)) in tri_pairs(dbar).enumerate() {
                let col = if k <= d.div_ceil(2) { 0 } else { 1 };
                m[(row, col)] = 1.0;
            }
            (m, vec!["beta_low".into(), "beta_high".into()])
        }
        RestrictionKind::MaxOnly => (
            DMatrix::from_iterator(
                t,
                1,
                tri_pairs(dbar).map(|(k, d)| if k == d { 1.0 } else { 0.0 }),
            ),
            vec!["beta_max".into()],
        ),
        RestrictionKind::RestrictedMaxsplit | RestrictionKind::RestrictedMaxsplitOverD => {
            let over_d = kind == RestrictionKind::RestrictedMaxsplitOverD;
            let mut m = DMatrix::zeros(t, 2);
            for (row, (k, d)) in tri_pairs(dbar).enumerate() {
                if k == d {
                    m[(row, 1)] = 1.0;
                } else {
                    let denom = if over_d { d } else { d - 1 };
                    m[(row, 0)] = 1.0 / denom as f64;
                }
            }
            (m, vec!["beta_minus_max".into(), "beta_max".into()])
        }
        RestrictionKind::MinMaxMid => {
            let mut m = DMatrix::zeros(t, 4);
            for (row, (k, d)) in tri_pairs(dbar).enumerate() {
                if d == 1 {
                    m[(row, 0)] = 1.0;
                } else if k == 1 {
                    m[(row, 1)] = 1.0;
                } else if k == d {
                    m[(row, 2)] = 1.0;
                } else {
                    m[(row, 3)] = 1.0 / d as f64;
                }
            }
            (
                m,
                ["beta_1_1", "beta_min", "beta_max", "beta_mid"]
                    .map(String::from)
                    .to_vec(),
            )
        }
        RestrictionKind::Custom => {
            return Err(Error::InvalidRestriction(
                "custom restrictions need a caller-supplied matrix".into(),
            ))
        }
    };
    let r = Restriction {
        kind,
        dbar,
        matrix,
        param_names: names,
    };
    r.validate_rank()?;
    Ok(r)
}

/// On-disk coefficient file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientFile {
    pub dbar: usize,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default = "default_kind")]
    pub restriction: RestrictionKind,
}

fn default_kind() -> RestrictionKind {
    RestrictionKind::Saturated
}

impl CoefficientFile {
    /// Validate the layout and, for named restrictions, that `beta` lies in
    /// the restriction's column space.
    pub fn into_coefficients(self) -> Result<(PeerCoefficients, RestrictionKind)> {
        let coeffs = PeerCoefficients::new(self.dbar, self.beta, self.gamma)?;
        if !matches!(
            self.restriction,
            RestrictionKind::Saturated | RestrictionKind::Custom
        ) {
            let r = build_restriction(self.restriction, self.dbar)?;
            let (_, misfit) = r.project(&coeffs.beta, |_| true);
            if misfit > 1e-9 {
                return Err(Error::Config(format!(
                    "beta is not of the declared `{:?}` form (misfit {misfit:e})",
                    self.restriction
                )));
            }
        }
        Ok((coeffs, self.restriction))
    }

    pub fn from_coefficients(coeffs: &PeerCoefficients, restriction: RestrictionKind) -> Self {
        CoefficientFile {
            dbar: coeffs.dbar,
            beta: coeffs.beta.clone(),
            gamma: coeffs.gamma.clone(),
            restriction,
        }
    }
}

pub fn load_coefficients(path: &Path) -> Result<(PeerCoefficients, RestrictionKind)> {
    let wrap = |message: String| Error::Input {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| wrap(e.to_string()))?;
    let file: CoefficientFile = serde_json::from_str(&text).map_err(|e| wrap(e.to_string()))?;
    file.into_coefficients().map_err(|e| wrap(e.to_string()))
}
