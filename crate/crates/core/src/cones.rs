//! Positivity cones `P = {u >= 0}`, `-P`, their H^1 neighborhoods and the
//! sign-changing region between them.
//!
//! Distances to the cones are measured by the surrogate
//! `dist(u, P) <= ||u^-||_{H^1}` and `dist(u, -P) <= ||u^+||_{H^1}`
//! (dropping the positive/negative part lands in the cone, so the surrogate
//! is always an upper bound for the true distance). The surrogate is used
//! consistently for classification, invariance audits and the separation
//! estimate; piecewise-linear fields are nonnegative exactly when they are
//! nodally nonnegative, so the positive part is the nodal clamp.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_core::{Discretization, FieldOnGraph};
use crate::spectrum::SpectralData;
use crate::util::rng_for;

/// Where a field sits relative to the cone neighborhoods of radius `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeClass {
    /// Inside `P_nu` (surrogate distance to `P` at most `nu`).
    InPNu,
    /// Inside `(-P)_nu`.
    InMinusPNu,
    /// Outside both neighborhoods: certified sign-changing region.
    InSStar,
}

impl std::fmt::Display for ConeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConeClass::InPNu => "IN_P_NU",
            ConeClass::InMinusPNu => "IN_MINUS_P_NU",
            ConeClass::InSStar => "IN_S_STAR",
        };
        write!(f, "{s}")
    }
}

/// Surrogate cone distances and the resulting classification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConeReport {
    /// `||u^-||_{H^1}`, upper bound for `dist(u, P)`.
    pub dist_plus: f64,
    /// `||u^+||_{H^1}`, upper bound for `dist(u, -P)`.
    pub dist_minus: f64,
    pub nu: f64,
    pub classification: ConeClass,
}

/// Nodal split `u = u^+ - u^-` with `u^+, u^- >= 0`.
pub fn split_parts(u: &FieldOnGraph) -> (FieldOnGraph, FieldOnGraph) {
    let plus = u.map(|v| v.max(0.0));
    let minus = u.map(|v| (-v).max(0.0));
    (plus, minus)
}

/// Classifies `u` against the cone neighborhoods of radius `nu`. Ties go to
/// the nearer cone; `InSStar` requires both surrogate distances above `nu`.
pub fn cone_classify(d: &Discretization, u: &FieldOnGraph, nu: f64) -> ConeReport {
    assert!(nu > 0.0, "cone radius must be positive");
    let (plus, minus) = split_parts(u);
    let dist_plus = d.h1_norm(&minus);
    let dist_minus = d.h1_norm(&plus);
    let classification = if dist_plus <= nu && dist_plus <= dist_minus {
        ConeClass::InPNu
    } else if dist_minus <= nu {
        ConeClass::InMinusPNu
    } else {
        ConeClass::InSStar
    };
    ConeReport {
        dist_plus,
        dist_minus,
        nu,
        classification,
    }
}

/// Result of the sampled cone-separation estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationEstimate {
    /// Sampled lower estimate of the distance between
    /// `span{phi_1..phi_{k-1}}^perp ∩ B_rho` and the cones.
    pub delta: f64,
    /// Coefficients (modes k..) of the minimizing sample.
    pub minimizer_coeffs: Vec<f64>,
    pub samples: usize,
    pub k: usize,
}

/// Estimates `delta = dist(S_{k-1}^perp ∩ B_rho*, ±P)` by seeded sampling of
/// eigenmode combinations above index `k-1` plus local minimization of the
/// surrogate. By symmetry (`u` and `-u` are both feasible) the distances to
/// the two cones coincide, so the minimum of the two surrogates is tracked.
pub fn separation_delta(
    d: &Discretization,
    spectral: &SpectralData,
    k: usize,
    mu: f64,
    rho_star: f64,
    n_samples: usize,
    seed: u64,
) -> Result<SeparationEstimate> {
    if k < 2 || k > spectral.len() {
        return Err(Error::InvalidParameter(format!(
            "separation_delta: k = {k} outside spectrum of length {}",
            spectral.len()
        )));
    }
    let modes: Vec<usize> = (k..=spectral.len()).collect();
    if modes.is_empty() {
        return Err(Error::InvalidParameter(
            "separation_delta needs at least one mode above k-1".into(),
        ));
    }
    if spectral.lambda(k) * mu >= rho_star {
        return Err(Error::SamplingBudgetExceeded(format!(
            "S_{{k-1}}^perp does not meet B_rho*: lambda_k mu = {:.3e} >= rho* = {:.3e}",
            spectral.lambda(k) * mu,
            rho_star
        )));
    }

    let field_of = |coeffs: &[f64]| -> FieldOnGraph {
        let mut u = FieldOnGraph::zeros(d.n_dofs());
        for (c, &m) in coeffs.iter().zip(&modes) {
            u += spectral.phi(m) * (*c * mu.sqrt());
        }
        u
    };
    // Pull a coefficient vector into the kinetic ball by shifting weight
    // onto mode k, the smallest eigenvalue in the set, which always fits.
    let make_feasible = |mut c: Vec<f64>| -> Option<Vec<f64>> {
        let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-14 {
            return None;
        }
        for x in &mut c {
            *x /= norm;
        }
        if c[0] == 0.0 {
            c[0] = 1e-6;
        }
        for _ in 0..400 {
            let kin: f64 = c
                .iter()
                .zip(&modes)
                .map(|(x, &m)| x * x * spectral.lambda(m) * mu)
                .sum();
            if kin < rho_star * (1.0 - 1e-9) {
                return Some(c);
            }
            // Damp the higher modes and renormalize; mass stays mu, kinetic
            // drops toward lambda_k mu.
            for x in c.iter_mut().skip(1) {
                *x *= 0.9;
            }
            let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut c {
                *x /= norm;
            }
        }
        None
    };

    let surrogate = |coeffs: &[f64]| -> f64 {
        let u = field_of(coeffs);
        let (plus, minus) = split_parts(&u);
        d.h1_norm(&minus).min(d.h1_norm(&plus))
    };

    let mut best = f64::INFINITY;
    let mut best_coeffs = vec![0.0; modes.len()];
    let mut produced = 0usize;
    for i in 0..n_samples {
        let mut rng = rng_for(seed, 1000 + i as u64);
        let c0: Vec<f64> = (0..modes.len())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let Some(mut c) = make_feasible(c0) else {
            continue;
        };
        produced += 1;
        let mut val = surrogate(&c);
        // Local minimization by random coordinate perturbations.
        let mut sigma = 0.3;
        for _ in 0..60 {
            let cand: Vec<f64> = c
                .iter()
                .map(|x| x + sigma * (rng.random::<f64>() * 2.0 - 1.0))
                .collect();
            if let Some(cf) = make_feasible(cand) {
                let v = surrogate(&cf);
                if v < val {
                    c = cf;
                    val = v;
                    sigma *= 1.1;
                    continue;
                }
            }
            sigma *= 0.8;
        }
        if val < best {
            best = val;
            best_coeffs = c;
        }
    }
    if produced == 0 {
        return Err(Error::SamplingBudgetExceeded(
            "no feasible sample inside the kinetic ball".into(),
        ));
    }
    Ok(SeparationEstimate {
        delta: best,
        minimizer_coeffs: best_coeffs,
        samples: produced,
        k,
    })
}

/// Default cone radius policy: half the sampled separation, capped by an
/// optional externally supplied `nu_star`.
pub fn default_nu(estimate: &SeparationEstimate, nu_star: Option<f64>) -> f64 {
    let nu = 0.5 * estimate.delta;
    match nu_star {
        Some(cap) => nu.min(cap),
        None => nu,
    }
}
