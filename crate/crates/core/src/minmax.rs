//! Linked eigenfunction caps, level estimates, and the flow-based search for
//! sign-changing bound states with the ladder's energy ordering.
//!
//! For an admissible index `k` (`lambda_{k-1} < lambda_k`) the cap
//!
//! ```text
//! Q_k = { sum t_i sqrt(mu) phi_i : |t| = 1, t_k >= 0 }
//! ```
//!
//! links the codimension-(k-1) sphere `S_{k-1}^perp`; its boundary
//! (`t_k = 0`) is the eigen-sphere `S_{k-1}`. The candidate critical level
//! for the k-th sign-changing state is bracketed by
//!
//! ```text
//! c_lower_bar = g(lambda_k mu) - l^{(2-p)/2} mu^{p/2}   <=   c   <=   sup_{Q_k} E,
//! ```
//!
//! and the search runs solver-mode descent from the energy-maximal cap
//! samples in `S*(nu)`. The true min-max value over all linked compacta is
//! not computable; what is returned is the bracket, the converged critical
//! point, and its certificates (mass, residual, sign change, cone report).

use serde::{Deserialize, Serialize};

use crate::cones::{cone_classify, ConeClass, ConeReport};
use crate::error::{Error, Result};
use crate::flow::{descend, descend_deflated, ConeRestriction, FlowParams, Termination};
use crate::functional::{energy, g_of_rho, ThresholdReport};
use crate::gradient::{constrained_gradient, pde_multiplier_identity, stationary_residual};
use crate::graph_core::{Discretization, FieldOnGraph};
use crate::spectrum::{SpectralData, GAP_RTOL};
use crate::util::{hex64, rng_for};

/// Deterministic sample grid on the upper hemisphere
/// `{t in R^k : |t| = 1, t_k >= 0}` of eigen-coefficients.
#[derive(Debug, Clone)]
pub struct LinkedCap {
    pub k: usize,
    pub mu: f64,
    /// Coefficient vectors `t` (length k each).
    pub coeffs: Vec<Vec<f64>>,
    /// Marks samples with `t_k = 0`, i.e. the boundary sphere `S_{k-1}`.
    pub boundary: Vec<bool>,
}

impl LinkedCap {
    /// Materializes the field of sample `i`.
    pub fn field(&self, spectral: &SpectralData, i: usize) -> FieldOnGraph {
        coeff_field(spectral, &self.coeffs[i], self.mu)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }
}

fn coeff_field(spectral: &SpectralData, t: &[f64], mu: f64) -> FieldOnGraph {
    let mut u = spectral.phi(1) * (t[0] * mu.sqrt());
    for (i, &ti) in t.iter().enumerate().skip(1) {
        u += spectral.phi(i + 1) * (ti * mu.sqrt());
    }
    u
}

/// Recursive quasi-uniform grid on the unit sphere of `R^m` with `density`
/// latitude points per angular dimension.
fn sphere_grid(m: usize, density: usize) -> Vec<Vec<f64>> {
    match m {
        0 => vec![],
        1 => vec![vec![1.0], vec![-1.0]],
        2 => {
            let n = (2 * density).max(4);
            (0..n)
                .map(|j| {
                    let th = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                    vec![th.cos(), th.sin()]
                })
                .collect()
        }
        _ => {
            let mut pts = Vec::new();
            // Poles of the last coordinate.
            let mut north = vec![0.0; m];
            north[m - 1] = 1.0;
            let mut south = vec![0.0; m];
            south[m - 1] = -1.0;
            pts.push(north);
            pts.push(south);
            let inner = sphere_grid(m - 1, density);
            for j in 1..density {
                let psi = std::f64::consts::PI * j as f64 / density as f64;
                let (s, c) = psi.sin_cos();
                for w in &inner {
                    let mut t: Vec<f64> = w.iter().map(|x| x * s).collect();
                    t.push(c);
                    pts.push(t);
                }
            }
            pts
        }
    }
}

/// Builds the deterministic cap grid for index `k` at mass `mu`.
///
/// The grid size grows like `density^(k-1)`; densities of 8-16 are
/// practical for k up to about 5.
pub fn build_cap(
    spectral: &SpectralData,
    k: usize,
    mu: f64,
    grid_density: usize,
) -> Result<LinkedCap> {
    if k < 2 || k > spectral.len() {
        return Err(Error::InvalidParameter(format!(
            "build_cap: index k = {k} outside spectrum of length {}",
            spectral.len()
        )));
    }
    if grid_density < 8 {
        return Err(Error::InvalidParameter(
            "build_cap needs grid_density >= 8".into(),
        ));
    }
    let lam_k = spectral.lambda(k);
    let lam_km1 = spectral.lambda(k - 1);
    if !(lam_k - lam_km1 > GAP_RTOL * (1.0 + lam_k.abs())) {
        return Err(Error::InadmissibleIndex {
            k,
            lambda_low: lam_km1,
            lambda_high: lam_k,
        });
    }
    let mut coeffs = Vec::new();
    let mut boundary = Vec::new();
    // Pole t_k = 1.
    let mut pole = vec![0.0; k];
    pole[k - 1] = 1.0;
    coeffs.push(pole);
    boundary.push(false);
    // Latitudes 0 < psi <= pi/2; psi = pi/2 is the boundary sphere.
    let n_lat = grid_density;
    let inner = sphere_grid(k - 1, grid_density);
    for j in 1..=n_lat {
        let psi = 0.5 * std::f64::consts::PI * j as f64 / n_lat as f64;
        let (s, c) = psi.sin_cos();
        let c = if j == n_lat { 0.0 } else { c };
        for w in &inner {
            let mut t: Vec<f64> = w.iter().map(|x| x * s).collect();
            t.push(c);
            coeffs.push(t);
            boundary.push(j == n_lat);
        }
    }
    Ok(LinkedCap {
        k,
        mu,
        coeffs,
        boundary,
    })
}

/// Level bracket data for one cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    pub k: usize,
    pub mu: f64,
    /// Analytic lower bound `g(lambda_k mu) - l^{(2-p)/2} mu^{p/2}` for the
    /// dual infimum.
    pub c_lower_bar: f64,
    /// Sup of `E` over the boundary samples (`S_{k-1}`).
    pub c_underbar: f64,
    /// Sup of `E` over all cap samples.
    pub sup_q: f64,
    /// Index of the energy-maximal sample.
    pub argmax: usize,
    pub m2: f64,
    /// `c_lower_bar > c_underbar` and `sup_q < M2`: the linked regime.
    pub separation_ok: bool,
}

/// Evaluates the energy over the cap and the analytic level bounds.
pub fn level_estimates(
    d: &Discretization,
    spectral: &SpectralData,
    cap: &LinkedCap,
    report: &ThresholdReport,
) -> LevelReport {
    let p = report.p;
    let mu = cap.mu;
    let ell = report.ell;
    let mut sup_q = f64::NEG_INFINITY;
    let mut c_underbar = f64::NEG_INFINITY;
    let mut argmax = 0;
    for i in 0..cap.len() {
        let u = cap.field(spectral, i);
        let e = energy(d, &u, p);
        if e > sup_q {
            sup_q = e;
            argmax = i;
        }
        if cap.boundary[i] && e > c_underbar {
            c_underbar = e;
        }
    }
    let lam_k = spectral.lambda(cap.k);
    let c_lower_bar =
        g_of_rho(lam_k * mu, p, mu, report.k_constant) - ell.powf((2.0 - p) / 2.0) * mu.powf(p / 2.0);
    let separation_ok = c_lower_bar > c_underbar && sup_q < report.m2;
    LevelReport {
        k: cap.k,
        mu,
        c_lower_bar,
        c_underbar,
        sup_q,
        argmax,
        m2: report.m2,
        separation_ok,
    }
}

/// Kind of bound state in a solution record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionKind {
    SignChanging,
    Positive,
}

/// A certified critical point of the constrained energy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub kind: SolutionKind,
    /// Linking index for sign-changing states, absent for the positive one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub graph_hash: String,
    pub p: f64,
    pub mu: f64,
    pub energy: f64,
    /// PDE multiplier `lambda = 1 - lambda_u = (int|u|^p - u'Au)/mu`.
    pub pde_lambda: f64,
    pub lambda_u: f64,
    pub residual: f64,
    pub mass_err: f64,
    pub sign_changes: usize,
    pub cone: ConeReport,
    pub kinetic: f64,
    /// Max Kirchhoff flux imbalance over vertices.
    pub flux_imbalance: f64,
    pub coefficients: Vec<f64>,
}

/// Diagnostics of one multistart descent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartDiagnostic {
    pub start_index: usize,
    pub perturbation: usize,
    pub converged: bool,
    pub energy: f64,
    pub residual: f64,
    pub sign_changing: bool,
    pub in_bracket: bool,
}

/// Result of `find_sign_changing`: the selected record plus per-start
/// diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignChangingSearch {
    pub solution: SolutionRecord,
    pub diagnostics: Vec<StartDiagnostic>,
}

fn certify(
    d: &Discretization,
    u: &FieldOnGraph,
    p: f64,
    mu: f64,
    nu: f64,
    kind: SolutionKind,
    k: Option<usize>,
) -> Result<SolutionRecord> {
    let gr = constrained_gradient(d, u, p, mu)?;
    let residual = stationary_residual(d, u, p, mu)?;
    let sign_threshold = 1e-6 * (mu / d.graph().total_length()).sqrt();
    let flux = d
        .vertex_flux_imbalance(u)
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max);
    Ok(SolutionRecord {
        kind,
        k,
        graph_hash: hex64(d.fingerprint()),
        p,
        mu,
        energy: energy(d, u, p),
        pde_lambda: pde_multiplier_identity(d, u, p, mu),
        lambda_u: gr.lambda_u,
        residual,
        mass_err: (d.mass(u) - mu).abs(),
        sign_changes: d.sign_changes(u, sign_threshold),
        cone: cone_classify(d, u, nu),
        kinetic: d.kinetic(u),
        flux_imbalance: flux,
        coefficients: u.iter().cloned().collect(),
    })
}

/// Canonical sign: force the value at the first DOF with `|u| > thresh` to
/// be positive, so identical runs produce identical records and mirror pairs
/// are reported consistently.
fn canonical_sign(u: &FieldOnGraph, thresh: f64) -> FieldOnGraph {
    for i in 0..u.len() {
        if u[i].abs() > thresh {
            return if u[i] < 0.0 { -u } else { u.clone() };
        }
    }
    u.clone()
}

/// Runs solver-mode descent from the energy-maximal cap samples in `S*(nu)`
/// (plus stable-mode perturbations) and returns the least-energy converged
/// sign-changing critical point inside the level bracket.
#[allow(clippy::too_many_arguments)]
pub fn find_sign_changing(
    d: &Discretization,
    spectral: &SpectralData,
    cap: &LinkedCap,
    level: &LevelReport,
    report: &ThresholdReport,
    nu: f64,
    flow: &FlowParams,
    multistart: usize,
    seed: u64,
) -> Result<SignChangingSearch> {
    if !level.separation_ok {
        return Err(Error::OutOfRegime(format!(
            "level separation fails at k = {}, mu = {:.3e}: c_lower_bar = {:.6e}, \
             c_underbar = {:.6e}, sup_Q = {:.6e}, M2 = {:.6e}",
            cap.k, cap.mu, level.c_lower_bar, level.c_underbar, level.sup_q, level.m2
        )));
    }
    let p = report.p;
    let mu = cap.mu;
    // Rank samples by energy (descending), keep the top decile inside S*.
    let mut ranked: Vec<(usize, f64)> = (0..cap.len())
        .map(|i| (i, energy(d, &cap.field(spectral, i), p)))
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let decile = (cap.len() / 10).max(1);
    let starts: Vec<usize> = ranked
        .iter()
        .map(|&(i, _)| i)
        .filter(|&i| {
            cone_classify(d, &cap.field(spectral, i), nu).classification == ConeClass::InSStar
        })
        .take(decile.min(multistart.max(1)))
        .collect();
    if starts.is_empty() {
        return Err(Error::NoSignChangingFound(
            "no cap sample of the top energy decile lies in S*(nu)".into(),
        ));
    }

    let bracket_lo = level.c_lower_bar - 1e-10 * level.c_lower_bar.abs().max(1.0);
    let bracket_hi = level.sup_q + 1e-10 * level.sup_q.abs().max(1.0);
    let sign_threshold = 1e-6 * (mu / d.graph().total_length()).sqrt();
    // Descend within the complement of the lower modes: the k-level state is
    // a minimizer there, while in the full space it is an index-(k-1) saddle
    // that plain descent can only reach along symmetry-protected starts.
    // Certification below always uses the full stationary residual.
    let deflate: Vec<FieldOnGraph> = (1..cap.k).map(|i| spectral.phi(i).clone()).collect();

    let mut diagnostics = Vec::new();
    let mut best: Option<(f64, FieldOnGraph)> = None;
    for (si, &start_idx) in starts.iter().enumerate() {
        let base = cap.field(spectral, start_idx);
        // Unperturbed start plus three perturbations within the stable modes
        // (>= k) of the target branch; lower modes are the saddle's unstable
        // directions and a perturbation there slides off toward the cones.
        for pj in 0..4usize {
            let u0 = if pj == 0 {
                base.clone()
            } else {
                let mut rng = rng_for(seed, (si * 8 + pj) as u64);
                let mut pert = FieldOnGraph::zeros(d.n_dofs());
                for m in cap.k..=spectral.len() {
                    use rand::Rng;
                    let c: f64 = rng.random::<f64>() * 2.0 - 1.0;
                    pert += spectral.phi(m) * c;
                }
                let pn = d.h1_norm(&pert);
                if pn > 0.0 {
                    pert /= pn;
                }
                &base + pert * (1e-3 * d.h1_norm(&base))
            };
            let traj = descend_deflated(d, &u0, p, mu, flow, &deflate)?;
            let converged = traj.reason == Termination::Converged;
            let u = canonical_sign(&traj.terminal, sign_threshold);
            let e = energy(d, &u, p);
            let res = stationary_residual(d, &u, p, mu)?;
            let min = u.min();
            let max = u.max();
            let sign_changing = min < -sign_threshold && max > sign_threshold;
            let in_bracket = e >= bracket_lo && e <= bracket_hi;
            diagnostics.push(StartDiagnostic {
                start_index: start_idx,
                perturbation: pj,
                converged,
                energy: e,
                residual: res,
                sign_changing,
                in_bracket,
            });
            if converged && res <= 1e-7 && sign_changing && in_bracket {
                let better = match &best {
                    None => true,
                    Some((be, bu)) => {
                        e < *be - 1e-14 * be.abs().max(1.0)
                            || ((e - *be).abs() <= 1e-14 * be.abs().max(1.0)
                                && lex_less(&u, bu))
                    }
                };
                if better {
                    best = Some((e, u));
                }
            }
        }
    }
    match best {
        Some((_, u)) => {
            let record = certify(d, &u, p, mu, nu, SolutionKind::SignChanging, Some(cap.k))?;
            Ok(SignChangingSearch {
                solution: record,
                diagnostics,
            })
        }
        None => Err(Error::NoSignChangingFound(format!(
            "k = {}, mu = {:.3e}: {} starts, none converged sign-changing inside \
             [{:.6e}, {:.6e}]",
            cap.k,
            mu,
            diagnostics.len(),
            bracket_lo,
            bracket_hi
        ))),
    }
}

fn lex_less(a: &FieldOnGraph, b: &FieldOnGraph) -> bool {
    for i in 0..a.len() {
        if a[i] < b[i] {
            return true;
        }
        if a[i] > b[i] {
            return false;
        }
    }
    false
}

/// The full ladder: one sign-changing solution per requested index plus the
/// positive state from cone-restricted descent, each paired with its mirror.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ladder {
    /// `(u, -u)` pairs per index, ascending in k.
    pub sign_changing: Vec<(SolutionRecord, SolutionRecord)>,
    pub positive: (SolutionRecord, SolutionRecord),
    pub levels: Vec<LevelReport>,
}

/// Solves for the ladder of distinct bound states at mass `mu`.
///
/// Preconditions: all indices admissible and `mu < mu_j` (the aggregate
/// threshold of the report). The sign-changing energies must come out
/// strictly increasing in `k`; violations are reported as errors, never
/// papered over.
#[allow(clippy::too_many_arguments)]
pub fn solve_ladder(
    d: &Discretization,
    spectral: &SpectralData,
    report: &ThresholdReport,
    indices: &[usize],
    nu: f64,
    flow: &FlowParams,
    grid_density: usize,
    multistart: usize,
    seed: u64,
) -> Result<Ladder> {
    if report.mu >= report.mu_j {
        return Err(Error::OutOfRegime(format!(
            "mu = {:.6e} is not below the aggregate threshold mu_j = {:.6e}",
            report.mu, report.mu_j
        )));
    }
    let p = report.p;
    let mu = report.mu;
    let mut sign_changing = Vec::new();
    let mut levels = Vec::new();
    for &k in indices {
        let cap = build_cap(spectral, k, mu, grid_density)?;
        let level = level_estimates(d, spectral, &cap, report);
        let search = find_sign_changing(
            d, spectral, &cap, &level, report, nu, flow, multistart, seed,
        )?;
        levels.push(level);
        let u = FieldOnGraph::from_vec(search.solution.coefficients.clone());
        let mirror = certify(d, &(-&u), p, mu, nu, SolutionKind::SignChanging, Some(k))?;
        sign_changing.push((search.solution, mirror));
    }

    // Distinctness and strict energy ordering across indices.
    for i in 0..sign_changing.len() {
        for j in (i + 1)..sign_changing.len() {
            let (a, b) = (&sign_changing[i].0, &sign_changing[j].0);
            let ua = FieldOnGraph::from_vec(a.coefficients.clone());
            let ub = FieldOnGraph::from_vec(b.coefficients.clone());
            let dist = d.h1_norm(&(&ua - &ub));
            if dist <= 1e-6 {
                return Err(Error::DuplicateSolution(format!(
                    "indices {} and {} converged to the same state (H1 distance {dist:.3e})",
                    a.k.unwrap(),
                    b.k.unwrap()
                )));
            }
            if (a.energy - b.energy).abs() <= 1e-8 * a.energy.abs().max(1.0) {
                return Err(Error::OrderingViolation(format!(
                    "levels at k = {} and k = {} coincide within 1e-8 (possible duplicate \
                     convergence): {:.9e} vs {:.9e}",
                    a.k.unwrap(),
                    b.k.unwrap(),
                    a.energy,
                    b.energy
                )));
            }
            if a.energy >= b.energy {
                return Err(Error::OrderingViolation(format!(
                    "energy at k = {} ({:.9e}) is not below energy at k = {} ({:.9e})",
                    a.k.unwrap(),
                    a.energy,
                    b.k.unwrap(),
                    b.energy
                )));
            }
        }
    }

    // Positive state: cone-restricted descent from a perturbed constant.
    let mut rng = rng_for(seed, 0xC0DE);
    let noise = FieldOnGraph::from_fn(d.n_dofs(), |_, _| {
        use rand::Rng;
        rng.random::<f64>() * 2.0 - 1.0
    });
    let u0 = &d.kappa(mu) + d.s_solve(&d.m_apply(&noise)) * (0.05 * (mu / report.ell).sqrt());
    let mut cone_flow = flow.clone();
    cone_flow.cone_restrict = Some(ConeRestriction::Positive);
    let traj = descend(d, &u0, p, mu, &cone_flow)?;
    if traj.reason != Termination::Converged {
        return Err(Error::NoSignChangingFound(
            "cone-restricted descent for the positive state did not converge".into(),
        ));
    }
    let pos_res = stationary_residual(d, &traj.terminal, p, mu)?;
    if pos_res > 1e-7 || !(traj.terminal.min() > 0.0) {
        return Err(Error::NoSignChangingFound(format!(
            "positive candidate rejected: residual {pos_res:.3e}, min {:.3e}",
            traj.terminal.min()
        )));
    }
    let positive = certify(d, &traj.terminal, p, mu, nu, SolutionKind::Positive, None)?;
    let neg_mirror = certify(
        d,
        &(-&traj.terminal),
        p,
        mu,
        nu,
        SolutionKind::Positive,
        None,
    )?;

    Ok(Ladder {
        sign_changing,
        positive: (positive, neg_mirror),
        levels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{compute_thresholds, estimate_k_constant, ProblemParams};
    use crate::graph_core::MetricGraph;
    use crate::spectrum::eigenpairs;
    use approx::assert_relative_eq;

    fn setup(cells: usize, k_eigs: usize) -> (Discretization, SpectralData) {
        let g = MetricGraph::interval(std::f64::consts::PI).unwrap();
        let d = Discretization::assemble_uniform(&g, cells, 5).unwrap();
        let s = eigenpairs(&d, k_eigs, 1e-12).unwrap();
        (d, s)
    }

    fn thresholds_for(
        d: &Discretization,
        s: &SpectralData,
        p: f64,
        mu: f64,
        indices: &[usize],
    ) -> ThresholdReport {
        let k_est = estimate_k_constant(d, p, 12, 3).unwrap();
        compute_thresholds(d, ProblemParams::new(p, mu).unwrap(), &k_est, s, indices).unwrap()
    }

    #[test]
    fn cap_for_k2_is_the_upper_arc() {
        let (d, s) = setup(48, 3);
        let mu = 0.01;
        let cap = build_cap(&s, 2, mu, 8).unwrap();
        // Endpoints of the arc are the two constant states.
        let mut found_plus = false;
        let mut found_minus = false;
        for i in 0..cap.len() {
            assert!(cap.coeffs[i][1] >= 0.0);
            let u = cap.field(&s, i);
            assert!((d.mass(&u) - mu).abs() <= 1e-8 * mu);
            // All samples obey u'Au <= lambda_2 mu.
            assert!(d.kinetic(&u) <= s.lambda(2) * mu * (1.0 + 1e-9));
            if cap.boundary[i] {
                let kappa = (mu / d.graph().total_length()).sqrt();
                if (u[0] - kappa).abs() < 1e-10 {
                    found_plus = true;
                }
                if (u[0] + kappa).abs() < 1e-10 {
                    found_minus = true;
                }
            }
        }
        assert!(found_plus && found_minus, "arc endpoints missing");
        // Pure second mode sits in the cap with kinetic = lambda_2 mu.
        let pure = cap.field(&s, 0);
        assert_relative_eq!(d.kinetic(&pure), s.lambda(2) * mu, max_relative = 1e-10);
    }

    #[test]
    fn cap_rejects_degenerate_index() {
        let g = MetricGraph::loop_graph(2.0 * std::f64::consts::PI).unwrap();
        let d = Discretization::assemble_uniform(&g, 96, 5).unwrap();
        let s = eigenpairs(&d, 4, 1e-12).unwrap();
        // lambda_2 = lambda_3 on the loop: k = 3 is inadmissible.
        assert!(matches!(
            build_cap(&s, 3, 0.01, 8),
            Err(Error::InadmissibleIndex { .. })
        ));
    }

    #[test]
    fn level_chain_in_regime() {
        let (d, s) = setup(64, 4);
        let p = 7.0;
        let rep0 = thresholds_for(&d, &s, p, 1.0, &[2]);
        let mu = 0.25 * rep0.index(2).unwrap().mu_check;
        let rep = thresholds_for(&d, &s, p, mu, &[2]);
        let cap = build_cap(&s, 2, mu, 16).unwrap();
        let level = level_estimates(&d, &s, &cap, &rep);
        // sup_Q < lambda_2 mu / 2 < M2 in the linked regime.
        assert!(level.sup_q < 0.5 * s.lambda(2) * mu);
        assert!(0.5 * s.lambda(2) * mu < rep.m2);
        assert!(level.separation_ok);
        // Boundary sup is the closed-form constant level.
        let ell = d.graph().total_length();
        let expect = -ell.powf((2.0 - p) / 2.0) * mu.powf(p / 2.0) / p;
        assert_relative_eq!(level.c_underbar, expect, max_relative = 1e-10);
        assert!(level.c_lower_bar > level.c_underbar);
    }

    #[test]
    fn separation_gate_refuses_large_mass() {
        let (d, s) = setup(48, 3);
        let p = 7.0;
        let rep = thresholds_for(&d, &s, p, 5.0, &[2]);
        let cap = build_cap(&s, 2, 5.0, 8).unwrap();
        let level = level_estimates(&d, &s, &cap, &rep);
        assert!(!level.separation_ok);
        let err = find_sign_changing(
            &d,
            &s,
            &cap,
            &level,
            &rep,
            1e-3,
            &FlowParams::solver(1e-9),
            4,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::OutOfRegime(_)));
    }

    /// Link sanity: along sampled endpoint-fixing deformations of the k = 2
    /// arc, the phi_1 component changes sign, so some deformed sample meets
    /// S_1^perp within grid resolution.
    #[test]
    fn sampled_deformations_cross_the_dual_sphere() {
        let (d, s) = setup(48, 3);
        let mu = 0.01;
        let cap = build_cap(&s, 2, mu, 24).unwrap();
        // Continuous maps fixing the endpoints: flow each sample a short
        // time under two synthetic deformations.
        let deform = |u: &FieldOnGraph, style: usize| -> FieldOnGraph {
            let kappa = d.kappa(mu);
            let w = match style {
                0 => u + s.phi(3) * (0.3 * mu.sqrt() * (d.m_inner(u, s.phi(2)) / mu.sqrt())),
                _ => {
                    let t = d.m_inner(u, &kappa) / mu;
                    u + s.phi(2) * (0.2 * mu.sqrt() * (1.0 - t * t))
                }
            };
            d.normalize_mass(&w, mu).unwrap()
        };
        for style in 0..2 {
            let comps: Vec<f64> = (0..cap.len())
                .map(|i| d.m_inner(&deform(&cap.field(&s, i), style), s.phi(1)))
                .collect();
            let has_pos = comps.iter().any(|&c| c > 0.0);
            let has_neg = comps.iter().any(|&c| c < 0.0);
            assert!(has_pos && has_neg, "phi_1 component did not change sign");
            // Some sample is within grid resolution of the dual sphere.
            let min_abs = comps.iter().map(|c| c.abs()).fold(f64::INFINITY, f64::min);
            let grid_res = std::f64::consts::PI * mu.sqrt() / 24.0;
            assert!(min_abs <= grid_res, "min |phi_1 comp| {min_abs} vs {grid_res}");
        }
    }

    #[test]
    fn find_sign_changing_on_interval() {
        let (d, s) = setup(96, 6);
        let p = 7.0;
        let rep0 = thresholds_for(&d, &s, p, 1.0, &[2]);
        let mu = 0.5 * rep0.index(2).unwrap().mu_check;
        let rep = thresholds_for(&d, &s, p, mu, &[2]);
        let cap = build_cap(&s, 2, mu, 16).unwrap();
        let level = level_estimates(&d, &s, &cap, &rep);
        assert!(level.separation_ok);
        let est = crate::cones::separation_delta(&d, &s, 2, mu, rep.rho_star, 16, 7).unwrap();
        let nu = crate::cones::default_nu(&est, None);
        let flow = FlowParams::solver(1e-9).with_barrier(rep.rho_star, rep.m2);
        let search =
            find_sign_changing(&d, &s, &cap, &level, &rep, nu, &flow, 4, 11).unwrap();
        let sol = &search.solution;
        assert!(sol.residual <= 1e-7);
        assert_eq!(sol.sign_changes, 1);
        assert!(sol.energy >= level.c_lower_bar && sol.energy <= level.sup_q);
        assert!(sol.lambda_u >= 0.0);
        assert_eq!(sol.cone.classification, ConeClass::InSStar);
        // Determinism: identical seed gives a bitwise-identical record.
        let again =
            find_sign_changing(&d, &s, &cap, &level, &rep, nu, &flow, 4, 11).unwrap();
        assert_eq!(
            serde_json::to_string(&search.solution).unwrap(),
            serde_json::to_string(&again.solution).unwrap()
        );
    }

    /// No mesh symmetry protects the saddle on this graph; the deflated
    /// descent must still land on a certified sign-changing state.
    #[test]
    fn find_sign_changing_on_asymmetric_graph() {
        let g = MetricGraph::loop_with_tail(2.0, 1.0).unwrap();
        let d = Discretization::assemble_uniform(&g, 48, 5).unwrap();
        let s = eigenpairs(&d, 5, 1e-12).unwrap();
        let p = 7.0;
        let k_est = estimate_k_constant(&d, p, 16, 3).unwrap();
        let rep0 = compute_thresholds(
            &d,
            ProblemParams::new(p, 1.0).unwrap(),
            &k_est,
            &s,
            &[2],
        )
        .unwrap();
        // Deep inside the regime: the perp-minimizer's full residual scales
        // like mu^{(p-1)/2} and must clear the 1e-7 certification gate.
        let mu = 0.1 * rep0.index(2).unwrap().mu_check;
        let rep = compute_thresholds(
            &d,
            ProblemParams::new(p, mu).unwrap(),
            &k_est,
            &s,
            &[2],
        )
        .unwrap();
        let cap = build_cap(&s, 2, mu, 16).unwrap();
        let level = level_estimates(&d, &s, &cap, &rep);
        assert!(level.separation_ok);
        let est = crate::cones::separation_delta(&d, &s, 2, mu, rep.rho_star, 12, 7).unwrap();
        let nu = crate::cones::default_nu(&est, None);
        let flow = FlowParams::solver(1e-9).with_barrier(rep.rho_star, rep.m2);
        let search = find_sign_changing(&d, &s, &cap, &level, &rep, nu, &flow, 4, 9).unwrap();
        let sol = &search.solution;
        assert!(sol.residual <= 1e-7, "residual {}", sol.residual);
        assert!(sol.sign_changes >= 1);
        assert!(sol.lambda_u >= 0.0);
        // The multiplier sits near -lambda_2 on the branch.
        assert!((sol.pde_lambda + s.lambda(2)).abs() < 0.05 * s.lambda(2));
    }

    #[test]
    fn ladder_two_indices_ordered_with_positive_state() {
        let (d, s) = setup(96, 6);
        let p = 7.0;
        let rep0 = thresholds_for(&d, &s, p, 1.0, &[2, 3]);
        let mu = 0.5 * rep0.mu_j;
        let rep = thresholds_for(&d, &s, p, mu, &[2, 3]);
        let est = crate::cones::separation_delta(&d, &s, 2, mu, rep.rho_star, 12, 7).unwrap();
        let nu = crate::cones::default_nu(&est, None);
        let flow = FlowParams::solver(1e-9).with_barrier(rep.rho_star, rep.m2);
        let ladder = solve_ladder(&d, &s, &rep, &[2, 3], nu, &flow, 12, 3, 5).unwrap();
        assert_eq!(ladder.sign_changing.len(), 2);
        let (u2, m2) = &ladder.sign_changing[0];
        let (u3, _) = &ladder.sign_changing[1];
        assert!(u2.energy < u3.energy);
        // Mirror has exactly equal energy.
        assert_eq!(u2.energy, m2.energy);
        // Positive state: strictly positive, tiny residual, below the
        // sign-changing levels.
        let (pos, neg) = &ladder.positive;
        assert!(pos.coefficients.iter().all(|&x| x > 0.0));
        assert!(neg.coefficients.iter().all(|&x| x < 0.0));
        assert!(pos.residual <= 1e-7);
        assert!(pos.energy < u2.energy);
        assert_eq!(pos.sign_changes, 0);
        // Certification data on every returned record.
        for rec in ladder
            .sign_changing
            .iter()
            .map(|(a, _)| a)
            .chain(std::iter::once(pos))
        {
            assert!(rec.mass_err <= 1e-10 * rec.mu);
            assert!(rec.residual <= 1e-7);
            assert!((rec.pde_lambda - (1.0 - rec.lambda_u)).abs() <= 1e-6);
            assert!(rec.flux_imbalance < 0.5 * (rec.mu / d.graph().total_length()).sqrt());
        }
    }
}
