//! Constrained gradient on the mass sphere.
//!
//! The gradient of the energy restricted to `{u'Mu = mu}` in the `H^1`
//! metric is `grad E(u) = u - G(u)` with
//!
//! ```text
//! G(u) = S^{-1} (N(u) + lambda_u M u),      N(u)_i = int |u|^{p-2} u phi_i dx,
//! ```
//!
//! and the tangency multiplier `lambda_u` fixed by `grad' M u = 0`, i.e.
//!
//! ```text
//! lambda_u = (mu - <|u|^{p-2} u, xi>) / <u, xi>,      xi = S^{-1} M u.
//! ```
//!
//! `<u, xi> = xi' S xi > 0` for `u != 0`, so the multiplier is always well
//! defined; a non-positive pairing signals a corrupted assembly. At a
//! critical point `S u = N(u) + lambda_u M u`, which is the discrete
//! stationary equation with PDE multiplier `lambda = 1 - lambda_u`.

use crate::error::{Error, Result};
use crate::graph_core::{Discretization, FieldOnGraph};

/// Constrained gradient at `u` together with its ingredients.
#[derive(Debug, Clone)]
pub struct GradientResult {
    /// `u - G(u)`, tangent to the mass sphere in the M-pairing.
    pub grad: FieldOnGraph,
    /// Tangency multiplier; the PDE multiplier is `1 - lambda_u`.
    pub lambda_u: f64,
    /// Resolvent `xi = S^{-1} M u`.
    pub xi: FieldOnGraph,
    /// `||grad||_S`, which equals the dual norm of the stationary residual
    /// `A u + (1 - lambda_u) M u - N(u)`.
    pub h1_norm_grad: f64,
}

/// `xi = S^{-1} M u`, the resolvent of `u`.
pub fn resolvent(d: &Discretization, u: &FieldOnGraph) -> FieldOnGraph {
    d.s_solve(&d.m_apply(u))
}

/// Weak nonlinear load `N(u)_i = int |u|^{p-2} u phi_i dx`.
pub fn nonlinear_load(d: &Discretization, u: &FieldOnGraph, p: f64) -> FieldOnGraph {
    d.weak_load(u, |v| v.abs().powf(p - 2.0) * v)
}

/// Tangency multiplier at a point of the mass sphere.
pub fn lagrange_multiplier(d: &Discretization, u: &FieldOnGraph, p: f64, mu: f64) -> Result<f64> {
    let xi = resolvent(d, u);
    multiplier_with_resolvent(d, u, &xi, p, mu).map(|(l, _)| l)
}

fn multiplier_with_resolvent(
    d: &Discretization,
    u: &FieldOnGraph,
    xi: &FieldOnGraph,
    p: f64,
    mu: f64,
) -> Result<(f64, FieldOnGraph)> {
    debug_assert!(
        (d.mass(u) - mu).abs() <= 1e-8 * mu,
        "multiplier requested off the mass sphere"
    );
    let n_load = nonlinear_load(d, u, p);
    let pairing = d.m_inner(u, xi);
    if pairing <= 0.0 {
        return Err(Error::DegeneratePairing { value: pairing });
    }
    let lambda_u = (mu - n_load.dot(xi)) / pairing;
    Ok((lambda_u, n_load))
}

/// Full constrained gradient `u - G(u)` at a point of the mass sphere.
pub fn constrained_gradient(
    d: &Discretization,
    u: &FieldOnGraph,
    p: f64,
    mu: f64,
) -> Result<GradientResult> {
    let xi = resolvent(d, u);
    let (lambda_u, n_load) = multiplier_with_resolvent(d, u, &xi, p, mu)?;
    // G(u) = S^{-1}(N(u) + lambda_u M u) = S^{-1} N(u) + lambda_u xi.
    let g = d.s_solve(&n_load) + &xi * lambda_u;
    let grad = u - &g;
    let h1 = d.h1_norm(&grad);
    Ok(GradientResult {
        grad,
        lambda_u,
        xi,
        h1_norm_grad: h1,
    })
}

/// Dual norm of the stationary residual `A u + (1 - lambda_u) M u - N(u)`,
/// computed through `S^{-1}` independently of the gradient assembly path.
pub fn stationary_residual(d: &Discretization, u: &FieldOnGraph, p: f64, mu: f64) -> Result<f64> {
    let lambda_u = lagrange_multiplier(d, u, p, mu)?;
    let r = d.a_apply(u) + d.m_apply(u) * (1.0 - lambda_u) - nonlinear_load(d, u, p);
    Ok(d.s_solve(&r).dot(&r).max(0.0).sqrt())
}

/// PDE multiplier from the classical identity obtained by testing the
/// stationary equation with `u`: `lambda = (int |u|^p - u'Au) / mu`.
pub fn pde_multiplier_identity(d: &Discretization, u: &FieldOnGraph, p: f64, mu: f64) -> f64 {
    (d.integrate_power(u, p).expect("p >= 1") - d.kinetic(u)) / mu
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::energy;
    use crate::graph_core::MetricGraph;
    use crate::spectrum::eigenpairs;
    use crate::util::rng_for;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn interval(cells: usize) -> Discretization {
        let g = MetricGraph::interval(std::f64::consts::PI).unwrap();
        Discretization::assemble_uniform(&g, cells, 5).unwrap()
    }

    #[test]
    fn resolvent_of_constant_is_constant() {
        let d = interval(40);
        let c = d.constant_field(2.5);
        let xi = resolvent(&d, &c);
        for i in 0..d.n_dofs() {
            assert_relative_eq!(xi[i], 2.5, max_relative = 1e-12);
        }
    }

    /// Eigen-identity oracle: xi(phi_i) = phi_i / (1 + lambda_i).
    #[test]
    fn resolvent_eigen_identity() {
        let d = interval(64);
        let s = eigenpairs(&d, 4, 1e-12).unwrap();
        for k in 1..=4 {
            let xi = resolvent(&d, s.phi(k));
            let expect = s.phi(k) / (1.0 + s.lambda(k));
            let diff = (&xi - &expect).amax();
            assert!(diff < 1e-9, "mode {k}: max diff {diff}");
        }
    }

    #[test]
    fn resolvent_pairing_is_h1_norm_squared() {
        let d = interval(48);
        let mut rng = rng_for(3, 0);
        let raw = FieldOnGraph::from_fn(d.n_dofs(), |_, _| rng.random::<f64>() - 0.5);
        let u = d.normalize_mass(&raw, 0.7).unwrap();
        let xi = resolvent(&d, &u);
        let pairing = d.m_inner(&u, &xi);
        assert!(pairing > 0.0);
        assert_relative_eq!(pairing, d.h1_norm_sq(&xi), max_relative = 1e-10);
    }

    /// Closed form for the constant state: lambda_u = 1 - (mu/l)^{(p-2)/2},
    /// so the PDE multiplier is kappa^{p-2}.
    #[test]
    fn multiplier_of_constant_state() {
        let d = interval(48);
        let p = 7.0;
        for mu in [0.02, 0.4] {
            let kappa = d.kappa(mu);
            let lam_u = lagrange_multiplier(&d, &kappa, p, mu).unwrap();
            let ell = d.graph().total_length();
            let expect = 1.0 - (mu / ell).powf((p - 2.0) / 2.0);
            assert_relative_eq!(lam_u, expect, epsilon = 1e-10);
            let pde = pde_multiplier_identity(&d, &kappa, p, mu);
            assert_relative_eq!(1.0 - lam_u, pde, epsilon = 1e-10);
        }
    }

    #[test]
    fn gradient_vanishes_at_constant_state() {
        let d = interval(64);
        let p = 7.0;
        let mu = 0.1;
        let kappa = d.kappa(mu);
        let g = constrained_gradient(&d, &kappa, p, mu).unwrap();
        assert!(g.h1_norm_grad <= 1e-10);
    }

    #[test]
    fn gradient_is_tangent_for_random_points() {
        let d = interval(56);
        let p = 7.3;
        let mu = 0.5;
        for i in 0..20 {
            let mut rng = rng_for(17, i);
            let raw = crate::functional::sample_field(&d, &mut rng, i as usize);
            let u = d.normalize_mass(&raw, mu).unwrap();
            let g = constrained_gradient(&d, &u, p, mu).unwrap();
            let tangency = g.grad.dot(&d.m_apply(&u));
            assert!(
                tangency.abs() <= 1e-10 * mu,
                "tangency violated: {tangency}"
            );
            // Variational identity: S grad = Au + Mu - N(u) - lambda_u Mu.
            let lhs = d.s_apply(&g.grad);
            let rhs = d.a_apply(&u) + d.m_apply(&u) * (1.0 - g.lambda_u)
                - nonlinear_load(&d, &u, p);
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    /// Central finite-difference oracle along tangent directions through the
    /// sphere projection.
    #[test]
    fn gradient_matches_finite_differences() {
        let d = interval(48);
        let p = 7.0;
        let mu = 1.0;
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..25 {
            let mut rng = rng_for(23, i);
            let raw = crate::functional::sample_field(&d, &mut rng, i as usize);
            let u = d.normalize_mass(&raw, mu).unwrap();
            let g = constrained_gradient(&d, &u, p, mu).unwrap();
            // Random tangent direction, rejected when nearly orthogonal to
            // the gradient so the relative error stays meaningful.
            let v;
            loop {
                let raw_v = FieldOnGraph::from_fn(d.n_dofs(), |_, _| rng.random::<f64>() - 0.5);
                let w = d.s_solve(&d.m_apply(&raw_v));
                let coef = d.m_inner(&w, &u) / mu;
                let t = &w - &u * coef;
                let norm = d.h1_norm(&t);
                if norm < 1e-12 {
                    continue;
                }
                let cand = &t / norm;
                if d.s_inner(&g.grad, &cand).abs() > 1e-3 * g.h1_norm_grad {
                    v = cand;
                    break;
                }
            }
            let e_plus = energy(&d, &d.normalize_mass(&(&u + &v * eps), mu).unwrap(), p);
            let e_minus = energy(&d, &d.normalize_mass(&(&u - &v * eps), mu).unwrap(), p);
            let fd = (e_plus - e_minus) / (2.0 * eps);
            let ip = d.s_inner(&g.grad, &v);
            worst = worst.max((fd - ip).abs() / ip.abs().max(1e-14));
        }
        assert!(worst <= 1e-4, "max relative FD mismatch {worst}");
    }

    #[test]
    fn residual_routes_agree() {
        let d = interval(40);
        let p = 7.0;
        let mu = 0.3;
        let mut rng = rng_for(29, 0);
        let raw = crate::functional::sample_field(&d, &mut rng, 0);
        let u = d.normalize_mass(&raw, mu).unwrap();
        let g = constrained_gradient(&d, &u, p, mu).unwrap();
        let dual = stationary_residual(&d, &u, p, mu).unwrap();
        assert_relative_eq!(g.h1_norm_grad, dual, max_relative = 1e-9);
    }
}
