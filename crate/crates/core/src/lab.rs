//! Finite-dimensional lab for the abstract sphere-flow invariance framework.
//!
//! The setting: two inner products on `R^n` — an `E`-metric `S_lab` and an
//! `H`-metric `M_lab` with `S_lab - M_lab` positive semidefinite (embedding
//! norm at most 1) — the mass sphere `S_mu = {|u|_H^2 = mu}`, a closed set
//! `B_tilde`, and a map `G` from the sphere into `B_tilde` whose field
//! `V(u) = G(u) - u` is forced tangent by a scenario multiplier.
//!
//! Checked numerically, at desk scale with brute-force oracles:
//!
//! * the decay `s^{-1} dist(u + sV(u), B_tilde ∩ S_mu) -> 0` (at rate O(s))
//!   whenever `B_tilde` is convex and scaling-stable (`kw in B_tilde` for
//!   `k in (0,1)`), with the witness "project onto `B_tilde`, then
//!   renormalize onto the sphere";
//! * forward invariance of `B_tilde ∩ S_mu` under the step-projected Euler
//!   flow of `V`;
//! * failure of the decay when the scaling condition is dropped (a shifted
//!   one-dimensional ball tangent to the sphere).
//!
//! A mirror scenario wraps the real graph gradient so the cone-invariance
//! mechanism (`G` maps cone neighborhoods halfway into themselves) can be
//! tested on a real discretization at small size.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::Serialize;

use crate::cones::split_parts;
use crate::error::{Error, Result};
use crate::gradient::constrained_gradient;
use crate::graph_core::Discretization;
use crate::util::{fnv1a64, hex64, rng_for};

/// The two inner products of a lab scenario.
#[derive(Debug, Clone)]
pub struct LabMetrics {
    pub s: DMatrix<f64>,
    pub m: DMatrix<f64>,
    s_chol: Cholesky<f64, Dyn>,
}

impl LabMetrics {
    pub fn new(s: DMatrix<f64>, m: DMatrix<f64>) -> Result<Self> {
        let s_chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("lab E-metric not SPD".into()))?;
        Ok(Self { s, m, s_chol })
    }

    /// Euclidean metrics on both slots.
    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(n, n)).expect("identity is SPD")
    }

    /// `S = I + 0.3 T` with `T` the second-difference matrix: an M-matrix
    /// with entrywise nonnegative inverse, `M = I`.
    pub fn smoothing(n: usize) -> Self {
        let mut s = DMatrix::identity(n, n);
        for i in 0..n {
            s[(i, i)] += 0.6;
            if i + 1 < n {
                s[(i, i + 1)] -= 0.3;
                s[(i + 1, i)] -= 0.3;
            }
        }
        Self::new(s, DMatrix::identity(n, n)).expect("M-matrix is SPD")
    }

    pub fn h_inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (&self.m * b).dot(a)
    }

    pub fn h_norm(&self, a: &DVector<f64>) -> f64 {
        self.h_inner(a, a).max(0.0).sqrt()
    }

    pub fn e_norm(&self, a: &DVector<f64>) -> f64 {
        (&self.s * a).dot(a).max(0.0).sqrt()
    }

    pub fn s_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.s_chol.solve(b)
    }

    pub fn renormalize(&self, u: &DVector<f64>, mu: f64) -> DVector<f64> {
        u * (mu / self.h_inner(u, u)).sqrt()
    }
}

/// Constraint set `B_tilde` with its membership/projection oracles.
pub trait ConstraintSet {
    fn label(&self) -> String;
    /// Membership within tolerance `tol` (in the E-metric where relevant).
    fn contains(&self, metrics: &LabMetrics, w: &DVector<f64>, tol: f64) -> bool;
    /// E-distance upper bound to the set; 0 inside.
    fn violation(&self, metrics: &LabMetrics, w: &DVector<f64>) -> f64;
    /// E-metric projection onto the set; `None` when no oracle exists.
    fn project(&self, metrics: &LabMetrics, w: &DVector<f64>) -> Option<DVector<f64>>;
    /// A point of `B_tilde ∩ S_mu` near `w` (the decay-limit witness);
    /// default: project, renormalize, verify.
    fn sphere_witness(
        &self,
        metrics: &LabMetrics,
        mu: f64,
        w: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let proj = self.project(metrics, w)?;
        if metrics.h_norm(&proj) < 1e-14 {
            return None;
        }
        let cand = metrics.renormalize(&proj, mu);
        if self.contains(metrics, &cand, 1e-10) {
            Some(cand)
        } else {
            None
        }
    }
    /// Random member of `B_tilde` (for convexity/scaling oracles).
    fn sample(&self, metrics: &LabMetrics, rng: &mut dyn rand::RngCore) -> DVector<f64>;
}

/// Nonnegative orthant; exact E-projection by brute-force active sets
/// (intended for small `n`).
pub struct Orthant {
    pub n: usize,
}

impl ConstraintSet for Orthant {
    fn label(&self) -> String {
        format!("orthant(n={})", self.n)
    }

    fn contains(&self, _metrics: &LabMetrics, w: &DVector<f64>, tol: f64) -> bool {
        w.iter().all(|&x| x >= -tol)
    }

    fn violation(&self, metrics: &LabMetrics, w: &DVector<f64>) -> f64 {
        match self.project(metrics, w) {
            Some(p) => metrics.e_norm(&(w - p)),
            None => f64::INFINITY,
        }
    }

    fn project(&self, metrics: &LabMetrics, w: &DVector<f64>) -> Option<DVector<f64>> {
        // Enumerate active sets: minimize ||x - w||_S with x_F = 0, x >= 0.
        let n = self.n;
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1usize << n) {
            let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) == 0).collect();
            let mut x = DVector::zeros(n);
            if !free.is_empty() {
                let mut sub = DMatrix::zeros(free.len(), free.len());
                let mut rhs = DVector::zeros(free.len());
                let sw = &metrics.s * w;
                for (a, &i) in free.iter().enumerate() {
                    rhs[a] = sw[i];
                    for (b, &j) in free.iter().enumerate() {
                        sub[(a, b)] = metrics.s[(i, j)];
                    }
                }
                let sol = sub.cholesky()?.solve(&rhs);
                for (a, &i) in free.iter().enumerate() {
                    x[i] = sol[a];
                }
            }
            if x.iter().any(|&v| v < -1e-12) {
                continue;
            }
            let diff = &x - w;
            let obj = metrics.e_norm(&diff);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
        best.map(|(_, x)| x)
    }

    fn sample(&self, _metrics: &LabMetrics, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let r = rng;
        DVector::from_fn(self.n, |_, _| {
            let x: f64 = r.random::<f64>() * 2.0 - 1.0;
            x.abs() * 2.0
        })
    }
}

/// Intersection of half-spaces `{(a_i, w)_H <= 0}` through the origin with
/// entrywise nonnegative normals, so the negative orthant is feasible.
/// Convex, closed and scaling-stable for every `k > 0`.
pub struct HalfSpaces {
    /// Outward normals `a_i >= 0` in the H pairing.
    pub normals: Vec<DVector<f64>>,
}

impl ConstraintSet for HalfSpaces {
    fn label(&self) -> String {
        format!("halfspaces(m={})", self.normals.len())
    }

    fn contains(&self, metrics: &LabMetrics, w: &DVector<f64>, tol: f64) -> bool {
        self.normals
            .iter()
            .all(|a| metrics.h_inner(a, w) <= tol * metrics.h_norm(a).max(1.0))
    }

    fn violation(&self, metrics: &LabMetrics, w: &DVector<f64>) -> f64 {
        match self.project(metrics, w) {
            Some(p) => metrics.e_norm(&(w - p)),
            None => f64::INFINITY,
        }
    }

    fn project(&self, metrics: &LabMetrics, w: &DVector<f64>) -> Option<DVector<f64>> {
        // Cyclic E-metric projections; a single constraint `(a, x)_H <= 0`
        // projects in closed form along `S^{-1} M a`. The final feasibility
        // check guarantees the returned point is a member, so distances
        // built from it are upper bounds.
        let mut x = w.clone();
        for _ in 0..200 {
            let mut moved = false;
            for a in &self.normals {
                let val = metrics.h_inner(a, &x);
                if val > 1e-15 * metrics.h_norm(a) {
                    let ma = &metrics.m * a;
                    let dir = metrics.s_solve(&ma);
                    x -= &dir * (val / ma.dot(&dir));
                    moved = true;
                }
            }
            if !moved {
                return Some(x);
            }
        }
        if self.contains(metrics, &x, 1e-9) {
            Some(x)
        } else {
            None
        }
    }

    fn sample(&self, _metrics: &LabMetrics, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        // Negative-orthant members are always feasible (normals >= 0).
        let n = self.normals[0].len();
        let r = rng;
        DVector::from_fn(n, |_, _| -(0.1 + r.random::<f64>()))
    }
}

/// Shifted one-dimensional ball `{base + t dir : |t| <= r}` tangent to the
/// sphere at `base`: convex and closed, but the scaling condition fails
/// (`k w` leaves the segment), and indeed the decay limit fails on it.
pub struct ShiftedSegment {
    pub base: DVector<f64>,
    /// H-tangent direction at `base`.
    pub dir: DVector<f64>,
    pub r: f64,
}

impl ConstraintSet for ShiftedSegment {
    fn label(&self) -> String {
        "shifted-segment".into()
    }

    fn contains(&self, metrics: &LabMetrics, w: &DVector<f64>, tol: f64) -> bool {
        self.violation(metrics, w) <= tol
    }

    fn violation(&self, metrics: &LabMetrics, w: &DVector<f64>) -> f64 {
        let p = self.project(metrics, w).expect("segment projection is total");
        metrics.e_norm(&(w - p))
    }

    fn project(&self, metrics: &LabMetrics, w: &DVector<f64>) -> Option<DVector<f64>> {
        let diff = w - &self.base;
        let dd = metrics.e_norm(&self.dir);
        let t = ((&metrics.s * &diff).dot(&self.dir) / (dd * dd)).clamp(-self.r, self.r);
        Some(&self.base + &self.dir * t)
    }

    fn sphere_witness(
        &self,
        metrics: &LabMetrics,
        mu: f64,
        _w: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        // The segment is tangent to the sphere: the intersection is the
        // single point `base`.
        debug_assert!((metrics.h_inner(&self.base, &self.base) - mu).abs() <= 1e-9 * mu);
        Some(self.base.clone())
    }

    fn sample(&self, _metrics: &LabMetrics, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let r = rng;
        let t: f64 = (r.random::<f64>() * 2.0 - 1.0) * self.r;
        &self.base + &self.dir * t
    }
}

/// `nu`-neighborhood of the negative cone in the surrogate metric
/// `dist(w, -P) ~ ||w^+||_E` (used by the mirror scenario).
pub struct NegConeNeighborhood {
    pub nu: f64,
}

impl ConstraintSet for NegConeNeighborhood {
    fn label(&self) -> String {
        format!("(-P)_nu(nu={:.3e})", self.nu)
    }

    fn contains(&self, metrics: &LabMetrics, w: &DVector<f64>, tol: f64) -> bool {
        let (plus, _) = split_parts(w);
        metrics.e_norm(&plus) <= self.nu + tol
    }

    fn violation(&self, metrics: &LabMetrics, w: &DVector<f64>) -> f64 {
        let (plus, _) = split_parts(w);
        (metrics.e_norm(&plus) - self.nu).max(0.0)
    }

    fn project(&self, metrics: &LabMetrics, w: &DVector<f64>) -> Option<DVector<f64>> {
        let (plus, _) = split_parts(w);
        let norm = metrics.e_norm(&plus);
        if norm <= self.nu {
            return Some(w.clone());
        }
        // Scale the positive part down to surrogate radius nu; the result
        // has surrogate distance exactly nu, hence lies in the set.
        Some(w - &plus * (1.0 - self.nu / norm))
    }

    fn sample(&self, metrics: &LabMetrics, rng: &mut dyn rand::RngCore) -> DVector<f64> {
        let n = metrics.m.nrows();
        let r = rng;
        let raw = DVector::from_fn(n, |_, _| -(r.random::<f64>()));
        let bump = DVector::from_fn(n, |_, _| (r.random::<f64>() * 2.0 - 1.0) * 0.1);
        let cand = &raw + &bump;
        self.project(metrics, &cand).expect("cone projection total")
    }
}

/// Scenario map `G`; must land in `B_tilde` with `(G(u) - u, u)_H = 0`.
pub trait ScenarioMap {
    fn label(&self) -> String;
    fn g(&self, metrics: &LabMetrics, mu: f64, u: &DVector<f64>) -> DVector<f64>;
}

/// `G(u) = theta clamp_+(S^{-1} u)` with `theta` fixing `(G, u)_H = mu`.
/// With the smoothing metrics `S^{-1}`
/// is entrywise nonnegative, so `G` maps into the orthant.
pub struct ClampResolvent;

impl ScenarioMap for ClampResolvent {
    fn label(&self) -> String {
        "clamp-resolvent".into()
    }

    fn g(&self, metrics: &LabMetrics, mu: f64, u: &DVector<f64>) -> DVector<f64> {
        let smooth = metrics.s_solve(u);
        let clamped = smooth.map(|x| x.max(0.0));
        let pairing = metrics.h_inner(&clamped, u);
        assert!(
            pairing > 0.0,
            "clamp-resolvent multiplier degenerate (pairing {pairing})"
        );
        &clamped * (mu / pairing)
    }
}

/// Constant map to the far end of the tangent segment: `G(u) = base + r dir`.
/// Tangency at `base` holds because `dir` is H-orthogonal to `base`.
pub struct SegmentShift {
    pub base: DVector<f64>,
    pub dir: DVector<f64>,
    pub r: f64,
}

impl ScenarioMap for SegmentShift {
    fn label(&self) -> String {
        "segment-shift".into()
    }

    fn g(&self, _metrics: &LabMetrics, _mu: f64, _u: &DVector<f64>) -> DVector<f64> {
        &self.base + &self.dir * self.r
    }
}

/// Inward-rotating tangent field on the quarter circle (`n = 2`,
/// identity metrics): `G(u) = u + omega(theta) J u`, `omega = 0.5 cos(2 theta)`.
pub struct QuarterCircleRotation;

impl ScenarioMap for QuarterCircleRotation {
    fn label(&self) -> String {
        "quarter-circle-rotation".into()
    }

    fn g(&self, _metrics: &LabMetrics, _mu: f64, u: &DVector<f64>) -> DVector<f64> {
        let theta = u[1].atan2(u[0]);
        let omega = 0.5 * (2.0 * theta).cos();
        DVector::from_vec(vec![u[0] - omega * u[1], u[1] + omega * u[0]])
    }
}

/// Wraps a map and pushes `G` outside the orthant on the patch
/// `{u_0 >= patch_level}`, with the tangency multiplier re-forced. Used to
/// build the constructed-failure scenario.
pub struct PatchPushed<M: ScenarioMap> {
    pub inner: M,
    pub patch_level: f64,
    pub push: f64,
}

impl<M: ScenarioMap> ScenarioMap for PatchPushed<M> {
    fn label(&self) -> String {
        format!("{}+patch-push", self.inner.label())
    }

    fn g(&self, metrics: &LabMetrics, mu: f64, u: &DVector<f64>) -> DVector<f64> {
        let mut g = self.inner.g(metrics, mu, u);
        if u[0] >= self.patch_level {
            let n = g.len();
            g[n - 1] -= self.push;
            // Re-force tangency by a radial correction.
            let excess = metrics.h_inner(&g, u) - mu;
            g -= u * (excess / mu);
        }
        g
    }
}

/// The real constrained graph gradient as a scenario map: `G(u) = u - grad`.
pub struct MirrorPdeMap<'a> {
    pub d: &'a Discretization,
    pub p: f64,
}

impl ScenarioMap for MirrorPdeMap<'_> {
    fn label(&self) -> String {
        "graph-gradient".into()
    }

    fn g(&self, _metrics: &LabMetrics, mu: f64, u: &DVector<f64>) -> DVector<f64> {
        let gr = constrained_gradient(self.d, u, self.p, mu).expect("gradient");
        u - &gr.grad
    }
}

/// A complete scenario: metrics, mass, constraint set and map. The lifetime
/// allows maps that borrow a discretization (the mirror scenario).
pub struct LabScenario<'a> {
    pub label: String,
    pub n: usize,
    pub metrics: LabMetrics,
    pub mu: f64,
    pub set: Box<dyn ConstraintSet + 'a>,
    pub map: Box<dyn ScenarioMap + 'a>,
    /// Scenario warnings raised at construction (regime gates).
    pub warnings: Vec<String>,
}

impl LabScenario<'_> {
    /// `V(u) = G(u) - u`; asserts the tangency contract (tolerance scaled
    /// by the field size, which can be large when the multiplier pairing is
    /// small).
    pub fn v_field(&self, u: &DVector<f64>) -> DVector<f64> {
        let g = self.map.g(&self.metrics, self.mu, u);
        let v = &g - u;
        debug_assert!(
            self.metrics.h_inner(&v, u).abs()
                <= 1e-8 * (self.mu + self.metrics.h_norm(&g) * self.metrics.h_norm(u)),
            "scenario field not tangent"
        );
        v
    }

    /// Stable fingerprint for report provenance.
    pub fn fingerprint(&self) -> String {
        hex64(fnv1a64(
            format!(
                "{};{};{};n={};mu={:e}",
                self.label,
                self.set.label(),
                self.map.label(),
                self.n,
                self.mu
            )
            .as_bytes(),
        ))
    }

    /// Orthant scenario with the clamp-resolvent map.
    pub fn orthant(n: usize, mu: f64) -> LabScenario<'static> {
        LabScenario {
            label: "orthant".into(),
            n,
            metrics: LabMetrics::smoothing(n),
            mu,
            set: Box::new(Orthant { n }),
            map: Box::new(ClampResolvent),
            warnings: Vec::new(),
        }
    }

    /// Half-space intersection scenario (two tilted walls), clamped map.
    pub fn half_spaces(n: usize, mu: f64, seed: u64) -> LabScenario<'static> {
        let metrics = LabMetrics::smoothing(n);
        let mut rng = rng_for(seed, 0);
        let mut normals = Vec::new();
        for _ in 0..2 {
            let mut a = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            // Make the negative orthant-ish region feasible: normals with
            // nonnegative entries keep w <= 0 inside.
            a = a.map(|x| x.abs());
            normals.push(a);
        }
        LabScenario {
            label: "half-spaces".into(),
            n,
            metrics,
            mu,
            set: Box::new(HalfSpaces { normals }),
            map: Box::new(NegClampResolvent),
            warnings: Vec::new(),
        }
    }

    /// Counterexample: tangent segment at a seeded sphere point; the
    /// scaling condition fails and so does the decay limit.
    pub fn shifted_ball_counterexample(n: usize, mu: f64, seed: u64) -> LabScenario<'static> {
        let metrics = LabMetrics::identity(n);
        let mut rng = rng_for(seed, 1);
        let raw = DVector::from_fn(n, |_, _| rng.random::<f64>() + 0.2);
        let base = metrics.renormalize(&raw, mu);
        // H-tangent direction at base.
        let mut dir = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let coef = metrics.h_inner(&dir, &base) / mu;
        dir -= &base * coef;
        dir /= metrics.h_norm(&dir);
        let r = 0.5 * mu.sqrt();
        LabScenario {
            label: "shifted-ball-counterexample".into(),
            n,
            metrics,
            mu,
            set: Box::new(ShiftedSegment {
                base: base.clone(),
                dir: dir.clone(),
                r,
            }),
            map: Box::new(SegmentShift { base, dir, r }),
            warnings: Vec::new(),
        }
    }

    /// Quarter-circle scenario (`n = 2`): exact invariance case.
    pub fn quarter_circle(mu: f64) -> LabScenario<'static> {
        LabScenario {
            label: "quarter-circle".into(),
            n: 2,
            metrics: LabMetrics::identity(2),
            mu,
            set: Box::new(Orthant { n: 2 }),
            map: Box::new(QuarterCircleRotation),
            warnings: Vec::new(),
        }
    }

    /// Orthant scenario with `G` pushed outside the set on a patch.
    pub fn patch_violation(n: usize, mu: f64, patch_level: f64, push: f64) -> LabScenario<'static> {
        LabScenario {
            label: "patch-violation".into(),
            n,
            metrics: LabMetrics::smoothing(n),
            mu,
            set: Box::new(Orthant { n }),
            map: Box::new(PatchPushed {
                inner: ClampResolvent,
                patch_level,
                push,
            }),
            warnings: Vec::new(),
        }
    }
}

/// Clamp-resolvent for the negative region (used by the half-space
/// scenario whose feasible set contains the negative orthant).
pub struct NegClampResolvent;

impl ScenarioMap for NegClampResolvent {
    fn label(&self) -> String {
        "neg-clamp-resolvent".into()
    }

    fn g(&self, metrics: &LabMetrics, mu: f64, u: &DVector<f64>) -> DVector<f64> {
        let smooth = metrics.s_solve(u);
        let clamped = smooth.map(|x| x.min(0.0));
        let pairing = metrics.h_inner(&clamped, u);
        assert!(pairing > 0.0, "neg-clamp multiplier degenerate");
        &clamped * (mu / pairing)
    }
}

/// Mirror scenario: the real graph gradient against `(-P)_nu` at desk scale.
pub fn mirror_pde_scenario<'a>(
    d: &'a Discretization,
    p: f64,
    mu: f64,
    nu: f64,
    mu_tilde: Option<f64>,
    nu_cap: Option<f64>,
) -> Result<(LabScenario<'a>, MirrorPdeMap<'a>)> {
    if d.n_dofs() > 60 {
        return Err(Error::InvalidParameter(format!(
            "mirror scenario needs <= 60 DOFs, got {}",
            d.n_dofs()
        )));
    }
    let mut warnings = Vec::new();
    if let Some(mt) = mu_tilde {
        if mu > mt {
            warnings.push(format!(
                "mu = {mu:.3e} above mu_tilde = {mt:.3e}: cone mapping may fail (out of regime)"
            ));
        }
    }
    if let Some(cap) = nu_cap {
        if nu > cap {
            warnings.push(format!(
                "nu = {nu:.3e} above the separation cap {cap:.3e}: level regime broken"
            ));
        }
    }
    let metrics = LabMetrics::new(d.h1_matrix().clone(), d.mass_matrix().clone())?;
    let scenario = LabScenario {
        label: "mirror-pde".into(),
        n: d.n_dofs(),
        metrics,
        mu,
        set: Box::new(NegConeNeighborhood { nu }),
        map: Box::new(MirrorPdeMap { d, p }),
        warnings,
    };
    Ok((scenario, MirrorPdeMap { d, p }))
}

/// Decay table of `s^{-1} dist(u + sV(u), B_tilde ∩ S_mu)`.
#[derive(Debug, Clone, Serialize)]
pub struct DecayTable {
    pub scenario: String,
    pub s_grid: Vec<f64>,
    pub values: Vec<f64>,
    /// Log-log least-squares slope (1 = the expected O(s) decay).
    pub slope: f64,
    pub final_entry: f64,
    /// Decay to zero at observed rate O(s) or faster.
    pub verdict: bool,
}

/// Evaluates the decay limit at `u` over a descending `s` grid.
pub fn limit_check(scenario: &LabScenario, u: &DVector<f64>, s_grid: &[f64]) -> Result<DecayTable> {
    if !s_grid.windows(2).all(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter(
            "limit_check needs a strictly decreasing s grid".into(),
        ));
    }
    let metrics = &scenario.metrics;
    if !scenario.set.contains(metrics, u, 1e-9) {
        return Err(Error::InvalidParameter(
            "limit_check start must lie in the constraint set".into(),
        ));
    }
    let v = scenario.v_field(u);
    let mut values = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let u_s = u + &v * s;
        let witness = scenario
            .set
            .sphere_witness(metrics, scenario.mu, &u_s)
            .ok_or_else(|| Error::OracleUnavailable(scenario.set.label()))?;
        values.push(metrics.e_norm(&(&u_s - &witness)) / s);
    }
    // Log-log slope over the entries that are meaningfully above roundoff.
    let pts: Vec<(f64, f64)> = s_grid
        .iter()
        .zip(&values)
        .filter(|(_, &val)| val > 1e-14)
        .map(|(&s, &val)| (s.ln(), val.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    } else {
        // Everything at roundoff: decay faster than measurable.
        1.0
    };
    let final_entry = *values.last().unwrap();
    let verdict = (slope >= 0.8 || final_entry <= 1e-12) && final_entry <= 1e-6;
    Ok(DecayTable {
        scenario: scenario.fingerprint(),
        s_grid: s_grid.to_vec(),
        values,
        slope,
        final_entry,
        verdict,
    })
}

/// Report of the step-projected flow invariance check.
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub scenario: String,
    pub starts: usize,
    pub horizon: f64,
    pub step: f64,
    pub max_violation: f64,
    pub pass: bool,
    /// Endpoint Richardson differences `(|u_h - u_{h/2}|, |u_{h/2} - u_{h/4}|)`
    /// and their ratio (about 2 for the order-1 scheme).
    pub richardson: (f64, f64, f64),
    /// Max violation per start (localization diagnostics).
    pub per_start_violation: Vec<f64>,
}

fn integrate(
    scenario: &LabScenario,
    u0: &DVector<f64>,
    horizon: f64,
    h: f64,
) -> (DVector<f64>, f64) {
    let metrics = &scenario.metrics;
    let mut u = metrics.renormalize(u0, scenario.mu);
    let mut worst = scenario.set.violation(metrics, &u);
    let steps = (horizon / h).round() as usize;
    for _ in 0..steps {
        let v = scenario.v_field(&u);
        u = metrics.renormalize(&(&u + &v * h), scenario.mu);
        worst = worst.max(scenario.set.violation(metrics, &u));
    }
    (u, worst)
}

/// Integrates `du/dt = V(u)` with step projection from seeded starts in
/// `B_tilde ∩ S_mu` and measures the worst constraint violation.
pub fn flow_invariance_check(
    scenario: &LabScenario,
    n_starts: usize,
    horizon: f64,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<InvarianceReport> {
    if n_starts == 0 || !(h > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidParameter(
            "flow_invariance_check needs starts >= 1, h > 0, horizon > 0".into(),
        ));
    }
    let metrics = &scenario.metrics;
    let mut max_violation = 0.0f64;
    let mut per_start = Vec::with_capacity(n_starts);
    let mut richardson = (0.0, 0.0, f64::NAN);
    for i in 0..n_starts {
        let mut rng = rng_for(seed, i as u64);
        let raw = scenario.set.sample(metrics, &mut rng);
        if metrics.h_norm(&raw) < 1e-12 {
            per_start.push(0.0);
            continue;
        }
        let u0 = metrics.renormalize(&raw, scenario.mu);
        let (end_h, viol) = integrate(scenario, &u0, horizon, h);
        per_start.push(viol);
        max_violation = max_violation.max(viol);
        if i == 0 {
            let (end_h2, _) = integrate(scenario, &u0, horizon, h / 2.0);
            let (end_h4, _) = integrate(scenario, &u0, horizon, h / 4.0);
            let d1 = metrics.e_norm(&(&end_h - &end_h2));
            let d2 = metrics.e_norm(&(&end_h2 - &end_h4));
            richardson = (d1, d2, if d2 > 0.0 { d1 / d2 } else { f64::NAN });
        }
    }
    Ok(InvarianceReport {
        scenario: scenario.fingerprint(),
        starts: n_starts,
        horizon,
        step: h,
        max_violation,
        pass: max_violation <= tol,
        richardson,
        per_start_violation: per_start,
    })
}

/// Convexity oracle: `theta w + (1-theta) w'` stays in the set over sampled
/// pairs. Returns the violation count.
pub fn convexity_check(scenario: &LabScenario, samples: usize, seed: u64) -> usize {
    let metrics = &scenario.metrics;
    let mut violations = 0;
    for i in 0..samples {
        let mut rng = rng_for(seed, 10_000 + i as u64);
        let w1 = scenario.set.sample(metrics, &mut rng);
        let w2 = scenario.set.sample(metrics, &mut rng);
        let theta: f64 = rng.random();
        let mid = &w1 * theta + &w2 * (1.0 - theta);
        if !scenario.set.contains(metrics, &mid, 1e-9) {
            violations += 1;
        }
    }
    violations
}

/// Scaling-condition oracle: `k w` stays in the set for `k in (0,1)`.
pub fn scaling_check(scenario: &LabScenario, samples: usize, seed: u64) -> usize {
    let metrics = &scenario.metrics;
    let mut violations = 0;
    for i in 0..samples {
        let mut rng = rng_for(seed, 20_000 + i as u64);
        let w = scenario.set.sample(metrics, &mut rng);
        let k: f64 = rng.random::<f64>().clamp(1e-6, 1.0 - 1e-6);
        if !scenario.set.contains(metrics, &(&w * k), 1e-9) {
            violations += 1;
        }
    }
    violations
}

/// One `G`-cone check record of the mirror scenario.
#[derive(Debug, Clone, Serialize)]
pub struct MirrorCheck {
    pub surrogate_in: f64,
    pub surrogate_g: f64,
    pub lambda_u: f64,
    pub g_in_half_neighborhood: bool,
}

/// Samples `(-P)_nu ∩ B_rho*` states on the mass sphere and checks
/// `G(u) in (-P)_{nu/2}` together with the multiplier sign.
pub fn mirror_g_cone_checks(
    d: &Discretization,
    p: f64,
    mu: f64,
    nu: f64,
    rho_star: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<MirrorCheck>> {
    let mut out = Vec::new();
    for i in 0..n_samples {
        let mut rng = rng_for(seed, 300 + i as u64);
        // Negative constant plus smoothed noise scaled into the kinetic
        // ball, then the positive part shrunk into the cone neighborhood.
        let noise = DVector::from_fn(d.n_dofs(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let smooth = d.s_solve(&d.m_apply(&noise));
        let unit = d.normalize_mass(&smooth, 1.0)?;
        let kin_unit = d.kinetic(&unit).max(1e-30);
        let t = (0.4 * mu.sqrt()).min(0.5 * (rho_star / kin_unit).sqrt());
        let mut u = d.normalize_mass(&(-d.kappa(mu) + &unit * t), mu)?;
        // Shrink the positive part until the surrogate is within nu/2.
        for _ in 0..60 {
            let (plus, _) = split_parts(&u);
            if d.h1_norm(&plus) <= 0.5 * nu && d.kinetic(&u) < rho_star {
                break;
            }
            u = d.normalize_mass(&(&u - &plus * 0.5), mu)?;
        }
        if d.kinetic(&u) >= rho_star {
            continue;
        }
        let gr = constrained_gradient(d, &u, p, mu)?;
        let g = &u - &gr.grad;
        let (plus_u, _) = split_parts(&u);
        let (plus_g, _) = split_parts(&g);
        let surrogate_g = d.h1_norm(&plus_g);
        out.push(MirrorCheck {
            surrogate_in: d.h1_norm(&plus_u),
            surrogate_g,
            lambda_u: gr.lambda_u,
            g_in_half_neighborhood: surrogate_g <= 0.5 * nu,
        });
    }
    if out.is_empty() {
        return Err(Error::SamplingBudgetExceeded(
            "no mirror sample fit inside the kinetic ball".into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{barrier_levels, compute_thresholds, estimate_k_constant, ProblemParams};
    use crate::graph_core::MetricGraph;
    use crate::spectrum::eigenpairs;

    fn geometric_s_grid() -> Vec<f64> {
        (0..9).map(|i| 1e-1 * 10f64.powf(-(i as f64) / 2.0)).collect()
    }

    #[test]
    fn orthant_limit_check_decays_linearly() {
        let scenario = LabScenario::orthant(4, 1.0);
        let mut rng = rng_for(3, 0);
        let raw = scenario.set.sample(&scenario.metrics, &mut rng);
        let u = scenario.metrics.renormalize(&raw, scenario.mu);
        let table = limit_check(&scenario, &u, &geometric_s_grid()).unwrap();
        assert!(table.verdict, "decay table: {:?}", table.values);
        assert!(table.final_entry <= 1e-6);
        assert!(table.slope >= 0.8 || table.final_entry <= 1e-12);
    }

    #[test]
    fn fixed_point_gives_zero_table() {
        // V = 0 at the Perron fixed point of the clamp-resolvent map: use
        // a start that the map leaves unchanged by construction: G(u) = u
        // happens when S^{-1} u is proportional to u, i.e. u is the Perron
        // eigenvector. Iterate the map to find it, then check the table.
        let scenario = LabScenario::orthant(4, 1.0);
        let metrics = &scenario.metrics;
        let mut u = metrics.renormalize(&DVector::from_element(4, 1.0), 1.0);
        for _ in 0..400 {
            let g = scenario.map.g(metrics, 1.0, &u);
            u = metrics.renormalize(&g, 1.0);
        }
        let v = scenario.v_field(&u);
        assert!(metrics.e_norm(&v) < 1e-10);
        let table = limit_check(&scenario, &u, &geometric_s_grid()).unwrap();
        for &val in &table.values {
            assert!(val < 1e-9, "entry {val} not ~0");
        }
    }

    #[test]
    fn counterexample_violates_the_decay_limit() {
        let scenario = LabScenario::shifted_ball_counterexample(4, 1.0, 5);
        // The only sphere point of the set is the base point.
        let u = match scenario
            .set
            .sphere_witness(&scenario.metrics, scenario.mu, &DVector::zeros(4))
        {
            Some(w) => w,
            None => panic!("witness"),
        };
        let table = limit_check(&scenario, &u, &geometric_s_grid()).unwrap();
        assert!(!table.verdict, "counterexample passed: {:?}", table.values);
        // Entries are bounded away from zero (= |V| up to the clamp).
        for &val in &table.values {
            assert!(val > 1e-3, "entry {val} decayed unexpectedly");
        }
        // And the scaling condition is indeed violated on samples.
        let violations = scaling_check(&scenario, 200, 7);
        assert!(violations > 0, "scaling condition unexpectedly held");
    }

    #[test]
    fn orthant_flow_is_invariant_and_first_order() {
        let scenario = LabScenario::orthant(4, 1.0);
        let report = flow_invariance_check(&scenario, 100, 10.0, 0.05, 1e-8, 11).unwrap();
        assert!(report.pass, "max violation {}", report.max_violation);
        let ratio = report.richardson.2;
        assert!(
            (1.7..=2.3).contains(&ratio),
            "Richardson ratio {ratio} outside [1.7, 2.3]"
        );
    }

    #[test]
    fn quarter_circle_is_exactly_invariant() {
        let scenario = LabScenario::quarter_circle(1.0);
        let report = flow_invariance_check(&scenario, 40, 10.0, 0.02, 1e-12, 13).unwrap();
        assert!(report.pass, "violation {}", report.max_violation);
    }

    #[test]
    fn patch_pushed_map_localizes_violations() {
        // Patch at the renormalized first coordinate; starts entering it get
        // pushed out of the orthant, others stay clean.
        let scenario = LabScenario::patch_violation(4, 1.0, 0.9, 0.3);
        let report = flow_invariance_check(&scenario, 60, 4.0, 0.05, 1e-8, 17).unwrap();
        let dirty = report
            .per_start_violation
            .iter()
            .filter(|&&v| v > 1e-6)
            .count();
        let clean = report
            .per_start_violation
            .iter()
            .filter(|&&v| v <= 1e-12)
            .count();
        assert!(dirty > 0, "no trajectory entered the patch");
        assert!(clean > 0, "violation not localized");
        assert!(!report.pass);
    }

    #[test]
    fn convexity_and_scaling_oracles_pass_for_library_sets() {
        for scenario in [
            LabScenario::orthant(4, 1.0),
            LabScenario::half_spaces(4, 1.0, 3),
        ] {
            assert_eq!(convexity_check(&scenario, 10_000, 23), 0);
            assert_eq!(scaling_check(&scenario, 10_000, 29), 0);
        }
    }

    /// Scenario contract: the map lands in the constraint set on sampled
    /// sphere points of the set.
    #[test]
    fn scenario_maps_stay_in_their_sets() {
        for scenario in [
            LabScenario::orthant(4, 1.0),
            LabScenario::half_spaces(4, 1.0, 3),
            LabScenario::quarter_circle(1.0),
        ] {
            for i in 0..50 {
                let mut rng = rng_for(41, i);
                let raw = scenario.set.sample(&scenario.metrics, &mut rng);
                if scenario.metrics.h_norm(&raw) < 1e-12 {
                    continue;
                }
                let u = scenario.metrics.renormalize(&raw, scenario.mu);
                let g = scenario.map.g(&scenario.metrics, scenario.mu, &u);
                assert!(
                    scenario.set.contains(&scenario.metrics, &g, 1e-10),
                    "{}: G(u) left the set (violation {:.3e})",
                    scenario.label,
                    scenario.set.violation(&scenario.metrics, &g)
                );
            }
        }
    }

    #[test]
    fn halfspace_limit_check_passes() {
        let scenario = LabScenario::half_spaces(4, 1.0, 3);
        let mut rng = rng_for(31, 0);
        let mut raw = scenario.set.sample(&scenario.metrics, &mut rng);
        // Keep away from the walls so the start is interior-ish.
        raw = raw.map(|x| x - 0.3);
        if !scenario.set.contains(&scenario.metrics, &raw, 0.0) {
            raw = scenario
                .set
                .project(&scenario.metrics, &raw)
                .expect("projection");
        }
        let u = scenario.metrics.renormalize(&raw, scenario.mu);
        let table = limit_check(&scenario, &u, &geometric_s_grid()).unwrap();
        assert!(table.verdict, "table {:?}", table.values);
    }

    #[test]
    fn mirror_scenario_checks_cone_mapping_in_regime() {
        // The pi-interval keeps S_1^perp inside the kinetic ball at
        // mu = mu_tilde/2 (the unit interval would not: lambda_2 too big).
        let g = MetricGraph::interval(std::f64::consts::PI).unwrap();
        let d = Discretization::assemble_uniform(&g, 40, 5).unwrap();
        assert!(d.n_dofs() <= 60);
        let p = 7.0;
        let s = eigenpairs(&d, 3, 1e-12).unwrap();
        let k_est = estimate_k_constant(&d, p, 10, 3).unwrap();
        let rep = compute_thresholds(
            &d,
            ProblemParams::new(p, 1.0).unwrap(),
            &k_est,
            &s,
            &[2],
        )
        .unwrap();
        // Regime gate (mu <= mu_tilde) plus separation feasibility
        // (lambda_2 mu < rho_star, so S_1^perp meets the kinetic ball).
        let mu = 0.5 * rep.mu_tilde.min(0.8 * rep.b / s.lambda(2));
        let (rho_star, _, _) = barrier_levels(&d, p, mu, rep.k_constant);
        let est = crate::cones::separation_delta(&d, &s, 2, mu, rho_star, 8, 3).unwrap();
        let nu = crate::cones::default_nu(&est, None);
        let (scenario, _) = mirror_pde_scenario(&d, p, mu, nu, Some(rep.mu_tilde), Some(est.delta))
            .unwrap();
        assert!(scenario.warnings.is_empty());
        let checks = mirror_g_cone_checks(&d, p, mu, nu, rho_star, 12, 7).unwrap();
        for c in &checks {
            assert!(c.lambda_u >= 0.0, "multiplier sign violated: {}", c.lambda_u);
            assert!(
                c.g_in_half_neighborhood,
                "G left the half neighborhood: {} vs {}",
                c.surrogate_g,
                0.5 * nu
            );
        }
        // Config gates: nu above the cap and mu above mu_tilde raise warnings.
        let (warned, _) =
            mirror_pde_scenario(&d, p, 2.0 * rep.mu_tilde, 2.0 * est.delta, Some(rep.mu_tilde),
                Some(est.delta))
                .unwrap();
        assert_eq!(warned.warnings.len(), 2);
    }

    #[test]
    fn mirror_scenario_rejects_large_graphs() {
        let g = MetricGraph::interval(1.0).unwrap();
        let d = Discretization::assemble_uniform(&g, 200, 5).unwrap();
        assert!(matches!(
            mirror_pde_scenario(&d, 7.0, 0.1, 0.1, None, None),
            Err(Error::InvalidParameter(_))
        ));
    }

    /// Beyond the regime (mu >> mu_tilde) negative multipliers show up; the
    /// scenario records them rather than failing.
    #[test]
    fn out_of_regime_multipliers_are_observed() {
        let g = MetricGraph::interval(1.0).unwrap();
        let d = Discretization::assemble_uniform(&g, 24, 5).unwrap();
        let p = 7.0;
        // Large mass: far beyond mu_tilde for any plausible K.
        let mu = 50.0;
        let rho_star = 1e9; // no kinetic gate; we only probe lambda_u signs
        let nu = 1.0;
        let checks = mirror_g_cone_checks(&d, p, mu, nu, rho_star, 12, 7).unwrap();
        assert!(
            checks.iter().any(|c| c.lambda_u < 0.0),
            "expected negative multipliers out of regime"
        );
    }
}
