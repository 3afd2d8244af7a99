//! Compact metric graphs and their conforming piecewise-linear discretization.
//!
//! A [`MetricGraph`] is a finite set of edges, each identified with an
//! interval `[0, l_e]`, glued at shared vertices. A [`Discretization`]
//! subdivides every edge into linear cells and merges the endpoint degrees of
//! freedom of edges meeting at a vertex, so discrete fields are continuous
//! across vertices. The flux-balance vertex coupling is then the natural
//! condition of the weak form and needs no constraint rows.
//!
//! The assembled operators are
//!
//! * `A` — stiffness, the weak form of `-d^2/dx^2`,
//! * `M` — mass, the `L^2` inner product of nodal fields,
//! * `S = A + M` — the `H^1` inner product, always positive definite.
//!
//! All nonlinear integrals `int |u|^q dx` are evaluated by per-cell
//! Gauss-Legendre quadrature of configurable order so that non-integer
//! exponents are handled uniformly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

/// Coefficient vector of a continuous piecewise-linear function on a graph,
/// indexed by the global merged DOFs of a [`Discretization`].
pub type FieldOnGraph = DVector<f64>;

/// JSON graph description: named vertices plus edges with lengths and an
/// optional per-edge cell count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    pub vertices: Vec<String>,
    pub edges: Vec<EdgeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
}

/// One edge of a validated graph, endpoints as vertex indices.
/// `tail == head` is allowed (a loop).
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub length: f64,
}

/// A validated compact metric graph.
#[derive(Debug, Clone)]
pub struct MetricGraph {
    vertices: Vec<String>,
    edges: Vec<Edge>,
    requested_cells: Vec<Option<usize>>,
    total_length: f64,
}

impl MetricGraph {
    /// Validates a graph description: at least one edge, strictly positive
    /// lengths, connected incidence. Errors name the offending element.
    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        if spec.edges.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut vertices = spec.vertices.clone();
        let index_of = |names: &[String], name: &str| names.iter().position(|v| v == name);
        // Vertices referenced by edges but missing from the list are rejected
        // rather than auto-created, so typos surface early.
        let mut edges = Vec::with_capacity(spec.edges.len());
        let mut requested_cells = Vec::with_capacity(spec.edges.len());
        for (i, e) in spec.edges.iter().enumerate() {
            let tail = index_of(&vertices, &e.from).ok_or_else(|| {
                Error::InvalidGraphSpec(format!("edge {i}: unknown vertex '{}'", e.from))
            })?;
            let head = index_of(&vertices, &e.to).ok_or_else(|| {
                Error::InvalidGraphSpec(format!("edge {i}: unknown vertex '{}'", e.to))
            })?;
            if !(e.length > 0.0) || !e.length.is_finite() {
                return Err(Error::NonPositiveLength {
                    index: i,
                    from: e.from.clone(),
                    to: e.to.clone(),
                    length: e.length,
                });
            }
            if let Some(c) = e.cells {
                if c == 0 {
                    return Err(Error::InvalidGraphSpec(format!("edge {i}: zero cells")));
                }
            }
            edges.push(Edge {
                tail,
                head,
                length: e.length,
            });
            requested_cells.push(e.cells);
        }
        if vertices.is_empty() {
            // Unreachable with non-empty edges, but keep the invariant local.
            vertices.push("v0".to_string());
        }
        // Connectivity sweep from vertex 0 over undirected incidence.
        let n = vertices.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for e in &edges {
                for (a, b) in [(e.tail, e.head), (e.head, e.tail)] {
                    if a == v && !seen[b] {
                        seen[b] = true;
                        stack.push(b);
                    }
                }
            }
        }
        if let Some(unreached) = seen.iter().position(|s| !s) {
            return Err(Error::DisconnectedGraph {
                vertex: vertices[unreached].clone(),
                root: vertices[0].clone(),
            });
        }
        let total_length = edges.iter().map(|e| e.length).sum();
        Ok(Self {
            vertices,
            edges,
            requested_cells,
            total_length,
        })
    }

    /// Single edge `[0, length]` with two endpoint vertices.
    pub fn interval(length: f64) -> Result<Self> {
        Self::from_spec(&GraphSpec {
            vertices: vec!["a".into(), "b".into()],
            edges: vec![EdgeSpec {
                from: "a".into(),
                to: "b".into(),
                length,
                cells: None,
            }],
        })
    }

    /// Star: one hub, one pendant vertex per arm.
    pub fn star(arm_lengths: &[f64]) -> Result<Self> {
        let mut vertices = vec!["hub".to_string()];
        let mut edges = Vec::new();
        for (i, &l) in arm_lengths.iter().enumerate() {
            let leaf = format!("leaf{i}");
            vertices.push(leaf.clone());
            edges.push(EdgeSpec {
                from: "hub".into(),
                to: leaf,
                length: l,
                cells: None,
            });
        }
        Self::from_spec(&GraphSpec { vertices, edges })
    }

    /// Single loop of the given circumference (one vertex, one self-edge).
    pub fn loop_graph(length: f64) -> Result<Self> {
        Self::from_spec(&GraphSpec {
            vertices: vec!["o".into()],
            edges: vec![EdgeSpec {
                from: "o".into(),
                to: "o".into(),
                length,
                cells: None,
            }],
        })
    }

    /// Loop with a pendant edge attached at its vertex.
    pub fn loop_with_tail(loop_length: f64, tail_length: f64) -> Result<Self> {
        Self::from_spec(&GraphSpec {
            vertices: vec!["o".into(), "tip".into()],
            edges: vec![
                EdgeSpec {
                    from: "o".into(),
                    to: "o".into(),
                    length: loop_length,
                    cells: None,
                },
                EdgeSpec {
                    from: "o".into(),
                    to: "tip".into(),
                    length: tail_length,
                    cells: None,
                },
            ],
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertex_name(&self, v: usize) -> &str {
        &self.vertices[v]
    }

    /// Total length `l = sum of edge lengths`.
    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn requested_cells(&self) -> &[Option<usize>] {
        &self.requested_cells
    }

    /// Stable fingerprint of the graph combinatorics and lengths.
    pub fn fingerprint(&self) -> u64 {
        let mut repr = String::new();
        for e in &self.edges {
            repr.push_str(&format!("{}:{}:{:e};", e.tail, e.head, e.length));
        }
        fnv1a64(repr.as_bytes())
    }
}

/// Validated construction from a description; the spec-level entry point.
pub fn build_graph(spec: &GraphSpec) -> Result<MetricGraph> {
    MetricGraph::from_spec(spec)
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
///
/// Nodes are Newton-refined roots of the Legendre polynomial; exact for
/// polynomials of degree `2n - 1`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature order must be at least 1");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess on [-1, 1].
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[i] = 0.5 * (1.0 - x); // descending cos order becomes ascending t
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    // Sort ascending for reproducible traversal order.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| nodes[a].partial_cmp(&nodes[b]).unwrap());
    let nodes_s: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
    let weights_s: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    (nodes_s, weights_s)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Conforming P1 discretization of a metric graph with merged vertex DOFs.
///
/// Immutable after assembly; all operators are dense (graph meshes stay in
/// the hundreds of DOFs) and the Cholesky factor of `S` is precomputed.
#[derive(Debug, Clone)]
pub struct Discretization {
    graph: MetricGraph,
    cells: Vec<usize>,
    quad_order: usize,
    n_dofs: usize,
    /// Per edge: global DOF of each node along the edge, endpoints included.
    edge_dofs: Vec<Vec<usize>>,
    h_edge: Vec<f64>,
    a: DMatrix<f64>,
    m: DMatrix<f64>,
    s: DMatrix<f64>,
    s_chol: Cholesky<f64, Dyn>,
    quad_t: Vec<f64>,
    quad_w: Vec<f64>,
    m_one: DVector<f64>,
}

impl Discretization {
    /// Assembles stiffness/mass/H1 operators with `cells_per_edge[e]` linear
    /// cells on edge `e` and Gauss quadrature of `quad_order` points per cell.
    ///
    /// Loops are assembled with at least 3 cells so the merged endpoint DOF
    /// does not collapse the element topology.
    pub fn assemble(
        graph: &MetricGraph,
        cells_per_edge: &[usize],
        quad_order: usize,
    ) -> Result<Self> {
        if cells_per_edge.len() != graph.n_edges() {
            return Err(Error::InvalidParameter(format!(
                "cells_per_edge has {} entries for {} edges",
                cells_per_edge.len(),
                graph.n_edges()
            )));
        }
        if cells_per_edge.contains(&0) {
            return Err(Error::InvalidParameter(
                "every edge needs at least one cell".into(),
            ));
        }
        if quad_order < 2 {
            return Err(Error::InvalidParameter(
                "quadrature order must be at least 2".into(),
            ));
        }

        let cells: Vec<usize> = graph
            .edges()
            .iter()
            .zip(cells_per_edge)
            .map(|(e, &c)| if e.tail == e.head { c.max(3) } else { c })
            .collect();

        // Global numbering: vertices first, then edge interiors.
        let n_v = graph.n_vertices();
        let mut n_dofs = n_v;
        let mut edge_dofs = Vec::with_capacity(graph.n_edges());
        for (e, &c) in graph.edges().iter().zip(&cells) {
            let mut dofs = Vec::with_capacity(c + 1);
            dofs.push(e.tail);
            for _ in 1..c {
                dofs.push(n_dofs);
                n_dofs += 1;
            }
            dofs.push(e.head);
            edge_dofs.push(dofs);
        }

        let mut a = DMatrix::<f64>::zeros(n_dofs, n_dofs);
        let mut m = DMatrix::<f64>::zeros(n_dofs, n_dofs);
        let mut h_edge = Vec::with_capacity(graph.n_edges());
        for (ei, e) in graph.edges().iter().enumerate() {
            let c = cells[ei];
            let h = e.length / c as f64;
            h_edge.push(h);
            let a_loc = [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];
            let m_loc = [
                [h / 3.0, h / 6.0],
                [h / 6.0, h / 3.0],
            ];
            for cell in 0..c {
                let g = [edge_dofs[ei][cell], edge_dofs[ei][cell + 1]];
                for (li, &gi) in g.iter().enumerate() {
                    for (lj, &gj) in g.iter().enumerate() {
                        a[(gi, gj)] += a_loc[li][lj];
                        m[(gi, gj)] += m_loc[li][lj];
                    }
                }
            }
        }
        let s = &a + &m;
        let s_chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::LinearSolveFailure("S = A + M is not SPD".into()))?;
        let (quad_t, quad_w) = gauss_legendre_unit(quad_order);
        let one = DVector::from_element(n_dofs, 1.0);
        let m_one = &m * &one;

        Ok(Self {
            graph: graph.clone(),
            cells,
            quad_order,
            n_dofs,
            edge_dofs,
            h_edge,
            a,
            m,
            s,
            s_chol,
            quad_t,
            quad_w,
            m_one,
        })
    }

    /// Same cell count on every edge (honoring per-edge requests from the
    /// graph description when present).
    pub fn assemble_uniform(graph: &MetricGraph, cells: usize, quad_order: usize) -> Result<Self> {
        let counts: Vec<usize> = graph
            .requested_cells()
            .iter()
            .map(|c| c.unwrap_or(cells))
            .collect();
        Self::assemble(graph, &counts, quad_order)
    }

    /// Cell counts targeting a uniform mesh width `h_target` across edges.
    pub fn cells_for_target_h(graph: &MetricGraph, h_target: f64) -> Vec<usize> {
        graph
            .edges()
            .iter()
            .map(|e| ((e.length / h_target).ceil() as usize).max(1))
            .collect()
    }

    pub fn graph(&self) -> &MetricGraph {
        &self.graph
    }

    pub fn n_dofs(&self) -> usize {
        self.n_dofs
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn quad_order(&self) -> usize {
        self.quad_order
    }

    pub fn edge_dofs(&self, edge: usize) -> &[usize] {
        &self.edge_dofs[edge]
    }

    pub fn cell_width(&self, edge: usize) -> f64 {
        self.h_edge[edge]
    }

    /// Largest cell width over all edges.
    pub fn h_max(&self) -> f64 {
        self.h_edge.iter().cloned().fold(0.0, f64::max)
    }

    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn mass_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn h1_matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn a_apply(&self, u: &FieldOnGraph) -> DVector<f64> {
        &self.a * u
    }

    pub fn m_apply(&self, u: &FieldOnGraph) -> DVector<f64> {
        &self.m * u
    }

    pub fn s_apply(&self, u: &FieldOnGraph) -> DVector<f64> {
        &self.s * u
    }

    /// Solves `S x = b` with the precomputed Cholesky factor.
    pub fn s_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.s_chol.solve(b)
    }

    /// `u' A v` (kinetic pairing).
    pub fn a_inner(&self, u: &FieldOnGraph, v: &FieldOnGraph) -> f64 {
        (&self.a * v).dot(u)
    }

    /// `u' M v` (L2 pairing).
    pub fn m_inner(&self, u: &FieldOnGraph, v: &FieldOnGraph) -> f64 {
        (&self.m * v).dot(u)
    }

    /// `u' S v` (H1 pairing).
    pub fn s_inner(&self, u: &FieldOnGraph, v: &FieldOnGraph) -> f64 {
        (&self.s * v).dot(u)
    }

    /// `int |u'|^2 dx`.
    pub fn kinetic(&self, u: &FieldOnGraph) -> f64 {
        self.a_inner(u, u)
    }

    /// `int |u|^2 dx`.
    pub fn mass(&self, u: &FieldOnGraph) -> f64 {
        self.m_inner(u, u)
    }

    /// `||u||_{H^1}^2 = int |u'|^2 + |u|^2 dx`.
    pub fn h1_norm_sq(&self, u: &FieldOnGraph) -> f64 {
        self.s_inner(u, u)
    }

    pub fn h1_norm(&self, u: &FieldOnGraph) -> f64 {
        self.h1_norm_sq(u).max(0.0).sqrt()
    }

    /// Gauss quadrature of `int |u|^q dx` over all cells; `q >= 1`.
    pub fn integrate_power(&self, u: &FieldOnGraph, q: f64) -> Result<f64> {
        if !(q >= 1.0) {
            return Err(Error::InvalidExponent { q });
        }
        debug_assert_eq!(u.len(), self.n_dofs);
        let mut total = 0.0;
        for (ei, dofs) in self.edge_dofs.iter().enumerate() {
            let h = self.h_edge[ei];
            for cell in 0..self.cells[ei] {
                let u0 = u[dofs[cell]];
                let u1 = u[dofs[cell + 1]];
                let mut acc = 0.0;
                for (t, w) in self.quad_t.iter().zip(&self.quad_w) {
                    let val = u0 + (u1 - u0) * t;
                    acc += w * val.abs().powf(q);
                }
                total += h * acc;
            }
        }
        Ok(total)
    }

    /// Quadrature of `int f(u(x)) phi_i(x) dx` for all hat functions, i.e.
    /// the weak load of the pointwise nonlinearity `f`.
    pub fn weak_load(&self, u: &FieldOnGraph, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut load = DVector::zeros(self.n_dofs);
        for (ei, dofs) in self.edge_dofs.iter().enumerate() {
            let h = self.h_edge[ei];
            for cell in 0..self.cells[ei] {
                let g0 = dofs[cell];
                let g1 = dofs[cell + 1];
                let u0 = u[g0];
                let u1 = u[g1];
                let mut acc0 = 0.0;
                let mut acc1 = 0.0;
                for (t, w) in self.quad_t.iter().zip(&self.quad_w) {
                    let val = f(u0 + (u1 - u0) * t);
                    acc0 += w * val * (1.0 - t);
                    acc1 += w * val * t;
                }
                load[g0] += h * acc0;
                load[g1] += h * acc1;
            }
        }
        load
    }

    /// `mean(u) = (1' M u) / l`.
    pub fn mean_value(&self, u: &FieldOnGraph) -> f64 {
        self.m_one.dot(u) / self.graph.total_length()
    }

    /// Constant field `value` on every DOF.
    pub fn constant_field(&self, value: f64) -> FieldOnGraph {
        DVector::from_element(self.n_dofs, value)
    }

    /// The constant state of mass `mu`: `kappa_mu = sqrt(mu / l)`.
    pub fn kappa(&self, mu: f64) -> FieldOnGraph {
        self.constant_field((mu / self.graph.total_length()).sqrt())
    }

    /// Rescales `u` onto the mass sphere `u' M u = mu`. Scales twice so the
    /// constraint holds to machine precision even on large meshes.
    pub fn normalize_mass(&self, u: &FieldOnGraph, mu: f64) -> Result<FieldOnGraph> {
        let m0 = self.mass(u);
        if !(m0 > 0.0) {
            return Err(Error::InvalidParameter(
                "cannot normalize a zero field onto the mass sphere".into(),
            ));
        }
        if (m0 - mu).abs() <= 32.0 * f64::EPSILON * mu {
            return Ok(u.clone());
        }
        let mut v = u * (mu / m0).sqrt();
        let m1 = self.mass(&v);
        if m1 > 0.0 && (m1 - mu).abs() > 1e-15 * mu {
            v *= (mu / m1).sqrt();
        }
        Ok(v)
    }

    /// Nodal interpolation of `f(edge, x)` with `x` the arclength coordinate
    /// along the edge. `f` must be continuous across vertices.
    pub fn interpolate(&self, f: impl Fn(usize, f64) -> f64) -> FieldOnGraph {
        let mut u = DVector::zeros(self.n_dofs);
        for (ei, dofs) in self.edge_dofs.iter().enumerate() {
            let h = self.h_edge[ei];
            for (j, &g) in dofs.iter().enumerate() {
                u[g] = f(ei, j as f64 * h);
            }
        }
        u
    }

    /// Signed sum over incident edges of the derivative pointing away from
    /// each vertex, recovered from the first/last cell slope. Vanishes to
    /// O(h) at discrete critical points.
    pub fn vertex_flux_imbalance(&self, u: &FieldOnGraph) -> Vec<f64> {
        let mut flux = vec![0.0; self.graph.n_vertices()];
        for (ei, e) in self.graph.edges().iter().enumerate() {
            let dofs = &self.edge_dofs[ei];
            let h = self.h_edge[ei];
            let n = dofs.len();
            // Derivative away from the tail.
            flux[e.tail] += (u[dofs[1]] - u[dofs[0]]) / h;
            // Derivative away from the head.
            flux[e.head] += (u[dofs[n - 2]] - u[dofs[n - 1]]) / h;
        }
        flux
    }

    /// Counts strict sign alternations of the nodal values along every edge,
    /// ignoring entries with `|u_i| <= threshold`.
    pub fn sign_changes(&self, u: &FieldOnGraph, threshold: f64) -> usize {
        let mut count = 0;
        for dofs in &self.edge_dofs {
            let mut last: Option<f64> = None;
            for &g in dofs {
                let v = u[g];
                if v.abs() <= threshold {
                    continue;
                }
                if let Some(prev) = last {
                    if prev * v < 0.0 {
                        count += 1;
                    }
                }
                last = Some(v);
            }
        }
        count
    }

    /// Fingerprint combining the graph, mesh and quadrature order.
    pub fn fingerprint(&self) -> u64 {
        let mut repr = format!("g{:016x};q{};", self.graph.fingerprint(), self.quad_order);
        for c in &self.cells {
            repr.push_str(&format!("{c},"));
        }
        fnv1a64(repr.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn build_single_edge_interval() {
        let g = MetricGraph::interval(std::f64::consts::PI).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_relative_eq!(g.total_length(), std::f64::consts::PI);
    }

    #[test]
    fn build_three_star_total_length() {
        let g = MetricGraph::star(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g.n_edges(), 3);
        assert_relative_eq!(g.total_length(), 3.0);
    }

    #[test]
    fn zero_length_edge_rejected() {
        let spec = GraphSpec {
            vertices: vec!["a".into(), "b".into()],
            edges: vec![EdgeSpec {
                from: "a".into(),
                to: "b".into(),
                length: 0.0,
                cells: None,
            }],
        };
        match MetricGraph::from_spec(&spec) {
            Err(Error::NonPositiveLength { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected NonPositiveLength, got {other:?}"),
        }
    }

    #[test]
    fn empty_graph_rejected() {
        let spec = GraphSpec {
            vertices: vec!["a".into()],
            edges: vec![],
        };
        assert!(matches!(
            MetricGraph::from_spec(&spec),
            Err(Error::EmptyGraph)
        ));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let spec = GraphSpec {
            vertices: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            edges: vec![
                EdgeSpec {
                    from: "a".into(),
                    to: "b".into(),
                    length: 1.0,
                    cells: None,
                },
                EdgeSpec {
                    from: "c".into(),
                    to: "d".into(),
                    length: 1.0,
                    cells: None,
                },
            ],
        };
        match MetricGraph::from_spec(&spec) {
            Err(Error::DisconnectedGraph { vertex, .. }) => {
                assert!(vertex == "c" || vertex == "d");
            }
            other => panic!("expected DisconnectedGraph, got {other:?}"),
        }
    }

    /// Hand-assembled two-cell P1 matrices on [0, 1]; the independent oracle
    /// for the assembly path.
    #[test]
    fn two_cell_interval_matrices() {
        let g = MetricGraph::interval(1.0).unwrap();
        let d = Discretization::assemble(&g, &[2], 5).unwrap();
        assert_eq!(d.n_dofs(), 3);
        let h = 0.5;
        // DOFs: 0 = left vertex, 1 = right vertex, 2 = midpoint.
        let perm = [0usize, 2, 1]; // chain order left, mid, right
        let a_oracle = [
            [1.0 / h, -1.0 / h, 0.0],
            [-1.0 / h, 2.0 / h, -1.0 / h],
            [0.0, -1.0 / h, 1.0 / h],
        ];
        let m_oracle = [
            [2.0 * h / 6.0, h / 6.0, 0.0],
            [h / 6.0, 4.0 * h / 6.0, h / 6.0],
            [0.0, h / 6.0, 2.0 * h / 6.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(
                    d.stiffness()[(perm[i], perm[j])],
                    a_oracle[i][j],
                    max_relative = 1e-15
                );
                assert_relative_eq!(
                    d.mass_matrix()[(perm[i], perm[j])],
                    m_oracle[i][j],
                    max_relative = 1e-15
                );
            }
        }
    }

    #[test]
    fn stiffness_annihilates_constants_and_mass_integrates_one() {
        for g in [
            MetricGraph::star(&[0.7, 1.3, 0.5]).unwrap(),
            MetricGraph::loop_with_tail(2.0, 1.0).unwrap(),
        ] {
            let d = Discretization::assemble_uniform(&g, 7, 5).unwrap();
            let one = d.constant_field(1.0);
            let a_one = d.a_apply(&one);
            assert!(a_one.amax() < 1e-12);
            assert_relative_eq!(d.mass(&one), g.total_length(), max_relative = 1e-13);
        }
    }

    #[test]
    fn operators_are_exactly_symmetric() {
        let g = MetricGraph::loop_with_tail(2.0, 0.8).unwrap();
        let d = Discretization::assemble_uniform(&g, 9, 5).unwrap();
        let n = d.n_dofs();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(d.stiffness()[(i, j)], d.stiffness()[(j, i)]);
                assert_eq!(d.mass_matrix()[(i, j)], d.mass_matrix()[(j, i)]);
            }
        }
    }

    #[test]
    fn integrate_power_constant_and_zero() {
        let g = MetricGraph::star(&[1.0, 1.0, 1.0]).unwrap();
        let d = Discretization::assemble_uniform(&g, 8, 5).unwrap();
        let p = 7.0;
        let mu = 0.3;
        let ell = g.total_length();
        let kappa = d.kappa(mu);
        let expect = ell * (mu / ell).powf(p / 2.0);
        assert_relative_eq!(
            d.integrate_power(&kappa, p).unwrap(),
            expect,
            max_relative = 1e-12
        );
        let zero = d.constant_field(0.0);
        assert_eq!(d.integrate_power(&zero, p).unwrap(), 0.0);
        // Non-integer exponent on a constant: still exact.
        let q = 3.7;
        assert_relative_eq!(
            d.integrate_power(&kappa, q).unwrap(),
            ell * (mu / ell).powf(q / 2.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn integrate_power_rejects_q_below_one() {
        let g = MetricGraph::interval(1.0).unwrap();
        let d = Discretization::assemble_uniform(&g, 4, 5).unwrap();
        let u = d.constant_field(1.0);
        assert!(matches!(
            d.integrate_power(&u, 0.5),
            Err(Error::InvalidExponent { .. })
        ));
    }

    /// int_0^pi (2/pi)^2 cos^4 x dx = 3 / (2 pi); checked under refinement
    /// with the expected O(h^2) interpolation error.
    #[test]
    fn cos_fourth_power_quadrature_converges_second_order() {
        let g = MetricGraph::interval(std::f64::consts::PI).unwrap();
        let exact = 3.0 / (2.0 * std::f64::consts::PI);
        let amp = (2.0 / std::f64::consts::PI).sqrt();
        let mut errors = Vec::new();
        for cells in [64usize, 128, 256] {
            let d = Discretization::assemble_uniform(&g, cells, 5).unwrap();
            let u = d.interpolate(|_, x| amp * x.cos());
            let val = d.integrate_power(&u, 4.0).unwrap();
            errors.push((val - exact).abs());
        }
        assert!(errors[2] < 1e-4);
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (3.5..=4.5).contains(&ratio),
                "refinement ratio {ratio} outside [3.5, 4.5]"
            );
        }
    }

    #[test]
    fn mean_value_examples() {
        let g = MetricGraph::interval(2.0).unwrap();
        let d = Discretization::assemble_uniform(&g, 10, 5).unwrap();
        let c = d.constant_field(4.2);
        assert_relative_eq!(d.mean_value(&c), 4.2, max_relative = 1e-14);
        // Odd field about the midpoint of a symmetric mesh.
        let odd = d.interpolate(|_, x| if x < 1.0 { -1.0 } else if x > 1.0 { 1.0 } else { 0.0 });
        assert!(d.mean_value(&odd).abs() < 1e-14);
    }

    #[test]
    fn merged_vertex_dof_is_shared() {
        let g = MetricGraph::star(&[1.0, 1.0, 1.0]).unwrap();
        let d = Discretization::assemble_uniform(&g, 5, 5).unwrap();
        let hub_dofs: Vec<usize> = (0..3).map(|e| d.edge_dofs(e)[0]).collect();
        assert!(hub_dofs.iter().all(|&x| x == hub_dofs[0]));
        let u = d.interpolate(|_, x| 1.0 + x * x);
        for e in 0..3 {
            assert_eq!(u[d.edge_dofs(e)[0]], u[hub_dofs[0]]);
        }
    }

    #[test]
    fn loop_gets_at_least_three_cells() {
        let g = MetricGraph::loop_graph(1.0).unwrap();
        let d = Discretization::assemble(&g, &[1], 5).unwrap();
        assert!(d.cells()[0] >= 3);
        // Mass of the constant is still exact.
        let one = d.constant_field(1.0);
        assert_relative_eq!(d.mass(&one), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn gauss_rules_integrate_polynomials_exactly() {
        for n in 2..=8 {
            let (t, w) = gauss_legendre_unit(n);
            for deg in 0..(2 * n) {
                let val: f64 = t
                    .iter()
                    .zip(&w)
                    .map(|(&ti, &wi)| wi * ti.powi(deg as i32))
                    .sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert_relative_eq!(val, exact, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn sign_change_counting_on_interpolated_cosine() {
        let g = MetricGraph::interval(std::f64::consts::PI).unwrap();
        let d = Discretization::assemble_uniform(&g, 64, 5).unwrap();
        let u = d.interpolate(|_, x| x.cos());
        assert_eq!(d.sign_changes(&u, 1e-9), 1);
        let u2 = d.interpolate(|_, x| (2.0 * x).cos());
        assert_eq!(d.sign_changes(&u2, 1e-9), 2);
    }
}
