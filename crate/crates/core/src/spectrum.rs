//! Eigenvalue ladder of the Kirchhoff Laplacian: `A phi = lambda M phi`.
//!
//! The solver is a blocked shift-invert subspace iteration on `S = A + M`
//! (i.e. power iteration for `S^{-1} M`, whose dominant eigenvectors are the
//! low modes of the pencil), with full M-reorthonormalization and a
//! Rayleigh-Ritz projection every sweep. Start vectors come from a fixed
//! seeded RNG so repeated runs produce identical eigenfunction bases, also
//! inside multiple eigenspaces.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph_core::{Discretization, FieldOnGraph};
use crate::util::rng_for;

/// Default seed for eigensolver start vectors.
pub const DEFAULT_EIGEN_SEED: u64 = 0x9e1c_5a2b;

/// Relative gap tolerance below which two neighboring eigenvalues are
/// treated as equal when admissible indices are selected.
pub const GAP_RTOL: f64 = 1e-6;

/// First `k` eigenpairs of the pencil `(A, M)`, ascending and M-orthonormal.
#[derive(Debug, Clone)]
pub struct SpectralData {
    /// Eigenvalues `lambda_1 <= ... <= lambda_k` (units 1/length^2).
    pub eigenvalues: Vec<f64>,
    /// M-normalized eigenfunctions, `int phi_i^2 dx = 1`.
    pub eigenfunctions: Vec<FieldOnGraph>,
    /// Seed that fixed the start vectors (and hence the basis inside
    /// multiple eigenspaces).
    pub seed: u64,
    /// Sweeps used by the subspace iteration.
    pub iterations: usize,
    /// Max over returned pairs of `||A phi - lambda M phi||_{S^-1}`.
    pub max_residual: f64,
}

impl SpectralData {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// 1-based access mirroring the lambda_k notation; `lambda(1) = 0`.
    pub fn lambda(&self, k: usize) -> f64 {
        self.eigenvalues[k - 1]
    }

    /// 1-based eigenfunction access.
    pub fn phi(&self, k: usize) -> &FieldOnGraph {
        &self.eigenfunctions[k - 1]
    }
}

/// Computes the first `k` eigenpairs with the default seed.
pub fn eigenpairs(d: &Discretization, k: usize, tol: f64) -> Result<SpectralData> {
    eigenpairs_seeded(d, k, tol, DEFAULT_EIGEN_SEED)
}

/// Computes the first `k` eigenpairs of `A phi = lambda M phi`.
///
/// `tol` controls the eigenvalue stagnation test; the sign convention fixes
/// each eigenfunction so its value at the lowest-indexed DOF with
/// `|phi| > tol` is positive.
pub fn eigenpairs_seeded(d: &Discretization, k: usize, tol: f64, seed: u64) -> Result<SpectralData> {
    let n = d.n_dofs();
    if k == 0 || tol <= 0.0 {
        return Err(Error::InvalidParameter(
            "eigenpairs needs k >= 1 and tol > 0".into(),
        ));
    }
    if k + 2 > n {
        return Err(Error::InvalidParameter(format!(
            "k = {k} too large for {n} DOFs"
        )));
    }
    let m_block = (2 * k + 8).min(n);
    let mut rng = rng_for(seed, 0);
    let mut x = DMatrix::<f64>::from_fn(n, m_block, |_, _| rng.random::<f64>() * 2.0 - 1.0);

    let max_sweeps = 600;
    let mut prev = vec![f64::INFINITY; k];
    let mut stagnant = 0usize;
    let mut sweeps = 0usize;
    let mut last_shift = f64::INFINITY;
    while sweeps < max_sweeps {
        sweeps += 1;
        // One shift-invert application per column: Y = S^{-1} M X.
        let mx = d.mass_matrix() * &x;
        let mut y = DMatrix::<f64>::zeros(n, m_block);
        for j in 0..m_block {
            let col = d.s_solve(&mx.column(j).into_owned());
            y.set_column(j, &col);
        }
        m_orthonormalize(d, &mut y)?;
        // Rayleigh-Ritz on the stiffness.
        let ay = d.stiffness() * &y;
        let mut ar = y.transpose() * &ay;
        symmetrize(&mut ar);
        let eig = SymmetricEigen::new(ar);
        let order = ascending_order(&eig.eigenvalues);
        let mut q = DMatrix::<f64>::zeros(m_block, m_block);
        for (pos, &src) in order.iter().enumerate() {
            q.set_column(pos, &eig.eigenvectors.column(src).into_owned());
        }
        x = &y * &q;
        let ritz: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

        last_shift = (0..k)
            .map(|i| (ritz[i] - prev[i]).abs() / ritz[i].abs().max(1.0))
            .fold(0.0, f64::max);
        prev[..k].copy_from_slice(&ritz[..k]);
        if last_shift <= tol {
            stagnant += 1;
            if stagnant >= 2 {
                break;
            }
        } else {
            stagnant = 0;
        }
    }
    if sweeps >= max_sweeps && last_shift > tol {
        return Err(Error::ConvergenceFailure {
            iterations: sweeps,
            k,
            shift: last_shift,
        });
    }

    // Final polish: exact Rayleigh quotients and the sign convention.
    let mut eigenvalues = Vec::with_capacity(k);
    let mut eigenfunctions = Vec::with_capacity(k);
    let mut max_residual: f64 = 0.0;
    for i in 0..k {
        let mut phi = x.column(i).into_owned();
        let norm = d.mass(&phi).sqrt();
        phi /= norm;
        fix_sign(&mut phi, tol);
        let lambda = d.a_inner(&phi, &phi);
        let r = d.a_apply(&phi) - d.m_apply(&phi) * lambda;
        let res = d.s_solve(&r).dot(&r).max(0.0).sqrt();
        max_residual = max_residual.max(res);
        eigenvalues.push(lambda);
        eigenfunctions.push(phi);
    }

    Ok(SpectralData {
        eigenvalues,
        eigenfunctions,
        seed,
        iterations: sweeps,
        max_residual,
    })
}

/// Indices `k >= 2` with a genuine spectral gap `lambda_{k-1} < lambda_k`,
/// using the relative tolerance [`GAP_RTOL`]. These are the admissible
/// linking indices.
pub fn spectral_gap_indices(s: &SpectralData) -> Vec<usize> {
    let mut out = Vec::new();
    for k in 2..=s.len() {
        let lo = s.lambda(k - 1);
        let hi = s.lambda(k);
        if hi - lo > GAP_RTOL * (1.0 + hi.abs()) {
            out.push(k);
        }
    }
    out
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn ascending_order(vals: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    idx
}

/// Two-pass modified Gram-Schmidt in the M inner product.
fn m_orthonormalize(d: &Discretization, y: &mut DMatrix<f64>) -> Result<()> {
    let cols = y.ncols();
    for _pass in 0..2 {
        for j in 0..cols {
            let mut col = y.column(j).into_owned();
            for i in 0..j {
                let prev = y.column(i).into_owned();
                let proj = d.m_inner(&prev, &col);
                col -= prev * proj;
            }
            let norm = d.mass(&col).max(0.0).sqrt();
            if norm < 1e-300 {
                return Err(Error::LinearSolveFailure(
                    "subspace collapsed during orthonormalization".into(),
                ));
            }
            col /= norm;
            y.set_column(j, &col);
        }
    }
    Ok(())
}

fn fix_sign(phi: &mut FieldOnGraph, tol: f64) {
    for i in 0..phi.len() {
        if phi[i].abs() > tol {
            if phi[i] < 0.0 {
                *phi = -&*phi;
            }
            return;
        }
    }
}
