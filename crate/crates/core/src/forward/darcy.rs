//! Steady Darcy pressure `−∇·(κ∇u) = 0` on the unit square.
//!
//! Node-centred finite volumes: every node owns the dual cell around it
//! (half cells on `y = 0, 1`), face transmissibilities are harmonic means of
//! the nodal permeabilities, `x = 0, 1` carry Dirichlet data and `y = 0, 1`
//! are no-flux. Eliminating the Dirichlet columns leaves a symmetric
//! positive definite system solved by preconditioned conjugate gradient.

use super::field::Field2D;
use crate::{error::invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preconditioner {
    Jacobi,
    /// Zero-fill incomplete Cholesky.
    IncompleteCholesky,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarcyConstants {
    /// Nodes per side.
    pub grid: usize,
    /// Width parameter of the boundary bumps.
    pub sigma_w: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub preconditioner: Preconditioner,
}

impl Default for DarcyConstants {
    fn default() -> Self {
        Self {
            grid: 65,
            sigma_w: 0.05,
            tolerance: 1e-10,
            max_iterations: 100_000,
            preconditioner: Preconditioner::IncompleteCholesky,
        }
    }
}

/// `exp(−(y − c)² / 2σ_w)`
pub fn boundary_bump(y: f64, centre: f64, sigma_w: f64) -> f64 {
    (-(y - centre).powi(2) / (2.0 * sigma_w)).exp()
}

#[derive(Clone, Debug)]
pub struct DarcySolution {
    pub u: Field2D,
    pub iterations: usize,
    /// `‖A u − b‖ / ‖b‖` of the reduced system.
    pub relative_residual: f64,
}

/// Pressure for permeability `kappa` with the bump boundary data centred at
/// `e1` (left, positive) and `e2` (right, negative).
pub fn darcy_solve(c: &DarcyConstants, kappa: &Field2D, e1: f64, e2: f64) -> Result<DarcySolution> {
    if !(0.0..=1.0).contains(&e1) || !(0.0..=1.0).contains(&e2) {
        return Err(invalid(format!("boundary centres ({e1}, {e2}) outside [0, 1]")));
    }
    let n = kappa.n;
    let h = kappa.h();
    let left: Vec<f64> = (0..n).map(|j| boundary_bump(j as f64 * h, e1, c.sigma_w)).collect();
    let right: Vec<f64> = (0..n)
        .map(|j| -boundary_bump(j as f64 * h, e2, c.sigma_w))
        .collect();
    solve_dirichlet(c, kappa, &left, &right)
}

/// Interpolated pressure at `points` (`[x₁, y₁, x₂, y₂, …]`), each point in
/// the open unit square.
pub fn darcy_observe(u: &Field2D, points: &[f64]) -> Result<Vec<f64>> {
    if points.len() % 2 != 0 {
        return Err(invalid("observation points must come in (x, y) pairs"));
    }
    points
        .chunks_exact(2)
        .map(|p| {
            if p[0] <= 0.0 || p[0] >= 1.0 || p[1] <= 0.0 || p[1] >= 1.0 {
                return Err(invalid(format!(
                    "observation point ({}, {}) not inside the open unit square",
                    p[0], p[1]
                )));
            }
            u.bilinear(p[0], p[1])
        })
        .collect()
}

/// Five-point operator on the unknown nodes `i ∈ 1..n−1`, `j ∈ 0..n`,
/// indexed `(i − 1)·n + j`. Only the couplings to the next node in each
/// direction are stored; the matrix is symmetric.
struct Stencil {
    n: usize,
    diag: Vec<f64>,
    /// Coupling `k ↔ k + 1` (next `j`), stored as a positive weight.
    east: Vec<f64>,
    /// Coupling `k ↔ k + n` (next `i`).
    north: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl Stencil {
    fn assemble(kappa: &Field2D, left: &[f64], right: &[f64]) -> (Self, Vec<f64>) {
        let n = kappa.n;
        let rows = n - 2;
        let size = rows * n;
        let mut diag = vec![0.0; size];
        let mut east = vec![0.0; size];
        let mut north = vec![0.0; size];
        let mut rhs = vec![0.0; size];
        let idx = |i: usize, j: usize| (i - 1) * n + j;

        // faces normal to x: between (i, j) and (i+1, j); half length on y-edges
        for i in 0..n - 1 {
            for j in 0..n {
                let len = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let t = len * harmonic(kappa.at(i, j), kappa.at(i + 1, j));
                let (a_in, b_in) = (i >= 1, i + 1 <= n - 2);
                if a_in {
                    diag[idx(i, j)] += t;
                }
                if b_in {
                    diag[idx(i + 1, j)] += t;
                }
                match (a_in, b_in) {
                    (true, true) => north[idx(i, j)] = t,
                    (false, true) => rhs[idx(i + 1, j)] += t * left[j],
                    (true, false) => rhs[idx(i, j)] += t * right[j],
                    (false, false) => {}
                }
            }
        }
        // faces normal to y: between (i, j) and (i, j+1); interior columns only
        for i in 1..n - 1 {
            for j in 0..n - 1 {
                let t = harmonic(kappa.at(i, j), kappa.at(i, j + 1));
                diag[idx(i, j)] += t;
                diag[idx(i, j + 1)] += t;
                east[idx(i, j)] = t;
            }
        }
        (
            Self {
                n,
                diag,
                east,
                north,
            },
            rhs,
        )
    }

    fn size(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        let size = self.size();
        for k in 0..size {
            let mut acc = self.diag[k] * x[k];
            if k % n + 1 < n {
                acc -= self.east[k] * x[k + 1];
            }
            if k % n > 0 {
                acc -= self.east[k - 1] * x[k - 1];
            }
            if k + n < size {
                acc -= self.north[k] * x[k + n];
            }
            if k >= n {
                acc -= self.north[k - n] * x[k - n];
            }
            y[k] = acc;
        }
    }
}

enum Precond {
    Jacobi(Vec<f64>),
    /// `M = (D + L) D⁻¹ (D + Lᵀ)` with `L` the strict lower part of `A`;
    /// stores the pivots `D`.
    Ic0(Vec<f64>),
}

impl Precond {
    fn build(kind: Preconditioner, a: &Stencil) -> Self {
        match kind {
            Preconditioner::Jacobi => Precond::Jacobi(a.diag.iter().map(|d| 1.0 / d).collect()),
            Preconditioner::IncompleteCholesky => {
                let n = a.n;
                let mut d = a.diag.clone();
                for k in 0..a.size() {
                    if k % n > 0 {
                        d[k] -= a.east[k - 1].powi(2) / d[k - 1];
                    }
                    if k >= n {
                        d[k] -= a.north[k - n].powi(2) / d[k - n];
                    }
                }
                Precond::Ic0(d)
            }
        }
    }

    fn apply(&self, a: &Stencil, r: &[f64], z: &mut [f64]) {
        match self {
            Precond::Jacobi(inv) => {
                for ((z, r), s) in z.iter_mut().zip(r).zip(inv) {
                    *z = r * s;
                }
            }
            Precond::Ic0(d) => {
                let n = a.n;
                let size = a.size();
                // (D + L) w = r
                for k in 0..size {
                    let mut acc = r[k];
                    if k % n > 0 {
                        acc += a.east[k - 1] * z[k - 1];
                    }
                    if k >= n {
                        acc += a.north[k - n] * z[k - n];
                    }
                    z[k] = acc / d[k];
                }
                // (D + Lᵀ) z = D w
                for k in (0..size).rev() {
                    let mut acc = 0.0;
                    if k % n + 1 < n {
                        acc += a.east[k] * z[k + 1];
                    }
                    if k + n < size {
                        acc += a.north[k] * z[k + n];
                    }
                    z[k] += acc / d[k];
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve with arbitrary Dirichlet data `left[j] = u(0, y_j)` and
/// `right[j] = u(1, y_j)`.
pub fn solve_dirichlet(
    c: &DarcyConstants,
    kappa: &Field2D,
    left: &[f64],
    right: &[f64],
) -> Result<DarcySolution> {
    let n = kappa.n;
    if n < 3 || left.len() != n || right.len() != n {
        return Err(invalid("Dirichlet data must have one value per grid row"));
    }
    if let Some(bad) = kappa.values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("permeability must be positive and finite, found {bad}")));
    }
    let (a, b) = Stencil::assemble(kappa, left, right);
    let size = a.size();
    let pre = Precond::build(c.preconditioner, &a);

    let b_norm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; size];
    let mut iterations = 0;
    let mut residual = 0.0;
    if b_norm > 0.0 {
        let mut r = b.clone();
        let mut z = vec![0.0; size];
        let mut ap = vec![0.0; size];
        pre.apply(&a, &r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        residual = 1.0;
        while residual > c.tolerance {
            if iterations == c.max_iterations {
                return Err(Error::NoConvergence {
                    iterations,
                    residual,
                });
            }
            a.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for k in 0..size {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            iterations += 1;
            residual = dot(&r, &r).sqrt() / b_norm;
            pre.apply(&a, &r, &mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..size {
                p[k] = z[k] + beta * p[k];
            }
        }
        // recurrence drift: report the true residual
        a.apply(&x, &mut ap);
        let true_r: f64 = ap.iter().zip(&b).map(|(v, w)| (v - w).powi(2)).sum();
        residual = true_r.sqrt() / b_norm;
    }

    let mut u = Vec::with_capacity(n * n);
    u.extend_from_slice(left);
    u.extend_from_slice(&x);
    u.extend_from_slice(right);
    Ok(DarcySolution {
        u: Field2D::new(n, u)?,
        iterations,
        relative_residual: residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preconditioners_agree() {
        let kappa = Field2D::from_fn(17, |x, y| (1.0 + x * y + (3.0 * x).sin()).exp());
        let ic = darcy_solve(&DarcyConstants::default(), &kappa, 0.3, 0.8).unwrap();
        let jac = darcy_solve(
            &DarcyConstants {
                preconditioner: Preconditioner::Jacobi,
                ..Default::default()
            },
            &kappa,
            0.3,
            0.8,
        )
        .unwrap();
        for (a, b) in ic.u.values.iter().zip(&jac.u.values) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(ic.iterations < jac.iterations);
    }

    #[test]
    fn rejects_non_positive_permeability() {
        let mut kappa = Field2D::constant(9, 1.0);
        kappa.values[40] = 0.0;
        assert!(darcy_solve(&DarcyConstants::default(), &kappa, 0.5, 0.5).is_err());
    }

    #[test]
    fn observation_points_must_be_interior() {
        let u = Field2D::from_fn(9, |x, _| x);
        assert!(darcy_observe(&u, &[0.0, 0.5]).is_err());
        assert!(darcy_observe(&u, &[0.5]).is_err());
        let d = darcy_observe(&u, &[0.25, 0.4, 0.7, 0.9]).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-14 && (d[1] - 0.7).abs() < 1e-14);
    }
}
