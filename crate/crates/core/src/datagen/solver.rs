//! Matrix-free preconditioned conjugate gradients on the SPD form of each problem.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{self, GridField, PdeKind};

/// Iteration budget as a multiple of the interior unknown count.
const MAX_ITER_FACTOR: usize = 4;

/// Negated operator `A u` so that the system `A u = b` is symmetric positive definite.
fn apply(kind: PdeKind, a: &[f64], u: &[f64], n: usize, h: f64, out: &mut [f64]) {
    match kind {
        PdeKind::Darcy => grid::darcy_operator_kernel(a, u, n, h, out),
        PdeKind::Poisson | PdeKind::Helmholtz { .. } => {
            grid::laplacian_kernel(u, n, h, out);
            let k2 = match kind {
                PdeKind::Helmholtz { k } => k * k,
                _ => 0.0,
            };
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    let c = i * n + j;
                    out[c] = -out[c] - k2 * u[c];
                }
            }
        }
    }
}

fn diagonal(kind: PdeKind, a: &[f64], n: usize, h: f64) -> Vec<f64> {
    let inv = 1.0 / (h * h);
    let mut d = vec![1.0; n * n];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            d[c] = match kind {
                PdeKind::Darcy => {
                    0.5 * (4.0 * a[c] + a[c + n] + a[c - n] + a[c + 1] + a[c - 1]) * inv
                }
                PdeKind::Poisson => 4.0 * inv,
                PdeKind::Helmholtz { k } => 4.0 * inv - k * k,
            };
        }
    }
    d
}

fn rhs(kind: PdeKind, a: &[f64], n: usize) -> Vec<f64> {
    let mut b = vec![0.0; n * n];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            b[c] = match kind {
                PdeKind::Darcy => 1.0,
                _ => -a[c],
            };
        }
    }
    b
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Solves the forward problem for `u` with `u = 0` on the boundary.
///
/// Stops once `||R||_2 h^2 <= tol`, with `R` evaluated by the same kernel as
/// [`grid::residual`].
pub fn solve_forward(kind: PdeKind, a: &GridField, tol: f64) -> Result<GridField> {
    kind.validate()?;
    a.check_finite()?;
    let g = a.grid();
    let (n, h) = (g.n(), g.h());
    if let PdeKind::Darcy = kind {
        for ((i, j), &v) in a.values().indexed_iter() {
            if v <= 0.0 {
                return Err(Error::NonElliptic { value: v, i, j });
            }
        }
    }
    if let PdeKind::Helmholtz { k } = kind {
        // smallest eigenvalue of the discrete Dirichlet Laplacian
        let s = (std::f64::consts::PI * h / 2.0).sin();
        let lam = 8.0 * s * s / (h * h);
        if k * k >= lam {
            return Err(Error::Datagen(format!(
                "helmholtz k^2 = {} is not below the smallest grid eigenvalue {lam:.4}",
                k * k
            )));
        }
    }
    let av = a.as_slice();
    let b = rhs(kind, av, n);
    let dinv: Vec<f64> = diagonal(kind, av, n, h).iter().map(|d| 1.0 / d).collect();
    let h2 = h * h;
    let mut u = vec![0.0; n * n];
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n * n];
    let mut rz = dot(&r, &z);
    // Stop a little below the requested tolerance so the recomputed residual
    // still passes after round-off.
    let target = 0.5 * tol;
    let max_iter = MAX_ITER_FACTOR * g.interior_count() + 100;
    let mut rnorm = dot(&r, &r).sqrt() * h2;
    let mut it = 0;
    while rnorm > target {
        if it >= max_iter {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: rnorm,
            });
        }
        apply(kind, av, &p, n, h, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for c in 0..n * n {
            u[c] += alpha * p[c];
            r[c] -= alpha * ap[c];
        }
        // periodic true-residual refresh limits drift in long solves
        if it % 50 == 49 {
            apply(kind, av, &u, n, h, &mut ap);
            for c in 0..n * n {
                r[c] = b[c] - ap[c];
            }
        }
        for c in 0..n * n {
            z[c] = r[c] * dinv[c];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for c in 0..n * n {
            p[c] = z[c] + beta * p[c];
        }
        rnorm = dot(&r, &r).sqrt() * h2;
        it += 1;
    }
    let mut check = vec![0.0; n * n];
    grid::residual_kernel(kind, av, &u, n, h, &mut check);
    let final_norm = dot(&check, &check).sqrt() * h2;
    if final_norm > tol {
        return Err(Error::NoConvergence {
            iterations: it,
            residual: final_norm,
        });
    }
    GridField::new(g, Array2::from_shape_vec((n, n), u).expect("shape"))
}
