//! Uniform-grid discretizations of the elliptic operators and the field metrics.
//!
//! The grid is vertex-centred on the closed unit square: `n` points per side
//! including the Dirichlet boundary, spacing `h = 1/(n-1)`. Field values are
//! stored as `values[[i, j]]` at `(x, y) = (i h, j h)`, so the first axis is the
//! `x` direction.
//!
//! Residuals are evaluated on interior nodes only; the boundary ring of every
//! residual field is exactly zero.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform `n x n` vertex grid on `[0, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    n: usize,
}

impl Grid2D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Grid(format!("need at least 3 points per side, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    /// Coordinate of index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn interior_count(&self) -> usize {
        (self.n - 2) * (self.n - 2)
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.n - 1 || j == self.n - 1
    }
}

/// Scalar field sampled on a [`Grid2D`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    grid: Grid2D,
    values: Array2<f64>,
}

impl GridField {
    pub fn new(grid: Grid2D, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid.n, grid.n) {
            return Err(Error::Grid(format!(
                "field shape {:?} does not match grid n = {}",
                values.dim(),
                grid.n
            )));
        }
        check_finite("field", values.iter())?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.n, grid.n)),
        }
    }

    pub fn constant(grid: Grid2D, c: f64) -> Self {
        Self {
            grid,
            values: Array2::from_elem((grid.n, grid.n), c),
        }
    }

    /// Samples `f(x, y)` at every node.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn((grid.n, grid.n), |(i, j)| f(grid.coord(i), grid.coord(j)));
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Row-major view of the values.
    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("grid fields are always standard layout")
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite("field", self.values.iter())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_interior(&self) -> f64 {
        let n = self.grid.n;
        let mut m = 0.0f64;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                m = m.max(self.values[[i, j]].abs());
            }
        }
        m
    }

    fn same_grid(&self, other: &GridField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Grid(format!(
                "grid mismatch: n = {} vs n = {}",
                self.grid.n, other.grid.n
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_finite<'a>(what: &'static str, it: impl Iterator<Item = &'a f64>) -> Result<()> {
    for (index, v) in it.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what, index });
        }
    }
    Ok(())
}

/// Which elliptic problem a state belongs to. All carry homogeneous Dirichlet data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PdeKind {
    /// `-div(a grad u) = 1`.
    Darcy,
    /// `lap u = a`.
    Poisson,
    /// `lap u + k^2 u = a`.
    Helmholtz { k: f64 },
}

impl PdeKind {
    pub fn helmholtz(k: f64) -> Result<Self> {
        let kind = PdeKind::Helmholtz { k };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if let PdeKind::Helmholtz { k } = *self {
            if !k.is_finite() {
                return Err(Error::Grid(format!("helmholtz wavenumber {k} is not finite")));
            }
            let k2 = k * k;
            let pi2 = std::f64::consts::PI * std::f64::consts::PI;
            // Dirichlet eigenvalues of -lap on the unit square are (m^2 + n^2) pi^2.
            let q = k2 / pi2;
            let top = q.ceil() as u64 + 1;
            for m in 1..=top {
                for l in 1..=top {
                    if (((m * m + l * l) as f64) - q).abs() < 1e-12 * q.max(1.0) {
                        return Err(Error::Grid(format!(
                            "k^2 = {k2} coincides with the Dirichlet eigenvalue ({m}^2 + {l}^2) pi^2"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            PdeKind::Darcy => "darcy",
            PdeKind::Poisson => "poisson",
            PdeKind::Helmholtz { .. } => "helmholtz",
        }
    }

    pub fn parse(name: &str, k: f64) -> Result<Self> {
        match name {
            "darcy" => Ok(PdeKind::Darcy),
            "poisson" => Ok(PdeKind::Poisson),
            "helmholtz" => PdeKind::helmholtz(k),
            other => Err(Error::Grid(format!("unknown pde kind `{other}`"))),
        }
    }
}

/// Joint coefficient/solution state `x = [a, u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub a: GridField,
    pub u: GridField,
}

impl JointState {
    pub const CHANNELS: usize = 2;

    pub fn new(a: GridField, u: GridField) -> Result<Self> {
        a.same_grid(&u)?;
        Ok(Self { a, u })
    }

    pub fn grid(&self) -> Grid2D {
        self.a.grid
    }

    /// Flattened dimension `D = 2 n^2`.
    pub fn dim(&self) -> usize {
        Self::CHANNELS * self.a.grid.n * self.a.grid.n
    }

    /// Values in `[a, u]` channel order, row-major within each channel.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.u.as_slice());
        out
    }

    pub fn from_flat(grid: Grid2D, flat: &[f64]) -> Result<Self> {
        let m = grid.n * grid.n;
        if flat.len() != 2 * m {
            return Err(Error::Grid(format!("expected {} values, got {}", 2 * m, flat.len())));
        }
        let a = Array2::from_shape_vec((grid.n, grid.n), flat[..m].to_vec()).expect("shape checked");
        let u = Array2::from_shape_vec((grid.n, grid.n), flat[m..].to_vec()).expect("shape checked");
        Ok(Self {
            a: GridField::new(grid, a)?,
            u: GridField::new(grid, u)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. These are shared by the checked operators below and by the
// differentiable tape ops used in training.

/// Five-point Laplacian on interior nodes; boundary entries of `out` are zeroed.
pub(crate) fn laplacian_kernel(u: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let inv = 1.0 / (h * h);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            out[c] = (u[c + n] + u[c - n] + u[c + 1] + u[c - 1] - 4.0 * u[c]) * inv;
        }
    }
}

/// Adjoint of [`laplacian_kernel`]: scatters interior upstream gradients.
pub(crate) fn laplacian_kernel_adjoint(g: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let inv = 1.0 / (h * h);
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            let gc = g[c] * inv;
            out[c + n] += gc;
            out[c - n] += gc;
            out[c + 1] += gc;
            out[c - 1] += gc;
            out[c] -= 4.0 * gc;
        }
    }
}

/// `-div(a grad u)` in flux form with arithmetic face averages, interior only.
pub(crate) fn darcy_operator_kernel(a: &[f64], u: &[f64], n: usize, h: f64, out: &mut [f64]) {
    let inv = 1.0 / (h * h);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let c = i * n + j;
            let ae = 0.5 * (a[c] + a[c + n]);
            let aw = 0.5 * (a[c] + a[c - n]);
            let an = 0.5 * (a[c] + a[c + 1]);
            let as_ = 0.5 * (a[c] + a[c - 1]);
            let div = ae * (u[c + n] - u[c]) - aw * (u[c] - u[c - n]) + an * (u[c + 1] - u[c])
                - as_ * (u[c] - u[c - 1]);
            out[c] = -div * inv;
        }
    }
}

/// Gradients of `sum_c g_c * [-div(a grad u)]_c` with respect to `a` and `u`.
pub(crate) fn darcy_operator_adjoint(
    a: &[f64],
    u: &[f64],
    g: &[f64],
    n: usize,
    h: f64,
    grad_a: Option<&mut [f64]>,
    grad_u: Option<&mut [f64]>,
) {
    let inv = 1.0 / (h * h);
    if let Some(ga) = grad_a {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let c = i * n + j;
                let gc = g[c] * inv;
                if gc == 0.0 {
                    continue;
                }
                // d(out)/d(a_face) for each face, each face splits 1/2 to both ends.
                let de = -(u[c + n] - u[c]) * gc * 0.5;
                let dw = (u[c] - u[c - n]) * gc * 0.5;
                let dn = -(u[c + 1] - u[c]) * gc * 0.5;
                let ds = (u[c] - u[c - 1]) * gc * 0.5;
                ga[c] += de + dw + dn + ds;
                ga[c + n] += de;
                ga[c - n] += dw;
                ga[c + 1] += dn;
                ga[c - 1] += ds;
            }
        }
    }
    if let Some(gu) = grad_u {
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let c = i * n + j;
                let gc = g[c] * inv;
                if gc == 0.0 {
                    continue;
                }
                let ae = 0.5 * (a[c] + a[c + n]);
                let aw = 0.5 * (a[c] + a[c - n]);
                let an = 0.5 * (a[c] + a[c + 1]);
                let as_ = 0.5 * (a[c] + a[c - 1]);
                gu[c] += (ae + aw + an + as_) * gc;
                gu[c + n] -= ae * gc;
                gu[c - n] -= aw * gc;
                gu[c + 1] -= an * gc;
                gu[c - 1] -= as_ * gc;
            }
        }
    }
}

/// Residual of `kind` for a single state given as raw slices, without the
/// positivity check on the Darcy coefficient. Boundary ring is zero.
pub(crate) fn residual_kernel(kind: PdeKind, a: &[f64], u: &[f64], n: usize, h: f64, out: &mut [f64]) {
    match kind {
        PdeKind::Darcy => {
            darcy_operator_kernel(a, u, n, h, out);
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    out[i * n + j] -= 1.0;
                }
            }
        }
        PdeKind::Poisson => {
            laplacian_kernel(u, n, h, out);
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    let c = i * n + j;
                    out[c] -= a[c];
                }
            }
        }
        PdeKind::Helmholtz { k } => {
            laplacian_kernel(u, n, h, out);
            let k2 = k * k;
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    let c = i * n + j;
                    out[c] += k2 * u[c] - a[c];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checked operators.

/// Five-point Laplacian at interior nodes, zero on the boundary ring.
pub fn laplacian_interior(u: &GridField) -> Result<GridField> {
    u.check_finite()?;
    let g = u.grid;
    let mut out = vec![0.0; g.n * g.n];
    laplacian_kernel(u.as_slice(), g.n, g.h(), &mut out);
    Ok(GridField {
        grid: g,
        values: Array2::from_shape_vec((g.n, g.n), out).expect("shape"),
    })
}

/// Interior residual `-div(a grad u) - 1` of the Darcy problem.
pub fn darcy_flux_residual(a: &GridField, u: &GridField) -> Result<GridField> {
    a.same_grid(u)?;
    a.check_finite()?;
    u.check_finite()?;
    for ((i, j), &v) in a.values.indexed_iter() {
        if v <= 0.0 {
            return Err(Error::NonElliptic { value: v, i, j });
        }
    }
    Ok(residual_unchecked(PdeKind::Darcy, a, u))
}

/// Residual of `kind` at `state`, dispatching on the problem type.
pub fn residual(kind: PdeKind, state: &JointState) -> Result<GridField> {
    match kind {
        PdeKind::Darcy => darcy_flux_residual(&state.a, &state.u),
        _ => {
            kind.validate()?;
            state.a.same_grid(&state.u)?;
            state.a.check_finite()?;
            state.u.check_finite()?;
            Ok(residual_unchecked(kind, &state.a, &state.u))
        }
    }
}

/// Residual for generated states: finiteness is checked but the Darcy
/// coefficient is allowed to leave the positive cone. The formula is the same.
pub fn residual_lenient(kind: PdeKind, state: &JointState) -> Result<GridField> {
    state.a.same_grid(&state.u)?;
    state.a.check_finite()?;
    state.u.check_finite()?;
    Ok(residual_unchecked(kind, &state.a, &state.u))
}

fn residual_unchecked(kind: PdeKind, a: &GridField, u: &GridField) -> GridField {
    let g = a.grid;
    let mut out = vec![0.0; g.n * g.n];
    residual_kernel(kind, a.as_slice(), u.as_slice(), g.n, g.h(), &mut out);
    GridField {
        grid: g,
        values: Array2::from_shape_vec((g.n, g.n), out).expect("shape"),
    }
}

/// Discrete gradient used by the H1 metric: central differences in the
/// interior, first-order one-sided differences on the two boundary lines.
pub fn gradient_h1(e: &GridField) -> Result<(GridField, GridField)> {
    e.check_finite()?;
    let g = e.grid;
    let (n, h) = (g.n, g.h());
    let v = &e.values;
    let mut dx = Array2::zeros((n, n));
    let mut dy = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            dx[[i, j]] = if i == 0 {
                (v[[1, j]] - v[[0, j]]) / h
            } else if i == n - 1 {
                (v[[n - 1, j]] - v[[n - 2, j]]) / h
            } else {
                (v[[i + 1, j]] - v[[i - 1, j]]) / (2.0 * h)
            };
            dy[[i, j]] = if j == 0 {
                (v[[i, 1]] - v[[i, 0]]) / h
            } else if j == n - 1 {
                (v[[i, n - 1]] - v[[i, n - 2]]) / h
            } else {
                (v[[i, j + 1]] - v[[i, j - 1]]) / (2.0 * h)
            };
        }
    }
    Ok((GridField { grid: g, values: dx }, GridField { grid: g, values: dy }))
}

/// Squared discrete H1 norm `sum (e^2 + (dx e)^2 + (dy e)^2) h^2` over all nodes.
pub fn h1_norm_sq(e: &GridField) -> Result<f64> {
    let (dx, dy) = gradient_h1(e)?;
    let h2 = e.grid.h() * e.grid.h();
    let s: f64 = e
        .values
        .iter()
        .zip(dx.values.iter())
        .zip(dy.values.iter())
        .map(|((v, a), b)| v * v + a * a + b * b)
        .sum();
    Ok(s * h2)
}

/// Squared discrete L2 norm `sum e^2 h^2` over all nodes.
pub fn l2_norm_sq(e: &GridField) -> f64 {
    let h2 = e.grid.h() * e.grid.h();
    e.values.iter().map(|v| v * v).sum::<f64>() * h2
}

/// `||pred - ref||_H1 / ||ref||_H1`.
pub fn relative_h1(pred: &GridField, reference: &GridField) -> Result<f64> {
    pred.same_grid(reference)?;
    let den = h1_norm_sq(reference)?;
    if den <= 0.0 {
        return Err(Error::ZeroReference("relative_h1"));
    }
    let diff = GridField {
        grid: pred.grid,
        values: &pred.values - &reference.values,
    };
    Ok((h1_norm_sq(&diff)? / den).sqrt())
}

/// `||pred - ref||_2 / ||ref||_2` over all nodes.
pub fn relative_l2(pred: &GridField, reference: &GridField) -> Result<f64> {
    pred.same_grid(reference)?;
    pred.check_finite()?;
    reference.check_finite()?;
    let den: f64 = reference.values.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(Error::ZeroReference("relative_l2"));
    }
    let num: f64 = pred
        .values
        .iter()
        .zip(reference.values.iter())
        .map(|(p, r)| (p - r) * (p - r))
        .sum();
    Ok((num / den).sqrt())
}

/// `||R||_2 * h^2` with the Euclidean norm over interior residual values.
pub fn normalized_residual_norm(kind: PdeKind, state: &JointState) -> Result<f64> {
    let r = residual(kind, state)?;
    Ok(residual_norm_of(&r))
}

/// Same as [`normalized_residual_norm`] but using [`residual_lenient`].
pub fn normalized_residual_norm_lenient(kind: PdeKind, state: &JointState) -> Result<f64> {
    let r = residual_lenient(kind, state)?;
    Ok(residual_norm_of(&r))
}

fn residual_norm_of(r: &GridField) -> f64 {
    let h = r.grid.h();
    // boundary ring is zero, so summing everything equals the interior sum
    r.values.iter().map(|v| v * v).sum::<f64>().sqrt() * h * h
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sinsin(g: Grid2D) -> GridField {
        GridField::from_fn(g, |x, y| (PI * x).sin() * (PI * y).sin())
    }

    #[test]
    fn grid_rejects_tiny() {
        assert!(Grid2D::new(2).is_err());
        let g = Grid2D::new(3).unwrap();
        assert_eq!(g.h(), 0.5);
    }

    #[test]
    fn laplacian_of_constant_and_linear_is_zero() {
        let g = Grid2D::new(9).unwrap();
        let c = GridField::constant(g, 3.7);
        assert!(laplacian_interior(&c).unwrap().max_abs() < 1e-9);
        let lin = GridField::from_fn(g, |x, _| x);
        assert!(laplacian_interior(&lin).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn laplacian_rejects_nan() {
        let g = Grid2D::new(5).unwrap();
        let mut f = GridField::zeros(g);
        f.values_mut()[[2, 2]] = f64::NAN;
        assert!(matches!(laplacian_interior(&f), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn laplacian_sinsin_second_order() {
        let err = |n: usize| {
            let g = Grid2D::new(n).unwrap();
            let u = sinsin(g);
            let l = laplacian_interior(&u).unwrap();
            let mut m = 0.0f64;
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    m = m.max((l.values()[[i, j]] + 2.0 * PI * PI * u.values()[[i, j]]).abs());
                }
            }
            m
        };
        let (e33, e65) = (err(33), err(65));
        let h = 1.0 / 64.0;
        assert!(e65 <= 2.0 * h * h * PI.powi(4), "e65 = {e65}");
        let ratio = e33 / e65;
        assert!((3.5..=4.5).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn darcy_zero_solution_leaves_forcing() {
        let g = Grid2D::new(7).unwrap();
        let r = darcy_flux_residual(&GridField::constant(g, 1.0), &GridField::zeros(g)).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                let expect = if g.is_boundary(i, j) { 0.0 } else { -1.0 };
                assert_eq!(r.values()[[i, j]], expect);
            }
        }
    }

    #[test]
    fn darcy_rejects_nonpositive_coefficient() {
        let g = Grid2D::new(5).unwrap();
        let mut a = GridField::constant(g, 1.0);
        a.values_mut()[[1, 3]] = 0.0;
        assert!(matches!(
            darcy_flux_residual(&a, &GridField::zeros(g)),
            Err(Error::NonElliptic { i: 1, j: 3, .. })
        ));
    }

    #[test]
    fn darcy_smooth_coefficient_converges_at_second_order() {
        // analytic: -div(a grad u) - 1 with a = 2 + s, u = s, s = sin(pi x) sin(pi y)
        let exact = |x: f64, y: f64| {
            let s = (PI * x).sin() * (PI * y).sin();
            let gx = PI * (PI * x).cos() * (PI * y).sin();
            let gy = PI * (PI * x).sin() * (PI * y).cos();
            -((gx * gx + gy * gy) + (2.0 + s) * (-2.0 * PI * PI * s)) - 1.0
        };
        let err = |n: usize| {
            let g = Grid2D::new(n).unwrap();
            let a = GridField::from_fn(g, |x, y| 2.0 + (PI * x).sin() * (PI * y).sin());
            let r = darcy_flux_residual(&a, &sinsin(g)).unwrap();
            let mut m = 0.0f64;
            for i in 1..n - 1 {
                for j in 1..n - 1 {
                    m = m.max((r.values()[[i, j]] - exact(g.coord(i), g.coord(j))).abs());
                }
            }
            m
        };
        let (e17, e33, e65) = (err(17), err(33), err(65));
        for (c, f) in [(e17, e33), (e33, e65)] {
            let order = (c / f).log2();
            assert!((1.8..=2.2).contains(&order), "order {order}");
        }
    }

    #[test]
    fn poisson_zero_state_has_zero_residual() {
        let g = Grid2D::new(6).unwrap();
        let s = JointState::new(GridField::zeros(g), GridField::zeros(g)).unwrap();
        assert_eq!(residual(PdeKind::Poisson, &s).unwrap().max_abs(), 0.0);
        assert_eq!(normalized_residual_norm(PdeKind::Poisson, &s).unwrap(), 0.0);
    }

    #[test]
    fn helmholtz_manufactured_second_order() {
        let err = |n: usize| {
            let g = Grid2D::new(n).unwrap();
            let u = sinsin(g);
            let a = GridField::from_fn(g, |x, y| (1.0 - 2.0 * PI * PI) * (PI * x).sin() * (PI * y).sin());
            let s = JointState::new(a, u).unwrap();
            residual(PdeKind::Helmholtz { k: 1.0 }, &s).unwrap().max_abs_interior()
        };
        let order = (err(33) / err(65)).log2();
        assert!((1.8..=2.2).contains(&order), "order {order}");
    }

    #[test]
    fn helmholtz_eigenvalue_rejected() {
        let k = (2.0f64).sqrt() * PI;
        assert!(PdeKind::helmholtz(k).is_err());
        let k = (5.0f64).sqrt() * PI;
        assert!(PdeKind::helmholtz(k).is_err());
        assert!(PdeKind::helmholtz(1.0).is_ok());
    }

    #[test]
    fn gradient_of_linear_and_constant() {
        let g = Grid2D::new(6).unwrap();
        let (dx, dy) = gradient_h1(&GridField::from_fn(g, |x, _| x)).unwrap();
        assert!(dx.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(dy.max_abs() < 1e-12);
        let (dx, dy) = gradient_h1(&GridField::constant(g, 2.5)).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert_eq!(dy.max_abs(), 0.0);
    }

    #[test]
    fn gradient_of_square_on_five_points() {
        let g = Grid2D::new(5).unwrap();
        let h = g.h();
        let (dx, _) = gradient_h1(&GridField::from_fn(g, |x, _| x * x)).unwrap();
        for j in 0..5 {
            for i in 1..4 {
                assert!((dx.values()[[i, j]] - 2.0 * g.coord(i)).abs() < 1e-12);
            }
            // one-sided: (h^2 - 0)/h = h = 2*0 + h ; (1 - (1-h)^2)/h = 2 - h
            assert!((dx.values()[[0, j]] - h).abs() < 1e-12);
            assert!((dx.values()[[4, j]] - (2.0 - h)).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_metrics_identities() {
        let g = Grid2D::new(8).unwrap();
        let r = GridField::from_fn(g, |x, y| (3.0 * x).sin() + y * y);
        assert_eq!(relative_h1(&r, &r).unwrap(), 0.0);
        assert!((relative_h1(&GridField::zeros(g), &r).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(relative_l2(&r, &r).unwrap(), 0.0);
        assert!((relative_l2(&GridField::zeros(g), &r).unwrap() - 1.0).abs() < 1e-12);
        let twice = GridField::new(g, r.values() * 2.0).unwrap();
        assert!((relative_l2(&twice, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_rejected() {
        let g = Grid2D::new(4).unwrap();
        let z = GridField::zeros(g);
        assert!(matches!(relative_h1(&z, &z), Err(Error::ZeroReference(_))));
        assert!(matches!(relative_l2(&z, &z), Err(Error::ZeroReference(_))));
    }

    #[test]
    fn poisson_unit_source_normalized_norm_is_count_times_h2() {
        let g = Grid2D::new(33).unwrap();
        let s = JointState::new(GridField::constant(g, 1.0), GridField::zeros(g)).unwrap();
        let v = normalized_residual_norm(PdeKind::Poisson, &s).unwrap();
        let brute: f64 = (0..31 * 31).map(|_| 1.0f64).sum::<f64>().sqrt() * g.h() * g.h();
        assert!((v - 31.0 * g.h() * g.h()).abs() < 1e-14);
        assert!((v - brute).abs() < 1e-14);
    }

    #[test]
    fn flat_roundtrip_channel_order() {
        let g = Grid2D::new(4).unwrap();
        let a = GridField::constant(g, 1.0);
        let u = GridField::constant(g, 2.0);
        let s = JointState::new(a, u).unwrap();
        let flat = s.to_flat();
        assert_eq!(flat.len(), s.dim());
        assert!(flat[..16].iter().all(|&v| v == 1.0));
        assert_eq!(JointState::from_flat(g, &flat).unwrap(), s);
    }
}
