//! Discrete norms built from trapezoid quadrature.

use crate::error::{Error, Result};
use crate::grid::{diff, Deriv, Face, FnKind, Grid, GridFn};

/// Norms used by the estimates and the reconstruction error reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// `L2(Q)` of a space-time function.
    L2Q,
    /// `L2(Omega)` of a slice.
    L2Slice,
    /// `H2(Omega)` of a slice.
    H2Slice,
    /// `H^{2,1}(Q)`: value, time derivative, all first and second spatial derivatives.
    H21Q,
    /// `H^{2,1}` restricted to `Omega x (eps, T - eps)`.
    H21Interior { epsilon: f64 },
    /// Boundary data norm over the grid's observation boundary:
    /// `int_{Gamma x (0,T)} |dt u|^2 + |grad u|^2 + |u|^2`.
    DGamma,
}

/// Integral over `Q` of nodal values.
pub fn integrate_q(grid: &Grid, values: &[f64]) -> f64 {
    integrate_window(grid, values, 0, grid.nt() - 1)
}

/// Per-slice spatial integrals.
pub fn slice_integrals(grid: &Grid, values: &[f64]) -> Vec<f64> {
    let ws = grid.space_weights();
    values.chunks(grid.n_space()).map(|c| dot(&ws, c)).collect()
}

/// Trapezoid integral over the time nodes `k_lo..=k_hi`.
pub fn integrate_window(grid: &Grid, values: &[f64], k_lo: usize, k_hi: usize) -> f64 {
    let per_slice = slice_integrals(grid, values);
    let tau = grid.tau();
    (k_lo..=k_hi)
        .map(|k| {
            let w = if k == k_lo || k == k_hi { 0.5 * tau } else { tau };
            w * per_slice[k]
        })
        .sum()
}

/// Integral over `Omega` of a slice.
pub fn integrate_slice(grid: &Grid, values: &[f64]) -> f64 {
    dot(&grid.space_weights(), values)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq(f: &[f64]) -> Vec<f64> {
    f.iter().map(|v| v * v).collect()
}

/// Integral over `faces x (0, T)` of a space-time nodal function.
pub fn integrate_boundary(grid: &Grid, faces: &[Face], values: &[f64]) -> f64 {
    let ns = grid.n_space();
    let wt = grid.time_weights();
    faces
        .iter()
        .map(|face| {
            let nodes = grid.face_nodes(*face);
            let wf = grid.face_weights(*face);
            (0..grid.nt())
                .map(|k| wt[k] * nodes.iter().zip(&wf).map(|(s, w)| w * values[k * ns + s]).sum::<f64>())
                .sum::<f64>()
        })
        .sum()
}

/// Squared boundary integrals of a space-time function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryParts {
    pub value: f64,
    pub dt: f64,
    pub grad: f64,
}

impl BoundaryParts {
    /// `D(u)^2`.
    pub fn d_squared(&self) -> f64 {
        self.value + self.dt + self.grad
    }

    /// `||u||^2` in `H^1(0, T; L2(Gamma))`.
    pub fn h1_time_squared(&self) -> f64 {
        self.value + self.dt
    }
}

/// Boundary integrals of `u^2`, `(dt u)^2` and `|grad u|^2` over `faces x (0,T)`.
pub fn boundary_parts(f: &GridFn, faces: &[Face]) -> Result<BoundaryParts> {
    f.require_space_time("boundary_parts")?;
    let grid = f.grid();
    let dt = diff(f, Deriv::Dt)?;
    let mut grad2 = vec![0.0; f.values().len()];
    for a in 0..grid.dim() {
        let d = diff(f, Deriv::Dx(a))?;
        for (g, v) in grad2.iter_mut().zip(d.values()) {
            *g += v * v;
        }
    }
    Ok(BoundaryParts {
        value: integrate_boundary(grid, faces, &sq(f.values())),
        dt: integrate_boundary(grid, faces, &sq(dt.values())),
        grad: integrate_boundary(grid, faces, &grad2),
    })
}

/// `D(u)^2` over the grid's observation boundary.
pub fn d_gamma_squared(f: &GridFn) -> Result<f64> {
    Ok(boundary_parts(f, f.grid().gamma())?.d_squared())
}

/// Pointwise sum of squares of all spatial derivatives up to second order
/// (second-order pairs counted as ordered pairs `(i, j)`).
fn spatial_h2_density(f: &GridFn) -> Result<Vec<f64>> {
    let dim = f.grid().dim();
    let mut acc = sq(f.values());
    let mut add = |d: GridFn| {
        for (a, v) in acc.iter_mut().zip(d.values()) {
            *a += v * v;
        }
    };
    for i in 0..dim {
        add(diff(f, Deriv::Dx(i))?);
    }
    for i in 0..dim {
        for j in 0..dim {
            add(diff(f, Deriv::Dxx(i, j))?);
        }
    }
    Ok(acc)
}

fn h21_density(f: &GridFn) -> Result<Vec<f64>> {
    let mut acc = spatial_h2_density(f)?;
    let dt = diff(f, Deriv::Dt)?;
    for (a, v) in acc.iter_mut().zip(dt.values()) {
        *a += v * v;
    }
    Ok(acc)
}

/// Squared norm.
pub fn norm_squared(f: &GridFn, kind: NormKind) -> Result<f64> {
    let grid = f.grid();
    match kind {
        NormKind::L2Q => {
            f.require_space_time("L2(Q)")?;
            Ok(integrate_q(grid, &sq(f.values())))
        }
        NormKind::L2Slice => {
            f.require_slice("L2(Omega)")?;
            Ok(integrate_slice(grid, &sq(f.values())))
        }
        NormKind::H2Slice => {
            f.require_slice("H2(Omega)")?;
            Ok(integrate_slice(grid, &spatial_h2_density(f)?))
        }
        NormKind::H21Q => {
            f.require_space_time("H21(Q)")?;
            Ok(integrate_q(grid, &h21_density(f)?))
        }
        NormKind::H21Interior { epsilon } => {
            f.require_space_time("H21 interior")?;
            let (lo, hi) = grid.interior_window(epsilon)?;
            Ok(integrate_window(grid, &h21_density(f)?, lo, hi))
        }
        NormKind::DGamma => match f.kind() {
            FnKind::SpaceTime => d_gamma_squared(f),
            _ => Err(Error::Mismatch("D norm needs a space-time function".into())),
        },
    }
}

/// Norm of `f`.
pub fn norm(f: &GridFn, kind: NormKind) -> Result<f64> {
    norm_squared(f, kind).map(f64::sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec, Side};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid1(n: usize) -> Arc<Grid> {
        build_grid(&GridSpec::one_d(1.0, n, 1.0, n, vec![Face::new(0, Side::High)])).unwrap()
    }

    #[test]
    fn l2_of_constant() {
        let g = grid1(9);
        let f = GridFn::sample(&g, |_, _| 1.0);
        assert_eq!(norm(&f, NormKind::L2Q).unwrap(), 1.0);
        assert!(norm(&f.at_t0().unwrap(), NormKind::L2Q).is_err());
    }

    #[test]
    fn h21_assembles_from_parts() {
        let g = grid1(33);
        let f = GridFn::sample(&g, |x, t| (PI * x[0]).cos() * (1.0 + t * t));
        let parts = [
            norm_squared(&f, NormKind::L2Q).unwrap(),
            norm_squared(&diff(&f, Deriv::Dt).unwrap(), NormKind::L2Q).unwrap(),
            norm_squared(&diff(&f, Deriv::Dx(0)).unwrap(), NormKind::L2Q).unwrap(),
            norm_squared(&diff(&f, Deriv::Dxx(0, 0)).unwrap(), NormKind::L2Q).unwrap(),
        ];
        let whole = norm_squared(&f, NormKind::H21Q).unwrap();
        assert!((whole - parts.iter().sum::<f64>()).abs() <= 1e-12 * whole);
    }

    #[test]
    fn d_gamma_of_known_function() {
        // u = x t on [0,1]^2 observed at x = 1: u = t, ut = 1, ux = t.
        let g = grid1(17);
        let f = GridFn::sample(&g, |x, t| x[0] * t);
        let p = boundary_parts(&f, g.gamma()).unwrap();
        let trap_t2: f64 = g.time_weights().iter().enumerate().map(|(k, w)| w * g.t(k).powi(2)).sum();
        assert!((p.value - trap_t2).abs() < 1e-14);
        assert!((p.dt - 1.0).abs() < 1e-12);
        assert!((p.grad - trap_t2).abs() < 1e-12);
    }

    #[test]
    fn interior_norm_shrinks_with_epsilon() {
        let g = grid1(33);
        let f = GridFn::sample(&g, |x, t| x[0] + t);
        let a = norm(&f, NormKind::H21Interior { epsilon: 0.1 }).unwrap();
        let b = norm(&f, NormKind::H21Interior { epsilon: 0.2 }).unwrap();
        assert!(a > b);
        assert!(norm(&f, NormKind::H21Interior { epsilon: 0.5 }).is_err());
    }
}
