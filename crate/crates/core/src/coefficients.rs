//! Coefficient fields of the linearized system and the operators they define:
//!
//! * `A u = sum a_ij dij u + sum a_j dj u + a_0 u`
//! * `B v = sum b_ij dij v + sum b_j dj v + b_0 v`
//! * `A0 u = sum_{|g| <= 2} b_g d^g u`
//!
//! All fields are sampled at space-time nodes.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{diff, Deriv, Face, FnKind, Grid, GridFn};
use crate::stencil;

/// Which operator to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpKind {
    A,
    B,
    A0,
}

/// Multi-index `g = (g1, g2)` with `|g| <= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(pub [u8; 2]);

impl MultiIndex {
    pub fn order(&self) -> u8 {
        self.0[0] + self.0[1]
    }

    /// All multi-indices of order at most two in `dim` dimensions.
    pub fn all(dim: usize) -> Vec<MultiIndex> {
        if dim == 1 {
            (0..=2).map(|a| MultiIndex([a, 0])).collect()
        } else {
            let mut v = Vec::new();
            for o in 0..=2u8 {
                for a in (0..=o).rev() {
                    v.push(MultiIndex([a, o - a]));
                }
            }
            v
        }
    }

    /// Parse a digit string such as `"2"` (1D) or `"11"` (2D).
    pub fn parse(s: &str, dim: usize) -> Result<Self> {
        let digits: Vec<u8> = s
            .chars()
            .map(|c| c.to_digit(10).map(|d| d as u8))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Coefficients(format!("bad multi-index `{s}`")))?;
        if digits.len() != dim {
            return Err(Error::Coefficients(format!("multi-index `{s}` needs {dim} digits")));
        }
        let mi = MultiIndex([digits[0], digits.get(1).copied().unwrap_or(0)]);
        if mi.order() > 2 {
            return Err(Error::Coefficients(format!("multi-index `{s}` has order above 2")));
        }
        Ok(mi)
    }

    pub fn label(&self, dim: usize) -> String {
        self.0[..dim].iter().map(|d| d.to_string()).collect()
    }

    /// Derivative realizing `d^g` (None for the identity).
    fn deriv(&self) -> Option<Deriv> {
        match self.0 {
            [0, 0] => None,
            [1, 0] => Some(Deriv::Dx(0)),
            [0, 1] => Some(Deriv::Dx(1)),
            [2, 0] => Some(Deriv::Dxx(0, 0)),
            [0, 2] => Some(Deriv::Dxx(1, 1)),
            _ => Some(Deriv::Dxx(0, 1)),
        }
    }
}

/// A second-order operator with space-time coefficient fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrder {
    /// Principal part, row-major `dim x dim`.
    pub principal: Vec<Vec<f64>>,
    pub first: Vec<Vec<f64>>,
    pub zeroth: Vec<f64>,
}

/// Coefficients of the linear system.
#[derive(Debug, Clone)]
pub struct CoeffSet {
    grid: Arc<Grid>,
    pub a: SecondOrder,
    pub b: SecondOrder,
    pub c0: Vec<f64>,
    pub coupling: Vec<(MultiIndex, Vec<f64>)>,
    /// Claimed ellipticity constant.
    pub chi: f64,
}

/// Outcome of an ellipticity check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipticity {
    pub chi_min: f64,
    pub passes: bool,
}

fn min_eigen(p: &[Vec<f64>], dim: usize, idx: usize) -> f64 {
    if dim == 1 {
        p[0][idx]
    } else {
        let (a, b, d) = (p[0][idx], p[1][idx], p[3][idx]);
        0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
    }
}

impl SecondOrder {
    fn check_shape(&self, dim: usize, n: usize, name: &str) -> Result<()> {
        let ok = self.principal.len() == dim * dim
            && self.first.len() == dim
            && self.principal.iter().chain(&self.first).all(|f| f.len() == n)
            && self.zeroth.len() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::Coefficients(format!("operator {name} has inconsistent field shapes")))
        }
    }

    fn fields(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.principal.iter().chain(&self.first).chain(std::iter::once(&self.zeroth))
    }
}

impl CoeffSet {
    /// Validate and assemble a coefficient set.
    pub fn new(
        grid: Arc<Grid>,
        a: SecondOrder,
        b: SecondOrder,
        c0: Vec<f64>,
        coupling: Vec<(MultiIndex, Vec<f64>)>,
        chi: f64,
    ) -> Result<Self> {
        let dim = grid.dim();
        let n = grid.n_nodes();
        a.check_shape(dim, n, "A")?;
        b.check_shape(dim, n, "B")?;
        if c0.len() != n || coupling.iter().any(|(_, f)| f.len() != n) {
            return Err(Error::Coefficients("coupling fields have the wrong length".into()));
        }
        if coupling.iter().any(|(m, _)| m.order() > 2 || (dim == 1 && m.0[1] != 0)) {
            return Err(Error::Coefficients("coupling multi-index out of range".into()));
        }
        let finite = a
            .fields()
            .chain(b.fields())
            .chain(std::iter::once(&c0))
            .chain(coupling.iter().map(|(_, f)| f))
            .all(|f| f.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Coefficients("non-finite coefficient value".into()));
        }
        if !(chi.is_finite() && chi > 0.0) {
            return Err(Error::Coefficients(format!("ellipticity constant {chi} must be positive")));
        }
        if dim == 2 {
            for (name, op) in [("A", &a), ("B", &b)] {
                let scale = op.principal.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
                let asym = op.principal[1].iter().zip(&op.principal[2]).any(|(x, y)| (x - y).abs() > 1e-12 * scale);
                if asym {
                    return Err(Error::Coefficients(format!("principal part of {name} is not symmetric")));
                }
            }
        }
        let set = Self { grid, a, b, c0, coupling, chi };
        let e = check_ellipticity(&set);
        if !e.passes {
            return Err(Error::Coefficients(format!(
                "ellipticity fails: smallest eigenvalue {} is below chi = {chi}",
                e.chi_min
            )));
        }
        Ok(set)
    }

    /// `A = B = Laplacian`, no lower-order terms or coupling.
    pub fn laplacian(grid: &Arc<Grid>) -> Self {
        CoeffSpec::default().sample(grid).expect("identity coefficients are valid")
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn op(&self, kind: OpKind) -> Option<&SecondOrder> {
        match kind {
            OpKind::A => Some(&self.a),
            OpKind::B => Some(&self.b),
            OpKind::A0 => None,
        }
    }

    /// Spatial stencil of `kind` at space-time node `(k, s)`, appended to
    /// `out` as `(spatial node, weight)` pairs (duplicates possible).
    pub fn spatial_terms(&self, kind: OpKind, k: usize, s: usize, out: &mut Vec<(usize, f64)>) {
        let g = &*self.grid;
        let idx = k * g.n_space() + s;
        let push_deriv = |d: Option<Deriv>, c: f64, out: &mut Vec<(usize, f64)>| {
            if c != 0.0 {
                deriv_terms(g, s, d, c, out);
            }
        };
        match kind {
            OpKind::A0 => {
                for (m, f) in &self.coupling {
                    push_deriv(m.deriv(), f[idx], out);
                }
            }
            _ => {
                let op = self.op(kind).expect("second-order operator");
                let dim = g.dim();
                for i in 0..dim {
                    for j in 0..dim {
                        push_deriv(Some(Deriv::Dxx(i, j)), op.principal[i * dim + j][idx], out);
                    }
                }
                for j in 0..dim {
                    push_deriv(Some(Deriv::Dx(j)), op.first[j][idx], out);
                }
                push_deriv(None, op.zeroth[idx], out);
            }
        }
    }
}

/// Stencil terms of a spatial derivative at node `s`, scaled by `c`.
pub(crate) fn deriv_terms(g: &Grid, s: usize, d: Option<Deriv>, c: f64, out: &mut Vec<(usize, f64)>) {
    let idx = g.multi_index(s);
    let line = |axis: usize, order: usize| {
        let n = g.nx()[axis];
        stencil::of_order(order, n, idx[axis], g.h()[axis])
    };
    let base_without = |axis: usize| s - idx[axis] * g.stride(axis);
    match d {
        None => out.push((s, c)),
        Some(Deriv::Dx(a)) => {
            let st = line(a, 1);
            let b = base_without(a);
            out.extend(st.terms().map(|(j, w)| (b + j * g.stride(a), c * w)));
        }
        Some(Deriv::Dxx(a, bx)) if a == bx => {
            let st = line(a, 2);
            let b = base_without(a);
            out.extend(st.terms().map(|(j, w)| (b + j * g.stride(a), c * w)));
        }
        Some(Deriv::Dxx(a, bx)) => {
            let sa = line(a, 1);
            let sb = line(bx, 1);
            let base = s - idx[a] * g.stride(a) - idx[bx] * g.stride(bx);
            for (ja, wa) in sa.terms() {
                for (jb, wb) in sb.terms() {
                    out.push((base + ja * g.stride(a) + jb * g.stride(bx), c * wa * wb));
                }
            }
        }
        Some(other) => panic!("{other:?} is not a spatial derivative"),
    }
}

enum Term<'a> {
    Id(&'a [f64]),
    D(Deriv, &'a [f64]),
}

fn combine(f: &GridFn, terms: &[Term<'_>], coeff_offset: usize) -> Result<GridFn> {
    let n = f.values().len();
    let mut out = vec![0.0; n];
    for term in terms {
        let (vals, coef) = match term {
            Term::Id(c) => (f.values().to_vec(), *c),
            Term::D(d, c) => (diff(f, *d)?.into_values(), *c),
        };
        for (i, o) in out.iter_mut().enumerate() {
            *o += coef[coeff_offset + i] * vals[i];
        }
    }
    GridFn::new(f.grid().clone(), f.kind().clone(), out)
}

fn operator_terms<'a>(c: &'a CoeffSet, kind: OpKind) -> Vec<Term<'a>> {
    let dim = c.grid.dim();
    match kind {
        OpKind::A0 => c
            .coupling
            .iter()
            .map(|(m, f)| match m.deriv() {
                None => Term::Id(f),
                Some(d) => Term::D(d, f),
            })
            .collect(),
        _ => {
            let op = c.op(kind).expect("second-order operator");
            let mut v = Vec::new();
            for i in 0..dim {
                for j in 0..dim {
                    v.push(Term::D(Deriv::Dxx(i, j), &op.principal[i * dim + j][..]));
                }
            }
            for j in 0..dim {
                v.push(Term::D(Deriv::Dx(j), &op.first[j][..]));
            }
            v.push(Term::Id(&op.zeroth));
            v
        }
    }
}

/// Apply `A`, `B` or `A0` to a space-time function.
pub fn apply_operator(kind: OpKind, f: &GridFn, c: &CoeffSet) -> Result<GridFn> {
    f.require_space_time("apply_operator")?;
    combine(f, &operator_terms(c, kind), 0)
}

/// Apply an operator to a slice using the coefficients frozen at time node `k`.
pub fn apply_operator_slice(kind: OpKind, f: &GridFn, c: &CoeffSet, k: usize) -> Result<GridFn> {
    f.require_slice("apply_operator_slice")?;
    if k >= c.grid.nt() {
        return Err(Error::InvalidArgument(format!("time index {k} out of range")));
    }
    combine(f, &operator_terms(c, kind), k * c.grid.n_space())
}

/// Smallest eigenvalue of the principal parts of `A` and `B` over all nodes.
pub fn check_ellipticity(c: &CoeffSet) -> Ellipticity {
    let dim = c.grid.dim();
    let chi_min = (0..c.grid.n_nodes())
        .map(|i| min_eigen(&c.a.principal, dim, i).min(min_eigen(&c.b.principal, dim, i)))
        .fold(f64::INFINITY, f64::min);
    Ellipticity { chi_min, passes: chi_min >= c.chi }
}

/// Conormal derivative `sum_ij a_ij dj f nu_i` of `f` on every boundary face.
pub fn conormal(f: &GridFn, c: &CoeffSet, which: OpKind) -> Result<GridFn> {
    f.require_space_time("conormal")?;
    let op = c
        .op(which)
        .ok_or_else(|| Error::InvalidArgument("conormal is defined for A and B only".into()))?;
    let g = f.grid();
    let dim = g.dim();
    let grads: Vec<GridFn> = (0..dim).map(|j| diff(f, Deriv::Dx(j))).collect::<Result<_>>()?;
    let faces = g.all_faces();
    let ns = g.n_space();
    let mut values = Vec::new();
    for face in &faces {
        let nodes = g.face_nodes(*face);
        let sign = face.normal_sign();
        for k in 0..g.nt() {
            for s in &nodes {
                let idx = k * ns + s;
                let v: f64 = (0..dim).map(|j| op.principal[face.axis * dim + j][idx] * grads[j].values()[idx]).sum();
                values.push(sign * v);
            }
        }
    }
    GridFn::new(g.clone(), FnKind::Trace(faces), values)
}

fn c1_norm(grid: &Arc<Grid>, field: &[f64]) -> Result<f64> {
    let f = GridFn::new(grid.clone(), FnKind::SpaceTime, field.to_vec())?;
    let mut grad2 = vec![0.0; field.len()];
    let mut derivs = vec![Deriv::Dt];
    derivs.extend((0..grid.dim()).map(Deriv::Dx));
    for d in derivs {
        for (g, v) in grad2.iter_mut().zip(diff(&f, d)?.values()) {
            *g += v * v;
        }
    }
    Ok(f.max_abs() + grad2.iter().fold(0.0f64, |m, v| m.max(*v)).sqrt())
}

fn sup(field: &[f64]) -> f64 {
    field.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Coefficient bound `M`: `C^1` norms of the principal coefficients plus sup
/// norms of every lower-order and coupling coefficient.
pub fn coefficient_bound(c: &CoeffSet) -> Result<f64> {
    let mut m = 0.0;
    for op in [&c.a, &c.b] {
        for f in &op.principal {
            m += c1_norm(&c.grid, f)?;
        }
        m += op.first.iter().map(|f| sup(f)).sum::<f64>() + sup(&op.zeroth);
    }
    m += c.coupling.iter().map(|(_, f)| sup(f)).sum::<f64>();
    Ok(m)
}

/// Expression description of one second-order operator. Missing entries
/// default to the Laplacian.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal: Option<Vec<Vec<Expr>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first: Option<Vec<Expr>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zeroth: Option<Expr>,
}

/// Expression description of a full coefficient set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffSpec {
    #[serde(default)]
    pub a: OperatorSpec,
    #[serde(default)]
    pub b: OperatorSpec,
    #[serde(default = "zero_expr")]
    pub c0: Expr,
    /// Coupling coefficients keyed by multi-index digit strings.
    #[serde(default)]
    pub coupling: BTreeMap<String, Expr>,
    #[serde(default = "default_chi")]
    pub chi: f64,
}

fn zero_expr() -> Expr {
    Expr::constant(0.0)
}

fn default_chi() -> f64 {
    0.5
}

impl Default for CoeffSpec {
    fn default() -> Self {
        Self {
            a: OperatorSpec::default(),
            b: OperatorSpec::default(),
            c0: zero_expr(),
            coupling: BTreeMap::new(),
            chi: default_chi(),
        }
    }
}

impl OperatorSpec {
    fn resolved(&self, dim: usize) -> Result<OperatorSpec> {
        let principal = match &self.principal {
            Some(p) => {
                if p.len() != dim || p.iter().any(|r| r.len() != dim) {
                    return Err(Error::Coefficients(format!("principal part must be {dim}x{dim}")));
                }
                p.clone()
            }
            None => (0..dim)
                .map(|i| (0..dim).map(|j| Expr::constant(if i == j { 1.0 } else { 0.0 })).collect())
                .collect(),
        };
        let first = match &self.first {
            Some(f) if f.len() != dim => {
                return Err(Error::Coefficients(format!("first-order part needs {dim} entries")))
            }
            Some(f) => f.clone(),
            None => vec![zero_expr(); dim],
        };
        Ok(OperatorSpec {
            principal: Some(principal),
            first: Some(first),
            zeroth: Some(self.zeroth.clone().unwrap_or_else(zero_expr)),
        })
    }

    fn sample(&self, grid: &Arc<Grid>) -> Result<SecondOrder> {
        let r = self.resolved(grid.dim())?;
        let s = |e: &Expr| sample_expr(grid, e);
        Ok(SecondOrder {
            principal: r.principal.unwrap().iter().flatten().map(s).collect(),
            first: r.first.unwrap().iter().map(s).collect(),
            zeroth: s(r.zeroth.as_ref().unwrap()),
        })
    }
}

/// Sample an expression at every space-time node.
pub fn sample_expr(grid: &Arc<Grid>, e: &Expr) -> Vec<f64> {
    GridFn::sample(grid, |x, t| e.eval(x, t)).into_values()
}

impl CoeffSpec {
    /// Fill in defaults for a `dim`-dimensional domain.
    pub fn resolved(&self, dim: usize) -> Result<CoeffSpec> {
        for key in self.coupling.keys() {
            MultiIndex::parse(key, dim)?;
        }
        Ok(CoeffSpec {
            a: self.a.resolved(dim)?,
            b: self.b.resolved(dim)?,
            ..self.clone()
        })
    }

    pub fn sample(&self, grid: &Arc<Grid>) -> Result<CoeffSet> {
        let dim = grid.dim();
        let coupling = self
            .coupling
            .iter()
            .map(|(k, e)| Ok((MultiIndex::parse(k, dim)?, sample_expr(grid, e))))
            .collect::<Result<Vec<_>>>()?;
        CoeffSet::new(
            grid.clone(),
            self.a.sample(grid)?,
            self.b.sample(grid)?,
            sample_expr(grid, &self.c0),
            coupling,
            self.chi,
        )
    }
}

/// Space-dependent source amplitudes `f, g` and time-dependent factors `q1, q2`.
#[derive(Debug, Clone)]
pub struct SourceFactors {
    pub q1: GridFn,
    pub q2: GridFn,
    pub f: GridFn,
    pub g: GridFn,
}

impl SourceFactors {
    /// `(q1 f, q2 g)` as space-time fields.
    pub fn forcing(&self) -> Result<(GridFn, GridFn)> {
        Ok((self.q1.mul(&self.f.broadcast()?)?, self.q2.mul(&self.g.broadcast()?)?))
    }
}

/// Coefficients of the nonlinear system
/// `dt u + a Lap u - kappa |grad u|^2 / 2 + p v = F`,
/// `dt v - Lap(a v) - div(kappa v grad u) = G`.
#[derive(Debug, Clone)]
pub struct NonlinearCoeffs {
    pub a: GridFn,
    pub kappa: GridFn,
    pub p: GridFn,
}

/// Expression form of [`NonlinearCoeffs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearSpec {
    #[serde(default = "one_expr")]
    pub a: Expr,
    #[serde(default = "zero_expr")]
    pub kappa: Expr,
    #[serde(default = "zero_expr")]
    pub p: Expr,
}

fn one_expr() -> Expr {
    Expr::constant(1.0)
}

impl Default for NonlinearSpec {
    fn default() -> Self {
        Self { a: one_expr(), kappa: zero_expr(), p: zero_expr() }
    }
}

impl NonlinearSpec {
    pub fn sample(&self, grid: &Arc<Grid>) -> Result<NonlinearCoeffs> {
        let s = |e: &Expr| GridFn::sample(grid, |x, t| e.eval(x, t));
        NonlinearCoeffs::new(s(&self.a), s(&self.kappa), s(&self.p))
    }
}

impl NonlinearCoeffs {
    pub fn new(a: GridFn, kappa: GridFn, p: GridFn) -> Result<Self> {
        for f in [&a, &kappa, &p] {
            f.require_space_time("nonlinear coefficients")?;
        }
        if a.values().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Coefficients("diffusion coefficient a must be positive".into()));
        }
        if a.values().iter().chain(kappa.values()).chain(p.values()).any(|v| !v.is_finite()) {
            return Err(Error::Coefficients("non-finite nonlinear coefficient".into()));
        }
        Ok(Self { a, kappa, p })
    }

    /// Linear coefficients governing the difference of two solutions when
    /// `kappa = 0`: `A = a Lap`, `B v = Lap(a v)` expanded by the product
    /// rule, `c0 = -p`, no coupling `A0`.
    pub fn linear_difference_coeffs(&self) -> Result<CoeffSet> {
        let grid = self.a.grid().clone();
        let dim = grid.dim();
        let n = grid.n_nodes();
        let a = self.a.values().to_vec();
        let diag = |v: &[f64]| -> Vec<Vec<f64>> {
            (0..dim * dim).map(|ij| if ij / dim == ij % dim { v.to_vec() } else { vec![0.0; n] }).collect()
        };
        let mut lap_a = vec![0.0; n];
        let mut grad_a = Vec::new();
        for i in 0..dim {
            grad_a.push(diff(&self.a, Deriv::Dx(i))?.values().iter().map(|v| 2.0 * v).collect());
            for (l, v) in lap_a.iter_mut().zip(diff(&self.a, Deriv::Dxx(i, i))?.values()) {
                *l += v;
            }
        }
        let chi = a.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        CoeffSet::new(
            grid,
            SecondOrder { principal: diag(&a), first: vec![vec![0.0; n]; dim], zeroth: vec![0.0; n] },
            SecondOrder { principal: diag(&a), first: grad_a, zeroth: lap_a },
            self.p.values().iter().map(|v| -v).collect(),
            Vec::new(),
            chi,
        )
    }
}

/// Faces of the boundary not in the observation set.
pub fn unobserved_faces(grid: &Grid) -> Vec<Face> {
    grid.all_faces().into_iter().filter(|f| !grid.gamma().contains(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec, Side};
    use std::f64::consts::PI;

    fn grid1(n: usize) -> Arc<Grid> {
        build_grid(&GridSpec::one_d(1.0, n, 1.0, n, vec![Face::new(0, Side::High)])).unwrap()
    }

    fn grid2(n: usize) -> Arc<Grid> {
        build_grid(&GridSpec {
            lengths: vec![1.0, 1.0],
            t_final: 1.0,
            nx: vec![n, n],
            nt: 5,
            gamma: vec![Face::new(0, Side::High)],
        })
        .unwrap()
    }

    fn spec_1d() -> CoeffSpec {
        let e = |s: &str| Expr::parse(s).unwrap();
        CoeffSpec {
            a: OperatorSpec {
                principal: Some(vec![vec![e("1 + 0.5*x")]]),
                first: Some(vec![e("0.2")]),
                zeroth: Some(e("0.1*t")),
            },
            b: OperatorSpec { principal: Some(vec![vec![e("1.2 - 0.2*x")]]), first: None, zeroth: None },
            c0: e("1"),
            coupling: [("0".to_string(), e("0.2")), ("2".to_string(), e("0.5"))].into_iter().collect(),
            chi: 0.5,
        }
    }

    #[test]
    fn laplacian_of_quadratic_in_2d() {
        let g = grid2(9);
        let c = CoeffSet::laplacian(&g);
        let f = GridFn::sample(&g, |x, _| x[0] * x[0] + x[1] * x[1]);
        let l = apply_operator(OpKind::A, &f, &c).unwrap();
        assert!(l.map(|v| v - 4.0).max_abs() < 1e-9);
        let b = apply_operator(OpKind::B, &f, &c).unwrap();
        assert!(b.sub(&l).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn rejects_non_elliptic_and_asymmetric() {
        let g = grid1(9);
        let mut s = spec_1d();
        s.a.principal = Some(vec![vec![Expr::constant(-1.0)]]);
        assert!(matches!(s.sample(&g), Err(Error::Coefficients(_))));

        let g2 = grid2(7);
        let mut s2 = CoeffSpec::default();
        s2.a.principal = Some(vec![
            vec![Expr::constant(2.0), Expr::constant(0.3)],
            vec![Expr::constant(0.1), Expr::constant(2.0)],
        ]);
        assert!(s2.sample(&g2).is_err());
    }

    #[test]
    fn ellipticity_2d_uses_smallest_eigenvalue() {
        let g = grid2(7);
        let mut s = CoeffSpec::default();
        s.a.principal = Some(vec![
            vec![Expr::constant(2.0), Expr::constant(0.5)],
            vec![Expr::constant(0.5), Expr::constant(2.0)],
        ]);
        s.b.principal = s.a.principal.clone();
        s.chi = 1.0;
        let e = check_ellipticity(&s.sample(&g).unwrap());
        assert!((e.chi_min - 1.5).abs() < 1e-14 && e.passes);
        s.chi = 1.6;
        assert!(s.sample(&g).is_err());
    }

    #[test]
    fn bound_of_identity_and_offsets() {
        let g = grid2(7);
        let c = CoeffSet::laplacian(&g);
        assert_eq!(coefficient_bound(&c).unwrap(), 4.0);
        let mut s = CoeffSpec::default();
        s.b.zeroth = Some(Expr::constant(3.0));
        assert_eq!(coefficient_bound(&s.sample(&g).unwrap()).unwrap(), 7.0);
    }

    #[test]
    fn bound_of_sinusoidal_coefficient() {
        let g = grid1(65);
        let mut s = CoeffSpec::default();
        s.a.principal = Some(vec![vec![Expr::parse("2 + sin(pi*x)").unwrap()]]);
        let m = coefficient_bound(&s.sample(&g).unwrap()).unwrap();
        // 1 from B plus |a|_inf = 3 plus |a'|_inf = pi (up to O(h^2)).
        assert!((m - (4.0 + PI)).abs() < 1e-2, "{m}");
    }

    #[test]
    fn conormal_of_cosine_vanishes_and_of_linear_does_not() {
        let g = grid2(9);
        let c = CoeffSet::laplacian(&g);
        let lin = GridFn::sample(&g, |x, _| x[0]);
        let cn = conormal(&lin, &c, OpKind::A).unwrap();
        // x1 faces carry -1 and +1, x2 faces carry 0.
        let per_face = 9 * g.nt();
        assert!(cn.values()[..per_face].iter().all(|v| (v + 1.0).abs() < 1e-12));
        assert!(cn.values()[per_face..2 * per_face].iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(cn.values()[2 * per_face..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sparse_terms_match_direct_application() {
        for g in [grid1(11), grid2(7)] {
            let spec = if g.dim() == 1 {
                spec_1d()
            } else {
                let e = |s: &str| Expr::parse(s).unwrap();
                CoeffSpec {
                    a: OperatorSpec {
                        principal: Some(vec![vec![e("2 + x"), e("0.3*x2")], vec![e("0.3*x2"), e("1.5")]]),
                        first: Some(vec![e("t"), e("-0.4")]),
                        zeroth: Some(e("0.2")),
                    },
                    coupling: [("11".to_string(), e("0.3")), ("01".to_string(), e("x"))].into_iter().collect(),
                    ..CoeffSpec::default()
                }
            };
            let c = spec.sample(&g).unwrap();
            let f = GridFn::sample(&g, |x, t| (1.0 + t) * (2.0 * x[0]).sin() * (x[1] + 0.5).exp());
            let ns = g.n_space();
            for kind in [OpKind::A, OpKind::B, OpKind::A0] {
                let direct = apply_operator(kind, &f, &c).unwrap();
                let mut terms = Vec::new();
                for k in 0..g.nt() {
                    for s in 0..ns {
                        terms.clear();
                        c.spatial_terms(kind, k, s, &mut terms);
                        let v: f64 = terms.iter().map(|(j, w)| w * f.values()[k * ns + j]).sum();
                        let d = direct.values()[k * ns + s];
                        assert!((v - d).abs() <= 1e-12 * (1.0 + d.abs()), "{kind:?} {v} {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn slice_application_matches_space_time() {
        let g = grid1(17);
        let c = spec_1d().sample(&g).unwrap();
        let f = GridFn::sample(&g, |x, t| (x[0] + t).cos());
        let full = apply_operator(OpKind::A, &f, &c).unwrap();
        let k = g.k0();
        let s = apply_operator_slice(OpKind::A, &f.slice(k).unwrap(), &c, k).unwrap();
        assert_eq!(s.values(), full.slice(k).unwrap().values());
    }

    #[test]
    fn multi_index_parsing() {
        assert_eq!(MultiIndex::parse("2", 1).unwrap(), MultiIndex([2, 0]));
        assert_eq!(MultiIndex::parse("11", 2).unwrap(), MultiIndex([1, 1]));
        assert!(MultiIndex::parse("21", 2).is_err());
        assert!(MultiIndex::parse("1", 2).is_err());
        assert_eq!(MultiIndex::all(2).len(), 6);
    }
}
