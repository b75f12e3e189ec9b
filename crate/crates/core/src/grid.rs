//! Tensor-product space-time grids on `[0, L1] (x [0, L2]) x [0, T]` and
//! nodal functions on them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stencil;

/// Which end of an axis a boundary face sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Low,
    High,
}

/// A boundary face `{x_axis = 0}` or `{x_axis = L_axis}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Face {
    pub axis: usize,
    pub side: Side,
}

impl Face {
    pub const fn new(axis: usize, side: Side) -> Self {
        Self { axis, side }
    }

    /// Component of the outward unit normal along `self.axis`.
    pub fn normal_sign(&self) -> f64 {
        match self.side {
            Side::Low => -1.0,
            Side::High => 1.0,
        }
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::Low => "low",
            Side::High => "high",
        };
        write!(f, "x{}={}", self.axis + 1, side)
    }
}

impl FromStr for Face {
    type Err = Error;

    /// Accepts `x1=low`, `x2=high`, and the numeric forms `x1=0`, `x1=L`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidGrid(format!("unrecognized face descriptor `{s}`"));
        let (lhs, rhs) = s.split_once('=').ok_or_else(bad)?;
        let axis = match lhs.trim() {
            "x" | "x1" => 0,
            "x2" => 1,
            _ => return Err(bad()),
        };
        let side = match rhs.trim() {
            "low" | "0" | "0.0" => Side::Low,
            "high" | "L" => Side::High,
            _ => return Err(bad()),
        };
        Ok(Face { axis, side })
    }
}

impl Serialize for Face {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Face {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parameters describing a grid before validation.
/// Omitted keys default to the unit interval with `nx = nt = 65`, observed
/// at `x1 = L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<f64>,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_nx")]
    pub nx: Vec<usize>,
    #[serde(default = "default_nt")]
    pub nt: usize,
    /// Observation boundary.
    #[serde(default = "default_gamma")]
    pub gamma: Vec<Face>,
}

fn default_lengths() -> Vec<f64> {
    vec![1.0]
}
fn default_t_final() -> f64 {
    1.0
}
fn default_nx() -> Vec<usize> {
    vec![65]
}
fn default_nt() -> usize {
    65
}
fn default_gamma() -> Vec<Face> {
    vec![Face::new(0, Side::High)]
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lengths: default_lengths(),
            t_final: default_t_final(),
            nx: default_nx(),
            nt: default_nt(),
            gamma: default_gamma(),
        }
    }
}

impl GridSpec {
    /// One-dimensional spec on `[0, length]`.
    pub fn one_d(length: f64, nx: usize, t_final: f64, nt: usize, gamma: Vec<Face>) -> Self {
        Self { lengths: vec![length], t_final, nx: vec![nx], nt, gamma }
    }

    /// Same domain with every spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            nx: self.nx.iter().map(|n| 2 * (n - 1) + 1).collect(),
            nt: 2 * (self.nt - 1) + 1,
            ..self.clone()
        }
    }

    pub fn with_gamma(&self, gamma: Vec<Face>) -> Self {
        Self { gamma, ..self.clone() }
    }
}

/// A validated uniform grid. Node values are stored time-major:
/// `index = k * n_space + i0 + nx0 * i1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lengths: Vec<f64>,
    t_final: f64,
    nx: Vec<usize>,
    nt: usize,
    gamma: Vec<Face>,
    h: Vec<f64>,
    tau: f64,
}

/// Minimum nodes per axis: the one-sided second-derivative stencil needs four.
pub const MIN_NODES: usize = 5;

impl GridSpec {
    /// Every way in which the spec is invalid; each message names the key.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let dim = self.lengths.len();
        if !(1..=2).contains(&dim) {
            p.push(format!("lengths: dimension must be 1 or 2, got {dim}"));
        }
        if self.nx.len() != dim {
            p.push(format!("nx: {} entries for a {dim}D domain", self.nx.len()));
        }
        if let Some(l) = self.lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            p.push(format!("lengths: domain length {l} must be positive"));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            p.push(format!("t_final: {} must be positive", self.t_final));
        }
        if let Some(n) = self.nx.iter().find(|n| **n < MIN_NODES) {
            p.push(format!("nx: {n} is below the minimum of {MIN_NODES}"));
        }
        if self.nt < MIN_NODES {
            p.push(format!("nt: {} is below the minimum of {MIN_NODES}", self.nt));
        }
        if self.nt.is_multiple_of(2) {
            p.push(format!("nt: {} must be odd so that t0 = T/2 is a node", self.nt));
        }
        if self.gamma.is_empty() {
            p.push("gamma: observation boundary is empty".into());
        }
        if let Some(f) = self.gamma.iter().find(|f| f.axis >= dim.max(1)) {
            p.push(format!("gamma: face {f} does not exist in {dim}D"));
        }
        let mut sorted = self.gamma.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            p.push("gamma: a face is listed twice".into());
        }
        p
    }
}

/// Validate a spec and build the grid.
pub fn build_grid(spec: &GridSpec) -> Result<Arc<Grid>> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::InvalidGrid(problems.join("; ")));
    }
    let mut gamma = spec.gamma.clone();
    gamma.sort();
    let h = spec.lengths.iter().zip(&spec.nx).map(|(l, n)| l / (*n as f64 - 1.0)).collect();
    Ok(Arc::new(Grid {
        lengths: spec.lengths.clone(),
        t_final: spec.t_final,
        nx: spec.nx.clone(),
        nt: spec.nt,
        gamma,
        h,
        tau: spec.t_final / (spec.nt as f64 - 1.0),
    }))
}

fn trapezoid(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.lengths.len()
    }
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }
    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn nx(&self) -> &[usize] {
        &self.nx
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn gamma(&self) -> &[Face] {
        &self.gamma
    }
    pub fn h(&self) -> &[f64] {
        &self.h
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            lengths: self.lengths.clone(),
            t_final: self.t_final,
            nx: self.nx.clone(),
            nt: self.nt,
            gamma: self.gamma.clone(),
        }
    }

    /// Number of spatial nodes.
    pub fn n_space(&self) -> usize {
        self.nx.iter().product()
    }

    /// Number of space-time nodes.
    pub fn n_nodes(&self) -> usize {
        self.n_space() * self.nt
    }

    /// Index of the time node `t0 = T/2`.
    pub fn k0(&self) -> usize {
        (self.nt - 1) / 2
    }

    /// Time of node `k`. Computed from the index so that `k` and `nt-1-k`
    /// are mirror images up to rounding.
    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.tau
    }

    /// `t (T - t)` at node `k`, exactly symmetric under `k -> nt-1-k`.
    pub fn ell(&self, k: usize) -> f64 {
        (k as f64 * self.tau) * ((self.nt - 1 - k) as f64 * self.tau)
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 * self.h[axis]
    }

    /// Stride of a spatial axis within one time slice.
    pub fn stride(&self, axis: usize) -> usize {
        self.nx[..axis].iter().product()
    }

    /// Per-axis indices of spatial node `s`.
    pub fn multi_index(&self, s: usize) -> [usize; 2] {
        let i0 = s % self.nx[0];
        let i1 = if self.dim() == 2 { s / self.nx[0] } else { 0 };
        [i0, i1]
    }

    /// Coordinates of spatial node `s` (unused axes are zero).
    pub fn point(&self, s: usize) -> [f64; 2] {
        let [i0, i1] = self.multi_index(s);
        let x1 = if self.dim() == 2 { self.coord(1, i1) } else { 0.0 };
        [self.coord(0, i0), x1]
    }

    /// All `2 * dim` boundary faces in canonical order.
    pub fn all_faces(&self) -> Vec<Face> {
        (0..self.dim())
            .flat_map(|a| [Face::new(a, Side::Low), Face::new(a, Side::High)])
            .collect()
    }

    /// Spatial node indices on a face, ordered along the tangential axis.
    pub fn face_nodes(&self, face: Face) -> Vec<usize> {
        let fixed = match face.side {
            Side::Low => 0,
            Side::High => self.nx[face.axis] - 1,
        };
        if self.dim() == 1 {
            return vec![fixed];
        }
        let other = 1 - face.axis;
        (0..self.nx[other])
            .map(|j| {
                let mut idx = [0usize; 2];
                idx[face.axis] = fixed;
                idx[other] = j;
                idx[0] + self.nx[0] * idx[1]
            })
            .collect()
    }

    /// Surface quadrature weights matching [`Grid::face_nodes`].
    pub fn face_weights(&self, face: Face) -> Vec<f64> {
        if self.dim() == 1 {
            vec![1.0]
        } else {
            let other = 1 - face.axis;
            trapezoid(self.nx[other], self.h[other])
        }
    }

    /// Trapezoid weights over one time slice.
    pub fn space_weights(&self) -> Vec<f64> {
        let w0 = trapezoid(self.nx[0], self.h[0]);
        if self.dim() == 1 {
            return w0;
        }
        let w1 = trapezoid(self.nx[1], self.h[1]);
        w1.iter().flat_map(|b| w0.iter().map(move |a| a * b)).collect()
    }

    /// Trapezoid weights in time.
    pub fn time_weights(&self) -> Vec<f64> {
        trapezoid(self.nt, self.tau)
    }

    /// True if spatial node `s` lies on any boundary face.
    pub fn is_boundary(&self, s: usize) -> bool {
        let idx = self.multi_index(s);
        (0..self.dim()).any(|a| idx[a] == 0 || idx[a] == self.nx[a] - 1)
    }

    /// Time-node window `[k_lo, k_hi]` covering `[eps, T - eps]`.
    pub fn interior_window(&self, eps: f64) -> Result<(usize, usize)> {
        if !(eps > 0.0 && eps < 0.5 * self.t_final) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {eps} must lie strictly inside (0, T/2)"
            )));
        }
        let slack = 1e-9 * self.tau;
        let k_lo = ((eps - slack) / self.tau).ceil().max(0.0) as usize;
        let k_hi = self.nt - 1 - k_lo;
        if k_hi < k_lo + 2 {
            return Err(Error::InvalidArgument(format!(
                "epsilon {eps} leaves fewer than 3 time slices"
            )));
        }
        Ok((k_lo, k_hi))
    }
}

/// Where a [`GridFn`] lives.
#[derive(Debug, Clone, PartialEq)]
pub enum FnKind {
    /// All space-time nodes.
    SpaceTime,
    /// One time slice (spatial nodes only).
    Slice,
    /// Boundary values over `(face nodes) x (time)`, face-major then time, then
    /// node along the face.
    Trace(Vec<Face>),
}

/// Nodal values of a function on a grid.
#[derive(Debug, Clone)]
pub struct GridFn {
    grid: Arc<Grid>,
    kind: FnKind,
    values: Vec<f64>,
}

/// Derivatives available through [`diff`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deriv {
    Dt,
    Dx(usize),
    Dxx(usize, usize),
    Dtt,
    DtDx(usize),
    DtDxx(usize, usize),
}

fn trace_len(grid: &Grid, faces: &[Face]) -> usize {
    faces.iter().map(|f| grid.face_nodes(*f).len()).sum::<usize>() * grid.nt()
}

impl GridFn {
    pub fn new(grid: Arc<Grid>, kind: FnKind, values: Vec<f64>) -> Result<Self> {
        let expected = match &kind {
            FnKind::SpaceTime => grid.n_nodes(),
            FnKind::Slice => grid.n_space(),
            FnKind::Trace(faces) => trace_len(&grid, faces),
        };
        if values.len() != expected {
            return Err(Error::Mismatch(format!(
                "{kind:?} function needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { grid, kind, values })
    }

    pub fn zeros(grid: Arc<Grid>, kind: FnKind) -> Self {
        let n = match &kind {
            FnKind::SpaceTime => grid.n_nodes(),
            FnKind::Slice => grid.n_space(),
            FnKind::Trace(faces) => trace_len(&grid, faces),
        };
        Self { grid, kind, values: vec![0.0; n] }
    }

    /// Sample `f(x, t)` at every space-time node.
    pub fn sample(grid: &Arc<Grid>, f: impl Fn([f64; 2], f64) -> f64) -> Self {
        let ns = grid.n_space();
        let pts: Vec<[f64; 2]> = (0..ns).map(|s| grid.point(s)).collect();
        let values = (0..grid.nt())
            .flat_map(|k| {
                let t = grid.t(k);
                pts.iter().map(move |p| (p, t))
            })
            .map(|(p, t)| f(*p, t))
            .collect();
        Self { grid: grid.clone(), kind: FnKind::SpaceTime, values }
    }

    /// Sample `f(x)` on one time slice.
    pub fn sample_slice(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.n_space()).map(|s| f(grid.point(s))).collect();
        Self { grid: grid.clone(), kind: FnKind::Slice, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn kind(&self) -> &FnKind {
        &self.kind
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_space_time(&self) -> bool {
        self.kind == FnKind::SpaceTime
    }

    fn require(&self, kind: &FnKind, what: &str) -> Result<()> {
        if &self.kind == kind {
            Ok(())
        } else {
            Err(Error::Mismatch(format!("{what} expects a {kind:?} function, got {:?}", self.kind)))
        }
    }

    pub fn require_space_time(&self, what: &str) -> Result<()> {
        self.require(&FnKind::SpaceTime, what)
    }

    pub fn require_slice(&self, what: &str) -> Result<()> {
        self.require(&FnKind::Slice, what)
    }

    /// Values on time slice `k` of a space-time function.
    pub fn slice(&self, k: usize) -> Result<GridFn> {
        self.require_space_time("slice")?;
        if k >= self.grid.nt() {
            return Err(Error::InvalidArgument(format!("time index {k} out of range")));
        }
        let ns = self.grid.n_space();
        Ok(GridFn {
            grid: self.grid.clone(),
            kind: FnKind::Slice,
            values: self.values[k * ns..(k + 1) * ns].to_vec(),
        })
    }

    /// The slice at `t0 = T/2`.
    pub fn at_t0(&self) -> Result<GridFn> {
        self.slice(self.grid.k0())
    }

    /// Repeat a slice at every time node.
    pub fn broadcast(&self) -> Result<GridFn> {
        self.require_slice("broadcast")?;
        let values = (0..self.grid.nt()).flat_map(|_| self.values.iter().copied()).collect();
        Ok(GridFn { grid: self.grid.clone(), kind: FnKind::SpaceTime, values })
    }

    /// Boundary trace of a space-time function on `faces`.
    pub fn trace(&self, faces: &[Face]) -> Result<GridFn> {
        self.require_space_time("trace")?;
        let ns = self.grid.n_space();
        let mut values = Vec::with_capacity(trace_len(&self.grid, faces));
        for face in faces {
            let nodes = self.grid.face_nodes(*face);
            for k in 0..self.grid.nt() {
                values.extend(nodes.iter().map(|s| self.values[k * ns + s]));
            }
        }
        Ok(GridFn { grid: self.grid.clone(), kind: FnKind::Trace(faces.to_vec()), values })
    }

    fn check_compatible(&self, other: &GridFn) -> Result<()> {
        if self.kind != other.kind || !(Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid) {
            return Err(Error::Mismatch("operands live on different grids or node sets".into()));
        }
        Ok(())
    }

    /// Pointwise combination `op(self, other)`.
    pub fn zip_with(&self, other: &GridFn, op: impl Fn(f64, f64) -> f64) -> Result<GridFn> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| op(*a, *b)).collect();
        Ok(GridFn { grid: self.grid.clone(), kind: self.kind.clone(), values })
    }

    pub fn map(&self, op: impl Fn(f64) -> f64) -> GridFn {
        GridFn {
            grid: self.grid.clone(),
            kind: self.kind.clone(),
            values: self.values.iter().map(|v| op(*v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> GridFn {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &GridFn) -> Result<GridFn> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFn) -> Result<GridFn> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &GridFn) -> Result<GridFn> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Apply a 1D stencil of `order` along `axis` of a block of `nt` slices.
/// Axis `dim` denotes time.
fn apply_axis(grid: &Grid, values: &[f64], nt: usize, axis: usize, order: usize) -> Vec<f64> {
    let ns = grid.n_space();
    let dim = grid.dim();
    let (n, h, stride) = if axis == dim {
        (grid.nt(), grid.tau(), ns)
    } else {
        (grid.nx()[axis], grid.h()[axis], grid.stride(axis))
    };
    let stencils: Vec<_> = (0..n).map(|i| stencil::of_order(order, n, i, h)).collect();
    let mut out = vec![0.0; values.len()];
    let total = ns * nt;
    for (idx, o) in out.iter_mut().enumerate().take(total) {
        let pos = (idx / stride) % n;
        let line_start = idx - pos * stride;
        *o = stencils[pos].apply(values, line_start, stride);
    }
    out
}

/// Discrete derivative of a space-time function or a slice. Time derivatives
/// require a space-time function.
pub fn diff(f: &GridFn, d: Deriv) -> Result<GridFn> {
    let grid = f.grid().clone();
    let dim = grid.dim();
    let check_axis = |a: usize| {
        if a >= dim {
            Err(Error::InvalidArgument(format!("axis {a} out of range for {dim}D grid")))
        } else {
            Ok(())
        }
    };
    let nt = match f.kind() {
        FnKind::SpaceTime => grid.nt(),
        FnKind::Slice => {
            if matches!(d, Deriv::Dt | Deriv::Dtt | Deriv::DtDx(_) | Deriv::DtDxx(..)) {
                return Err(Error::Mismatch("time derivative of a slice".into()));
            }
            1
        }
        FnKind::Trace(_) => return Err(Error::Mismatch("cannot differentiate a trace".into())),
    };
    let v = f.values();
    let spatial2 = |v: &[f64], i: usize, j: usize| -> Vec<f64> {
        if i == j {
            apply_axis(&grid, v, nt, i, 2)
        } else {
            let t = apply_axis(&grid, v, nt, i, 1);
            apply_axis(&grid, &t, nt, j, 1)
        }
    };
    let values = match d {
        Deriv::Dt => apply_axis(&grid, v, nt, dim, 1),
        Deriv::Dtt => apply_axis(&grid, v, nt, dim, 2),
        Deriv::Dx(i) => {
            check_axis(i)?;
            apply_axis(&grid, v, nt, i, 1)
        }
        Deriv::Dxx(i, j) => {
            check_axis(i)?;
            check_axis(j)?;
            spatial2(v, i, j)
        }
        Deriv::DtDx(i) => {
            check_axis(i)?;
            let t = apply_axis(&grid, v, nt, dim, 1);
            apply_axis(&grid, &t, nt, i, 1)
        }
        Deriv::DtDxx(i, j) => {
            check_axis(i)?;
            check_axis(j)?;
            let t = apply_axis(&grid, v, nt, dim, 1);
            spatial2(&t, i, j)
        }
    };
    GridFn::new(grid.clone(), f.kind().clone(), values)
}
