//! The forward-backward system: discrete residuals, manufactured cases,
//! pairs of nonlinear states, and a Picard solver for the linear system
//!
//! `dt u + A u = c0 v + F`, `dt v - B v = A0 u + G`
//!
//! with homogeneous conormal boundary data.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coefficients::{apply_operator, CoeffSet, MultiIndex, NonlinearCoeffs, OpKind, SourceFactors};
use crate::ensemble::{EnsembleSpec, Mode, SeriesField};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{diff, Deriv, FnKind, Grid, GridFn};
use crate::stencil;

/// `(dt u + A u - c0 v, dt v - B v - A0 u)`.
pub fn linear_residual(u: &GridFn, v: &GridFn, c: &CoeffSet) -> Result<(GridFn, GridFn)> {
    let c0v = v.zip_with(&GridFn::new(v.grid().clone(), FnKind::SpaceTime, c.c0.clone())?, |a, b| a * b)?;
    let ru = diff(u, Deriv::Dt)?.add(&apply_operator(OpKind::A, u, c)?)?.sub(&c0v)?;
    let rv = diff(v, Deriv::Dt)?
        .sub(&apply_operator(OpKind::B, v, c)?)?
        .sub(&apply_operator(OpKind::A0, u, c)?)?;
    Ok((ru, rv))
}

fn grad(f: &GridFn) -> Result<Vec<GridFn>> {
    (0..f.grid().dim()).map(|i| diff(f, Deriv::Dx(i))).collect()
}

fn laplacian(f: &GridFn) -> Result<GridFn> {
    let mut acc = diff(f, Deriv::Dxx(0, 0))?;
    for i in 1..f.grid().dim() {
        acc = acc.add(&diff(f, Deriv::Dxx(i, i))?)?;
    }
    Ok(acc)
}

fn dot(a: &[GridFn], b: &[GridFn]) -> Result<GridFn> {
    let mut acc = a[0].mul(&b[0])?;
    for (x, y) in a.iter().zip(b).skip(1) {
        acc = acc.add(&x.mul(y)?)?;
    }
    Ok(acc)
}

/// Residuals of the nonlinear system
/// `dt u + a Lap u - kappa |grad u|^2 / 2 + p v` and
/// `dt v - Lap(a v) - div(kappa v grad u)`, with the divergence terms
/// expanded by the product rule.
pub fn nonlinear_residual(u: &GridFn, v: &GridFn, nl: &NonlinearCoeffs) -> Result<(GridFn, GridFn)> {
    let (a, kappa, p) = (&nl.a, &nl.kappa, &nl.p);
    let gu = grad(u)?;
    let gv = grad(v)?;
    let ga = grad(a)?;
    let gk = grad(kappa)?;
    let lap_u = laplacian(u)?;
    let ru = diff(u, Deriv::Dt)?
        .add(&a.mul(&lap_u)?)?
        .sub(&kappa.mul(&dot(&gu, &gu)?)?.scale(0.5))?
        .add(&p.mul(v)?)?;
    let lap_av = a.mul(&laplacian(v)?)?.add(&dot(&ga, &gv)?.scale(2.0))?.add(&v.mul(&laplacian(a)?)?)?;
    let div = kappa
        .mul(v)?
        .mul(&lap_u)?
        .add(&v.mul(&dot(&gk, &gu)?)?)?
        .add(&kappa.mul(&dot(&gv, &gu)?)?)?;
    let rv = diff(v, Deriv::Dt)?.sub(&lap_av)?.sub(&div)?;
    Ok((ru, rv))
}

/// How the time factors `q1, q2` of a manufactured case are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// `q = (discrete residual) / f`: the sampled pair solves the discrete
    /// system exactly.
    #[default]
    Discrete,
    /// `q = (closed-form residual) / f`: the sampled pair solves the discrete
    /// system up to truncation error.
    Analytic,
}

/// A manufactured solution: series for `u, v` and spatial amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecipe {
    pub u: SeriesField,
    pub v: SeriesField,
    pub f: Expr,
    pub g: Expr,
}

/// A pair `(u, v)` with sources `q1 f`, `q2 g` that make it a solution.
#[derive(Debug, Clone)]
pub struct ManufacturedCase {
    pub coeffs: CoeffSet,
    pub recipe: CaseRecipe,
    pub mode: SourceMode,
    pub u: GridFn,
    pub v: GridFn,
    pub sources: SourceFactors,
    /// `(q1 f, q2 g)`.
    pub forcing: (GridFn, GridFn),
    /// Discrete residual of the sampled pair.
    pub residual: (GridFn, GridFn),
}

impl ManufacturedCase {
    pub fn grid(&self) -> &Arc<Grid> {
        self.u.grid()
    }
}

fn analytic_operator(series: &SeriesField, c: &CoeffSet, kind: OpKind) -> Result<GridFn> {
    let g = c.grid();
    let dim = g.dim();
    let n = g.n_nodes();
    let mut acc = vec![0.0; n];
    let mut add = |coef: &[f64], dx: [u8; 2]| {
        let d = series.analytic(g, dx, 0);
        for (a, (c, v)) in acc.iter_mut().zip(coef.iter().zip(d.values())) {
            *a += c * v;
        }
    };
    match kind {
        OpKind::A0 => {
            for (m, f) in &c.coupling {
                add(f, m.0);
            }
        }
        _ => {
            let op = c.op(kind).expect("second-order");
            for i in 0..dim {
                for j in 0..dim {
                    let mut dx = [0u8; 2];
                    dx[i] += 1;
                    dx[j] += 1;
                    add(&op.principal[i * dim + j], dx);
                }
            }
            for j in 0..dim {
                let mut dx = [0u8; 2];
                dx[j] = 1;
                add(&op.first[j], dx);
            }
            add(&op.zeroth, [0, 0]);
        }
    }
    GridFn::new(g.clone(), FnKind::SpaceTime, acc)
}

/// Closed-form residuals of a recipe evaluated at the nodes.
pub fn analytic_residual(recipe: &CaseRecipe, c: &CoeffSet) -> Result<(GridFn, GridFn)> {
    let g = c.grid();
    let c0 = GridFn::new(g.clone(), FnKind::SpaceTime, c.c0.clone())?;
    let v = recipe.v.analytic(g, [0, 0], 0);
    let ru = recipe
        .u
        .analytic(g, [0, 0], 1)
        .add(&analytic_operator(&recipe.u, c, OpKind::A)?)?
        .sub(&c0.mul(&v)?)?;
    let rv = recipe
        .v
        .analytic(g, [0, 0], 1)
        .sub(&analytic_operator(&recipe.v, c, OpKind::B)?)?
        .sub(&analytic_operator(&recipe.u, c, OpKind::A0)?)?;
    Ok((ru, rv))
}

/// Build a manufactured case. Rejects amplitudes that vanish somewhere and
/// time factors with `|q(., t0)| < q_min`.
pub fn mms_linear(recipe: &CaseRecipe, coeffs: &CoeffSet, mode: SourceMode, q_min: f64) -> Result<ManufacturedCase> {
    let g = coeffs.grid().clone();
    let u = recipe.u.sample(&g);
    let v = recipe.v.sample(&g);
    let residual = linear_residual(&u, &v, coeffs)?;
    let (fu, fv) = match mode {
        SourceMode::Discrete => residual.clone(),
        SourceMode::Analytic => analytic_residual(recipe, coeffs)?,
    };
    let f = GridFn::sample_slice(&g, |x| recipe.f.eval(x, 0.0));
    let gs = GridFn::sample_slice(&g, |x| recipe.g.eval(x, 0.0));
    for (name, amp) in [("f", &f), ("g", &gs)] {
        let min = amp.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if !(min > 0.0) {
            return Err(Error::Rejected(format!("amplitude {name} vanishes on the grid")));
        }
    }
    let q1 = fu.zip_with(&f.broadcast()?, |a, b| a / b)?;
    let q2 = fv.zip_with(&gs.broadcast()?, |a, b| a / b)?;
    for (name, q) in [("q1", &q1), ("q2", &q2)] {
        let slice = q.at_t0()?;
        let bad = slice.values().iter().filter(|v| !(v.abs() >= q_min)).count();
        if bad > 0 {
            let min = slice.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            return Err(Error::Rejected(format!(
                "|{name}(., t0)| drops to {min:.3e} < {q_min} at {bad} nodes"
            )));
        }
    }
    let sources = SourceFactors { q1, q2, f, g: gs };
    let forcing = sources.forcing()?;
    Ok(ManufacturedCase { coeffs: coeffs.clone(), recipe: recipe.clone(), mode, u, v, sources, forcing, residual })
}

/// Random manufactured cases: ensemble series plus a spatially constant
/// drift `d t / T` in both components, which keeps the time factors away
/// from zero at `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEnsembleSpec {
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default = "default_drift")]
    pub drift: f64,
    #[serde(default = "default_q_min")]
    pub q_min: f64,
    #[serde(default)]
    pub mode: SourceMode,
}

fn default_drift() -> f64 {
    6.0
}

pub fn default_q_min() -> f64 {
    0.1
}

impl Default for CaseEnsembleSpec {
    fn default() -> Self {
        Self {
            ensemble: EnsembleSpec { members: 20, modes: 2, time_degree: 2, amplitude: 0.5 },
            drift: default_drift(),
            q_min: default_q_min(),
            mode: SourceMode::Discrete,
        }
    }
}

/// Draw `spec.ensemble.members` admissible cases, redrawing rejected ones.
pub fn generate_cases(
    seed: u64,
    spec: &CaseEnsembleSpec,
    f: &Expr,
    g: &Expr,
    coeffs: &CoeffSet,
) -> Result<Vec<ManufacturedCase>> {
    spec.ensemble.validate()?;
    let dim = coeffs.grid().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.ensemble.members);
    let mut attempts = 0;
    while out.len() < spec.ensemble.members {
        attempts += 1;
        if attempts > 50 * spec.ensemble.members {
            return Err(Error::Rejected(format!(
                "only {} of {} cases admissible after {attempts} draws",
                out.len(),
                spec.ensemble.members
            )));
        }
        let drift = |rng: &mut ChaCha8Rng| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            SeriesField::new(vec![Mode { k: [0, 0], m: 1, c: sign * spec.drift }])
        };
        let u = spec.ensemble.draw(dim, &mut rng).plus(&drift(&mut rng));
        let v = spec.ensemble.draw(dim, &mut rng).plus(&drift(&mut rng));
        let recipe = CaseRecipe { u, v, f: f.clone(), g: g.clone() };
        match mms_linear(&recipe, coeffs, spec.mode, spec.q_min) {
            Ok(c) => out.push(c),
            Err(Error::Rejected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn sup(f: &GridFn) -> f64 {
    f.max_abs()
}

/// `sum_{|g| <= order} sup |d^g f|` over all space-time nodes.
pub fn w_inf_norm(f: &GridFn, order: u8) -> Result<f64> {
    let mut total = 0.0;
    for m in MultiIndex::all(f.grid().dim()).into_iter().filter(|m| m.order() <= order) {
        total += match m.0 {
            [0, 0] => sup(f),
            [1, 0] => sup(&diff(f, Deriv::Dx(0))?),
            [0, 1] => sup(&diff(f, Deriv::Dx(1))?),
            [2, 0] => sup(&diff(f, Deriv::Dxx(0, 0))?),
            [0, 2] => sup(&diff(f, Deriv::Dxx(1, 1))?),
            _ => sup(&diff(f, Deriv::Dxx(0, 1))?),
        };
    }
    Ok(total)
}

/// Two states of the nonlinear system placed symmetrically about a
/// background, `u_{1,2} = ub +- c d / 2`, `v_{1,2} = vb +- c e / 2`, with the
/// forcings that make each one a solution.
#[derive(Debug, Clone)]
pub struct NonlinearPair {
    pub coeffs: NonlinearCoeffs,
    pub states: [(GridFn, GridFn); 2],
    pub forcing: [(GridFn, GridFn); 2],
    /// `max_k |u_k|_{W^{2,inf}} + |v_k|_{W^{1,inf}}`.
    pub m1: f64,
}

pub fn nonlinear_pair(
    background: (&GridFn, &GridFn),
    perturbation: (&GridFn, &GridFn),
    scale: f64,
    nl: &NonlinearCoeffs,
) -> Result<NonlinearPair> {
    let half = 0.5 * scale;
    let mut states = Vec::new();
    for sign in [1.0, -1.0] {
        let u = background.0.add(&perturbation.0.scale(sign * half))?;
        let v = background.1.add(&perturbation.1.scale(sign * half))?;
        states.push((u, v));
    }
    let forcing = [
        nonlinear_residual(&states[0].0, &states[0].1, nl)?,
        nonlinear_residual(&states[1].0, &states[1].1, nl)?,
    ];
    let mut m1 = 0.0f64;
    for (u, v) in &states {
        m1 = m1.max(w_inf_norm(u, 2)? + w_inf_norm(v, 1)?);
    }
    let states: [(GridFn, GridFn); 2] = states.try_into().expect("two states");
    Ok(NonlinearPair { coeffs: nl.clone(), states, forcing, m1 })
}

impl NonlinearPair {
    /// `(u1 - u2, v1 - v2)` and `(F1 - F2, G1 - G2)`.
    pub fn differences(&self) -> Result<((GridFn, GridFn), (GridFn, GridFn))> {
        let [(u1, v1), (u2, v2)] = &self.states;
        let [(f1, g1), (f2, g2)] = &self.forcing;
        Ok(((u1.sub(u2)?, v1.sub(v2)?), (f1.sub(f2)?, g1.sub(g2)?)))
    }

    /// `|kappa (grad u1 + grad u2)| + |grad kappa . grad u1 + kappa Lap u1|
    /// + |kappa v2| + |grad (kappa v2)|`, each in sup norm.
    pub fn m2(&self) -> Result<f64> {
        let kappa = &self.coeffs.kappa;
        let [(u1, _), (u2, v2)] = &self.states;
        let dim = u1.grid().dim();
        let g1 = grad(u1)?;
        let g2 = grad(u2)?;
        let gk = grad(kappa)?;
        let mut t1 = vec![0.0; u1.values().len()];
        for i in 0..dim {
            let s = kappa.mul(&g1[i].add(&g2[i])?)?;
            for (a, v) in t1.iter_mut().zip(s.values()) {
                *a += v * v;
            }
        }
        let t1 = t1.iter().fold(0.0f64, |m, v| m.max(v.sqrt()));
        let t2 = dot(&gk, &g1)?.add(&kappa.mul(&laplacian(u1)?)?)?.max_abs();
        let kv = kappa.mul(v2)?;
        let t3 = kv.max_abs();
        let gkv = grad(&kv)?;
        let mut t4 = vec![0.0; kv.values().len()];
        for d in &gkv {
            for (a, v) in t4.iter_mut().zip(d.values()) {
                *a += v * v;
            }
        }
        let t4 = t4.iter().fold(0.0f64, |m, v| m.max(v.sqrt()));
        Ok(t1 + t2 + t3 + t4)
    }
}

/// Settings of [`picard_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Relaxation of the `v` update.
    #[serde(default = "default_damping")]
    pub damping: f64,
}

fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    100
}
fn default_damping() -> f64 {
    1.0
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { tol: default_tol(), max_iter: default_max_iter(), damping: default_damping() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PicardStatus {
    Converged,
    Diverged,
    MaxIterations,
}

/// Result of [`picard_solve`]. `history[k]` is the fixed-point residual of
/// iterate `k + 1`.
#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub u: GridFn,
    pub v: GridFn,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub status: PicardStatus,
}

/// Dense factorizations of the implicit Euler step matrices.
struct Stepper {
    grid: Arc<Grid>,
    /// `I - tau A(t_k)` for every `k`.
    a_steps: Vec<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    b_steps: Vec<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

fn step_matrix(c: &CoeffSet, kind: OpKind, k: usize) -> DMatrix<f64> {
    let g = c.grid();
    let ns = g.n_space();
    let tau = g.tau();
    let mut m = DMatrix::zeros(ns, ns);
    let mut terms = Vec::new();
    let principal = &c.op(kind).expect("second-order").principal;
    let dim = g.dim();
    for s in 0..ns {
        let idx = g.multi_index(s);
        let face_axis = (0..dim).find(|&a| idx[a] == 0 || idx[a] == g.nx()[a] - 1);
        match face_axis {
            // Boundary rows: discrete conormal derivative equals zero.
            Some(axis) => {
                for j in 0..dim {
                    let a = principal[axis * dim + j][k * ns + s];
                    if a == 0.0 {
                        continue;
                    }
                    let st = stencil::first(g.nx()[j], idx[j], g.h()[j]);
                    let base = s - idx[j] * g.stride(j);
                    for (m_i, w) in st.terms() {
                        m[(s, base + m_i * g.stride(j))] += a * w;
                    }
                }
            }
            None => {
                terms.clear();
                c.spatial_terms(kind, k, s, &mut terms);
                m[(s, s)] += 1.0;
                for (j, w) in &terms {
                    m[(s, *j)] -= tau * w;
                }
            }
        }
    }
    m
}

impl Stepper {
    fn new(c: &CoeffSet) -> Self {
        let g = c.grid().clone();
        let a_steps = (0..g.nt()).map(|k| step_matrix(c, OpKind::A, k).lu()).collect();
        let b_steps = (0..g.nt()).map(|k| step_matrix(c, OpKind::B, k).lu()).collect();
        Self { grid: g, a_steps, b_steps }
    }

    fn solve(&self, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
        // Boundary rows carry homogeneous conditions.
        for (s, r) in rhs.iter_mut().enumerate() {
            if self.grid.is_boundary(s) {
                *r = 0.0;
            }
        }
        lu.solve(&DVector::from_vec(rhs))
            .map(|x| x.as_slice().to_vec())
            .ok_or_else(|| Error::Numerical("singular implicit step matrix".into()))
    }

    /// Backward sweep for `u` given `v`.
    fn backward(&self, c: &CoeffSet, v: &[f64], f: &[f64], u_final: &[f64]) -> Result<Vec<f64>> {
        let ns = self.grid.n_space();
        let nt = self.grid.nt();
        let tau = self.grid.tau();
        let mut u = vec![0.0; ns * nt];
        u[(nt - 1) * ns..].copy_from_slice(u_final);
        for k in (0..nt - 1).rev() {
            let rhs: Vec<f64> = (0..ns)
                .map(|s| {
                    let i = k * ns + s;
                    u[(k + 1) * ns + s] - tau * (c.c0[i] * v[i] + f[i])
                })
                .collect();
            let sol = self.solve(&self.a_steps[k], rhs)?;
            u[k * ns..(k + 1) * ns].copy_from_slice(&sol);
        }
        Ok(u)
    }

    /// Forward sweep for `v` given `u`.
    fn forward(&self, c: &CoeffSet, u: &[f64], g: &[f64], v_initial: &[f64]) -> Result<Vec<f64>> {
        let ns = self.grid.n_space();
        let nt = self.grid.nt();
        let tau = self.grid.tau();
        let ufn = GridFn::new(self.grid.clone(), FnKind::SpaceTime, u.to_vec())?;
        let a0u = apply_operator(OpKind::A0, &ufn, c)?;
        let mut v = vec![0.0; ns * nt];
        v[..ns].copy_from_slice(v_initial);
        for k in 1..nt {
            let rhs: Vec<f64> = (0..ns)
                .map(|s| {
                    let i = k * ns + s;
                    v[(k - 1) * ns + s] + tau * (a0u.values()[i] + g[i])
                })
                .collect();
            let sol = self.solve(&self.b_steps[k], rhs)?;
            v[k * ns..(k + 1) * ns].copy_from_slice(&sol);
        }
        Ok(v)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let d: Vec<f64> = new.iter().zip(old).map(|(a, b)| a - b).collect();
    l2(&d) / l2(new).max(f64::MIN_POSITIVE)
}

/// Solve the linear forward-backward system by alternating an implicit
/// Euler sweep backward in time for `u` (terminal data `u_final`) and one
/// forward in time for `v` (initial data `v_initial`). Convergence is
/// measured by the fixed-point residual of each iterate. Uses dense step
/// factorizations, so it suits small spatial grids.
pub fn picard_solve(
    coeffs: &CoeffSet,
    forcing: (&GridFn, &GridFn),
    u_final: &GridFn,
    v_initial: &GridFn,
    cfg: &PicardConfig,
) -> Result<PicardSolution> {
    let grid = coeffs.grid().clone();
    forcing.0.require_space_time("picard forcing")?;
    forcing.1.require_space_time("picard forcing")?;
    u_final.require_slice("terminal data")?;
    v_initial.require_slice("initial data")?;
    if !(cfg.damping > 0.0 && cfg.damping <= 1.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("damping must lie in (0, 1] and max_iter >= 1".into()));
    }
    let st = Stepper::new(coeffs);
    let (f, g) = (forcing.0.values(), forcing.1.values());
    let mut v = vec![0.0; grid.n_nodes()];
    v[..grid.n_space()].copy_from_slice(v_initial.values());
    let mut u = st.backward(coeffs, &v, f, u_final.values())?;
    v = st.forward(coeffs, &u, g, v_initial.values())?;
    let mut history = Vec::new();
    let mut status = PicardStatus::MaxIterations;
    let mut iterations = 1;
    loop {
        let u_next = st.backward(coeffs, &v, f, u_final.values())?;
        let mut r = rel_change(&u_next, &u);
        let v_hat = st.forward(coeffs, &u_next, g, v_initial.values())?;
        if cfg.damping < 1.0 {
            let v_check = st.forward(coeffs, &u, g, v_initial.values())?;
            r += rel_change(&v_check, &v);
        }
        history.push(r);
        let best = history.iter().copied().fold(f64::INFINITY, f64::min);
        if r < cfg.tol {
            status = PicardStatus::Converged;
            break;
        }
        if r > 10.0 * best || !r.is_finite() {
            status = PicardStatus::Diverged;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }
        u = u_next;
        v = v_hat.iter().zip(&v).map(|(a, b)| cfg.damping * a + (1.0 - cfg.damping) * b).collect();
        iterations += 1;
    }
    Ok(PicardSolution {
        u: GridFn::new(grid.clone(), FnKind::SpaceTime, u)?,
        v: GridFn::new(grid, FnKind::SpaceTime, v)?,
        iterations,
        history,
        status,
    })
}
