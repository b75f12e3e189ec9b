//! Inverse source problem: recover the spatial factors `f, g` of
//! `F = q1 f`, `G = q2 g` from lateral traces on the observation boundary
//! and interior slices at `t0`.
//!
//! The reconstruction is all-at-once: states and sources are joint unknowns
//! of one weighted least-squares problem whose rows are the discrete PDE
//! residuals, the trace and slice misfits, homogeneous conormal rows on every
//! face, and Tikhonov rows on the sources.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{apply_operator_slice, deriv_terms, CoeffSet, OpKind};
use crate::error::{Error, Result};
use crate::grid::{diff, Deriv, FnKind, Grid, GridFn};
use crate::lsq::{Preconditioner, RowBuilder, WeightedLsq};
use crate::norm::{d_gamma_squared, norm, NormKind};
use crate::stencil;
use crate::system::{default_q_min, ManufacturedCase};

/// Observations for the inverse problem.
#[derive(Debug, Clone)]
pub struct InverseData {
    pub coeffs: CoeffSet,
    pub q1: GridFn,
    pub q2: GridFn,
    /// Traces on the observation faces.
    pub u_trace: GridFn,
    pub v_trace: GridFn,
    pub ut_trace: GridFn,
    pub vt_trace: GridFn,
    /// Slices at `t0`.
    pub u0: GridFn,
    pub v0: GridFn,
    pub delta: f64,
    pub seed: u64,
    /// True sources, when known.
    pub truth: Option<(GridFn, GridFn)>,
}

impl InverseData {
    pub fn grid(&self) -> &Arc<Grid> {
        self.coeffs.grid()
    }

    /// Multiply all observations by `c`.
    pub fn scaled(&self, c: f64) -> InverseData {
        let mut d = self.clone();
        for f in [&mut d.u_trace, &mut d.v_trace, &mut d.ut_trace, &mut d.vt_trace, &mut d.u0, &mut d.v0] {
            *f = f.scale(c);
        }
        d.truth = d.truth.map(|(f, g)| (f.scale(c), g.scale(c)));
        d
    }
}

fn add_noise(f: &GridFn, delta: f64, rng: &mut ChaCha8Rng) -> GridFn {
    let sigma = delta * f.max_abs();
    let mut out = f.clone();
    for v in out.values_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    out
}

/// Extract the observations of a manufactured case and perturb each array
/// by i.i.d. Gaussian noise of standard deviation `delta * max|array|`.
pub fn make_inverse_data(case: &ManufacturedCase, delta: f64, seed: u64) -> Result<InverseData> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level {delta} must be finite and >= 0")));
    }
    let grid = case.grid();
    let gamma = grid.gamma().to_vec();
    let ut = diff(&case.u, Deriv::Dt)?;
    let vt = diff(&case.v, Deriv::Dt)?;
    let clean = [
        case.u.trace(&gamma)?,
        case.v.trace(&gamma)?,
        ut.trace(&gamma)?,
        vt.trace(&gamma)?,
        case.u.at_t0()?,
        case.v.at_t0()?,
    ];
    let [u_trace, v_trace, ut_trace, vt_trace, u0, v0] = if delta == 0.0 {
        clean
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        clean.map(|f| add_noise(&f, delta, &mut rng))
    };
    Ok(InverseData {
        coeffs: case.coeffs.clone(),
        q1: case.sources.q1.clone(),
        q2: case.sources.q2.clone(),
        u_trace,
        v_trace,
        ut_trace,
        vt_trace,
        u0,
        v0,
        delta,
        seed,
        truth: Some((case.sources.f.clone(), case.sources.g.clone())),
    })
}

/// Weights and solver settings of the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionConfig {
    #[serde(default = "one")]
    pub w_pde: f64,
    #[serde(default = "ten")]
    pub w_gamma: f64,
    /// Weight of the `H2(Omega)` misfit of the `t0` slices.
    #[serde(default = "ten")]
    pub w_slice: f64,
    /// Weight of the homogeneous conormal rows.
    #[serde(default = "ten")]
    pub w_neumann: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

fn one() -> f64 {
    1.0
}
fn ten() -> f64 {
    10.0
}
fn default_beta() -> f64 {
    1e-10
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iter() -> usize {
    5000
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            w_pde: one(),
            w_gamma: ten(),
            w_slice: ten(),
            w_neumann: ten(),
            beta: default_beta(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            preconditioner: Preconditioner::Auto,
        }
    }
}

impl ReconstructionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("w_gamma", self.w_gamma),
            ("w_slice", self.w_slice),
            ("w_neumann", self.w_neumann),
            ("beta", self.beta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.w_pde > 0.0 && self.w_pde.is_finite()) {
            errs.push(format!("w_pde must be positive, got {}", self.w_pde));
        }
        if !(self.tol > 0.0) {
            errs.push(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            errs.push("max_iter must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Value of each objective term at the returned estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Objective {
    pub pde: f64,
    pub gamma: f64,
    pub slice: f64,
    pub neumann: f64,
    pub tikhonov: f64,
    pub total: f64,
}

/// Errors of the estimates against known truth: relative and absolute
/// `L2(Omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceErrors {
    pub rel_f: f64,
    pub rel_g: f64,
    pub abs_f: f64,
    pub abs_g: f64,
}

impl SourceErrors {
    pub fn compute(f: &GridFn, g: &GridFn, truth: &(GridFn, GridFn)) -> Result<Self> {
        let abs_f = norm(&f.sub(&truth.0)?, NormKind::L2Slice)?;
        let abs_g = norm(&g.sub(&truth.1)?, NormKind::L2Slice)?;
        Ok(Self {
            abs_f,
            abs_g,
            rel_f: abs_f / norm(&truth.0, NormKind::L2Slice)?,
            rel_g: abs_g / norm(&truth.1, NormKind::L2Slice)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub f: GridFn,
    pub g: GridFn,
    pub u: GridFn,
    pub v: GridFn,
    pub objective: Objective,
    /// Objective after each solver iteration.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
    pub errors: Option<SourceErrors>,
    pub warnings: Vec<String>,
    pub preconditioner: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Pde,
    Gamma,
    Slice,
    Neumann,
    Tikhonov,
}

/// Where the target value of a row comes from.
#[derive(Debug, Clone, Copy)]
enum Target {
    Zero,
    UTrace(usize),
    VTrace(usize),
    UtTrace(usize),
    VtTrace(usize),
    USlice(usize, Option<Deriv>),
    VSlice(usize, Option<Deriv>),
}

/// Assembled least-squares system for one grid, coefficient set, time
/// factors and configuration; reusable for many data sets.
pub struct InverseProblem {
    grid: Arc<Grid>,
    cfg: ReconstructionConfig,
    lsq: WeightedLsq,
    targets: Vec<(Group, Target)>,
}

fn slice_derivs(dim: usize) -> Vec<Option<Deriv>> {
    let mut d = vec![None];
    d.extend((0..dim).map(|i| Some(Deriv::Dx(i))));
    for i in 0..dim {
        for j in 0..dim {
            d.push(Some(Deriv::Dxx(i, j)));
        }
    }
    d
}

impl InverseProblem {
    pub fn new(coeffs: &CoeffSet, q1: &GridFn, q2: &GridFn, cfg: &ReconstructionConfig) -> Result<Self> {
        cfg.validate()?;
        q1.require_space_time("q1")?;
        q2.require_space_time("q2")?;
        let grid = coeffs.grid().clone();
        let g = &*grid;
        let (ns, nt, dim) = (g.n_space(), g.nt(), g.dim());
        let n_state = 2 * ns * nt;
        let n = n_state + 2 * ns;
        let iu = |k: usize, s: usize| k * 2 * ns + s;
        let iv = |k: usize, s: usize| k * 2 * ns + ns + s;
        let (i_f, i_g) = (|s: usize| n_state + s, |s: usize| n_state + ns + s);
        let wt = g.time_weights();
        let wx = g.space_weights();
        let mut rows = RowBuilder::new();
        let mut targets = Vec::new();
        let mut terms: Vec<(usize, f64)> = Vec::new();
        let mut spatial = Vec::new();

        // PDE residual rows.
        for k in 0..nt {
            let tst = stencil::first(nt, k, g.tau());
            for s in 0..ns {
                let w = cfg.w_pde * wt[k] * wx[s];
                let idx = k * ns + s;
                terms.clear();
                terms.extend(tst.terms().map(|(j, c)| (iu(j, s), c)));
                spatial.clear();
                coeffs.spatial_terms(OpKind::A, k, s, &mut spatial);
                terms.extend(spatial.iter().map(|(j, c)| (iu(k, *j), *c)));
                terms.push((iv(k, s), -coeffs.c0[idx]));
                terms.push((i_f(s), -q1.values()[idx]));
                rows.push(w, terms.iter().copied());
                targets.push((Group::Pde, Target::Zero));

                terms.clear();
                terms.extend(tst.terms().map(|(j, c)| (iv(j, s), c)));
                spatial.clear();
                coeffs.spatial_terms(OpKind::B, k, s, &mut spatial);
                terms.extend(spatial.iter().map(|(j, c)| (iv(k, *j), -c)));
                spatial.clear();
                coeffs.spatial_terms(OpKind::A0, k, s, &mut spatial);
                terms.extend(spatial.iter().map(|(j, c)| (iu(k, *j), -c)));
                terms.push((i_g(s), -q2.values()[idx]));
                rows.push(w, terms.iter().copied());
                targets.push((Group::Pde, Target::Zero));
            }
        }

        // Trace rows, in the layout of `GridFn::trace`.
        if cfg.w_gamma > 0.0 {
            let mut pos = 0;
            for face in g.gamma() {
                let nodes = g.face_nodes(*face);
                let wf = g.face_weights(*face);
                for k in 0..nt {
                    let tst = stencil::first(nt, k, g.tau());
                    for (s, w_face) in nodes.iter().zip(&wf) {
                        let w = cfg.w_gamma * wt[k] * w_face;
                        rows.push(w, [(iu(k, *s), 1.0)]);
                        targets.push((Group::Gamma, Target::UTrace(pos)));
                        rows.push(w, [(iv(k, *s), 1.0)]);
                        targets.push((Group::Gamma, Target::VTrace(pos)));
                        rows.push(w, tst.terms().map(|(j, c)| (iu(j, *s), c)));
                        targets.push((Group::Gamma, Target::UtTrace(pos)));
                        rows.push(w, tst.terms().map(|(j, c)| (iv(j, *s), c)));
                        targets.push((Group::Gamma, Target::VtTrace(pos)));
                        pos += 1;
                    }
                }
            }
        }

        // H2 misfit of the t0 slices.
        if cfg.w_slice > 0.0 {
            let k0 = g.k0();
            for d in slice_derivs(dim) {
                for s in 0..ns {
                    let w = cfg.w_slice * wx[s];
                    spatial.clear();
                    deriv_terms(g, s, d, 1.0, &mut spatial);
                    rows.push(w, spatial.iter().map(|(j, c)| (iu(k0, *j), *c)));
                    targets.push((Group::Slice, Target::USlice(s, d)));
                    rows.push(w, spatial.iter().map(|(j, c)| (iv(k0, *j), *c)));
                    targets.push((Group::Slice, Target::VSlice(s, d)));
                }
            }
        }

        // Homogeneous conormal rows on every face.
        if cfg.w_neumann > 0.0 {
            for face in g.all_faces() {
                let nodes = g.face_nodes(face);
                let wf = g.face_weights(face);
                for k in 0..nt {
                    for (s, w_face) in nodes.iter().zip(&wf) {
                        let w = cfg.w_neumann * wt[k] * w_face;
                        for (kind, col) in [(OpKind::A, &iu as &dyn Fn(usize, usize) -> usize), (OpKind::B, &iv)] {
                            let principal = &coeffs.op(kind).expect("second-order").principal;
                            terms.clear();
                            for j in 0..dim {
                                let a = principal[face.axis * dim + j][k * ns + s];
                                spatial.clear();
                                deriv_terms(g, *s, Some(Deriv::Dx(j)), a, &mut spatial);
                                terms.extend(spatial.iter().map(|(m, c)| (col(k, *m), *c)));
                            }
                            rows.push(w, terms.iter().copied());
                            targets.push((Group::Neumann, Target::Zero));
                        }
                    }
                }
            }
        }

        if cfg.beta > 0.0 {
            for s in 0..ns {
                rows.push(cfg.beta * wx[s], [(i_f(s), 1.0)]);
                targets.push((Group::Tikhonov, Target::Zero));
                rows.push(cfg.beta * wx[s], [(i_g(s), 1.0)]);
                targets.push((Group::Tikhonov, Target::Zero));
            }
        }

        // Time levels couple over at most two neighbours in the normal
        // matrix; the source columns fill in densely at the end.
        let fill = n_state * (6 * ns) + 2 * ns * n;
        let lsq = WeightedLsq::new(rows, n, cfg.preconditioner, fill)?;
        Ok(Self { grid, cfg: *cfg, lsq, targets })
    }

    fn target_values(&self, data: &InverseData) -> Result<Vec<f64>> {
        let g = &*self.grid;
        let gamma_len = data.u_trace.values().len();
        for f in [&data.v_trace, &data.ut_trace, &data.vt_trace] {
            if f.values().len() != gamma_len || !matches!(f.kind(), FnKind::Trace(_)) {
                return Err(Error::Mismatch("trace arrays must share the observation node set".into()));
            }
        }
        data.u0.require_slice("u0")?;
        data.v0.require_slice("v0")?;
        let mut buf = Vec::new();
        let mut apply = |slice: &GridFn, s: usize, d: Option<Deriv>| {
            buf.clear();
            deriv_terms(g, s, d, 1.0, &mut buf);
            buf.iter().map(|(j, c)| c * slice.values()[*j]).sum::<f64>()
        };
        Ok(self
            .targets
            .iter()
            .map(|(_, t)| match *t {
                Target::Zero => 0.0,
                Target::UTrace(i) => data.u_trace.values()[i],
                Target::VTrace(i) => data.v_trace.values()[i],
                Target::UtTrace(i) => data.ut_trace.values()[i],
                Target::VtTrace(i) => data.vt_trace.values()[i],
                Target::USlice(s, d) => apply(&data.u0, s, d),
                Target::VSlice(s, d) => apply(&data.v0, s, d),
            })
            .collect())
    }

    pub fn solve(&self, data: &InverseData) -> Result<ReconstructionResult> {
        if !Arc::ptr_eq(data.grid(), &self.grid) && **data.grid() != *self.grid {
            return Err(Error::Mismatch("data and problem live on different grids".into()));
        }
        let trace_nodes: usize = self.grid.gamma().iter().map(|f| self.grid.face_nodes(*f).len()).sum();
        if data.u_trace.values().len() != trace_nodes * self.grid.nt() {
            return Err(Error::Mismatch("trace arrays do not match the observation boundary".into()));
        }
        let target = self.target_values(data)?;
        let sol = self.lsq.solve(&target, self.cfg.tol, self.cfg.max_iter)?;
        let g = &self.grid;
        let (ns, nt) = (g.n_space(), g.nt());
        let mut u = vec![0.0; ns * nt];
        let mut v = vec![0.0; ns * nt];
        for k in 0..nt {
            u[k * ns..(k + 1) * ns].copy_from_slice(&sol.x[k * 2 * ns..k * 2 * ns + ns]);
            v[k * ns..(k + 1) * ns].copy_from_slice(&sol.x[k * 2 * ns + ns..(k + 1) * 2 * ns]);
        }
        let n_state = 2 * ns * nt;
        let f = GridFn::new(g.clone(), FnKind::Slice, sol.x[n_state..n_state + ns].to_vec())?;
        let gs = GridFn::new(g.clone(), FnKind::Slice, sol.x[n_state + ns..].to_vec())?;
        let mut objective = Objective::default();
        for ((group, _), r) in self.targets.iter().zip(&sol.residual) {
            let slot = match group {
                Group::Pde => &mut objective.pde,
                Group::Gamma => &mut objective.gamma,
                Group::Slice => &mut objective.slice,
                Group::Neumann => &mut objective.neumann,
                Group::Tikhonov => &mut objective.tikhonov,
            };
            *slot += r * r;
        }
        objective.total = objective.pde + objective.gamma + objective.slice + objective.neumann + objective.tikhonov;
        let mut warnings = Vec::new();
        if self.cfg.beta == 0.0 && data.delta > 0.0 {
            warnings.push("beta = 0 with noisy data is ill-advised".to_string());
        }
        if !sol.converged {
            warnings.push(format!(
                "not converged after {} iterations (relative residual {:.3e})",
                sol.iterations, sol.relative_residual
            ));
        }
        let errors = match &data.truth {
            Some(t) => Some(SourceErrors::compute(&f, &gs, t)?),
            None => None,
        };
        Ok(ReconstructionResult {
            f,
            g: gs,
            u: GridFn::new(g.clone(), FnKind::SpaceTime, u)?,
            v: GridFn::new(g.clone(), FnKind::SpaceTime, v)?,
            objective,
            history: sol.history,
            iterations: sol.iterations,
            converged: sol.converged,
            relative_residual: sol.relative_residual,
            errors,
            warnings,
            preconditioner: self.lsq.prec_name,
        })
    }
}

/// Assemble and solve in one step.
pub fn reconstruct(data: &InverseData, cfg: &ReconstructionConfig) -> Result<ReconstructionResult> {
    InverseProblem::new(&data.coeffs, &data.q1, &data.q2, cfg)?.solve(data)
}

/// Invert the residual formulas at `t0` using the full state:
/// `f = (dt u + A u - c0 v) / q1`, `g = (dt v - B v - A0 u) / q2`.
pub fn direct_formula_oracle(case: &ManufacturedCase) -> Result<(GridFn, GridFn)> {
    let grid = case.grid();
    let k0 = grid.k0();
    let c = &case.coeffs;
    let q_min = default_q_min();
    let q1 = case.sources.q1.at_t0()?;
    let q2 = case.sources.q2.at_t0()?;
    for (name, q) in [("q1", &q1), ("q2", &q2)] {
        if q.values().iter().any(|v| !(v.abs() >= q_min)) {
            return Err(Error::Rejected(format!("|{name}(., t0)| below {q_min}")));
        }
    }
    let u0 = case.u.at_t0()?;
    let v0 = case.v.at_t0()?;
    let ut0 = diff(&case.u, Deriv::Dt)?.at_t0()?;
    let vt0 = diff(&case.v, Deriv::Dt)?.at_t0()?;
    let ns = grid.n_space();
    let c0 = GridFn::new(grid.clone(), FnKind::Slice, c.c0[k0 * ns..(k0 + 1) * ns].to_vec())?;
    let f = ut0
        .add(&apply_operator_slice(OpKind::A, &u0, c, k0)?)?
        .sub(&c0.mul(&v0)?)?
        .zip_with(&q1, |a, b| a / b)?;
    let g = vt0
        .sub(&apply_operator_slice(OpKind::B, &v0, c, k0)?)?
        .sub(&apply_operator_slice(OpKind::A0, &u0, c, k0)?)?
        .zip_with(&q2, |a, b| a / b)?;
    Ok((f, g))
}

/// Tikhonov weight as a function of the noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaRule {
    /// `beta = delta^2`.
    DeltaSquared,
    Fixed(f64),
}

impl BetaRule {
    pub fn beta(&self, delta: f64) -> f64 {
        match self {
            BetaRule::DeltaSquared => delta * delta,
            BetaRule::Fixed(b) => *b,
        }
    }
}

/// Noise levels and seeds of a stability sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub deltas: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_beta_rule")]
    pub beta_rule: BetaRule,
}

fn default_beta_rule() -> BetaRule {
    BetaRule::DeltaSquared
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            errs.push("deltas must all be positive (the fit uses log delta)".to_string());
        }
        if self.deltas.len() < 4 {
            errs.push(format!("deltas needs at least 4 points, got {}", self.deltas.len()));
        }
        let (lo, hi) = self.deltas.iter().fold((f64::INFINITY, 0.0f64), |(a, b), d| (a.min(*d), b.max(*d)));
        if self.deltas.len() >= 2 && !(hi / lo >= 100.0 * (1.0 - 1e-12)) {
            errs.push("deltas must span at least two decades".to_string());
        }
        if self.seeds.len() < 3 {
            errs.push(format!("seeds needs at least 3 entries, got {}", self.seeds.len()));
        }
        if let BetaRule::Fixed(b) = self.beta_rule {
            if !(b >= 0.0) {
                errs.push("fixed beta must be >= 0".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub seed: u64,
    pub err_f: f64,
    pub err_g: f64,
    pub err_total: f64,
    pub beta: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Least-squares line through `(log delta, log err)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub seeds: Vec<u64>,
    /// Slope fitted per seed.
    pub per_seed: Vec<f64>,
    pub per_seed_mean: f64,
    pub per_seed_spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Fit pooled over all converged rows.
    pub fit: Option<SlopeFit>,
    pub excluded: Vec<(f64, u64)>,
}

/// `(slope, intercept, r2)` of the least-squares line through the points.
pub fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, my - slope * mx, r2))
}

/// Noise seed of sweep cell `(seed, delta index)`.
fn cell_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Reconstruct from fresh noise at every `(delta, seed)` and fit the slope of
/// `log(|f_hat - f| + |g_hat - g|)` against `log delta`.
pub fn stability_sweep(case: &ManufacturedCase, spec: &SweepSpec, cfg: &ReconstructionConfig) -> Result<SweepReport> {
    spec.validate()?;
    let problems: Vec<InverseProblem> = spec
        .deltas
        .par_iter()
        .map(|d| {
            let cfg = ReconstructionConfig { beta: spec.beta_rule.beta(*d), ..*cfg };
            InverseProblem::new(&case.coeffs, &case.sources.q1, &case.sources.q2, &cfg)
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, u64)> =
        spec.seeds.iter().flat_map(|s| (0..spec.deltas.len()).map(move |i| (i, *s))).collect();
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(i, seed)| {
            let delta = spec.deltas[i];
            let data = make_inverse_data(case, delta, cell_seed(seed, i))?;
            let res = problems[i].solve(&data)?;
            let e = res.errors.expect("manufactured truth attached");
            Ok(SweepRow {
                delta,
                seed,
                err_f: e.abs_f,
                err_g: e.abs_g,
                err_total: e.abs_f + e.abs_g,
                beta: spec.beta_rule.beta(delta),
                converged: res.converged,
                iterations: res.iterations,
            })
        })
        .collect::<Result<_>>()?;
    let excluded: Vec<(f64, u64)> = rows.iter().filter(|r| !r.converged).map(|r| (r.delta, r.seed)).collect();
    let usable = |r: &&SweepRow| r.converged && r.err_total > 0.0;
    let pooled: Vec<(f64, f64)> = rows.iter().filter(usable).map(|r| (r.delta.ln(), r.err_total.ln())).collect();
    let per_seed: Vec<f64> = spec
        .seeds
        .iter()
        .filter_map(|s| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(usable)
                .filter(|r| r.seed == *s)
                .map(|r| (r.delta.ln(), r.err_total.ln()))
                .collect();
            fit_line(&pts).map(|f| f.0)
        })
        .collect();
    let fit = fit_line(&pooled).map(|(slope, intercept, r2)| {
        let n = per_seed.len().max(1) as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let spread = (per_seed.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        SlopeFit {
            slope,
            intercept,
            r2,
            seeds: spec.seeds.clone(),
            per_seed: per_seed.clone(),
            per_seed_mean: mean,
            per_seed_spread: spread,
        }
    });
    Ok(SweepReport { rows, fit, excluded })
}

/// Both sides of the source stability bound for one case:
/// `|f| + |g|` against `|u(t0)|_{H2} + |v(t0)|_{H2} + sum_{j=0,1} (D(dt^j u)^2 + D(dt^j v)^2)^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRatio {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
}

pub fn source_stability_ratio(case: &ManufacturedCase) -> Result<StabilityRatio> {
    let lhs = norm(&case.sources.f, NormKind::L2Slice)? + norm(&case.sources.g, NormKind::L2Slice)?;
    let mut rhs = norm(&case.u.at_t0()?, NormKind::H2Slice)? + norm(&case.v.at_t0()?, NormKind::H2Slice)?;
    let (mut u, mut v) = (case.u.clone(), case.v.clone());
    for j in 0..2 {
        if j > 0 {
            u = diff(&u, Deriv::Dt)?;
            v = diff(&v, Deriv::Dt)?;
        }
        rhs += (d_gamma_squared(&u)? + d_gamma_squared(&v)?).sqrt();
    }
    let ratio = (rhs > 1e-14).then(|| lhs / rhs);
    Ok(StabilityRatio { lhs, rhs, ratio })
}
