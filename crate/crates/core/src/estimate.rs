//! Empirical verification of weighted estimates: evaluate both sides for
//! explicit test functions and record `lhs / rhs` across parameter sweeps.
//!
//! Boundary data terms `D(.)^2` enter the right-hand sides multiplied by the
//! weight mass `int_Q W`, so that every estimate is homogeneous in the weight
//! normalization.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{apply_operator, CoeffSet, CoeffSpec, OpKind};
use crate::ensemble::{generate_ensemble, EnsembleSpec};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{build_grid, diff, Deriv, Grid, GridFn, GridSpec};
use crate::norm::{boundary_parts, norm_squared, NormKind};
use crate::system::linear_residual;
use crate::weight::{build_eta, eval_weight_bundle, EtaFn, WeightBundle, WeightParams};

/// The weighted estimates that can be checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimateKind {
    /// Parabolic estimate for `dt + A`.
    Forward,
    /// Parabolic estimate for `dt - B`.
    Backward,
    /// Coupled estimate for the system.
    Coupled,
    /// Coupled estimate for the time derivatives.
    CoupledDt,
    /// Mid-time slice bound for `dt u`.
    SliceU,
    /// Mid-time slice bound for `dt v`.
    SliceV,
    /// Weighted bound on time antiderivatives from `t0`, with power `p`.
    TimeIntegral(u8),
}

impl EstimateKind {
    pub fn label(&self) -> String {
        match self {
            Self::Forward => "FORWARD".into(),
            Self::Backward => "BACKWARD".into(),
            Self::Coupled => "COUPLED".into(),
            Self::CoupledDt => "COUPLED_DT".into(),
            Self::SliceU => "SLICE_U".into(),
            Self::SliceV => "SLICE_V".into(),
            Self::TimeIntegral(p) => format!("TIME_INTEGRAL_P{p}"),
        }
    }

    fn needs_sources(&self) -> bool {
        matches!(self, Self::SliceU | Self::SliceV)
    }
}

impl fmt::Display for EstimateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EstimateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "FORWARD" => Self::Forward,
            "BACKWARD" => Self::Backward,
            "COUPLED" => Self::Coupled,
            "COUPLED_DT" => Self::CoupledDt,
            "SLICE_U" => Self::SliceU,
            "SLICE_V" => Self::SliceV,
            _ => match s.strip_prefix("TIME_INTEGRAL_P").and_then(|p| p.parse::<u8>().ok()) {
                Some(p) if p <= 2 => Self::TimeIntegral(p),
                _ => return Err(Error::InvalidArgument(format!("unknown estimate kind `{s}`"))),
            },
        })
    }
}

impl Serialize for EstimateKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for EstimateKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Inputs for one evaluation. `forcing` overrides the residuals computed
/// from `(u, v)`; `sources` are the spatial amplitudes `(f, g)` needed by the
/// slice bounds.
#[derive(Debug, Clone, Copy)]
pub struct EstimateInput<'a> {
    pub u: &'a GridFn,
    pub v: &'a GridFn,
    pub coeffs: &'a CoeffSet,
    pub forcing: Option<(&'a GridFn, &'a GridFn)>,
    pub sources: Option<(&'a GridFn, &'a GridFn)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Measure {
    Q,
    T0,
}

#[derive(Debug, Clone)]
struct Term {
    label: &'static str,
    density: Vec<f64>,
    phi_pow: i32,
    s_pow: f64,
    lambda_pow: i32,
    measure: Measure,
}

fn term(label: &'static str, density: Vec<f64>, phi_pow: i32, s_pow: f64, lambda_pow: i32) -> Term {
    Term { label, density, phi_pow, s_pow, lambda_pow, measure: Measure::Q }
}

/// Both sides of an estimate with the parameter-independent parts
/// precomputed.
#[derive(Debug, Clone)]
pub struct PreparedEstimate {
    kind: EstimateKind,
    lhs: Vec<Term>,
    rhs: Vec<Term>,
    /// Unweighted boundary and initial data terms.
    data: f64,
}

/// Evaluated sides of one estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSidePair {
    pub kind: EstimateKind,
    pub lambda: f64,
    pub s: f64,
    pub lhs_terms: Vec<(String, f64)>,
    pub rhs_terms: Vec<(String, f64)>,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`; `None` when the ratio is undefined.
    pub ratio: Option<f64>,
}

impl EstimateSidePair {
    /// `rhs == 0` while `lhs > 0`: the estimate cannot hold with any constant.
    pub fn is_violation(&self) -> bool {
        self.rhs == 0.0 && self.lhs > 0.0
    }
}

fn squares(f: &[f64]) -> Vec<f64> {
    f.iter().map(|v| v * v).collect()
}

fn add_squares(acc: &mut [f64], f: &[f64]) {
    for (a, v) in acc.iter_mut().zip(f) {
        *a += v * v;
    }
}

fn grad_density(f: &GridFn) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; f.values().len()];
    for i in 0..f.grid().dim() {
        add_squares(&mut acc, diff(f, Deriv::Dx(i))?.values());
    }
    Ok(acc)
}

fn hessian_density(f: &GridFn) -> Result<Vec<f64>> {
    let dim = f.grid().dim();
    let mut acc = vec![0.0; f.values().len()];
    for i in 0..dim {
        for j in 0..dim {
            add_squares(&mut acc, diff(f, Deriv::Dxx(i, j))?.values());
        }
    }
    Ok(acc)
}

/// Left-hand side pieces of the forward estimate for `u`.
fn forward_lhs(u: &GridFn) -> Result<Vec<Term>> {
    let mut top = hessian_density(u)?;
    add_squares(&mut top, diff(u, Deriv::Dt)?.values());
    Ok(vec![
        term("u_t+hess", top, 0, 0.0, 0),
        term("grad_u", grad_density(u)?, 2, 2.0, 2),
        term("u", squares(u.values()), 4, 4.0, 4),
    ])
}

/// Left-hand side pieces of the backward estimate for `v`.
fn backward_lhs(v: &GridFn) -> Result<Vec<Term>> {
    let mut top = hessian_density(v)?;
    add_squares(&mut top, diff(v, Deriv::Dt)?.values());
    Ok(vec![
        term("v_t+hess", top, -1, -1.0, 0),
        term("grad_v", grad_density(v)?, 1, 1.0, 2),
        term("v", squares(v.values()), 3, 3.0, 4),
    ])
}

fn d_squared(f: &GridFn) -> Result<f64> {
    Ok(boundary_parts(f, f.grid().gamma())?.d_squared())
}

/// `D(u)^2 + D(v)^2 + D(u_t)^2 + D(v_t)^2 + |u(t0)|_{H2}^2 + |v(t0)|_{H2}^2`.
pub fn data_norm_squared(u: &GridFn, v: &GridFn) -> Result<f64> {
    let ut = diff(u, Deriv::Dt)?;
    let vt = diff(v, Deriv::Dt)?;
    Ok(d_squared(u)?
        + d_squared(v)?
        + d_squared(&ut)?
        + d_squared(&vt)?
        + norm_squared(&u.at_t0()?, NormKind::H2Slice)?
        + norm_squared(&v.at_t0()?, NormKind::H2Slice)?)
}

/// Cumulative trapezoid antiderivative `int_{t0}^{t} w` at every node.
pub fn antiderivative_from_t0(w: &GridFn) -> Result<GridFn> {
    w.require_space_time("antiderivative_from_t0")?;
    let g = w.grid();
    let ns = g.n_space();
    let (nt, k0, tau) = (g.nt(), g.k0(), g.tau());
    let wv = w.values();
    let mut out = vec![0.0; wv.len()];
    for k in k0 + 1..nt {
        for s in 0..ns {
            out[k * ns + s] = out[(k - 1) * ns + s] + 0.5 * tau * (wv[(k - 1) * ns + s] + wv[k * ns + s]);
        }
    }
    for k in (0..k0).rev() {
        for s in 0..ns {
            out[k * ns + s] = out[(k + 1) * ns + s] - 0.5 * tau * (wv[k * ns + s] + wv[(k + 1) * ns + s]);
        }
    }
    GridFn::new(g.clone(), w.kind().clone(), out)
}

/// Precompute the parameter-independent parts of an estimate.
pub fn prepare_estimate(kind: EstimateKind, input: &EstimateInput<'_>) -> Result<PreparedEstimate> {
    let (u, v, c) = (input.u, input.v, input.coeffs);
    u.require_space_time("estimate")?;
    v.require_space_time("estimate")?;
    let residuals = || -> Result<(GridFn, GridFn)> {
        match input.forcing {
            Some((f, g)) => Ok((f.clone(), g.clone())),
            None => linear_residual(u, v, c),
        }
    };
    let sources = || {
        input
            .sources
            .ok_or_else(|| Error::InvalidArgument(format!("{kind} needs the source amplitudes f and g")))
    };
    let (lhs, rhs, data) = match kind {
        EstimateKind::Forward => {
            let r = diff(u, Deriv::Dt)?.add(&apply_operator(OpKind::A, u, c)?)?;
            (forward_lhs(u)?, vec![term("source", squares(r.values()), 1, 1.0, 0)], d_squared(u)?)
        }
        EstimateKind::Backward => {
            let r = diff(v, Deriv::Dt)?.sub(&apply_operator(OpKind::B, v, c)?)?;
            (backward_lhs(v)?, vec![term("source", squares(r.values()), 0, 0.0, 0)], d_squared(v)?)
        }
        EstimateKind::Coupled => {
            let (f, g) = residuals()?;
            let mut lhs = forward_lhs(u)?;
            lhs.extend(backward_lhs(v)?);
            let rhs = vec![
                term("F", squares(f.values()), 1, 1.0, 0),
                term("G", squares(g.values()), 0, 0.0, 0),
            ];
            (lhs, rhs, d_squared(u)? + d_squared(v)?)
        }
        EstimateKind::CoupledDt => {
            let (f, g) = residuals()?;
            let (ut, vt) = (diff(u, Deriv::Dt)?, diff(v, Deriv::Dt)?);
            let mut lhs = forward_lhs(&ut)?;
            lhs.extend(backward_lhs(&vt)?);
            let mut fd = squares(f.values());
            add_squares(&mut fd, diff(&f, Deriv::Dt)?.values());
            let mut gd = squares(g.values());
            add_squares(&mut gd, diff(&g, Deriv::Dt)?.values());
            (lhs, vec![term("F+F_t", fd, 1, 1.0, 0), term("G+G_t", gd, 0, 0.0, 0)], data_norm_squared(u, v)?)
        }
        EstimateKind::SliceU | EstimateKind::SliceV => {
            let (fs, gs) = sources()?;
            fs.require_slice("source f")?;
            gs.require_slice("source g")?;
            let f2 = squares(fs.broadcast()?.values());
            let g2 = squares(gs.broadcast()?.values());
            let (target, phi_pow, s_pow, s_f) = match kind {
                EstimateKind::SliceU => (u, 1, 1.0, 0.0),
                _ => (v, 0, 0.0, 0.5),
            };
            let dt0 = diff(target, Deriv::Dt)?.at_t0()?;
            let lhs = vec![Term {
                label: "dt_slice",
                density: squares(dt0.values()),
                phi_pow,
                s_pow,
                lambda_pow: 0,
                measure: Measure::T0,
            }];
            let rhs = vec![term("f", f2, 1, s_f, 0), term("g", g2, 0, -(1.0 - s_f), 0)];
            (lhs, rhs, data_norm_squared(u, v)?)
        }
        EstimateKind::TimeIntegral(p) => {
            if p > 2 {
                return Err(Error::InvalidArgument(format!("power p = {p} must be 0, 1 or 2")));
            }
            let p = p as i32;
            let big = antiderivative_from_t0(u)?;
            (
                vec![term("antiderivative", squares(big.values()), p, p as f64, 0)],
                vec![term("w", squares(u.values()), p - 1, (p - 1) as f64, -1)],
                0.0,
            )
        }
    };
    Ok(PreparedEstimate { kind, lhs, rhs, data })
}

impl PreparedEstimate {
    pub fn kind(&self) -> EstimateKind {
        self.kind
    }

    fn integrate(term: &Term, bundle: &WeightBundle) -> f64 {
        match term.measure {
            Measure::Q => bundle.integrate(&term.density, term.phi_pow, term.s_pow, term.lambda_pow),
            Measure::T0 => bundle.integrate_t0(&term.density, term.phi_pow, term.s_pow, term.lambda_pow),
        }
    }

    /// Evaluate both sides for one weight bundle.
    pub fn evaluate(&self, bundle: &WeightBundle) -> EstimateSidePair {
        let lhs_terms: Vec<(String, f64)> =
            self.lhs.iter().map(|t| (t.label.to_string(), Self::integrate(t, bundle))).collect();
        let mut rhs_terms: Vec<(String, f64)> =
            self.rhs.iter().map(|t| (t.label.to_string(), Self::integrate(t, bundle))).collect();
        if self.data != 0.0 {
            rhs_terms.push(("data".into(), bundle.mass() * self.data));
        }
        let lhs: f64 = lhs_terms.iter().map(|(_, v)| v).sum();
        let rhs: f64 = rhs_terms.iter().map(|(_, v)| v).sum();
        let ratio = (rhs > 0.0 && lhs.is_finite() && rhs.is_finite()).then(|| lhs / rhs);
        let p = bundle.params();
        EstimateSidePair { kind: self.kind, lambda: p.lambda, s: p.s, lhs_terms, rhs_terms, lhs, rhs, ratio }
    }
}

/// Evaluate one estimate for one bundle.
pub fn evaluate_estimate(kind: EstimateKind, input: &EstimateInput<'_>, bundle: &WeightBundle) -> Result<EstimateSidePair> {
    Ok(prepare_estimate(kind, input)?.evaluate(bundle))
}

/// Weighted bound for the antiderivative of `w` from `t0`, power `p`.
pub fn time_integral_check(w: &GridFn, p: u8, bundle: &WeightBundle) -> Result<EstimateSidePair> {
    let c = CoeffSet::laplacian(w.grid());
    let input = EstimateInput { u: w, v: w, coeffs: &c, forcing: None, sources: None };
    evaluate_estimate(EstimateKind::TimeIntegral(p), &input, bundle)
}

/// `(lambda, s)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_s_values")]
    pub s_values: Vec<f64>,
}

fn default_lambdas() -> Vec<f64> {
    vec![1.0, 2.0]
}
fn default_s_values() -> Vec<f64> {
    vec![8.0, 16.0, 32.0, 64.0]
}

impl Default for Sweep {
    fn default() -> Self {
        Self { lambdas: default_lambdas(), s_values: default_s_values() }
    }
}

impl Sweep {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.s_values.is_empty() {
            return Err(Error::InvalidArgument("parameter sweep is empty".into()));
        }
        for (&l, &s) in self.lambdas.iter().flat_map(|l| self.s_values.iter().map(move |s| (l, s))) {
            WeightParams::new(l, s)?;
        }
        Ok(())
    }
}

/// Ratio record for one member in one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub member: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
}

/// All members at one `(lambda, s)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub lambda: f64,
    pub s: f64,
    pub records: Vec<EstimateRecord>,
    pub max_ratio: f64,
    pub median_ratio: f64,
    /// Members whose ratio exceeds ten times the cell median.
    pub outliers: Vec<usize>,
    /// Members with zero right-hand side and positive left-hand side.
    pub violations: Vec<usize>,
}

/// Change of the empirical constant under grid refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Drift {
    pub coarse: f64,
    pub fine: f64,
    /// `max(coarse / fine, fine / coarse)`.
    pub factor: f64,
}

impl Drift {
    pub fn new(coarse: f64, fine: f64) -> Self {
        Self { coarse, fine, factor: (coarse / fine).max(fine / coarse) }
    }
}

/// Sweep summary for one estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub kind: EstimateKind,
    pub cells: Vec<CellResult>,
    /// Largest ratio over every cell and member.
    pub c_emp: f64,
    /// Every ratio is defined and finite.
    pub all_finite: bool,
    /// Smallest `s` from which the cell maximum decreases monotonically in
    /// `s`, per `lambda`.
    pub s0: Vec<(f64, Option<f64>)>,
    /// Smallest `lambda` with a defined `s0`.
    pub lambda0: Option<f64>,
    pub drift: Option<Drift>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn stabilization_s(cells: &[&CellResult]) -> Option<f64> {
    let r: Vec<f64> = cells.iter().map(|c| c.max_ratio).collect();
    let n = r.len();
    if n < 2 {
        return None;
    }
    let mut start = n - 1;
    while start > 0 && r[start] <= r[start - 1] {
        start -= 1;
    }
    (start < n - 1).then(|| cells[start].s)
}

/// Evaluate prepared estimates over a sweep.
pub fn estimate_constant(
    kind: EstimateKind,
    prepared: &[PreparedEstimate],
    eta: &EtaFn,
    grid: &Arc<Grid>,
    sweep: &Sweep,
) -> Result<VerificationReport> {
    sweep.validate()?;
    if prepared.iter().any(|p| p.kind != kind) {
        return Err(Error::InvalidArgument("prepared estimates of mixed kinds".into()));
    }
    let mut s_sorted = sweep.s_values.clone();
    s_sorted.sort_by(f64::total_cmp);
    let pairs: Vec<(f64, f64)> =
        sweep.lambdas.iter().flat_map(|l| s_sorted.iter().map(move |s| (*l, *s))).collect();
    let cells: Vec<CellResult> = pairs
        .par_iter()
        .map(|&(lambda, s)| -> Result<CellResult> {
            let bundle = eval_weight_bundle(eta, WeightParams::new(lambda, s)?, grid)?;
            let records: Vec<EstimateRecord> = prepared
                .iter()
                .enumerate()
                .map(|(member, p)| {
                    let e = p.evaluate(&bundle);
                    EstimateRecord { member, lhs: e.lhs, rhs: e.rhs, ratio: e.ratio }
                })
                .collect();
            let ratios: Vec<f64> = records.iter().filter_map(|r| r.ratio).collect();
            let max_ratio = ratios.iter().copied().fold(f64::NAN, f64::max);
            let median_ratio = median(ratios);
            let outliers = records
                .iter()
                .filter(|r| r.ratio.is_some_and(|x| x > 10.0 * median_ratio))
                .map(|r| r.member)
                .collect();
            let violations = records.iter().filter(|r| r.rhs == 0.0 && r.lhs > 0.0).map(|r| r.member).collect();
            Ok(CellResult { lambda, s, records, max_ratio, median_ratio, outliers, violations })
        })
        .collect::<Result<_>>()?;
    let all_finite = cells
        .iter()
        .all(|c| c.records.iter().all(|r| r.ratio.is_some_and(f64::is_finite)));
    let c_emp = if all_finite {
        cells.iter().map(|c| c.max_ratio).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    let s0: Vec<(f64, Option<f64>)> = sweep
        .lambdas
        .iter()
        .map(|&l| {
            let row: Vec<&CellResult> = cells.iter().filter(|c| c.lambda == l).collect();
            (l, stabilization_s(&row))
        })
        .collect();
    let lambda0 = s0
        .iter()
        .filter(|(_, s)| s.is_some())
        .map(|(l, _)| *l)
        .min_by(f64::total_cmp);
    Ok(VerificationReport { kind, cells, c_emp, all_finite, s0, lambda0, drift: None })
}

/// A complete verification study: grid, coefficients, ensemble and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanStudy {
    pub grid: GridSpec,
    pub coeffs: CoeffSpec,
    pub ensemble: EnsembleSpec,
    pub seed: u64,
    pub kind: EstimateKind,
    pub sweep: Sweep,
    /// Source amplitudes `(f, g)` for the slice bounds.
    pub sources: Option<(Expr, Expr)>,
    /// Multiply every member by this factor (scale invariance checks).
    pub scale: f64,
}

impl CarlemanStudy {
    fn run_on(&self, spec: &GridSpec) -> Result<VerificationReport> {
        let grid = build_grid(spec)?;
        let coeffs = self.coeffs.sample(&grid)?;
        let eta = build_eta(&grid, Some(&coeffs))?;
        let ens = generate_ensemble(self.seed, &self.ensemble, &grid)?;
        let sources = match (&self.sources, self.kind.needs_sources()) {
            (Some((f, g)), _) => Some((
                GridFn::sample_slice(&grid, |x| f.eval(x, 0.0)),
                GridFn::sample_slice(&grid, |x| g.eval(x, 0.0)),
            )),
            (None, true) => {
                return Err(Error::InvalidArgument(format!("{} needs source amplitudes", self.kind)))
            }
            (None, false) => None,
        };
        let prepared = ens
            .members
            .par_iter()
            .map(|m| {
                let (u, v) = (m.u.scale(self.scale), m.v.scale(self.scale));
                let input = EstimateInput {
                    u: &u,
                    v: &v,
                    coeffs: &coeffs,
                    forcing: None,
                    sources: sources.as_ref().map(|(f, g)| (f, g)),
                };
                prepare_estimate(self.kind, &input)
            })
            .collect::<Result<Vec<_>>>()?;
        estimate_constant(self.kind, &prepared, &eta, &grid, &self.sweep)
    }

    /// Run on the configured grid; with `refine`, repeat on the refined grid
    /// and record the drift of the empirical constant.
    pub fn run(&self, refine: bool) -> Result<VerificationReport> {
        let mut report = self.run_on(&self.grid)?;
        if refine {
            let fine = self.run_on(&self.grid.refined())?;
            report.drift = Some(Drift::new(report.c_emp, fine.c_emp));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Face, Side};
    use crate::weight::weighted_integral;

    fn grid1(n: usize) -> Arc<Grid> {
        build_grid(&GridSpec::one_d(1.0, n, 1.0, n, vec![Face::new(0, Side::High)])).unwrap()
    }

    fn bundle(g: &Arc<Grid>, lambda: f64, s: f64) -> WeightBundle {
        let eta = build_eta(g, None).unwrap();
        eval_weight_bundle(&eta, WeightParams::new(lambda, s).unwrap(), g).unwrap()
    }

    #[test]
    fn kind_labels_round_trip() {
        for k in [
            EstimateKind::Forward,
            EstimateKind::CoupledDt,
            EstimateKind::SliceV,
            EstimateKind::TimeIntegral(2),
        ] {
            assert_eq!(k.label().parse::<EstimateKind>().unwrap(), k);
        }
        assert!("TIME_INTEGRAL_P3".parse::<EstimateKind>().is_err());
    }

    #[test]
    fn forward_terms_match_weighted_integrals() {
        let g = grid1(33);
        let c = CoeffSet::laplacian(&g);
        let u = GridFn::sample(&g, |x, t| (3.0 * x[0]).cos() * (1.0 + t));
        let b = bundle(&g, 1.0, 4.0);
        let e = evaluate_estimate(
            EstimateKind::Forward,
            &EstimateInput { u: &u, v: &u, coeffs: &c, forcing: None, sources: None },
            &b,
        )
        .unwrap();
        let value = weighted_integral(&u, &b, 4, 4).unwrap();
        assert!((e.lhs_terms[2].1 - value).abs() <= 1e-14 * value);
        let r = diff(&u, Deriv::Dt).unwrap().add(&apply_operator(OpKind::A, &u, &c).unwrap()).unwrap();
        let src = weighted_integral(&r, &b, 1, 0).unwrap();
        assert!((e.rhs_terms[0].1 - src).abs() <= 1e-14 * src);
        assert!(e.ratio.unwrap() > 0.0);
    }

    #[test]
    fn zero_function_has_undefined_ratio() {
        let g = grid1(17);
        let c = CoeffSet::laplacian(&g);
        let z = GridFn::sample(&g, |_, _| 0.0);
        let e = evaluate_estimate(
            EstimateKind::Coupled,
            &EstimateInput { u: &z, v: &z, coeffs: &c, forcing: None, sources: None },
            &bundle(&g, 1.0, 2.0),
        )
        .unwrap();
        assert!(e.ratio.is_none() && !e.is_violation());
    }

    #[test]
    fn antiderivative_matches_brute_force() {
        let g = build_grid(&GridSpec::one_d(1.0, 9, 1.0, 9, vec![Face::new(0, Side::High)])).unwrap();
        let w = GridFn::sample(&g, |x, t| (2.0 * t + x[0]).sin() + t * t);
        let cum = antiderivative_from_t0(&w).unwrap();
        let ns = g.n_space();
        let (k0, tau) = (g.k0(), g.tau());
        for k in 0..g.nt() {
            for s in 0..ns {
                let (lo, hi, sign) = if k >= k0 { (k0, k, 1.0) } else { (k, k0, -1.0) };
                let mut brute = 0.0;
                for j in lo..hi {
                    brute += 0.5 * tau * (w.values()[j * ns + s] + w.values()[(j + 1) * ns + s]);
                }
                let got = cum.values()[k * ns + s];
                assert!((got - sign * brute).abs() <= 1e-10 * brute.abs().max(1.0));
            }
        }
    }

    #[test]
    fn stabilization_detection() {
        let cell = |s: f64, r: f64| CellResult {
            lambda: 1.0,
            s,
            records: vec![],
            max_ratio: r,
            median_ratio: r,
            outliers: vec![],
            violations: vec![],
        };
        let rising = [cell(1.0, 1.0), cell(2.0, 2.0), cell(4.0, 3.0)];
        assert_eq!(stabilization_s(&rising.iter().collect::<Vec<_>>()), None);
        let peaked = [cell(1.0, 1.0), cell(2.0, 5.0), cell(4.0, 3.0), cell(8.0, 2.0)];
        assert_eq!(stabilization_s(&peaked.iter().collect::<Vec<_>>()), Some(2.0));
    }

    #[test]
    fn study_ratios_are_scale_invariant() {
        let study = CarlemanStudy {
            grid: GridSpec::one_d(1.0, 17, 1.0, 17, vec![Face::new(0, Side::High)]),
            coeffs: CoeffSpec::default(),
            ensemble: EnsembleSpec { members: 4, ..Default::default() },
            seed: 3,
            kind: EstimateKind::Coupled,
            sweep: Sweep { lambdas: vec![1.0], s_values: vec![2.0, 8.0] },
            sources: None,
            scale: 1.0,
        };
        let a = study.run(false).unwrap();
        let b = CarlemanStudy { scale: 1e3, ..study }.run(false).unwrap();
        assert!(a.all_finite);
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            for (ra, rb) in ca.records.iter().zip(&cb.records) {
                let (x, y) = (ra.ratio.unwrap(), rb.ratio.unwrap());
                assert!((x - y).abs() <= 1e-12 * x);
            }
        }
    }
}
