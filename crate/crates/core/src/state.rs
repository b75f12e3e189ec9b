//! Interior stability of the state: `H^{2,1}(Omega x (eps, T - eps))` norms
//! of `(u, v)` against sources and lateral observations, for the linear
//! system and for differences of two nonlinear solutions.

use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::CoeffSet;
use crate::error::{Error, Result};
use crate::estimate::Drift;
use crate::grid::GridFn;
use crate::norm::{boundary_parts, norm, NormKind};
use crate::system::{linear_residual, NonlinearPair};

/// Members with a right-hand side below this are excluded as `0 / 0`.
pub const RHS_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CEpsRow {
    pub epsilon: f64,
    pub member: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CEpsPoint {
    pub epsilon: f64,
    /// Largest ratio over the members.
    pub c_eps: Option<f64>,
    pub finite: usize,
    pub excluded: usize,
}

/// Pieces of the right-hand side for one member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhsBreakdown {
    pub forcing_u: f64,
    pub forcing_v: f64,
    /// `|u|_{H1(0,T; L2(Gamma))}`.
    pub trace_u: f64,
    /// `|grad u|_{L2(Gamma x (0,T))}`.
    pub grad_u: f64,
    pub trace_v: f64,
    pub grad_v: f64,
}

impl RhsBreakdown {
    pub fn total(&self) -> f64 {
        self.forcing_u + self.forcing_v + self.trace_u + self.grad_u + self.trace_v + self.grad_v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CEpsReport {
    pub epsilons: Vec<f64>,
    pub rows: Vec<CEpsRow>,
    pub rhs: Vec<RhsBreakdown>,
    pub curve: Vec<CEpsPoint>,
    /// Every member's lhs is non-increasing in `epsilon`.
    pub monotone: bool,
    /// Per-epsilon drift of `C_eps` under refinement, when measured.
    pub drift: Option<Vec<Drift>>,
    /// Coefficient bounds of the nonlinear pairs, when applicable.
    pub m1: Option<f64>,
    pub m2: Option<f64>,
}

impl CEpsReport {
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.ratio.is_none_or(f64::is_finite)) && self.curve.iter().all(|p| p.c_eps.is_some())
    }

    /// Attach the drift against a report from the refined grid.
    pub fn with_drift(mut self, fine: &CEpsReport) -> Result<Self> {
        if fine.epsilons != self.epsilons {
            return Err(Error::Mismatch("drift needs the same epsilon grid".into()));
        }
        let drift = self
            .curve
            .iter()
            .zip(&fine.curve)
            .map(|(a, b)| match (a.c_eps, b.c_eps) {
                (Some(x), Some(y)) => Ok(Drift::new(x, y)),
                _ => Err(Error::Numerical(format!("C_eps undefined at epsilon {}", a.epsilon))),
            })
            .collect::<Result<Vec<_>>>()?;
        self.drift = Some(drift);
        Ok(self)
    }

    pub fn max_drift(&self) -> Option<f64> {
        self.drift.as_ref().map(|d| d.iter().fold(1.0f64, |m, x| m.max(x.factor)))
    }
}

fn rhs_of(u: &GridFn, v: &GridFn, fu: &GridFn, fv: &GridFn) -> Result<RhsBreakdown> {
    let gamma = u.grid().gamma().to_vec();
    let bu = boundary_parts(u, &gamma)?;
    let bv = boundary_parts(v, &gamma)?;
    Ok(RhsBreakdown {
        forcing_u: norm(fu, NormKind::L2Q)?,
        forcing_v: norm(fv, NormKind::L2Q)?,
        trace_u: bu.h1_time_squared().sqrt(),
        grad_u: bu.grad.sqrt(),
        trace_v: bv.h1_time_squared().sqrt(),
        grad_v: bv.grad.sqrt(),
    })
}

/// A state `(u, v)` with its forcing `(F, G)`.
type ForcedState = ((GridFn, GridFn), (GridFn, GridFn));

struct Evaluated {
    rows: Vec<CEpsRow>,
    rhs: Vec<RhsBreakdown>,
    curve: Vec<CEpsPoint>,
    monotone: bool,
}

/// Evaluate both sides for each member and epsilon.
fn evaluate(members: &[ForcedState], epsilons: &[f64]) -> Result<Evaluated> {
    if epsilons.is_empty() || members.is_empty() {
        return Err(Error::InvalidArgument("need at least one member and one epsilon".into()));
    }
    let grid = members[0].0 .0.grid().clone();
    for e in epsilons {
        grid.interior_window(*e)?;
    }
    let per_member: Vec<(RhsBreakdown, Vec<f64>)> = members
        .par_iter()
        .map(|((u, v), (fu, fv))| {
            let rhs = rhs_of(u, v, fu, fv)?;
            let lhs = epsilons
                .iter()
                .map(|e| {
                    let k = NormKind::H21Interior { epsilon: *e };
                    Ok(norm(u, k)? + norm(v, k)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((rhs, lhs))
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..epsilons.len()).collect();
    order.sort_by(|a, b| epsilons[*a].total_cmp(&epsilons[*b]));
    let monotone = per_member
        .iter()
        .all(|(_, lhs)| order.windows(2).all(|w| lhs[w[1]] <= lhs[w[0]]));
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for (i, e) in epsilons.iter().enumerate() {
        let mut c_eps: Option<f64> = None;
        let (mut finite, mut excluded) = (0, 0);
        for (m, (rhs, lhs)) in per_member.iter().enumerate() {
            let r = rhs.total();
            let ratio = (r >= RHS_FLOOR).then(|| lhs[i] / r);
            match ratio {
                Some(x) if x.is_finite() => {
                    finite += 1;
                    c_eps = Some(c_eps.map_or(x, |c| c.max(x)));
                }
                _ => excluded += 1,
            }
            rows.push(CEpsRow { epsilon: *e, member: m, lhs: lhs[i], rhs: r, ratio });
        }
        curve.push(CEpsPoint { epsilon: *e, c_eps, finite, excluded });
    }
    Ok(Evaluated { rows, rhs: per_member.into_iter().map(|p| p.0).collect(), curve, monotone })
}

/// Interior stability of the linear system: each member `(u, v)` is
/// measured against its residuals `F, G` and its lateral traces.
pub fn interior_stability_experiment(
    members: &[(GridFn, GridFn)],
    coeffs: &CoeffSet,
    epsilons: &[f64],
) -> Result<CEpsReport> {
    let with_forcing = members
        .par_iter()
        .map(|(u, v)| Ok(((u.clone(), v.clone()), linear_residual(u, v, coeffs)?)))
        .collect::<Result<Vec<_>>>()?;
    let Evaluated { rows, rhs, curve, monotone } = evaluate(&with_forcing, epsilons)?;
    Ok(CEpsReport { epsilons: epsilons.to_vec(), rows, rhs, curve, monotone, drift: None, m1: None, m2: None })
}

/// Interior stability of differences of nonlinear solutions.
pub fn nonlinear_difference_experiment(pairs: &[NonlinearPair], epsilons: &[f64]) -> Result<CEpsReport> {
    let members = pairs.iter().map(|p| p.differences()).collect::<Result<Vec<_>>>()?;
    let Evaluated { rows, rhs, curve, monotone } = evaluate(&members, epsilons)?;
    let m1 = pairs.iter().fold(0.0f64, |m, p| m.max(p.m1));
    let mut m2 = 0.0f64;
    for p in pairs {
        m2 = m2.max(p.m2()?);
    }
    Ok(CEpsReport {
        epsilons: epsilons.to_vec(),
        rows,
        rhs,
        curve,
        monotone,
        drift: None,
        m1: Some(m1),
        m2: Some(m2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{CoeffSpec, NonlinearSpec};
    use crate::ensemble::{generate_ensemble, EnsembleSpec};
    use crate::expr::Expr;
    use crate::grid::{build_grid, Face, FnKind, GridSpec, Side};
    use crate::system::nonlinear_pair;

    fn setup() -> (std::sync::Arc<crate::grid::Grid>, Vec<(GridFn, GridFn)>) {
        let g = build_grid(&GridSpec::one_d(1.0, 33, 1.0, 33, vec![Face::new(0, Side::High)])).unwrap();
        let ens = generate_ensemble(3, &EnsembleSpec { members: 6, ..Default::default() }, &g).unwrap();
        let m = ens.members.iter().map(|m| (m.u.clone(), m.v.clone())).collect();
        (g, m)
    }

    #[test]
    fn curve_is_monotone_and_scale_free() {
        let (g, members) = setup();
        let c = CoeffSpec::default().sample(&g).unwrap();
        let eps = [0.05, 0.1, 0.2];
        let r = interior_stability_experiment(&members, &c, &eps).unwrap();
        assert!(r.monotone && r.all_finite());
        let cs: Vec<f64> = r.curve.iter().map(|p| p.c_eps.unwrap()).collect();
        assert!(cs.windows(2).all(|w| w[1] <= w[0]));
        let scaled: Vec<_> = members.iter().map(|(u, v)| (u.scale(7.0), v.scale(7.0))).collect();
        let s = interior_stability_experiment(&scaled, &c, &eps).unwrap();
        for (a, b) in r.rows.iter().zip(&s.rows) {
            assert!((a.ratio.unwrap() - b.ratio.unwrap()).abs() <= 1e-12 * a.ratio.unwrap());
        }
    }

    #[test]
    fn zero_member_is_excluded() {
        let (g, mut members) = setup();
        let z = GridFn::zeros(g.clone(), FnKind::SpaceTime);
        members.push((z.clone(), z));
        let r = interior_stability_experiment(&members, &CoeffSet::laplacian(&g), &[0.1]).unwrap();
        assert_eq!(r.curve[0].excluded, 1);
        assert!(r.rows.last().unwrap().ratio.is_none());
    }

    #[test]
    fn unresolvable_epsilon_is_rejected() {
        let (g, members) = setup();
        assert!(interior_stability_experiment(&members, &CoeffSet::laplacian(&g), &[0.49]).is_err());
    }

    #[test]
    fn kappa_zero_matches_linear_difference() {
        let (g, members) = setup();
        let e = |s: &str| Expr::parse(s).unwrap();
        let nl = NonlinearSpec { a: e("1 + 0.3*x + 0.1*t"), kappa: e("0"), p: e("0.4") }.sample(&g).unwrap();
        let lin = nl.linear_difference_coeffs().unwrap();
        let mut pairs = Vec::new();
        let mut diffs = Vec::new();
        for w in members.windows(2) {
            let p = nonlinear_pair((&w[0].0, &w[0].1), (&w[1].0, &w[1].1), 0.1, &nl).unwrap();
            let ((du, dv), _) = p.differences().unwrap();
            diffs.push((du, dv));
            pairs.push(p);
        }
        let a = nonlinear_difference_experiment(&pairs, &[0.1, 0.2]).unwrap();
        let b = interior_stability_experiment(&diffs, &lin, &[0.1, 0.2]).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            let (rx, ry) = (x.ratio.unwrap(), y.ratio.unwrap());
            assert!((rx - ry).abs() <= 1e-10 * ry, "{rx} {ry}");
        }
        assert_eq!(a.m2, Some(0.0));
    }

    #[test]
    fn m2_grows_with_amplitude() {
        let (g, members) = setup();
        let e = |s: &str| Expr::parse(s).unwrap();
        let nl = NonlinearSpec { a: e("1"), kappa: e("0.5 + 0.2*x"), p: e("0.1") }.sample(&g).unwrap();
        let (u, v) = &members[0];
        let (du, dv) = &members[1];
        let small = nonlinear_pair((u, v), (du, dv), 0.1, &nl).unwrap();
        let big = nonlinear_pair((&u.scale(3.0), &v.scale(3.0)), (du, dv), 0.1, &nl).unwrap();
        assert!(big.m1 > small.m1 && big.m2().unwrap() > small.m2().unwrap());
    }
}
