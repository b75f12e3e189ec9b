//! Carleman weight functions.
//!
//! With a spatial profile `eta >= 1`, `|eta|_inf = max eta` and `l = t (T - t)`:
//!
//! * `phi   = e^{lambda eta} / l`
//! * `alpha = (e^{lambda eta} - e^{2 lambda |eta|_inf}) / l`
//! * `h     = e^{2 lambda |eta|_inf} - e^{lambda eta}`
//!
//! The raw weight `e^{2 s alpha}` underflows for moderate `s`, so bundles
//! store `W = e^{2 s (alpha - alpha_ref)}` with `alpha_ref` the largest nodal
//! value of `alpha`. Every estimate is homogeneous in `W`, so the offset
//! cancels from ratios.

use std::sync::Arc;

use serde::Serialize;

use crate::coefficients::{unobserved_faces, CoeffSet, OpKind};
use crate::error::{Error, Result};
use crate::grid::{Face, Grid, Side};

/// Affine spatial profile `eta = 1 + x_a / L_a` (increasing towards a high
/// face) or `eta = 2 - x_a / L_a` (increasing towards a low face).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtaFn {
    face: Face,
    length: f64,
}

impl EtaFn {
    /// Profile increasing towards `face`.
    pub fn towards(face: Face, length: f64) -> Self {
        Self { face, length }
    }

    pub fn face(&self) -> Face {
        self.face
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        let r = x[self.face.axis] / self.length;
        match self.face.side {
            Side::High => 1.0 + r,
            Side::Low => 2.0 - r,
        }
    }

    /// Constant gradient.
    pub fn grad(&self) -> [f64; 2] {
        let mut g = [0.0; 2];
        g[self.face.axis] = self.face.normal_sign() / self.length;
        g
    }

    /// `max eta` over the closed domain.
    pub fn sup(&self) -> f64 {
        2.0
    }

    /// `min eta` over the closed domain.
    pub fn inf(&self) -> f64 {
        1.0
    }

    fn admissible(&self, grid: &Grid, coeffs: Option<&CoeffSet>) -> std::result::Result<(), String> {
        let Some(c) = coeffs else { return Ok(()) };
        let dim = grid.dim();
        let ns = grid.n_space();
        let grad = self.grad();
        for face in unobserved_faces(grid) {
            let nodes = grid.face_nodes(face);
            for op in [OpKind::A, OpKind::B] {
                let p = &c.op(op).expect("second-order").principal;
                for k in 0..grid.nt() {
                    for s in &nodes {
                        let idx = k * ns + s;
                        let v: f64 = (0..dim).map(|j| p[face.axis * dim + j][idx] * grad[j]).sum::<f64>()
                            * face.normal_sign();
                        if v > 1e-12 {
                            return Err(format!(
                                "conormal derivative of eta under {op:?} is {v} > 0 on unobserved face {face}"
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Choose an admissible profile for the grid's observation boundary. With
/// coefficients, the conormal derivative of `eta` must be non-positive on
/// every unobserved face for both principal parts.
pub fn build_eta(grid: &Grid, coeffs: Option<&CoeffSet>) -> Result<EtaFn> {
    let mut candidates: Vec<Face> = grid.gamma().to_vec();
    candidates.sort_by_key(|f| (f.axis, f.side == Side::Low));
    let mut reasons = Vec::new();
    for face in candidates {
        let eta = EtaFn::towards(face, grid.lengths()[face.axis]);
        match eta.admissible(grid, coeffs) {
            Ok(()) => return Ok(eta),
            Err(r) => reasons.push(r),
        }
    }
    Err(Error::Inadmissible(reasons.join("; ")))
}

/// Large parameter pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightParams {
    pub lambda: f64,
    pub s: f64,
}

impl WeightParams {
    pub fn new(lambda: f64, s: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) || !(s.is_finite() && s >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight parameters need lambda > 0 and s >= 0, got ({lambda}, {s})"
            )));
        }
        Ok(Self { lambda, s })
    }
}

/// Nodal values of `phi` and the normalized weight `W` for one parameter pair.
#[derive(Debug, Clone)]
pub struct WeightBundle {
    grid: Arc<Grid>,
    eta: EtaFn,
    params: WeightParams,
    alpha_max: f64,
    alpha_ref: f64,
    /// `phi` at space-time nodes (0 at `t = 0, T`, where it is unbounded).
    phi: Vec<f64>,
    /// Normalized weight `W`.
    weight: Vec<f64>,
    interior_t: Vec<bool>,
}

/// Evaluate the weight functions at every node of `grid`.
pub fn eval_weight_bundle(eta: &EtaFn, params: WeightParams, grid: &Arc<Grid>) -> Result<WeightBundle> {
    let lam = params.lambda;
    let e_sup = (2.0 * lam * eta.sup()).exp();
    if !e_sup.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda = {lam} overflows the weight")));
    }
    let ns = grid.n_space();
    let e_eta: Vec<f64> = (0..ns).map(|s| (lam * eta.value(grid.point(s))).exp()).collect();
    let alpha_max = (1..grid.nt() - 1)
        .flat_map(|k| e_eta.iter().map(move |e| (e - e_sup) / grid.ell(k)))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut b = WeightBundle {
        grid: grid.clone(),
        eta: *eta,
        params,
        alpha_max,
        alpha_ref: alpha_max,
        phi: Vec::new(),
        weight: Vec::new(),
        interior_t: (0..grid.nt()).map(|k| k > 0 && k < grid.nt() - 1).collect(),
    };
    b.fill(&e_eta, e_sup);
    Ok(b)
}

impl WeightBundle {
    fn fill(&mut self, e_eta: &[f64], e_sup: f64) {
        let g = &*self.grid;
        let s = self.params.s;
        let n = g.n_nodes();
        self.phi = vec![0.0; n];
        self.weight = vec![if s == 0.0 { 1.0 } else { 0.0 }; n];
        let ns = g.n_space();
        for k in 1..g.nt() - 1 {
            let l = g.ell(k);
            for (j, e) in e_eta.iter().enumerate() {
                let idx = k * ns + j;
                self.phi[idx] = e / l;
                self.weight[idx] = (2.0 * s * ((e - e_sup) / l - self.alpha_ref)).exp();
            }
        }
    }

    /// Same bundle with the normalization reference shifted to
    /// `alpha_max + offset`.
    pub fn with_reference_offset(&self, offset: f64) -> WeightBundle {
        let lam = self.params.lambda;
        let e_sup = (2.0 * lam * self.eta.sup()).exp();
        let e_eta: Vec<f64> =
            (0..self.grid.n_space()).map(|s| (lam * self.eta.value(self.grid.point(s))).exp()).collect();
        let mut b = self.clone();
        b.alpha_ref = self.alpha_max + offset;
        b.fill(&e_eta, e_sup);
        b
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn eta(&self) -> &EtaFn {
        &self.eta
    }
    pub fn params(&self) -> WeightParams {
        self.params
    }
    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }
    pub fn phi(&self) -> &[f64] {
        &self.phi
    }
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    fn e_sup(&self) -> f64 {
        (2.0 * self.params.lambda * self.eta.sup()).exp()
    }

    /// Closed-form `phi(x, t)`.
    pub fn phi_at(&self, x: [f64; 2], t: f64) -> f64 {
        (self.params.lambda * self.eta.value(x)).exp() / ell(t, self.grid.t_final())
    }

    /// Closed-form `alpha(x, t)`.
    pub fn alpha_at(&self, x: [f64; 2], t: f64) -> f64 {
        -self.h_at(x) / ell(t, self.grid.t_final())
    }

    /// Closed-form `h(x)`.
    pub fn h_at(&self, x: [f64; 2]) -> f64 {
        self.e_sup() - (self.params.lambda * self.eta.value(x)).exp()
    }

    /// `alpha` at a node, using the grid's mirror-exact `t (T - t)`.
    pub fn alpha_node(&self, k: usize, s: usize) -> f64 {
        -self.h_at(self.grid.point(s)) / self.grid.ell(k)
    }

    /// Normalized weight at `(x, t)`.
    pub fn weight_at(&self, x: [f64; 2], t: f64) -> f64 {
        let l = ell(t, self.grid.t_final());
        if l <= 0.0 {
            return if self.params.s == 0.0 { 1.0 } else { 0.0 };
        }
        (2.0 * self.params.s * (self.alpha_at(x, t) - self.alpha_ref)).exp()
    }

    /// `C_1 = int_Q W`, the weight mass used to scale boundary data terms.
    pub fn mass(&self) -> f64 {
        self.integrate(&vec![1.0; self.grid.n_nodes()], 0, 0.0, 0)
    }

    /// `int_Q density * s^s_pow * phi^phi_pow * lambda^lambda_pow * W`.
    pub fn integrate(&self, density: &[f64], phi_pow: i32, s_pow: f64, lambda_pow: i32) -> f64 {
        let g = &*self.grid;
        let ws = g.space_weights();
        let wt = g.time_weights();
        let ns = g.n_space();
        let s = self.params.s;
        let scale = s.powf(s_pow) * self.params.lambda.powi(lambda_pow);
        let mut total = 0.0;
        for k in 0..g.nt() {
            let mut acc = 0.0;
            if self.interior_t[k] {
                for j in 0..ns {
                    let idx = k * ns + j;
                    let w = self.weight[idx];
                    if w != 0.0 {
                        acc += ws[j] * density[idx] * w * self.phi[idx].powi(phi_pow);
                    }
                }
            } else if s == 0.0 && phi_pow == 0 {
                acc = (0..ns).map(|j| ws[j] * density[k * ns + j]).sum();
            }
            total += wt[k] * acc;
        }
        scale * total
    }

    /// `int_Omega density * s^s_pow * phi(x,t0)^phi_pow * lambda^lambda_pow * W(x,t0)`.
    pub fn integrate_t0(&self, density: &[f64], phi_pow: i32, s_pow: f64, lambda_pow: i32) -> f64 {
        let g = &*self.grid;
        let ns = g.n_space();
        let off = g.k0() * ns;
        let ws = g.space_weights();
        let scale = self.params.s.powf(s_pow) * self.params.lambda.powi(lambda_pow);
        let acc: f64 = (0..ns)
            .map(|j| ws[j] * density[j] * self.weight[off + j] * self.phi[off + j].powi(phi_pow))
            .sum();
        scale * acc
    }
}

fn ell(t: f64, t_final: f64) -> f64 {
    t * (t_final - t)
}

/// `int_Q |f|^2 (s phi)^m lambda^k W`.
pub fn weighted_integral(f: &crate::grid::GridFn, bundle: &WeightBundle, m: i32, k: i32) -> Result<f64> {
    f.require_space_time("weighted_integral")?;
    let d: Vec<f64> = f.values().iter().map(|v| v * v).collect();
    Ok(bundle.integrate(&d, m, m as f64, k))
}

/// One identity or bound checked by [`check_weight_identities`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Results of [`check_weight_identities`] for one bundle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityReport {
    pub params: WeightParams,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&IdentityCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Locate the maximizer of `xi^m e^{-c xi}` on `xi > 0` by a log-spaced scan
/// followed by golden-section refinement on function values.
pub fn maximize_power_exp(m: f64, c: f64) -> (f64, f64) {
    let g = |xi: f64| m * xi.ln() - c * xi;
    let (lo, hi) = (1e-12f64, 1e12f64);
    let n = 4000;
    let step = (hi / lo).ln() / n as f64;
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..=n {
        let v = g(lo * (step * i as f64).exp());
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let mut a = lo * (step * best.saturating_sub(1) as f64).exp();
    let mut b = lo * (step * (best + 1) as f64).exp();
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (g(x1), g(x2));
    for _ in 0..200 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = g(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = g(x1);
        }
        if b - a <= 1e-15 * b {
            break;
        }
    }
    let xi = 0.5 * (a + b);
    (xi, (g(xi)).exp())
}

fn check(name: &str, value: f64, tolerance: f64, passed: bool) -> IdentityCheck {
    IdentityCheck { name: name.to_string(), value, tolerance, passed: passed && value.is_finite() }
}

/// Verify the pointwise identities and bounds satisfied by the weights.
pub fn check_weight_identities(bundle: &WeightBundle) -> IdentityReport {
    let g = bundle.grid.clone();
    let lam = bundle.params.lambda;
    let s = bundle.params.s;
    let t_final = g.t_final();
    let ns = g.n_space();
    let grad = bundle.eta.grad();
    let interior: Vec<usize> = (1..g.nt() - 1).collect();
    let mut checks = Vec::new();

    // grad phi = lambda phi grad eta, against a Richardson-extrapolated
    // central difference of the closed form.
    let mut worst_closed = 0.0f64;
    for &k in &interior {
        let t = g.t(k);
        for j in 0..ns {
            let x = g.point(j);
            let phi = bundle.phi_at(x, t);
            for a in 0..g.dim() {
                let d = 1e-3 * g.lengths()[a];
                let cd = |d: f64| {
                    let mut xp = x;
                    let mut xm = x;
                    xp[a] += d;
                    xm[a] -= d;
                    (bundle.phi_at(xp, t) - bundle.phi_at(xm, t)) / (2.0 * d)
                };
                let numeric = (4.0 * cd(0.5 * d) - cd(d)) / 3.0;
                let exact = lam * grad[a] * phi;
                let rel = (numeric - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
                if grad[a] != 0.0 {
                    worst_closed = worst_closed.max(rel);
                } else {
                    worst_closed = worst_closed.max(numeric.abs() / phi);
                }
            }
        }
    }
    checks.push(check("grad_phi_closed_form", worst_closed, 1e-8, worst_closed <= 1e-8));

    // Same identity through the grid stencils: second-order accurate.
    let mut worst_stencil = 0.0f64;
    let mut tol_stencil = 0.0f64;
    for a in 0..g.dim() {
        if grad[a] == 0.0 {
            continue;
        }
        let n = g.nx()[a];
        let h = g.h()[a];
        tol_stencil = tol_stencil.max((lam * h * grad[a]).powi(2));
        for &k in &interior {
            for j in 0..ns {
                let idx = g.multi_index(j);
                let st = crate::stencil::first(n, idx[a], h);
                let base = j - idx[a] * g.stride(a);
                let numeric: f64 =
                    st.terms().map(|(m, w)| w * bundle.phi[k * ns + base + m * g.stride(a)]).sum();
                let exact = lam * grad[a] * bundle.phi[k * ns + j];
                worst_stencil = worst_stencil.max((numeric - exact).abs() / exact.abs());
            }
        }
    }
    checks.push(check("grad_phi_stencil", worst_stencil, tol_stencil, worst_stencil <= tol_stencil));

    // Mirror symmetry of alpha in time.
    let mut sym_nodal = 0.0f64;
    let mut sym_closed = 0.0f64;
    for &k in &interior {
        let t = g.t(k);
        for j in 0..ns {
            let x = g.point(j);
            sym_nodal = sym_nodal.max((bundle.alpha_node(k, j) - bundle.alpha_node(g.nt() - 1 - k, j)).abs());
            let (a1, a2) = (bundle.alpha_at(x, t), bundle.alpha_at(x, t_final - t));
            sym_closed = sym_closed.max((a1 - a2).abs() / a1.abs());
        }
    }
    checks.push(check("alpha_symmetry_nodal", sym_nodal, 1e-12, sym_nodal <= 1e-12));
    checks.push(check("alpha_symmetry_closed_form", sym_closed, 1e-12, sym_closed <= 1e-12));

    // |dt phi| <= C phi^2 with C = T e^{-lambda min eta}.
    let mut c_dt = 0.0f64;
    for &k in &interior {
        let t = g.t(k);
        for j in 0..ns {
            let phi = bundle.phi_at(g.point(j), t);
            let dphi = phi * (2.0 * t - t_final) / ell(t, t_final);
            c_dt = c_dt.max(dphi.abs() / (phi * phi));
        }
    }
    let bound_dt = t_final * (-lam * bundle.eta.inf()).exp();
    checks.push(check("dt_phi_over_phi_squared", c_dt, bound_dt, c_dt <= bound_dt * (1.0 + 1e-12)));

    // t^2 (T-t)^2 (s phi)^p / (4 s h) <= (C / lambda) (s phi)^{p-1}; the
    // ratio lambda l^2 phi / (4 h) is independent of p.
    let h_min = bundle.e_sup() - (lam * bundle.eta.sup()).exp();
    let bound_l = lam * t_final.powi(4) / 16.0 * (lam * bundle.eta.sup()).exp() / h_min / t_final.powi(2);
    for p in 0..=2 {
        let mut c = 0.0f64;
        for &k in &interior {
            let t = g.t(k);
            let l = ell(t, t_final);
            for j in 0..ns {
                let x = g.point(j);
                let sphi = s * bundle.phi_at(x, t);
                if s == 0.0 {
                    continue;
                }
                let lhs = l * l * sphi.powi(p) / (4.0 * s * bundle.h_at(x));
                let rhs = sphi.powi(p - 1) / lam;
                c = c.max(lhs / rhs);
            }
        }
        checks.push(check(&format!("time_factor_p{p}"), c, bound_l, c <= bound_l * (1.0 + 1e-12)));
    }

    // sup e^{lambda eta} / h is finite.
    let sup_ratio = (0..ns)
        .map(|j| (lam * bundle.eta.value(g.point(j))).exp() / bundle.h_at(g.point(j)))
        .fold(0.0f64, f64::max);
    let bound_ratio = (lam * bundle.eta.sup()).exp() / h_min;
    checks.push(check("exp_over_h", sup_ratio, bound_ratio, sup_ratio <= bound_ratio * (1.0 + 1e-12)));

    // max xi^m e^{-2 s C2 xi} is attained at xi = m / (2 s C2).
    if s > 0.0 {
        let c = 2.0 * s * h_min;
        let mut worst = 0.0f64;
        for m in 1..=4 {
            let (xi, _) = maximize_power_exp(m as f64, c);
            let exact = m as f64 / c;
            worst = worst.max((xi - exact).abs() / exact);
        }
        checks.push(check("power_exp_maximizer", worst, 1e-6, worst <= 1e-6));
    }

    IdentityReport { params: bundle.params, checks }
}
