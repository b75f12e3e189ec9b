//! Seeded random test functions: finite sums of cosine modes times
//! monomials in time.
//!
//! Sampled cosines have a discrete normal derivative of size `O(h^3)` at the
//! boundary. The sampler replaces each endpoint value of every 1D factor so
//! that the one-sided three-point derivative vanishes exactly, which keeps
//! the homogeneous conormal condition at round-off level.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FnKind, Grid, GridFn};

/// One term `c cos(k1 pi x1 / L1) cos(k2 pi x2 / L2) (t / T)^m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: [usize; 2],
    pub m: u32,
    pub c: f64,
}

/// A finite sum of modes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesField {
    pub modes: Vec<Mode>,
}

/// Closed 1D cosine samples with the endpoint correction.
fn closed_cosine(n: usize, k: usize, h: f64, length: f64) -> Vec<f64> {
    let mut c: Vec<f64> = (0..n).map(|i| (k as f64 * PI * i as f64 * h / length).cos()).collect();
    if k > 0 {
        c[0] = (4.0 * c[1] - c[2]) / 3.0;
        c[n - 1] = (4.0 * c[n - 2] - c[n - 3]) / 3.0;
    }
    c
}

/// `d^order/dx^order cos(w x)`.
fn cos_deriv(w: f64, x: f64, order: u8) -> f64 {
    let p = w.powi(order as i32);
    match order % 4 {
        0 => p * (w * x).cos(),
        1 => -p * (w * x).sin(),
        2 => -p * (w * x).cos(),
        _ => p * (w * x).sin(),
    }
}

/// `d^j/dt^j (t/T)^m`.
fn mono_deriv(m: u32, t: f64, t_final: f64, j: u8) -> f64 {
    let j = j as u32;
    if j > m {
        return 0.0;
    }
    let falling: f64 = ((m - j + 1)..=m).map(|v| v as f64).product();
    falling * t.powi((m - j) as i32) / t_final.powi(m as i32)
}

impl SeriesField {
    pub fn new(modes: Vec<Mode>) -> Self {
        Self { modes }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { modes: self.modes.iter().map(|m| Mode { c: c * m.c, ..*m }).collect() }
    }

    /// Concatenate the terms of two fields.
    pub fn plus(&self, other: &SeriesField) -> Self {
        Self { modes: self.modes.iter().chain(&other.modes).copied().collect() }
    }

    /// Nodal values with the Neumann endpoint closure.
    pub fn sample(&self, grid: &Arc<Grid>) -> GridFn {
        self.sample_with(grid, true)
    }

    /// Nodal values of the plain cosine sum.
    pub fn sample_raw(&self, grid: &Arc<Grid>) -> GridFn {
        self.sample_with(grid, false)
    }

    fn sample_with(&self, grid: &Arc<Grid>, closure: bool) -> GridFn {
        let dim = grid.dim();
        let ns = grid.n_space();
        let mut out = vec![0.0; grid.n_nodes()];
        for mode in &self.modes {
            let factors: Vec<Vec<f64>> = (0..dim)
                .map(|a| {
                    let (n, h, l) = (grid.nx()[a], grid.h()[a], grid.lengths()[a]);
                    if closure {
                        closed_cosine(n, mode.k[a], h, l)
                    } else {
                        (0..n).map(|i| cos_deriv(mode.k[a] as f64 * PI / l, i as f64 * h, 0)).collect()
                    }
                })
                .collect();
            let spatial: Vec<f64> = (0..ns)
                .map(|s| {
                    let idx = grid.multi_index(s);
                    (0..dim).map(|a| factors[a][idx[a]]).product()
                })
                .collect();
            for k in 0..grid.nt() {
                let tf = mode.c * mono_deriv(mode.m, grid.t(k), grid.t_final(), 0);
                for (o, sp) in out[k * ns..(k + 1) * ns].iter_mut().zip(&spatial) {
                    *o += tf * sp;
                }
            }
        }
        GridFn::new(grid.clone(), FnKind::SpaceTime, out).expect("sized to grid")
    }

    /// Closed-form derivative `d^{dx} d_t^{dt}` of the cosine sum.
    pub fn analytic(&self, grid: &Arc<Grid>, dx: [u8; 2], dt: u8) -> GridFn {
        let lengths = grid.lengths().to_vec();
        let t_final = grid.t_final();
        let dim = grid.dim();
        GridFn::sample(grid, |x, t| {
            self.modes
                .iter()
                .map(|m| {
                    let sp: f64 = (0..dim)
                        .map(|a| cos_deriv(m.k[a] as f64 * PI / lengths[a], x[a], dx[a]))
                        .product();
                    m.c * sp * mono_deriv(m.m, t, t_final, dt)
                })
                .sum()
        })
    }
}

/// Parameters of a random ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Number of members.
    #[serde(default = "default_members")]
    pub members: usize,
    /// Cosine modes per axis (`k = 0..modes`).
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Highest power of `t`.
    #[serde(default = "default_time_degree")]
    pub time_degree: u32,
    /// Coefficients are uniform in `[-amplitude, amplitude]`.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_members() -> usize {
    20
}
fn default_modes() -> usize {
    3
}
fn default_time_degree() -> u32 {
    2
}
fn default_amplitude() -> f64 {
    1.0
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: default_members(),
            modes: default_modes(),
            time_degree: default_time_degree(),
            amplitude: default_amplitude(),
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.modes == 0 || !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::InvalidArgument(
                "ensemble needs at least one member, one mode and a non-negative amplitude".into(),
            ));
        }
        Ok(())
    }

    /// Draw one random series from `rng`.
    pub fn draw(&self, dim: usize, rng: &mut ChaCha8Rng) -> SeriesField {
        let a = self.amplitude;
        let k2_range = if dim == 2 { self.modes } else { 1 };
        let mut modes = Vec::new();
        for k2 in 0..k2_range {
            for k1 in 0..self.modes {
                for m in 0..=self.time_degree {
                    modes.push(Mode { k: [k1, k2], m, c: rng.random_range(-a..=a) });
                }
            }
        }
        SeriesField { modes }
    }
}

/// One member: a pair `(u, v)` with its series description.
#[derive(Debug, Clone)]
pub struct Member {
    pub u_series: SeriesField,
    pub v_series: SeriesField,
    pub u: GridFn,
    pub v: GridFn,
}

/// A deterministic family of test pairs.
#[derive(Debug, Clone)]
pub struct FunctionEnsemble {
    pub grid: Arc<Grid>,
    pub seed: u64,
    pub spec: EnsembleSpec,
    pub members: Vec<Member>,
}

/// Generate `spec.members` pairs from `seed`. The same seed gives the same
/// series on any grid.
pub fn generate_ensemble(seed: u64, spec: &EnsembleSpec, grid: &Arc<Grid>) -> Result<FunctionEnsemble> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members = (0..spec.members)
        .map(|_| {
            let u_series = spec.draw(grid.dim(), &mut rng);
            let v_series = spec.draw(grid.dim(), &mut rng);
            Member { u: u_series.sample(grid), v: v_series.sample(grid), u_series, v_series }
        })
        .collect();
    Ok(FunctionEnsemble { grid: grid.clone(), seed, spec: spec.clone(), members })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{conormal, CoeffSet, OpKind};
    use crate::grid::{build_grid, diff, Deriv, Face, GridSpec, Side};

    fn grid(dim: usize, n: usize) -> Arc<Grid> {
        build_grid(&GridSpec {
            lengths: vec![1.0; dim],
            t_final: 1.0,
            nx: vec![n; dim],
            nt: 9,
            gamma: vec![Face::new(0, Side::High)],
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_values() {
        let g = grid(1, 17);
        let a = generate_ensemble(5, &EnsembleSpec::default(), &g).unwrap();
        let b = generate_ensemble(5, &EnsembleSpec::default(), &g).unwrap();
        let c = generate_ensemble(6, &EnsembleSpec::default(), &g).unwrap();
        assert_eq!(a.members[3].u.values(), b.members[3].u.values());
        assert_ne!(a.members[3].u.values(), c.members[3].u.values());
    }

    #[test]
    fn zero_amplitude_gives_zero_members() {
        let g = grid(1, 9);
        let spec = EnsembleSpec { members: 1, amplitude: 0.0, ..EnsembleSpec::default() };
        let e = generate_ensemble(3, &spec, &g).unwrap();
        assert_eq!(e.members[0].u.max_abs(), 0.0);
        assert_eq!(e.members[0].v.max_abs(), 0.0);
    }

    #[test]
    fn closure_zeroes_discrete_conormal() {
        for dim in [1, 2] {
            let g = grid(dim, 17);
            let e = generate_ensemble(1, &EnsembleSpec { members: 3, ..Default::default() }, &g).unwrap();
            let c = CoeffSet::laplacian(&g);
            for m in &e.members {
                let cn = conormal(&m.u, &c, OpKind::A).unwrap();
                assert!(cn.max_abs() <= 1e-10, "{}", cn.max_abs());
                let raw = conormal(&m.u_series.sample_raw(&g), &c, OpKind::A).unwrap();
                assert!(raw.max_abs() > 1e-8);
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_stencils() {
        let g = grid(2, 65);
        let f = SeriesField::new(vec![
            Mode { k: [1, 2], m: 2, c: 0.7 },
            Mode { k: [0, 1], m: 1, c: -0.3 },
        ]);
        let raw = f.sample_raw(&g);
        let pairs = [(Deriv::Dt, [0, 0], 1), (Deriv::Dx(1), [0, 1], 0), (Deriv::Dxx(0, 1), [1, 1], 0)];
        for (d, dx, dt) in pairs {
            let num = diff(&raw, d).unwrap();
            let ex = f.analytic(&g, dx, dt);
            let err = num.sub(&ex).unwrap().max_abs();
            assert!(err < 0.05 * ex.max_abs().max(1.0), "{d:?} {err}");
        }
        assert!(f.analytic(&g, [0, 0], 0).sub(&raw).unwrap().max_abs() < 1e-14);
    }
}
