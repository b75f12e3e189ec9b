#![allow(dead_code)]

use std::sync::Arc;

use mfg_lab::coefficients::{CoeffSet, CoeffSpec};
use mfg_lab::ensemble::{Mode, SeriesField};
use mfg_lab::expr::Expr;
use mfg_lab::grid::{build_grid, Face, Grid, GridSpec, Side};
use mfg_lab::system::CaseRecipe;

pub fn grid1(nx: usize, nt: usize) -> Arc<Grid> {
    build_grid(&GridSpec::one_d(1.0, nx, 1.0, nt, vec![Face::new(0, Side::High)])).unwrap()
}

pub fn grid2(nx: usize, nt: usize) -> Arc<Grid> {
    build_grid(&GridSpec {
        lengths: vec![1.0, 1.0],
        t_final: 1.0,
        nx: vec![nx, nx],
        nt,
        gamma: vec![Face::new(0, Side::High)],
    })
    .unwrap()
}

pub fn e(s: &str) -> Expr {
    Expr::parse(s).unwrap()
}

/// Variable diagonal coefficients with every lower-order slot populated.
pub fn rich_coeffs() -> CoeffSpec {
    toml::from_str(
        r#"
        c0 = "0.5"
        coupling = { "0" = "0.3", "1" = "0.2", "2" = "0.1" }
        [a]
        principal = [["1 + 0.2*x"]]
        first = ["0.1"]
        [b]
        principal = [["1.1 - 0.1*x*t"]]
        zeroth = "0.2"
        "#,
    )
    .unwrap()
}

pub fn sample(spec: &CoeffSpec, g: &Arc<Grid>) -> CoeffSet {
    spec.resolved(g.dim()).unwrap().sample(g).unwrap()
}

/// Coefficients under which [`good_recipe`] keeps both time factors large.
pub fn inverse_coeffs() -> CoeffSpec {
    toml::from_str("c0 = \"1\"\ncoupling = { \"2\" = \"0.5\" }\n").unwrap()
}

pub fn good_recipe() -> CaseRecipe {
    let m = |k: usize, m: u32, c: f64| Mode { k: [k, 0], m, c };
    CaseRecipe {
        u: SeriesField::new(vec![m(1, 0, 0.25), m(1, 1, 0.25), m(2, 2, 0.05), m(0, 1, 10.0)]),
        v: SeriesField::new(vec![m(2, 0, 0.1), m(2, 1, -0.05), m(1, 1, 0.1), m(0, 1, -10.0)]),
        f: e("1 + 0.3*cos(pi*x)"),
        g: e("1 - 0.2*cos(pi*x)"),
    }
}
