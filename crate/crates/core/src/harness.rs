//! Configuration-driven experiment runner.
//!
//! A run reads a TOML config, fills in defaults, validates everything at
//! once, computes the result tables in memory and only then writes them
//! (CSV, whitespace `.dat`, `report.json`) in a fixed order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coefficients::{CoeffSet, CoeffSpec, NonlinearSpec};
use crate::ensemble::{generate_ensemble, EnsembleSpec, Mode, SeriesField};
use crate::error::{Error, Result};
use crate::estimate::{CarlemanStudy, EstimateKind, Sweep, VerificationReport};
use crate::expr::Expr;
use crate::grid::{build_grid, Grid, GridFn, GridSpec};
use crate::inverse::{
    direct_formula_oracle, make_inverse_data, reconstruct, stability_sweep, BetaRule, ReconstructionConfig,
    SourceErrors, SweepSpec,
};
use crate::state::{interior_stability_experiment, nonlinear_difference_experiment, CEpsReport};
use crate::system::{
    generate_cases, mms_linear, nonlinear_pair, CaseEnsembleSpec, CaseRecipe, ManufacturedCase, SourceMode,
};
use crate::weight::{build_eta, check_weight_identities, eval_weight_bundle, WeightParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    VerifyWeights,
    VerifyCarleman,
    Lemma3,
    Reconstruct,
    StabilitySweep,
    StateDet,
    NonlinearDiff,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::VerifyWeights,
        Experiment::VerifyCarleman,
        Experiment::Lemma3,
        Experiment::Reconstruct,
        Experiment::StabilitySweep,
        Experiment::StateDet,
        Experiment::NonlinearDiff,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::VerifyWeights => "verify-weights",
            Experiment::VerifyCarleman => "verify-carleman",
            Experiment::Lemma3 => "lemma3",
            Experiment::Reconstruct => "reconstruct",
            Experiment::StabilitySweep => "stability-sweep",
            Experiment::StateDet => "state-det",
            Experiment::NonlinearDiff => "nonlinear-diff",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment `{s}`")))
    }
}

fn default_f() -> Expr {
    Expr::parse("1 + 0.3*cos(pi*x)").expect("valid literal")
}
fn default_g() -> Expr {
    Expr::parse("1 - 0.2*cos(pi*x)").expect("valid literal")
}
fn yes() -> bool {
    true
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarlemanSection {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<EstimateKind>,
    /// Repeat on the refined grid and report the drift of `C_emp`.
    #[serde(default = "yes")]
    pub refine: bool,
    /// Multiplies every ensemble member.
    #[serde(default = "unit")]
    pub scale: f64,
    /// Source amplitudes used by the slice estimates.
    #[serde(default = "default_f")]
    pub f: Expr,
    #[serde(default = "default_g")]
    pub g: Expr,
}

fn default_kinds() -> Vec<EstimateKind> {
    vec![EstimateKind::Coupled]
}

impl Default for CarlemanSection {
    fn default() -> Self {
        Self { kinds: default_kinds(), refine: true, scale: 1.0, f: default_f(), g: default_g() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Section {
    #[serde(default = "default_powers")]
    pub p: Vec<u8>,
    #[serde(default)]
    pub refine: bool,
}

fn default_powers() -> Vec<u8> {
    vec![0, 1, 2]
}

impl Default for Lemma3Section {
    fn default() -> Self {
        Self { p: default_powers(), refine: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    /// The explicit `recipe`.
    #[default]
    Fixed,
    /// Member `member` of a random case ensemble drawn from the run seed.
    Random,
}

/// Manufactured case used by the inverse experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSection {
    #[serde(default)]
    pub kind: CaseKind,
    #[serde(default = "default_recipe")]
    pub recipe: CaseRecipe,
    #[serde(default)]
    pub mode: SourceMode,
    #[serde(default = "crate::system::default_q_min")]
    pub q_min: f64,
    /// Ensemble for `kind = "random"`; the amplitudes come from `recipe.f`, `recipe.g`.
    #[serde(default)]
    pub random: CaseEnsembleSpec,
    #[serde(default)]
    pub member: usize,
}

/// A case with time factors bounded well away from zero.
pub fn default_recipe() -> CaseRecipe {
    let m = |k: usize, m: u32, c: f64| Mode { k: [k, 0], m, c };
    CaseRecipe {
        u: SeriesField::new(vec![m(1, 0, 0.25), m(1, 1, 0.25), m(2, 2, 0.05), m(0, 1, 10.0)]),
        v: SeriesField::new(vec![m(2, 0, 0.1), m(2, 1, -0.05), m(1, 1, 0.1), m(0, 1, -10.0)]),
        f: default_f(),
        g: default_g(),
    }
}

impl Default for CaseSection {
    fn default() -> Self {
        Self {
            kind: CaseKind::Fixed,
            recipe: default_recipe(),
            mode: SourceMode::Discrete,
            q_min: crate::system::default_q_min(),
            random: CaseEnsembleSpec::default(),
            member: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Noise seeds; defaults to three seeds following the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_beta_rule")]
    pub beta_rule: BetaRule,
}

fn default_deltas() -> Vec<f64> {
    vec![1e-3, 3e-3, 1e-2, 3e-2, 1e-1]
}
fn default_beta_rule() -> BetaRule {
    BetaRule::DeltaSquared
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { deltas: default_deltas(), seeds: None, beta_rule: default_beta_rule() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InverseSection {
    #[serde(default)]
    pub solver: ReconstructionConfig,
    /// Noise level of a single reconstruction.
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSection {
    /// Interior margins as fractions of `T`.
    #[serde(default = "default_fractions")]
    pub epsilon_fractions: Vec<f64>,
    #[serde(default = "yes")]
    pub refine: bool,
}

fn default_fractions() -> Vec<f64> {
    vec![0.05, 0.1, 0.2]
}

impl Default for StateSection {
    fn default() -> Self {
        Self { epsilon_fractions: default_fractions(), refine: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearSection {
    #[serde(default = "unit_expr")]
    pub a: Expr,
    #[serde(default = "default_kappa")]
    pub kappa: Expr,
    #[serde(default = "zero_expr")]
    pub p: Expr,
    /// Size of the perturbation separating the two states of each pair.
    #[serde(default = "default_pair_scale")]
    pub scale: f64,
    #[serde(default = "default_fractions")]
    pub epsilon_fractions: Vec<f64>,
    #[serde(default = "yes")]
    pub refine: bool,
}

fn unit_expr() -> Expr {
    Expr::constant(1.0)
}
fn zero_expr() -> Expr {
    Expr::constant(0.0)
}
fn default_kappa() -> Expr {
    Expr::constant(0.5)
}
fn default_pair_scale() -> f64 {
    0.1
}

impl Default for NonlinearSection {
    fn default() -> Self {
        Self {
            a: unit_expr(),
            kappa: default_kappa(),
            p: zero_expr(),
            scale: default_pair_scale(),
            epsilon_fractions: default_fractions(),
            refine: true,
        }
    }
}

impl NonlinearSection {
    fn spec(&self) -> NonlinearSpec {
        NonlinearSpec { a: self.a.clone(), kappa: self.kappa.clone(), p: self.p.clone() }
    }
}

/// A complete experiment description. Every section may be omitted; the
/// resolved config (echoed in `report.json`) contains every default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub coefficients: CoeffSpec,
    #[serde(default)]
    pub weights: Sweep,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub carleman: CarlemanSection,
    #[serde(default)]
    pub lemma3: Lemma3Section,
    #[serde(default)]
    pub case: CaseSection,
    #[serde(default)]
    pub inverse: InverseSection,
    #[serde(default)]
    pub state: StateSection,
    #[serde(default)]
    pub nonlinear: NonlinearSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub experiment: Option<Experiment>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// A validated config with every default filled in.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    /// Parse TOML. Unknown keys are an error listing every one of them.
    pub fn from_toml(src: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(src).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut unknown = Vec::new();
        let cfg: ExperimentConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(vec![e.to_string()]))?;
        if unknown.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(unknown.into_iter().map(|k| format!("{k}: unknown key")).collect()))
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_toml(&src)
    }

    /// Apply overrides, fill defaults and validate every section.
    pub fn resolve(mut self, ov: &Overrides) -> Result<ResolvedConfig> {
        let mut errs = Vec::new();
        if let Some(e) = ov.experiment {
            match self.experiment {
                Some(cur) if cur != e => errs.push(format!(
                    "experiment: config says `{}` but `{}` was requested",
                    cur.name(),
                    e.name()
                )),
                _ => self.experiment = Some(e),
            }
        }
        if ov.seed.is_some() {
            self.seed = ov.seed;
        }
        if ov.out_dir.is_some() {
            self.out_dir = ov.out_dir.clone();
        }
        if self.experiment.is_none() {
            errs.push("experiment: required".into());
        }
        if self.seed.is_none() {
            errs.push("seed: required (set it in the config or pass --seed)".into());
        }
        if let (None, Some(e)) = (&self.out_dir, self.experiment) {
            self.out_dir = Some(PathBuf::from("out").join(e.name()));
        }
        if self.inverse.sweep.seeds.is_none() {
            if let Some(s) = self.seed {
                self.inverse.sweep.seeds = Some((0..3).map(|i| s.wrapping_add(i)).collect());
            }
        }
        errs.extend(self.problems());
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let dim = self.grid.lengths.len();
        self.coefficients = self.coefficients.resolved(dim)?;
        Ok(ResolvedConfig {
            experiment: self.experiment.expect("checked"),
            seed: self.seed.expect("checked"),
            out_dir: self.out_dir.clone().expect("filled"),
            config: self,
        })
    }

    fn problems(&self) -> Vec<String> {
        let mut p: Vec<String> = self.grid.problems().into_iter().map(|m| format!("grid.{m}")).collect();
        if p.is_empty() {
            match build_grid(&self.grid) {
                Ok(g) => {
                    if let Err(e) = self.coefficients.resolved(g.dim()).and_then(|c| c.sample(&g)) {
                        p.push(format!("coefficients: {e}"));
                    }
                }
                Err(e) => p.push(format!("grid: {e}")),
            }
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        for (key, vals) in [("weights.lambdas", &self.weights.lambdas), ("weights.s_values", &self.weights.s_values)] {
            if vals.is_empty() {
                p.push(format!("{key}: empty"));
            }
            if let Some(v) = vals.iter().find(|v| !positive(**v)) {
                p.push(format!("{key}: {v} must be positive"));
            }
        }
        if let Err(e) = self.ensemble.validate() {
            p.push(format!("ensemble: {e}"));
        }
        if self.carleman.kinds.is_empty() {
            p.push("carleman.kinds: empty".into());
        }
        if !(self.carleman.scale.is_finite() && self.carleman.scale != 0.0) {
            p.push(format!("carleman.scale: {} must be finite and nonzero", self.carleman.scale));
        }
        if self.lemma3.p.is_empty() {
            p.push("lemma3.p: empty".into());
        }
        if let Some(q) = self.lemma3.p.iter().find(|q| **q > 2) {
            p.push(format!("lemma3.p: power {q} must be 0, 1 or 2"));
        }
        let c = &self.case;
        if !positive(c.q_min) {
            p.push(format!("case.q_min: {} must be positive", c.q_min));
        }
        if c.kind == CaseKind::Random {
            if let Err(e) = c.random.ensemble.validate() {
                p.push(format!("case.random.ensemble: {e}"));
            }
            if c.member >= c.random.ensemble.members {
                p.push(format!("case.member: {} out of range for {} members", c.member, c.random.ensemble.members));
            }
        }
        if let Err(Error::Config(list)) = self.inverse.solver.validate() {
            p.extend(list.into_iter().map(|m| format!("inverse.solver.{m}")));
        }
        if !(self.inverse.delta >= 0.0 && self.inverse.delta.is_finite()) {
            p.push(format!("inverse.delta: {} must be finite and >= 0", self.inverse.delta));
        }
        if let Some(seeds) = &self.inverse.sweep.seeds {
            let spec = SweepSpec {
                deltas: self.inverse.sweep.deltas.clone(),
                seeds: seeds.clone(),
                beta_rule: self.inverse.sweep.beta_rule,
            };
            if let Err(Error::Config(list)) = spec.validate() {
                p.extend(list.into_iter().map(|m| format!("inverse.sweep.{m}")));
            }
        }
        for (key, fr) in [
            ("state.epsilon_fractions", &self.state.epsilon_fractions),
            ("nonlinear.epsilon_fractions", &self.nonlinear.epsilon_fractions),
        ] {
            if fr.is_empty() {
                p.push(format!("{key}: empty"));
            }
            if let Some(f) = fr.iter().find(|f| !(**f > 0.0 && **f < 0.5)) {
                p.push(format!("{key}: {f} must lie in (0, 0.5)"));
            }
        }
        if !positive(self.nonlinear.scale) {
            p.push(format!("nonlinear.scale: {} must be positive", self.nonlinear.scale));
        }
        p
    }
}

/// One value of a result table.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Bool(bool),
    Text(String),
    Missing,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}
impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Num)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    fn render(&self, missing: &str) -> String {
        match self {
            Cell::Num(v) => ryu::Buffer::new().format(*v).to_string(),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => missing.to_string(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Num(v) if v.is_finite() => json!(v),
            Cell::Num(_) | Cell::Missing => Value::Null,
            Cell::Int(v) => json!(v),
            Cell::Bool(b) => json!(b),
            Cell::Text(s) => json!(s),
        }
    }
}

/// A named table, written as `<name>.csv` and optionally as `<name>.dat`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// Also emit a whitespace-separated `.dat` file for plotting.
    pub plot: bool,
}

impl Table {
    pub fn new(name: &str, columns: &[&str], plot: bool) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new(), plot }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn header(&self) -> String {
        self.columns.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(|c| c.render("")).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_dat(&self) -> String {
        let mut out = format!("# {}\n", self.columns.join(" "));
        for r in &self.rows {
            out.push_str(&r.iter().map(|c| c.render("nan")).collect::<Vec<_>>().join(" "));
            out.push('\n');
        }
        out
    }

    fn to_json(&self) -> Value {
        json!({
            "columns": self.columns,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::to_json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// Everything an experiment produced, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub experiment: Experiment,
    pub summary: Value,
    pub tables: Vec<Table>,
    /// Extra JSON files (name, content).
    pub extra: Vec<(String, Value)>,
}

impl RunOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Files in write order, excluding `report.json`.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = Vec::new();
        for t in &self.tables {
            files.push((format!("{}.csv", t.name), t.to_csv().into_bytes()));
        }
        for t in self.tables.iter().filter(|t| t.plot) {
            files.push((format!("{}.dat", t.name), t.to_dat().into_bytes()));
        }
        for (name, v) in &self.extra {
            let mut s = serde_json::to_string_pretty(v)?;
            s.push('\n');
            files.push((name.clone(), s.into_bytes()));
        }
        Ok(files)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// The persisted summary of a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub experiment: Experiment,
    pub config: Value,
    pub summary: Value,
    pub tables: serde_json::Map<String, Value>,
    pub wall_time_s: f64,
    pub versions: Value,
    pub outputs: Vec<OutputFile>,
    /// SHA-256 over the sorted `(name, blob hash)` list of the outputs.
    pub content_hash: String,
    pub out_dir: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Git-style blob hash: `sha256("blob <len>\0" + content)`.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Hash of a set of files, independent of their order.
pub fn content_hash(files: &[(String, Vec<u8>)]) -> String {
    let mut entries: Vec<(String, String)> = files.iter().map(|(n, c)| (n.clone(), blob_hash(c))).collect();
    entries.sort();
    let mut h = Sha256::new();
    for (n, b) in entries {
        h.update(format!("{b} {n}\n").as_bytes());
    }
    hex(&h.finalize())
}

/// Create `dir` if needed and check that files can be created in it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    let fail = |source| Error::Output { path: dir.to_path_buf(), source };
    fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(format!(".mfg-lab-probe-{}", std::process::id()));
    fs::OpenOptions::new().write(true).create(true).truncate(true).open(&probe).map_err(fail)?;
    fs::remove_file(&probe).map_err(fail)
}

/// Compute the experiment without touching the file system.
pub fn execute(rc: &ResolvedConfig) -> Result<RunOutput> {
    let c = &rc.config;
    let (summary, tables, extra) = match rc.experiment {
        Experiment::VerifyWeights => verify_weights(c)?,
        Experiment::VerifyCarleman => verify_carleman(c, rc.seed)?,
        Experiment::Lemma3 => lemma3(c, rc.seed)?,
        Experiment::Reconstruct => run_reconstruct(c, rc.seed)?,
        Experiment::StabilitySweep => run_sweep(c, rc.seed)?,
        Experiment::StateDet => state_det(c, rc.seed)?,
        Experiment::NonlinearDiff => nonlinear_diff(c, rc.seed)?,
    };
    Ok(RunOutput { experiment: rc.experiment, summary, tables, extra })
}

/// Check the output directory, run, then write every file and `report.json`.
pub fn run(rc: &ResolvedConfig) -> Result<RunReport> {
    ensure_writable(&rc.out_dir)?;
    let start = Instant::now();
    let output = execute(rc)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let files = output.files()?;
    let outputs = files
        .iter()
        .map(|(name, c)| OutputFile { name: name.clone(), bytes: c.len(), sha256: blob_hash(c) })
        .collect();
    let report = RunReport {
        experiment: rc.experiment,
        config: serde_json::to_value(&rc.config)?,
        summary: output.summary.clone(),
        tables: output.tables.iter().map(|t| (t.name.clone(), t.to_json())).collect(),
        wall_time_s,
        versions: json!({
            "mfg-lab": env!("CARGO_PKG_VERSION"),
            "os": std::env::consts::OS,
            "arch": std::env::consts::ARCH,
        }),
        outputs,
        content_hash: content_hash(&files),
        out_dir: rc.out_dir.clone(),
    };
    for (name, content) in &files {
        fs::write(rc.out_dir.join(name), content)?;
    }
    let mut s = serde_json::to_string_pretty(&report)?;
    s.push('\n');
    fs::write(rc.out_dir.join("report.json"), s)?;
    Ok(report)
}

type Parts = (Value, Vec<Table>, Vec<(String, Value)>);

fn coord_columns(grid: &Grid) -> Vec<&'static str> {
    ["x1", "x2"][..grid.dim()].to_vec()
}

fn coords(grid: &Grid, s: usize) -> Vec<Cell> {
    grid.point(s)[..grid.dim()].iter().map(|v| Cell::Num(*v)).collect()
}

fn with_coords(grid: &Grid, rest: &[&'static str]) -> Vec<&'static str> {
    let mut cols = coord_columns(grid);
    cols.extend_from_slice(rest);
    cols
}

fn verify_weights(c: &ExperimentConfig) -> Result<Parts> {
    let grid = build_grid(&c.grid)?;
    let coeffs = c.coefficients.sample(&grid)?;
    let eta = build_eta(&grid, Some(&coeffs))?;
    let mut checks = Table::new("weights", &["lambda", "s", "identity", "value", "tolerance", "passed"], false);
    let mut cols = vec!["lambda", "s"];
    cols.extend(with_coords(&grid, &["phi", "alpha", "weight"]));
    let mut profile = Table::new("weight_profile", &cols, true);
    let t0 = grid.t(grid.k0());
    let mut cells = Vec::new();
    for &lambda in &c.weights.lambdas {
        for &s in &c.weights.s_values {
            let bundle = eval_weight_bundle(&eta, WeightParams::new(lambda, s)?, &grid)?;
            let rep = check_weight_identities(&bundle);
            for ch in &rep.checks {
                checks.push(vec![
                    lambda.into(),
                    s.into(),
                    ch.name.clone().into(),
                    ch.value.into(),
                    ch.tolerance.into(),
                    ch.passed.into(),
                ]);
            }
            for j in 0..grid.n_space() {
                let x = grid.point(j);
                let mut row: Vec<Cell> = vec![lambda.into(), s.into()];
                row.extend(coords(&grid, j));
                row.extend([bundle.phi_at(x, t0), bundle.alpha_at(x, t0), bundle.weight_at(x, t0)].map(Cell::Num));
                profile.push(row);
            }
            let failed: Vec<&str> = rep.checks.iter().filter(|ch| !ch.passed).map(|ch| ch.name.as_str()).collect();
            cells.push(json!({
                "lambda": lambda,
                "s": s,
                "alpha_max": bundle.alpha_max(),
                "passed": failed.is_empty(),
                "failed": failed,
            }));
        }
    }
    let all_passed = cells.iter().all(|c| c["passed"] == json!(true));
    let summary = json!({
        "eta": { "face": eta.face().to_string(), "min": eta.inf(), "max": eta.sup() },
        "all_passed": all_passed,
        "cells": cells,
    });
    Ok((summary, vec![checks, profile], Vec::new()))
}

fn verification_summary(rep: &VerificationReport) -> Value {
    let flagged = |pick: fn(&crate::estimate::CellResult) -> &Vec<usize>| {
        rep.cells
            .iter()
            .filter(|c| !pick(c).is_empty())
            .map(|c| json!({ "lambda": c.lambda, "s": c.s, "members": pick(c) }))
            .collect::<Vec<_>>()
    };
    json!({
        "kind": rep.kind.label(),
        "c_emp": rep.c_emp,
        "all_finite": rep.all_finite,
        "s0": rep.s0.iter().map(|(l, s)| json!({ "lambda": l, "s0": s })).collect::<Vec<_>>(),
        "lambda0": rep.lambda0,
        "drift": rep.drift,
        "outliers": flagged(|c| &c.outliers),
        "violations": flagged(|c| &c.violations),
    })
}

fn estimate_tables(
    c: &ExperimentConfig,
    seed: u64,
    kinds: &[EstimateKind],
    refine: bool,
    name: &str,
) -> Result<Parts> {
    let mut rows = Table::new(name, &["kind", "lambda", "s", "member", "lhs", "rhs", "ratio"], false);
    let mut cells =
        Table::new(&format!("{name}_cells"), &["kind", "lambda", "s", "max_ratio", "median_ratio"], true);
    let mut reports = Vec::new();
    for &kind in kinds {
        let study = CarlemanStudy {
            grid: c.grid.clone(),
            coeffs: c.coefficients.clone(),
            ensemble: c.ensemble.clone(),
            seed,
            kind,
            sweep: c.weights.clone(),
            sources: Some((c.carleman.f.clone(), c.carleman.g.clone())),
            scale: c.carleman.scale,
        };
        let rep = study.run(refine)?;
        for cell in &rep.cells {
            for r in &cell.records {
                rows.push(vec![
                    kind.label().into(),
                    cell.lambda.into(),
                    cell.s.into(),
                    r.member.into(),
                    r.lhs.into(),
                    r.rhs.into(),
                    r.ratio.into(),
                ]);
            }
            cells.push(vec![
                kind.label().into(),
                cell.lambda.into(),
                cell.s.into(),
                cell.max_ratio.into(),
                cell.median_ratio.into(),
            ]);
        }
        reports.push(verification_summary(&rep));
    }
    Ok((json!({ "estimates": reports }), vec![rows, cells], Vec::new()))
}

fn verify_carleman(c: &ExperimentConfig, seed: u64) -> Result<Parts> {
    estimate_tables(c, seed, &c.carleman.kinds, c.carleman.refine, "carleman")
}

fn lemma3(c: &ExperimentConfig, seed: u64) -> Result<Parts> {
    let kinds: Vec<EstimateKind> = c.lemma3.p.iter().map(|p| EstimateKind::TimeIntegral(*p)).collect();
    estimate_tables(c, seed, &kinds, c.lemma3.refine, "lemma3")
}

/// The manufactured case selected by the `case` section.
pub fn build_case(c: &ExperimentConfig, seed: u64) -> Result<ManufacturedCase> {
    let grid = build_grid(&c.grid)?;
    let coeffs = c.coefficients.sample(&grid)?;
    let cs = &c.case;
    match cs.kind {
        CaseKind::Fixed => mms_linear(&cs.recipe, &coeffs, cs.mode, cs.q_min),
        CaseKind::Random => {
            // Draws are sequential, so the first `member + 1` cases of a
            // larger ensemble are the same.
            let mut spec = cs.random.clone();
            spec.ensemble.members = cs.member + 1;
            let mut cases = generate_cases(seed, &spec, &cs.recipe.f, &cs.recipe.g, &coeffs)?;
            Ok(cases.swap_remove(cs.member))
        }
    }
}

fn run_reconstruct(c: &ExperimentConfig, seed: u64) -> Result<Parts> {
    let case = build_case(c, seed)?;
    let grid = case.grid().clone();
    let data = make_inverse_data(&case, c.inverse.delta, seed)?;
    let res = reconstruct(&data, &c.inverse.solver)?;
    let oracle = direct_formula_oracle(&case)?;
    let truth = (case.sources.f.clone(), case.sources.g.clone());
    let oracle_errors = SourceErrors::compute(&oracle.0, &oracle.1, &truth)?;
    let mut sources =
        Table::new("sources", &with_coords(&grid, &["f", "g", "f_true", "g_true", "f_oracle", "g_oracle"]), true);
    for j in 0..grid.n_space() {
        let mut row = coords(&grid, j);
        for f in [&res.f, &res.g, &truth.0, &truth.1, &oracle.0, &oracle.1] {
            row.push(f.values()[j].into());
        }
        sources.push(row);
    }
    let mut history = Table::new("history", &["iteration", "residual_sq"], true);
    for (i, r) in res.history.iter().enumerate() {
        history.push(vec![(i + 1).into(), (*r).into()]);
    }
    let summary = json!({
        "delta": c.inverse.delta,
        "noise_seed": seed,
        "errors": res.errors,
        "oracle_errors": oracle_errors,
        "objective": res.objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "relative_residual": res.relative_residual,
        "preconditioner": res.preconditioner,
        "warnings": res.warnings,
        "q_min": { "q1": min_abs(&case.sources.q1), "q2": min_abs(&case.sources.q2) },
    });
    Ok((summary, vec![sources, history], Vec::new()))
}

fn min_abs(f: &GridFn) -> f64 {
    f.values().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn run_sweep(c: &ExperimentConfig, seed: u64) -> Result<Parts> {
    let case = build_case(c, seed)?;
    let sw = &c.inverse.sweep;
    let spec = SweepSpec {
        deltas: sw.deltas.clone(),
        seeds: sw.seeds.clone().unwrap_or_else(|| (0..3).map(|i| seed.wrapping_add(i)).collect()),
        beta_rule: sw.beta_rule,
    };
    let rep = stability_sweep(&case, &spec, &c.inverse.solver)?;
    let mut table = Table::new("sweep", &["delta", "seed", "err_f", "err_g", "err_total", "beta", "converged"], true);
    for r in &rep.rows {
        table.push(vec![
            r.delta.into(),
            r.seed.into(),
            r.err_f.into(),
            r.err_g.into(),
            r.err_total.into(),
            r.beta.into(),
            r.converged.into(),
        ]);
    }
    let slope = match &rep.fit {
        Some(f) => json!({ "slope": f.slope, "intercept": f.intercept, "r2": f.r2, "seeds": f.seeds }),
        None => json!({ "slope": null, "intercept": null, "r2": null, "seeds": spec.seeds }),
    };
    let summary = json!({
        "fit": rep.fit,
        "excluded": rep.excluded,
        "iterations": rep.rows.iter().map(|r| r.iterations).collect::<Vec<_>>(),
    });
    Ok((summary, vec![table], vec![("slope.json".into(), slope)]))
}

fn epsilons(grid: &GridSpec, fractions: &[f64]) -> Vec<f64> {
    fractions.iter().map(|f| f * grid.t_final).collect()
}

fn ensemble_pairs(c: &ExperimentConfig, seed: u64, grid: &Arc<Grid>, members: usize) -> Result<Vec<(GridFn, GridFn)>> {
    let spec = EnsembleSpec { members, ..c.ensemble.clone() };
    Ok(generate_ensemble(seed, &spec, grid)?.members.into_iter().map(|m| (m.u, m.v)).collect())
}

fn linear_state(c: &ExperimentConfig, seed: u64, spec: &GridSpec) -> Result<CEpsReport> {
    let grid = build_grid(spec)?;
    let coeffs: CoeffSet = c.coefficients.sample(&grid)?;
    let members = ensemble_pairs(c, seed, &grid, c.ensemble.members)?;
    interior_stability_experiment(&members, &coeffs, &epsilons(spec, &c.state.epsilon_fractions))
}

fn nonlinear_state(c: &ExperimentConfig, seed: u64, spec: &GridSpec) -> Result<CEpsReport> {
    let grid = build_grid(spec)?;
    let nl = c.nonlinear.spec().sample(&grid)?;
    let members = ensemble_pairs(c, seed, &grid, 2 * c.ensemble.members)?;
    let pairs = members
        .chunks_exact(2)
        .map(|w| nonlinear_pair((&w[0].0, &w[0].1), (&w[1].0, &w[1].1), c.nonlinear.scale, &nl))
        .collect::<Result<Vec<_>>>()?;
    nonlinear_difference_experiment(&pairs, &epsilons(spec, &c.nonlinear.epsilon_fractions))
}

fn ceps_parts(coarse: CEpsReport, fine: Option<CEpsReport>) -> Result<Parts> {
    let rep = match &fine {
        Some(f) => coarse.with_drift(f)?,
        None => coarse,
    };
    let mut rows = Table::new("ceps", &["epsilon", "member", "lhs", "rhs", "ratio"], false);
    for r in &rep.rows {
        rows.push(vec![r.epsilon.into(), r.member.into(), r.lhs.into(), r.rhs.into(), r.ratio.into()]);
    }
    let mut curve = Table::new("ceps_curve", &["epsilon", "c_eps", "c_eps_fine", "finite", "excluded"], true);
    for (i, p) in rep.curve.iter().enumerate() {
        let fine_c = fine.as_ref().and_then(|f| f.curve[i].c_eps);
        curve.push(vec![p.epsilon.into(), p.c_eps.into(), fine_c.into(), p.finite.into(), p.excluded.into()]);
    }
    let mut rhs = Table::new(
        "ceps_rhs",
        &["member", "forcing_u", "forcing_v", "trace_u", "grad_u", "trace_v", "grad_v", "total"],
        false,
    );
    for (m, b) in rep.rhs.iter().enumerate() {
        rhs.push(vec![
            m.into(),
            b.forcing_u.into(),
            b.forcing_v.into(),
            b.trace_u.into(),
            b.grad_u.into(),
            b.trace_v.into(),
            b.grad_v.into(),
            b.total().into(),
        ]);
    }
    let summary = json!({
        "curve": rep.curve,
        "monotone": rep.monotone,
        "all_finite": rep.all_finite(),
        "drift": rep.drift,
        "max_drift": rep.max_drift(),
        "m1": rep.m1,
        "m2": rep.m2,
    });
    Ok((summary, vec![rows, curve, rhs], Vec::new()))
}

fn state_det(c: &ExperimentConfig, seed: u64) -> Result<Parts> {
    let coarse = linear_state(c, seed, &c.grid)?;
    let fine = c.state.refine.then(|| linear_state(c, seed, &c.grid.refined())).transpose()?;
    ceps_parts(coarse, fine)
}

fn nonlinear_diff(c: &ExperimentConfig, seed: u64) -> Result<Parts> {
    let coarse = nonlinear_state(c, seed, &c.grid)?;
    let fine = c.nonlinear.refine.then(|| nonlinear_state(c, seed, &c.grid.refined())).transpose()?;
    ceps_parts(coarse, fine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolved(src: &str) -> Result<ResolvedConfig> {
        ExperimentConfig::from_toml(src)?.resolve(&Overrides::default())
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ExperimentConfig::from_toml("seed = 1\nbogus = 2\n[grid]\nnxx = [9]\n").unwrap_err();
        let Error::Config(list) = err else { panic!("{err}") };
        assert_eq!(list.len(), 2, "{list:?}");
        assert!(list.iter().any(|m| m.starts_with("bogus")));
        assert!(list.iter().any(|m| m.starts_with("grid.nxx")));
    }

    #[test]
    fn every_invalid_key_is_reported() {
        let err = resolved("experiment = \"state-det\"\n[grid]\nnt = 64\n[state]\nepsilon_fractions = [0.7]\n")
            .unwrap_err();
        let Error::Config(list) = err else { panic!("{err}") };
        assert!(list.iter().any(|m| m.starts_with("seed")), "{list:?}");
        assert!(list.iter().any(|m| m.starts_with("grid.nt")), "{list:?}");
        assert!(list.iter().any(|m| m.starts_with("state.epsilon_fractions")), "{list:?}");
    }

    #[test]
    fn resolution_fills_defaults_and_overrides() {
        let ov = Overrides { experiment: Some(Experiment::StabilitySweep), seed: Some(9), out_dir: None };
        let rc = ExperimentConfig::default().resolve(&ov).unwrap();
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.out_dir, PathBuf::from("out/stability-sweep"));
        assert_eq!(rc.config.inverse.sweep.seeds, Some(vec![9, 10, 11]));
        assert!(rc.config.coefficients.a.principal.is_some());
        let echo = serde_json::to_value(&rc.config).unwrap();
        assert_eq!(echo["grid"]["nt"], json!(65));
        assert_eq!(echo["inverse"]["solver"]["w_gamma"], json!(10.0));
    }

    #[test]
    fn conflicting_experiment_is_rejected() {
        let ov = Overrides { experiment: Some(Experiment::Lemma3), ..Overrides::default() };
        let cfg = ExperimentConfig::from_toml("experiment = \"reconstruct\"\nseed = 1\n").unwrap();
        assert!(matches!(cfg.resolve(&ov), Err(Error::Config(_))));
    }

    #[test]
    fn numbers_render_shortest_round_trip() {
        let mut t = Table::new("t", &["a", "b", "c"], true);
        t.push(vec![0.1.into(), 1e-10.into(), Cell::Missing]);
        assert_eq!(t.to_csv(), "a,b,c\n0.1,1e-10,\n");
        assert_eq!(t.to_dat(), "# a b c\n0.1 1e-10 nan\n");
    }

    #[test]
    fn content_hash_ignores_order() {
        let a = vec![("x".to_string(), b"1".to_vec()), ("y".to_string(), b"2".to_vec())];
        let b = vec![a[1].clone(), a[0].clone()];
        assert_eq!(content_hash(&a), content_hash(&b));
        // `git hash-object` of an empty blob, computed with SHA-256.
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
            assert_eq!(serde_json::to_value(e).unwrap(), json!(e.name()));
        }
    }
}
