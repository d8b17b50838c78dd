//! Batch runner behind the `sparse-dominator` binary.
//!
//! One TOML file describes a run. Every random quantity derives from
//! `experiment.seed` through [`ChaCha8Rng::seed_from_u64`], so a config file
//! and the binary version determine every output byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::domination::{global_dominate, replay_certificate, DominationCertificate, DominationOptions, DEFAULT_MAX_DEPTH};
use crate::function::GridFunction;
use crate::grid::{Cube, Lattice, MAX_LEVEL};
use crate::operator::{dini_norm, maximal_compare, CubeFamily, KernelSpec, Modulus, BUILTIN_KERNELS};
use crate::sparse::{apply_sparse_on, three_grid_decompose, verify_sparse};
use crate::weights::{check_alpha, weights_sweep, SweepSpec};
use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Dominate,
    VerifyCertificate,
    MaximalCompare,
    WeightsSweep,
    GridDecompose,
    Selftest,
}

#[derive(Debug, Parser)]
#[command(name = "sparse-dominator", version, about = "Sparse domination experiments on dyadic lattices")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Command,
    /// Run description (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub function: FunctionSpec,
    #[serde(default)]
    pub maximal: MaximalSpec,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub kernel: String,
    #[serde(default = "one")]
    pub dimension: usize,
    pub level: u32,
    #[serde(default = "one_f")]
    pub r: f64,
    #[serde(default = "two")]
    pub rings: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "max_depth")]
    pub max_depth: usize,
}

/// `Q0` in physical units; `corner` has one entry per dimension.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub corner: Vec<f64>,
    pub side: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { corner: vec![0.0], side: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionKind {
    Indicator,
    Spike,
    RandomStep,
    Bump,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionSpec {
    pub kind: FunctionKind,
    /// Number of equal pieces per axis for `random-step`.
    #[serde(default = "eight")]
    pub pieces: usize,
    /// Spike location in units; defaults to the window centre.
    #[serde(default)]
    pub spike: Option<Vec<f64>>,
    #[serde(default = "one_f")]
    pub height: f64,
}

impl Default for FunctionSpec {
    fn default() -> Self {
        FunctionSpec { kind: FunctionKind::Indicator, pieces: 8, spike: None, height: 1.0 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaximalSpec {
    #[serde(default)]
    pub levels: Vec<u32>,
    #[serde(default = "one")]
    pub functions: usize,
    /// The comparison region is `region_factor · Q0`.
    #[serde(default = "three")]
    pub region_factor: i64,
    #[serde(default = "spread")]
    pub max_spread: f64,
}

impl Default for MaximalSpec {
    fn default() -> Self {
        MaximalSpec { levels: Vec::new(), functions: 1, region_factor: 3, max_spread: spread() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "two_f")]
    pub p: f64,
    #[serde(default = "one_f")]
    pub r: f64,
    #[serde(default = "alphas")]
    pub alphas: Vec<f64>,
    /// Singularity of the power weights, in units; defaults to the window centre.
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    #[serde(default = "rounds")]
    pub rounds: usize,
    /// The weights live on `window_factor · Q0`.
    #[serde(default = "nine")]
    pub window_factor: i64,
    /// Rings of the domination run that produces the family.
    #[serde(default)]
    pub rings: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { p: 2.0, r: 1.0, alphas: alphas(), center: None, rounds: rounds(), window_factor: 9, rings: 0 }
    }
}

/// Paths are resolved against the config file's directory.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    pub certificate: Option<PathBuf>,
    pub function: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> i64 {
    3
}
fn nine() -> i64 {
    9
}
fn eight() -> usize {
    8
}
fn one_f() -> f64 {
    1.0
}
fn two_f() -> f64 {
    2.0
}
fn spread() -> f64 {
    1.2
}
fn rounds() -> usize {
    8
}
fn max_depth() -> usize {
    DEFAULT_MAX_DEPTH
}
fn alphas() -> Vec<f64> {
    vec![-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9]
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            config_err(&field, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if !BUILTIN_KERNELS.contains(&e.kernel.as_str()) {
            return Err(config_err("experiment.kernel", format!("'{}' is not one of {BUILTIN_KERNELS:?}", e.kernel)));
        }
        if !(1..=2).contains(&e.dimension) {
            return Err(config_err("experiment.dimension", "must be 1 or 2"));
        }
        KernelSpec::by_name(&e.kernel, e.dimension).map_err(|err| config_err("experiment.kernel", err.to_string()))?;
        if e.level == 0 || e.level > MAX_LEVEL {
            return Err(config_err("experiment.level", format!("must lie in 1..={MAX_LEVEL}")));
        }
        if !(e.r >= 1.0 && e.r.is_finite()) {
            return Err(config_err("experiment.r", format!("must be a finite number >= 1, got {}", e.r)));
        }
        if e.max_depth == 0 {
            return Err(config_err("experiment.max_depth", "must be positive"));
        }
        if self.window.corner.len() != e.dimension {
            return Err(config_err("window.corner", "needs one coordinate per dimension"));
        }
        self.q0_at(e.level).map_err(|err| config_err("window", err.to_string()))?;
        let f = &self.function;
        if f.pieces == 0 {
            return Err(config_err("function.pieces", "must be positive"));
        }
        if !(f.height.is_finite() && f.height >= 0.0) {
            return Err(config_err("function.height", "must be finite and nonnegative"));
        }
        if let Some(s) = &f.spike {
            if s.len() != e.dimension {
                return Err(config_err("function.spike", "needs one coordinate per dimension"));
            }
        }
        let m = &self.maximal;
        if m.levels.iter().any(|&l| l == 0 || l > MAX_LEVEL) {
            return Err(config_err("maximal.levels", format!("levels must lie in 1..={MAX_LEVEL}")));
        }
        if m.functions == 0 {
            return Err(config_err("maximal.functions", "must be positive"));
        }
        if m.region_factor < 1 || m.region_factor % 2 == 0 {
            return Err(config_err("maximal.region_factor", "must be an odd positive integer"));
        }
        let s = &self.sweep;
        if !(s.r >= 1.0 && s.p > s.r && s.p.is_finite()) {
            return Err(config_err("sweep.p", format!("need 1 <= r < p, got p = {}, r = {}", s.p, s.r)));
        }
        if s.alphas.is_empty() {
            return Err(config_err("sweep.alphas", "must not be empty"));
        }
        for &a in &s.alphas {
            check_alpha(a, s.p).map_err(|err| config_err("sweep.alphas", err.to_string()))?;
        }
        if s.window_factor < 1 || s.window_factor % 2 == 0 {
            return Err(config_err("sweep.window_factor", "must be an odd positive integer"));
        }
        if s.center.as_ref().is_some_and(|c| c.len() != e.dimension) {
            return Err(config_err("sweep.center", "needs one coordinate per dimension"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        KernelSpec::by_name(&self.experiment.kernel, self.experiment.dimension)
    }

    pub fn q0_at(&self, level: u32) -> Result<Cube> {
        let lattice = Lattice::new(self.experiment.dimension, level)?;
        Cube::from_units(lattice, &self.window.corner, self.window.side)
    }

    pub fn q0(&self) -> Result<Cube> {
        self.q0_at(self.experiment.level)
    }

    pub fn options(&self) -> DominationOptions {
        DominationOptions { r: self.experiment.r, max_depth: self.experiment.max_depth }
    }

    /// The `index`-th test function on `q0`; `random-step` uses seed `experiment.seed + index`.
    pub fn test_function(&self, q0: &Cube, index: usize) -> GridFunction {
        let spec = &self.function;
        let seed = self.experiment.seed.wrapping_add(index as u64);
        test_function(spec, q0, seed)
    }

    fn center_units(&self) -> [f64; 2] {
        let mut c = [0.0; 2];
        for (i, v) in self.window.corner.iter().enumerate() {
            c[i] = v + self.window.side / 2.0;
        }
        c
    }
}

/// Builds a named test function on `q0`.
///
/// `random-step` draws `pieces^n` values uniformly from `[0, 1)` with
/// `ChaCha8Rng::seed_from_u64(seed)`, in row-major piece order, and scales
/// them by `height`.
pub fn test_function(spec: &FunctionSpec, q0: &Cube, seed: u64) -> GridFunction {
    let dim = q0.dim();
    let lo = [q0.corner[0] as f64, q0.corner[1] as f64].map(|c| c * q0.lattice.cell_size());
    let side = q0.side as f64 * q0.lattice.cell_size();
    let rel = move |x: [f64; 2], i: usize| (x[i] - lo[i]) / side;
    match spec.kind {
        FunctionKind::Indicator => GridFunction::from_fn(*q0, |_| spec.height),
        FunctionKind::RandomStep => {
            let k = spec.pieces;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..k.pow(dim as u32)).map(|_| rng.gen_range(0.0..1.0) * spec.height).collect();
            GridFunction::from_fn(*q0, |x| {
                let piece = |i: usize| ((rel(x, i) * k as f64) as usize).min(k - 1);
                let j = if dim == 2 { piece(1) * k + piece(0) } else { piece(0) };
                values[j]
            })
        }
        FunctionKind::Spike => {
            let at = match &spec.spike {
                Some(p) => {
                    let mut c = [0.0; 2];
                    c[..p.len()].copy_from_slice(p);
                    c
                }
                None => q0.center(),
            };
            let h = q0.lattice.cell_size();
            let hit = |x: [f64; 2]| (0..dim).all(|i| (x[i] / h).floor() == (at[i] / h).floor());
            GridFunction::from_fn(*q0, |x| if hit(x) { spec.height } else { 0.0 })
        }
        FunctionKind::Bump => GridFunction::from_fn(*q0, |x| {
            let s: f64 = (0..dim).map(|i| (2.0 * rel(x, i) - 1.0).powi(2)).sum();
            if s < 1.0 {
                spec.height * (1.0 - 1.0 / (1.0 - s)).exp()
            } else {
                0.0
            }
        }),
    }
}

/// What a subcommand concluded; errors are reported separately.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Pass,
    Fail(String),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Pass => 0,
            Outcome::Fail(_) => 1,
        }
    }
}

/// Exit code of a finished run: 0 pass, 1 verification failure, 2 config or parse error.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) => o.exit_code(),
        Err(_) => 2,
    }
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run(args: &Args) -> Result<Outcome> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = match (&args.out, &cfg.output.dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => base.join("out"),
    };
    if args.command != Command::VerifyCertificate {
        fs::create_dir_all(&out)?;
    }
    match args.command {
        Command::Dominate => cmd_dominate(&cfg, &out),
        Command::VerifyCertificate => cmd_verify_certificate(&cfg, &base),
        Command::MaximalCompare => cmd_maximal_compare(&cfg, &out),
        Command::WeightsSweep => cmd_weights_sweep(&cfg, &out),
        Command::GridDecompose => cmd_grid_decompose(&cfg, &out),
        Command::Selftest => cmd_selftest(&cfg, &out),
    }
}

fn ratio(c_emp: f64, c_t: f64) -> f64 {
    if c_emp == 0.0 {
        0.0
    } else {
        c_emp / c_t
    }
}

/// Writes `family.txt`, `certificate.ron`, `function.txt` and `summary.csv`.
pub fn cmd_dominate(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let kernel = cfg.kernel()?;
    let f = cfg.test_function(&cfg.q0()?, 0);
    let g = global_dominate(&kernel, &f, cfg.experiment.rings, &cfg.options())?;
    let replay = replay_certificate(&g.certificate, &kernel, &f);
    write_atomic(&out.join("family.txt"), &g.family.to_text())?;
    write_atomic(&out.join("certificate.ron"), &g.certificate.to_ron()?)?;
    write_atomic(&out.join("function.txt"), &f.to_text())?;
    let c_t = g.certificate.constants.c_t;
    let summary = format!(
        "cells,C_emp,C_T,ratio,depth,family_size\n{},{:?},{:?},{:?},{},{}\n",
        g.check.cells,
        g.c_emp,
        c_t,
        ratio(g.c_emp, c_t),
        g.certificate.depth(),
        g.family.len()
    );
    write_atomic(&out.join("summary.csv"), &summary)?;
    if let Some(v) = replay.violations.first() {
        return Ok(Outcome::Fail(format!("certificate node {} fails {}: {} vs {}", v.path, v.check, v.lhs, v.rhs)));
    }
    if !g.check.holds {
        return Ok(Outcome::Fail(format!("pointwise domination fails, worst ratio {}", g.check.worst_ratio)));
    }
    Ok(Outcome::Pass)
}

/// Replays `verify.certificate` against `verify.function`.
pub fn cmd_verify_certificate(cfg: &ExperimentConfig, base: &Path) -> Result<Outcome> {
    let path = |p: &Option<PathBuf>, field: &str| {
        p.as_ref().map(|p| base.join(p)).ok_or_else(|| config_err(field, "path required"))
    };
    let cert_path = path(&cfg.verify.certificate, "verify.certificate")?;
    let f_path = path(&cfg.verify.function, "verify.function")?;
    let cert = DominationCertificate::from_ron(&fs::read_to_string(&cert_path)?)?;
    let f = GridFunction::from_text(&fs::read_to_string(&f_path)?)?;
    let kernel = KernelSpec::by_name(&cert.kernel, cert.lattice.dim)?;
    let report = replay_certificate(&cert, &kernel, &f);
    match report.violations.first() {
        None => {
            println!("ok: {} nodes replayed", report.nodes);
            Ok(Outcome::Pass)
        }
        Some(v) => {
            let msg = format!("violation at node {}: {} ({} vs {})", v.path, v.check, v.lhs, v.rhs);
            println!("{msg}");
            Ok(Outcome::Fail(msg))
        }
    }
}

/// Per-cell comparison for the first function at the finest level, plus one
/// summary row per level with the largest residual `κ` over all functions.
pub fn cmd_maximal_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let kernel = cfg.kernel()?;
    let mut levels = cfg.maximal.levels.clone();
    if levels.is_empty() {
        levels.push(cfg.experiment.level);
    }
    let finest = *levels.iter().max().expect("nonempty");
    let mut summary = String::from("level,functions,kappa\n");
    let mut kappas = Vec::new();
    for &level in &levels {
        let q0 = cfg.q0_at(level)?;
        let region = q0.dilate(cfg.maximal.region_factor);
        let mut kappa: f64 = 0.0;
        for i in 0..cfg.maximal.functions {
            let f = cfg.test_function(&q0, i);
            let cmp = maximal_compare(&kernel, &f, &region, CubeFamily::ShiftedDyadic)?;
            kappa = kappa.max(cmp.kappa);
            if i == 0 && level == finest {
                let two_d = q0.dim() == 2;
                let mut csv = String::from(if two_d { "cell_x,cell_y,x,y," } else { "cell,x," });
                csv.push_str("M_T,M,T_star,residual\n");
                for (j, cell) in region.cells().enumerate() {
                    let x = q0.lattice.center(cell);
                    if two_d {
                        let _ = write!(csv, "{},{},{:?},{:?},", cell[0], cell[1], x[0], x[1]);
                    } else {
                        let _ = write!(csv, "{},{:?},", cell[0], x[0]);
                    }
                    let _ = writeln!(csv, "{:?},{:?},{:?},{:?}", cmp.grand[j], cmp.hardy_littlewood[j], cmp.truncated[j], cmp.residual[j]);
                }
                write_atomic(&out.join("maximal.csv"), &csv)?;
            }
        }
        let _ = writeln!(summary, "{level},{},{kappa:?}", cfg.maximal.functions);
        kappas.push(kappa);
    }
    let hi = kappas.iter().copied().fold(0.0, f64::max);
    let lo = kappas.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = if hi == 0.0 { 1.0 } else { hi / lo };
    let _ = writeln!(summary, "max,,{hi:?}");
    write_atomic(&out.join("maximal_summary.csv"), &summary)?;
    if !hi.is_finite() {
        return Ok(Outcome::Fail("M_T > T* where M vanishes".into()));
    }
    if spread > cfg.maximal.max_spread {
        return Ok(Outcome::Fail(format!("kappa spread {spread} exceeds {}", cfg.maximal.max_spread)));
    }
    Ok(Outcome::Pass)
}

/// Power-weight sweep over the family produced by a `sweep.rings` run.
pub fn cmd_weights_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let kernel = cfg.kernel()?;
    let q0 = cfg.q0()?;
    let f = cfg.test_function(&q0, 0);
    let g = global_dominate(&kernel, &f, cfg.sweep.rings, &cfg.options())?;
    let s = &cfg.sweep;
    let center = match &s.center {
        Some(c) => {
            let mut v = [0.0; 2];
            v[..c.len()].copy_from_slice(c);
            v
        }
        None => cfg.center_units(),
    };
    let spec = SweepSpec {
        window: q0.dilate(s.window_factor),
        center,
        alphas: s.alphas.clone(),
        p: s.p,
        r: s.r,
        rounds: s.rounds,
        seed: cfg.experiment.seed,
    };
    let report = weights_sweep(&g.family, &spec)?;
    write_atomic(&out.join("sweep.csv"), &report.to_csv())?;
    if report.ok {
        Ok(Outcome::Pass)
    } else {
        Ok(Outcome::Fail(format!("slope {:?} against target {} or a diagnostic ratio above 1", report.slope, report.target)))
    }
}

/// Splits the dominating family across the shifted grids and checks
/// `A_S f ≤ c Σ_j A_{S_j} f` on the family hull.
pub fn cmd_grid_decompose(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let kernel = cfg.kernel()?;
    let q0 = cfg.q0()?;
    let f = cfg.test_function(&q0, 0);
    let r = cfg.experiment.r;
    let g = global_dominate(&kernel, &f, cfg.experiment.rings, &cfg.options())?;
    let d = three_grid_decompose(&g.family, r)?;
    let bound = 6f64.powf(q0.dim() as f64 / r);
    let window = g.family.hull().unwrap_or(q0);
    let f_abs = f.abs();
    let whole = apply_sparse_on(&g.family, &f_abs, r, &window)?;
    let mut sum = vec![0.0; whole.values().len()];
    let mut csv = String::from("grid,cubes,eta,sparse_ok\n");
    for (j, fam) in d.families.iter().enumerate() {
        let part = apply_sparse_on(fam, &f_abs, r, &window)?;
        for (s, v) in sum.iter_mut().zip(part.values()) {
            *s += v;
        }
        let _ = writeln!(csv, "{j},{},{},{}", fam.len(), fam.eta, verify_sparse(fam).ok);
        write_atomic(&out.join(format!("grid-{j}.txt")), &fam.to_text())?;
    }
    let holds = whole.values().iter().zip(&sum).all(|(&a, &b)| a <= d.constant * b * (1.0 + 1e-12));
    let _ = writeln!(csv, "constant,{:?},{bound:?},{holds}", d.constant);
    write_atomic(&out.join("decompose.csv"), &csv)?;
    if !holds {
        return Ok(Outcome::Fail("A_S f exceeds c times the sum over grids".into()));
    }
    if d.constant > bound * (1.0 + 1e-12) {
        return Ok(Outcome::Fail(format!("constant {} exceeds {bound}", d.constant)));
    }
    Ok(Outcome::Pass)
}

/// Quick end-to-end checks at `min(level, 8)`; writes `selftest.csv`.
pub fn cmd_selftest(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let mut rows: Vec<(&str, bool)> = Vec::new();
    rows.push(("dini_linear", dini_norm(&Modulus::Linear(1.0)).is_ok_and(|v| (v - 1.0).abs() < 1e-6)));
    rows.push(("dini_sqrt", dini_norm(&Modulus::Power { c: 1.0, exponent: 0.5 }).is_ok_and(|v| (v - 2.0).abs() < 1e-6)));
    rows.push(("dini_divergent", matches!(dini_norm(&Modulus::InverseLog(1.0)), Err(Error::DiniDivergence { .. }))));
    let level = cfg.experiment.level.min(8);
    let q0 = cfg.q0_at(level)?;
    let f = cfg.test_function(&q0, 0);
    let opts = cfg.options();
    for name in ["zero", "hilbert"] {
        let Ok(kernel) = KernelSpec::by_name(name, q0.dim()) else { continue };
        let g = global_dominate(&kernel, &f, 1, &opts)?;
        let replay = replay_certificate(&g.certificate, &kernel, &f);
        let sparse = verify_sparse(&g.family).ok && verify_sparse(&g.local_family).ok;
        rows.push((if name == "zero" { "dominate_zero" } else { "dominate_hilbert" }, g.check.holds && replay.ok && sparse));
    }
    let mut csv = String::from("check,ok\n");
    for (name, ok) in &rows {
        let _ = writeln!(csv, "{name},{ok}");
    }
    write_atomic(&out.join("selftest.csv"), &csv)?;
    match rows.iter().find(|(_, ok)| !ok) {
        Some((name, _)) => Ok(Outcome::Fail(format!("selftest check {name} failed"))),
        None => Ok(Outcome::Pass),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[experiment]\nkernel = \"hilbert\"\nlevel = 6\n";

    #[test]
    fn parse_defaults() {
        let cfg = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(cfg.experiment.rings, 2);
        assert_eq!(cfg.function.kind, FunctionKind::Indicator);
        assert_eq!(cfg.q0().unwrap().side, 64);
    }

    #[test]
    fn config_errors_name_the_field() {
        let field = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(&format!("{BASE}r = 0.0\n")), "experiment.r");
        assert_eq!(field("[experiment]\nkernel = \"riesz\"\nlevel = 6\n"), "experiment.kernel");
        assert_eq!(field(&format!("{BASE}[sweep]\nalphas = [1.5]\n")), "sweep.alphas");
        assert_eq!(field(&format!("{BASE}[window]\ncorner = [0.0, 0.0]\nside = 1.0\n")), "window.corner");
        assert!(field(&format!("{BASE}colour = 1\n")).contains("colour"));
    }

    #[test]
    fn random_step_is_seeded_piecewise_constant() {
        let cfg = ExperimentConfig::parse(&format!("{BASE}[function]\nkind = \"random-step\"\npieces = 4\n")).unwrap();
        let q0 = cfg.q0().unwrap();
        let a = cfg.test_function(&q0, 3);
        assert_eq!(a.values(), cfg.test_function(&q0, 3).values());
        assert_ne!(a.values(), cfg.test_function(&q0, 4).values());
        let mut distinct: Vec<f64> = a.values().to_vec();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        assert!(a.values().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn spike_hits_one_cell() {
        let cfg = ExperimentConfig::parse(&format!("{BASE}[function]\nkind = \"spike\"\nspike = [0.25]\nheight = 5.0\n")).unwrap();
        let f = cfg.test_function(&cfg.q0().unwrap(), 0);
        let hits: Vec<usize> = (0..f.values().len()).filter(|&i| f.values()[i] != 0.0).collect();
        assert_eq!(hits, vec![16]);
        assert_eq!(f.values()[16], 5.0);
    }

    #[test]
    fn bump_vanishes_at_the_edges() {
        let cfg = ExperimentConfig::parse(&format!("{BASE}[function]\nkind = \"bump\"\n")).unwrap();
        let f = cfg.test_function(&cfg.q0().unwrap(), 0);
        let v = f.values();
        assert!(v[0] < 1e-6 && v[63] < 1e-6);
        assert!((v[31] - v[32]).abs() < 1e-12 && v[32] > 0.99);
    }
}
