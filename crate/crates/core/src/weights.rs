//! Power weights, `A_p` characteristics, trial lower bounds for weighted norms
//! of sparse operators, and the per-cube testing-quantity chain.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::function::{GridFunction, PrefixSums};
use crate::grid::{shifted_grids, Cube, LatticeSet, MAX_GRID_SCALE};
use crate::sparse::{apply_sparse_on, SparseFamily};

/// Margin kept from the ends of the admissible power range `(-1, p - 1)`.
pub const ALPHA_MARGIN: f64 = 0.05;

/// Tolerance for floating evaluation of inequalities that hold exactly.
pub const CHAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct WeightProfile {
    pub w: GridFunction,
    pub p: f64,
    pub r: f64,
    /// `w^{-1/(p-1)}`
    pub sigma: GridFunction,
    /// `w^{-r/(p-r)}`
    pub nu: GridFunction,
}

impl WeightProfile {
    pub fn new(w: GridFunction, p: f64, r: f64) -> Result<Self> {
        if !(p > 1.0 && r >= 1.0 && r < p) {
            return Err(Error::Precondition(format!("need 1 <= r < p, got p = {p}, r = {r}")));
        }
        ensure_positive(&w)?;
        let sigma = w.map(|v| v.powf(-1.0 / (p - 1.0)));
        let nu = w.map(|v| v.powf(-r / (p - r)));
        Ok(WeightProfile { w, p, r, sigma, nu })
    }

    pub fn window(&self) -> &Cube {
        self.w.window()
    }

    /// `p / r`, the exponent of the relevant `A_p` class.
    pub fn s(&self) -> f64 {
        self.p / self.r
    }
}

fn ensure_positive(w: &GridFunction) -> Result<()> {
    match w.cells().find(|&(_, v)| !(v > 0.0 && v.is_finite())) {
        Some((cell, value)) => Err(Error::NonPositiveWeight { cell, value }),
        None => Ok(()),
    }
}

pub fn check_alpha(alpha: f64, p: f64) -> Result<()> {
    if alpha > -1.0 + ALPHA_MARGIN && alpha < p - 1.0 - ALPHA_MARGIN {
        Ok(())
    } else {
        Err(Error::Precondition(format!("alpha = {alpha} outside ({}, {})", -1.0 + ALPHA_MARGIN, p - 1.0 - ALPHA_MARGIN)))
    }
}

/// `|x - center|^alpha` at cell centres; `center` should be a lattice point.
pub fn power_weight(window: &Cube, alpha: f64, center: [f64; 2]) -> GridFunction {
    let dim = window.dim();
    GridFunction::from_fn(*window, |x| {
        let d: f64 = (0..dim).map(|i| (x[i] - center[i]).powi(2)).sum::<f64>().sqrt();
        d.powf(alpha)
    })
}

/// Per-cube `A_s` value `avg(w) · avg(w^{-1/(s-1)})^{s-1}` from prefix tables
/// of `w` and of `w^{-1/(s-1)}`.
struct ApTables {
    w: PrefixSums,
    dual: PrefixSums,
    s: f64,
}

impl ApTables {
    fn new(w: &GridFunction, s: f64) -> Self {
        ApTables { w: PrefixSums::of_function(w, |v| v), dual: PrefixSums::of_function(w, |v| v.powf(-1.0 / (s - 1.0))), s }
    }

    fn value(&self, q: &Cube) -> f64 {
        let n = q.cell_count() as f64;
        let b = q.as_box();
        (self.w.sum(&b) / n) * (self.dual.sum(&b) / n).powf(self.s - 1.0)
    }
}

/// Which cubes the `A_p` supremum runs over.
#[derive(Clone, Debug)]
pub enum ApFamily {
    /// Cubes of the `3^n` shifted dyadic grids inside the window.
    ShiftedDyadic,
    /// Every lattice cube inside the window; small windows only.
    Exhaustive,
    /// The shifted grids together with the given cubes.
    ShiftedWith(Vec<Cube>),
}

/// Shifted-grid cubes contained in `window`, coarse to fine.
pub fn grid_cubes_in(window: &Cube) -> Vec<Cube> {
    let lattice = window.lattice;
    let dim = window.dim();
    let b = window.as_box();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for g in shifted_grids(lattice) {
        for j in 0..=MAX_GRID_SCALE {
            let side = crate::grid::DyadicGrid::side_at(j);
            if side > window.side {
                break;
            }
            let ys: Vec<i64> = if dim == 2 { (b.lo[1]..b.hi[1]).step_by(side as usize).chain([b.hi[1] - 1]).collect() } else { vec![0] };
            for &y in &ys {
                for x in (b.lo[0]..b.hi[0]).step_by(side as usize).chain([b.hi[0] - 1]) {
                    let q = g.cube_containing([x, y], j);
                    if window.contains(&q) && seen.insert((q.corner, q.side)) {
                        out.push(q);
                    }
                }
            }
        }
    }
    out
}

fn all_cubes_in(window: &Cube) -> Vec<Cube> {
    let b = window.as_box();
    let dim = window.dim();
    let mut out = Vec::new();
    for side in 1..=window.side {
        let ys: Vec<i64> = if dim == 2 { (b.lo[1]..=b.hi[1] - side).collect() } else { vec![0] };
        for &y in &ys {
            for x in b.lo[0]..=b.hi[0] - side {
                out.push(Cube { lattice: window.lattice, corner: [x, y], side });
            }
        }
    }
    out
}

/// `[w]_{A_p}` over the chosen family.
pub fn ap_characteristic(w: &GridFunction, p: f64, family: &ApFamily) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::Precondition(format!("p = {p} <= 1")));
    }
    ensure_positive(w)?;
    let window = w.window();
    let mut cubes = match family {
        ApFamily::ShiftedDyadic | ApFamily::ShiftedWith(_) => grid_cubes_in(window),
        ApFamily::Exhaustive => {
            if window.cell_count() > 1 << 10 {
                return Err(Error::Precondition("exhaustive family limited to 1024 cells".into()));
            }
            all_cubes_in(window)
        }
    };
    if let ApFamily::ShiftedWith(extra) = family {
        for q in extra {
            if !window.contains(q) {
                return Err(Error::Precondition(format!("cube {q:?} leaves the weight window")));
            }
        }
        cubes.extend(extra.iter().copied());
    }
    cubes.push(Cube::cell(window.lattice, window.corner));
    let tables = ApTables::new(w, p);
    Ok(cubes.par_iter().map(|q| tables.value(q)).reduce(|| 0.0, f64::max))
}

fn weight_of(table: &PrefixSums, set: &LatticeSet, h: f64) -> f64 {
    set.runs()
        .iter()
        .map(|r| {
            let (lo, hi) = if set.lattice.dim == 1 { ([r.start, 0], [r.end, 1]) } else { ([r.start, r.row], [r.end, r.row + 1]) };
            table.sum(&crate::grid::LatticeBox { dim: set.lattice.dim, lo, hi })
        })
        .sum::<f64>()
        * h
}

/// Weighted measures needed for one cube of the chain.
struct CubeMeasures {
    q: f64,
    e: f64,
    w3: f64,
    we: f64,
    nu3: f64,
    nue: f64,
}

fn measures(profile: &WeightProfile, wt: &PrefixSums, nt: &PrefixSums, q: &Cube, witness: &LatticeSet) -> Result<CubeMeasures> {
    if witness.is_empty() {
        return Err(Error::EmptyWitness);
    }
    if !witness.is_subset_of_cube(q) {
        return Err(Error::Precondition("witness leaves its cube".into()));
    }
    let q3 = q.dilate(3);
    if !profile.window().contains(&q3) {
        return Err(Error::Precondition(format!("3Q of {q:?} leaves the weight window")));
    }
    let h = q.lattice.cell_measure();
    Ok(CubeMeasures {
        q: q.cell_count() as f64 * h,
        e: witness.len() as f64 * h,
        w3: wt.sum(&q3.as_box()) * h,
        we: weight_of(wt, witness, h),
        nu3: nt.sum(&q3.as_box()) * h,
        nue: weight_of(nt, witness, h),
    })
}

fn testing_from(m: &CubeMeasures, p: f64, r: f64) -> f64 {
    let pp = p / (p - 1.0);
    m.w3 / m.we.powf(1.0 / pp) * m.nu3.powf(1.0 / r) / m.nue.powf(1.0 / p) / m.q.powf(1.0 / r)
}

/// `T_{p,r}(w;Q) = w(3Q) w(E)^{-1/p'} ν(3Q)^{1/r} ν(E)^{-1/p} |Q|^{-1/r}`.
pub fn testing_quantity(profile: &WeightProfile, q: &Cube, witness: &LatticeSet) -> Result<f64> {
    let wt = PrefixSums::of_function(&profile.w, |v| v);
    let nt = PrefixSums::of_function(&profile.nu, |v| v);
    let m = measures(profile, &wt, &nt, q, witness)?;
    Ok(testing_from(&m, profile.p, profile.r))
}

/// Best ratio found and the trial attaining it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub trial: String,
}

fn ratio(family: &SparseFamily, profile: &WeightProfile, f: &GridFunction) -> Result<f64> {
    let den = f.lp_norm(profile.p, Some(&profile.w))?;
    if den == 0.0 {
        return Ok(0.0);
    }
    let af = apply_sparse_on(family, f, profile.r, profile.window())?;
    Ok(af.lp_norm(profile.p, Some(&profile.w))? / den)
}

/// Nonnegative trial functions on the weight window: indicators, dual-weight
/// profiles on the family cubes, and power profiles on balls around `center`.
pub fn trial_functions(family: &SparseFamily, profile: &WeightProfile, center: [f64; 2]) -> Vec<(String, GridFunction)> {
    let window = *profile.window();
    let dim = window.dim();
    let mut out = vec![("one".to_string(), GridFunction::from_fn(window, |_| 1.0))];
    let nu_r = profile.nu.map(|v| v.powf(1.0 / profile.r));
    let restrict = |g: &GridFunction, q: &Cube| {
        let mut h = GridFunction::zeros(window);
        for (i, (c, v)) in g.cells().enumerate() {
            if q.contains_cell(c) {
                h.values_mut()[i] = v;
            }
        }
        h
    };
    let mut cubes: Vec<Cube> = family.cubes().filter(|q| window.contains(q)).copied().collect();
    cubes.sort_by_key(|q| (q.side, q.corner));
    cubes.dedup();
    for q in &cubes {
        let tag = format!("{:?}+{}", &q.corner[..dim], q.side);
        out.push((format!("chi {tag}"), restrict(&GridFunction::from_fn(window, |_| 1.0), q)));
        out.push((format!("sigma {tag}"), restrict(&profile.sigma, q)));
        out.push((format!("nu {tag}"), restrict(&nu_r, q)));
    }
    let lat = window.lattice;
    let n = lat.cells_per_unit() as f64;
    for k in 0..=20 {
        let radius = (1i64 << k) as f64 / n;
        if radius > window.side as f64 / n {
            break;
        }
        for beta in [-0.4, 0.0, 0.4] {
            let g = GridFunction::from_fn(window, |x| {
                let d: f64 = (0..dim).map(|i| (x[i] - center[i]).powi(2)).sum::<f64>().sqrt();
                if d < radius {
                    d.powf(beta)
                } else {
                    0.0
                }
            });
            if g.values().iter().any(|&v| v > 0.0) {
                out.push((format!("ball r={radius} beta={beta}"), g.clone()));
                let sg: Vec<f64> = g.values().iter().zip(profile.sigma.values()).map(|(a, b)| a * b).collect();
                out.push((format!("sigma-ball r={radius} beta={beta}"), GridFunction::new(window, sg).unwrap()));
            }
        }
    }
    out
}

/// Lower bound for `‖A_{r,S}‖_{L^p(w)}`: the best trial ratio, refined by
/// `rounds` seeded multiplicative perturbations of the leader.
pub fn sparse_weighted_norm(family: &SparseFamily, profile: &WeightProfile, center: [f64; 2], rounds: usize, seed: u64) -> Result<NormEstimate> {
    if family.is_empty() {
        return Ok(NormEstimate { value: 0.0, trial: "empty family".into() });
    }
    let trials = trial_functions(family, profile, center);
    let scored: Vec<(f64, usize)> =
        trials.par_iter().enumerate().map(|(i, (_, f))| ratio(family, profile, f).map(|v| (v, i))).collect::<Result<_>>()?;
    let (mut best, idx) = scored.into_iter().fold((0.0, 0), |a, b| if b.0 > a.0 { b } else { a });
    let mut leader = trials[idx].1.clone();
    let mut name = trials[idx].0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..rounds {
        let cand = GridFunction::new(*leader.window(), leader.values().iter().map(|v| v * (1.0 + rng.gen_range(-0.5..0.5))).collect())?;
        let v = ratio(family, profile, &cand)?;
        if v > best {
            best = v;
            leader = cand;
            name = format!("{} (perturbed {})", trials[idx].0, k + 1);
        }
    }
    Ok(NormEstimate { value: best, trial: name })
}

/// `max Σ_Q (avg_Q f^r)^{1/r} ∫_Q g / (‖f‖_{L^p(w)} ‖g‖_{L^{p'}(σ)})` over the
/// trial set, pairing each `f` with the extremal `g = (A f)^{p-1} w` and with
/// every other trial used as `g`.
pub fn bilinear_lower_bound(family: &SparseFamily, profile: &WeightProfile, trials: &[GridFunction]) -> Result<f64> {
    let p = profile.p;
    let pp = p / (p - 1.0);
    let window = *profile.window();
    let h = window.lattice.cell_measure();
    let form = |f: &GridFunction, g: &GridFunction| -> f64 {
        let fr = PrefixSums::of_function(f, |v| v.powf(profile.r));
        let gt = PrefixSums::of_function(g, |v| v);
        family
            .entries
            .iter()
            .map(|e| {
                let b = e.cube.as_box();
                (fr.sum(&b) / e.cube.cell_count() as f64).powf(1.0 / profile.r) * gt.sum(&b) * h
            })
            .sum()
    };
    let mut duals = Vec::with_capacity(trials.len());
    for f in trials {
        let af = apply_sparse_on(family, f, profile.r, &window)?;
        let g = GridFunction::new(window, af.values().iter().zip(profile.w.values()).map(|(a, w)| a.powf(p - 1.0) * w).collect())?;
        duals.push(g);
    }
    let gs: Vec<&GridFunction> = duals.iter().chain(trials.iter()).collect();
    let mut best: f64 = 0.0;
    for f in trials {
        let nf = f.lp_norm(p, Some(&profile.w))?;
        if nf == 0.0 {
            continue;
        }
        for g in &gs {
            let ng = g.lp_norm(pp, Some(&profile.sigma))?;
            if ng > 0.0 {
                best = best.max(form(f, g) / (nf * ng));
            }
        }
    }
    Ok(best)
}

/// The per-cube chain for one cube; every ratio is `lhs / rhs` of an
/// inequality that holds exactly, so each is at most 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeDiagnostic {
    pub cube: Cube,
    /// `|E|^s / (w(E) ν(E)^{s-1})`
    pub holder: f64,
    /// `η |Q| / |E|`
    pub sparse: f64,
    /// `avg_{3Q} w · avg_{3Q} ν^{s-1} / [w]_{A_s}`
    pub ap: f64,
    /// `w(3Q)/w(E) (ν(3Q)/ν(E))^{s-1} / ((3^n/η)^s [w]_{A_s})`
    pub chain: f64,
    /// `T_{p,r}(w;Q) / (c [w]_{A_s}^{max(1, 1/(p-r))})`
    pub testing: f64,
    pub testing_value: f64,
}

/// Replays the testing-quantity bound cube by cube. The step through the
/// centred weighted maximal operator is not replayed numerically.
#[derive(Clone, Debug, PartialEq)]
pub struct AppendixReport {
    /// `[w]_{A_{p/r}}` over the shifted grids and every `3Q`.
    pub ap_char: f64,
    /// `max(1/p', r/(p(p-r)))`
    pub m: f64,
    /// `max(1, 1/(p-r))`
    pub exponent: f64,
    /// `3^{n/r} (3^n/η)^{pm/r}`
    pub constant: f64,
    pub sup_testing: f64,
    pub bound: f64,
    /// Largest per-cube ratio over all steps.
    pub ratio: f64,
    pub ok: bool,
    pub cubes: Vec<CubeDiagnostic>,
}

pub fn appendix_diagnostic(family: &SparseFamily, profile: &WeightProfile) -> Result<AppendixReport> {
    let (p, r) = (profile.p, profile.r);
    let s = profile.s();
    let n = family.lattice.dim as f64;
    let eta = *family.eta.numer() as f64 / *family.eta.denom() as f64;
    let triples: Vec<Cube> = family.cubes().map(|q| q.dilate(3)).collect();
    let ap_char = ap_characteristic(&profile.w, s, &ApFamily::ShiftedWith(triples))?;
    let m = (1.0 - 1.0 / p).max(r / (p * (p - r)));
    let exponent = (1.0f64).max(1.0 / (p - r));
    let constant = 3f64.powf(n / r) * (3f64.powf(n) / eta).powf(p * m / r);
    let bound = constant * ap_char.powf(exponent);
    let tables = ApTables::new(&profile.w, s);
    let wt = PrefixSums::of_function(&profile.w, |v| v);
    let nt = PrefixSums::of_function(&profile.nu, |v| v);
    let num = *family.eta.numer() as i128;
    let den = *family.eta.denom() as i128;
    let cubes: Vec<CubeDiagnostic> = family
        .entries
        .par_iter()
        .map(|e| {
            let mm = measures(profile, &wt, &nt, &e.cube, &e.witness)?;
            if (e.witness.len() as i128) * den < num * e.cube.cell_count() as i128 {
                return Err(Error::Precondition(format!("witness of {:?} is below eta", e.cube)));
            }
            let holder = mm.e.powf(s) / (mm.we * mm.nue.powf(s - 1.0));
            let sparse = eta * mm.q / mm.e;
            let ap = tables.value(&e.cube.dilate(3)) / ap_char;
            let x = mm.w3 / mm.we * (mm.nu3 / mm.nue).powf(s - 1.0);
            let chain = x / ((3f64.powf(n) / eta).powf(s) * ap_char);
            let t = testing_from(&mm, p, r);
            Ok(CubeDiagnostic { cube: e.cube, holder, sparse, ap, chain, testing: t / bound, testing_value: t })
        })
        .collect::<Result<_>>()?;
    let sup_testing = cubes.iter().map(|c| c.testing_value).fold(0.0, f64::max);
    let ratio = cubes.iter().map(|c| c.holder.max(c.sparse).max(c.ap).max(c.chain).max(c.testing)).fold(0.0, f64::max);
    Ok(AppendixReport { ap_char, m, exponent, constant, sup_testing, bound, ratio, ok: ratio <= 1.0 + CHAIN_SLACK, cubes })
}

/// Least-squares slope of `y` against `x`; `None` with fewer than two distinct `x`.
pub fn lsq_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub p: f64,
    pub r: f64,
    pub ap_char: f64,
    pub norm_lb: f64,
    /// Secant slope of `log norm_lb` against `log ap_char` to the previous row.
    pub slope_window: Option<f64>,
    pub diagnostic_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
    /// `max(1, 1/(p-r))`
    pub target: f64,
    pub ok: bool,
}

pub const SLOPE_TOLERANCE: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub window: Cube,
    pub center: [f64; 2],
    pub alphas: Vec<f64>,
    pub p: f64,
    pub r: f64,
    pub rounds: usize,
    pub seed: u64,
}

/// Power-weight sweep: for each `alpha`, `[w]_{A_{p/r}}`, the trial lower
/// bound, and the appendix ratio; then the fitted log-log slope.
pub fn weights_sweep(family: &SparseFamily, spec: &SweepSpec) -> Result<SweepReport> {
    for &a in &spec.alphas {
        check_alpha(a, spec.p)?;
    }
    let mut rows = Vec::with_capacity(spec.alphas.len());
    for &alpha in &spec.alphas {
        let w = power_weight(&spec.window, alpha, spec.center);
        let profile = WeightProfile::new(w, spec.p, spec.r)?;
        let diag = appendix_diagnostic(family, &profile)?;
        let norm = sparse_weighted_norm(family, &profile, spec.center, spec.rounds, spec.seed)?;
        rows.push(SweepRow {
            alpha,
            p: spec.p,
            r: spec.r,
            ap_char: diag.ap_char,
            norm_lb: norm.value,
            slope_window: None,
            diagnostic_ratio: diag.ratio,
        });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].ap_char.total_cmp(&rows[b].ap_char));
    for k in 1..order.len() {
        let (a, b) = (&rows[order[k - 1]], &rows[order[k]]);
        let dx = b.ap_char.ln() - a.ap_char.ln();
        if dx > 1e-12 {
            rows[order[k]].slope_window = Some((b.norm_lb.ln() - a.norm_lb.ln()) / dx);
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.ap_char.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.norm_lb.ln()).collect();
    let slope = lsq_slope(&xs, &ys);
    let target = (1.0f64).max(1.0 / (spec.p - spec.r));
    let ok = slope.is_none_or(|s| s <= target + SLOPE_TOLERANCE) && rows.iter().all(|r| r.diagnostic_ratio <= 1.0 + CHAIN_SLACK);
    Ok(SweepReport { rows, slope, target, ok })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,p,r,ap_char,norm_lb,slope_window,diagnostic_ratio\n");
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:?}"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:?},{:?},{:?},{:?},{:?},{},{:?}\n",
                r.alpha,
                r.p,
                r.r,
                r.ap_char,
                r.norm_lb,
                opt(r.slope_window),
                r.diagnostic_ratio
            ));
        }
        let worst = self.rows.iter().map(|r| r.diagnostic_ratio).fold(0.0, f64::max);
        let (p, r) = self.rows.first().map_or((f64::NAN, f64::NAN), |x| (x.p, x.r));
        s.push_str(&format!("fit,{p:?},{r:?},,,{},{worst:?}\n", opt(self.slope)));
        s
    }
}
