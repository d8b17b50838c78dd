//! Calderón–Zygmund kernels and the maximal operators built from them.
//!
//! A kernel is evaluated at cell centers; the diagonal cell is dropped
//! (principal-value convention), so `T(f χ_E)(x)` is the finite sum
//! `Σ_{y ∈ E, y ≠ x} K(x, y) f(y) h^n`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::{GridFunction, PrefixSums};
use crate::grid::{shifted_grids, Cube, Lattice, LatticeBox, LatticeSet, MAX_GRID_SCALE};

/// `1 / log^2(e / t)`, the model Dini-but-not-Lipschitz modulus.
pub fn log_squared(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else {
        let l = 1.0 - t.ln();
        1.0 / (l * l)
    }
}

/// Tangency point `t0` of the least concave majorant of `log_squared`
/// capped at 1: the line through `(1, 1)` touching the curve.
/// Returns `(t0, value, slope)`.
pub fn log_squared_tangency() -> (f64, f64, f64) {
    static CELL: OnceLock<(f64, f64, f64)> = OnceLock::new();
    *CELL.get_or_init(|| {
        let slope = |t: f64| {
            let l = 1.0 - t.ln();
            2.0 / (t * l * l * l)
        };
        let reach = |t: f64| log_squared(t) + slope(t) * (1.0 - t) - 1.0;
        // reach is decreasing on (0, e^-2]
        let (mut lo, mut hi) = (1e-6, (-2.0f64).exp());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if reach(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t0 = 0.5 * (lo + hi);
        (t0, log_squared(t0), slope(t0))
    })
}

/// Least concave majorant of `min(log_squared(u), 1)` on `[0, ∞)`:
/// the curve up to `t0`, its tangent up to 1, then 1.
pub fn log_squared_hull(u: f64) -> f64 {
    let (t0, v0, slope) = log_squared_tangency();
    if u <= t0 {
        log_squared(u)
    } else if u < 1.0 {
        v0 + slope * (u - t0)
    } else {
        1.0
    }
}

/// A modulus of continuity `ω: [0, 1] → [0, ∞)`.
#[derive(Clone)]
pub enum Modulus {
    /// `c t`
    Linear(f64),
    /// `c t^a`
    Power { c: f64, exponent: f64 },
    /// `c H(scale t)` with `H` the concave hull of `min(1/log^2(e/u), 1)`
    LogSquared { c: f64, scale: f64 },
    /// `c / log(e / t)`; not Dini.
    InverseLog(f64),
    Sum(Vec<Modulus>),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Modulus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulus::Linear(c) => write!(f, "Linear({c})"),
            Modulus::Power { c, exponent } => write!(f, "Power({c}, {exponent})"),
            Modulus::LogSquared { c, scale } => write!(f, "LogSquared({c}, {scale})"),
            Modulus::InverseLog(c) => write!(f, "InverseLog({c})"),
            Modulus::Sum(parts) => f.debug_list().entries(parts).finish(),
            Modulus::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Modulus {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Modulus::Linear(c) => c * t,
            Modulus::Power { c, exponent } => c * t.powf(*exponent),
            Modulus::LogSquared { c, scale } => c * log_squared_hull(scale * t),
            Modulus::InverseLog(c) => {
                if t <= 0.0 {
                    0.0
                } else {
                    c / (1.0 - t.ln())
                }
            }
            Modulus::Sum(parts) => parts.iter().map(|m| m.eval(t)).sum(),
            Modulus::Custom(f) => f(t),
        }
    }

    /// `ω(e^{-s})`, evaluated without underflow for the closed-form moduli.
    pub fn eval_neglog(&self, s: f64) -> f64 {
        match self {
            Modulus::Linear(c) => c * (-s).exp(),
            Modulus::Power { c, exponent } => c * (-exponent * s).exp(),
            Modulus::LogSquared { c, scale } => {
                let shifted = s - scale.ln();
                if shifted >= -log_squared_tangency().0.ln() {
                    c / ((1.0 + shifted) * (1.0 + shifted))
                } else {
                    c * log_squared_hull((-shifted).exp())
                }
            }
            Modulus::InverseLog(c) => c / (1.0 + s),
            Modulus::Sum(parts) => parts.iter().map(|m| m.eval_neglog(s)).sum(),
            Modulus::Custom(f) => f((-s).exp()),
        }
    }
}

fn simpson(g: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (g(lm), g(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson(g, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + simpson(g, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}

fn integrate(g: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    // split first so that isolated kinks cannot hide between the initial nodes
    let pieces = 16;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (g(lo), g(0.5 * (lo + hi)), g(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(g, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// `‖ω‖_Dini = ∫_0^1 ω(t) dt / t`, computed as `∫_0^∞ ω(e^{-s}) ds` over
/// doubling segments `[0,1], [1,2], [2,4], …`. Fails with a divergence
/// signal when the segment contributions do not die out.
pub fn dini_norm(modulus: &Modulus) -> Result<f64> {
    const MAX_SEGMENTS: usize = 64;
    let g = |s: f64| modulus.eval_neglog(s);
    let mut total = 0.0;
    let mut lo = 0.0;
    let mut hi = 1.0;
    for k in 0..MAX_SEGMENTS {
        let piece = integrate(&g, lo, hi, 1e-13 * (1.0 + total));
        total += piece;
        if k >= 3 && piece.abs() <= 1e-12 * total.abs().max(f64::MIN_POSITIVE) {
            return Ok(total);
        }
        if k >= 3 && total == 0.0 && piece == 0.0 {
            return Ok(0.0);
        }
        lo = hi;
        hi *= 2.0;
    }
    Err(Error::DiniDivergence { partial: total, segments: MAX_SEGMENTS })
}

#[derive(Clone)]
pub enum KernelKind {
    Zero,
    /// `1 / (x - y)` in one dimension.
    Hilbert,
    /// `(1 + W(ln|u|)/2) / u` with `u = x - y` and `W(s) = 1/log^2(e/dist(s, Z))`.
    /// Size and smoothness are Hilbert-like, but the modulus is only
    /// `O(1/log^2(1/t))` near 0.
    LogModulated,
    Custom(Arc<dyn Fn([f64; 2], [f64; 2]) -> f64 + Send + Sync>),
}

/// An ω-Calderón–Zygmund kernel with its size constant and modulus.
#[derive(Clone)]
pub struct KernelSpec {
    pub name: String,
    pub dim: usize,
    pub size_constant: f64,
    pub modulus: Modulus,
    pub kind: KernelKind,
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("size_constant", &self.size_constant)
            .field("modulus", &self.modulus)
            .finish()
    }
}

/// Names accepted by [`KernelSpec::by_name`].
pub const BUILTIN_KERNELS: &[&str] = &["zero", "hilbert", "log-modulated"];

impl KernelSpec {
    pub fn zero(dim: usize) -> Self {
        KernelSpec {
            name: "zero".into(),
            dim,
            size_constant: 1.0,
            modulus: Modulus::Linear(0.0),
            kind: KernelKind::Zero,
        }
    }

    /// `K(x, y) = 1/(x - y)`. Both difference terms of the smoothness
    /// condition are bounded by `2t/|x - y|`, hence `ω(t) = 4t`.
    pub fn hilbert() -> Self {
        KernelSpec {
            name: "hilbert".into(),
            dim: 1,
            size_constant: 1.0,
            modulus: Modulus::Linear(4.0),
            kind: KernelKind::Hilbert,
        }
    }

    /// Convolution kernel `ψ(|u|)/u` with `1 ≤ ψ ≤ 3/2` oscillating in
    /// `ln |u|` with a log-squared modulus; `ω(t) = 6t + 2 H(2t)`.
    pub fn log_modulated() -> Self {
        KernelSpec {
            name: "log-modulated".into(),
            dim: 1,
            size_constant: 1.5,
            modulus: Modulus::Sum(vec![Modulus::Linear(6.0), Modulus::LogSquared { c: 2.0, scale: 2.0 }]),
            kind: KernelKind::LogModulated,
        }
    }

    pub fn custom(
        name: &str,
        dim: usize,
        size_constant: f64,
        modulus: Modulus,
        eval: impl Fn([f64; 2], [f64; 2]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        KernelSpec {
            name: name.into(),
            dim,
            size_constant,
            modulus,
            kind: KernelKind::Custom(Arc::new(eval)),
        }
    }

    pub fn by_name(name: &str, dim: usize) -> Result<Self> {
        let k = match name {
            "zero" => Self::zero(dim),
            "hilbert" => Self::hilbert(),
            "log-modulated" => Self::log_modulated(),
            _ => return Err(Error::UnknownKernel(name.into())),
        };
        if k.dim != dim {
            return Err(Error::Precondition(format!("kernel '{name}' is {}-dimensional", k.dim)));
        }
        Ok(k)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, KernelKind::Zero)
    }

    #[inline]
    pub fn eval(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        match &self.kind {
            KernelKind::Zero => 0.0,
            KernelKind::Hilbert => 1.0 / (x[0] - y[0]),
            KernelKind::LogModulated => {
                let u = x[0] - y[0];
                let s = u.abs().ln();
                let d = (s - s.round()).abs();
                (1.0 + 0.5 * log_squared(d)) / u
            }
            KernelKind::Custom(f) => f(x, y),
        }
    }

    pub fn dini(&self) -> Result<f64> {
        dini_norm(&self.modulus)
    }
}

fn distance(a: [f64; 2], b: [f64; 2], dim: usize) -> f64 {
    (0..dim).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>().sqrt()
}

/// Largest observed `|K(x,y)| |x-y|^n / C_K` over random pairs.
pub fn audit_size(kernel: &KernelSpec, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = kernel.dim;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut x = [0.0; 2];
        let mut y = [0.0; 2];
        for i in 0..n {
            x[i] = rng.gen_range(-4.0..4.0);
            y[i] = x[i] + rng.gen_range(-1.0..1.0) * 10f64.powf(rng.gen_range(-4.0..1.0));
        }
        let d = distance(x, y, n);
        if d == 0.0 {
            continue;
        }
        worst = worst.max(kernel.eval(x, y).abs() * d.powi(n as i32) / kernel.size_constant);
    }
    worst
}

/// Largest observed ratio of the smoothness difference terms to
/// `ω(|x-x'|/|x-y|) / |x-y|^n`, over triples with `|x-y| > 2|x-x'|`.
pub fn audit_smoothness(kernel: &KernelSpec, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = kernel.dim;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut x = [0.0; 2];
        let mut dir = [0.0; 2];
        for i in 0..n {
            x[i] = rng.gen_range(-4.0..4.0);
            dir[i] = rng.gen_range(-1.0..1.0);
        }
        let dn = distance(dir, [0.0; 2], n);
        if dn == 0.0 {
            continue;
        }
        let r = 10f64.powf(rng.gen_range(-3.0..1.0));
        let mut y = x;
        for i in 0..n {
            y[i] = x[i] + r * dir[i] / dn;
        }
        let t = 0.5 * 10f64.powf(rng.gen_range(-6.0..0.0)) * (1.0 - 1e-9);
        let mut xp = x;
        let mut dir2 = [0.0; 2];
        for v in dir2.iter_mut().take(n) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let d2 = distance(dir2, [0.0; 2], n).max(1e-300);
        for i in 0..n {
            xp[i] = x[i] + t * r * dir2[i] / d2;
        }
        let dxy = distance(x, y, n);
        let dxx = distance(x, xp, n);
        if !(dxy > 2.0 * dxx) || dxx == 0.0 {
            continue;
        }
        let diff = (kernel.eval(x, y) - kernel.eval(xp, y)).abs() + (kernel.eval(y, x) - kernel.eval(y, xp)).abs();
        let bound = kernel.modulus.eval(dxx / dxy) / dxy.powi(n as i32);
        if bound > 0.0 {
            worst = worst.max(diff / bound);
        } else if diff > 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModulusAudit {
    pub vanishes_at_zero: bool,
    pub nondecreasing: bool,
    pub subadditive: bool,
}

pub fn audit_modulus(modulus: &Modulus, samples: usize, seed: u64) -> ModulusAudit {
    let vanishes_at_zero = modulus.eval(0.0) == 0.0;
    let grid: Vec<f64> = (0..=1000).map(|i| modulus.eval(i as f64 / 1000.0)).collect();
    let nondecreasing = grid.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subadditive = (0..samples).all(|_| {
        let a: f64 = rng.gen_range(0.0..1.0);
        let b: f64 = rng.gen_range(0.0..(1.0 - a));
        modulus.eval(a + b) <= (modulus.eval(a) + modulus.eval(b)) * (1.0 + 1e-12)
    });
    ModulusAudit { vanishes_at_zero, nondecreasing, subadditive }
}

/// `C_T = ‖T‖_{L²→L²} + C_K + ‖ω‖_Dini`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstants {
    pub l2_norm: f64,
    pub c_k: f64,
    pub dini: f64,
    pub c_t: f64,
}

impl OperatorConstants {
    pub fn new(l2_norm: f64, c_k: f64, dini: f64) -> Self {
        OperatorConstants { l2_norm, c_k, dini, c_t: l2_norm + c_k + dini }
    }

    pub fn for_kernel(kernel: &KernelSpec, window: &Cube) -> Result<Self> {
        let l2 = estimate_l2_norm(kernel, window)?;
        Ok(Self::new(l2, kernel.size_constant, kernel.dini()?))
    }
}

/// Largest singular value of the discrete full-truncation operator on
/// `window`, by power iteration on `A^t A`.
pub fn estimate_l2_norm(kernel: &KernelSpec, window: &Cube) -> Result<f64> {
    let m = window.cell_count() as usize;
    if m > 1 << 12 {
        return Err(Error::Precondition(format!("{m} cells exceed the dense limit 4096")));
    }
    if kernel.is_zero() {
        return Ok(0.0);
    }
    // built-in kernels are translation invariant, so the window corner is irrelevant
    type Key = (String, usize, u32, i64);
    static CACHE: OnceLock<Mutex<HashMap<Key, f64>>> = OnceLock::new();
    let key = match kernel.kind {
        KernelKind::Custom(_) => None,
        _ => Some((kernel.name.clone(), window.dim(), window.lattice.level, window.side)),
    };
    if let Some(k) = &key {
        if let Some(&v) = CACHE.get_or_init(Default::default).lock().unwrap().get(k) {
            return Ok(v);
        }
    }
    let norm = power_iteration(kernel, window, m)?;
    if let Some(k) = key {
        CACHE.get_or_init(Default::default).lock().unwrap().insert(k, norm);
    }
    Ok(norm)
}

fn power_iteration(kernel: &KernelSpec, window: &Cube, m: usize) -> Result<f64> {
    const MAX_ITER: usize = 50_000;
    const TOL: f64 = 1e-11;
    let lat = window.lattice;
    let h = lat.cell_measure();
    let centers: Vec<[f64; 2]> = window.cells().map(|c| lat.center(c)).collect();
    let a: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / m, k % m);
            if i == j {
                0.0
            } else {
                kernel.eval(centers[i], centers[j]) * h
            }
        })
        .collect();
    let at: Vec<f64> = (0..m * m).into_par_iter().map(|k| a[(k % m) * m + k / m]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut prev = 0.0;
    for it in 0..MAX_ITER {
        let u: Vec<f64> = a.par_chunks(m).map(|row| dot(row, &v)).collect();
        let lambda = dot(&u, &u);
        let mut z: Vec<f64> = at.par_chunks(m).map(|row| dot(row, &u)).collect();
        if normalize(&mut z) == 0.0 {
            return Ok(0.0);
        }
        v = z;
        if it > 10 && (lambda - prev).abs() <= TOL * lambda {
            return Ok(lambda.sqrt());
        }
        prev = lambda;
    }
    Err(Error::NonConvergence { iterations: MAX_ITER })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Direct sum `T(f χ_E)(x)`.
pub fn apply_truncated(kernel: &KernelSpec, f: &GridFunction, e: &LatticeSet, x: [i64; 2]) -> f64 {
    let lat = f.lattice();
    let cx = lat.center(x);
    let mut sum = 0.0;
    for y in e.cells() {
        if y == x {
            continue;
        }
        let v = f.get(y);
        if v != 0.0 {
            sum += kernel.eval(cx, lat.center(y)) * v;
        }
    }
    sum * lat.cell_measure()
}

/// Direct sum `Tf(x)` over the whole window.
pub fn apply_full(kernel: &KernelSpec, f: &GridFunction, x: [i64; 2]) -> f64 {
    let lat = f.lattice();
    let cx = lat.center(x);
    let mut sum = 0.0;
    for (y, v) in f.cells() {
        if y != x && v != 0.0 {
            sum += kernel.eval(cx, lat.center(y)) * v;
        }
    }
    sum * lat.cell_measure()
}

/// Prefix table of `y ↦ K(ξ, y) f(y) h^n` over a box, for one fixed `ξ`.
pub(crate) fn kernel_row(kernel: &KernelSpec, f: &GridFunction, xi: [i64; 2], bx: LatticeBox) -> PrefixSums {
    let lat = f.lattice();
    let h = lat.cell_measure();
    let cx = lat.center(xi);
    PrefixSums::new(bx, |y| {
        let v = f.get(y);
        if y == xi || v == 0.0 {
            0.0
        } else {
            kernel.eval(cx, lat.center(y)) * v * h
        }
    })
}

/// Which cubes the maximal operators take their supremum over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CubeFamily {
    /// The cell itself and the cubes of the `3^n` shifted dyadic grids.
    ShiftedDyadic,
    /// Every lattice cube (practical only at small resolutions).
    Exhaustive,
}

/// Side of the smallest cube containing `bx` and the cell `x`.
fn enclosing_side(bx: &LatticeBox, x: [i64; 2]) -> i64 {
    (0..bx.dim)
        .map(|i| bx.hi[i].max(x[i] + 1) - bx.lo[i].min(x[i]))
        .max()
        .unwrap_or(1)
}

/// Cubes of `family` containing `x` with side up to (about) `max_side`;
/// cubes beyond that never change any of the suprema computed here.
pub fn family_cubes_containing(lattice: Lattice, family: CubeFamily, x: [i64; 2], max_side: i64) -> Vec<Cube> {
    let mut out = vec![Cube::cell(lattice, x)];
    match family {
        CubeFamily::ShiftedDyadic => {
            let grids = shifted_grids(lattice);
            for j in 0..=MAX_GRID_SCALE {
                for g in &grids {
                    out.push(g.cube_containing(x, j));
                }
                if (3i64 << j) >= 6 * max_side {
                    break;
                }
            }
        }
        CubeFamily::Exhaustive => {
            for s in 2..=max_side {
                let ys: Vec<i64> = if lattice.dim == 2 { (x[1] - s + 1..=x[1]).collect() } else { vec![0] };
                for &b in &ys {
                    for a in x[0] - s + 1..=x[0] {
                        out.push(Cube { lattice, corner: [a, b], side: s });
                    }
                }
            }
        }
    }
    out
}

/// Hardy–Littlewood maximal function over `family`, at every cell of `region`.
pub fn hardy_littlewood_on(f: &GridFunction, region: &Cube, family: CubeFamily) -> Vec<f64> {
    let abs = PrefixSums::of_function(f, f64::abs);
    let Some(supp) = f.support_box() else {
        return vec![0.0; region.cell_count() as usize];
    };
    let cells: Vec<[i64; 2]> = region.cells().collect();
    cells
        .par_iter()
        .map(|&x| {
            let d = enclosing_side(&supp, x);
            family_cubes_containing(f.lattice(), family, x, d)
                .iter()
                .map(|q| abs.sum(&q.as_box()) / q.cell_count() as f64)
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn hardy_littlewood(f: &GridFunction, x: [i64; 2], family: CubeFamily) -> f64 {
    hardy_littlewood_on(f, &Cube::cell(f.lattice(), x), family)[0]
}

/// `T* f` at every cell of `region`: the largest `|Σ_{|y-x| > ε} K f h^n|`
/// over the finitely many distinct cell-center distances `ε`.
pub fn truncated_maximal_on(kernel: &KernelSpec, f: &GridFunction, region: &Cube) -> Vec<f64> {
    let lat = f.lattice();
    let h = lat.cell_measure();
    let support: Vec<([i64; 2], f64)> = f.cells().filter(|&(_, v)| v != 0.0).collect();
    let cells: Vec<[i64; 2]> = region.cells().collect();
    if kernel.is_zero() {
        return vec![0.0; cells.len()];
    }
    cells
        .par_iter()
        .map(|&x| {
            let cx = lat.center(x);
            let mut terms: Vec<(i64, f64)> = support
                .iter()
                .filter(|(y, _)| *y != x)
                .map(|&(y, v)| {
                    let d2 = (0..lat.dim).map(|i| (y[i] - x[i]) * (y[i] - x[i])).sum::<i64>();
                    (d2, kernel.eval(cx, lat.center(y)) * v * h)
                })
                .collect();
            terms.sort_unstable_by_key(|t| std::cmp::Reverse(t.0));
            let mut best: f64 = 0.0;
            let mut acc = 0.0;
            for (k, &(d2, t)) in terms.iter().enumerate() {
                acc += t;
                // radius just below d2: every term at distance >= sqrt(d2) counted
                if k + 1 == terms.len() || terms[k + 1].0 != d2 {
                    best = best.max(acc.abs());
                }
            }
            best
        })
        .collect()
}

pub fn truncated_maximal(kernel: &KernelSpec, f: &GridFunction, x: [i64; 2]) -> f64 {
    truncated_maximal_on(kernel, f, &Cube::cell(f.lattice(), x))[0]
}

/// Grand maximal truncated operator `M_T f` at every cell of `region`:
/// `max_{Q ∋ x} max_{ξ ∈ Q} |T(f χ_{window \ 3Q})(ξ)|` over `family`.
pub fn grand_maximal_on(kernel: &KernelSpec, f: &GridFunction, region: &Cube, family: CubeFamily) -> Vec<f64> {
    let lat = f.lattice();
    let n_cells = region.cell_count() as usize;
    let Some(supp) = f.support_box() else {
        return vec![0.0; n_cells];
    };
    if kernel.is_zero() {
        return vec![0.0; n_cells];
    }
    let covers_support = |q: &Cube| q.dilate(3).as_box().contains_box(&supp);

    let per_point: Vec<Vec<Cube>> = region
        .cells()
        .map(|x| {
            family_cubes_containing(lat, family, x, enclosing_side(&supp, x))
                .into_iter()
                .filter(|q| !covers_support(q))
                .collect()
        })
        .collect();
    let candidates: HashSet<Cube> = per_point.iter().flatten().copied().collect();
    if candidates.is_empty() {
        return vec![0.0; n_cells];
    }
    let mut lo = [i64::MAX; 2];
    let mut hi = [i64::MIN; 2];
    for q in &candidates {
        let b = q.as_box();
        for i in 0..lat.dim {
            lo[i] = lo[i].min(b.lo[i]);
            hi[i] = hi[i].max(b.hi[i]);
        }
    }
    let xi_box = LatticeBox { dim: lat.dim, lo, hi };
    let xis: Vec<[i64; 2]> = xi_box.cells().collect();

    let partial: Vec<Vec<(Cube, f64)>> = xis
        .par_iter()
        .map(|&xi| {
            let max_side = candidates_max_side(&candidates);
            let mine: Vec<Cube> = family_cubes_containing(lat, family, xi, max_side)
                .into_iter()
                .filter(|q| candidates.contains(q))
                .collect();
            if mine.is_empty() {
                return Vec::new();
            }
            let row = kernel_row(kernel, f, xi, supp);
            let total = row.total();
            mine.into_iter()
                .map(|q| (q, (total - row.sum(&q.dilate(3).as_box())).abs()))
                .collect()
        })
        .collect();
    let mut g: HashMap<Cube, f64> = HashMap::with_capacity(candidates.len());
    for (q, v) in partial.into_iter().flatten() {
        let e = g.entry(q).or_insert(0.0);
        *e = e.max(v);
    }
    per_point
        .iter()
        .map(|qs| qs.iter().map(|q| g.get(q).copied().unwrap_or(0.0)).fold(0.0, f64::max))
        .collect()
}

fn candidates_max_side(c: &HashSet<Cube>) -> i64 {
    c.iter().map(|q| q.side).max().unwrap_or(1)
}

/// Values of the local grand maximal operator `M_{T,Q0}` and of
/// `|T(f χ_{3Q0})|` on the cells of `Q0`, with the sup taken over the
/// dyadic cubes `D(Q0)`.
#[derive(Clone, Debug)]
pub struct LocalFields {
    pub q0: Cube,
    /// `|T(f χ_{3Q0})(x)|` per cell of `Q0` (cube cell order).
    pub full: Vec<f64>,
    /// `M_{T,Q0} f(x)` per cell of `Q0`.
    pub maximal: Vec<f64>,
    /// `g(P) = max_{ξ ∈ P} |T(f χ_{3Q0 \ 3P})(ξ)|` for each level `k`
    /// (side `side(Q0)/2^k`), indexed by the position of `P` within `Q0`.
    pub boundary: Vec<Vec<f64>>,
}

impl LocalFields {
    pub fn levels(&self) -> usize {
        self.boundary.len()
    }

    /// Index of the level-`k` dyadic cube containing `cell`.
    pub fn index_at(&self, cell: [i64; 2], k: usize) -> usize {
        let side = self.q0.side >> k;
        let per_row = 1usize << k;
        let ix = ((cell[0] - self.q0.corner[0]) / side) as usize;
        let iy = if self.q0.dim() == 2 { ((cell[1] - self.q0.corner[1]) / side) as usize } else { 0 };
        iy * per_row + ix
    }

    /// `g(P)` for a dyadic `P ∈ D(Q0)`.
    pub fn boundary_of(&self, p: &Cube) -> f64 {
        let k = (self.q0.side / p.side).trailing_zeros() as usize;
        self.boundary[k][self.index_at(p.corner, k)]
    }

    pub fn cell_index(&self, cell: [i64; 2]) -> usize {
        let s = self.q0.side;
        let x = cell[0] - self.q0.corner[0];
        let y = if self.q0.dim() == 2 { cell[1] - self.q0.corner[1] } else { 0 };
        (y * s + x) as usize
    }
}

/// Number of dyadic levels of `D(q)` reachable on the lattice (including `q`).
pub fn dyadic_levels(q: &Cube) -> usize {
    1 + q.side.trailing_zeros() as usize
}

pub fn local_fields(kernel: &KernelSpec, f: &GridFunction, q0: &Cube) -> LocalFields {
    let levels = dyadic_levels(q0);
    let dim = q0.dim();
    let cells: Vec<[i64; 2]> = q0.cells().collect();
    let q3 = q0.dilate(3);
    let supp = f.support_box().map(|s| s.intersect(&q3.as_box())).filter(|b| !b.is_empty());
    let empty = || LocalFields {
        q0: *q0,
        full: vec![0.0; cells.len()],
        maximal: vec![0.0; cells.len()],
        boundary: (0..levels).map(|k| vec![0.0; 1usize << (k * dim)]).collect(),
    };
    let Some(supp) = supp else { return empty() };
    if kernel.is_zero() {
        return empty();
    }
    let mut fields = empty();
    let per_cell: Vec<(f64, Vec<f64>)> = cells
        .par_iter()
        .map(|&xi| {
            let row = kernel_row(kernel, f, xi, supp);
            let whole = row.sum(&q3.as_box());
            let mut vals = Vec::with_capacity(levels);
            for k in 0..levels {
                let side = q0.side >> k;
                let mut corner = q0.corner;
                for i in 0..dim {
                    corner[i] += (xi[i] - q0.corner[i]) / side * side;
                }
                let p = Cube { lattice: q0.lattice, corner, side };
                vals.push((whole - row.sum(&p.dilate(3).as_box())).abs());
            }
            (whole.abs(), vals)
        })
        .collect();
    for (ci, (&xi, (full, vals))) in cells.iter().zip(per_cell).enumerate() {
        fields.full[ci] = full;
        for (k, v) in vals.into_iter().enumerate() {
            let idx = fields.index_at(xi, k);
            let slot = &mut fields.boundary[k][idx];
            *slot = slot.max(v);
        }
    }
    for (ci, &x) in cells.iter().enumerate() {
        fields.maximal[ci] = (0..levels).map(|k| fields.boundary[k][fields.index_at(x, k)]).fold(0.0, f64::max);
    }
    fields
}

/// Point evaluation of `M_T f(x)` (no scope) or `M_{T,Q0} f(x)` (scope `Q0`).
pub fn grand_maximal(
    kernel: &KernelSpec,
    f: &GridFunction,
    x: [i64; 2],
    scope: Option<&Cube>,
    family: CubeFamily,
) -> Result<f64> {
    match scope {
        None => Ok(grand_maximal_on(kernel, f, &Cube::cell(f.lattice(), x), family)[0]),
        Some(q0) => {
            if !q0.contains_cell(x) {
                return Err(Error::ScopeViolation { cell: x });
            }
            match family {
                CubeFamily::ShiftedDyadic => {
                    let fields = local_fields(kernel, f, q0);
                    Ok(fields.maximal[fields.cell_index(x)])
                }
                CubeFamily::Exhaustive => Ok(local_grand_maximal_exhaustive(kernel, f, q0, x)),
            }
        }
    }
}

/// `M_{T,Q0}` by brute force over every lattice cube `Q ∋ x`, `Q ⊆ Q0`.
pub fn local_grand_maximal_exhaustive(kernel: &KernelSpec, f: &GridFunction, q0: &Cube, x: [i64; 2]) -> f64 {
    let q3 = LatticeSet::from_cube(&q0.dilate(3));
    let mut best: f64 = 0.0;
    for q in family_cubes_containing(q0.lattice, CubeFamily::Exhaustive, x, q0.side) {
        if !q0.contains(&q) {
            continue;
        }
        let e = q3.difference(&LatticeSet::from_cube(&q.dilate(3)));
        for xi in q.cells() {
            best = best.max(apply_truncated(kernel, f, &e, xi).abs());
        }
    }
    best
}

/// The pointwise comparison `M_T f ≤ κ (‖ω‖_Dini + C_K) M f + T* f`.
#[derive(Clone, Debug)]
pub struct MaximalComparison {
    pub grand: Vec<f64>,
    pub hardy_littlewood: Vec<f64>,
    pub truncated: Vec<f64>,
    /// `(M_T − T*)_+ / ((‖ω‖_Dini + C_K) M)` per cell.
    pub residual: Vec<f64>,
    /// Largest residual.
    pub kappa: f64,
}

pub fn maximal_compare(kernel: &KernelSpec, f: &GridFunction, region: &Cube, family: CubeFamily) -> Result<MaximalComparison> {
    let scale = kernel.dini()? + kernel.size_constant;
    let grand = grand_maximal_on(kernel, f, region, family);
    let hl = hardy_littlewood_on(f, region, family);
    let ts = truncated_maximal_on(kernel, f, region);
    let residual: Vec<f64> = grand
        .iter()
        .zip(&hl)
        .zip(&ts)
        .map(|((&g, &m), &t)| {
            let excess = (g - t).max(0.0);
            if excess == 0.0 {
                0.0
            } else if m > 0.0 {
                excess / (scale * m)
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let kappa = residual.iter().copied().fold(0.0, f64::max);
    Ok(MaximalComparison { grand, hardy_littlewood: hl, truncated: ts, residual, kappa })
}
