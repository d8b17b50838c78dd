//! Exceptional sets, the stopping-time decomposition, and recursive local and
//! global domination with a replayable certificate.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::GridFunction;
use crate::grid::{cover_partition, Cube, Lattice, LatticeSet};
use crate::operator::{apply_full, apply_truncated, local_fields, KernelSpec, LocalFields, OperatorConstants};
use crate::sparse::{apply_sparse_on, SparseEntry, SparseFamily};

pub const DEFAULT_MAX_DEPTH: usize = 64;

/// Relative slack when comparing independently summed floating values.
pub const SLACK: f64 = 1e-9;

/// Largest dense window used to estimate `‖T‖_{L²→L²}`.
const DENSE_CELLS: i64 = 1 << 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominationOptions {
    pub r: f64,
    pub max_depth: usize,
}

impl Default for DominationOptions {
    fn default() -> Self {
        DominationOptions { r: 1.0, max_depth: DEFAULT_MAX_DEPTH }
    }
}

/// `⌊|Q| / 2^{n+2}⌋` cells.
pub fn exceptional_budget(q: &Cube) -> i64 {
    q.cell_count() >> (q.dim() + 2)
}

/// `2^{-(n+1)}`
pub fn cz_height(dim: usize) -> Ratio<u64> {
    Ratio::new(1, 1 << (dim + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExceptionalSet {
    /// `{|f| > t_f} ∪ {max(M_{T,Q0} f, |T(f χ_{3Q0})|) > t_m}`
    pub cells: LatticeSet,
    /// `t_f` in units of the reference average `a`.
    pub cut_f: f64,
    /// `t_m` in units of `C_T a`.
    pub cut_m: f64,
    pub threshold_f: f64,
    pub threshold_mt: f64,
}

impl ExceptionalSet {
    fn empty(lattice: Lattice) -> Self {
        ExceptionalSet { cells: LatticeSet::empty(lattice), cut_f: 0.0, cut_m: 0.0, threshold_f: 0.0, threshold_mt: 0.0 }
    }
}

/// Smallest `t` with `|{v > t}| <= keep`.
fn quantile_cut(values: &[f64], keep: usize) -> f64 {
    if values.len() <= keep {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted[keep]
}

/// At most `⌊b/2⌋` cells go to the `|f|` part; whatever it leaves unused
/// (ties at the cut) goes to `max(M_{T,Q0} f, |T(f χ_{3Q0})|)` over the
/// remaining cells. The second term is the lattice form of the a.e. bound of
/// the untruncated value by `|f|` and `M_{T,Q0} f`.
fn exceptional_from_fields(fields: &LocalFields, f_abs: &GridFunction, avg: f64, c_t: f64) -> ExceptionalSet {
    let q0 = fields.q0;
    let lattice = q0.lattice;
    if avg == 0.0 {
        return ExceptionalSet::empty(lattice);
    }
    let cells: Vec<[i64; 2]> = q0.cells().collect();
    let fv: Vec<f64> = cells.iter().map(|&x| f_abs.get(x)).collect();
    let budget = exceptional_budget(&q0) as usize;
    let t_f = quantile_cut(&fv, budget / 2);
    let mv: Vec<f64> = fields.maximal.iter().zip(&fields.full).map(|(m, t)| m.max(*t)).collect();
    let in_f: Vec<bool> = fv.iter().map(|&v| v > t_f).collect();
    let used = in_f.iter().filter(|&&b| b).count();
    let rest: Vec<f64> = mv.iter().zip(&in_f).filter(|(_, &b)| !b).map(|(&v, _)| v).collect();
    let t_m = quantile_cut(&rest, budget - used);
    let chosen = LatticeSet::from_cells(
        lattice,
        cells.iter().enumerate().filter(|&(i, _)| in_f[i] || mv[i] > t_m).map(|(_, &c)| c),
    );
    let cut_m = if t_m == 0.0 { 0.0 } else { t_m / (c_t * avg) };
    ExceptionalSet { cells: chosen, cut_f: t_f / avg, cut_m, threshold_f: t_f, threshold_mt: t_m }
}

/// Smallest quantile thresholds whose exceptional set fits the budget `2^{-(n+2)}|Q0|`.
pub fn build_exceptional_set(kernel: &KernelSpec, f: &GridFunction, q0: &Cube, r: f64, c_t: f64) -> Result<ExceptionalSet> {
    f.lattice().ensure_same(&q0.lattice)?;
    let f_abs = f.abs();
    let avg = f_abs.r_average(&q0.dilate(3), r)?;
    let fields = local_fields(kernel, f, q0);
    Ok(exceptional_from_fields(&fields, &f_abs, avg, c_t))
}

/// Maximal halving descendants `P` of `q0` with `|P ∩ E| > λ|P|`, in
/// depth-first child order. Exact integer arithmetic.
pub fn cz_decompose(e: &LatticeSet, q0: &Cube, lambda: Ratio<u64>) -> Result<Vec<Cube>> {
    e.lattice.ensure_same(&q0.lattice)?;
    if !e.is_subset_of_cube(q0) {
        return Err(Error::Precondition("exceptional set is not contained in Q0".into()));
    }
    let (num, den) = (*lambda.numer() as i128, *lambda.denom() as i128);
    let load = |q: &Cube| {
        let k = e.intersect_cube(q).len() as i128;
        (k * den > num * q.cell_count() as i128, k)
    };
    if load(q0).0 {
        return Err(Error::Precondition(format!("average of E over Q0 exceeds {lambda}")));
    }
    fn descend(q: &Cube, load: &dyn Fn(&Cube) -> (bool, i128), out: &mut Vec<Cube>) {
        if q.side % 2 != 0 {
            return;
        }
        for c in q.children().expect("even side") {
            match load(&c) {
                (true, _) => out.push(c),
                (false, k) if k > 0 => descend(&c, load, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    descend(q0, &load, &mut out);
    Ok(out)
}

/// One node of the recursion: the claim for `T(f χ_{3Q})` on `Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub cube: Cube,
    /// `(avg_{3Q} |f|^r)^{1/r}`
    pub avg_ref: f64,
    /// `max(t_f, t_m) / avg_ref`
    pub c_quantile: f64,
    /// Smallest constant validating both the boundary and the residual inequality.
    pub c_star: f64,
    pub threshold_f: f64,
    pub threshold_mt: f64,
    pub exceptional: LatticeSet,
    pub selected: Vec<Cube>,
    /// `max_j max_{ξ ∈ P_j} |T(f χ_{3Q \ 3P_j})(ξ)|`
    pub boundary_max: f64,
    /// `max_{x ∈ Q \ ∪P_j} |T(f χ_{3Q})(x)|`
    pub residual_max: f64,
    /// Whether each side is already within `c_quantile · avg_ref`.
    pub boundary_ok: bool,
    pub residual_ok: bool,
    /// No subdivision: odd side, depth limit, or an odd floor too coarse to cover `E`.
    pub floor: bool,
    /// One child per selected cube, same order.
    pub children: Vec<NodeRecord>,
}

impl NodeRecord {
    fn visit<'a>(&'a self, path: &mut Vec<usize>, depth: usize, f: &mut dyn FnMut(&'a NodeRecord, &[usize], usize)) {
        f(self, path, depth);
        for (j, c) in self.children.iter().enumerate() {
            path.push(j);
            c.visit(path, depth + 1, f);
            path.pop();
        }
    }

    /// `Q \ ∪ P_j`
    pub fn witness(&self) -> LatticeSet {
        let covered = self.selected.iter().fold(LatticeSet::empty(self.cube.lattice), |acc, p| acc.union(&LatticeSet::from_cube(p)));
        LatticeSet::from_cube(&self.cube).difference(&covered)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationCertificate {
    pub kernel: String,
    pub r: f64,
    pub lattice: Lattice,
    pub constants: OperatorConstants,
    pub max_depth: usize,
    pub roots: Vec<NodeRecord>,
}

fn path_string(path: &[usize]) -> String {
    path.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("/")
}

impl DominationCertificate {
    /// Calls `f(node, path, depth)` in pre-order; the path starts with the root index.
    pub fn walk<'a>(&'a self, mut f: impl FnMut(&'a NodeRecord, &[usize], usize)) {
        for (i, root) in self.roots.iter().enumerate() {
            root.visit(&mut vec![i], 0, &mut f);
        }
    }

    pub fn c_emp(&self) -> f64 {
        let mut c: f64 = 0.0;
        self.walk(|n, _, _| c = c.max(n.c_star));
        c
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        let mut d = 0;
        self.walk(|_, _, k| d = d.max(k));
        d
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.walk(|_, _, _| n += 1);
        n
    }

    pub fn floor_count(&self) -> usize {
        let mut n = 0;
        self.walk(|node, _, _| n += node.floor as usize);
        n
    }

    pub fn node_at(&self, path: &str) -> Option<&NodeRecord> {
        let mut idx = path.split('/').map(|s| s.parse::<usize>().ok());
        let mut node = self.roots.get(idx.next()??)?;
        for i in idx {
            node = node.children.get(i?)?;
        }
        Some(node)
    }

    pub fn node_at_mut(&mut self, path: &str) -> Option<&mut NodeRecord> {
        let mut idx = path.split('/').map(|s| s.parse::<usize>().ok());
        let mut node = self.roots.get_mut(idx.next()??)?;
        for i in idx {
            node = node.children.get_mut(i?)?;
        }
        Some(node)
    }

    /// The undilated family: every node cube with witness `Q \ ∪P_j`, `η = 1/2`.
    pub fn family(&self) -> SparseFamily {
        let mut fam = SparseFamily::new(self.lattice, Ratio::new(1, 2));
        self.walk(|n, _, _| fam.push(n.cube, n.witness()));
        fam
    }

    pub fn to_ron(&self) -> Result<String> {
        ron::ser::to_string_pretty(self, ron::ser::PrettyConfig::new()).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_ron(text: &str) -> Result<Self> {
        ron::from_str(text).map_err(|e| Error::Parse(format!("certificate: {e}")))
    }
}

struct Ctx<'a> {
    kernel: &'a KernelSpec,
    f: &'a GridFunction,
    f_abs: GridFunction,
    r: f64,
    c_t: f64,
    max_depth: usize,
}

/// The floor cubes of `D(q)` have side equal to the odd part of `side(q)`;
/// one exceptional cell must already exceed the height there.
fn exhaustible(q: &Cube) -> bool {
    let odd = q.side >> q.side.trailing_zeros();
    odd.pow(q.dim() as u32) < 1 << (q.dim() + 1)
}

/// `max g(P_j)` over the selected cubes and `max |T(f χ_{3Q})|` off their union.
fn node_maxima(fields: &LocalFields, q: &Cube, selected: &[Cube]) -> (f64, f64) {
    let boundary = selected.iter().map(|p| fields.boundary_of(p)).fold(0.0, f64::max);
    let mut covered = vec![false; fields.full.len()];
    for p in selected {
        for x in p.cells() {
            covered[fields.cell_index(x)] = true;
        }
    }
    let residual = q
        .cells()
        .enumerate()
        .filter(|&(i, _)| !covered[i])
        .map(|(i, _)| fields.full[i])
        .fold(0.0, f64::max);
    (boundary, residual)
}

fn build_node(ctx: &Ctx, q: &Cube, depth: usize) -> Result<(NodeRecord, Vec<SparseEntry>)> {
    let lattice = q.lattice;
    let avg = ctx.f_abs.r_average(&q.dilate(3), ctx.r)?;
    let floor = q.side % 2 != 0 || depth >= ctx.max_depth || !exhaustible(q);
    if avg == 0.0 {
        let node = NodeRecord {
            cube: *q,
            avg_ref: 0.0,
            c_quantile: 0.0,
            c_star: 0.0,
            threshold_f: 0.0,
            threshold_mt: 0.0,
            exceptional: LatticeSet::empty(lattice),
            selected: Vec::new(),
            boundary_max: 0.0,
            residual_max: 0.0,
            boundary_ok: true,
            residual_ok: true,
            floor,
            children: Vec::new(),
        };
        let witness = LatticeSet::from_cube(q);
        return Ok((node, vec![SparseEntry { cube: *q, witness }]));
    }
    let fields = local_fields(ctx.kernel, ctx.f, q);
    let exc = if floor {
        ExceptionalSet::empty(lattice)
    } else {
        exceptional_from_fields(&fields, &ctx.f_abs, avg, ctx.c_t)
    };
    let selected = if floor { Vec::new() } else { cz_decompose(&exc.cells, q, cz_height(q.dim()))? };
    let (boundary_max, residual_max) = node_maxima(&fields, q, &selected);
    let c_star = boundary_max.max(residual_max) / avg;
    let c_quantile = exc.threshold_f.max(exc.threshold_mt) / avg;
    let kids: Vec<(NodeRecord, Vec<SparseEntry>)> =
        selected.par_iter().map(|p| build_node(ctx, p, depth + 1)).collect::<Result<_>>()?;
    let mut node = NodeRecord {
        cube: *q,
        avg_ref: avg,
        c_quantile,
        c_star,
        threshold_f: exc.threshold_f,
        threshold_mt: exc.threshold_mt,
        exceptional: exc.cells,
        selected,
        boundary_max,
        residual_max,
        boundary_ok: boundary_max <= c_quantile * avg,
        residual_ok: residual_max <= c_quantile * avg,
        floor,
        children: Vec::with_capacity(kids.len()),
    };
    let mut entries = vec![SparseEntry { cube: *q, witness: node.witness() }];
    for (child, sub) in kids {
        node.children.push(child);
        entries.extend(sub);
    }
    Ok((node, entries))
}

/// Window on which `‖T‖_{L²→L²}` is estimated: `q` itself when small enough,
/// otherwise the largest dense cube sharing its corner.
pub fn constants_window(q: &Cube) -> Cube {
    if q.cell_count() <= DENSE_CELLS {
        *q
    } else {
        let side = if q.dim() == 1 { DENSE_CELLS } else { 64 };
        Cube { side, ..*q }
    }
}

fn check_options(opts: &DominationOptions) -> Result<()> {
    if !(opts.r >= 1.0) {
        return Err(Error::Precondition(format!("r = {} < 1", opts.r)));
    }
    Ok(())
}

fn certificate_for(kernel: &KernelSpec, f: &GridFunction, q0: &Cube, opts: &DominationOptions, roots: &[Cube]) -> Result<(SparseFamily, DominationCertificate)> {
    check_options(opts)?;
    if kernel.dim != q0.dim() {
        return Err(Error::Precondition(format!("kernel is {}-dimensional, cube is {}-dimensional", kernel.dim, q0.dim())));
    }
    f.lattice().ensure_same(&q0.lattice)?;
    let constants = OperatorConstants::for_kernel(kernel, &constants_window(q0))?;
    let ctx = Ctx { kernel, f, f_abs: f.abs(), r: opts.r, c_t: constants.c_t, max_depth: opts.max_depth };
    let built: Vec<(NodeRecord, Vec<SparseEntry>)> = roots.par_iter().map(|q| build_node(&ctx, q, 0)).collect::<Result<_>>()?;
    let mut family = SparseFamily::new(q0.lattice, Ratio::new(1, 2));
    let mut nodes = Vec::with_capacity(built.len());
    for (node, entries) in built {
        nodes.push(node);
        family.entries.extend(entries);
    }
    let cert = DominationCertificate {
        kernel: kernel.name.clone(),
        r: opts.r,
        lattice: q0.lattice,
        constants,
        max_depth: opts.max_depth,
        roots: nodes,
    };
    Ok((family, cert))
}

/// A `1/2`-sparse `F ⊆ D(Q0)` with `|T(f χ_{3Q0})| ≤ c Σ_{Q∈F} |f|^{(r)}_{3Q} χ_Q`
/// on `Q0`, `c` the certificate maximum.
pub fn local_dominate(kernel: &KernelSpec, f: &GridFunction, q0: &Cube, opts: &DominationOptions) -> Result<(SparseFamily, DominationCertificate)> {
    certificate_for(kernel, f, q0, opts, &[*q0])
}

/// Cell-wise comparison of `|Tf|` with `C · A_{r,S}|f|` on a window.
#[derive(Clone, Debug, PartialEq)]
pub struct DominationCheck {
    pub holds: bool,
    pub cells: usize,
    /// `max |Tf(x)| / A_{r,S}|f|(x)` over cells with a positive right side.
    pub worst_ratio: f64,
    pub violations: Vec<[i64; 2]>,
}

#[derive(Clone, Debug)]
pub struct GlobalDomination {
    /// Dilated family `{3Q}`, `η = 1/(2·3^n)`.
    pub family: SparseFamily,
    /// Family before dilation, `η = 1/2`.
    pub local_family: SparseFamily,
    pub certificate: DominationCertificate,
    pub window: Cube,
    pub c_emp: f64,
    pub check: DominationCheck,
}

/// Runs the local claim on every cube of the cover partition of `Q0 = window(f)`,
/// dilates the union by 3, and checks `|Tf| ≤ C_emp A_{r,S}|f|` on `3^rings Q0`.
pub fn global_dominate(kernel: &KernelSpec, f: &GridFunction, rings: usize, opts: &DominationOptions) -> Result<GlobalDomination> {
    let q0 = *f.window();
    if let Some(s) = f.support_box() {
        if !q0.as_box().contains_box(&s) {
            return Err(Error::Precondition("support of f leaves Q0".into()));
        }
    }
    let roots = cover_partition(&q0, rings);
    let (local_family, certificate) = certificate_for(kernel, f, &q0, opts, &roots)?;
    let dim = q0.dim() as u32;
    let mut family = SparseFamily::new(q0.lattice, Ratio::new(1, 2 * 3u64.pow(dim)));
    for e in &local_family.entries {
        family.push(e.cube.dilate(3), e.witness.clone());
    }
    let window = q0.dilate(3i64.pow(rings as u32));
    let c_emp = certificate.c_emp();
    let check = check_domination(kernel, f, &family, opts.r, c_emp, &window)?;
    Ok(GlobalDomination { family, local_family, certificate, window, c_emp, check })
}

/// Direct `|Tf(x)|` against `c · A_{r,S}|f|(x)` at every cell of `window`.
pub fn check_domination(kernel: &KernelSpec, f: &GridFunction, family: &SparseFamily, r: f64, c: f64, window: &Cube) -> Result<DominationCheck> {
    let sparse = apply_sparse_on(family, &f.abs(), r, window)?;
    let cells: Vec<[i64; 2]> = window.cells().collect();
    let lhs: Vec<f64> = cells.par_iter().map(|&x| apply_full(kernel, f, x).abs()).collect();
    let mut worst: f64 = 0.0;
    let mut violations = Vec::new();
    for ((&x, &t), &a) in cells.iter().zip(&lhs).zip(sparse.values()) {
        if a > 0.0 {
            worst = worst.max(t / a);
        }
        if t > c * a * (1.0 + SLACK) + f64::MIN_POSITIVE {
            violations.push(x);
        }
    }
    Ok(DominationCheck { holds: violations.is_empty(), cells: cells.len(), worst_ratio: worst, violations })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    /// Node path `root/child/...`, or `-` for certificate-level checks.
    pub path: String,
    pub check: String,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug)]
pub struct ReplayReport {
    pub ok: bool,
    pub nodes: usize,
    pub violations: Vec<Violation>,
}

/// Recomputes every node inequality by direct summation and re-checks the
/// combinatorial invariants. Never fails; problems are reported.
pub fn replay_certificate(cert: &DominationCertificate, kernel: &KernelSpec, f: &GridFunction) -> ReplayReport {
    let mut violations = Vec::new();
    let mut push = |path: &str, check: &str, lhs: f64, rhs: f64| {
        violations.push(Violation { path: path.to_string(), check: check.to_string(), lhs, rhs })
    };
    if cert.kernel != kernel.name {
        push("-", "kernel", 0.0, 0.0);
    }
    if f.lattice() != cert.lattice {
        push("-", "lattice", f.lattice().level as f64, cert.lattice.level as f64);
        return ReplayReport { ok: false, nodes: 0, violations };
    }
    let f_abs = f.abs();
    let lattice = cert.lattice;
    let support = match f.support_box() {
        Some(b) => LatticeSet::from_box(lattice, &b),
        None => LatticeSet::empty(lattice),
    };
    let mut nodes: Vec<(&NodeRecord, String, usize)> = Vec::new();
    cert.walk(|n, p, d| nodes.push((n, path_string(p), d)));
    let dim = lattice.dim;
    for (node, path, depth) in &nodes {
        let path = path.as_str();
        let q = node.cube;
        if q.lattice != lattice {
            push(path, "lattice", 0.0, 0.0);
            continue;
        }
        if *depth > cert.max_depth {
            push(path, "depth", *depth as f64, cert.max_depth as f64);
        }
        let avg = f_abs.r_average(&q.dilate(3), cert.r).unwrap_or(f64::NAN);
        if !((avg - node.avg_ref).abs() <= 1e-12 * avg.abs()) {
            push(path, "avg_ref", node.avg_ref, avg);
        }
        let e = &node.exceptional;
        if !e.is_subset_of_cube(&q) {
            push(path, "exceptional_inside", e.len() as f64, e.intersect_cube(&q).len() as f64);
        }
        if (e.len() << (dim + 2)) > q.cell_count() {
            push(path, "exceptional_measure", (e.len() << (dim + 2)) as f64, q.cell_count() as f64);
        }
        if node.floor && !node.selected.is_empty() {
            push(path, "floor", node.selected.len() as f64, 0.0);
        }
        let mut covered = LatticeSet::empty(lattice);
        let mut mass = 0i64;
        for (j, p) in node.selected.iter().enumerate() {
            if !(p.is_dyadic_in(&q) && p.side < q.side) {
                push(path, &format!("dyadic[{j}]"), p.side as f64, q.side as f64);
            }
            let pset = LatticeSet::from_cube(p);
            if !covered.is_disjoint(&pset) {
                push(path, &format!("disjoint[{j}]"), 0.0, 0.0);
            }
            let hit = e.intersect_cube(p).len();
            if hit >= p.cell_count() {
                push(path, &format!("touches_complement[{j}]"), hit as f64, p.cell_count() as f64);
            }
            if (hit << (dim + 1)) <= p.cell_count() {
                push(path, &format!("selection_height[{j}]"), (hit << (dim + 1)) as f64, p.cell_count() as f64);
            }
            mass += p.cell_count();
            covered = covered.union(&pset);
        }
        if 2 * mass > q.cell_count() {
            push(path, "mass", (2 * mass) as f64, q.cell_count() as f64);
        }
        let uncovered = e.difference(&covered);
        if !uncovered.is_empty() {
            push(path, "exhaustion", uncovered.len() as f64, 0.0);
        }
        if node.children.len() != node.selected.len() || node.children.iter().zip(&node.selected).any(|(c, p)| c.cube != *p) {
            push(path, "children", node.children.len() as f64, node.selected.len() as f64);
        }
        let bound = node.c_star * node.avg_ref;
        let q3 = LatticeSet::from_cube(&q.dilate(3)).intersection(&support);
        for (j, p) in node.selected.iter().enumerate() {
            let outer = q3.difference(&LatticeSet::from_cube(&p.dilate(3)));
            let cells: Vec<[i64; 2]> = p.cells().collect();
            let lhs = cells.par_iter().map(|&xi| apply_truncated(kernel, f, &outer, xi).abs()).reduce(|| 0.0, f64::max);
            if lhs > bound * (1.0 + SLACK) + f64::MIN_POSITIVE {
                push(path, &format!("boundary[{j}]"), lhs, bound);
            }
        }
        let rest: Vec<[i64; 2]> = q.cells().filter(|x| !covered.contains_cell(*x)).collect();
        let lhs = rest.par_iter().map(|&x| apply_truncated(kernel, f, &q3, x).abs()).reduce(|| 0.0, f64::max);
        if lhs > bound * (1.0 + SLACK) + f64::MIN_POSITIVE {
            push(path, "residual", lhs, bound);
        }
    }
    let sparse = cert.family().verify();
    for i in &sparse.violating {
        push("-", &format!("sparse[{i}]"), sparse.worst_ratio, 0.5);
    }
    ReplayReport { ok: violations.is_empty(), nodes: nodes.len(), violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function::TruncateMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lat(level: u32) -> Lattice {
        Lattice::new(1, level).unwrap()
    }

    fn indicator(level: u32) -> GridFunction {
        GridFunction::from_fn(Cube::unit(lat(level)), |_| 1.0)
    }

    fn random_step(level: u32, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        GridFunction::from_fn(Cube::unit(lat(level)), |x| v[(x[0] * 8.0) as usize])
    }

    /// Brute force: cubes of the halving tree with load above λ and no loaded strict ancestor below `q0`.
    fn cz_oracle(e: &LatticeSet, q0: &Cube, num: i64, den: i64) -> Vec<Cube> {
        let mut all = vec![*q0];
        let mut i = 0;
        while i < all.len() {
            if all[i].side % 2 == 0 {
                let kids = all[i].children().unwrap();
                all.extend(kids);
            }
            i += 1;
        }
        let loaded = |q: &Cube| e.cells().filter(|c| q.contains_cell(*c)).count() as i64 * den > num * q.cell_count();
        let mut out: Vec<Cube> = all[1..]
            .iter()
            .filter(|q| loaded(q) && !all[1..].iter().any(|a| a.side > q.side && a.contains(q) && loaded(a)))
            .copied()
            .collect();
        out.sort_by_key(|q| (q.corner, q.side));
        out
    }

    #[test]
    fn cz_examples() {
        let l = lat(2);
        let q0 = Cube::unit(l);
        assert!(cz_decompose(&LatticeSet::empty(l), &q0, Ratio::new(1, 4)).unwrap().is_empty());
        let e = LatticeSet::from_cube(&Cube::new(l, &[0], 1).unwrap());
        assert_eq!(cz_decompose(&e, &q0, Ratio::new(1, 4)).unwrap(), vec![Cube::new(l, &[0], 2).unwrap()]);
        let full = LatticeSet::from_cube(&q0);
        assert!(matches!(cz_decompose(&full, &q0, Ratio::new(1, 4)), Err(Error::Precondition(_))));
    }

    #[test]
    fn cz_uniform_spread_selects_cells() {
        // one exceptional cell in every block of 8: the cell pair is the first loaded cube
        let l = lat(6);
        let q0 = Cube::unit(l);
        let e = LatticeSet::from_cells(l, (0..8).map(|k| [8 * k, 0]));
        let sel = cz_decompose(&e, &q0, cz_height(1)).unwrap();
        assert_eq!(sel.len(), 8);
        assert!(sel.iter().all(|p| p.side == 2));
        assert_eq!(sel.iter().map(|p| p.cell_count()).sum::<i64>(), 2 * e.len());
    }

    #[test]
    fn cz_matches_oracle_on_random_sets() {
        let l = lat(6);
        let q0 = Cube::unit(l);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let k = rng.gen_range(0..=8);
            let e = LatticeSet::from_cells(l, (0..k).map(|_| [rng.gen_range(0..64), 0]));
            let mut got = cz_decompose(&e, &q0, cz_height(1)).unwrap();
            got.sort_by_key(|q| (q.corner, q.side));
            assert_eq!(got, cz_oracle(&e, &q0, 1, 4));
            let covered: i64 = got.iter().map(|p| p.cell_count()).sum();
            assert!(4 * e.len() >= covered && 2 * covered <= 64);
        }
    }

    #[test]
    fn exceptional_examples() {
        let l = lat(6);
        let q0 = Cube::unit(l);
        let ones = GridFunction::from_fn(q0.dilate(3), |_| 1.0);
        let e = build_exceptional_set(&KernelSpec::zero(1), &ones, &q0, 1.0, 0.0).unwrap();
        assert!(e.cells.is_empty());
        let spike = GridFunction::from_fn(q0, |x| if (x[0] * 64.0) as i64 == 20 { 1000.0 } else { 1.0 });
        let e = build_exceptional_set(&KernelSpec::zero(1), &spike, &q0, 1.0, 0.0).unwrap();
        assert_eq!(e.cells, LatticeSet::from_cells(l, [[20, 0]]));
        let f = indicator(10);
        let q0 = Cube::unit(lat(10));
        let e = build_exceptional_set(&KernelSpec::hilbert(), &f, &q0, 1.0, 3.0).unwrap();
        assert!(8 * e.cells.len() <= 1024);
    }

    #[test]
    fn local_zero_kernel_is_single_cube() {
        let f = indicator(6);
        let q0 = *f.window();
        let (fam, cert) = local_dominate(&KernelSpec::zero(1), &f, &q0, &DominationOptions::default()).unwrap();
        assert_eq!(fam.len(), 1);
        assert_eq!(fam.entries[0].cube, q0);
        assert_eq!(cert.c_emp(), 0.0);
        assert!(replay_certificate(&cert, &KernelSpec::zero(1), &f).ok);
    }

    fn local_bound_holds(kernel: &KernelSpec, f: &GridFunction, fam: &SparseFamily, c: f64, q0: &Cube, r: f64) {
        let f_abs = f.abs();
        let support = LatticeSet::from_cube(&q0.dilate(3));
        for x in q0.cells() {
            let lhs = apply_truncated(kernel, f, &support, x).abs();
            let rhs: f64 = fam.cubes().filter(|q| q.contains_cell(x)).map(|q| f_abs.r_average(&q.dilate(3), r).unwrap()).sum();
            assert!(lhs <= c * rhs * (1.0 + SLACK), "cell {x:?}: {lhs} > {c} * {rhs}");
        }
    }

    #[test]
    fn local_hilbert_indicator() {
        let f = indicator(10);
        let q0 = *f.window();
        let k = KernelSpec::hilbert();
        let (fam, cert) = local_dominate(&k, &f, &q0, &DominationOptions::default()).unwrap();
        assert!(fam.verify().ok);
        assert_eq!(fam, cert.family());
        let rep = replay_certificate(&cert, &k, &f);
        assert!(rep.ok, "{:?}", rep.violations);
        local_bound_holds(&k, &f, &fam, cert.c_emp(), &q0, 1.0);
    }

    #[test]
    fn spike_family_is_a_chain() {
        let l = lat(4);
        let q0 = Cube::unit(l);
        let f = GridFunction::from_fn(q0, |x| if (x[0] * 16.0) as i64 == 5 { 1.0 } else { 0.0 });
        let k = KernelSpec::hilbert();
        let (fam, cert) = local_dominate(&k, &f, &q0, &DominationOptions::default()).unwrap();
        assert!(fam.verify().ok);
        let cubes: Vec<Cube> = fam.cubes().copied().collect();
        for a in &cubes {
            for b in &cubes {
                assert!(a.contains(b) || b.contains(a) || !a.intersects(b));
            }
        }
        assert!(cubes.iter().filter(|q| q.contains_cell([5, 0])).count() >= 2);
        assert!(replay_certificate(&cert, &k, &f).ok);
        local_bound_holds(&k, &f, &fam, cert.c_emp(), &q0, 1.0);
    }

    #[test]
    fn depth_limit_marks_floor_leaves() {
        let f = random_step(8, 3);
        let q0 = *f.window();
        let k = KernelSpec::hilbert();
        let opts = DominationOptions { r: 1.0, max_depth: 1 };
        let (fam, cert) = local_dominate(&k, &f, &q0, &opts).unwrap();
        assert!(cert.depth() <= 1);
        assert!(replay_certificate(&cert, &k, &f).ok);
        local_bound_holds(&k, &f, &fam, cert.c_emp(), &q0, 1.0);
    }

    #[test]
    fn tampered_threshold_is_reported() {
        let f = random_step(8, 9);
        let q0 = *f.window();
        let k = KernelSpec::hilbert();
        let (_, mut cert) = local_dominate(&k, &f, &q0, &DominationOptions::default()).unwrap();
        let mut target = None;
        cert.walk(|n, p, _| {
            if target.is_none() && n.c_star > 0.0 {
                target = Some(path_string(p));
            }
        });
        let path = target.unwrap();
        cert.node_at_mut(&path).unwrap().c_star *= 0.5;
        let rep = replay_certificate(&cert, &k, &f);
        assert!(!rep.ok);
        assert!(rep.violations.iter().any(|v| v.path == path && v.lhs > v.rhs));
    }

    #[test]
    fn certificate_round_trip_is_bit_exact() {
        let f = random_step(8, 1);
        let k = KernelSpec::hilbert();
        let g = global_dominate(&k, &f, 1, &DominationOptions::default()).unwrap();
        let text = g.certificate.to_ron().unwrap();
        let back = DominationCertificate::from_ron(&text).unwrap();
        assert_eq!(back, g.certificate);
        assert_eq!(back.to_ron().unwrap(), text);
        let a = replay_certificate(&g.certificate, &k, &f);
        let b = replay_certificate(&back, &k, &f);
        assert_eq!(a.violations, b.violations);
        assert!(DominationCertificate::from_ron(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn global_zero_kernel() {
        let f = indicator(5);
        let g = global_dominate(&KernelSpec::zero(1), &f, 1, &DominationOptions::default()).unwrap();
        assert_eq!(g.family.len(), 3);
        assert_eq!(g.c_emp, 0.0);
        assert!(g.check.holds);
    }

    #[test]
    fn global_hilbert_indicator_rings_one() {
        let f = indicator(10);
        let k = KernelSpec::hilbert();
        let g = global_dominate(&k, &f, 1, &DominationOptions::default()).unwrap();
        assert_eq!(g.certificate.roots.len(), 3);
        assert!(g.family.verify().ok);
        assert_eq!(g.family.eta, Ratio::new(1, 6));
        assert!(g.check.holds && g.check.cells == 3 * 1024);
        assert!(replay_certificate(&g.certificate, &k, &f).ok);
    }

    #[test]
    fn r_two_dominates_with_larger_averages() {
        let f = random_step(8, 4);
        let k = KernelSpec::hilbert();
        let g1 = global_dominate(&k, &f, 1, &DominationOptions::default()).unwrap();
        let g2 = global_dominate(&k, &f, 1, &DominationOptions { r: 2.0, ..Default::default() }).unwrap();
        assert!(g2.check.holds);
        assert!(replay_certificate(&g2.certificate, &k, &f).ok);
        let a1 = apply_sparse_on(&g2.family, &f.abs(), 1.0, &g2.window).unwrap();
        let a2 = apply_sparse_on(&g2.family, &f.abs(), 2.0, &g2.window).unwrap();
        for (x, y) in a1.values().iter().zip(a2.values()) {
            assert!(*y >= *x - 1e-12 * x.abs());
        }
        assert!(g1.check.holds);
        // same tree, larger averages
        assert_eq!(g1.certificate.node_count(), g2.certificate.node_count());
        assert!(g2.c_emp <= g1.c_emp * (1.0 + 1e-12));
    }

    #[test]
    fn rejects_support_outside_q0_and_small_r() {
        let l = lat(4);
        let f = GridFunction::from_fn(Cube::unit(l), |_| 1.0);
        let k = KernelSpec::hilbert();
        assert!(matches!(global_dominate(&k, &f, 0, &DominationOptions { r: 0.5, ..Default::default() }), Err(Error::Precondition(_))));
        let kept = f.truncate(&[Cube::new(l, &[0], 8).unwrap()], TruncateMode::Keep).unwrap();
        assert!(global_dominate(&k, &kept, 0, &Default::default()).is_ok());
    }

    #[test]
    fn deterministic_certificates() {
        let f = random_step(8, 12);
        let k = KernelSpec::log_modulated();
        let a = global_dominate(&k, &f, 1, &DominationOptions::default()).unwrap();
        let b = global_dominate(&k, &f, 1, &DominationOptions::default()).unwrap();
        assert_eq!(a.certificate.to_ron().unwrap(), b.certificate.to_ron().unwrap());
    }

    #[test]
    fn dilation_covariance_for_hilbert() {
        // f(2x) on a lattice one level finer is the same picture rescaled
        let f = random_step(7, 8);
        let fine = Lattice::new(1, 8).unwrap();
        let half = Cube::new(fine, &[0], 128).unwrap();
        let g = GridFunction::new(half, f.values().to_vec()).unwrap();
        let k = KernelSpec::hilbert();
        let (_, a) = local_dominate(&k, &f, f.window(), &Default::default()).unwrap();
        let (_, b) = local_dominate(&k, &g, &half, &Default::default()).unwrap();
        let mut ta = Vec::new();
        let mut tb = Vec::new();
        a.walk(|n, p, _| ta.push((p.to_vec(), n.selected.iter().map(|q| (q.corner, q.side)).collect::<Vec<_>>(), n.exceptional.runs().to_vec())));
        b.walk(|n, p, _| tb.push((p.to_vec(), n.selected.iter().map(|q| (q.corner, q.side)).collect::<Vec<_>>(), n.exceptional.runs().to_vec())));
        assert_eq!(ta, tb);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.walk(|n, _, _| ca.push(n.c_star));
        b.walk(|n, _, _| cb.push(n.c_star));
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn node_invariants_on_random_steps(seed in 0u64..10_000) {
            let f = random_step(7, seed);
            let q0 = *f.window();
            let k = KernelSpec::hilbert();
            let (fam, cert) = local_dominate(&k, &f, &q0, &DominationOptions::default()).unwrap();
            prop_assert!(fam.verify().ok);
            let rep = replay_certificate(&cert, &k, &f);
            prop_assert!(rep.ok, "{:?}", rep.violations);
        }
    }
}
