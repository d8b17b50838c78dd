//! Sparse families with explicit witness sets, and the sparse operators
//! `A_{r,S} f = Σ_{Q ∈ S} (avg_Q f^r)^{1/r} χ_Q`.

use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::{GridFunction, PrefixSums};
use crate::grid::{first_container, first_overlap, shifted_grids, Cube, Lattice, LatticeBox, LatticeSet, Run};

/// One cube and the set `E_Q ⊆ Q` it owns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseEntry {
    pub cube: Cube,
    pub witness: LatticeSet,
}

/// A family of cubes with pairwise-disjoint witnesses, claimed `eta`-sparse.
/// Cubes may repeat; each occurrence owns its own witness.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseFamily {
    pub lattice: Lattice,
    pub eta: Ratio<u64>,
    pub grid_tag: Option<usize>,
    pub entries: Vec<SparseEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseReport {
    pub ok: bool,
    /// `min_Q |E_Q| / |Q|` (1 for the empty family).
    pub worst_ratio: f64,
    /// Entries violating containment, the measure bound, or disjointness.
    pub violating: Vec<usize>,
}

impl SparseFamily {
    pub fn new(lattice: Lattice, eta: Ratio<u64>) -> Self {
        SparseFamily { lattice, eta, grid_tag: None, entries: Vec::new() }
    }

    pub fn push(&mut self, cube: Cube, witness: LatticeSet) {
        self.entries.push(SparseEntry { cube, witness });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cubes(&self) -> impl Iterator<Item = &Cube> {
        self.entries.iter().map(|e| &e.cube)
    }

    /// Smallest cube containing every cube of the family.
    pub fn hull(&self) -> Option<Cube> {
        let first = self.entries.first()?;
        let dim = self.lattice.dim;
        let mut lo = first.cube.corner;
        let mut hi = first.cube.as_box().hi;
        for e in &self.entries {
            let b = e.cube.as_box();
            for i in 0..dim {
                lo[i] = lo[i].min(b.lo[i]);
                hi[i] = hi[i].max(b.hi[i]);
            }
        }
        let side = (0..dim).map(|i| hi[i] - lo[i]).max().unwrap();
        Some(Cube { lattice: self.lattice, corner: lo, side })
    }

    /// Exact check of `E_Q ⊆ Q`, `|E_Q| ≥ η |Q|`, and pairwise disjointness.
    pub fn verify(&self) -> SparseReport {
        let num = *self.eta.numer() as i128;
        let den = *self.eta.denom() as i128;
        let mut violating = Vec::new();
        let mut worst = 1.0f64;
        for (i, e) in self.entries.iter().enumerate() {
            let w = e.witness.len() as i128;
            let q = e.cube.cell_count() as i128;
            worst = worst.min(w as f64 / q as f64);
            let inside = e.witness.lattice == self.lattice && e.witness.is_subset_of_cube(&e.cube);
            if !inside || w * den < num * q {
                violating.push(i);
            }
        }
        let sets: Vec<&LatticeSet> = self.entries.iter().map(|e| &e.witness).collect();
        // report every entry that overlaps some other witness
        if first_overlap(&sets).is_some() {
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    if !sets[i].is_disjoint(sets[j]) {
                        violating.push(i);
                        violating.push(j);
                    }
                }
            }
        }
        violating.sort_unstable();
        violating.dedup();
        SparseReport { ok: violating.is_empty(), worst_ratio: worst, violating }
    }

    /// Line-oriented text: a header, then one entry per line with the cube
    /// corner, side, and the witness as sorted runs `row,start:end`.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "sparse-family v1\ndim {}\nlevel {}\neta {}/{}\ngrid {}\nentries {}\n",
            self.lattice.dim,
            self.lattice.level,
            self.eta.numer(),
            self.eta.denom(),
            self.grid_tag.map_or("-".to_string(), |g| g.to_string()),
            self.entries.len()
        );
        for e in &self.entries {
            let corner: Vec<String> = e.cube.corner[..self.lattice.dim].iter().map(|c| c.to_string()).collect();
            write!(s, "cube {} side {} witness", corner.join(" "), e.cube.side).unwrap();
            for r in e.witness.runs() {
                write!(s, " {},{}:{}", r.row, r.start, r.end).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("sparse family: {m}"));
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing '{key}'")))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(&format!("expected '{key}', found '{line}'")))
        };
        if header("sparse-family")? != "v1" {
            return Err(bad("unsupported version"));
        }
        let int = |s: &str| s.parse::<i64>().map_err(|_| bad(&format!("bad integer '{s}'")));
        let dim = int(&header("dim")?)? as usize;
        let level = int(&header("level")?)? as u32;
        let eta = header("eta")?;
        let (n, d) = eta.split_once('/').ok_or_else(|| bad("eta must be n/d"))?;
        let (n, d) = (int(n)? as u64, int(d)? as u64);
        if d == 0 {
            return Err(bad("eta denominator is zero"));
        }
        let grid = header("grid")?;
        let grid_tag = if grid == "-" { None } else { Some(int(&grid)? as usize) };
        let count = int(&header("entries")?)? as usize;
        let lattice = Lattice::new(dim, level)?;
        let mut family = SparseFamily { lattice, eta: Ratio::new_raw(n, d), grid_tag, entries: Vec::with_capacity(count) };
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut tok = line.split_whitespace();
            if tok.next() != Some("cube") {
                return Err(bad(&format!("bad entry '{line}'")));
            }
            let corner = (0..dim)
                .map(|_| tok.next().ok_or_else(|| bad("short corner")).and_then(int))
                .collect::<Result<Vec<_>>>()?;
            if tok.next() != Some("side") {
                return Err(bad("missing 'side'"));
            }
            let side = int(tok.next().ok_or_else(|| bad("missing side value"))?)?;
            if tok.next() != Some("witness") {
                return Err(bad("missing 'witness'"));
            }
            let mut runs = Vec::new();
            for t in tok {
                let (row, span) = t.split_once(',').ok_or_else(|| bad(&format!("bad run '{t}'")))?;
                let (a, b) = span.split_once(':').ok_or_else(|| bad(&format!("bad run '{t}'")))?;
                runs.push(Run { row: int(row)?, start: int(a)?, end: int(b)? });
            }
            let witness = LatticeSet::from_runs(lattice, runs);
            family.entries.push(SparseEntry { cube: Cube::new(lattice, &corner, side)?, witness });
        }
        if family.entries.len() != count {
            return Err(bad(&format!("expected {count} entries, found {}", family.entries.len())));
        }
        Ok(family)
    }
}

pub fn verify_sparse(family: &SparseFamily) -> SparseReport {
    family.verify()
}

/// `A_{r,S} f` evaluated on the cells of `out_window`.
pub fn apply_sparse_on(family: &SparseFamily, f: &GridFunction, r: f64, out_window: &Cube) -> Result<GridFunction> {
    if r < 1.0 {
        return Err(Error::Precondition(format!("r = {r} < 1")));
    }
    f.lattice().ensure_same(&family.lattice)?;
    out_window.lattice.ensure_same(&family.lattice)?;
    if let Some((c, v)) = f.cells().find(|&(_, v)| v < 0.0) {
        return Err(Error::Negative { cell: c, value: v });
    }
    let powered = PrefixSums::of_function(f, |v| if r == 1.0 { v } else { v.powf(r) });
    let dim = family.lattice.dim;
    let ob = out_window.as_box();
    let wx = out_window.side as usize;
    let wy = if dim == 2 { out_window.side as usize } else { 1 };
    // difference arrays over the output window, one cell of padding per axis;
    // the integer one counts covering cubes
    let stride = wx + 1;
    let mut diff = vec![0.0; stride * (wy + 1)];
    let mut cover = vec![0i64; stride * (wy + 1)];
    for e in &family.entries {
        let c = e.cube.as_box().intersect(&ob);
        if c.is_empty() {
            continue;
        }
        let avg = powered.sum(&e.cube.as_box()) / e.cube.cell_count() as f64;
        let value = if r == 1.0 { avg } else { avg.max(0.0).powf(1.0 / r) };
        let x0 = (c.lo[0] - ob.lo[0]) as usize;
        let x1 = (c.hi[0] - ob.lo[0]) as usize;
        let (y0, y1) = if dim == 2 { ((c.lo[1] - ob.lo[1]) as usize, (c.hi[1] - ob.lo[1]) as usize) } else { (0, 1) };
        for (idx, sign) in [(y0 * stride + x0, 1.0), (y0 * stride + x1, -1.0), (y1 * stride + x0, -1.0), (y1 * stride + x1, 1.0)] {
            diff[idx] += sign * value;
            cover[idx] += sign as i64;
        }
    }
    let mut values = vec![0.0; wx * wy];
    let mut count = vec![0i64; wx * wy];
    for j in 0..wy {
        for i in 0..wx {
            let k = j * wx + i;
            let (mut v, mut c) = (diff[j * stride + i], cover[j * stride + i]);
            if i > 0 {
                v += values[k - 1];
                c += count[k - 1];
            }
            if j > 0 {
                v += values[k - wx];
                c += count[k - wx];
            }
            if i > 0 && j > 0 {
                v -= values[k - wx - 1];
                c -= count[k - wx - 1];
            }
            values[k] = v;
            count[k] = c;
        }
    }
    // prefix-summing the float array leaves ±ulp residue on uncovered cells
    for (v, c) in values.iter_mut().zip(&count) {
        if *c == 0 {
            *v = 0.0;
        }
    }
    GridFunction::new(*out_window, values)
}

/// `A_{r,S} f` on the window of `f`.
pub fn apply_sparse(family: &SparseFamily, f: &GridFunction, r: f64) -> Result<GridFunction> {
    apply_sparse_on(family, f, r, f.window())
}

/// Result of splitting a family over the shifted dyadic grids.
#[derive(Clone, Debug)]
pub struct GridDecomposition {
    /// One family per grid, indexed by grid id.
    pub families: Vec<SparseFamily>,
    /// `max (|Q'|/|Q|)^{1/r}` over all enlargements `Q ⊆ Q'`.
    pub constant: f64,
    /// For each source entry: (grid id, index within that grid's family).
    pub assignment: Vec<(usize, usize)>,
}

/// Moves each cube to the smallest containing cube of the first shifted
/// grid within a factor 6, keeping its witness. The result satisfies
/// `A_{r,S} f ≤ c Σ_j A_{r,S_j} f` with `c ≤ 6^{n/r}`, and each `S_j` is
/// `η/6^n`-sparse.
pub fn three_grid_decompose(family: &SparseFamily, r: f64) -> Result<GridDecomposition> {
    if r < 1.0 {
        return Err(Error::Precondition(format!("r = {r} < 1")));
    }
    let grids = shifted_grids(family.lattice);
    let scale = 6u64.pow(family.lattice.dim as u32);
    let eta = family.eta / scale;
    let mut families: Vec<SparseFamily> = grids
        .iter()
        .map(|g| SparseFamily { lattice: family.lattice, eta, grid_tag: Some(g.id), entries: Vec::new() })
        .collect();
    let mut constant: f64 = 0.0;
    let mut assignment = Vec::with_capacity(family.len());
    for e in &family.entries {
        let (id, big) = first_container(&grids, &e.cube)?;
        let ratio = big.cell_count() as f64 / e.cube.cell_count() as f64;
        constant = constant.max(ratio.powf(1.0 / r));
        assignment.push((id, families[id].entries.len()));
        families[id].push(big, e.witness.clone());
    }
    if family.is_empty() {
        constant = 1.0;
    }
    Ok(GridDecomposition { families, constant, assignment })
}

/// Cell box of a cube clipped to a window.
pub fn clipped(cube: &Cube, window: &Cube) -> LatticeBox {
    cube.as_box().intersect(&window.as_box())
}
