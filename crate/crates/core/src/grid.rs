//! Exact lattice geometry: half-open cubes, lattice sets, the shifted dyadic
//! grids and the ring partition used to globalize local estimates.
//!
//! Every coordinate is an integer in units of `2^-level` of the reference
//! scale, so containment, disjointness and measure are integer computations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported resolution exponent.
pub const MAX_LEVEL: u32 = 24;

/// Largest scale index of the shifted grids (cube side `3 * 2^MAX_GRID_SCALE`).
pub const MAX_GRID_SCALE: u32 = 40;

/// Dimension and resolution shared by every object on one lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    pub dim: usize,
    pub level: u32,
}

impl Lattice {
    pub fn new(dim: usize, level: u32) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Precondition(format!("dimension {dim} not in {{1, 2}}")));
        }
        if level > MAX_LEVEL {
            return Err(Error::Precondition(format!("level {level} exceeds {MAX_LEVEL}")));
        }
        Ok(Lattice { dim, level })
    }

    /// Cells per unit length.
    pub fn cells_per_unit(&self) -> i64 {
        1i64 << self.level
    }

    /// Physical side of one cell; a power of two, so scaling by it is exact.
    pub fn cell_size(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    /// Physical measure of one cell.
    pub fn cell_measure(&self) -> f64 {
        self.cell_size().powi(self.dim as i32)
    }

    /// Physical coordinates of the center of a lattice cell.
    pub fn center(&self, cell: [i64; 2]) -> [f64; 2] {
        let h = self.cell_size();
        let mut c = [0.0; 2];
        for i in 0..self.dim {
            c[i] = (cell[i] as f64 + 0.5) * h;
        }
        c
    }

    /// Lattice units for a physical coordinate, if it is lattice-aligned.
    pub fn to_units(&self, x: f64) -> Option<i64> {
        let scaled = x * self.cells_per_unit() as f64;
        if scaled.fract() == 0.0 && scaled.abs() < 9.0e15 {
            Some(scaled as i64)
        } else {
            None
        }
    }

    pub fn ensure_same(&self, other: &Lattice) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::LatticeMismatch { expected: *self, found: *other })
        }
    }

    /// The same lattice one level finer.
    pub fn refined(&self) -> Result<Lattice> {
        Lattice::new(self.dim, self.level + 1)
    }
}

/// Axis-aligned integer box `[lo, hi)`, used for clipped cube intersections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatticeBox {
    pub dim: usize,
    pub lo: [i64; 2],
    pub hi: [i64; 2],
}

impl LatticeBox {
    pub fn is_empty(&self) -> bool {
        (0..self.dim).any(|i| self.lo[i] >= self.hi[i])
    }

    pub fn intersect(&self, other: &LatticeBox) -> LatticeBox {
        let mut out = *self;
        for i in 0..self.dim {
            out.lo[i] = self.lo[i].max(other.lo[i]);
            out.hi[i] = self.hi[i].min(other.hi[i]);
        }
        out
    }

    pub fn contains_cell(&self, cell: [i64; 2]) -> bool {
        (0..self.dim).all(|i| self.lo[i] <= cell[i] && cell[i] < self.hi[i])
    }

    pub fn contains_box(&self, other: &LatticeBox) -> bool {
        other.is_empty() || (0..self.dim).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }

    pub fn cell_count(&self) -> i64 {
        if self.is_empty() {
            return 0;
        }
        (0..self.dim).map(|i| self.hi[i] - self.lo[i]).product()
    }

    /// Cells in row-major order, axis 0 fastest.
    pub fn cells(&self) -> impl Iterator<Item = [i64; 2]> + '_ {
        let b = *self;
        let (y0, y1) = if b.dim == 2 { (b.lo[1], b.hi[1]) } else { (0, 1) };
        let empty = b.is_empty();
        (y0..y1)
            .flat_map(move |y| (b.lo[0]..b.hi[0]).map(move |x| [x, y]))
            .filter(move |_| !empty)
    }
}

/// Half-open cube `prod [corner_i, corner_i + side)` in lattice units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cube {
    pub lattice: Lattice,
    pub corner: [i64; 2],
    pub side: i64,
}

impl Cube {
    pub fn new(lattice: Lattice, corner: &[i64], side: i64) -> Result<Self> {
        if side < 1 {
            return Err(Error::InvalidCube(format!("side {side} < 1")));
        }
        if corner.len() != lattice.dim {
            return Err(Error::InvalidCube(format!(
                "corner has {} coordinates, lattice dimension is {}",
                corner.len(),
                lattice.dim
            )));
        }
        let mut c = [0i64; 2];
        c[..lattice.dim].copy_from_slice(corner);
        Ok(Cube { lattice, corner: c, side })
    }

    /// The unit cube `[0, 1)^n`.
    pub fn unit(lattice: Lattice) -> Self {
        Cube { lattice, corner: [0, 0], side: lattice.cells_per_unit() }
    }

    /// A cube given in physical units; fails unless exactly lattice-aligned.
    pub fn from_units(lattice: Lattice, corner: &[f64], side: f64) -> Result<Self> {
        let s = lattice
            .to_units(side)
            .ok_or_else(|| Error::InvalidCube(format!("side {side} is not lattice-aligned")))?;
        let mut c = Vec::with_capacity(corner.len());
        for &x in corner {
            c.push(
                lattice
                    .to_units(x)
                    .ok_or_else(|| Error::InvalidCube(format!("corner {x} is not lattice-aligned")))?,
            );
        }
        Cube::new(lattice, &c, s)
    }

    /// The single lattice cell at `cell`.
    pub fn cell(lattice: Lattice, cell: [i64; 2]) -> Self {
        Cube { lattice, corner: cell, side: 1 }
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim
    }

    pub fn cell_count(&self) -> i64 {
        self.side.pow(self.dim() as u32)
    }

    /// Physical measure `side^n * 2^(-n L)`.
    pub fn measure(&self) -> f64 {
        self.cell_count() as f64 * self.lattice.cell_measure()
    }

    pub fn as_box(&self) -> LatticeBox {
        let mut hi = self.corner;
        for h in hi.iter_mut().take(self.dim()) {
            *h += self.side;
        }
        LatticeBox { dim: self.dim(), lo: self.corner, hi }
    }

    pub fn contains_cell(&self, cell: [i64; 2]) -> bool {
        self.as_box().contains_cell(cell)
    }

    pub fn contains(&self, other: &Cube) -> bool {
        self.lattice == other.lattice && self.as_box().contains_box(&other.as_box())
    }

    pub fn intersects(&self, other: &Cube) -> bool {
        !self.as_box().intersect(&other.as_box()).is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = [i64; 2]> {
        let b = self.as_box();
        let (y0, y1) = if b.dim == 2 { (b.lo[1], b.hi[1]) } else { (0, 1) };
        (y0..y1).flat_map(move |y| (b.lo[0]..b.hi[0]).map(move |x| [x, y]))
    }

    /// Physical center.
    pub fn center(&self) -> [f64; 2] {
        let h = self.lattice.cell_size();
        let mut c = [0.0; 2];
        for i in 0..self.dim() {
            c[i] = (self.corner[i] as f64 + 0.5 * self.side as f64) * h;
        }
        c
    }

    /// The `2^n` dyadic children. Fails when the side is odd, since the
    /// halves would not be lattice-aligned; re-express at a finer level first.
    pub fn children(&self) -> Result<Vec<Cube>> {
        if self.side % 2 != 0 {
            return Err(Error::ResolutionFloor { side: self.side });
        }
        let half = self.side / 2;
        let mut out = Vec::with_capacity(1 << self.dim());
        let ys: &[i64] = if self.dim() == 2 { &[0, 1] } else { &[0] };
        for &dy in ys {
            for dx in 0..2 {
                let mut corner = self.corner;
                corner[0] += dx * half;
                if self.dim() == 2 {
                    corner[1] += dy * half;
                }
                out.push(Cube { lattice: self.lattice, corner, side: half });
            }
        }
        Ok(out)
    }

    /// Concentric cube with `factor` times the side. `factor` must be odd.
    pub fn dilate(&self, factor: i64) -> Cube {
        assert!(factor > 0 && factor % 2 == 1, "dilation factor must be odd and positive");
        let shift = (factor - 1) / 2 * self.side;
        let mut corner = self.corner;
        for c in corner.iter_mut().take(self.dim()) {
            *c -= shift;
        }
        Cube { lattice: self.lattice, corner, side: self.side * factor }
    }

    /// The same cube on the next finer lattice.
    pub fn refined(&self) -> Result<Cube> {
        let lattice = self.lattice.refined()?;
        let mut corner = self.corner;
        for c in corner.iter_mut() {
            *c *= 2;
        }
        Ok(Cube { lattice, corner, side: self.side * 2 })
    }

    /// Whether `self` belongs to `D(ancestor)`: it is obtained from
    /// `ancestor` by repeated halving.
    pub fn is_dyadic_in(&self, ancestor: &Cube) -> bool {
        if !ancestor.contains(self) || ancestor.side % self.side != 0 {
            return false;
        }
        let ratio = ancestor.side / self.side;
        if ratio & (ratio - 1) != 0 {
            return false;
        }
        (0..self.dim()).all(|i| (self.corner[i] - ancestor.corner[i]) % self.side == 0)
    }
}

/// One maximal run of cells `start..end` along axis 0 in a fixed `row`
/// (the axis-1 coordinate; always 0 in one dimension).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Run {
    pub row: i64,
    pub start: i64,
    pub end: i64,
}

/// A finite set of lattice cells, stored as sorted, non-touching runs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticeSet {
    pub lattice: Lattice,
    runs: Vec<Run>,
}

impl LatticeSet {
    pub fn empty(lattice: Lattice) -> Self {
        LatticeSet { lattice, runs: Vec::new() }
    }

    pub fn from_cube(cube: &Cube) -> Self {
        Self::from_box(cube.lattice, &cube.as_box())
    }

    pub fn from_box(lattice: Lattice, b: &LatticeBox) -> Self {
        if b.is_empty() {
            return Self::empty(lattice);
        }
        let (y0, y1) = if lattice.dim == 2 { (b.lo[1], b.hi[1]) } else { (0, 1) };
        let runs = (y0..y1).map(|row| Run { row, start: b.lo[0], end: b.hi[0] }).collect();
        LatticeSet { lattice, runs }
    }

    pub fn from_runs(lattice: Lattice, runs: impl IntoIterator<Item = Run>) -> Self {
        let mut runs: Vec<Run> = runs.into_iter().filter(|r| r.start < r.end).collect();
        runs.sort_unstable();
        let mut merged: Vec<Run> = Vec::with_capacity(runs.len());
        for r in runs {
            match merged.last_mut() {
                Some(last) if last.row == r.row && r.start <= last.end => {
                    last.end = last.end.max(r.end);
                }
                _ => merged.push(r),
            }
        }
        LatticeSet { lattice, runs: merged }
    }

    pub fn from_cells(lattice: Lattice, cells: impl IntoIterator<Item = [i64; 2]>) -> Self {
        Self::from_runs(
            lattice,
            cells.into_iter().map(|c| Run { row: c[1], start: c[0], end: c[0] + 1 }),
        )
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn len(&self) -> i64 {
        self.runs.iter().map(|r| r.end - r.start).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.len() as f64 * self.lattice.cell_measure()
    }

    pub fn contains_cell(&self, cell: [i64; 2]) -> bool {
        let key = (cell[1], cell[0]);
        let idx = self.runs.partition_point(|r| (r.row, r.start) <= key);
        idx > 0 && {
            let r = self.runs[idx - 1];
            r.row == cell[1] && cell[0] < r.end
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = [i64; 2]> + '_ {
        self.runs.iter().flat_map(|r| (r.start..r.end).map(move |x| [x, r.row]))
    }

    pub fn union(&self, other: &LatticeSet) -> LatticeSet {
        Self::from_runs(self.lattice, self.runs.iter().chain(other.runs.iter()).copied())
    }

    pub fn intersection(&self, other: &LatticeSet) -> LatticeSet {
        let (a, b) = (&self.runs, &other.runs);
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < a.len() && j < b.len() {
            let (ra, rb) = (a[i], b[j]);
            if ra.row == rb.row {
                let s = ra.start.max(rb.start);
                let e = ra.end.min(rb.end);
                if s < e {
                    out.push(Run { row: ra.row, start: s, end: e });
                }
            }
            if (ra.row, ra.end) < (rb.row, rb.end) {
                i += 1;
            } else {
                j += 1;
            }
        }
        LatticeSet { lattice: self.lattice, runs: out }
    }

    pub fn difference(&self, other: &LatticeSet) -> LatticeSet {
        let b = &other.runs;
        let mut j = 0;
        let mut out = Vec::new();
        for &ra in &self.runs {
            while j < b.len() && (b[j].row, b[j].end) <= (ra.row, ra.start) {
                j += 1;
            }
            let mut cursor = ra.start;
            let mut k = j;
            while k < b.len() && b[k].row == ra.row && b[k].start < ra.end {
                if b[k].start > cursor {
                    out.push(Run { row: ra.row, start: cursor, end: b[k].start });
                }
                cursor = cursor.max(b[k].end);
                k += 1;
            }
            if cursor < ra.end {
                out.push(Run { row: ra.row, start: cursor, end: ra.end });
            }
        }
        LatticeSet { lattice: self.lattice, runs: out }
    }

    pub fn intersect_cube(&self, cube: &Cube) -> LatticeSet {
        self.intersection(&LatticeSet::from_cube(cube))
    }

    pub fn is_disjoint(&self, other: &LatticeSet) -> bool {
        self.intersection(other).is_empty()
    }

    pub fn is_subset_of_cube(&self, cube: &Cube) -> bool {
        let b = cube.as_box();
        self.runs.iter().all(|r| {
            r.start >= b.lo[0]
                && r.end <= b.hi[0]
                && (self.lattice.dim == 1 || (b.lo[1] <= r.row && r.row < b.hi[1]))
        })
    }
}

/// Returns the first pair of indices whose sets overlap, if any.
pub fn first_overlap(sets: &[&LatticeSet]) -> Option<(usize, usize)> {
    let mut all: Vec<(Run, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(owner, s)| s.runs.iter().map(move |&r| (r, owner)))
        .collect();
    all.sort_unstable();
    // (row, max end so far, owner of that run)
    let mut current: Option<(i64, i64, usize)> = None;
    for (r, owner) in all {
        match current {
            Some((row, end, prev)) if row == r.row && r.start < end => {
                return Some((prev.min(owner), prev.max(owner)));
            }
            _ => current = Some((r.row, r.end, owner)),
        }
    }
    None
}

/// One of the `3^n` shifted dyadic grids.
///
/// At scale `j >= 0` the grid consists of cubes of side `3 * 2^j` cells whose
/// corners sit at `3 * 2^j * m + (-1)^j * shift * 2^j` on every axis, with
/// `shift` in `{0, 1, 2}` per axis. Consecutive scales nest, and every
/// lattice cube of side `l` lies in a cube of one of the grids with side at
/// most `6 l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub lattice: Lattice,
    pub id: usize,
    pub shift: [u8; 2],
}

impl DyadicGrid {
    pub fn side_at(scale: u32) -> i64 {
        3i64 << scale
    }

    fn offset(&self, scale: u32, axis: usize) -> i64 {
        let mag = (self.shift[axis] as i64) << scale;
        if scale.is_multiple_of(2) {
            mag
        } else {
            -mag
        }
    }

    /// Grid cube of the given scale containing `cell`.
    pub fn cube_containing(&self, cell: [i64; 2], scale: u32) -> Cube {
        let side = Self::side_at(scale);
        let mut corner = [0i64; 2];
        for i in 0..self.lattice.dim {
            let off = self.offset(scale, i);
            corner[i] = (cell[i] - off).div_euclid(side) * side + off;
        }
        Cube { lattice: self.lattice, corner, side }
    }

    /// Smallest cube of this grid containing `q`.
    pub fn container(&self, q: &Cube) -> Option<Cube> {
        let first = (0..=MAX_GRID_SCALE).find(|&j| Self::side_at(j) >= q.side)?;
        (first..=MAX_GRID_SCALE)
            .map(|j| self.cube_containing(q.corner, j))
            .find(|c| c.contains(q))
    }
}

/// The `3^n` shifted grids, identified by `shift[0] + 3 * shift[1]`.
pub fn shifted_grids(lattice: Lattice) -> Vec<DyadicGrid> {
    let count = 3usize.pow(lattice.dim as u32);
    (0..count)
        .map(|id| DyadicGrid { lattice, id, shift: [(id % 3) as u8, (id / 3 % 3) as u8] })
        .collect()
}

/// First grid (by id) whose containing cube has side at most `6 * q.side`.
pub fn first_container(grids: &[DyadicGrid], q: &Cube) -> Result<(usize, Cube)> {
    grids
        .iter()
        .find_map(|g| g.container(q).filter(|c| c.side <= 6 * q.side).map(|c| (g.id, c)))
        .ok_or(Error::ScaleRange { side: q.side })
}

/// `Q0` followed by `rings` rings of congruent cubes: ring `k` covers
/// `3^k Q0 \ 3^(k-1) Q0` with `3^n - 1` cubes of side `3^(k-1) side(Q0)`.
/// For each returned cube `R`, `Q0 ⊆ 3R`.
pub fn cover_partition(q0: &Cube, rings: usize) -> Vec<Cube> {
    let mut out = vec![*q0];
    let dim = q0.dim();
    for k in 1..=rings {
        let inner = q0.dilate(3i64.pow(k as u32 - 1));
        let outer = inner.dilate(3);
        let s = inner.side;
        let ys: &[i64] = if dim == 2 { &[0, 1, 2] } else { &[0] };
        for &b in ys {
            for a in 0..3 {
                if a == 1 && (dim == 1 || b == 1) {
                    continue;
                }
                let mut corner = outer.corner;
                corner[0] += a * s;
                if dim == 2 {
                    corner[1] += b * s;
                }
                out.push(Cube { lattice: q0.lattice, corner, side: s });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn l1(level: u32) -> Lattice {
        Lattice::new(1, level).unwrap()
    }

    #[test]
    fn children_bisect_unit_interval() {
        let q = Cube::unit(l1(1));
        let kids = q.children().unwrap();
        assert_eq!(kids.len(), 2);
        assert_eq!(kids[0], Cube::new(l1(1), &[0], 1).unwrap());
        assert_eq!(kids[1], Cube::new(l1(1), &[1], 1).unwrap());
    }

    #[test]
    fn children_of_square_are_four_quarters() {
        let lat = Lattice::new(2, 3).unwrap();
        let q = Cube::unit(lat);
        let kids = q.children().unwrap();
        assert_eq!(kids.len(), 4);
        assert!(kids.iter().all(|k| k.side == 4 && q.contains(k)));
        let sets: Vec<LatticeSet> = kids.iter().map(LatticeSet::from_cube).collect();
        assert_eq!(first_overlap(&sets.iter().collect::<Vec<_>>()), None);
        assert_eq!(sets.iter().map(|s| s.len()).sum::<i64>(), q.cell_count());
    }

    #[test]
    fn unit_cell_hits_resolution_floor() {
        let q = Cube::unit(l1(0));
        assert!(matches!(q.children(), Err(Error::ResolutionFloor { side: 1 })));
    }

    #[test]
    fn dilation_examples() {
        let lat = l1(0);
        let q = Cube::unit(lat);
        assert_eq!(q.dilate(3), Cube::new(lat, &[-1], 3).unwrap());
        assert_eq!(q.dilate(9), Cube::new(lat, &[-4], 9).unwrap());
        let q = Cube::new(lat, &[2], 2).unwrap();
        assert_eq!(q.dilate(3), Cube::new(lat, &[0], 6).unwrap());
    }

    #[test]
    fn cover_partition_examples() {
        let lat = l1(0);
        let q0 = Cube::unit(lat);
        assert_eq!(cover_partition(&q0, 0), vec![q0]);
        let one = cover_partition(&q0, 1);
        assert_eq!(
            one,
            vec![q0, Cube::new(lat, &[-1], 1).unwrap(), Cube::new(lat, &[1], 1).unwrap()]
        );
        let two = cover_partition(&q0, 2);
        assert_eq!(&two[..3], &one[..]);
        assert_eq!(
            &two[3..],
            &[Cube::new(lat, &[-4], 3).unwrap(), Cube::new(lat, &[2], 3).unwrap()]
        );
    }

    #[test]
    fn cover_partition_tiles_and_covers_support() {
        for dim in 1..=2 {
            let lat = Lattice::new(dim, 2).unwrap();
            let q0 = Cube::unit(lat);
            for rings in 0..=3 {
                let parts = cover_partition(&q0, rings);
                let sets: Vec<LatticeSet> = parts.iter().map(LatticeSet::from_cube).collect();
                assert_eq!(first_overlap(&sets.iter().collect::<Vec<_>>()), None);
                let total: i64 = sets.iter().map(|s| s.len()).sum();
                assert_eq!(total, q0.dilate(3i64.pow(rings as u32)).cell_count());
                assert_eq!(parts.len(), 1 + rings * (3usize.pow(dim as u32) - 1));
                for r in &parts {
                    assert!(r.dilate(3).contains(&q0));
                }
            }
        }
    }

    #[test]
    fn grid_counts() {
        assert_eq!(shifted_grids(l1(4)).len(), 3);
        assert_eq!(shifted_grids(Lattice::new(2, 4).unwrap()).len(), 9);
    }

    #[test]
    fn grids_nest_across_scales() {
        for g in shifted_grids(Lattice::new(2, 4).unwrap()) {
            for j in 0..6 {
                for x in -40..40 {
                    let cell = [x, 3 * x - 7];
                    let small = g.cube_containing(cell, j);
                    let big = g.cube_containing(cell, j + 1);
                    assert!(big.contains(&small));
                    assert!(small.is_dyadic_in(&big));
                }
            }
        }
    }

    #[test]
    fn grid_cubes_tile_each_scale() {
        let lat = l1(0);
        for g in shifted_grids(lat) {
            for j in 0..5 {
                for x in -100..100 {
                    let c = g.cube_containing([x, 0], j);
                    assert!(c.contains_cell([x, 0]));
                    // any other cell of c maps back to c
                    assert_eq!(g.cube_containing([c.corner[0] + c.side - 1, 0], j), c);
                }
            }
        }
    }

    #[test]
    fn shifted_grid_containment_exhaustive_1d() {
        // every interval of side 1..=2^10 at every offset modulo the largest period
        let lat = l1(10);
        let grids = shifted_grids(lat);
        for side in 1..=1024i64 {
            let period = 3 * 2 * (side as u64).next_power_of_two() as i64;
            for a in 0..period.min(6 * 1024) {
                let q = Cube::new(lat, &[a - period / 2], side).unwrap();
                let (_, c) = first_container(&grids, &q).unwrap();
                assert!(c.contains(&q) && c.side <= 6 * side);
            }
        }
    }

    #[test]
    fn interval_point_four_to_point_six() {
        // [0.4, 0.6) is not lattice-aligned at any dyadic level; use the
        // nearest lattice interval [0.40039, 0.59961) at level 10.
        let lat = l1(10);
        let q = Cube::new(lat, &[410], 204).unwrap();
        let (_, c) = first_container(&shifted_grids(lat), &q).unwrap();
        assert!(c.contains(&q));
        assert!(c.measure() <= 6.0 * q.measure() + 1e-12);
    }

    #[test]
    fn lattice_set_algebra() {
        let lat = l1(0);
        let a = LatticeSet::from_runs(lat, [Run { row: 0, start: 0, end: 10 }]);
        let b = LatticeSet::from_runs(lat, [Run { row: 0, start: 3, end: 5 }, Run { row: 0, start: 8, end: 12 }]);
        assert_eq!(a.intersection(&b).len(), 4);
        assert_eq!(a.difference(&b).len(), 6);
        assert_eq!(a.union(&b).len(), 12);
        assert!(a.contains_cell([9, 0]) && !a.contains_cell([10, 0]));
        assert!(!a.is_disjoint(&b));
        assert_eq!(
            a.difference(&b).runs(),
            &[Run { row: 0, start: 0, end: 3 }, Run { row: 0, start: 5, end: 8 }]
        );
    }

    proptest! {
        #[test]
        fn dilation_scales_measure_exactly(x in -1000i64..1000, y in -1000i64..1000, s in 1i64..500, dim in 1usize..=2) {
            let lat = Lattice::new(dim, 6).unwrap();
            let corner = [x, y];
            let q = Cube::new(lat, &corner[..dim], s).unwrap();
            let d = q.dilate(3);
            prop_assert_eq!(d.cell_count(), 3i64.pow(dim as u32) * q.cell_count());
            prop_assert!(d.contains(&q));
            prop_assert_eq!(d.center(), q.center());
        }

        #[test]
        fn grid_containment_2d(x in -5000i64..5000, y in -5000i64..5000, s in 1i64..700) {
            let lat = Lattice::new(2, 6).unwrap();
            let q = Cube::new(lat, &[x, y], s).unwrap();
            let (_, c) = first_container(&shifted_grids(lat), &q).unwrap();
            prop_assert!(c.contains(&q) && c.side <= 6 * s);
        }

        #[test]
        fn set_ops_agree_with_cellwise(cells_a in proptest::collection::vec((0i64..20, 0i64..3), 0..40),
                                       cells_b in proptest::collection::vec((0i64..20, 0i64..3), 0..40)) {
            let lat = Lattice::new(2, 0).unwrap();
            let a = LatticeSet::from_cells(lat, cells_a.iter().map(|&(x, y)| [x, y]));
            let b = LatticeSet::from_cells(lat, cells_b.iter().map(|&(x, y)| [x, y]));
            let i = a.intersection(&b);
            let d = a.difference(&b);
            let u = a.union(&b);
            for x in 0..20 {
                for y in 0..3 {
                    let (ia, ib) = (a.contains_cell([x, y]), b.contains_cell([x, y]));
                    prop_assert_eq!(i.contains_cell([x, y]), ia && ib);
                    prop_assert_eq!(d.contains_cell([x, y]), ia && !ib);
                    prop_assert_eq!(u.contains_cell([x, y]), ia || ib);
                }
            }
            prop_assert_eq!(first_overlap(&[&a, &b]).is_none(), i.is_empty());
        }
    }
}
