//! Piecewise-constant functions on the lattice cells of a window cube.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{Cube, Lattice, LatticeBox};

/// Values on the cells of `window`, row-major with axis 0 fastest.
/// Cells outside the window read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    window: Cube,
    values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TruncateMode {
    Keep,
    Drop,
}

impl GridFunction {
    pub fn new(window: Cube, values: Vec<f64>) -> Result<Self> {
        if values.len() as i64 != window.cell_count() {
            return Err(Error::Precondition(format!(
                "{} values for a window of {} cells",
                values.len(),
                window.cell_count()
            )));
        }
        Ok(GridFunction { window, values })
    }

    pub fn zeros(window: Cube) -> Self {
        GridFunction { window, values: vec![0.0; window.cell_count() as usize] }
    }

    /// Samples `f` at every cell center (physical coordinates).
    pub fn from_fn(window: Cube, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let lat = window.lattice;
        let values = window.cells().map(|c| f(lat.center(c))).collect();
        GridFunction { window, values }
    }

    pub fn window(&self) -> &Cube {
        &self.window
    }

    pub fn lattice(&self) -> Lattice {
        self.window.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Cells per side of the window.
    pub fn resolution(&self) -> i64 {
        self.window.side
    }

    pub fn index_of(&self, cell: [i64; 2]) -> Option<usize> {
        if !self.window.contains_cell(cell) {
            return None;
        }
        let s = self.window.side;
        let x = cell[0] - self.window.corner[0];
        let y = if self.window.dim() == 2 { cell[1] - self.window.corner[1] } else { 0 };
        Some((y * s + x) as usize)
    }

    pub fn cell_at(&self, index: usize) -> [i64; 2] {
        let s = self.window.side;
        let i = index as i64;
        if self.window.dim() == 2 {
            [self.window.corner[0] + i % s, self.window.corner[1] + i / s]
        } else {
            [self.window.corner[0] + i, 0]
        }
    }

    pub fn get(&self, cell: [i64; 2]) -> f64 {
        self.index_of(cell).map_or(0.0, |i| self.values[i])
    }

    pub fn cells(&self) -> impl Iterator<Item = ([i64; 2], f64)> + '_ {
        self.window.cells().zip(self.values.iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction { window: self.window, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn abs(&self) -> GridFunction {
        self.map(f64::abs)
    }

    /// Smallest box holding every nonzero cell.
    pub fn support_box(&self) -> Option<LatticeBox> {
        let dim = self.window.dim();
        let mut lo = [i64::MAX; 2];
        let mut hi = [i64::MIN; 2];
        let mut any = false;
        for (c, v) in self.cells() {
            if v != 0.0 {
                any = true;
                for i in 0..dim {
                    lo[i] = lo[i].min(c[i]);
                    hi[i] = hi[i].max(c[i] + 1);
                }
            }
        }
        any.then_some(LatticeBox { dim, lo, hi })
    }

    fn check_lattice(&self, q: &Cube) -> Result<()> {
        self.lattice().ensure_same(&q.lattice)
    }

    fn overlap(&self, q: &Cube) -> LatticeBox {
        q.as_box().intersect(&self.window.as_box())
    }

    /// Exact finite sum of `value * cell measure` over `q`.
    pub fn integral(&self, q: &Cube) -> Result<f64> {
        self.check_lattice(q)?;
        let sum: f64 = self.overlap(q).cells().map(|c| self.get(c)).sum();
        Ok(sum * self.lattice().cell_measure())
    }

    /// `(1/|Q|) ∫_Q f`.
    pub fn average(&self, q: &Cube) -> Result<f64> {
        self.check_lattice(q)?;
        let sum: f64 = self.overlap(q).cells().map(|c| self.get(c)).sum();
        Ok(sum / q.cell_count() as f64)
    }

    /// `((1/|Q|) ∫_Q f^r)^(1/r)` for `f >= 0` on `Q`.
    pub fn r_average(&self, q: &Cube, r: f64) -> Result<f64> {
        self.check_lattice(q)?;
        let mut sum = 0.0;
        for c in self.overlap(q).cells() {
            let v = self.get(c);
            if v < 0.0 {
                return Err(Error::Negative { cell: c, value: v });
            }
            sum += if r == 1.0 { v } else { v.powf(r) };
        }
        let mean = sum / q.cell_count() as f64;
        Ok(if r == 1.0 { mean } else { mean.powf(1.0 / r) })
    }

    /// Largest cell value on `q` (cells outside the window count as 0).
    pub fn max_on(&self, q: &Cube) -> Result<f64> {
        self.check_lattice(q)?;
        let inside = self.overlap(q);
        let mut m = if inside.cell_count() < q.cell_count() { 0.0 } else { f64::NEG_INFINITY };
        for c in inside.cells() {
            m = f64::max(m, self.get(c));
        }
        Ok(m)
    }

    /// `f * χ_A` with `A = ∪ cubes` (keep) or `window \ ∪ cubes` (drop).
    pub fn truncate(&self, cubes: &[Cube], mode: TruncateMode) -> Result<GridFunction> {
        for q in cubes {
            self.check_lattice(q)?;
        }
        let mut out = self.clone();
        for (i, c) in self.window.cells().enumerate() {
            let inside = cubes.iter().any(|q| q.contains_cell(c));
            if inside != (mode == TruncateMode::Keep) {
                out.values[i] = 0.0;
            }
        }
        Ok(out)
    }

    /// `(∫ |f|^p w)^(1/p)` over the window; `w` defaults to 1.
    pub fn lp_norm(&self, p: f64, w: Option<&GridFunction>) -> Result<f64> {
        if let Some(w) = w {
            self.lattice().ensure_same(&w.lattice())?;
            if let Some((c, v)) = w.cells().find(|&(_, v)| v <= 0.0) {
                return Err(Error::NonPositiveWeight { cell: c, value: v });
            }
        }
        let mut sum = 0.0;
        for (c, v) in self.cells() {
            let weight = w.map_or(1.0, |w| w.get(c));
            sum += v.abs().powf(p) * weight;
        }
        Ok((sum * self.lattice().cell_measure()).powf(1.0 / p))
    }

    /// CSV with header `cell_index,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell_index,value\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(s, "{i},{v:?}").unwrap();
        }
        s
    }

    pub fn from_csv(window: Cube, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("cell_index,value") {
            return Err(Error::Parse("missing CSV header 'cell_index,value'".into()));
        }
        let mut values = vec![0.0; window.cell_count() as usize];
        let mut seen = 0usize;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (idx, val) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad CSV row '{line}'")))?;
            let idx: usize = idx.trim().parse().map_err(|_| Error::Parse(format!("bad index '{idx}'")))?;
            let val: f64 = val.trim().parse().map_err(|_| Error::Parse(format!("bad value '{val}'")))?;
            *values
                .get_mut(idx)
                .ok_or_else(|| Error::Parse(format!("index {idx} outside window")))? = val;
            seen += 1;
        }
        if seen != values.len() {
            return Err(Error::Parse(format!("expected {} rows, found {seen}", values.len())));
        }
        GridFunction::new(window, values)
    }

    /// Self-describing text: a header with lattice and window, then one value per line.
    pub fn to_text(&self) -> String {
        let w = &self.window;
        let corner: Vec<String> = w.corner[..w.dim()].iter().map(|c| c.to_string()).collect();
        let mut s = format!(
            "grid-function v1\ndim {}\nlevel {}\nwindow {} {}\nvalues {}\n",
            w.dim(),
            w.lattice.level,
            corner.join(" "),
            w.side,
            self.values.len()
        );
        for v in &self.values {
            writeln!(s, "{v:?}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |key: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing '{key}' line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(Error::Parse(format!("expected '{key}', found '{line}'")));
            }
            Ok(parts.map(String::from).collect())
        };
        let magic = next("grid-function")?;
        if magic != ["v1"] {
            return Err(Error::Parse("unsupported grid-function version".into()));
        }
        let int = |s: &str| s.parse::<i64>().map_err(|_| Error::Parse(format!("bad integer '{s}'")));
        let dim = int(next("dim")?.first().map_or("", |s| s.as_str()))? as usize;
        let level = int(next("level")?.first().map_or("", |s| s.as_str()))? as u32;
        let win = next("window")?;
        if win.len() != dim + 1 {
            return Err(Error::Parse("window needs corner coordinates and a side".into()));
        }
        let corner = win[..dim].iter().map(|s| int(s)).collect::<Result<Vec<_>>>()?;
        let side = int(&win[dim])?;
        let window = Cube::new(Lattice::new(dim, level)?, &corner, side)?;
        let count = int(next("values")?.first().map_or("", |s| s.as_str()))? as usize;
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad value '{l}'"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != count {
            return Err(Error::Parse(format!("expected {count} values, found {}", values.len())));
        }
        GridFunction::new(window, values)
    }
}

/// Summed-area table over a box, for O(1) clipped box integrals.
#[derive(Clone, Debug)]
pub struct PrefixSums {
    bx: LatticeBox,
    stride: usize,
    sat: Vec<f64>,
}

impl PrefixSums {
    /// Table of `value(cell)` over the cells of `bx`.
    pub fn new(bx: LatticeBox, mut value: impl FnMut([i64; 2]) -> f64) -> Self {
        let wx = (bx.hi[0] - bx.lo[0]).max(0) as usize;
        let wy = if bx.dim == 2 { (bx.hi[1] - bx.lo[1]).max(0) as usize } else { 1 };
        let stride = wx + 1;
        let mut sat = vec![0.0; stride * (wy + 1)];
        for j in 0..wy {
            let mut row = 0.0;
            for i in 0..wx {
                let cell = [bx.lo[0] + i as i64, if bx.dim == 2 { bx.lo[1] + j as i64 } else { 0 }];
                row += value(cell);
                sat[(j + 1) * stride + i + 1] = sat[j * stride + i + 1] + row;
            }
        }
        PrefixSums { bx, stride, sat }
    }

    pub fn of_function(f: &GridFunction, map: impl Fn(f64) -> f64) -> Self {
        Self::new(f.window().as_box(), |c| map(f.get(c)))
    }

    pub fn domain(&self) -> &LatticeBox {
        &self.bx
    }

    /// Sum of the tabulated values over `b ∩ domain`.
    pub fn sum(&self, b: &LatticeBox) -> f64 {
        let c = b.intersect(&self.bx);
        if c.is_empty() {
            return 0.0;
        }
        let x0 = (c.lo[0] - self.bx.lo[0]) as usize;
        let x1 = (c.hi[0] - self.bx.lo[0]) as usize;
        let (y0, y1) = if self.bx.dim == 2 {
            ((c.lo[1] - self.bx.lo[1]) as usize, (c.hi[1] - self.bx.lo[1]) as usize)
        } else {
            (0, 1)
        };
        let s = self.stride;
        self.sat[y1 * s + x1] - self.sat[y0 * s + x1] - self.sat[y1 * s + x0] + self.sat[y0 * s + x0]
    }

    pub fn total(&self) -> f64 {
        self.sum(&self.bx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_window(level: u32) -> Cube {
        Cube::unit(Lattice::new(1, level).unwrap())
    }

    fn indicator(window: Cube, a: f64, b: f64) -> GridFunction {
        GridFunction::from_fn(window, |x| if a <= x[0] && x[0] < b { 1.0 } else { 0.0 })
    }

    #[test]
    fn average_examples() {
        let w = unit_window(4);
        let lat = w.lattice;
        let one = GridFunction::from_fn(w, |_| 1.0);
        assert_eq!(one.average(&w).unwrap(), 1.0);
        let half = indicator(w, 0.0, 0.5);
        assert_eq!(half.average(&w).unwrap(), 0.5);
        let wide = Cube::from_units(lat, &[-1.0], 3.0).unwrap();
        assert!((one.average(&wide).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn average_rejects_foreign_lattice() {
        let f = GridFunction::zeros(unit_window(4));
        let q = unit_window(5);
        assert!(matches!(f.average(&q), Err(Error::LatticeMismatch { .. })));
    }

    #[test]
    fn r_average_examples() {
        let w = unit_window(4);
        let f = indicator(w, 0.0, 0.25);
        assert!((f.r_average(&w, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(f.r_average(&w, 1.0).unwrap(), 0.25);
        let c = GridFunction::from_fn(w, |_| 0.7);
        for r in [1.0, 1.5, 2.0, 3.0] {
            assert!((c.r_average(&w, r).unwrap() - 0.7).abs() < 1e-15);
        }
        let neg = GridFunction::from_fn(w, |x| x[0] - 0.5);
        assert!(matches!(neg.r_average(&w, 2.0), Err(Error::Negative { .. })));
    }

    #[test]
    fn truncate_examples() {
        let w = unit_window(3);
        let f = GridFunction::from_fn(w, |x| 1.0 + x[0]);
        assert_eq!(f.truncate(&[w], TruncateMode::Keep).unwrap(), f);
        assert!(f.truncate(&[w], TruncateMode::Drop).unwrap().values().iter().all(|&v| v == 0.0));
        let one = indicator(w, 0.0, 1.0);
        let left = Cube::from_units(w.lattice, &[0.0], 0.5).unwrap();
        assert_eq!(one.truncate(&[left], TruncateMode::Keep).unwrap(), indicator(w, 0.0, 0.5));
    }

    #[test]
    fn lp_norm_examples() {
        let w = unit_window(4);
        let one = indicator(w, 0.0, 1.0);
        assert!((one.lp_norm(2.0, None).unwrap() - 1.0).abs() < 1e-15);
        let half = indicator(w, 0.0, 0.5);
        assert!((half.lp_norm(2.0, None).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        let two = GridFunction::from_fn(w, |_| 2.0);
        assert!((one.lp_norm(1.0, Some(&two)).unwrap() - 2.0).abs() < 1e-15);
        let bad = GridFunction::zeros(w);
        assert!(matches!(one.lp_norm(1.0, Some(&bad)), Err(Error::NonPositiveWeight { .. })));
    }

    #[test]
    fn text_and_csv_round_trip() {
        let lat = Lattice::new(2, 2).unwrap();
        let w = Cube::new(lat, &[-1, 2], 4).unwrap();
        let f = GridFunction::from_fn(w, |x| (x[0] * 3.1).sin() + x[1] / 7.0);
        let text = f.to_text();
        let g = GridFunction::from_text(&text).unwrap();
        assert_eq!(g, f);
        assert_eq!(g.to_text(), text);
        let h = GridFunction::from_csv(w, &f.to_csv()).unwrap();
        assert_eq!(h, f);
        assert!(GridFunction::from_text("grid-function v1\ndim 1\n").is_err());
    }

    #[test]
    fn prefix_sums_match_direct_integrals() {
        let lat = Lattice::new(2, 3).unwrap();
        let w = Cube::new(lat, &[0, 0], 8).unwrap();
        let f = GridFunction::from_fn(w, |x| x[0] * x[0] + 2.0 * x[1]);
        let ps = PrefixSums::of_function(&f, |v| v);
        let q = Cube::new(lat, &[-2, 3], 6).unwrap();
        let direct = f.integral(&q).unwrap() / lat.cell_measure();
        assert!((ps.sum(&q.as_box()) - direct).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn r_average_is_monotone_in_r(vals in proptest::collection::vec(0.0f64..10.0, 16)) {
            let w = unit_window(4);
            let f = GridFunction::new(w, vals).unwrap();
            let rs = [1.0, 1.5, 2.0, 3.0];
            let avgs: Vec<f64> = rs.iter().map(|&r| f.r_average(&w, r).unwrap()).collect();
            for k in 1..avgs.len() {
                prop_assert!(avgs[k] >= avgs[k - 1] * (1.0 - 1e-12));
            }
        }

        #[test]
        fn average_is_linear_and_bounded(a in proptest::collection::vec(-5.0f64..5.0, 16),
                                         b in proptest::collection::vec(-5.0f64..5.0, 16),
                                         lambda in -3.0f64..3.0, start in 0i64..12, side in 1i64..4) {
            let w = unit_window(4);
            let q = Cube::new(w.lattice, &[start], side).unwrap();
            let f = GridFunction::new(w, a).unwrap();
            let g = GridFunction::new(w, b).unwrap();
            let combo = GridFunction::new(w, f.values().iter().zip(g.values()).map(|(x, y)| x + lambda * y).collect()).unwrap();
            let lhs = combo.average(&q).unwrap();
            let rhs = f.average(&q).unwrap() + lambda * g.average(&q).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
            let vals: Vec<f64> = q.cells().map(|c| f.get(c)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let avg = f.average(&q).unwrap();
            prop_assert!(lo - 1e-12 <= avg && avg <= hi + 1e-12);
        }

        #[test]
        fn keep_plus_drop_is_identity(vals in proptest::collection::vec(-5.0f64..5.0, 16), start in 0i64..16, side in 1i64..8) {
            let w = unit_window(4);
            let f = GridFunction::new(w, vals).unwrap();
            let q = Cube::new(w.lattice, &[start], side).unwrap();
            let keep = f.truncate(&[q], TruncateMode::Keep).unwrap();
            let drop = f.truncate(&[q], TruncateMode::Drop).unwrap();
            for i in 0..16 {
                prop_assert_eq!(keep.values()[i] + drop.values()[i], f.values()[i]);
            }
        }
    }
}
