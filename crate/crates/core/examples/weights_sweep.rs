//! Weighted norm of a sparse operator under power weights `|x - 1/2|^α`:
//! growth in `[w]_{A_2}` and the per-cube inequality chain.

use sparse_dominator::domination::{global_dominate, DominationOptions};
use sparse_dominator::function::GridFunction;
use sparse_dominator::grid::{Cube, Lattice};
use sparse_dominator::operator::KernelSpec;
use sparse_dominator::weights::{weights_sweep, SweepSpec};

fn main() -> sparse_dominator::Result<()> {
    let q0 = Cube::unit(Lattice::new(1, 10)?);
    let f = GridFunction::from_fn(q0, |x| 1.0 + (6.0 * x[0]).floor());
    let g = global_dominate(&KernelSpec::hilbert(), &f, 0, &DominationOptions::default())?;
    let spec = SweepSpec {
        window: q0.dilate(9),
        center: [0.5, 0.0],
        alphas: vec![-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9],
        p: 2.0,
        r: 1.0,
        rounds: 8,
        seed: 0,
    };
    let report = weights_sweep(&g.family, &spec)?;
    print!("{}", report.to_csv());
    println!("target exponent {}, ok = {}", report.target, report.ok);
    Ok(())
}
