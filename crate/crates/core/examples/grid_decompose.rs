//! Splits a dominating sparse family across the `3^n` shifted dyadic grids
//! and compares `A_S f` with the sum of the per-grid operators.

use sparse_dominator::domination::{global_dominate, DominationOptions};
use sparse_dominator::function::GridFunction;
use sparse_dominator::grid::{Cube, Lattice};
use sparse_dominator::operator::KernelSpec;
use sparse_dominator::sparse::{apply_sparse_on, three_grid_decompose, verify_sparse};

fn main() -> sparse_dominator::Result<()> {
    let q0 = Cube::unit(Lattice::new(1, 8)?);
    let f = GridFunction::from_fn(q0, |x| if (0.2..0.45).contains(&x[0]) { 3.0 } else { 1.0 });
    let g = global_dominate(&KernelSpec::hilbert(), &f, 1, &DominationOptions::default())?;
    let family = &g.family;
    let d = three_grid_decompose(family, 1.0)?;
    println!("{} cubes, eta {}, constant {:.4} (bound 6)", family.len(), family.eta, d.constant);

    let window = family.hull().expect("nonempty");
    let f = GridFunction::from_fn(window, |x| (3.0 * x[0]).sin().abs());
    let whole = apply_sparse_on(family, &f, 1.0, &window)?;
    let mut sum = vec![0.0; whole.values().len()];
    for (j, fam) in d.families.iter().enumerate() {
        let part = apply_sparse_on(fam, &f, 1.0, &window)?;
        sum.iter_mut().zip(part.values()).for_each(|(s, v)| *s += v);
        println!("grid {j}: {} cubes, eta {}, sparse {}", fam.len(), fam.eta, verify_sparse(fam).ok);
    }
    let worst = whole.values().iter().zip(&sum).filter(|(_, &b)| b > 0.0).map(|(a, b)| a / b).fold(0.0, f64::max);
    println!("max A_S f / sum_j A_Sj f = {worst:.4}");
    Ok(())
}
