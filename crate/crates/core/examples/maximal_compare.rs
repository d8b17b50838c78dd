//! Grand maximal truncation `M_T f` against `M f` and `T* f` at three resolutions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_dominator::function::GridFunction;
use sparse_dominator::grid::{Cube, Lattice};
use sparse_dominator::operator::{maximal_compare, CubeFamily, KernelSpec};

fn main() -> sparse_dominator::Result<()> {
    let kernel = KernelSpec::hilbert();
    for level in [8u32, 9, 10] {
        let q0 = Cube::unit(Lattice::new(1, level)?);
        let mut kappa: f64 = 0.0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
            let f = GridFunction::from_fn(q0, |x| v[((x[0] * 8.0) as usize).min(7)]);
            let cmp = maximal_compare(&kernel, &f, &q0.dilate(3), CubeFamily::ShiftedDyadic)?;
            kappa = kappa.max(cmp.kappa);
        }
        println!("N = 2^{level:<2}  kappa = {kappa:.4}");
    }
    Ok(())
}
