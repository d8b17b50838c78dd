//! Sparse domination of the Hilbert transform of a random step function.
//!
//! `cargo run --release --example dominate -- [level] [seed]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_dominator::domination::{global_dominate, replay_certificate, DominationOptions};
use sparse_dominator::function::GridFunction;
use sparse_dominator::grid::{Cube, Lattice};
use sparse_dominator::operator::KernelSpec;
use sparse_dominator::sparse::verify_sparse;

fn main() -> sparse_dominator::Result<()> {
    let mut args = std::env::args().skip(1);
    let level: u32 = args.next().map_or(10, |s| s.parse().expect("level"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
    let q0 = Cube::unit(Lattice::new(1, level)?);
    let f = GridFunction::from_fn(q0, |x| values[((x[0] * 8.0) as usize).min(7)]);

    let kernel = KernelSpec::hilbert();
    let g = global_dominate(&kernel, &f, 2, &DominationOptions::default())?;
    let c_t = g.certificate.constants.c_t;
    println!("cubes          {}", g.family.len());
    println!("sparse (1/6)   {}", verify_sparse(&g.family).ok);
    println!("sparse (1/2)   {}", verify_sparse(&g.local_family).ok);
    println!("C_emp          {:.4}", g.c_emp);
    println!("C_T            {:.4}", c_t);
    println!("C_emp / C_T    {:.4}", g.c_emp / c_t);
    println!("tree depth     {}", g.certificate.depth());
    println!("|Tf| <= C A|f| {} on {} cells (worst ratio {:.4})", g.check.holds, g.check.cells, g.check.worst_ratio);
    println!("replay         {}", replay_certificate(&g.certificate, &kernel, &f).ok);
    Ok(())
}
