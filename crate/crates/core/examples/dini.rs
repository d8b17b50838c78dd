//! Dini norms of a few moduli, and the constants of the built-in kernels.

use sparse_dominator::grid::{Cube, Lattice};
use sparse_dominator::operator::{dini_norm, KernelSpec, Modulus, OperatorConstants};

fn main() -> sparse_dominator::Result<()> {
    for (name, m) in [
        ("t", Modulus::Linear(1.0)),
        ("sqrt t", Modulus::Power { c: 1.0, exponent: 0.5 }),
        ("1/log(e/t)", Modulus::InverseLog(1.0)),
    ] {
        match dini_norm(&m) {
            Ok(v) => println!("{name:<12} {v:.9}"),
            Err(e) => println!("{name:<12} {e}"),
        }
    }
    let window = Cube::unit(Lattice::new(1, 8)?);
    for k in [KernelSpec::hilbert(), KernelSpec::log_modulated()] {
        let c = OperatorConstants::for_kernel(&k, &window)?;
        println!("{:<14} |T|_2 ~ {:.4}  C_K {:.1}  Dini {:.4}  C_T {:.4}", k.name, c.l2_norm, c.c_k, c.dini, c.c_t);
    }
    Ok(())
}
