//! Builds a certificate, round-trips it through RON, replays it, then
//! tampers with one threshold and shows the violation path.

use sparse_dominator::domination::{local_dominate, replay_certificate, DominationCertificate, DominationOptions};
use sparse_dominator::function::GridFunction;
use sparse_dominator::grid::{Cube, Lattice};
use sparse_dominator::operator::KernelSpec;

fn main() -> sparse_dominator::Result<()> {
    let q0 = Cube::unit(Lattice::new(1, 8)?);
    let f = GridFunction::from_fn(q0, |x| if x[0] < 0.3 { 2.0 } else { 0.5 });
    let kernel = KernelSpec::hilbert();
    let (_, cert) = local_dominate(&kernel, &f, &q0, &DominationOptions::default())?;

    let text = cert.to_ron()?;
    let back = DominationCertificate::from_ron(&text)?;
    let report = replay_certificate(&back, &kernel, &f);
    println!("{} bytes, {} nodes, replay ok = {}", text.len(), report.nodes, report.ok);

    let mut bad = back.clone();
    bad.roots[0].c_star *= 0.5;
    let report = replay_certificate(&bad, &kernel, &f);
    for v in report.violations.iter().take(3) {
        println!("node {:>6}  {:<24} lhs {:.6e}  rhs {:.6e}", v.path, v.check, v.lhs, v.rhs);
    }
    Ok(())
}
