//! Compares analytic gradients with central differences, first for a
//! hand-written expression and then for every built-in suite.
//!
//! cargo run --release --example gradient_check

use conceptcap::autodiff::{finite_difference_check, Tape, Tensor};
use conceptcap::harness::gradsuite;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> conceptcap::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 2], 1.0, &mut rng);
    let err = finite_difference_check(
        |tape: &mut Tape, x| {
            let w = tape.leaf(&w);
            let h = tape.matmul(x, w)?;
            let h = tape.sigmoid(h)?;
            let s = tape.softmax(h, 1)?;
            let sq = tape.mul(s, s)?;
            tape.sum(sq)
        },
        &x,
        1e-6,
    )?;
    println!("sum(softmax(sigmoid(x W))^2)  max relative error {err:.2e}");

    println!("{:<16} {:>12} {:>10}", "suite", "max_rel_err", "tolerance");
    for r in gradsuite::run_all(0)? {
        println!(
            "{:<16} {:>12.2e} {:>10.0e} {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
