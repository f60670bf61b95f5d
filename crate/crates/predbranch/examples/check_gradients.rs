//! Verifies every analytic gradient in the crate against central finite
//! differences on randomized instances.
//!
//! ```bash
//! cargo run --example check_gradients
//! ```

use predbranch::numerics::Tolerances;

fn main() -> predbranch::Result<()> {
    let results = predbranch::gradsuite::run(0, 10)?;
    let tol = Tolerances::DEFAULT.grad_rel;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:32} max rel err {:.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("overall: {worst:.3e} (tolerance {tol:.0e})");
    assert!(worst <= tol);
    Ok(())
}
