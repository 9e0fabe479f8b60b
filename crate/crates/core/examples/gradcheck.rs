//! Runs the finite-difference suite and prints the worst error per op.

use std::time::Instant;

use istarkit::gradsuite::{run_gradcheck, GradcheckConfig};

fn main() -> istarkit::Result<()> {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::default())?;
    for r in &report.ops {
        println!("{:<28} {:>10.3e}  ({} instances)", r.op, r.max_rel_err, r.instances);
    }
    println!("passed: {}  ({:.1} s)", report.passed, start.elapsed().as_secs_f64());
    Ok(())
}
