//! Analytic PPO and GRPO gradients against central differences.

use chunkrl::harness::{run_suite, Suite, Tolerances};

fn main() {
    for check in run_suite(Suite::Grad, &Tolerances::default(), 0) {
        println!(
            "{:<22} instances {:>4}  worst rel err {:.2e}  (tol {:.0e})  {}",
            check.name,
            check.instances,
            check.worst,
            check.tolerance,
            if check.passed { "ok" } else { "FAIL" }
        );
    }
}
