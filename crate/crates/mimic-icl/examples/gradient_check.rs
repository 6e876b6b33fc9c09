//! Central-difference gradient checking for every nonlinear kernel.
//!
//! Each named check wraps one kernel (softmax rows, RMS norm, rotary
//! embedding, the gated attention core, the full tiny-model forward, …)
//! into a scalar function of a single input tensor. The tape's reverse-mode
//! gradient is compared against (f(x+ε) − f(x−ε)) / 2ε at random points;
//! the relative error must stay below 1e-4.
//!
//! Run with: `cargo run --example gradient_check`

use mimic_icl::verify::{named_grad_checks, run_grad_checks};

fn main() {
    let seed = 42;
    let checks = named_grad_checks(seed);
    println!("{} kernels, 20 random points each:\n", checks.len());
    for c in &checks {
        let outcome = run_grad_checks(std::slice::from_ref(c), seed, 20, 1e-4).unwrap();
        println!(
            "  {:<32} {}  worst rel err {:.3e}",
            c.name,
            if outcome.passed { "ok  " } else { "FAIL" },
            outcome.max_abs_diff.unwrap_or(f64::NAN),
        );
        assert!(outcome.passed, "{}: {}", c.name, outcome.detail);
    }

    // The whole battery in one call, as the CLI's `verify` subcommand runs it.
    let all = run_grad_checks(&checks, seed, 20, 1e-4).unwrap();
    println!("\nbattery: {} ({:.2}s)", all.detail, all.runtime_s);
}
