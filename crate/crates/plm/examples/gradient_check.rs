//! Verifies every autodiff primitive against central finite differences,
//! at both element precisions, and shows the checker catching a wrong
//! gradient.
//!
//!     cargo run --release --example gradient_check

use plm::tensor::{grad_check, op_suite};

fn main() {
    println!("primitive gradient suite (worst relative error, eps = 1e-3):");
    println!("{:<24} {:>12} {:>12}", "op", "f32", "f64");
    let f32_suite = op_suite::<f32>();
    let f64_suite = op_suite::<f64>();
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for ((name, e32), (_, e64)) in f32_suite.iter().zip(&f64_suite) {
        println!("{:<24} {:>12.3e} {:>12.3e}", name, e32, e64);
        worst32 = worst32.max(*e32);
        worst64 = worst64.max(*e64);
    }
    println!("worst f32: {worst32:.3e}   worst f64: {worst64:.3e}   tolerance: 1e-3");
    assert!(worst32 < 1e-3 && worst64 < 1e-3);

    // A deliberately wrong gradient: f(x) = sum(x^2) but claiming df = 3x.
    let x = [0.4f64, -1.1, 2.2];
    let wrong: Vec<f64> = x.iter().map(|&v| 3.0 * v).collect();
    let err = grad_check(|v| v.iter().map(|&t| t * t).sum(), &x, &wrong, 1e-3);
    println!("\ndeliberately wrong gradient is flagged: relative error {err:.3}");
    assert!(err > 0.1);
}
