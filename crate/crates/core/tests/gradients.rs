//! Finite-difference gradient checks for every operation and block.

use std::time::Instant;

use gatedunipose::verify::{gradient_suite, gradient_tolerance, VerifyOptions};
use gatedunipose::ModelConfig;

#[test]
fn every_op_and_block_matches_finite_differences_f64() {
    let opts = VerifyOptions::new(ModelConfig::toy(), 11);
    let start = Instant::now();
    let results = gradient_suite::<f64>(&opts, |r| {
        println!("{:<26} rel_err={:.3e} cases={}", r.name, r.value, r.cases);
    })
    .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!("elapsed={elapsed:.1}s");
    assert!(results.len() >= 30);
    for r in &results {
        assert_eq!(r.cases, 20);
        assert!(r.value <= gradient_tolerance::<f64>(), "{} failed: {:e}", r.name, r.value);
    }
    assert!(elapsed < 300.0);
}

#[test]
fn single_precision_gradients_within_loose_budget() {
    let opts = VerifyOptions::new(ModelConfig::toy(), 12);
    let results = gradient_suite::<f32>(&opts, |r| {
        println!("f32 {:<22} rel_err={:.3e}", r.name, r.value);
    })
    .unwrap();
    for r in &results {
        assert!(r.passed, "{} failed: {:e}", r.name, r.value);
    }
}
