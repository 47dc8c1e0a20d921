//! Analytic gradients of every layer and of the full network composite are
//! checked against central finite differences on a small topology.

use std::time::Instant;

use mantle::gradcheck::standard_suite;

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_layer_and_composite_matches_finite_differences() {
    let t0 = Instant::now();
    let reports = standard_suite(42);
    let elapsed = t0.elapsed();

    let expected = [
        "cheb_conv_k0",
        "cheb_conv_k2",
        "cheb_conv_k3",
        "group_norm",
        "leaky_relu",
        "fully_connected",
        "residual_block",
        "downsample",
        "upsample",
        "loss_recon",
        "loss_edge",
        "loss_kl",
        "loss_gan_d",
        "loss_gan_g",
        "elementwise_chain",
        "composite_generator",
        "composite_discriminator",
    ];
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, expected, "suite coverage changed");

    let mut failures = Vec::new();
    for r in &reports {
        println!("gradcheck {:<24} {:>6} entries, max rel {:.3e}", r.name, r.entries, r.max_rel);
        assert!(r.entries > 0, "{}: no entries differenced", r.name);
        if r.max_rel > TOLERANCE {
            failures.push(format!("{}: max rel {:.3e}", r.name, r.max_rel));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
    assert!(
        elapsed.as_secs_f64() <= 120.0,
        "gradcheck battery took {:.1}s, budget is 120s",
        elapsed.as_secs_f64()
    );
}
