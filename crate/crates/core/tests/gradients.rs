use bilateral_enhance::gradcheck::{grad_check, random_tensor, relative_error, suite, GradCheckOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OPS: [&str; 10] = [
    "conv2d",
    "conv2d_stride2",
    "fully_connected",
    "batch_norm",
    "relu_composite",
    "guidance",
    "slice",
    "apply",
    "loss",
    "model",
];

#[test]
fn suite_passes_on_five_seeds() {
    for seed in 0..5 {
        let checks = suite(seed, &GradCheckOptions::default());
        let names: Vec<_> = checks.iter().map(|c| c.name).collect();
        assert_eq!(names, OPS);
        for c in &checks {
            assert!(c.report.pass, "seed {seed}, {}: {:?}", c.name, c.report);
            assert!(c.report.checked > 0, "seed {seed}, {} checked nothing", c.name);
        }
    }
}

#[test]
fn absurd_tolerance_fails() {
    let opts = GradCheckOptions {
        tolerance: 1e-12,
        ..GradCheckOptions::default()
    };
    let checks = suite(0, &opts);
    let model = checks.iter().find(|c| c.name == "model").unwrap();
    assert!(!model.report.pass);
}

#[test]
fn suite_table_is_reproducible() {
    let opts = GradCheckOptions::default();
    let a = suite(3, &opts);
    let b = suite(3, &opts);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report.max_rel_err.to_bits(), y.report.max_rel_err.to_bits(), "{}", x.name);
        assert_eq!(x.report.worst, y.report.worst);
    }
}

#[test]
fn wrong_gradient_is_caught() {
    // Gradient of sum(x²) is 2x; a tape that reports x would be off by 100%.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, &[6], 0.5, 1.0);
    let good = grad_check(|t, v| { let y = t.mul(v[0], v[0])?; t.sum(y) }, std::slice::from_ref(&x), &GradCheckOptions::default());
    assert!(good.pass && good.max_rel_err < 1e-8, "{good:?}");
    // Stop-gradient on one factor halves the analytic gradient.
    let bad = grad_check(
        |t, v| {
            let c = t.constant(t.value(v[0]).clone());
            let y = t.mul(v[0], c)?;
            t.sum(y)
        },
        &[x],
        &GradCheckOptions::default(),
    );
    assert!(!bad.pass);
    assert!((bad.max_rel_err - 0.5).abs() < 1e-6, "{bad:?}");
}

#[test]
fn relative_error_examples() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    // Both near zero: measured against the 1e-8 floor, not each other.
    assert!((relative_error(0.0, 1e-12) - 1e-4).abs() < 1e-15);
    assert!((relative_error(1e-16, -1e-11) - (1e-11 + 1e-16) / 1e-8).abs() < 1e-12);
}
