use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rectdiff::Tensor;
use rectdiff_bench::{fixture, rectified_train_step};

#[test]
fn fixture_step_is_finite_and_repeatable() {
    let f = fixture();
    let eps = Tensor::randn(f.x0.shape(), &mut ChaCha8Rng::seed_from_u64(2));
    let a = rectified_train_step(&f, &eps).unwrap();
    assert!(a.is_finite() && a > 0.0);
    assert_eq!(a.to_bits(), rectified_train_step(&f, &eps).unwrap().to_bits());
}
