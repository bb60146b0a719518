mod common;

use defa_core::reference::fused_bi;
use num::{BigInt, BigRational, One};
use proptest::prelude::*;
use rand::Rng;

fn four_product<T>(n: [T; 4], t0: T, t1: T, one: T) -> T
where
    T: Clone + std::ops::Add<Output = T> + std::ops::Sub<Output = T> + std::ops::Mul<Output = T>,
{
    let [n0, n1, n2, n3] = n;
    let (u0, u1) = (one.clone() - t0.clone(), one - t1.clone());
    n0 * u1.clone() * u0.clone() + n1 * t1.clone() * u0 + n2 * u1 * t0.clone() + n3 * t1 * t0
}

/// Distance in units of the last place of the largest corner magnitude.
fn ulps_at_scale(a: f64, b: f64, n: [f64; 4]) -> f64 {
    let m = n.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 {
        return if a == b { 0.0 } else { f64::INFINITY };
    }
    (a - b).abs() / (m * f64::EPSILON)
}

fn rational(rng: &mut impl Rng, den_max: i64) -> BigRational {
    BigRational::new(BigInt::from(rng.gen_range(-1_000_000_i64..1_000_000)), BigInt::from(rng.gen_range(1..den_max)))
}

#[test]
fn forms_agree_exactly_on_rationals() {
    let mut rng = common::rng(3);
    for _ in 0..10_000 {
        let n: [BigRational; 4] = std::array::from_fn(|_| rational(&mut rng, 1 << 20));
        let t0 = BigRational::new(BigInt::from(rng.gen_range(0..4096)), BigInt::from(4096));
        let t1 = BigRational::new(BigInt::from(rng.gen_range(0..997)), BigInt::from(997));
        let slow = four_product(n.clone(), t0.clone(), t1.clone(), BigRational::one());
        assert_eq!(fused_bi(n, t0, t1), slow);
    }
}

#[test]
fn forms_agree_within_eight_ulps_on_floats() {
    let mut rng = common::rng(4);
    let mut worst = 0.0_f64;
    for i in 0..100_000 {
        let scale = [1.0, 2047.0, 1e-3][i % 3];
        let n: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-scale..scale));
        let (t0, t1) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let d = ulps_at_scale(fused_bi(n, t0, t1), four_product(n, t0, t1, 1.0), n);
        worst = worst.max(d);
    }
    assert!(worst <= 8.0, "worst disagreement {worst} ulp");
}

#[test]
fn fused_form_examples() {
    assert_eq!(fused_bi([0.0, 4.0, 8.0, 12.0], 0.5, 0.25), 5.0);
    assert_eq!(fused_bi([1.0, 2.0, 3.0, 4.0], 0.0, 0.0), 1.0);
    assert_eq!(fused_bi([7.0; 4], 0.9, 0.1), 7.0);
}

proptest! {
    #[test]
    fn fused_is_a_convex_combination(n in prop::array::uniform4(-100.0..100.0_f64), t0 in 0.0..1.0_f64, t1 in 0.0..1.0_f64) {
        let v = fused_bi(n, t0, t1);
        let lo = n.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn corner_weights_are_exact_at_integers(n in prop::array::uniform4(-100.0..100.0_f64)) {
        prop_assert_eq!(fused_bi(n, 0.0, 0.0), n[0]);
    }
}
