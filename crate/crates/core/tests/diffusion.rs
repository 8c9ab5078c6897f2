use proptest::prelude::*;
use skipscale::autodiff::Tape;
use skipscale::diffusion::{
    forward_diffuse, loss_simple, loss_value, noise_ratio_stats, quantile_sorted, DataSource, DiffusionSchedule,
};
use skipscale::rng::Rng;
use skipscale::suites::xt_norm_check;
use skipscale::tensor::Tensor;

#[test]
fn ddpm_mean_alpha_bar_near_027() {
    let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    assert!((s.mean_alpha_bar() - 0.27).abs() <= 0.02, "{}", s.mean_alpha_bar());
    let direct = s.alpha_bar().iter().sum::<f64>() / 1000.0;
    assert!((s.mean_alpha_bar() - direct).abs() < 1e-12);
}

#[test]
fn single_step_schedule() {
    let s = DiffusionSchedule::linear(1, 0.5, 0.5).unwrap();
    assert_eq!(s.alpha_bar(), &[0.5]);
}

#[test]
fn last_alpha_bar_matches_direct_product() {
    let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut prod = 1.0;
    for t in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
        prod *= 1.0 - beta;
    }
    let got = s.alpha_bar_at(1000).unwrap();
    assert!((got - prod).abs() <= 1e-12 * prod, "{got} vs {prod}");
    assert_eq!(s.beta()[0], 1e-4);
    assert!((s.beta()[999] - 0.02).abs() < 1e-15);
}

#[test]
fn schedule_invariants() {
    let s = DiffusionSchedule::ddpm();
    for t in 0..s.steps() {
        assert!(s.beta()[t] > 0.0 && s.beta()[t] < 1.0);
        assert_eq!(s.alpha()[t] + s.beta()[t], 1.0);
        let ab = s.alpha_bar()[t];
        assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        if t > 0 {
            assert!(ab < s.alpha_bar()[t - 1]);
        }
    }
    assert!(s.alpha_bar()[0] < 1.0);
}

#[test]
fn bad_schedules_rejected() {
    assert!(DiffusionSchedule::linear(10, 0.02, 1e-4).is_err());
    assert!(DiffusionSchedule::linear(0, 1e-4, 0.02).is_err());
    assert!(DiffusionSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(DiffusionSchedule::linear(10, 1e-4, 1.0).is_err());
}

#[test]
fn schedule_table_round_trip() {
    let s = DiffusionSchedule::ddpm();
    let back = DiffusionSchedule::from_table(&s.to_table()).unwrap();
    assert_eq!(back.alpha_bar(), s.alpha_bar());
    assert_eq!(back.beta(), s.beta());
    assert!(DiffusionSchedule::from_table("t beta alpha alpha_bar\n1 x 0.5 0.5\n").is_err());
}

#[test]
fn zero_noise_limit_is_identity() {
    let s = DiffusionSchedule::degenerate(1.0, 10);
    let x0 = Tensor::vector(vec![0.3, -0.7, 1.0]);
    let (xt, _) = forward_diffuse(&x0, 5, &s, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(xt, x0);
}

#[test]
fn forward_diffuse_is_deterministic_and_consistent() {
    let s = DiffusionSchedule::ddpm();
    let x0 = Tensor::vector(DataSource::uniform(16).sample(&mut Rng::new(1, 0)));
    let a = forward_diffuse(&x0, 300, &s, &mut Rng::new(2, 0)).unwrap();
    let b = forward_diffuse(&x0, 300, &s, &mut Rng::new(2, 0)).unwrap();
    assert_eq!(a, b);
    let ab = s.alpha_bar_at(300).unwrap();
    for i in 0..16 {
        let want = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * a.1.data()[i];
        assert_eq!(a.0.data()[i], want);
    }
}

#[test]
fn step_out_of_range() {
    let s = DiffusionSchedule::ddpm();
    let x0 = Tensor::vector(vec![0.0; 4]);
    assert!(forward_diffuse(&x0, 0, &s, &mut Rng::new(0, 0)).is_err());
    assert!(forward_diffuse(&x0, 1001, &s, &mut Rng::new(0, 0)).is_err());
}

#[test]
fn uniform_data_in_hypercube() {
    let d = DataSource::uniform(64);
    let mut r = Rng::new(3, 0);
    for _ in 0..100 {
        assert!(d.sample(&mut r).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn xt_norm_expectation() {
    let s = DiffusionSchedule::ddpm();
    let c = xt_norm_check(128, &s, 10_000, 0.02, &mut Rng::new(0, 0)).unwrap();
    let want = (1.0 - 2.0 * s.mean_alpha_bar() / 3.0) * 128.0;
    assert!((c.analytic - want).abs() < 1e-9);
    assert!(c.rel_err < 0.02, "{c:?}");
}

#[test]
fn loss_examples() {
    let a = Tensor::vector(vec![0.2, -1.0]);
    assert_eq!(loss_value(&a, &a).unwrap(), 0.0);
    assert_eq!(loss_value(&Tensor::vector(vec![1.0, 0.0]), &Tensor::vector(vec![0.0, 0.0])).unwrap(), 1.0);
    assert!(loss_value(&a, &Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn loss_gradient_is_twice_difference() {
    let mut r = Rng::new(6, 0);
    let eps = r.normal_vec(10);
    let hat = r.normal_vec(10);
    let mut tape = Tape::new();
    let e = tape.leaf(&Tensor::vector(eps.clone()));
    let h = tape.leaf(&Tensor::vector(hat.clone()).with_requires_grad(true));
    let l = loss_simple(&mut tape, e, h).unwrap();
    let g = tape.backward(l).unwrap().get(h).unwrap();
    let f = |v: &[f64]| loss_value(&Tensor::vector(eps.clone()), &Tensor::vector(v.to_vec())).unwrap();
    for i in 0..10 {
        let analytic = 2.0 * (hat[i] - eps[i]);
        assert!((g.data()[i] - analytic).abs() < 1e-12);
        let (mut p, mut m) = (hat.clone(), hat.clone());
        p[i] += 1e-5;
        m[i] -= 1e-5;
        let fd = (f(&p) - f(&m)) / 2e-5;
        assert!((fd - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3), "{i}");
    }
}

#[test]
fn ratio_statistics_ddpm() {
    let s = DiffusionSchedule::ddpm();
    let st = noise_ratio_stats(&DataSource::uniform(128), &s, 20_000, &mut Rng::new(0, 0)).unwrap();
    assert!((1.1..=1.4).contains(&st.mean), "{st:?}");
    assert!(st.q97 <= 5.0, "{st:?}");
    assert!(st.median <= st.q97);
}

#[test]
fn ratio_is_one_for_pure_noise() {
    let s = DiffusionSchedule::degenerate(0.0, 10);
    let st = noise_ratio_stats(&DataSource::uniform(32), &s, 200, &mut Rng::new(0, 0)).unwrap();
    assert!((st.mean - 1.0).abs() < 1e-12);
    assert!((st.q97 - 1.0).abs() < 1e-12);
}

#[test]
fn corpus_source() {
    let d = DataSource::corpus(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(d.dim(), 2);
    let x = d.sample(&mut Rng::new(0, 0));
    assert!(x == vec![1.0, 2.0] || x == vec![3.0, 4.0]);
    assert!(DataSource::corpus(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    assert!(DataSource::corpus(vec![]).is_err());
}

#[test]
fn quantile_interpolates() {
    assert_eq!(quantile_sorted(&[0.0, 10.0], 0.97), 9.7);
    assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0], 0.5), 2.0);
    let inf = f64::INFINITY;
    assert_eq!(quantile_sorted(&[1.0, inf, inf], 0.5), inf);
    assert_eq!(quantile_sorted(&[inf, inf], 0.5), inf);
}

proptest! {
    #[test]
    fn loss_nonnegative_and_zero_iff_equal(a in prop::collection::vec(-5.0f64..5.0, 1..16), d in prop::collection::vec(-1.0f64..1.0, 16)) {
        let b: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + y).collect();
        let l = loss_value(&Tensor::vector(a.clone()), &Tensor::vector(b.clone())).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
    }

    #[test]
    fn linear_schedules_are_monotone(start in 1e-5f64..0.01, width in 0.0f64..0.05, steps in 1usize..500) {
        let s = DiffusionSchedule::linear(steps, start, start + width).unwrap();
        prop_assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        let mean = s.alpha_bar().iter().sum::<f64>() / steps as f64;
        prop_assert!((mean - s.mean_alpha_bar()).abs() < 1e-12);
    }
}
