mod common;

use common::{block, grad_check, max_abs_diff, Oracle};
use proptest::prelude::*;
use skipscale::diffusion::{diffused_batch, DataSource, DiffusionSchedule};
use skipscale::optim::OptimizerConfig;
use skipscale::rng::Rng;
use skipscale::scaling::ScalingPolicy;
use skipscale::tensor::Tensor;
use skipscale::unet::{init_unet, train_step, BlockParams, UNetModel};

fn policies() -> Vec<ScalingPolicy> {
    vec![
        ScalingPolicy::Unit,
        ScalingPolicy::universal(std::f64::consts::FRAC_1_SQRT_2).unwrap(),
        ScalingPolicy::cs(0.5).unwrap(),
        ScalingPolicy::reverse_cs(0.5).unwrap(),
    ]
}

#[test]
fn matrix_count_and_reproducible_init() {
    let a = init_unet(64, 2, 8, ScalingPolicy::Unit, &mut Rng::new(0, 0)).unwrap();
    let b = init_unet(64, 2, 8, ScalingPolicy::Unit, &mut Rng::new(0, 0)).unwrap();
    assert_eq!(a.matrix_count(), 2 * 8 * 2 + 2);
    assert_eq!(a, b);
}

#[test]
fn pooled_init_variance() {
    let model = init_unet(64, 2, 8, ScalingPolicy::Unit, &mut Rng::new(1, 0)).unwrap();
    let all: Vec<f64> = model.params().iter().flat_map(|p| p.data().to_vec()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / (2.0 / 64.0) - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn invalid_sizes_rejected() {
    for (m, l, n) in [(1, 2, 1), (4, 1, 1), (4, 2, 0)] {
        assert!(init_unet(m, l, n, ScalingPolicy::Unit, &mut Rng::new(0, 0)).is_err());
    }
}

/// N=1 on 2×2 matrices, composed by hand.
#[test]
fn single_level_hand_composition() {
    let w = |d: [f64; 4]| Tensor::matrix(2, 2, d.to_vec()).unwrap();
    let model = UNetModel {
        m: 2,
        l: 2,
        n: 1,
        encoders: vec![BlockParams {
            weights: vec![w([1.0, -1.0, 0.5, 2.0]), w([2.0, 0.0, 1.0, 1.0])],
        }],
        decoders: vec![BlockParams {
            weights: vec![w([1.0, 1.0, -1.0, 0.0]), w([0.5, 0.0, 0.0, -1.0])],
        }],
        middle: BlockParams {
            weights: vec![w([0.0, 1.0, 1.0, 0.0]), w([1.0, 0.0, 0.0, 3.0])],
        },
        policy: ScalingPolicy::universal(0.5).unwrap(),
        activation: Default::default(),
    };
    let x = [1.0, 2.0];
    // a_1: W1 x = [-1, 4.5] -> relu [0, 4.5] -> W2 = [0, 4.5]
    let ax = [0.0, 4.5];
    // f_N: [4.5, 0] -> relu -> [[1,0],[0,3]] = [4.5, 0]
    let fx = [4.5, 0.0];
    // skip sum: 0.5*[0,4.5] + [4.5,0] = [4.5, 2.25]
    // b_1: W1 = [6.75, -4.5] -> relu [6.75, 0] -> W2 = [3.375, 0]
    let expect = [3.375, 0.0];
    let tr = model.forward(&Tensor::vector(x.to_vec())).unwrap();
    assert_eq!(tr.skip_inputs[0].data(), &ax);
    assert_eq!(block(&common::Oracle::from_model(&model, vec![0.5]).f, &ax, true), fx);
    assert_eq!(tr.output.data(), &expect);
}

#[test]
fn zero_weights_give_zero_output() {
    let mut model = init_unet(5, 2, 3, ScalingPolicy::Unit, &mut Rng::new(0, 0)).unwrap();
    for p in model.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = model.forward(&Tensor::vector(vec![1.0; 5])).unwrap().output;
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn oracle_equivalence_all_small_shapes() {
    let mut worst: f64 = 0.0;
    for m in 2..=8 {
        for l in 2..=3 {
            for n in 1..=4 {
                for (pi, policy) in policies().into_iter().enumerate() {
                    let seed = (m * 100 + l * 10 + n) as u64;
                    let kappa = policy.fixed_coefficients(n).unwrap();
                    let model = init_unet(m, l, n, policy, &mut Rng::new(seed, pi as u64)).unwrap();
                    let oracle = Oracle::from_model(&model, kappa);
                    let x = Rng::new(seed, 99).normal_vec(m);
                    let got = model.forward(&Tensor::vector(x.clone())).unwrap().output;
                    let want = oracle.forward(&x);
                    let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                    worst = worst.max(max_abs_diff(got.data(), &want) / scale);
                }
            }
        }
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn hidden_features_match_oracle_levels() {
    let model = init_unet(6, 2, 4, ScalingPolicy::cs(0.7).unwrap(), &mut Rng::new(2, 0)).unwrap();
    let oracle = Oracle::from_model(&model, model.policy.fixed_coefficients(4).unwrap());
    let x = Rng::new(2, 1).normal_vec(6);
    let tr = model.forward(&Tensor::vector(x.clone())).unwrap();
    // h_i = f_i(s_i), s_0 = x.
    let mut s = x;
    for i in 0..4 {
        let want = oracle.f(i, &s);
        assert!(max_abs_diff(tr.h(i).data(), &want) <= 1e-12 * want.iter().fold(1.0f64, |a, v| a.max(v.abs())));
        s = block(&oracle.a[i], &s, true);
    }
}

#[test]
fn zero_kappa_removes_skip_contribution() {
    let model = init_unet(6, 2, 3, ScalingPolicy::Unit, &mut Rng::new(4, 0)).unwrap();
    let oracle = Oracle::from_model(&model, vec![0.0; 3]);
    let x = Rng::new(4, 1).normal_vec(6);
    let got = model.forward_with_coefficients(&Tensor::vector(x.clone()), &[0.0; 3]).unwrap();
    // Pure chain: b_1(b_2(b_3(f(a_3(a_2(a_1 x)))))).
    let mut h = x.clone();
    for a in &oracle.a {
        h = block(a, &h, true);
    }
    h = block(&oracle.f, &h, true);
    for b in oracle.b.iter().rev() {
        h = block(b, &h, true);
    }
    assert!(max_abs_diff(got.output.data(), &h) < 1e-12);
    assert!(max_abs_diff(got.output.data(), &oracle.forward(&x)) < 1e-12);
}

#[test]
fn gradient_check_twenty_seeds() {
    for seed in 0..20 {
        let model = init_unet(6, 2, 2, ScalingPolicy::Unit, &mut Rng::new(seed, 0)).unwrap();
        let mut r = Rng::new(seed, 1);
        let xt = Tensor::matrix(6, 3, r.normal_vec(18)).unwrap();
        let eps = Tensor::matrix(6, 3, r.normal_vec(18)).unwrap();
        let gc = grad_check(&model, &xt, &eps, 1e-5);
        assert!(gc.rel_err < 1e-5, "seed {seed}: {}", gc.rel_err);
        assert!(gc.checked > gc.skipped_kinks);
    }
}

#[test]
fn gradient_check_with_learnable_scaling() {
    let policy = ScalingPolicy::learnable(4, 1, false, 2, &mut Rng::new(5, 9)).unwrap();
    let model = init_unet(8, 2, 2, policy, &mut Rng::new(5, 0)).unwrap();
    let mut r = Rng::new(5, 1);
    let xt = Tensor::matrix(8, 2, r.normal_vec(16)).unwrap();
    let eps = Tensor::matrix(8, 2, r.normal_vec(16)).unwrap();
    let gc = grad_check(&model, &xt, &eps, 1e-5);
    assert!(gc.rel_err < 1e-5, "{}", gc.rel_err);
}

fn fixed_eval(model: &UNetModel, seed: u64) -> f64 {
    let sched = DiffusionSchedule::ddpm();
    let data = DataSource::uniform(model.m);
    let (xt, eps) = diffused_batch(&data, &sched, 32, None, &mut Rng::new(seed, 50)).unwrap();
    common::model_loss(model, &xt, &eps)
}

#[test]
fn training_descends_on_fixed_batch() {
    let sched = DiffusionSchedule::ddpm();
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let mut model = init_unet(64, 2, 8, ScalingPolicy::Unit, &mut Rng::new(seed, 0)).unwrap();
        let mut data_rng = Rng::new(seed, 1);
        let batch: Vec<Vec<f64>> = (0..16).map(|_| DataSource::uniform(64).sample(&mut data_rng)).collect();
        let before = fixed_eval(&model, seed);
        let mut opt = OptimizerConfig::default().build();
        let mut rng = Rng::new(seed, 2);
        for _ in 0..200 {
            train_step(&mut model, &batch, &sched, &mut opt, &mut rng).unwrap();
        }
        ratios.push(fixed_eval(&model, seed) / before);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[2] < 1.0, "{ratios:?}");
}

#[test]
fn zero_lr_keeps_parameters() {
    let sched = DiffusionSchedule::ddpm();
    let mut model = init_unet(8, 2, 2, ScalingPolicy::Unit, &mut Rng::new(0, 0)).unwrap();
    let before = model.clone();
    let mut opt = OptimizerConfig::AdamW {
        lr: 0.0,
        beta1: 0.99,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.03,
    }
    .build();
    let batch = vec![vec![0.5; 8]; 4];
    let rep = train_step(&mut model, &batch, &sched, &mut opt, &mut Rng::new(0, 1)).unwrap();
    assert!(rep.loss.is_finite());
    assert_eq!(model.params(), before.params());
}

#[test]
fn frozen_group_has_no_grad_norm() {
    let sched = DiffusionSchedule::ddpm();
    let mut model = init_unet(8, 2, 2, ScalingPolicy::Unit, &mut Rng::new(0, 0)).unwrap();
    let frozen = model.set_frozen("a1.", true);
    assert_eq!(frozen, 2);
    let before: Vec<Tensor> = model.encoders[0].weights.clone();
    let mut opt = OptimizerConfig::Sgd { lr: 1e-3 }.build();
    let rep = train_step(&mut model, &[vec![0.1; 8]], &sched, &mut opt, &mut Rng::new(0, 1)).unwrap();
    assert!(rep.grad_norm("a1.W1").is_none());
    assert!(rep.grad_norm("a2.W1").is_some());
    assert_eq!(model.encoders[0].weights, before);
}

#[test]
fn divergence_is_reported() {
    let sched = DiffusionSchedule::ddpm();
    let mut model = init_unet(4, 2, 1, ScalingPolicy::Unit, &mut Rng::new(0, 0)).unwrap();
    model.middle.weights[0].data_mut()[0] = f64::INFINITY;
    let mut opt = OptimizerConfig::default().build();
    let err = train_step(&mut model, &[vec![0.5; 4]], &sched, &mut opt, &mut Rng::new(0, 1)).unwrap_err();
    assert!(matches!(err, skipscale::Error::Divergence(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oracle_equivalence_random(m in 2usize..=8, l in 2usize..=3, n in 1usize..=4, seed in 0u64..1000, k in 0.05f64..1.0) {
        let policy = ScalingPolicy::cs(k).unwrap();
        let kappa = policy.fixed_coefficients(n).unwrap();
        let model = init_unet(m, l, n, policy, &mut Rng::new(seed, 0)).unwrap();
        let x = Rng::new(seed, 1).normal_vec(m);
        let want = Oracle::from_model(&model, kappa).forward(&x);
        let got = model.forward(&Tensor::vector(x)).unwrap().output;
        let scale = want.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        prop_assert!(max_abs_diff(got.data(), &want) <= 1e-12 * scale);
    }
}
