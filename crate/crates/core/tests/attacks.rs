use normclash_core::attacks::{
    attack_batch, check_feasible, cw_attack, eot_gradient, pgd_attack, pgd_eot_attack, project_ball, steepest_direction,
    AttackSpec, CwConfig, PgdConfig,
};
use normclash_core::defenses::NoiseDistribution;
use normclash_core::geometry::{BallSpec, Norm};
use normclash_core::model::Layer;
use normclash_core::rng::{self, Rng};
use normclash_core::tensor::{dot, norm_l2};
use normclash_core::{MlpModel, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

/// Two-class linear model whose logit difference `z₁ − z₀` is `w·x + b`.
fn linear(w: &[f64], b: f64) -> MlpModel {
    let mut weights: Vec<f64> = w.iter().map(|v| -0.5 * v).collect();
    weights.extend(w.iter().map(|v| 0.5 * v));
    MlpModel::new(vec![Layer {
        weights: Tensor::new(vec![2, w.len()], weights).unwrap(),
        bias: Tensor::vector(vec![-0.5 * b, 0.5 * b]).unwrap(),
    }])
    .unwrap()
}

struct Instance {
    w: Vec<f64>,
    b: f64,
    x: Vec<f64>,
    y: usize,
}

/// Random linear instance with `x` at least `pad` away from the box faces and
/// margin `|w·x + b| = scale(w) · u`, `u ~ U(lo, hi)`.
fn instance(r: &mut Rng, d: usize, pad: f64, lo: f64, hi: f64, scale: impl Fn(&[f64]) -> f64) -> Instance {
    let w: Vec<f64> = (0..d).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
    let x: Vec<f64> = (0..d).map(|_| pad + (1.0 - 2.0 * pad) * r.random::<f64>()).collect();
    let y = r.random_range(0..2usize);
    let m = scale(&w) * r.random_range(lo..hi);
    let s = if y == 1 { 1.0 } else { -1.0 };
    let b = s * m - dot(&w, &x);
    Instance { w, b, x, y }
}

fn dual(w: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => w.iter().map(|v| v.abs()).sum(),
        Norm::L2 => norm_l2(w),
    }
}

#[test]
fn pgd_matches_dual_norm_criterion() {
    for (norm, eps) in [(Norm::Linf, 0.05), (Norm::L2, 0.1)] {
        let mut r = rng::from_seed(17);
        let mut agree = 0;
        for _ in 0..200 {
            let inst = instance(&mut r, 10, eps, 0.0, 2.0, |w| eps * dual(w, norm));
            let reach = eps * dual(&inst.w, norm);
            let model = linear(&inst.w, inst.b);
            let margin = (dot(&inst.w, &inst.x) + inst.b).abs();
            assert_eq!(model.predict(&inst.x), inst.y);
            let adv = pgd_attack(&model, &inst.x, inst.y, &PgdConfig::new(norm, eps), &mut r).unwrap();
            agree += (adv.success == (margin < reach)) as usize;
        }
        assert!(agree >= 198, "{norm}: {agree}/200 agree");
    }
}

#[test]
fn cw_finds_minimal_linear_distance() {
    let mut r = rng::from_seed(23);
    let mut close = 0;
    for _ in 0..200 {
        let inst = instance(&mut r, 10, 0.3, 0.02, 0.15, |_| 1.0);
        let model = linear(&inst.w, inst.b);
        let want = (dot(&inst.w, &inst.x) + inst.b).abs() / norm_l2(&inst.w);
        let adv = cw_attack(&model, &inst.x, inst.y, &CwConfig::default()).unwrap();
        close += (adv.success && (adv.l2_norm - want).abs() <= 0.05 * want) as usize;
    }
    assert!(close >= 190, "{close}/200 within 5%");
}

#[test]
fn cw_kappa_is_monotone() {
    let mut r = rng::from_seed(31);
    for _ in 0..10 {
        let inst = instance(&mut r, 6, 0.3, 0.05, 0.1, |_| 1.0);
        let model = linear(&inst.w, inst.b);
        let mut prev = 0.0;
        for kappa in [0.0, 0.5, 1.0] {
            let cfg = CwConfig { kappa, ..CwConfig::default() };
            let adv = cw_attack(&model, &inst.x, inst.y, &cfg).unwrap();
            assert!(adv.l2_norm >= prev - 1e-6);
            prev = adv.l2_norm;
        }
    }
}

fn random_net(r: &mut Rng, d: usize) -> MlpModel {
    let mut m = MlpModel::init(&[d, 12, 3], r).unwrap();
    for l in m.layers_mut() {
        l.weights.data_mut().iter_mut().for_each(|w| *w *= 3.0);
    }
    m
}

#[test]
fn every_emitted_example_is_feasible() {
    let mut r = rng::from_seed(5);
    let mut checked = 0;
    for i in 0..100 {
        let d = 8;
        let model = random_net(&mut r, d);
        // some inputs sit on the box faces
        let x: Vec<f64> = (0..d)
            .map(|_| match r.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random::<f64>(),
            })
            .collect();
        let y = r.random_range(0..3);
        for norm in [Norm::Linf, Norm::L2] {
            let mut cfg = PgdConfig::new(norm, if norm == Norm::Linf { 0.1 } else { 0.5 });
            cfg.random_init = i % 2 == 0;
            let adv = pgd_attack(&model, &x, y, &cfg, &mut r).unwrap();
            check_feasible(&x, &adv.x_adv, &cfg).unwrap();
            let noise = NoiseDistribution::Gaussian { sigma: 0.1 };
            let adv = pgd_eot_attack(&model, &noise, &x, y, &cfg, 4, &mut r).unwrap();
            check_feasible(&x, &adv.x_adv, &cfg).unwrap();
            checked += 2;
        }
        let cfg = CwConfig {
            inner_iters: 100,
            ..CwConfig::default()
        };
        let adv = cw_attack(&model, &x, y, &cfg).unwrap();
        assert!(adv.x_adv.iter().all(|v| (0.0..=1.0).contains(v)));
        checked += 1;
    }
    assert_eq!(checked, 500);
}

#[test]
fn zero_budget_returns_the_input() {
    let mut r = rng::from_seed(2);
    let model = random_net(&mut r, 5);
    let x = vec![0.3; 5];
    let y = model.predict(&x);
    for norm in [Norm::Linf, Norm::L2] {
        let adv = pgd_attack(&model, &x, y, &PgdConfig::new(norm, 0.0), &mut r).unwrap();
        assert_eq!(adv.x_adv, x);
        assert!(!adv.success);
        assert_eq!(adv.l2_norm, 0.0);
    }
}

#[test]
fn eot_without_noise_equals_pgd() {
    let mut r = rng::from_seed(8);
    for _ in 0..10 {
        let model = random_net(&mut r, 6);
        let x: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
        let y = r.random_range(0..3);
        for norm in [Norm::Linf, Norm::L2] {
            let cfg = PgdConfig::new(norm, 0.2);
            let a = pgd_attack(&model, &x, y, &cfg, &mut rng::from_seed(1)).unwrap();
            let b = pgd_eot_attack(&model, &NoiseDistribution::None, &x, y, &cfg, 8, &mut rng::from_seed(1)).unwrap();
            assert_eq!(a.x_adv, b.x_adv);
            assert_eq!(a.success, b.success);
        }
    }
}

#[test]
fn eot_variance_shrinks_with_draws() {
    let mut r = rng::from_seed(12);
    let d = 6;
    let model = random_net(&mut r, d);
    let x = vec![0.5; d];
    let noise = NoiseDistribution::Gaussian { sigma: 0.3 };
    let reference = eot_gradient(&model, &noise, &x, 0, 100_000, &mut r).unwrap();
    let variance = |n: usize, r: &mut Rng| {
        let reps = 400;
        let samples: Vec<Vec<f64>> = (0..reps).map(|_| eot_gradient(&model, &noise, &x, 0, n, r).unwrap()).collect();
        let mut total = 0.0;
        for j in 0..d {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / reps as f64;
            total += samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        }
        total
    };
    let v1 = variance(1, &mut r);
    let v16 = variance(16, &mut r);
    let v256 = variance(256, &mut r);
    for ratio in [v1 / v16, v16 / v256] {
        assert!((12.0..=21.0).contains(&ratio), "variance ratio {ratio}");
    }
    let g = eot_gradient(&model, &noise, &x, 0, 256, &mut r).unwrap();
    let cos = dot(&g, &reference) / (norm_l2(&g) * norm_l2(&reference));
    assert!(cos > 0.99, "cosine {cos}");
}

#[test]
fn batch_attack_is_deterministic_and_ordered() {
    let mut r = rng::from_seed(3);
    let model = random_net(&mut r, 4);
    let inputs: Vec<f64> = (0..40).map(|_| r.random::<f64>()).collect();
    let labels: Vec<usize> = (0..10).map(|_| r.random_range(0..3)).collect();
    let mut cfg = PgdConfig::new(Norm::L2, 0.3);
    cfg.random_init = true;
    let spec = AttackSpec::Pgd(cfg);
    let a = attack_batch(&model, &inputs, &labels, &spec, 77).unwrap();
    let b = attack_batch(&model, &inputs, &labels, &spec, 77).unwrap();
    assert_eq!(a, b);
    let third = pgd_attack(&model, &inputs[8..12], labels[2], &cfg, &mut rng::substream(77, 2)).unwrap();
    assert_eq!(a[2], third);
    assert!(attack_batch(&model, &inputs[..39], &labels, &spec, 0).is_err());
}

proptest! {
    #[test]
    fn projection_lands_in_ball(v in prop::collection::vec(-3.0f64..3.0, 1..16), r in 0.05f64..2.0) {
        for norm in [Norm::L2, Norm::Linf] {
            let ball = BallSpec::centered(norm, r, v.len()).unwrap();
            let p = project_ball(&v, &ball);
            prop_assert!(norm.of(&p) <= r * (1.0 + 1e-12));
            if norm.of(&v) <= r {
                prop_assert_eq!(&p, &v);
            }
            // idempotent up to rounding
            let again = project_ball(&p, &ball);
            prop_assert!(again.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-15 * r));
        }
    }

    #[test]
    fn steepest_direction_is_unit_and_ascending(g in prop::collection::vec(-5.0f64..5.0, 1..16)) {
        prop_assume!(g.iter().any(|v| v.abs() > 1e-9));
        let l2 = steepest_direction(&g, Norm::L2);
        prop_assert!((norm_l2(&l2) - 1.0).abs() < 1e-12);
        prop_assert!((dot(&l2, &g) - norm_l2(&g)).abs() < 1e-9);
        let linf = steepest_direction(&g, Norm::Linf);
        prop_assert!(linf.iter().all(|v| v.abs() <= 1.0));
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        prop_assert!((dot(&linf, &g) - l1).abs() < 1e-9);
    }
}
