use normclash_core::attacks::{AttackSpec, PgdConfig};
use normclash_core::defenses::{eval_accuracy, predict_randomized, train, DefenseSpec, NoiseDistribution, TrainConfig};
use normclash_core::geometry::Norm;
use normclash_core::harness::{gen_synthetic, Split, SyntheticSpec};
use normclash_core::model::LabeledBatch;
use normclash_core::rng;
use normclash_core::special::erf;
use normclash_core::tensor::norm_l2;
use normclash_core::MlpModel;

fn blobs(spec: &str, seed: u64) -> (LabeledBatch, LabeledBatch) {
    let spec: SyntheticSpec = spec.parse().unwrap();
    (
        gen_synthetic(&spec, Split::Train, seed).unwrap().batch(),
        gen_synthetic(&spec, Split::Test, seed).unwrap().batch(),
    )
}

fn fit(data: &LabeledBatch, spec: &DefenseSpec, cfg: &TrainConfig) -> MlpModel {
    let model = MlpModel::init(&[data.dim(), 16, 2], &mut rng::substream(cfg.seed, 2)).unwrap();
    train(model, data, spec, cfg).unwrap().model
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn natural_training_separates_wide_blobs() {
    let (train_set, _) = blobs("blobs:d=2,n=1000,margin=0.6,sigma=0.1", 1);
    let model = fit(&train_set, &DefenseSpec::Natural, &cfg(20));
    let acc = eval_accuracy(&model, &train_set, None, &NoiseDistribution::None, 0).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn natural_accuracy_approaches_bayes_rate() {
    // margin 2σ: the Bayes rule errs when the noise along the axis exceeds σ
    let bayes = 0.5 * (1.0 + erf(1.0 / 2f64.sqrt()));
    assert!((bayes - 0.8413).abs() < 1e-4);
    let (train_set, test_set) = blobs("blobs:d=2,n=2000,test=2000,margin=0.2,sigma=0.1", 3);
    let model = fit(&train_set, &DefenseSpec::Natural, &cfg(20));
    let acc = eval_accuracy(&model, &test_set, None, &NoiseDistribution::None, 0).unwrap();
    assert!((0.80..=0.88).contains(&acc), "test accuracy {acc}");
}

#[test]
fn zero_budget_adversarial_training_is_natural_training() {
    let (train_set, _) = blobs("blobs:d=4,n=200", 5);
    let c = cfg(3);
    let natural = fit(&train_set, &DefenseSpec::Natural, &c);
    for norm in [Norm::Linf, Norm::L2] {
        let at = fit(&train_set, &DefenseSpec::At { norm, epsilon: 0.0 }, &c);
        assert_eq!(at, natural);
    }
}

#[test]
fn mat_rand_picks_norms_evenly() {
    let (train_set, _) = blobs("blobs:d=4,n=1000", 7);
    let c = TrainConfig {
        epochs: 10,
        batch_size: 10,
        inner_steps: 1,
        ..TrainConfig::default()
    };
    let model = MlpModel::init(&[4, 2], &mut rng::from_seed(0)).unwrap();
    let out = train(model, &train_set, &DefenseSpec::MatRand { eps_inf: 0.05, eps_2: 0.1 }, &c).unwrap();
    let n = out.norm_choices.len() as f64;
    assert_eq!(n, 1000.0);
    let linf = out.norm_choices.iter().filter(|&&k| k == Norm::Linf).count() as f64;
    assert!((linf - n / 2.0).abs() <= 3.0 * (n / 4.0).sqrt(), "{linf} of {n}");
}

#[test]
fn noise_is_calibrated_to_the_l2_budget() {
    let d = 100;
    let eps_2 = 0.498;
    let mut r = rng::from_seed(9);
    for noise in [NoiseDistribution::gaussian_for(eps_2, d), NoiseDistribution::uniform_for(eps_2, d)] {
        assert!((noise.rms_norm(d) - eps_2).abs() < 1e-12);
        let n = 20_000;
        let ms: f64 = (0..n).map(|_| norm_l2(&noise.sample(d, &mut r)).powi(2)).sum::<f64>() / n as f64;
        assert!((ms.sqrt() / eps_2 - 1.0).abs() < 0.02, "{}: {}", noise.tag(), ms.sqrt());
    }
}

#[test]
fn randomized_prediction() {
    let (train_set, test_set) = blobs("blobs:d=10,n=400,margin=0.6", 11);
    let model = fit(&train_set, &DefenseSpec::Natural, &cfg(10));
    let x = test_set.sample(0).0;
    let none = NoiseDistribution::None;
    assert_eq!(predict_randomized(&model, &none, x, 1, &mut rng::from_seed(0)).unwrap(), model.predict(x));
    assert!(predict_randomized(&model, &none, x, 0, &mut rng::from_seed(0)).is_err());
    // small noise leaves a confident prediction alone; same seed, same answer
    let noise = NoiseDistribution::Gaussian { sigma: 1e-3 };
    let a = predict_randomized(&model, &noise, x, 64, &mut rng::from_seed(4)).unwrap();
    assert_eq!(a, predict_randomized(&model, &noise, x, 64, &mut rng::from_seed(4)).unwrap());
    assert_eq!(a, model.predict(x));
}

#[test]
fn zero_budget_attack_gives_clean_accuracy() {
    let (train_set, test_set) = blobs("blobs:d=10,n=400", 13);
    let model = fit(&train_set, &DefenseSpec::Natural, &cfg(5));
    let noise = NoiseDistribution::Gaussian { sigma: 0.05 };
    for n in [NoiseDistribution::None, noise] {
        let clean = eval_accuracy(&model, &test_set, None, &n, 21).unwrap();
        for norm in [Norm::Linf, Norm::L2] {
            let spec = AttackSpec::Pgd(PgdConfig::new(norm, 0.0));
            assert_eq!(eval_accuracy(&model, &test_set, Some(&spec), &n, 21).unwrap(), clean);
        }
    }
}

#[test]
fn adversarial_training_buys_robustness() {
    let (train_set, test_set) = blobs("blobs:d=10,n=1000,margin=0.5,sigma=0.08", 15);
    let c = cfg(15);
    let eps = 0.06;
    let attack = AttackSpec::Pgd(PgdConfig::new(Norm::Linf, eps));
    let robust = |spec: &DefenseSpec| {
        let m = fit(&train_set, spec, &c);
        eval_accuracy(&m, &test_set, Some(&attack), &NoiseDistribution::None, 0).unwrap()
    };
    let natural = robust(&DefenseSpec::Natural);
    let at = robust(&DefenseSpec::At { norm: Norm::Linf, epsilon: eps });
    assert!(at > natural, "AT {at} vs natural {natural}");
}

#[test]
fn training_is_deterministic_and_rejects_bad_configs() {
    let (train_set, _) = blobs("blobs:d=4,n=200", 17);
    let spec = DefenseSpec::At { norm: Norm::L2, epsilon: 0.1 };
    let c = cfg(2);
    assert_eq!(fit(&train_set, &spec, &c), fit(&train_set, &spec, &c));
    let model = MlpModel::init(&[4, 2], &mut rng::from_seed(0)).unwrap();
    let bad = TrainConfig { learning_rate: 0.0, ..c };
    assert!(train(model.clone(), &train_set, &spec, &bad).is_err());
    let bad = DefenseSpec::At { norm: Norm::L2, epsilon: -1.0 };
    assert!(train(model, &train_set, &bad, &c).is_err());
}
