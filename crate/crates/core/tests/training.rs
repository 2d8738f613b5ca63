mod common;

use bayes_finetune::data::{make_blobs, make_two_moons, DatasetSplit};
use bayes_finetune::evaluation::{nll, top1_accuracy};
use bayes_finetune::model::Param;
use bayes_finetune::objectives::*;
use bayes_finetune::training::*;
use bayes_finetune::{BayesModel, DrawPlan, Error, InitSpec, IsotropicPrior, ModelSpec, Tensor};
use common::*;

fn mlp() -> ModelSpec {
    ModelSpec::Mlp { hidden: vec![16, 16] }
}

fn map_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, lr: 0.05, lambda: 1e-3, seed, ..Default::default() }
}

fn mfg_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 0.01,
        lambda: 1e-3,
        seed,
        variational_family: FamilyKind::Mfg,
        ..Default::default()
    }
}

fn moons(n: usize, seed: u64) -> DatasetSplit {
    make_two_moons(n, 0.15, seed).unwrap()
}

#[test]
fn separable_blobs_are_fit() {
    let data = make_blobs(200, 2, 0.3, 1).unwrap();
    let ckpt = pretrain_map(&mlp(), &map_cfg(30, 0), &data).unwrap();
    assert!(deterministic_accuracy(&ckpt.model, &data).unwrap() >= 0.99);
}

#[test]
fn strong_decay_shrinks_weights_every_epoch() {
    let data = make_blobs(64, 2, 0.5, 2).unwrap();
    let cfg = TrainConfig { lambda: 5.0, momentum: 0.0, ..map_cfg(1, 0) };
    let mut model = initial_checkpoint(&mlp(), &cfg, &data).unwrap().model;
    let norm = |m: &BayesModel| m.parameters().iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>();
    let mut opt = Sgd::new(0.0, &model);
    let mut r = rng(3);
    let mut prev = norm(&model);
    for _ in 0..6 {
        for start in (0..64).step_by(16) {
            let idx: Vec<usize> = (start..start + 16).collect();
            let (x, y) = data.batch(&idx).unwrap();
            let (_, mut grads) = ell_gradients(&model, &x, &y, Estimator::Exemplar, &mut r).unwrap();
            grads.iter_mut().flatten().for_each(|g| *g = -*g);
            model.edit_gradients(&mut grads).unwrap();
            opt.step(model.parameters_mut(), &grads, 0.05).unwrap();
        }
        let now = norm(&model);
        assert!(now < prev, "{now} ≥ {prev}");
        prev = now;
    }
}

#[test]
fn sgd_momentum_rule() {
    let mut r = rng(4);
    let prior = IsotropicPrior::from_lambda(1e-3, 10).unwrap();
    let mut m = BayesModel::mlp(1, &[], 2, prior, &mut r).unwrap();
    let before: Vec<f64> = m.parameters().iter().flat_map(|t| t.data().to_vec()).collect();
    let mut opt = Sgd::new(0.5, &m);
    let grads = vec![vec![1.0, -2.0], vec![0.5, 0.0]];
    opt.step(m.parameters_mut(), &grads, 0.1).unwrap();
    opt.step(m.parameters_mut(), &grads, 0.1).unwrap();
    // v₁ = g, v₂ = 1.5 g: total displacement 0.25 g
    let after: Vec<f64> = m.parameters().iter().flat_map(|t| t.data().to_vec()).collect();
    let flat: Vec<f64> = grads.concat();
    for ((a, b), g) in after.iter().zip(&before).zip(&flat) {
        assert!((b - a - 0.25 * g).abs() < 1e-15);
    }
    assert!(opt.step(m.parameters_mut(), &grads[..1], 0.1).is_err());
}

#[test]
fn zero_learning_rate_keeps_the_map_means() {
    let data = moons(64, 5);
    let map = pretrain_map(&mlp(), &map_cfg(3, 0), &data).unwrap();
    let ft = bayes_finetune(&map, &TrainConfig { lr: 0.0, ..mfg_cfg(2, 0) }, &data).unwrap();
    for (p, q) in map.model.params().zip(ft.model.params()) {
        match (p, q) {
            (Param::Point(w), Param::Mfg(post)) => assert_eq!(w, post.mu()),
            _ => panic!("unexpected parameter families"),
        }
    }
}

#[test]
fn checkpoints_are_deterministic_per_seed() {
    let data = moons(96, 6);
    let a = pretrain_map(&mlp(), &map_cfg(3, 7), &data).unwrap();
    let b = pretrain_map(&mlp(), &map_cfg(3, 7), &data).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = pretrain_map(&mlp(), &map_cfg(3, 8), &data).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());

    let reg = TrainConfig { regularizer: Some(RegularizerConfig::default()), ..mfg_cfg(2, 7) };
    let f1 = bayes_finetune(&a, &reg, &data).unwrap();
    let f2 = bayes_finetune(&a, &reg, &data).unwrap();
    assert_eq!(f1.to_bytes().unwrap(), f2.to_bytes().unwrap());
    assert_eq!(f1.meta.stage, "finetune");
    assert_eq!(f1.meta.config_hash, config_hash(&reg).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let data = moons(64, 9);
    let map = pretrain_map(&mlp(), &map_cfg(2, 0), &data).unwrap();
    let mut r = rng(10);
    let models = [
        map.clone(),
        bayes_finetune(&map, &mfg_cfg(1, 0), &data).unwrap(),
        bayes_finetune(&map, &TrainConfig { variational_family: FamilyKind::Pse, ..mfg_cfg(1, 0) }, &data).unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (i, ckpt) in models.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.ckpt"));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(&back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
        let plan = if ckpt.model.pse_candidates().is_some() {
            DrawPlan::Shared { candidate: Some(1) }
        } else {
            DrawPlan::Deterministic
        };
        let a = ckpt.model.predict_probs(&data.x, plan, None, &mut r).unwrap();
        let b = back.model.predict_probs(&data.x, plan, None, &mut r).unwrap();
        assert_eq!(a, b);
    }
    let mut bytes = models[0].to_bytes().unwrap();
    bytes[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    let bytes = models[0].to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn finetune_step_follows_the_documented_order() {
    let data = moons(32, 11);
    let map = pretrain_map(&mlp(), &map_cfg(1, 0), &data).unwrap();
    let cfg = TrainConfig {
        batch_size: 32,
        regularizer: Some(RegularizerConfig::default()),
        ..mfg_cfg(1, 0)
    };
    let mut trace = Vec::new();
    bayes_finetune_traced(&map, &cfg, &data, &mut |e| trace.push(e)).unwrap();
    assert_eq!(
        trace,
        vec![
            StepEvent::Likelihood { estimator: Estimator::Exemplar, batch: 32 },
            StepEvent::Regularizer { ood_batch: 32 },
            StepEvent::Backward,
            StepEvent::Edit,
            StepEvent::Step { lr: 0.01 },
        ]
    );

    let mut trace = Vec::new();
    let plain = TrainConfig { batch_size: 20, ..mfg_cfg(1, 0) };
    bayes_finetune_traced(&map, &plain, &data, &mut |e| trace.push(e)).unwrap();
    assert_eq!(trace.len(), 8);
    assert_eq!(trace[0], StepEvent::Likelihood { estimator: Estimator::Exemplar, batch: 20 });
    assert_eq!(trace[4], StepEvent::Likelihood { estimator: Estimator::Exemplar, batch: 12 });
}

#[test]
fn finetune_preconditions() {
    let data = moons(32, 12);
    let map = pretrain_map(&mlp(), &map_cfg(1, 0), &data).unwrap();
    assert!(matches!(bayes_finetune(&map, &map_cfg(1, 0), &data), Err(Error::Config(_))));
    let ft = bayes_finetune(&map, &mfg_cfg(1, 0), &data).unwrap();
    assert!(matches!(bayes_finetune(&ft, &mfg_cfg(1, 0), &data), Err(Error::Config(_))));
    assert!(matches!(pretrain_map(&mlp(), &mfg_cfg(1, 0), &data), Err(Error::Config(_))));
    let other = make_blobs(30, 3, 0.5, 0).unwrap();
    assert!(bayes_finetune(&map, &mfg_cfg(1, 0), &other).is_err());
}

#[test]
fn divergence_is_reported_as_numerical_error() {
    let data = moons(64, 13);
    let cfg = TrainConfig { lr: 1e200, ..map_cfg(2, 0) };
    assert!(matches!(pretrain_map(&mlp(), &cfg, &data), Err(Error::Numerical(_))));
}

#[test]
fn finetuning_keeps_map_accuracy() {
    let (train, test) = (moons(512, 14), moons(1000, 15));
    let map = pretrain_map(&mlp(), &map_cfg(40, 0), &train).unwrap();
    let ft = bayes_finetune(&map, &mfg_cfg(12, 0), &train).unwrap();
    let map_acc = deterministic_accuracy(&map.model, &test).unwrap();
    let (_, mean) = posterior_predictive(&ft.model, &test.x, 20, &mut rng(16)).unwrap();
    let ft_acc = top1_accuracy(&mean, &test.y).unwrap();
    assert!(ft_acc >= map_acc - 0.01, "{ft_acc} vs MAP {map_acc}");
}

#[test]
fn laplace_from_fisher_closed_form() {
    let mut r = rng(17);
    let prior = IsotropicPrior::from_lambda(2e-4, 500).unwrap();
    let model = BayesModel::mlp(2, &[3], 2, prior, &mut r).unwrap();
    let s2 = prior.sigma0_sq();
    let sizes: Vec<usize> = model.parameters().iter().map(|t| t.len()).collect();
    let zero: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let curv = 3.5;
    let huge: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![1e30; n]).collect();
    let known: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![curv; n]).collect();
    for (fisher, want) in [(zero, s2), (known, 1.0 / (curv + 1.0 / s2)), (huge, 0.0)] {
        let post = laplace_from_fisher(&model, &fisher).unwrap();
        for p in post.params() {
            let Param::Mfg(q) = p else { panic!("expected Gaussian") };
            for s in q.std().data() {
                assert!((s * s - want).abs() <= 1e-12 * want + 1e-29, "{} vs {want}", s * s);
            }
        }
    }
    let bad = vec![vec![-1.0; sizes[0]]];
    assert!(laplace_from_fisher(&model, &bad).is_err());
}

#[test]
fn laplace_uses_the_empirical_fisher() {
    // softmax regression on one feature: ∂ log p_y / ∂w_k = x (1[k = y] − p_k)
    let data = make_blobs(40, 2, 1.0, 18).unwrap();
    let x1 = Tensor::from_fn([40, 1], |i| data.x.data()[2 * i]);
    let one_d = DatasetSplit::new("toy", x1.clone(), data.y.clone(), 2, data.spec.clone(), 0).unwrap();
    let prior = IsotropicPrior::from_lambda(1e-2, 40).unwrap();
    let model = BayesModel::mlp(1, &[], 2, prior, &mut rng(19)).unwrap();
    let map = Checkpoint {
        model: model.clone(),
        meta: CheckpointMeta { config_hash: String::new(), epoch: 0, seed: 0, stage: "map".into() },
    };
    let post = laplace_diag(&map, &one_d).unwrap();
    let probs = model.predict_probs(&x1, DrawPlan::Deterministic, None, &mut rng(0)).unwrap();
    let mut f_w = [0.0; 2];
    let mut f_b = [0.0; 2];
    for i in 0..40 {
        for k in 0..2 {
            let d = f64::from(u8::from(data.y[i] == k)) - probs.data()[2 * i + k];
            f_w[k] += (x1.data()[i] * d).powi(2);
            f_b[k] += d * d;
        }
    }
    let prec0 = 1.0 / prior.sigma0_sq();
    let stds: Vec<Vec<f64>> = post
        .params()
        .map(|p| match p {
            Param::Mfg(q) => q.std().data().to_vec(),
            _ => panic!("expected Gaussian"),
        })
        .collect();
    for k in 0..2 {
        assert!((stds[0][k].powi(2) - 1.0 / (f_w[k] + prec0)).abs() < 1e-12);
        assert!((stds[1][k].powi(2) - 1.0 / (f_b[k] + prec0)).abs() < 1e-12);
    }
}

#[test]
fn mc_dropout_cases() {
    let (train, test) = (moons(256, 20), moons(400, 21));
    let map = pretrain_map(&mlp(), &map_cfg(30, 0), &train).unwrap();
    let mut r = rng(22);
    let tiny = mc_dropout_predict(&map.model, 1e-15, &test.x, 5, &mut r).unwrap();
    for s in 1..5 {
        assert_eq!(tiny.sample(s).unwrap(), tiny.sample(0).unwrap());
    }
    let ps = mc_dropout_predict(&map.model, 0.2, &test.x, 20, &mut r).unwrap();
    assert_ne!(ps.sample(0).unwrap(), ps.sample(1).unwrap());
    // boundary points: the least confident decile of the MAP prediction
    let p = map.model.predict_probs(&test.x, DrawPlan::Deterministic, None, &mut r).unwrap();
    let mut conf: Vec<(f64, usize)> = (0..400).map(|i| (p.data()[2 * i].max(p.data()[2 * i + 1]), i)).collect();
    conf.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mi = mutual_information(&ps);
    let boundary = conf[..40].iter().map(|&(_, i)| mi.data()[i]).sum::<f64>() / 40.0;
    assert!(boundary > 0.0);
    assert!(mc_dropout_predict(&map.model, 0.0, &test.x, 2, &mut r).is_err());
    assert!(mc_dropout_predict(&map.model, 1.0, &test.x, 2, &mut r).is_err());
}

#[test]
fn deep_ensemble_cases() {
    let (train, test) = (make_two_moons(300, 0.3, 23).unwrap(), make_two_moons(600, 0.3, 24).unwrap());
    let spec = mlp();
    assert!(matches!(deep_ensemble(&spec, &[map_cfg(5, 0)], &train), Err(Error::Config(_))));

    let same = deep_ensemble(&spec, &[map_cfg(5, 1), map_cfg(5, 1)], &train).unwrap();
    let ps = ensemble_predict(&[&same[0].model, &same[1].model], &test.x).unwrap();
    assert!(mutual_information(&ps).data().iter().all(|v| v.abs() < 1e-12));

    let cfgs: Vec<TrainConfig> = (0..3).map(|s| map_cfg(20, 10 + s)).collect();
    let members = deep_ensemble(&spec, &cfgs, &train).unwrap();
    let refs: Vec<&BayesModel> = members.iter().map(|c| &c.model).collect();
    let ps = ensemble_predict(&refs, &test.x).unwrap();
    assert_eq!(ps.samples(), 3);
    let ens = nll(&ps.mean(), &test.y).unwrap();
    // log-sum convexity: the mixture's NLL never exceeds the members' average
    let avg = members
        .iter()
        .map(|m| {
            let p = m.model.predict_probs(&test.x, DrawPlan::Deterministic, None, &mut rng(0)).unwrap();
            nll(&p, &test.y).unwrap()
        })
        .sum::<f64>()
        / 3.0;
    assert!(ens <= avg + 1e-12, "ensemble {ens} vs member average {avg}");
}

#[test]
fn initial_checkpoint_standardizes_inputs() {
    let data = make_blobs(100, 2, 1.0, 25).unwrap();
    let ckpt = initial_checkpoint(&mlp(), &map_cfg(1, 0), &data).unwrap();
    let init = InitSpec::default();
    assert!(ckpt.model.to_variational(bayes_finetune::Family::Mfg(init), &mut rng(0)).is_ok());
    match &ckpt.model.layers[0].kind {
        bayes_finetune::model::LayerKind::Standardize { mean, std } => {
            for j in 0..2 {
                let col: Vec<f64> = (0..100).map(|i| data.x.data()[2 * i + j]).collect();
                let m = col.iter().sum::<f64>() / 100.0;
                let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 100.0).sqrt();
                assert!((mean[j] - m).abs() < 1e-12);
                assert!((std[j] - s).abs() < 1e-12);
            }
        }
        other => panic!("first layer is {other:?}"),
    }
}
