use sopssl_core::data::{generate, Dataset, Sample, SplitCounts, SyntheticSpec};
use sopssl_core::model::{HeadKind, LayerSpec, Model, ModelConfig, Pooling};
use sopssl_core::oracle::{loss_gradients, update_oracle};
use sopssl_core::param::{Gradients, ParamGroup, ParamStore};
use sopssl_core::train::{
    check_lambda_grid, evaluate, label_rate_sweep, lambda_sweep, run, run_baseline, sgd_update, train_step, Mode, Sgd,
    TrainConfig, UpdateScheme,
};
use sopssl_core::{Error, Tensor};

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 3,
        per_class: SplitCounts {
            labeled: 3,
            unlabeled: 6,
            validation: 2,
            test: 4,
        },
        seed,
        ..SyntheticSpec::default()
    }
}

fn small_data() -> Dataset {
    generate(&small_spec(1)).unwrap()
}

fn short(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        iterations: 12,
        eval_every: 4,
        batch_labeled: 3,
        batch_unlabeled: 3,
        ..TrainConfig::desk()
    }
}

fn deltas(before: &ParamStore, after: &ParamStore) -> Vec<Tensor> {
    before
        .iter()
        .zip(after.iter())
        .map(|(b, a)| {
            Tensor::new(
                b.value.shape().to_vec(),
                a.value.data().iter().zip(b.value.data()).map(|(x, y)| x - y).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn batches(ds: &Dataset) -> (Vec<&Sample>, Vec<&Sample>) {
    (
        ds.labeled.iter().take(4).collect(),
        ds.unlabeled.iter().take(4).collect(),
    )
}

#[test]
fn realized_update_matches_oracle() {
    let ds = small_data();
    let (lb, ub) = batches(&ds);
    for mode in [Mode::Ours, Mode::EntCov, Mode::SupCov, Mode::OursNoCov, Mode::Sup] {
        for lambda in [0.025, 0.4] {
            let cfg = TrainConfig {
                mode,
                lambda,
                ..TrainConfig::default()
            };
            let model = Model::new(ModelConfig::default(), mode.arch(), 3, 5).unwrap();
            let expected = update_oracle(&model, &lb, &ub, &cfg).unwrap();
            let mut stepped = model.clone();
            train_step(&mut stepped, &mut Sgd::new(), &lb, &ub, &cfg).unwrap();
            let got = deltas(&model.params, &stepped.params);
            for ((p, e), g) in model.params.iter().zip(expected.iter()).zip(&got) {
                let scale = e.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(scale > 0.0, "{} has no update", p.name);
                assert!(
                    e.max_abs_diff(g) <= 1e-10,
                    "{} {}: {}",
                    mode.name(),
                    p.name,
                    e.max_abs_diff(g)
                );
            }
        }
    }
}

#[test]
fn oracle_at_zero_lambda_is_supervised() {
    let ds = small_data();
    let (lb, ub) = batches(&ds);
    let model = Model::new(ModelConfig::default(), Mode::Ours.arch(), 3, 6).unwrap();
    let zero = TrainConfig {
        lambda: 0.0,
        ..TrainConfig::default()
    };
    let sup = TrainConfig {
        mode: Mode::SupCov,
        ..TrainConfig::default()
    };
    let a = update_oracle(&model, &lb, &ub, &zero).unwrap();
    let b = update_oracle(&model, &lb, &ub, &sup).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn oracle_is_linear_in_lambda() {
    let ds = small_data();
    let (lb, ub) = batches(&ds);
    let model = Model::new(ModelConfig::default(), Mode::Ours.arch(), 3, 7).unwrap();
    let at = |lambda| {
        update_oracle(
            &model,
            &lb,
            &ub,
            &TrainConfig {
                lambda,
                ..TrainConfig::default()
            },
        )
        .unwrap()
    };
    let (pos, neg, zero) = (at(0.3), at(-0.3), at(0.0));
    for ((p, n), z) in pos.iter().zip(neg.iter()).zip(zero.iter()) {
        for ((a, b), c) in p.data().iter().zip(n.data()).zip(z.data()) {
            assert!((a - c + (b - c)).abs() <= 1e-15);
        }
    }
}

#[test]
fn classifier_entropy_component_signs() {
    let ds = small_data();
    let (lb, ub) = batches(&ds);
    let model = Model::new(ModelConfig::default(), Mode::Ours.arch(), 3, 8).unwrap();
    let (_, grad_h) = loss_gradients(&model, &lb, &ub).unwrap();
    let w = model.classifier_weight();
    let gh = grad_h.get(w);
    let step = |mode| {
        let cfg = TrainConfig {
            mode,
            lambda: 0.2,
            ..TrainConfig::default()
        };
        let mut m = model.clone();
        train_step(&mut m, &mut Sgd::new(), &lb, &ub, &cfg).unwrap();
        m.params.get(w).value.clone()
    };
    let base = step(Mode::SupCov);
    // Entropy part of the classifier's effective gradient: -(Δ_mode − Δ_sup)/lr.
    let h_part = |after: &Tensor| -> Vec<f64> {
        after
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| -(a - b) / 0.003)
            .collect()
    };
    let ent = h_part(&step(Mode::EntCov));
    let ours = h_part(&step(Mode::Ours));
    let dot = |v: &[f64]| v.iter().zip(gh.data()).map(|(a, b)| a * b).sum::<f64>();
    assert!(dot(&ent) > 0.0);
    assert!(dot(&ours) < 0.0);
    for ((e, o), g) in ent.iter().zip(&ours).zip(gh.data()) {
        if g.abs() > 1e-9 {
            assert_eq!(e.signum(), g.signum());
            assert_eq!(o.signum(), -g.signum());
        }
    }
}

#[test]
fn zero_lambda_trajectory_equals_supervised() {
    let ds = small_data();
    let ours = run(
        &ds,
        &ModelConfig::default(),
        &TrainConfig {
            lambda: 0.0,
            ..short(Mode::Ours)
        },
    )
    .unwrap();
    let sup = run(&ds, &ModelConfig::default(), &short(Mode::SupCov)).unwrap();
    assert_eq!(ours.records.len(), sup.records.len());
    for (a, b) in ours.records.iter().zip(&sup.records) {
        assert_eq!(a.l.to_bits(), b.l.to_bits());
        assert_eq!((a.val_acc, a.test_acc), (b.val_acc, b.test_acc));
    }
    for (p, q) in ours.model.params.iter().zip(sup.model.params.iter()) {
        assert!(p
            .value
            .data()
            .iter()
            .zip(q.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn sgd_examples() {
    let mut store = ParamStore::new();
    store.push("theta", ParamGroup::Classifier, Tensor::scalar(1.0));
    let cfg = TrainConfig {
        lr_classifier: 0.1,
        ..TrainConfig::default()
    };
    sgd_update(&mut store, &Gradients::from_vec(vec![Tensor::scalar(2.0)]), &cfg).unwrap();
    assert!((store.get(sopssl_core::param::ParamId(0)).value.item() - 0.8).abs() < 1e-15);

    let mut store = ParamStore::new();
    store.push("conv", ParamGroup::FeatureExtractor, Tensor::full(&[2], 1.0));
    store.push("clf", ParamGroup::Classifier, Tensor::full(&[2], 1.0));
    let before = store.clone();
    let zeros = Gradients::zeros_like(&store);
    sgd_update(&mut store, &zeros, &TrainConfig::default()).unwrap();
    assert_eq!(store, before);
    let ones = Gradients::from_vec(vec![Tensor::full(&[2], 1.0), Tensor::full(&[2], 1.0)]);
    sgd_update(&mut store, &ones, &TrainConfig::default()).unwrap();
    let moved: Vec<f64> = store.iter().map(|p| 1.0 - p.value.data()[0]).collect();
    assert!((moved[0] - 0.0012).abs() < 1e-15);
    assert!((moved[1] - 0.003).abs() < 1e-15);

    let short_grads = Gradients::from_vec(vec![Tensor::full(&[2], 1.0)]);
    assert!(sgd_update(&mut store, &short_grads, &TrainConfig::default()).is_err());
}

#[test]
fn momentum_accumulates_velocity() {
    let mut store = ParamStore::new();
    store.push("clf", ParamGroup::Classifier, Tensor::scalar(0.0));
    let cfg = TrainConfig {
        lr_classifier: 1.0,
        momentum: 0.5,
        ..TrainConfig::default()
    };
    let g = Gradients::from_vec(vec![Tensor::scalar(1.0)]);
    let mut opt = Sgd::new();
    opt.step(&mut store, &g, &cfg).unwrap();
    opt.step(&mut store, &g, &cfg).unwrap();
    assert!((store.iter().next().unwrap().value.item() + 2.5).abs() < 1e-15);
}

/// Average-pooling model whose single pointwise layer is the identity and whose
/// linear head maps channel `k` to class `k`.
fn channel_reader(k: usize) -> Model {
    let mut cfg = ModelConfig::default();
    cfg.extractor.input = [k, 2, 2];
    cfg.extractor.layers = vec![LayerSpec::PointwiseLinear { c_out: k }];
    let mut model = Model::new(cfg, Mode::Sup.arch(), k, 0).unwrap();
    assert_eq!(
        (model.arch.pooling, model.arch.head),
        (Pooling::Average, HeadKind::Linear)
    );
    for p in model.params.iter_mut() {
        let eye = Tensor::identity(k).into_data();
        if p.name == "c.bias" {
            p.value = Tensor::zeros(&[k]);
        } else {
            p.value = Tensor::new(p.value.shape().to_vec(), eye).unwrap();
        }
    }
    model
}

fn one_hot_images(k: usize, per_class: usize) -> Vec<Sample> {
    (0..k * per_class)
        .map(|i| {
            let c = i % k;
            let mut img = Tensor::zeros(&[k, 2, 2]);
            img.data_mut()[c * 4..(c + 1) * 4].fill(1.0 + (i / k) as f64);
            Sample {
                id: i as u64,
                image: img,
                label: Some(c),
            }
        })
        .collect()
}

#[test]
fn evaluate_examples() {
    let test = one_hot_images(4, 5);
    let model = channel_reader(4);
    assert_eq!(evaluate(&model, &test).unwrap(), 1.0);

    let mut constant = model.clone();
    for p in constant.params.iter_mut() {
        if p.name == "c.bias" {
            p.value = Tensor::new(vec![4], vec![0.0, 0.0, 1e6, 0.0]).unwrap();
        }
    }
    assert_eq!(evaluate(&constant, &test).unwrap(), 0.25);

    let ds = small_data();
    let m = Model::new(ModelConfig::default(), Mode::Ours.arch(), 3, 9).unwrap();
    let imgs: Vec<&Tensor> = ds.test.iter().map(|s| &s.image).collect();
    let preds = m.predict(&imgs).unwrap();
    let hits = preds.iter().zip(&ds.test).filter(|(p, s)| Some(**p) == s.label).count();
    let acc = evaluate(&m, &ds.test).unwrap();
    assert!((acc - hits as f64 / ds.test.len() as f64).abs() <= 1e-15);
    assert!(evaluate(&m, &[]).is_err());
}

#[test]
fn runs_are_deterministic() {
    let ds = small_data();
    let a = run(&ds, &ModelConfig::default(), &short(Mode::Ours)).unwrap();
    let b = run(&ds, &ModelConfig::default(), &short(Mode::Ours)).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.model, b.model);
}

#[test]
fn all_modes_report_equal_length_series() {
    let ds = small_data();
    let lens: Vec<usize> = Mode::ALL
        .iter()
        .map(|&m| {
            run_baseline(m, &ds, &ModelConfig::default(), &short(Mode::Ours))
                .unwrap()
                .records
                .len()
        })
        .collect();
    assert_eq!(lens, vec![3; 5]);
}

#[test]
fn unlabeled_modes_need_unlabeled_data() {
    let mut ds = small_data();
    ds.unlabeled.clear();
    assert!(run(&ds, &ModelConfig::default(), &short(Mode::SupCov)).is_ok());
    for mode in [Mode::Ours, Mode::EntCov, Mode::OursNoCov] {
        assert!(matches!(
            run(&ds, &ModelConfig::default(), &short(mode)),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn constant_image_reports_its_sample() {
    let mut ds = small_data();
    ds.labeled[0].image = Tensor::zeros(&[8, 16, 16]);
    let bad_id = ds.labeled[0].id;
    let cfg = TrainConfig {
        batch_labeled: 30,
        ..short(Mode::SupCov)
    };
    match run(&ds, &ModelConfig::default(), &cfg) {
        Err(Error::DegenerateCovariance { sample, .. }) => assert_eq!(sample, Some(bad_id as usize)),
        other => panic!("expected degenerate covariance, got {other:?}"),
    }
}

#[test]
fn early_stopping_truncates_series() {
    let ds = small_data();
    let cfg = TrainConfig {
        iterations: 400,
        eval_every: 2,
        early_stop_patience: Some(1),
        lr_feature: 0.0,
        lr_classifier: 0.0,
        ..short(Mode::SupCov)
    };
    let out = run(&ds, &ModelConfig::default(), &cfg).unwrap();
    assert_eq!(out.records.len(), 3);
    assert_eq!(out.best_iteration, 6);
}

#[test]
fn sequential_scheme_differs_but_runs() {
    let ds = small_data();
    let combined = run(&ds, &ModelConfig::default(), &short(Mode::Ours)).unwrap();
    let cfg = TrainConfig {
        update_scheme: UpdateScheme::Sequential,
        ..short(Mode::Ours)
    };
    let seq = run(&ds, &ModelConfig::default(), &cfg).unwrap();
    assert_eq!(seq.records.len(), combined.records.len());
    assert_ne!(seq.model, combined.model);
}

#[test]
fn unlabeled_entropy_trends_down() {
    let ds = generate(&SyntheticSpec {
        num_classes: 4,
        per_class: SplitCounts {
            labeled: 5,
            unlabeled: 20,
            validation: 2,
            test: 2,
        },
        ..SyntheticSpec::default()
    })
    .unwrap();
    for mode in [Mode::Ours, Mode::EntCov] {
        let cfg = TrainConfig {
            iterations: 400,
            eval_every: 100,
            lambda: 0.1,
            ..short(mode)
        };
        let out = run(&ds, &ModelConfig::default(), &cfg).unwrap();
        let (first, last) = (out.records[0].h, out.records.last().unwrap().h);
        assert!(last <= first, "{}: {first} -> {last}", mode.name());
    }
}

#[test]
fn sweep_shapes() {
    let ds = small_data();
    let base = TrainConfig {
        iterations: 4,
        eval_every: 2,
        ..short(Mode::Ours)
    };
    let grid = [0.025, 0.05, 0.1, 0.2, 0.5, 1.0];
    let rows = lambda_sweep(&ds, &ModelConfig::default(), &base, &grid).unwrap();
    assert_eq!(rows.len(), 6);
    let best = rows.iter().map(|r| r.test_acc).fold(0.0, f64::max);
    assert!(best >= rows[0].test_acc - 0.005);
    assert!(check_lambda_grid(&[0.1, 0.0]).is_err());
    assert!(lambda_sweep(&ds, &ModelConfig::default(), &base, &[]).is_err());

    let rates = [0.0, 0.25, 0.5, 0.75, 1.0];
    let rows = label_rate_sweep(&ds, &ModelConfig::default(), &base, &rates).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.n_unlabeled).collect::<Vec<_>>(),
        vec![0, 4, 9, 13, 18]
    );
    let sup = run_baseline(Mode::SupCov, &ds, &ModelConfig::default(), &base).unwrap();
    assert_eq!(rows[0].test_acc, sup.selected_test_acc);
    assert_eq!(rows[0].best_val_acc, sup.best_val_acc);
    assert!(label_rate_sweep(&ds, &ModelConfig::default(), &base, &[1.5]).is_err());
}
