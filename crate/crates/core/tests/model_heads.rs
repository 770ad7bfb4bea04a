use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sopssl_core::data::Sample;
use sopssl_core::model::{
    argmax, classify, cross_entropy, cross_entropy_probs, entropy, entropy_probs, grl, Architecture, ClassifierConfig,
    FeatureExtractorConfig, GrlSpec, HeadKind, LayerSpec, Model, ModelConfig, Pooling, ProbBatch,
};
use sopssl_core::oracle::{finite_diff_grad, loss_gradients, model_gradcheck, objective_terms, GradCheckStats};
use sopssl_core::param::ParamGroup;
use sopssl_core::train::{Mode, TrainConfig};
use sopssl_core::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `d = 6` channels on a 5×5 grid from a 3-channel input.
fn toy_config() -> ModelConfig {
    ModelConfig {
        extractor: FeatureExtractorConfig {
            input: [3, 5, 5],
            layers: vec![
                LayerSpec::Conv2d {
                    c_out: 6,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::PointwiseLinear { c_out: 6 },
            ],
        },
        ..ModelConfig::default()
    }
}

fn toy_model(seed: u64) -> Model {
    Model::new(toy_config(), Mode::Ours.arch(), 3, seed).unwrap()
}

fn samples(n: usize, seed: u64, labeled: bool) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            id: seed * 100 + i as u64,
            image: random(&[3, 5, 5], seed * 100 + i as u64),
            label: labeled.then_some(i % 3),
        })
        .collect()
}

fn refs(s: &[Sample]) -> Vec<&Sample> {
    s.iter().collect()
}

#[test]
#[allow(clippy::approx_constant)]
fn uniform_and_one_hot_identities() {
    for k in [2, 3, 10] {
        let p = ProbBatch::new(Tensor::full(&[4, k], 1.0 / k as f64)).unwrap();
        let lnk = (k as f64).ln();
        assert!((entropy_probs(&p) - lnk).abs() <= 1e-12);
        assert!((cross_entropy_probs(&p, &[0, 1, 0, 1]).unwrap() - lnk).abs() <= 1e-12);
    }
    let mut one_hot = Tensor::zeros(&[3, 4]);
    for (j, c) in [2, 0, 3].into_iter().enumerate() {
        one_hot.data_mut()[j * 4 + c] = 1.0;
    }
    assert_eq!(entropy_probs(&ProbBatch::new(one_hot).unwrap()), 0.0);
    let p = ProbBatch::new(Tensor::from_rows(&[[0.75, 0.25]])).unwrap();
    assert!((entropy_probs(&p) - 0.562335).abs() < 5e-7);
    assert!((entropy_probs(&ProbBatch::new(Tensor::full(&[1, 2], 0.5)).unwrap()) - 0.693147).abs() < 5e-7);
}

#[test]
fn tape_losses_on_equal_logits() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::full(&[5, 10], 0.3));
    let l = cross_entropy(&mut tape, logits, &[0, 3, 9, 1, 2]).unwrap();
    let h = entropy(&mut tape, logits).unwrap();
    assert!((tape.value(l).item() - 10f64.ln()).abs() <= 1e-12);
    assert!((tape.value(h).item() - 10f64.ln()).abs() <= 1e-12);
}

#[test]
fn entropy_stays_within_bounds() {
    for seed in 0..50 {
        let logits = random(&[6, 4], seed).map(|v| 8.0 * v);
        let h = entropy_probs(&ProbBatch::from_logits(&logits));
        assert!((0.0..=4f64.ln() + 1e-12).contains(&h));
    }
}

#[test]
fn prototype_rescaling_changes_nothing() {
    let cfg = ClassifierConfig::default();
    let v = random(&[4, 10], 1);
    let w = random(&[3, 10], 2);
    let eval = |w: &Tensor| {
        let mut t = Tape::new();
        let (vv, wv) = (t.constant(v.clone()), t.constant(w.clone()));
        let z = classify(&mut t, vv, wv, &cfg).unwrap();
        let l = cross_entropy(&mut t, z, &[0, 1, 2, 0]).unwrap();
        let h = entropy(&mut t, z).unwrap();
        (t.value(z).clone(), t.value(l).item(), t.value(h).item())
    };
    let (z0, l0, h0) = eval(&w);
    let (z7, l7, h7) = eval(&w.map(|x| 7.0 * x));
    assert!(z0.max_abs_diff(&z7) <= 1e-9);
    assert!((l0 - l7).abs() <= 1e-9 && (h0 - h7).abs() <= 1e-9);
    let mut per_row = w.clone();
    for (i, c) in [0.5, 3.0, 11.0].into_iter().enumerate() {
        for x in &mut per_row.data_mut()[i * 10..(i + 1) * 10] {
            *x *= c;
        }
    }
    let (zr, _, _) = eval(&per_row);
    assert!(z0.max_abs_diff(&zr) <= 1e-9);
    for j in 0..4 {
        assert_eq!(argmax(z0.row(j)), argmax(zr.row(j)));
    }
}

#[test]
fn model_logits_invariant_to_prototype_scale() {
    let mut model = toy_model(3);
    let imgs: Vec<Tensor> = (0..4).map(|i| random(&[3, 5, 5], 40 + i)).collect();
    let views: Vec<&Tensor> = imgs.iter().collect();
    let before = model.predict_logits(&views).unwrap();
    let w = model.classifier_weight();
    for x in model.params.get_mut(w).value.data_mut() {
        *x *= 7.0;
    }
    assert!(model.predict_logits(&views).unwrap().max_abs_diff(&before) <= 1e-9);
}

#[test]
fn classifier_weight_gradient() {
    let cfg = ClassifierConfig::default();
    let v = random(&[4, 6], 5);
    let w0 = random(&[3, 6], 6);
    let loss = |w: &Tensor| -> sopssl_core::Result<(Tape, sopssl_core::Var, sopssl_core::Var)> {
        let mut t = Tape::new();
        let vv = t.constant(v.clone());
        let wv = t.param(w.clone());
        let z = classify(&mut t, vv, wv, &cfg)?;
        let l = cross_entropy(&mut t, z, &[2, 0, 1, 1])?;
        Ok((t, wv, l))
    };
    let (t, wv, l) = loss(&w0).unwrap();
    let g = t.backward(l).unwrap();
    let numeric = finite_diff_grad(
        |d| {
            let (t, _, l) = loss(&Tensor::new(vec![3, 6], d.to_vec())?)?;
            Ok(t.value(l).item())
        },
        w0.data(),
        1e-5,
    )
    .unwrap();
    let stats = GradCheckStats::compare(g.get(wv).unwrap().data(), &numeric);
    assert!(stats.max_rel <= 1e-4, "{stats:?}");
}

#[test]
fn aligned_feature_picks_its_class() {
    let mut w = Tensor::zeros(&[3, 4]);
    w.data_mut()[0] = 2.0;
    w.data_mut()[5] = 1.0;
    w.data_mut()[10] = 5.0;
    let mut t = Tape::new();
    let v = t.constant(Tensor::from_rows(&[[0.0, 3.0, 0.0, 0.0]]));
    let wv = t.constant(w);
    let z = classify(&mut t, v, wv, &ClassifierConfig::default()).unwrap();
    assert_eq!(argmax(t.value(z).row(0)), 1);
}

#[test]
fn extractor_weight_gradient() {
    let model = toy_model(7);
    let image = random(&[3, 5, 5], 8);
    let id = model.params.find("f.layer0.weight").unwrap();
    let probe = |m: &Model| -> sopssl_core::Result<f64> {
        let mut t = Tape::new();
        let b = m.params.bind(&mut t);
        let fm = m.extract_features(&mut t, &b, &image)?;
        let s = t.sum(fm.x)?;
        Ok(t.value(s).item())
    };
    let mut t = Tape::new();
    let b = model.params.bind(&mut t);
    let fm = model.extract_features(&mut t, &b, &image).unwrap();
    let s = t.sum(fm.x).unwrap();
    let g = t.backward(s).unwrap();
    let mut m = model.clone();
    let numeric = finite_diff_grad(
        |d| {
            m.params.get_mut(id).value.data_mut().copy_from_slice(d);
            probe(&m)
        },
        model.params.get(id).value.data(),
        1e-5,
    )
    .unwrap();
    let stats = GradCheckStats::compare(g.get(b.var(id)).unwrap().data(), &numeric);
    assert!(stats.max_rel <= 1e-5, "{stats:?}");
}

#[test]
fn identical_images_give_identical_maps() {
    let model = toy_model(9);
    let image = random(&[3, 5, 5], 10);
    let mut t = Tape::new();
    let b = model.params.bind(&mut t);
    let a = model.extract_features(&mut t, &b, &image).unwrap();
    let c = model.extract_features(&mut t, &b, &image).unwrap();
    assert_eq!(t.value(a.x), t.value(c.x));
    assert_eq!((a.d, a.n()), (6, 25));
}

/// Gradient of the unlabeled entropy wrt every extractor parameter, with or without reversal.
fn unlabeled_extractor_grads(model: &Model, batch: &[&Sample], reverse: bool, negate_loss: bool) -> Vec<Tensor> {
    let mut t = Tape::new();
    let b = model.params.bind(&mut t);
    let imgs: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let ids: Vec<u64> = batch.iter().map(|s| s.id).collect();
    let mut f = model.features_batch(&mut t, &b, &imgs, &ids).unwrap();
    let forward = t.value(f).clone();
    if reverse {
        f = grl(&mut t, f, GrlSpec::default()).unwrap();
        assert_eq!(t.value(f), &forward);
    }
    let z = model.logits(&mut t, &b, f).unwrap();
    let mut h = entropy(&mut t, z).unwrap();
    if negate_loss {
        h = t.scale(h, -1.0).unwrap();
    }
    let mut g = t.backward(h).unwrap();
    let all = b.gradients(&model.params, &mut g);
    model
        .params
        .iter()
        .zip(all.iter())
        .filter(|(p, _)| p.group == ParamGroup::FeatureExtractor)
        .map(|(_, g)| g.clone())
        .collect()
}

#[test]
fn reversal_negates_extractor_gradient() {
    let model = toy_model(11);
    let unl = samples(3, 12, false);
    let plain = unlabeled_extractor_grads(&model, &refs(&unl), false, false);
    let reversed = unlabeled_extractor_grads(&model, &refs(&unl), true, false);
    let negated = unlabeled_extractor_grads(&model, &refs(&unl), false, true);
    for ((p, r), n) in plain.iter().zip(&reversed).zip(&negated) {
        assert!(p.data().iter().any(|&x| x != 0.0));
        assert!(p.map(|x| -x).max_abs_diff(r) <= 1e-12);
        assert!(r.max_abs_diff(n) <= 1e-12);
    }
}

#[test]
fn end_to_end_losses_match_finite_differences() {
    let model = toy_model(13);
    let lab = samples(3, 14, true);
    let unl = samples(3, 15, false);
    let (gl, gh) = loss_gradients(&model, &refs(&lab), &refs(&unl)).unwrap();
    for (which, grads) in [("L", &gl), ("H", &gh)] {
        for (id, g) in model.params.ids().zip(grads.iter()) {
            let mut probe = model.clone();
            let numeric = finite_diff_grad(
                |d| {
                    probe.params.get_mut(id).value.data_mut().copy_from_slice(d);
                    let (l, h) = objective_terms(&probe, &refs(&lab), &refs(&unl))?;
                    Ok(if which == "L" { l } else { h })
                },
                model.params.get(id).value.data(),
                1e-5,
            )
            .unwrap();
            let stats = GradCheckStats::compare(g.data(), &numeric);
            assert!(
                stats.max_rel <= 1e-4,
                "{which} {}: {stats:?}",
                model.params.get(id).name
            );
        }
    }
}

#[test]
fn training_objective_gradcheck_through_reversal() {
    let model = toy_model(16);
    let lab = samples(3, 17, true);
    let unl = samples(3, 18, false);
    let cfg = TrainConfig {
        lambda: 0.3,
        ..TrainConfig::default()
    };
    let reports = model_gradcheck(&model, &refs(&lab), &refs(&unl), &cfg, GrlSpec::default(), 1e-5).unwrap();
    assert_eq!(reports.len(), model.params.len());
    for r in &reports {
        assert!(r.stats.max_rel <= 1e-4, "{r:?}");
    }
    let wrong = GrlSpec { backward_factor: 1.0 };
    let bad = model_gradcheck(&model, &refs(&lab), &refs(&unl), &cfg, wrong, 1e-5).unwrap();
    assert!(bad.iter().any(|r| r.stats.max_rel > 1e-4));
}

#[test]
fn average_pooling_head_shapes() {
    let arch = Architecture {
        pooling: Pooling::Average,
        head: HeadKind::Linear,
    };
    let model = Model::new(toy_config(), arch, 4, 0).unwrap();
    assert_eq!(model.feature_dim(), 6);
    assert!(model.params.find("c.bias").is_some());
    let img = random(&[3, 5, 5], 19);
    assert_eq!(model.predict_logits(&[&img]).unwrap().shape(), &[1, 4]);
    let sop = toy_model(0);
    assert_eq!(sop.feature_dim(), 21);
    assert!(sop.params.find("c.bias").is_none());
}
