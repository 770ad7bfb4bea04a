//! The adversarial semi-supervised training loop.
//!
//! Each iteration samples one labeled and one unlabeled mini-batch. The
//! labeled cross-entropy `L` trains every parameter. On the unlabeled path the
//! pooled features pass through a gradient reversal layer before the
//! classifier, and the head loss is `-λH`: the classifier descends `L - λH`
//! (maximizing entropy) while the feature extractor descends `L + λH`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_by_rate, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{
    cross_entropy, entropy, grl, Architecture, GrlSpec, HeadKind, LossTerms, Model, ModelConfig, Pooling,
};
use crate::param::{Gradients, ParamGroup, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// First-order pooling, unnormalized linear classifier, labeled data only.
    Sup,
    /// Second-order pooling, labeled data only.
    SupCov,
    /// Second-order pooling; entropy minimized by both `F` and `C`.
    EntCov,
    /// The adversarial scheme on first-order pooled features.
    OursNoCov,
    /// The adversarial scheme on second-order pooled features.
    Ours,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Sup, Mode::SupCov, Mode::EntCov, Mode::OursNoCov, Mode::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sup => "sup",
            Mode::SupCov => "sup_cov",
            Mode::EntCov => "ent_cov",
            Mode::OursNoCov => "ours_no_cov",
            Mode::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn arch(self) -> Architecture {
        match self {
            Mode::Sup => Architecture {
                pooling: Pooling::Average,
                head: HeadKind::Linear,
            },
            Mode::OursNoCov => Architecture {
                pooling: Pooling::Average,
                head: HeadKind::Normalized,
            },
            Mode::SupCov | Mode::EntCov | Mode::Ours => Architecture {
                pooling: Pooling::SecondOrder,
                head: HeadKind::Normalized,
            },
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        matches!(self, Mode::EntCov | Mode::OursNoCov | Mode::Ours)
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Mode::OursNoCov | Mode::Ours)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScheme {
    /// Both losses accumulate into one gradient, then a single SGD step.
    #[default]
    Combined,
    /// A labeled step followed by a separate unlabeled step.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_feature: f64,
    pub lr_classifier: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Evaluations without validation improvement before stopping.
    pub early_stop_patience: Option<usize>,
    pub eval_every: usize,
    pub mode: Mode,
    pub update_scheme: UpdateScheme,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.025,
            lr_feature: 0.0012,
            lr_classifier: 0.003,
            batch_labeled: 10,
            batch_unlabeled: 10,
            iterations: 2000,
            seed: 0,
            early_stop_patience: None,
            eval_every: 100,
            mode: Mode::Ours,
            update_scheme: UpdateScheme::Combined,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Learning rates scaled up 25x (ratio kept) for the small synthetic
    /// models, which train from scratch rather than fine-tuning.
    pub fn desk() -> Self {
        TrainConfig {
            lr_feature: 0.03,
            lr_classifier: 0.075,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.batch_labeled == 0 || (self.mode.uses_unlabeled() && self.batch_unlabeled == 0) {
            return Err(Error::config("batch sizes must be >= 1"));
        }
        if !(self.lr_feature >= 0.0) || !(self.lr_classifier >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must lie in [0,1), weight_decay >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::FeatureExtractor => self.lr_feature,
            ParamGroup::Classifier => self.lr_classifier,
        }
    }
}

/// One row of the metrics series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Mean labeled cross-entropy since the previous record.
    pub l: f64,
    /// Mean unlabeled entropy since the previous record (0 when unused).
    pub h: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Wall-clock milliseconds since the run started.
    pub ms: f64,
}

/// Plain SGD, `θ ← θ − lr(group)·g`.
pub fn sgd_update(params: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    grads.check_complete(params)?;
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        let lr = cfg.lr(p.group);
        for (w, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

/// SGD with optional momentum and weight decay; plain SGD when both are zero.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
        if cfg.momentum == 0.0 && cfg.weight_decay == 0.0 {
            return sgd_update(params, grads, cfg);
        }
        grads.check_complete(params)?;
        let mut effective = grads.clone();
        if cfg.weight_decay != 0.0 {
            let decay = Gradients::from_vec(params.iter().map(|p| p.value.clone()).collect());
            effective.add_scaled(&decay, cfg.weight_decay);
        }
        if cfg.momentum != 0.0 {
            let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(params));
            let mut next = Gradients::from_vec(v.iter().map(|x| x.map(|y| y * cfg.momentum)).collect());
            next.add_scaled(&effective, 1.0);
            *v = next.clone();
            effective = next;
        }
        sgd_update(params, &effective, cfg)
    }
}

fn labels_of(batch: &[&Sample]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::config(format!("sample {} has no label", s.id)))
        })
        .collect()
}

fn images_of<'a>(batch: &[&'a Sample]) -> (Vec<&'a Tensor>, Vec<u64>) {
    (
        batch.iter().map(|s| &s.image).collect(),
        batch.iter().map(|s| s.id).collect(),
    )
}

/// Head loss on the unlabeled path for `mode`, recorded on `tape`.
/// Returns `(head_loss, H)`.
fn unlabeled_head(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::param::Bound,
    batch: &[&Sample],
    cfg: &TrainConfig,
    reversal: GrlSpec,
) -> Result<(Var, f64)> {
    let (imgs, ids) = images_of(batch);
    let mut f = model.features_batch(tape, bound, &imgs, &ids)?;
    if cfg.mode.adversarial() {
        f = grl(tape, f, reversal)?;
    }
    let logits = model.logits(tape, bound, f)?;
    let h = entropy(tape, logits)?;
    let h_value = tape.value(h).item();
    let sign = if cfg.mode.adversarial() { -1.0 } else { 1.0 };
    Ok((tape.scale(h, sign * cfg.lambda)?, h_value))
}

/// Gradients of one iteration's objective, without applying them.
pub fn step_gradients(
    model: &Model,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
) -> Result<(Gradients, LossTerms)> {
    step_gradients_with(model, labeled, unlabeled, cfg, GrlSpec::default())
}

/// [`step_gradients`] with an explicit reversal layer.
pub fn step_gradients_with(
    model: &Model,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
    reversal: GrlSpec,
) -> Result<(Gradients, LossTerms)> {
    if labeled.is_empty() {
        return Err(Error::config("empty labeled batch"));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let labels = labels_of(labeled)?;
    let (imgs, ids) = images_of(labeled);
    let f = model.features_batch(&mut tape, &bound, &imgs, &ids)?;
    let logits = model.logits(&mut tape, &bound, f)?;
    let l = cross_entropy(&mut tape, logits, &labels)?;
    let l_value = tape.value(l).item();
    let mut total = l;
    let mut h_value = 0.0;
    if cfg.mode.uses_unlabeled() {
        if unlabeled.is_empty() {
            return Err(Error::config("empty unlabeled batch"));
        }
        let (head, h) = unlabeled_head(model, &mut tape, &bound, unlabeled, cfg, reversal)?;
        total = tape.add(l, head)?;
        h_value = h;
    }
    let mut grads = tape.backward(total)?;
    Ok((
        bound.gradients(&model.params, &mut grads),
        LossTerms {
            l: l_value,
            h: h_value,
            lambda: cfg.lambda,
        },
    ))
}

/// One optimization step on a labeled and an unlabeled mini-batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    match cfg.update_scheme {
        UpdateScheme::Combined => {
            let (grads, terms) = step_gradients(model, labeled, unlabeled, cfg)?;
            opt.step(&mut model.params, &grads, cfg)?;
            Ok(terms)
        }
        UpdateScheme::Sequential => {
            let sup_cfg = TrainConfig {
                mode: Mode::SupCov,
                ..cfg.clone()
            };
            let (grads, mut terms) = step_gradients(model, labeled, &[], &sup_cfg)?;
            opt.step(&mut model.params, &grads, cfg)?;
            if cfg.mode.uses_unlabeled() {
                if unlabeled.is_empty() {
                    return Err(Error::config("empty unlabeled batch"));
                }
                let mut tape = Tape::new();
                let bound = model.params.bind(&mut tape);
                let (head, h) = unlabeled_head(model, &mut tape, &bound, unlabeled, cfg, GrlSpec::default())?;
                let mut g = tape.backward(head)?;
                let grads = bound.gradients(&model.params, &mut g);
                opt.step(&mut model.params, &grads, cfg)?;
                terms.h = h;
            }
            Ok(terms)
        }
    }
}

/// Evaluation is chunked so the tape stays small.
const EVAL_CHUNK: usize = 64;

/// Fraction of samples whose argmax prediction equals their label.
pub fn evaluate(model: &Model, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let mut correct = 0usize;
    for chunk in split.chunks(EVAL_CHUNK) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let preds = model.predict(&imgs)?;
        for (s, p) in chunk.iter().zip(preds) {
            let y = s
                .label
                .ok_or_else(|| Error::config(format!("sample {} has no label", s.id)))?;
            if y == p {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: Mode,
    pub records: Vec<MetricsRecord>,
    /// Highest validation accuracy seen at an evaluation point.
    pub best_val_acc: f64,
    pub best_iteration: usize,
    /// Test accuracy at the best validation point (latest among ties).
    pub selected_test_acc: f64,
    pub final_test_acc: f64,
    pub model: Model,
    pub best_model: Model,
}

fn sample_batch<'a>(pool: &'a [Sample], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Sample> {
    (0..size).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

pub fn check_run_inputs(dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if dataset.labeled.is_empty() {
        return Err(Error::config("labeled split is empty"));
    }
    if cfg.mode.uses_unlabeled() && dataset.unlabeled.is_empty() {
        return Err(Error::config(format!("mode {} needs unlabeled data", cfg.mode.name())));
    }
    if dataset.validation.is_empty() || dataset.test.is_empty() {
        return Err(Error::config("validation and test splits must be non-empty"));
    }
    Ok(())
}

/// Trains from scratch. `clock` returns milliseconds since an arbitrary origin.
pub fn run_with_clock(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    clock: &dyn Fn() -> f64,
) -> Result<RunOutput> {
    check_run_inputs(dataset, cfg)?;
    let start = clock();
    let mut model = Model::new(model_cfg.clone(), cfg.mode.arch(), dataset.num_classes, cfg.seed)?;
    let mut opt = Sgd::new();
    let mut lab_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    lab_rng.set_stream(0x1a);
    let mut unl_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    unl_rng.set_stream(0x1b);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, f64, Model)> = None;
    let mut since_best = 0usize;
    let (mut l_sum, mut h_sum, mut window) = (0.0, 0.0, 0usize);
    for it in 1..=cfg.iterations {
        let lb = sample_batch(&dataset.labeled, cfg.batch_labeled, &mut lab_rng);
        let ub = if cfg.mode.uses_unlabeled() {
            sample_batch(&dataset.unlabeled, cfg.batch_unlabeled, &mut unl_rng)
        } else {
            Vec::new()
        };
        let terms = train_step(&mut model, &mut opt, &lb, &ub, cfg)?;
        l_sum += terms.l;
        h_sum += terms.h;
        window += 1;
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let val_acc = evaluate(&model, &dataset.validation)?;
            let test_acc = evaluate(&model, &dataset.test)?;
            records.push(MetricsRecord {
                iteration: it,
                l: l_sum / window as f64,
                h: h_sum / window as f64,
                val_acc,
                test_acc,
                ms: clock() - start,
            });
            (l_sum, h_sum, window) = (0.0, 0.0, 0);
            // Ties move the selection to the later model but do not reset patience.
            let strictly = best.as_ref().is_none_or(|b| val_acc > b.0);
            if strictly {
                since_best = 0;
            } else {
                since_best += 1;
            }
            if best.as_ref().is_none_or(|b| val_acc >= b.0) {
                best = Some((val_acc, it, test_acc, model.clone()));
            }
            if cfg.early_stop_patience.is_some_and(|p| since_best > p) {
                break;
            }
        }
    }
    let last = records.last().copied();
    let (best_val_acc, best_iteration, selected_test_acc, best_model) = match best {
        Some(b) => b,
        None => (0.0, 0, 0.0, model.clone()),
    };
    Ok(RunOutput {
        mode: cfg.mode,
        records,
        best_val_acc,
        best_iteration,
        selected_test_acc,
        final_test_acc: last.map_or(0.0, |r| r.test_acc),
        model,
        best_model,
    })
}

pub fn run(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<RunOutput> {
    run_with_clock(dataset, model_cfg, cfg, &|| 0.0)
}

/// Runs `mode` with everything else taken from `cfg`.
pub fn run_baseline(mode: Mode, dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<RunOutput> {
    let cfg = TrainConfig { mode, ..cfg.clone() };
    run(dataset, model_cfg, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub rate: f64,
    pub n_unlabeled: usize,
    pub best_val_acc: f64,
    pub test_acc: f64,
}

pub fn check_lambda_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("empty lambda grid"));
    }
    if let Some(bad) = grid.iter().find(|&&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::config(format!("lambda grid values must be > 0, got {bad}")));
    }
    Ok(())
}

pub fn check_rates(rates: &[f64]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::config("empty label-rate grid"));
    }
    if let Some(bad) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::config(format!("label rate {bad} outside [0, 1]")));
    }
    Ok(())
}

/// One grid point of a λ sweep.
pub fn lambda_point(dataset: &Dataset, model_cfg: &ModelConfig, base: &TrainConfig, lambda: f64) -> Result<LambdaRow> {
    let cfg = TrainConfig { lambda, ..base.clone() };
    let out = run(dataset, model_cfg, &cfg)?;
    Ok(LambdaRow {
        lambda,
        best_val_acc: out.best_val_acc,
        test_acc: out.selected_test_acc,
    })
}

/// One full run per λ with a shared seed; validation-selected accuracy per row.
pub fn lambda_sweep(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<LambdaRow>> {
    check_lambda_grid(grid)?;
    grid.iter()
        .map(|&l| lambda_point(dataset, model_cfg, base, l))
        .collect()
}

/// One grid point of a label-rate sweep. Rate 0 trains `sup_cov`.
pub fn rate_point(dataset: &Dataset, model_cfg: &ModelConfig, base: &TrainConfig, rate: f64) -> Result<RateRow> {
    let subset = split_by_rate(dataset, rate, base.seed)?;
    let mode = if subset.unlabeled.is_empty() {
        Mode::SupCov
    } else {
        base.mode
    };
    let out = run_baseline(mode, &subset, model_cfg, base)?;
    Ok(RateRow {
        rate,
        n_unlabeled: subset.unlabeled.len(),
        best_val_acc: out.best_val_acc,
        test_acc: out.selected_test_acc,
    })
}

pub fn label_rate_sweep(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    rates: &[f64],
) -> Result<Vec<RateRow>> {
    check_rates(rates)?;
    rates.iter().map(|&r| rate_point(dataset, model_cfg, base, r)).collect()
}
