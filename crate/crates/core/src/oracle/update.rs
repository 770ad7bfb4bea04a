//! Expected parameter updates assembled from separate `∇L` and `∇H` passes,
//! with the min/max sign bookkeeping done explicitly instead of through the
//! gradient reversal layer.

use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, entropy, Model};
use crate::param::{Gradients, ParamGroup};
use crate::tensor::{Tape, Tensor};
use crate::train::TrainConfig;

/// `(∇L on the labeled batch, ∇H on the unlabeled batch)`, both GRL-free.
/// `∇H` is zero when the unlabeled batch is empty.
pub fn loss_gradients(model: &Model, labeled: &[&Sample], unlabeled: &[&Sample]) -> Result<(Gradients, Gradients)> {
    let grad_l = {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let imgs: Vec<&Tensor> = labeled.iter().map(|s| &s.image).collect();
        let ids: Vec<u64> = labeled.iter().map(|s| s.id).collect();
        let labels = labeled
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::config("labeled sample without label")))
            .collect::<Result<Vec<_>>>()?;
        let f = model.features_batch(&mut tape, &bound, &imgs, &ids)?;
        let logits = model.logits(&mut tape, &bound, f)?;
        let l = cross_entropy(&mut tape, logits, &labels)?;
        let mut g = tape.backward(l)?;
        bound.gradients(&model.params, &mut g)
    };
    let grad_h = if unlabeled.is_empty() {
        Gradients::zeros_like(&model.params)
    } else {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let imgs: Vec<&Tensor> = unlabeled.iter().map(|s| &s.image).collect();
        let ids: Vec<u64> = unlabeled.iter().map(|s| s.id).collect();
        let f = model.features_batch(&mut tape, &bound, &imgs, &ids)?;
        let logits = model.logits(&mut tape, &bound, f)?;
        let h = entropy(&mut tape, logits)?;
        let mut g = tape.backward(h)?;
        bound.gradients(&model.params, &mut g)
    };
    Ok((grad_l, grad_h))
}

/// Per-parameter update a combined SGD step should realize:
/// `−lr_F·(∇L + λ∇H)` on `θ_F` and `−lr_C·(∇L − λ∇H)` on `θ_C` for the
/// adversarial modes; `ent_cov` uses `+λ` on both groups, supervised modes
/// drop the entropy term.
pub fn update_oracle(
    model: &Model,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
) -> Result<Gradients> {
    let unl: &[&Sample] = if cfg.mode.uses_unlabeled() { unlabeled } else { &[] };
    let (grad_l, grad_h) = loss_gradients(model, labeled, unl)?;
    let deltas = model
        .params
        .iter()
        .zip(grad_l.iter().zip(grad_h.iter()))
        .map(|(p, (gl, gh))| {
            let h_sign = match (p.group, cfg.mode.adversarial()) {
                (ParamGroup::Classifier, true) => -1.0,
                _ => 1.0,
            };
            let lr = cfg.lr(p.group);
            let data = gl
                .data()
                .iter()
                .zip(gh.data())
                .map(|(l, h)| -lr * (l + h_sign * cfg.lambda * h))
                .collect();
            Tensor::new(p.value.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Gradients::from_vec(deltas))
}
