//! Central finite differences.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{cross_entropy, entropy, GrlSpec, Model};
use crate::param::ParamGroup;
use crate::tensor::{Tape, Tensor};
use crate::train::{step_gradients_with, TrainConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Max and mean relative error between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckStats {
    pub max_rel: f64,
    pub mean_rel: f64,
    pub count: usize,
}

impl GradCheckStats {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        let errs: Vec<f64> = analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).collect();
        let count = errs.len();
        GradCheckStats {
            max_rel: errs.iter().copied().fold(0.0, f64::max),
            mean_rel: if count == 0 {
                0.0
            } else {
                errs.iter().sum::<f64>() / count as f64
            },
            count,
        }
    }

    pub fn merge(self, other: GradCheckStats) -> Self {
        let count = self.count + other.count;
        GradCheckStats {
            max_rel: self.max_rel.max(other.max_rel),
            mean_rel: if count == 0 {
                0.0
            } else {
                (self.mean_rel * self.count as f64 + other.mean_rel * other.count as f64) / count as f64
            },
            count,
        }
    }
}

/// Per-parameter outcome of [`model_gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub group: ParamGroup,
    pub stats: GradCheckStats,
}

/// `(L, H)` of `model` on the two batches, recomputed from scratch.
pub fn objective_terms(model: &Model, labeled: &[&Sample], unlabeled: &[&Sample]) -> Result<(f64, f64)> {
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
    let l = tape.value(l).item();
    if unlabeled.is_empty() {
        return Ok((l, 0.0));
    }
    let imgs: Vec<&Tensor> = unlabeled.iter().map(|s| &s.image).collect();
    let ids: Vec<u64> = unlabeled.iter().map(|s| s.id).collect();
    let f = model.features_batch(&mut tape, &bound, &imgs, &ids)?;
    let logits = model.logits(&mut tape, &bound, f)?;
    let h = entropy(&mut tape, logits)?;
    Ok((l, tape.value(h).item()))
}

/// Checks the training gradient of every parameter against central
/// differences of the objective its group descends: `L - λH` for the
/// classifier and `L + λH` for the extractor in adversarial modes, `L + λH`
/// for both otherwise.
pub fn model_gradcheck(
    model: &Model,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    cfg: &TrainConfig,
    reversal: GrlSpec,
    h: f64,
) -> Result<Vec<LayerReport>> {
    let unl: &[&Sample] = if cfg.mode.uses_unlabeled() { unlabeled } else { &[] };
    let (analytic, _) = step_gradients_with(model, labeled, unl, cfg, reversal)?;
    let mut reports = Vec::with_capacity(model.params.len());
    for (id, grad) in model.params.ids().zip(analytic.iter()) {
        let param = model.params.get(id);
        let sign = match (param.group, cfg.mode.adversarial()) {
            (ParamGroup::Classifier, true) => -1.0,
            _ => 1.0,
        };
        let mut probe = model.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.params.get_mut(id).value.data_mut().copy_from_slice(x);
                let (l, hv) = objective_terms(&probe, labeled, unl)?;
                Ok(l + sign * cfg.lambda * hv)
            },
            param.value.data(),
            h,
        )?;
        reports.push(LayerReport {
            name: param.name.clone(),
            group: param.group,
            stats: GradCheckStats::compare(grad.data(), &numeric),
        });
    }
    Ok(reports)
}
