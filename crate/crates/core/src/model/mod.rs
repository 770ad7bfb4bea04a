//! The end-to-end network: feature extractor `F`, pooling, gradient
//! reversal on the unlabeled path, prototype classifier `C`, and losses.

mod losses;

pub use losses::{cross_entropy, cross_entropy_probs, entropy, entropy_probs, LossTerms, ProbBatch};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Bound, ParamGroup, ParamId, ParamStore};
use crate::sop::{sop_dim, sop_forward, FeatureMap, SopConfig};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    PointwiseLinear {
        c_out: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureExtractorConfig {
    /// Input shape `(c, H, W)`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            input: [8, 16, 16],
            layers: vec![
                LayerSpec::Conv2d {
                    c_out: 8,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::PointwiseLinear { c_out: 8 },
            ],
        }
    }
}

impl FeatureExtractorConfig {
    /// Shape `(d, h, w)` of the final feature map.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d {
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => {
                    if c_out == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::config(format!("layer {i}: zero-sized conv")));
                    }
                    if kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::config(format!(
                            "layer {i}: kernel {kernel} larger than padded input {h}x{w}"
                        )));
                    }
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = c_out;
                }
                LayerSpec::PointwiseLinear { c_out } => {
                    if c_out == 0 {
                        return Err(Error::config(format!("layer {i}: zero output channels")));
                    }
                    c = c_out;
                }
                LayerSpec::Relu => {}
            }
        }
        Ok([c, h, w])
    }

    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.output_shape()?;
        if d < 2 {
            return Err(Error::config(format!("final channel count d must be >= 2, got {d}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::config("final spatial extent is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Floor on prototype norms.
    pub eps_norm: f64,
    /// Multiplier on the normalized-classifier logits.
    pub logit_scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            eps_norm: 1e-8,
            logit_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor: FeatureExtractorConfig,
    pub sop: SopConfig,
    pub classifier: ClassifierConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Covariance pooling with Newton-Schulz normalization.
    SecondOrder,
    /// Global average pooling (first-order).
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Rows normalized to unit length before the inner product.
    Normalized,
    /// Plain affine classifier with bias.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub pooling: Pooling,
    pub head: HeadKind,
}

/// The gradient reversal layer. The loss on the reversed path already carries
/// `λ`, so the factor stays `-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlSpec {
    pub backward_factor: f64,
}

impl Default for GrlSpec {
    fn default() -> Self {
        GrlSpec { backward_factor: -1.0 }
    }
}

pub fn grl(tape: &mut Tape, v: Var, spec: GrlSpec) -> Result<Var> {
    tape.reverse_gradient(v, spec.backward_factor)
}

/// Logits `⟨w_i / max(‖w_i‖, ε), v⟩` for each feature row `v`.
pub fn classify(tape: &mut Tape, features: Var, w: Var, cfg: &ClassifierConfig) -> Result<Var> {
    let (fm, wm) = (tape.value(features).cols(), tape.value(w).cols());
    if fm != wm {
        return Err(Error::Dimension {
            op: "classify",
            lhs: tape.value(features).shape().to_vec(),
            rhs: tape.value(w).shape().to_vec(),
        });
    }
    let wn = tape.normalize_rows(w, cfg.eps_norm)?;
    let wt = tape.transpose(wn)?;
    let logits = tape.matmul(features, wt)?;
    if cfg.logit_scale == 1.0 {
        Ok(logits)
    } else {
        tape.scale(logits, cfg.logit_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BuiltLayer {
    Conv {
        kernel: ParamId,
        stride: usize,
        padding: usize,
    },
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Head {
    Normalized { w: ParamId },
    Linear { w: ParamId, b: ParamId },
}

/// A network instance: configuration, architecture and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub num_classes: usize,
    pub params: ParamStore,
    layers: Vec<BuiltLayer>,
    head: Head,
}

impl Model {
    /// Builds a model with Kaiming-scaled extractor weights and classifier rows
    /// drawn from `N(0, 1/m)`.
    pub fn new(config: ModelConfig, arch: Architecture, num_classes: usize, seed: u64) -> Result<Self> {
        config.extractor.validate()?;
        config.sop.validate()?;
        if num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        // Separate streams keep the extractor init identical across heads.
        let mut f_rng = ChaCha8Rng::seed_from_u64(seed);
        f_rng.set_stream(0x0f);
        let mut c_rng = ChaCha8Rng::seed_from_u64(seed);
        c_rng.set_stream(0x0c);

        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut c = config.extractor.input[0];
        for (i, spec) in config.extractor.layers.iter().enumerate() {
            let (c_out, k, stride, padding) = match *spec {
                LayerSpec::Relu => {
                    layers.push(BuiltLayer::Relu);
                    continue;
                }
                LayerSpec::Conv2d {
                    c_out,
                    kernel,
                    stride,
                    padding,
                } => (c_out, kernel, stride, padding),
                LayerSpec::PointwiseLinear { c_out } => (c_out, 1, 1, 0),
            };
            let fan_in = (c * k * k) as f64;
            let w = gaussian(&mut f_rng, &[c_out, c, k, k], libm::sqrt(2.0 / fan_in))?;
            let kernel = params.push(format!("f.layer{i}.weight"), ParamGroup::FeatureExtractor, w);
            layers.push(BuiltLayer::Conv {
                kernel,
                stride,
                padding,
            });
            c = c_out;
        }
        let m = match arch.pooling {
            Pooling::SecondOrder => sop_dim(c),
            Pooling::Average => c,
        };
        let w = gaussian(&mut c_rng, &[num_classes, m], 1.0 / libm::sqrt(m as f64))?;
        let head = match arch.head {
            HeadKind::Normalized => Head::Normalized {
                w: params.push("c.weight", ParamGroup::Classifier, w),
            },
            HeadKind::Linear => Head::Linear {
                w: params.push("c.weight", ParamGroup::Classifier, w),
                b: params.push("c.bias", ParamGroup::Classifier, Tensor::zeros(&[num_classes])),
            },
        };
        Ok(Model {
            config,
            arch,
            num_classes,
            params,
            layers,
            head,
        })
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        let d = self.channels();
        match self.arch.pooling {
            Pooling::SecondOrder => sop_dim(d),
            Pooling::Average => d,
        }
    }

    /// Channel count `d` of the final feature map.
    pub fn channels(&self) -> usize {
        self.config.extractor.output_shape().map(|s| s[0]).unwrap_or_default()
    }

    pub fn classifier_weight(&self) -> ParamId {
        match self.head {
            Head::Normalized { w } | Head::Linear { w, .. } => w,
        }
    }

    pub fn extract_features(&self, tape: &mut Tape, bound: &Bound, image: &Tensor) -> Result<FeatureMap> {
        let expected = &self.config.extractor.input;
        if image.shape() != expected.as_slice() {
            return Err(Error::Dimension {
                op: "extract_features",
                lhs: expected.to_vec(),
                rhs: image.shape().to_vec(),
            });
        }
        let mut x = tape.constant(image.clone());
        for layer in &self.layers {
            x = match *layer {
                BuiltLayer::Conv {
                    kernel,
                    stride,
                    padding,
                } => tape.conv2d(x, bound.var(kernel), stride, padding)?,
                BuiltLayer::Relu => tape.relu(x)?,
            };
        }
        FeatureMap::from_channels(tape, x)
    }

    /// Pooled `1×m` feature row of one image.
    pub fn pooled(&self, tape: &mut Tape, bound: &Bound, image: &Tensor) -> Result<Var> {
        let fm = self.extract_features(tape, bound, image)?;
        match self.arch.pooling {
            Pooling::SecondOrder => Ok(sop_forward(tape, &fm, &self.config.sop)?.v),
            Pooling::Average => tape.mean_rows(fm.x),
        }
    }

    /// `b×m` feature matrix. `ids` label each image in error reports.
    pub fn features_batch(&self, tape: &mut Tape, bound: &Bound, images: &[&Tensor], ids: &[u64]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::contract("features_batch", "empty batch"));
        }
        let mut rows = Vec::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            let row = self
                .pooled(tape, bound, img)
                .map_err(|e| e.with_sample(ids.get(i).copied().unwrap_or(i as u64) as usize))?;
            rows.push(row);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            tape.concat_rows(&rows)
        }
    }

    pub fn logits(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        match self.head {
            Head::Normalized { w } => classify(tape, features, bound.var(w), &self.config.classifier),
            Head::Linear { w, b } => {
                let wt = tape.transpose(bound.var(w))?;
                let z = tape.matmul(features, wt)?;
                tape.add_row_bias(z, bound.var(b))
            }
        }
    }

    /// Logits for a batch of images without keeping the tape.
    pub fn predict_logits(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let ids: Vec<u64> = (0..images.len() as u64).collect();
        let f = self.features_batch(&mut tape, &bound, images, &ids)?;
        let l = self.logits(&mut tape, &bound, f)?;
        Ok(tape.value(l).clone())
    }

    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        let logits = self.predict_logits(images)?;
        Ok((0..logits.rows()).map(|j| argmax(logits.row(j))).collect())
    }

    /// Pooled feature vectors as a `b×m` matrix.
    pub fn feature_vectors(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let ids: Vec<u64> = (0..images.len() as u64).collect();
        let f = self.features_batch(&mut tape, &bound, images, &ids)?;
        Ok(tape.value(f).clone())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("{e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}
