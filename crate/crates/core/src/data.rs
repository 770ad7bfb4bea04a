//! Synthetic fine-grained datasets.
//!
//! Every image contains each of the `P` parts exactly once, so per-class part
//! histograms (and first-order channel means) are identical. A class is a
//! perfect matching of the parts: matched parts are placed within the
//! co-occurrence radius of each other. Only second-order statistics of the
//! part channels tell classes apart.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            labeled: 20,
            unlabeled: 200,
            validation: 20,
            test: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Part vocabulary size `P`.
    pub parts: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Matched parts are placed at a distance in `[radius / 2, radius]`.
    pub radius: f64,
    /// Minimum distance between parts that are not matched (0 allows overlap).
    pub separation: f64,
    pub blob_sigma: f64,
    pub amplitude: f64,
    /// Gaussian pixel noise, as a fraction of `amplitude`.
    pub noise_std: f64,
    /// Per-sample probability that a matched pair is scattered instead.
    pub break_prob: f64,
    /// Each part instance's amplitude is scaled by a factor drawn from
    /// `U(1 − jitter, 1 + jitter)`.
    pub amplitude_jitter: f64,
    /// Samples per class for each split.
    pub per_class: SplitCounts,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            parts: 8,
            channels: 8,
            height: 16,
            width: 16,
            radius: 2.0,
            separation: 0.0,
            blob_sigma: 1.0,
            amplitude: 5.0,
            noise_std: 0.1,
            break_prob: 0.0,
            amplitude_jitter: 0.7,
            per_class: SplitCounts::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One image with its id and (except for unlabeled data) its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Tensor,
    pub label: Option<usize>,
}

/// A sample viewed together with the split that holds it.
#[derive(Debug, Clone, Copy)]
pub struct SampleRecord<'a> {
    pub sample: &'a Sample,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Labeled => &self.labeled,
            Split::Unlabeled => &self.unlabeled,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Sample> {
        match split {
            Split::Labeled => &mut self.labeled,
            Split::Unlabeled => &mut self.unlabeled,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    pub fn records(&self) -> impl Iterator<Item = SampleRecord<'_>> {
        Split::ALL.into_iter().flat_map(move |split| {
            self.split(split)
                .iter()
                .map(move |sample| SampleRecord { sample, split })
        })
    }

    /// Checks labels, shapes, and that sample ids are unique across splits.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u64> = Vec::new();
        for rec in self.records() {
            let s = rec.sample;
            if s.image.shape() != self.image_shape.as_slice() {
                return Err(Error::config(format!(
                    "sample {} has shape {:?}",
                    s.id,
                    s.image.shape()
                )));
            }
            match (rec.split, s.label) {
                (Split::Unlabeled, Some(_)) => {
                    return Err(Error::config(format!("unlabeled sample {} carries a label", s.id)))
                }
                (Split::Unlabeled, None) => {}
                (_, None) => return Err(Error::config(format!("sample {} is missing its label", s.id))),
                (_, Some(y)) if y >= self.num_classes => {
                    return Err(Error::config(format!("sample {} has label {y}", s.id)))
                }
                _ => {}
            }
            ids.push(s.id);
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("sample ids are not unique across splits"));
        }
        Ok(())
    }
}

/// Keeps `⌊rate·n_u⌋` unlabeled samples, chosen by `seed`, in original order.
pub fn split_by_rate(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("label rate {rate} outside [0, 1]")));
    }
    let n_u = dataset.unlabeled.len();
    let keep = libm::floor(rate * n_u as f64) as usize;
    let mut out = dataset.clone();
    if keep < n_u {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5a);
        let mut idx = rand::seq::index::sample(&mut rng, n_u, keep).into_vec();
        idx.sort_unstable();
        out.unlabeled = idx.into_iter().map(|i| dataset.unlabeled[i].clone()).collect();
    }
    Ok(out)
}

/// All perfect matchings of `0..p` (one singleton left over when `p` is odd),
/// each as a list of sorted pairs.
pub fn perfect_matchings(p: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(rest: &[usize], cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if rest.len() < 2 {
            out.push(cur.clone());
            return;
        }
        let first = rest[0];
        for i in 1..rest.len() {
            cur.push((first, rest[i]));
            let remaining: Vec<usize> = rest[1..].iter().copied().filter(|&v| v != rest[i]).collect();
            rec(&remaining, cur, out);
            cur.pop();
        }
    }
    let items: Vec<usize> = (0..p).collect();
    let mut out = Vec::new();
    if p % 2 == 1 {
        // leave each part out in turn
        for skip in 0..p {
            let rest: Vec<usize> = items.iter().copied().filter(|&v| v != skip).collect();
            rec(&rest, &mut Vec::new(), &mut out);
        }
    } else {
        rec(&items, &mut Vec::new(), &mut out);
    }
    out
}

/// Class signatures and part patterns drawn from the spec's seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    spec: SyntheticSpec,
    signatures: Vec<Vec<(usize, usize)>>,
    patterns: Vec<Vec<f64>>,
}

const PLACEMENT_ATTEMPTS: usize = 2000;

impl Generator {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        validate_spec(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let mut all = perfect_matchings(spec.parts);
        if all.len() < spec.num_classes {
            return Err(Error::config(format!(
                "{} parts give only {} distinct signatures for {} classes",
                spec.parts,
                all.len(),
                spec.num_classes
            )));
        }
        all.shuffle(&mut rng);
        all.truncate(spec.num_classes);
        let patterns = if spec.channels == spec.parts {
            (0..spec.parts)
                .map(|p| (0..spec.channels).map(|c| if c == p { 1.0 } else { 0.0 }).collect())
                .collect()
        } else {
            let normal = Normal::new(0.0, 1.0).map_err(|e| Error::config(format!("{e}")))?;
            (0..spec.parts)
                .map(|_| {
                    let v: Vec<f64> = (0..spec.channels).map(|_| normal.sample(&mut rng)).collect();
                    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let gen = Generator {
            spec: spec.clone(),
            signatures: all,
            patterns,
        };
        // Fail early on grids too small to place a sample.
        let mut probe = ChaCha8Rng::seed_from_u64(spec.seed);
        probe.set_stream(3);
        gen.place(0, &mut probe)?;
        Ok(gen)
    }

    pub fn signatures(&self) -> &[Vec<(usize, usize)>] {
        &self.signatures
    }

    /// Part centers `(row, col)` for one sample of class `class`, indexed by part.
    fn place(&self, class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
        let s = &self.spec;
        let (h, w) = (s.height as f64, s.width as f64);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut pos = vec![(f64::NAN, f64::NAN); s.parts];
            let mut partner = vec![usize::MAX; s.parts];
            let mut ok = true;
            for &(a, b) in &self.signatures[class] {
                let broken = s.break_prob > 0.0 && rng.random::<f64>() < s.break_prob;
                let pa = (rng.random::<f64>() * h, rng.random::<f64>() * w);
                let pb = if broken {
                    (rng.random::<f64>() * h, rng.random::<f64>() * w)
                } else {
                    partner[a] = b;
                    partner[b] = a;
                    let angle = rng.random::<f64>() * core::f64::consts::TAU;
                    let dist = s.radius * (0.5 + 0.5 * rng.random::<f64>());
                    (pa.0 + dist * libm::sin(angle), pa.1 + dist * libm::cos(angle))
                };
                if pb.0 < 0.0 || pb.0 >= h || pb.1 < 0.0 || pb.1 >= w {
                    ok = false;
                    break;
                }
                pos[a] = pa;
                pos[b] = pb;
            }
            for p in pos.iter_mut() {
                if p.0.is_nan() {
                    *p = (rng.random::<f64>() * h, rng.random::<f64>() * w);
                }
            }
            if ok && s.separation > 0.0 {
                'outer: for i in 0..s.parts {
                    for j in (i + 1)..s.parts {
                        if partner[i] == j {
                            continue;
                        }
                        let (dy, dx) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
                        if dy * dy + dx * dx < s.separation * s.separation {
                            ok = false;
                            break 'outer;
                        }
                    }
                }
            }
            if ok {
                return Ok(pos);
            }
        }
        Err(Error::config(format!(
            "could not place {} parts on a {}x{} grid with radius {} and separation {}",
            s.parts, s.height, s.width, s.radius, s.separation
        )))
    }

    /// Renders a noiseless image from part centers and per-part gains.
    pub fn render(&self, centers: &[(f64, f64)], gains: &[f64]) -> Tensor {
        let s = &self.spec;
        let (c, h, w) = (s.channels, s.height, s.width);
        let mut img = vec![0.0; c * h * w];
        let inv = 1.0 / (2.0 * s.blob_sigma * s.blob_sigma);
        for (part, (&(cy, cx), &gain)) in centers.iter().zip(gains).enumerate() {
            let pattern = &self.patterns[part];
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let v = gain * s.amplitude * libm::exp(-(dy * dy + dx * dx) * inv);
                    if v < 1e-12 {
                        continue;
                    }
                    for (ch, &pw) in pattern.iter().enumerate() {
                        img[(ch * h + y) * w + x] += v * pw;
                    }
                }
            }
        }
        Tensor::new(vec![c, h, w], img).expect("shape matches by construction")
    }

    fn sample(&self, class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Result<Tensor> {
        let centers = self.place(class, rng)?;
        let j = self.spec.amplitude_jitter;
        let gains: Vec<f64> = (0..centers.len())
            .map(|_| {
                if j > 0.0 {
                    1.0 + j * (2.0 * rng.random::<f64>() - 1.0)
                } else {
                    1.0
                }
            })
            .collect();
        let mut img = self.render(&centers, &gains);
        if self.spec.noise_std > 0.0 {
            for v in img.data_mut() {
                *v += noise.sample(rng);
            }
        }
        Ok(img)
    }

    pub fn generate(&self) -> Result<Dataset> {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(2);
        let noise = Normal::new(0.0, s.noise_std.max(0.0) * s.amplitude).map_err(|e| Error::config(format!("{e}")))?;
        let mut ds = Dataset {
            num_classes: s.num_classes,
            image_shape: [s.channels, s.height, s.width],
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        let mut next_id = 0u64;
        for split in Split::ALL {
            let per_class = match split {
                Split::Labeled => s.per_class.labeled,
                Split::Unlabeled => s.per_class.unlabeled,
                Split::Validation => s.per_class.validation,
                Split::Test => s.per_class.test,
            };
            // classes interleaved so any prefix is roughly balanced
            for _ in 0..per_class {
                for class in 0..s.num_classes {
                    let image = self.sample(class, &mut rng, &noise)?;
                    let label = (split != Split::Unlabeled).then_some(class);
                    ds.split_mut(split).push(Sample {
                        id: next_id,
                        image,
                        label,
                    });
                    next_id += 1;
                }
            }
        }
        Ok(ds)
    }
}

pub fn validate_spec(s: &SyntheticSpec) -> Result<()> {
    if s.parts < 4 {
        return Err(Error::config(format!("need at least 4 parts, got {}", s.parts)));
    }
    if s.num_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if s.channels == 0 || s.height == 0 || s.width == 0 {
        return Err(Error::config("image extents must be positive"));
    }
    if !(s.radius > 0.0) || !(s.blob_sigma > 0.0) || !(s.amplitude > 0.0) {
        return Err(Error::config("radius, blob_sigma and amplitude must be positive"));
    }
    if !(0.0..=1.0).contains(&s.break_prob) || !(0.0..1.0).contains(&s.amplitude_jitter) {
        return Err(Error::config("break_prob must lie in [0,1], amplitude_jitter in [0,1)"));
    }
    if s.noise_std < 0.0 || s.separation < 0.0 {
        return Err(Error::config("noise and separation must be non-negative"));
    }
    if (s.height.min(s.width) as f64) < s.radius + 1.0 {
        return Err(Error::config(format!(
            "{}x{} grid cannot hold two parts at radius {}",
            s.height, s.width, s.radius
        )));
    }
    Ok(())
}

/// Convenience wrapper around [`Generator`].
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    Generator::new(spec)?.generate()
}

/// Per-channel spatial means of a `c×H×W` image.
pub fn channel_means(image: &Tensor) -> Vec<f64> {
    let c = image.shape()[0];
    let plane = image.numel() / c;
    image
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            per_class: SplitCounts {
                labeled: 2,
                unlabeled: 4,
                validation: 1,
                test: 2,
            },
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn matchings_count() {
        assert_eq!(perfect_matchings(4).len(), 3);
        assert_eq!(perfect_matchings(8).len(), 105);
        assert_eq!(perfect_matchings(5).len(), 15);
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.labeled.len(), 6);
        assert_eq!(a.unlabeled.len(), 12);
        assert!(a.unlabeled.iter().all(|s| s.label.is_none()));
    }

    #[test]
    fn signatures_pairwise_distinct() {
        let gen = Generator::new(&SyntheticSpec::default()).unwrap();
        let sigs = gen.signatures();
        for i in 0..sigs.len() {
            for j in (i + 1)..sigs.len() {
                assert!(sigs[i].iter().any(|p| !sigs[j].contains(p)));
            }
        }
    }

    #[test]
    fn every_image_holds_each_part_once() {
        // Noiseless, far-from-border renderings carry equal mass per part channel.
        let spec = SyntheticSpec {
            noise_std: 0.0,
            ..small_spec()
        };
        let gen = Generator::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for class in 0..spec.num_classes {
            let centers = gen.place(class, &mut rng).unwrap();
            assert_eq!(centers.len(), spec.parts);
            let mut hist = vec![0usize; spec.parts];
            for (part, _) in centers.iter().enumerate() {
                hist[part] += 1;
            }
            assert!(hist.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn infeasible_grid_rejected() {
        let spec = SyntheticSpec {
            height: 3,
            width: 3,
            radius: 4.0,
            ..small_spec()
        };
        assert!(generate(&spec).is_err());
        let crowded = SyntheticSpec {
            separation: 12.0,
            ..small_spec()
        };
        assert!(generate(&crowded).is_err());
    }

    #[test]
    fn split_by_rate_counts() {
        let mut spec = small_spec();
        spec.per_class.unlabeled = 20;
        spec.num_classes = 10;
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.unlabeled.len(), 200);
        assert_eq!(split_by_rate(&ds, 0.0, 1).unwrap().unlabeled.len(), 0);
        assert_eq!(split_by_rate(&ds, 0.5, 1).unwrap().unlabeled.len(), 100);
        assert_eq!(split_by_rate(&ds, 1.0, 1).unwrap(), ds);
        let half = split_by_rate(&ds, 0.5, 1).unwrap();
        assert_eq!(half.labeled, ds.labeled);
        assert_eq!(half.test, ds.test);
        assert!(split_by_rate(&ds, 1.5, 1).is_err());
    }
}
