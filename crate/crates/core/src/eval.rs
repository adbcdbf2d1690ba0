//! Accuracy, confusion matrices, robustness sweeps and histograms.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::datagen::{generate_dataset, Dataset, GenConfig, Sample};
use crate::error::{Error, Result};
use crate::nn::{argmax, MultiOutputModel};
use crate::optim::{combined_loss, HeadWeights};
use crate::tensor::Tensor;

/// Images per forward call during evaluation.
pub const EVAL_BATCH: usize = 64;

/// A per-sample quantity that reports can be bucketed or swept over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Base,
    Exponent,
    FontScale,
    Noise,
    Blur,
}

impl Attribute {
    /// Digit value for the label attributes, metadata value otherwise.
    pub fn value(self, dataset: &Dataset, sample: &Sample) -> f64 {
        let (base, exponent) = dataset.values(sample);
        match self {
            Attribute::Base => base.into(),
            Attribute::Exponent => exponent.into(),
            Attribute::FontScale => sample.meta.font_scale.into(),
            Attribute::Noise => sample.meta.noise_sigma.into(),
            Attribute::Blur => sample.meta.blur_sigma.into(),
        }
    }

    pub fn is_categorical(self) -> bool {
        matches!(self, Attribute::Base | Attribute::Exponent)
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Base => "base",
            Attribute::Exponent => "exponent",
            Attribute::FontScale => "font",
            Attribute::Noise => "noise",
            Attribute::Blur => "blur",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => Attribute::Base,
            "exponent" | "exp" => Attribute::Exponent,
            "font" => Attribute::FontScale,
            "noise" => Attribute::Noise,
            "blur" => Attribute::Blur,
            _ => return Err(Error::InvalidArgument(format!("unknown attribute {s:?}"))),
        })
    }
}

/// Accuracies of the samples whose attribute falls in `[lo, hi)` (or `[lo, hi]` for the last row).
#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub attribute: Attribute,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub base_accuracy: f64,
    pub exp_accuracy: f64,
    pub joint_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub base_accuracy: f64,
    pub exp_accuracy: f64,
    pub joint_accuracy: f64,
    /// Mean unit-weighted two-head loss.
    pub mean_loss: f64,
    /// `[true][predicted]`
    pub base_confusion: Vec<Vec<usize>>,
    pub exp_confusion: Vec<Vec<usize>>,
    pub buckets: Vec<BucketRow>,
}

/// Per-sample outcome of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub base: usize,
    pub exponent: usize,
    pub loss: f64,
}

fn rows(logits: &Tensor) -> impl Iterator<Item = Tensor> + '_ {
    let n = logits.shape()[1];
    logits
        .data()
        .chunks_exact(n)
        .map(move |r| Tensor::from_vec(&[n], r.to_vec()).expect("row of a valid tensor"))
}

/// Argmax predictions and losses for the samples at `indices`.
pub fn predict_indices(model: &MultiOutputModel, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Prediction>> {
    let (nb, ne) = (model.base_classes(), model.exp_classes());
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        for s in &samples {
            if s.base_label >= nb || s.exp_label >= ne {
                return Err(Error::ClassOutOfRange {
                    index: if s.base_label >= nb { s.base_label } else { s.exp_label },
                    classes: if s.base_label >= nb { nb } else { ne },
                });
            }
        }
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let fwd = model.forward_batch(&images)?;
        for ((s, b), e) in samples.iter().zip(rows(&fwd.base_logits)).zip(rows(&fwd.exp_logits)) {
            let loss = combined_loss(&b, &e, s.base_label, s.exp_label, HeadWeights::default())?;
            out.push(Prediction {
                base: argmax(b.data()),
                exponent: argmax(e.data()),
                loss: loss.total,
            });
        }
    }
    Ok(out)
}

fn accuracies<'a>(pairs: impl Iterator<Item = (&'a Sample, &'a Prediction)>) -> (usize, f64, f64, f64) {
    let (mut n, mut b, mut e, mut j) = (0usize, 0usize, 0usize, 0usize);
    for (s, p) in pairs {
        let (bo, eo) = (p.base == s.base_label, p.exponent == s.exp_label);
        n += 1;
        b += bo as usize;
        e += eo as usize;
        j += (bo && eo) as usize;
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    (n, frac(b), frac(e), frac(j))
}

/// Report over the samples at `indices`.
pub fn evaluate_indices(model: &MultiOutputModel, dataset: &Dataset, indices: &[usize]) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict_indices(model, dataset, indices)?;
    let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let (count, base_accuracy, exp_accuracy, joint_accuracy) =
        accuracies(samples.iter().copied().zip(&preds));
    let mut base_confusion = vec![vec![0; model.base_classes()]; model.base_classes()];
    let mut exp_confusion = vec![vec![0; model.exp_classes()]; model.exp_classes()];
    for (s, p) in samples.iter().zip(&preds) {
        base_confusion[s.base_label][p.base] += 1;
        exp_confusion[s.exp_label][p.exponent] += 1;
    }
    Ok(EvalReport {
        count,
        base_accuracy,
        exp_accuracy,
        joint_accuracy,
        mean_loss: preds.iter().map(|p| p.loss).sum::<f64>() / count as f64,
        base_confusion,
        exp_confusion,
        buckets: Vec::new(),
    })
}

pub fn evaluate(model: &MultiOutputModel, dataset: &Dataset) -> Result<EvalReport> {
    evaluate_indices(model, dataset, &(0..dataset.len()).collect::<Vec<_>>())
}

/// [`evaluate`] plus one accuracy row per histogram bucket of `attribute`.
pub fn evaluate_bucketed(
    model: &MultiOutputModel,
    dataset: &Dataset,
    attribute: Attribute,
    bins: usize,
) -> Result<EvalReport> {
    let mut report = evaluate(model, dataset)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let preds = predict_indices(model, dataset, &all)?;
    let values: Vec<f64> = dataset.samples.iter().map(|s| attribute.value(dataset, s)).collect();
    let mode = if attribute.is_categorical() {
        Bins::Categorical
    } else {
        Bins::EqualWidth(bins)
    };
    let (buckets, assignment) = bucketize(&values, mode)?;
    report.buckets = buckets
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let members = dataset
                .samples
                .iter()
                .zip(&preds)
                .zip(&assignment)
                .filter(|(_, &a)| a == k)
                .map(|(sp, _)| sp);
            let (count, base_accuracy, exp_accuracy, joint_accuracy) = accuracies(members);
            BucketRow {
                attribute,
                lo: b.lo,
                hi: b.hi,
                count,
                base_accuracy,
                exp_accuracy,
                joint_accuracy,
            }
        })
        .collect();
    Ok(report)
}

/// One report per level over a fresh set with `attribute` pinned to that level.
///
/// Every level draws the same sample indices from `base`, so labels and the
/// remaining jitter are shared across levels and only the pinned attribute differs.
pub fn robustness_sweep(
    model: &MultiOutputModel,
    base: &GenConfig,
    attribute: Attribute,
    levels: &[f64],
    per_level_count: usize,
) -> Result<Vec<(f64, EvalReport)>> {
    if !matches!(attribute, Attribute::Noise | Attribute::Blur) {
        return Err(Error::InvalidArgument(format!("cannot sweep over {attribute}")));
    }
    if levels.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(format!("levels {levels:?} must be non-negative")));
    }
    if levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(format!("levels {levels:?} must be sorted")));
    }
    levels
        .iter()
        .map(|&level| {
            let mut cfg = GenConfig {
                count: per_level_count,
                ..base.clone()
            };
            match attribute {
                Attribute::Noise => cfg.noise_sigma_range = (level, level),
                _ => cfg.blur_sigma_range = (level, level),
            }
            let data = generate_dataset(&cfg)?;
            Ok((level, evaluate(model, &data)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bins {
    /// One bucket per distinct value, ascending.
    Categorical,
    /// Equal-width bins over `[min, max]`, right-open except the last.
    EqualWidth(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bucket {
    /// Equal to `hi` for categorical buckets.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Bucket {
    /// `"v"` for categorical buckets, `"lo..hi"` otherwise.
    pub fn label(&self) -> String {
        if self.lo == self.hi {
            self.lo.to_string()
        } else {
            format!("{}..{}", self.lo, self.hi)
        }
    }
}

/// Buckets plus the bucket index of every value.
fn bucketize(values: &[f64], bins: Bins) -> Result<(Vec<Bucket>, Vec<usize>)> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("histogram input"));
    }
    match bins {
        Bins::Categorical => {
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            // Ordered bit patterns of non-negative floats sort like the floats;
            // shift by the sign bit to order negatives too.
            let key = |v: f64| {
                let b = v.to_bits();
                if b >> 63 == 1 {
                    !b
                } else {
                    b | (1 << 63)
                }
            };
            for &v in values {
                *counts.entry(key(v + 0.0)).or_default() += 1;
            }
            let order: Vec<u64> = counts.keys().copied().collect();
            let buckets = counts
                .iter()
                .map(|(&k, &count)| {
                    let bits = if k >> 63 == 1 { k & !(1 << 63) } else { !k };
                    let v = f64::from_bits(bits);
                    Bucket { lo: v, hi: v, count }
                })
                .collect();
            let assignment = values
                .iter()
                .map(|&v| order.binary_search(&key(v + 0.0)).expect("key was inserted"))
                .collect();
            Ok((buckets, assignment))
        }
        Bins::EqualWidth(n) => {
            if n == 0 {
                return Err(Error::InvalidArgument("bin count must be at least 1".into()));
            }
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let width = (max - min) / n as f64;
            let assignment: Vec<usize> = values
                .iter()
                .map(|&v| {
                    if max == min {
                        n - 1
                    } else {
                        (((v - min) / (max - min) * n as f64).floor() as usize).min(n - 1)
                    }
                })
                .collect();
            let mut buckets: Vec<Bucket> = (0..n)
                .map(|k| Bucket {
                    lo: min + k as f64 * width,
                    hi: if k + 1 == n { max } else { min + (k + 1) as f64 * width },
                    count: 0,
                })
                .collect();
            for &a in &assignment {
                buckets[a].count += 1;
            }
            Ok((buckets, assignment))
        }
    }
}

pub fn histogram(values: &[f64], bins: Bins) -> Result<Vec<Bucket>> {
    Ok(bucketize(values, bins)?.0)
}

/// Histogram of one attribute over a dataset; label attributes are categorical.
pub fn attribute_histogram(dataset: &Dataset, attribute: Attribute, bins: usize) -> Result<Vec<Bucket>> {
    let values: Vec<f64> = dataset.samples.iter().map(|s| attribute.value(dataset, s)).collect();
    let mode = if attribute.is_categorical() {
        Bins::Categorical
    } else {
        Bins::EqualWidth(bins)
    };
    histogram(&values, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SampleMeta;
    use crate::nn::ArchConfig;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let samples = (0..n)
            .map(|i| Sample {
                image: Tensor::from_vec(&[1, 16, 16], (0..256).map(|_| rng.uniform(0.0, 1.0) as f32).collect())
                    .unwrap(),
                base_label: i % 8,
                exp_label: (i / 8) % 10,
                meta: SampleMeta {
                    font_scale: 2.0,
                    noise_sigma: rng.uniform(0.0, 0.3) as f32,
                    blur_sigma: 0.0,
                },
            })
            .collect();
        Dataset {
            image_size: (16, 16),
            base_range: (2, 9),
            exp_range: (0, 9),
            samples,
        }
    }

    #[test]
    fn constant_predictor_scores_one_in_eight() {
        // A zero model yields all-zero logits and argmax picks class 0.
        let model = MultiOutputModel::zeros(&ArchConfig::tiny()).unwrap();
        let data = tiny_dataset(80, 1);
        let r = evaluate(&model, &data).unwrap();
        assert_eq!(r.count, 80);
        assert_eq!(r.base_accuracy, 10.0 / 80.0);
        assert_eq!(r.exp_accuracy, 8.0 / 80.0);
        assert_eq!(r.joint_accuracy, 1.0 / 80.0);
        assert!((r.mean_loss - (8f64.ln() + 10f64.ln())).abs() < 1e-5);
        for (t, row) in r.base_confusion.iter().enumerate() {
            assert_eq!(row[0], 10, "class {t}");
            assert_eq!(row.iter().sum::<usize>(), 10);
        }
    }

    #[test]
    fn report_invariants() {
        let model = MultiOutputModel::new(&ArchConfig::tiny(), 3).unwrap();
        let data = tiny_dataset(150, 2);
        let r = evaluate(&model, &data).unwrap();
        assert!(r.joint_accuracy <= r.base_accuracy.min(r.exp_accuracy));
        for m in [&r.base_confusion, &r.exp_confusion] {
            assert_eq!(m.iter().flatten().sum::<usize>(), 150);
        }
        let mut per_class = [0usize; 10];
        data.samples.iter().for_each(|s| per_class[s.exp_label] += 1);
        for (row, want) in r.exp_confusion.iter().zip(per_class) {
            assert_eq!(row.iter().sum::<usize>(), want);
        }
        // batching must not matter
        let single: Vec<_> = data.samples.iter().map(|s| model.predict(&s.image).unwrap()).collect();
        let batched = predict_indices(&model, &data, &(0..150).collect::<Vec<_>>()).unwrap();
        for (a, b) in single.iter().zip(&batched) {
            assert_eq!(*a, (b.base, b.exponent));
        }
    }

    #[test]
    fn empty_and_out_of_range_rejected() {
        let model = MultiOutputModel::zeros(&ArchConfig::tiny()).unwrap();
        let mut data = tiny_dataset(3, 0);
        assert!(matches!(evaluate_indices(&model, &data, &[]), Err(Error::EmptyDataset)));
        data.samples[1].exp_label = 10;
        assert!(matches!(evaluate(&model, &data), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn bucket_rows_partition_the_set() {
        let model = MultiOutputModel::new(&ArchConfig::tiny(), 5).unwrap();
        let data = tiny_dataset(90, 4);
        let r = evaluate_bucketed(&model, &data, Attribute::Noise, 4).unwrap();
        assert_eq!(r.buckets.len(), 4);
        assert_eq!(r.buckets.iter().map(|b| b.count).sum::<usize>(), 90);
        let weighted: f64 = r.buckets.iter().map(|b| b.base_accuracy * b.count as f64).sum();
        assert!((weighted / 90.0 - r.base_accuracy).abs() < 1e-12);
        let by_base = evaluate_bucketed(&model, &data, Attribute::Base, 0).unwrap();
        assert_eq!(by_base.buckets.len(), 8);
        assert_eq!(by_base.buckets[0].lo, 2.0);
    }

    #[test]
    fn sweep_contract() {
        let model = MultiOutputModel::zeros(&ArchConfig::tiny()).unwrap();
        let base = GenConfig {
            image_size: (16, 16),
            font_scale_range: (1.0, 1.0),
            master_seed: 3,
            ..GenConfig::default()
        };
        let out = robustness_sweep(&model, &base, Attribute::Blur, &[0.0, 0.5], 100).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|(_, r)| r.count == 100));
        assert_eq!(out[0].0, 0.0);
        assert!(robustness_sweep(&model, &base, Attribute::Noise, &[0.3, 0.1], 10).is_err());
        assert!(robustness_sweep(&model, &base, Attribute::Noise, &[-0.1], 10).is_err());
        assert!(robustness_sweep(&model, &base, Attribute::Base, &[0.0], 10).is_err());
    }

    #[test]
    fn categorical_histogram_example() {
        let h = histogram(&[2.0, 2.0, 3.0], Bins::Categorical).unwrap();
        assert_eq!(
            h,
            vec![
                Bucket { lo: 2.0, hi: 2.0, count: 2 },
                Bucket { lo: 3.0, hi: 3.0, count: 1 }
            ]
        );
        assert_eq!(h[0].label(), "2");
        let h = histogram(&[0.5, -1.0, 0.0, -0.0, -3.5], Bins::Categorical).unwrap();
        let lows: Vec<f64> = h.iter().map(|b| b.lo).collect();
        assert_eq!(lows, vec![-3.5, -1.0, 0.0, 0.5]);
        assert_eq!(h[2].count, 2);
    }

    #[test]
    fn uniform_draws_fill_bins_evenly() {
        let mut rng = Rng::new(2024);
        let values: Vec<f64> = (0..1000).map(|_| rng.uniform(0.0, 1.0)).collect();
        let h = histogram(&values, Bins::EqualWidth(10)).unwrap();
        assert_eq!(h.len(), 10);
        for b in &h {
            assert!((60..=140).contains(&b.count), "{b:?}");
        }
    }

    #[test]
    fn equal_width_edges() {
        let h = histogram(&[0.0, 1.0, 2.0, 3.0, 4.0], Bins::EqualWidth(4)).unwrap();
        // right-open bins, last one closed: 0 | 1 | 2 | 3,4
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1, 2]);
        assert_eq!(h[3].hi, 4.0);
        assert_eq!(h[1].label(), "1..2");
        let flat = histogram(&[0.7; 5], Bins::EqualWidth(3)).unwrap();
        assert_eq!(flat.iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 0, 5]);
        assert!(histogram(&[], Bins::Categorical).is_err());
        assert!(histogram(&[1.0], Bins::EqualWidth(0)).is_err());
    }

    proptest! {
        #[test]
        fn counts_are_conserved(values in prop::collection::vec(-50.0f64..50.0, 1..200), bins in 1usize..20) {
            let total: usize = histogram(&values, Bins::EqualWidth(bins)).unwrap().iter().map(|b| b.count).sum();
            prop_assert_eq!(total, values.len());
            let rounded: Vec<f64> = values.iter().map(|v| v.round()).collect();
            let total: usize = histogram(&rounded, Bins::Categorical).unwrap().iter().map(|b| b.count).sum();
            prop_assert_eq!(total, values.len());
        }
    }
}
