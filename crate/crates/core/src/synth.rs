//! Seeded synthetic prediction sets with per-class difficulty, plus
//! class-conditional resampling and stratified splitting.
//!
//! Stage-1 outputs are anchored on the predicted class: a sample first
//! draws the class the little model will output (from the priors), then
//! whether that output is right (`stage1_accuracy` of that class). A wrong
//! output gets a true label drawn uniformly from the other classes. Each
//! profile therefore fixes the correct/incorrect mix and margin shapes of
//! the samples the little model assigns to its class, which is what a
//! per-class threshold sees. Stage-2 outputs are drawn per true label with
//! `stage2_accuracy` and a uniformly chosen wrong label.
//!
//! Margins of correct outputs are drawn from `Beta(s, 1)` and margins of
//! incorrect ones from `Beta(1, s)`, where `s` is the sharpness knob; both
//! are sampled by inversion. Larger `s` pushes correct margins toward 1 and
//! incorrect margins toward 0.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{Normalization, PredictionSet, SampleRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    #[serde(default = "one")]
    pub prior: f64,
    pub stage1_accuracy: f64,
    pub stage2_accuracy: f64,
    #[serde(default = "default_sharpness")]
    pub margin_sharpness_correct: f64,
    #[serde(default = "default_sharpness")]
    pub margin_sharpness_incorrect: f64,
}

fn one() -> f64 {
    1.0
}

fn default_sharpness() -> f64 {
    4.0
}

impl ClassProfile {
    pub fn new(stage1_accuracy: f64, stage2_accuracy: f64) -> Self {
        ClassProfile {
            prior: 1.0,
            stage1_accuracy,
            stage2_accuracy,
            margin_sharpness_correct: default_sharpness(),
            margin_sharpness_incorrect: default_sharpness(),
        }
    }
}

/// Profiles are indexed by class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub sample_count: usize,
    pub seed: u64,
    #[serde(rename = "class")]
    pub class_profiles: Vec<ClassProfile>,
}

impl Default for GeneratorConfig {
    /// Five classes of decreasing difficulty for the little model.
    fn default() -> Self {
        GeneratorConfig {
            sample_count: 2000,
            seed: 42,
            class_profiles: [0.5, 0.6, 0.8, 0.9, 0.95]
                .iter()
                .map(|&a| ClassProfile::new(a, 0.97))
                .collect(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_profiles.len() < 2 {
            return Err(Error::invalid("generator needs at least 2 class profiles"));
        }
        if self.sample_count == 0 {
            return Err(Error::invalid("sample_count must be positive"));
        }
        for (c, p) in self.class_profiles.iter().enumerate() {
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(p.prior.is_finite() && p.prior >= 0.0) {
                return Err(Error::invalid(format!("class {c}: prior must be nonnegative")));
            }
            if !unit(p.stage1_accuracy) || !unit(p.stage2_accuracy) {
                return Err(Error::invalid(format!("class {c}: stage accuracies must lie in [0, 1]")));
            }
            let positive = |v: f64| v.is_finite() && v > 0.0;
            if !positive(p.margin_sharpness_correct) || !positive(p.margin_sharpness_incorrect) {
                return Err(Error::invalid(format!("class {c}: sharpness must be positive")));
            }
        }
        if self.class_profiles.iter().all(|p| p.prior == 0.0) {
            return Err(Error::invalid("class priors are all zero"));
        }
        Ok(())
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Probability vector with argmax `top`, runner-up `second` and the given margin.
fn shaped_probs(rng: &mut impl Rng, class_count: usize, top: usize, second: usize, margin: f64) -> Vec<f64> {
    let rest_share = 1.0 - margin;
    let runner_up = if class_count == 2 {
        rest_share / 2.0
    } else {
        rng.gen_range(rest_share / class_count as f64..=rest_share / 2.0)
    };
    let filler = if class_count > 2 {
        (1.0 - margin - 2.0 * runner_up) / (class_count - 2) as f64
    } else {
        0.0
    };
    let mut probs = vec![filler.max(0.0); class_count];
    probs[top] = runner_up + margin;
    probs[second] = runner_up;
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    probs
}

fn other_class(rng: &mut impl Rng, class_count: usize, exclude: usize) -> usize {
    let k = rng.gen_range(0..class_count - 1);
    if k >= exclude {
        k + 1
    } else {
        k
    }
}

fn draw_margin(rng: &mut impl Rng, correct: bool, profile: &ClassProfile) -> f64 {
    let u: f64 = rng.gen();
    if correct {
        u.powf(1.0 / profile.margin_sharpness_correct)
    } else {
        1.0 - u.powf(1.0 / profile.margin_sharpness_incorrect)
    }
}

/// Draws a prediction set. Each sample uses its own RNG stream derived from
/// `(seed, sample index)`, so the output does not depend on scheduling.
pub fn generate(config: &GeneratorConfig) -> Result<PredictionSet> {
    config.validate()?;
    let class_count = config.class_profiles.len();
    let priors = WeightedIndex::new(config.class_profiles.iter().map(|p| p.prior))
        .map_err(|e| Error::invalid(format!("class priors: {e}")))?;
    let width = config.sample_count.to_string().len().max(6);

    let samples: Vec<SampleRecord> = (0..config.sample_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(config.seed, i as u64);
            let predicted = priors.sample(&mut rng);
            let little = &config.class_profiles[predicted];
            let correct1 = rng.gen::<f64>() < little.stage1_accuracy;
            let truth = if correct1 { predicted } else { other_class(&mut rng, class_count, predicted) };
            let second = other_class(&mut rng, class_count, predicted);
            let margin = draw_margin(&mut rng, correct1, little);
            let s1 = shaped_probs(&mut rng, class_count, predicted, second, margin);

            let big = &config.class_profiles[truth];
            let correct2 = rng.gen::<f64>() < big.stage2_accuracy;
            let top = if correct2 { truth } else { other_class(&mut rng, class_count, truth) };
            let second = other_class(&mut rng, class_count, top);
            let margin = draw_margin(&mut rng, correct2, big);
            let s2 = shaped_probs(&mut rng, class_count, top, second, margin);
            SampleRecord::new(format!("s{i:0width$}"), truth, vec![s1, s2])
        })
        .collect();
    PredictionSet::new(class_count, samples, None, Normalization::Strict)
}

fn indices_by_class(predictions: &PredictionSet) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); predictions.class_count()];
    for (i, s) in predictions.samples().iter().enumerate() {
        by_class[s.true_label()].push(i);
    }
    by_class
}

/// Keeps `ceil(fraction * count)` uniformly chosen samples of each true
/// class. Survivors keep their original order and contents.
pub fn resample_by_class(predictions: &PredictionSet, keep_fraction: &[f64], seed: u64) -> Result<PredictionSet> {
    if keep_fraction.len() != predictions.class_count() {
        return Err(Error::invalid(format!(
            "{} keep fractions given for {} classes",
            keep_fraction.len(),
            predictions.class_count()
        )));
    }
    if let Some((c, f)) = keep_fraction
        .iter()
        .enumerate()
        .find(|(_, f)| !(**f > 0.0 && **f <= 1.0))
    {
        return Err(Error::invalid(format!(
            "keep fraction for class {c} must lie in (0, 1], got {f}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (members, &fraction) in indices_by_class(predictions).iter().zip(keep_fraction) {
        // Small slack so that e.g. 0.2 * 100 is not rounded up to 21.
        let target = ((fraction * members.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        let target = target.min(members.len());
        keep.extend(index::sample(&mut rng, members.len(), target).into_iter().map(|k| members[k]));
    }
    keep.sort_unstable();
    Ok(predictions.subset(&keep))
}

/// Seeded split stratified by true label into `(validation, test)`.
pub fn split(predictions: &PredictionSet, val_fraction: f64, seed: u64) -> Result<(PredictionSet, PredictionSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if predictions.len() < 2 {
        return Err(Error::invalid("need at least 2 samples to split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::new();
    let mut test = Vec::new();
    for mut members in indices_by_class(predictions) {
        members.shuffle(&mut rng);
        let n_val = (val_fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        test.extend_from_slice(&members[n_val..]);
    }
    if val.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!(
            "split with fraction {val_fraction} leaves {} validation and {} test samples",
            val.len(),
            test.len()
        )));
    }
    val.sort_unstable();
    test.sort_unstable();
    Ok((predictions.subset(&val), predictions.subset(&test)))
}
