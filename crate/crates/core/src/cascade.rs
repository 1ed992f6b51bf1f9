//! Domain types for two-stage cascades and the score-margin stopping rule.
//!
//! A cascade runs a cheap stage-1 classifier on every input and forwards the
//! input to the expensive stage-2 classifier only when the stage-1 score
//! margin (top-1 minus top-2 probability) is at or below the threshold that
//! applies to the stage-1 predicted class. Stopping is strict: stage 1 keeps
//! the input iff `margin > threshold`.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-4;

/// Number of stages a cascade has. Only big/little pairs are supported.
pub const STAGE_COUNT: usize = 2;

/// How probability vectors that do not sum to 1 are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Reject vectors whose sum is off by more than [`SUM_TOLERANCE`].
    #[default]
    Strict,
    /// Divide every entry by the vector sum.
    Renormalize,
}

/// Checks a probability vector and returns the (possibly renormalized) copy.
///
/// The error string describes the first problem found; callers attach
/// location context.
pub fn validate_probs(probs: &[f64], mode: Normalization) -> std::result::Result<Vec<f64>, String> {
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite()) {
        return Err(format!("p_{i} is not finite ({p})"));
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| **p < 0.0) {
        return Err(format!("p_{i} is negative ({p})"));
    }
    let sum: f64 = probs.iter().sum();
    match mode {
        Normalization::Strict => {
            if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| **p > 1.0) {
                return Err(format!("p_{i} exceeds 1 ({p})"));
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(format!(
                    "probabilities sum to {sum}, outside 1 +/- {SUM_TOLERANCE}"
                ));
            }
            Ok(probs.to_vec())
        }
        Normalization::Renormalize => {
            if sum <= 0.0 {
                return Err("probabilities sum to zero, cannot renormalize".into());
            }
            Ok(probs.iter().map(|p| p / sum).collect())
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn predicted_label(probs: &[f64]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::invalid("predicted_label: empty probability vector"));
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Difference between the largest and second-largest probability.
pub fn score_margin(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::invalid(format!(
            "score_margin: need at least 2 probabilities, got {}",
            probs.len()
        )));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok(first - second)
}

/// One input with its true label and the output of each cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    sample_id: String,
    true_label: usize,
    stage_probs: Vec<Vec<f64>>,
}

impl SampleRecord {
    pub fn new(sample_id: impl Into<String>, true_label: usize, stage_probs: Vec<Vec<f64>>) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            true_label,
            stage_probs,
        }
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn true_label(&self) -> usize {
        self.true_label
    }

    pub fn stage_probs(&self) -> &[Vec<f64>] {
        &self.stage_probs
    }

    pub fn stage(&self, index: usize) -> &[f64] {
        &self.stage_probs[index]
    }

    /// Stage-1 argmax and score margin.
    pub fn stage1_summary(&self) -> Result<(usize, f64)> {
        self.check_stage_count()?;
        let probs = &self.stage_probs[0];
        Ok((predicted_label(probs)?, score_margin(probs)?))
    }

    pub fn stage_correct(&self, index: usize) -> Result<bool> {
        self.check_stage_count()?;
        Ok(predicted_label(&self.stage_probs[index])? == self.true_label)
    }

    fn check_stage_count(&self) -> Result<()> {
        if self.stage_probs.len() != STAGE_COUNT {
            return Err(Error::invalid(format!(
                "sample '{}': expected {STAGE_COUNT} stage outputs, got {}",
                self.sample_id,
                self.stage_probs.len()
            )));
        }
        Ok(())
    }
}

/// Validated, immutable collection of joined two-stage predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    class_count: usize,
    samples: Vec<SampleRecord>,
    class_names: Option<Vec<String>>,
}

impl PredictionSet {
    /// Builds a set, checking every invariant. In `Renormalize` mode the
    /// stored probability vectors are the renormalized ones.
    pub fn new(
        class_count: usize,
        samples: Vec<SampleRecord>,
        class_names: Option<Vec<String>>,
        mode: Normalization,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::invalid(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        if let Some(names) = &class_names {
            if names.len() != class_count {
                return Err(Error::invalid(format!(
                    "{} class names given for {class_count} classes",
                    names.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(samples.len());
        let mut checked = Vec::with_capacity(samples.len());
        for mut sample in samples {
            if !seen.insert(sample.sample_id.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate sample_id '{}'",
                    sample.sample_id
                )));
            }
            if sample.true_label >= class_count {
                return Err(Error::invalid(format!(
                    "sample '{}': true_label {} out of range for {class_count} classes",
                    sample.sample_id, sample.true_label
                )));
            }
            sample.check_stage_count()?;
            for (stage, probs) in sample.stage_probs.iter_mut().enumerate() {
                if probs.len() != class_count {
                    return Err(Error::invalid(format!(
                        "sample '{}': stage {} has {} probabilities, expected {class_count}",
                        sample.sample_id,
                        stage + 1,
                        probs.len()
                    )));
                }
                *probs = validate_probs(probs, mode).map_err(|reason| {
                    Error::invalid(format!(
                        "sample '{}', stage {}: {reason}",
                        sample.sample_id,
                        stage + 1
                    ))
                })?;
            }
            checked.push(sample);
        }
        Ok(PredictionSet {
            class_count,
            samples: checked,
            class_names,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Keeps the samples at `indices` (ascending), preserving their contents.
    pub(crate) fn subset(&self, indices: &[usize]) -> PredictionSet {
        PredictionSet {
            class_count: self.class_count,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Fraction of samples whose stage-`index` argmax equals the true label.
    pub fn stage_accuracy(&self, index: usize) -> Result<f64> {
        if self.samples.is_empty() {
            return Err(Error::invalid("accuracy of an empty prediction set"));
        }
        let mut correct = 0usize;
        for s in &self.samples {
            if s.stage_correct(index)? {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.samples.len() as f64)
    }
}

/// A stage in the cascade with its per-inference energy cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSpec {
    stages: Vec<Stage>,
    class_count: usize,
}

impl CascadeSpec {
    pub fn new(stages: Vec<Stage>, class_count: usize) -> Result<Self> {
        if stages.len() != STAGE_COUNT {
            return Err(Error::invalid(format!(
                "cascade must have exactly {STAGE_COUNT} stages, got {}",
                stages.len()
            )));
        }
        for s in &stages {
            if !(s.energy_mj.is_finite() && s.energy_mj >= 0.0) {
                return Err(Error::invalid(format!(
                    "stage '{}': energy_mj must be a nonnegative number, got {}",
                    s.name, s.energy_mj
                )));
            }
        }
        if class_count < 2 {
            return Err(Error::invalid(format!(
                "class_count must be at least 2, got {class_count}"
            )));
        }
        Ok(CascadeSpec {
            stages,
            class_count,
        })
    }

    /// Shorthand for a little/big pair.
    pub fn two_stage(little_mj: f64, big_mj: f64, class_count: usize) -> Result<Self> {
        Self::new(
            vec![
                Stage {
                    name: "little".into(),
                    energy_mj: little_mj,
                },
                Stage {
                    name: "big".into(),
                    energy_mj: big_mj,
                },
            ],
            class_count,
        )
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn little_energy(&self) -> f64 {
        self.stages[0].energy_mj
    }

    pub fn big_energy(&self) -> f64 {
        self.stages[1].energy_mj
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Thresholds {
    Global(f64),
    PerClass(Vec<f64>),
}

/// Score-margin thresholds, either shared or indexed by stage-1 class.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPolicy {
    thresholds: Thresholds,
    alpha: Option<f64>,
}

fn check_threshold(th: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&th) {
        return Err(Error::invalid(format!("threshold {th} outside [0, 1]")));
    }
    Ok(())
}

fn check_alpha(alpha: Option<f64>) -> Result<()> {
    match alpha {
        Some(a) if !(a.is_finite() && a >= 0.0) => Err(Error::invalid(format!(
            "alpha must be a nonnegative number, got {a}"
        ))),
        _ => Ok(()),
    }
}

impl ThresholdPolicy {
    pub fn global(th: f64, alpha: Option<f64>) -> Result<Self> {
        check_threshold(th)?;
        check_alpha(alpha)?;
        Ok(ThresholdPolicy {
            thresholds: Thresholds::Global(th),
            alpha,
        })
    }

    pub fn per_class(ths: Vec<f64>, alpha: Option<f64>) -> Result<Self> {
        if ths.is_empty() {
            return Err(Error::invalid("per-class policy needs at least one threshold"));
        }
        for &th in &ths {
            check_threshold(th)?;
        }
        check_alpha(alpha)?;
        Ok(ThresholdPolicy {
            thresholds: Thresholds::PerClass(ths),
            alpha,
        })
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn is_global(&self) -> bool {
        matches!(self.thresholds, Thresholds::Global(_))
    }

    /// Number of classes the policy is tied to, `None` for a global policy.
    pub fn class_count(&self) -> Option<usize> {
        match &self.thresholds {
            Thresholds::Global(_) => None,
            Thresholds::PerClass(v) => Some(v.len()),
        }
    }

    /// Errors if the policy cannot be applied to `class_count` classes.
    pub fn check_class_count(&self, class_count: usize) -> Result<()> {
        match self.class_count() {
            Some(n) if n != class_count => Err(Error::invalid(format!(
                "policy has {n} per-class thresholds but data has {class_count} classes"
            ))),
            _ => Ok(()),
        }
    }

    /// Threshold applied to inputs whose stage-1 prediction is `class`.
    pub fn threshold_for(&self, class: usize) -> Result<f64> {
        match &self.thresholds {
            Thresholds::Global(th) => Ok(*th),
            Thresholds::PerClass(v) => v.get(class).copied().ok_or_else(|| {
                Error::invalid(format!(
                    "no threshold for class {class}: policy covers {} classes",
                    v.len()
                ))
            }),
        }
    }

    /// Thresholds expanded to one value per class.
    pub fn expanded(&self, class_count: usize) -> Result<Vec<f64>> {
        self.check_class_count(class_count)?;
        (0..class_count).map(|c| self.threshold_for(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeDecision {
    pub predicted_label: usize,
    /// 1 when the little model's answer was kept, 2 when escalated.
    pub stopped_at_stage: u8,
    pub stage1_margin: f64,
    pub stage1_label: usize,
}

impl CascadeDecision {
    pub fn escalated(&self) -> bool {
        self.stopped_at_stage == 2
    }
}

/// Applies the stopping rule to one sample.
pub fn cascade_decide(sample: &SampleRecord, policy: &ThresholdPolicy) -> Result<CascadeDecision> {
    let (stage1_label, margin) = sample.stage1_summary()?;
    let th = policy.threshold_for(stage1_label)?;
    if margin > th {
        Ok(CascadeDecision {
            predicted_label: stage1_label,
            stopped_at_stage: 1,
            stage1_margin: margin,
            stage1_label,
        })
    } else {
        Ok(CascadeDecision {
            predicted_label: predicted_label(sample.stage(1))?,
            stopped_at_stage: 2,
            stage1_margin: margin,
            stage1_label,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(s1: &[f64], s2: &[f64], label: usize) -> SampleRecord {
        SampleRecord::new("x", label, vec![s1.to_vec(), s2.to_vec()])
    }

    #[test]
    fn margin_examples() {
        assert!((score_margin(&[0.7, 0.2, 0.1]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(score_margin(&[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(score_margin(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(score_margin(&[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(predicted_label(&[0.1, 0.8, 0.1]).unwrap(), 1);
        assert_eq!(predicted_label(&[0.4, 0.4, 0.2]).unwrap(), 0);
        assert!(predicted_label(&[]).is_err());
    }

    #[test]
    fn single_class_set_rejected() {
        let s = SampleRecord::new("a", 0, vec![vec![1.0], vec![1.0]]);
        let err = PredictionSet::new(1, vec![s], None, Normalization::Strict).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn decide_keeps_confident_stage1() {
        let s = sample(&[0.8, 0.1, 0.1], &[0.1, 0.8, 0.1], 0);
        let p = ThresholdPolicy::per_class(vec![0.15, 0.5, 0.5], None).unwrap();
        let d = cascade_decide(&s, &p).unwrap();
        assert_eq!(d.stopped_at_stage, 1);
        assert_eq!(d.predicted_label, 0);
    }

    #[test]
    fn decide_escalates_low_margin() {
        let s = sample(&[0.45, 0.40, 0.15], &[0.1, 0.8, 0.1], 1);
        let p = ThresholdPolicy::global(0.15, None).unwrap();
        let d = cascade_decide(&s, &p).unwrap();
        assert_eq!(d.stopped_at_stage, 2);
        assert_eq!(d.predicted_label, 1);
        assert_eq!(d.stage1_label, 0);
    }

    #[test]
    fn margin_equal_to_threshold_escalates() {
        let s = sample(&[0.75, 0.25], &[0.0, 1.0], 1);
        let p = ThresholdPolicy::global(0.5, None).unwrap();
        assert!(cascade_decide(&s, &p).unwrap().escalated());
    }

    #[test]
    fn threshold_one_always_escalates() {
        let s = sample(&[1.0, 0.0], &[0.0, 1.0], 1);
        let p = ThresholdPolicy::global(1.0, None).unwrap();
        let d = cascade_decide(&s, &p).unwrap();
        assert_eq!((d.stopped_at_stage, d.predicted_label), (2, 1));
    }

    #[test]
    fn wrong_stage_count_and_short_policy() {
        let s = SampleRecord::new("a", 0, vec![vec![0.6, 0.4]]);
        let p = ThresholdPolicy::global(0.3, None).unwrap();
        assert!(matches!(cascade_decide(&s, &p), Err(Error::InvalidInput(_))));

        let s = sample(&[0.1, 0.2, 0.7], &[0.1, 0.2, 0.7], 2);
        let p = ThresholdPolicy::per_class(vec![0.3, 0.3], None).unwrap();
        assert!(matches!(cascade_decide(&s, &p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sum_tolerance_and_renormalize() {
        assert!(validate_probs(&[0.49, 0.49], Normalization::Strict).is_err());
        assert!(validate_probs(&[0.50004, 0.5], Normalization::Strict).is_ok());
        let v = validate_probs(&[0.49, 0.49], Normalization::Renormalize).unwrap();
        assert_eq!(v, vec![0.5, 0.5]);
        assert!(validate_probs(&[0.0, 0.0], Normalization::Renormalize).is_err());
        assert!(validate_probs(&[f64::NAN, 1.0], Normalization::Renormalize).is_err());
    }

    #[test]
    fn threshold_bounds_enforced() {
        assert!(ThresholdPolicy::global(1.01, None).is_err());
        assert!(ThresholdPolicy::per_class(vec![0.2, -0.1], None).is_err());
        assert!(ThresholdPolicy::global(0.2, Some(-1.0)).is_err());
    }

    fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |w| {
            let s: f64 = w.iter().sum();
            (s > 0.0).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn margin_permutation_invariant(p in (2usize..8).prop_flat_map(probs), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut q = p.clone();
            q.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(score_margin(&p).unwrap(), score_margin(&q).unwrap());
        }

        #[test]
        fn escalation_is_monotone_in_thresholds(
            p in probs(4),
            q in probs(4),
            lo in prop::collection::vec(0.0f64..=1.0, 4),
            bump in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let hi: Vec<f64> = lo.iter().zip(&bump).map(|(a, b)| (a + b).min(1.0)).collect();
            let s = sample(&p, &q, 0);
            let a = ThresholdPolicy::per_class(lo, None).unwrap();
            let b = ThresholdPolicy::per_class(hi, None).unwrap();
            let da = cascade_decide(&s, &a).unwrap();
            let db = cascade_decide(&s, &b).unwrap();
            prop_assert!(!da.escalated() || db.escalated());
            prop_assert_eq!(da, cascade_decide(&s, &a).unwrap());
        }
    }
}
