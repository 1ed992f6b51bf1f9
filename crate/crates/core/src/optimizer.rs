//! Per-class threshold optimization.
//!
//! For every class `c` predicted by the little model, the threshold is the
//! minimizer of `FP_c(th) + alpha * E_c(th)`, where `FP_c` counts system
//! false positives among inputs the little model wrongly labels `c` and
//! `E_c` counts escalations to the big model. Both counts only change when
//! `th` crosses an observed margin, so evaluating `{0} ∪ {observed margins}`
//! is an exact search.

use rayon::prelude::*;

use crate::cascade::{PredictionSet, ThresholdPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceEntry {
    pub stage1_margin: f64,
    pub stage1_correct: bool,
    pub stage2_correct: bool,
}

/// All samples whose stage-1 prediction is `class_id`, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSlice {
    pub class_id: usize,
    pub entries: Vec<SliceEntry>,
}

impl ClassSlice {
    pub fn new(class_id: usize, entries: Vec<SliceEntry>) -> Self {
        ClassSlice { class_id, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub fp: u64,
    pub escalations: u64,
    pub total: f64,
}

impl ObjectiveValue {
    pub fn new(fp: u64, escalations: u64, alpha: f64) -> Self {
        ObjectiveValue {
            fp,
            escalations,
            total: fp as f64 + alpha * escalations as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub alpha: f64,
    pub per_class_th: Vec<f64>,
    pub per_class_objective: Vec<ObjectiveValue>,
    /// True where the class was never predicted and inherited the global optimum.
    pub fallback_used: Vec<bool>,
}

impl OptimizationResult {
    pub fn policy(&self) -> ThresholdPolicy {
        ThresholdPolicy::per_class(self.per_class_th.clone(), Some(self.alpha))
            .expect("optimized thresholds are candidate margins in [0, 1]")
    }
}

/// One row of an objective-vs-threshold curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub th: f64,
    pub fp: u64,
    pub escalations: u64,
    pub total: f64,
    pub is_argmin: bool,
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "alpha must be a nonnegative number, got {alpha}"
        )));
    }
    Ok(())
}

pub fn build_class_slices(predictions: &PredictionSet) -> Result<Vec<ClassSlice>> {
    let mut slices: Vec<ClassSlice> = (0..predictions.class_count())
        .map(|c| ClassSlice::new(c, Vec::new()))
        .collect();
    for s in predictions.samples() {
        let (label, margin) = s.stage1_summary()?;
        slices[label].entries.push(SliceEntry {
            stage1_margin: margin,
            stage1_correct: label == s.true_label(),
            stage2_correct: s.stage_correct(1)?,
        });
    }
    Ok(slices)
}

pub fn false_positives_for_class(slice: &ClassSlice, th: f64) -> u64 {
    slice
        .entries
        .iter()
        .filter(|e| !e.stage1_correct && (e.stage1_margin > th || !e.stage2_correct))
        .count() as u64
}

pub fn escalations_for_class(slice: &ClassSlice, th: f64) -> u64 {
    slice
        .entries
        .iter()
        .filter(|e| e.stage1_margin <= th)
        .count() as u64
}

pub fn objective(slice: &ClassSlice, th: f64, alpha: f64) -> ObjectiveValue {
    ObjectiveValue::new(
        false_positives_for_class(slice, th),
        escalations_for_class(slice, th),
        alpha,
    )
}

pub fn candidate_thresholds(slice: &ClassSlice) -> Vec<f64> {
    let mut margins: Vec<f64> = slice.entries.iter().map(|e| e.stage1_margin).collect();
    margins.push(0.0);
    margins.sort_by(f64::total_cmp);
    margins.dedup();
    margins
}

/// `(th, fp, escalations)` at every candidate threshold, ascending in `th`,
/// computed with one sort and a running count.
fn count_profile(slice: &ClassSlice) -> Vec<(f64, u64, u64)> {
    let mut sorted = slice.entries.clone();
    sorted.sort_by(|a, b| a.stage1_margin.total_cmp(&b.stage1_margin));
    let wrong_total = sorted.iter().filter(|e| !e.stage1_correct).count() as u64;

    let mut profile = Vec::with_capacity(sorted.len() + 1);
    let (mut escalated, mut wrong_escalated, mut wrong_escalated_still_wrong) = (0u64, 0u64, 0u64);
    let mut next = 0;
    for th in candidate_thresholds(slice) {
        while next < sorted.len() && sorted[next].stage1_margin <= th {
            let e = &sorted[next];
            escalated += 1;
            if !e.stage1_correct {
                wrong_escalated += 1;
                if !e.stage2_correct {
                    wrong_escalated_still_wrong += 1;
                }
            }
            next += 1;
        }
        let fp = (wrong_total - wrong_escalated) + wrong_escalated_still_wrong;
        profile.push((th, fp, escalated));
    }
    profile
}

/// Index of the minimum total; ties keep the earliest (smallest threshold).
fn argmin(totals: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, t) in totals.enumerate() {
        if t < best.1 {
            best = (i, t);
        }
    }
    best.0
}

pub fn objective_curve(slice: &ClassSlice, alpha: f64) -> Vec<CurvePoint> {
    let mut points: Vec<CurvePoint> = count_profile(slice)
        .into_iter()
        .map(|(th, fp, esc)| {
            let v = ObjectiveValue::new(fp, esc, alpha);
            CurvePoint {
                th,
                fp,
                escalations: esc,
                total: v.total,
                is_argmin: false,
            }
        })
        .collect();
    let best = argmin(points.iter().map(|p| p.total));
    points[best].is_argmin = true;
    points
}

/// Optimal threshold for a single slice and its objective value.
pub fn optimize_slice(slice: &ClassSlice, alpha: f64) -> (f64, ObjectiveValue) {
    let profile = count_profile(slice);
    let values: Vec<ObjectiveValue> = profile
        .iter()
        .map(|&(_, fp, esc)| ObjectiveValue::new(fp, esc, alpha))
        .collect();
    let best = argmin(values.iter().map(|v| v.total));
    (profile[best].0, values[best])
}

/// Shared threshold minimizing the class-ordered sum of per-class totals.
pub fn optimize_global_slices(slices: &[ClassSlice], alpha: f64) -> (f64, f64) {
    let profiles: Vec<Vec<(f64, u64, u64)>> = slices.iter().map(count_profile).collect();
    let mut pooled: Vec<f64> = profiles.iter().flatten().map(|p| p.0).collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();

    let total_at = |th: f64| -> f64 {
        profiles
            .iter()
            .map(|profile| {
                // Largest candidate not above th; candidate 0.0 always exists.
                let idx = profile.partition_point(|p| p.0 <= th) - 1;
                let (_, fp, esc) = profile[idx];
                ObjectiveValue::new(fp, esc, alpha).total
            })
            .sum()
    };
    let totals: Vec<f64> = pooled.iter().map(|&th| total_at(th)).collect();
    let best = argmin(totals.iter().copied());
    (pooled[best], totals[best])
}

pub fn optimize_global_threshold(predictions: &PredictionSet, alpha: f64) -> Result<ThresholdPolicy> {
    check_alpha(alpha)?;
    let slices = build_class_slices(predictions)?;
    let (th, _) = optimize_global_slices(&slices, alpha);
    ThresholdPolicy::global(th, Some(alpha))
}

/// Per-class optimum over pre-built slices.
pub fn optimize_slices(slices: &[ClassSlice], alpha: f64) -> Result<OptimizationResult> {
    check_alpha(alpha)?;
    let per_class: Vec<(f64, ObjectiveValue)> =
        slices.par_iter().map(|s| optimize_slice(s, alpha)).collect();
    let fallback_used: Vec<bool> = slices.iter().map(ClassSlice::is_empty).collect();
    let fallback_th = if fallback_used.iter().any(|&f| f) {
        Some(optimize_global_slices(slices, alpha).0)
    } else {
        None
    };
    let per_class_th = per_class
        .iter()
        .zip(&fallback_used)
        .map(|(&(th, _), &empty)| if empty { fallback_th.unwrap_or(th) } else { th })
        .collect();
    Ok(OptimizationResult {
        alpha,
        per_class_th,
        per_class_objective: per_class.into_iter().map(|(_, v)| v).collect(),
        fallback_used,
    })
}

pub fn optimize_class_thresholds(predictions: &PredictionSet, alpha: f64) -> Result<OptimizationResult> {
    check_alpha(alpha)?;
    optimize_slices(&build_class_slices(predictions)?, alpha)
}

/// Total objective of a (possibly global) policy on the given slices,
/// summed in class order.
pub fn policy_objective(slices: &[ClassSlice], policy: &ThresholdPolicy, alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in slices {
        total += objective(s, policy.threshold_for(s.class_id)?, alpha).total;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{Normalization, SampleRecord};
    use proptest::prelude::*;

    fn entry(stage1_correct: bool, margin: f64, stage2_correct: bool) -> SliceEntry {
        SliceEntry {
            stage1_margin: margin,
            stage1_correct,
            stage2_correct,
        }
    }

    fn example_slice() -> ClassSlice {
        ClassSlice::new(
            0,
            vec![
                entry(false, 0.9, true),
                entry(false, 0.1, false),
                entry(true, 0.5, true),
            ],
        )
    }

    /// Direct enumeration used as the oracle for the worked examples.
    fn enumerate(slice: &ClassSlice, th: f64) -> (u64, u64) {
        let mut fp = 0;
        let mut esc = 0;
        for e in &slice.entries {
            let escalate = e.stage1_margin <= th;
            if escalate {
                esc += 1;
            }
            if !e.stage1_correct {
                let wrong_after = if escalate { !e.stage2_correct } else { true };
                if wrong_after {
                    fp += 1;
                }
            }
        }
        (fp, esc)
    }

    #[test]
    fn false_positive_example() {
        let s = example_slice();
        assert_eq!(enumerate(&s, 0.5).0, 2);
        assert_eq!(false_positives_for_class(&s, 0.5), 2);
        assert_eq!(false_positives_for_class(&s, 1.0), 1);
        assert_eq!(false_positives_for_class(&ClassSlice::new(0, vec![]), 0.3), 0);
    }

    #[test]
    fn escalation_examples() {
        let s = example_slice();
        assert_eq!(escalations_for_class(&s, 0.5), 2);
        assert_eq!(escalations_for_class(&s, 0.0), 0);
        assert_eq!(escalations_for_class(&s, 1.0), 3);
    }

    #[test]
    fn objective_examples() {
        let s = example_slice();
        assert_eq!(enumerate(&s, 0.5), (2, 2));
        let v = objective(&s, 0.5, 1.0);
        assert_eq!((v.fp, v.escalations, v.total), (2, 2, 4.0));
        assert_eq!(objective(&s, 1.0, 0.0).total, 1.0);
        assert_eq!(objective(&ClassSlice::new(1, vec![]), 0.7, 3.0).total, 0.0);
    }

    #[test]
    fn candidates() {
        let s = ClassSlice::new(
            0,
            vec![entry(true, 0.3, true), entry(true, 0.3, true), entry(true, 0.7, true)],
        );
        assert_eq!(candidate_thresholds(&s), vec![0.0, 0.3, 0.7]);
        assert_eq!(candidate_thresholds(&ClassSlice::new(0, vec![])), vec![0.0]);
        let s = ClassSlice::new(0, vec![entry(true, 0.0, true)]);
        assert_eq!(candidate_thresholds(&s), vec![0.0]);
    }

    #[test]
    fn curve_examples() {
        let empty = objective_curve(&ClassSlice::new(0, vec![]), 1.0);
        assert_eq!(empty.len(), 1);
        assert_eq!((empty[0].th, empty[0].fp, empty[0].escalations, empty[0].total), (0.0, 0, 0, 0.0));

        let c = objective_curve(&ClassSlice::new(0, vec![entry(false, 0.4, true)]), 1.0);
        let rows: Vec<_> = c.iter().map(|p| (p.th, p.fp, p.escalations, p.total)).collect();
        assert_eq!(rows, vec![(0.0, 1, 0, 1.0), (0.4, 0, 1, 1.0)]);
        assert!(c[0].is_argmin && !c[1].is_argmin);
    }

    #[test]
    fn easy_class_gets_zero_threshold() {
        let s = ClassSlice::new(
            0,
            vec![entry(true, 0.2, true), entry(true, 0.6, false), entry(true, 0.9, true)],
        );
        let (th, v) = optimize_slice(&s, 0.05);
        assert_eq!(th, 0.0);
        assert_eq!((v.fp, v.escalations), (0, 0));
    }

    fn set_from(rows: &[(&[f64], &[f64], usize)]) -> PredictionSet {
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, (a, b, y))| SampleRecord::new(format!("s{i}"), *y, vec![a.to_vec(), b.to_vec()]))
            .collect();
        PredictionSet::new(rows[0].0.len(), samples, None, Normalization::Strict).unwrap()
    }

    #[test]
    fn slices_partition_by_stage1_label() {
        let set = set_from(&[
            (&[0.1, 0.1, 0.8], &[0.1, 0.1, 0.8], 2),
            (&[0.8, 0.1, 0.1], &[0.8, 0.1, 0.1], 0),
            (&[0.2, 0.2, 0.6], &[0.2, 0.2, 0.6], 1),
        ]);
        let sizes: Vec<usize> = build_class_slices(&set).unwrap().iter().map(ClassSlice::len).collect();
        assert_eq!(sizes, vec![1, 0, 2]);

        let tie = set_from(&[(&[0.4, 0.4, 0.2], &[0.4, 0.4, 0.2], 1)]);
        assert_eq!(build_class_slices(&tie).unwrap()[0].len(), 1);

        let empty = PredictionSet::new(3, vec![], None, Normalization::Strict).unwrap();
        let slices = build_class_slices(&empty).unwrap();
        assert_eq!(slices.len(), 3);
        assert!(slices.iter().all(ClassSlice::is_empty));
    }

    #[test]
    fn unpredicted_class_inherits_global() {
        let set = set_from(&[
            (&[0.6, 0.3, 0.1], &[0.0, 1.0, 0.0], 1),
            (&[0.55, 0.4, 0.05], &[1.0, 0.0, 0.0], 0),
            (&[0.1, 0.7, 0.2], &[0.1, 0.7, 0.2], 1),
        ]);
        let r = optimize_class_thresholds(&set, 0.1).unwrap();
        let g = optimize_global_threshold(&set, 0.1).unwrap();
        assert_eq!(r.fallback_used, vec![false, false, true]);
        assert_eq!(r.per_class_th[2], g.threshold_for(0).unwrap());
    }

    #[test]
    fn all_correct_gives_zero_global() {
        let set = set_from(&[
            (&[0.6, 0.4], &[0.6, 0.4], 0),
            (&[0.3, 0.7], &[0.3, 0.7], 1),
        ]);
        for alpha in [0.01, 1.0] {
            let g = optimize_global_threshold(&set, alpha).unwrap();
            assert_eq!(g.threshold_for(0).unwrap(), 0.0);
        }
    }

    #[test]
    fn negative_alpha_rejected() {
        let set = set_from(&[(&[0.6, 0.4], &[0.6, 0.4], 0)]);
        assert!(optimize_class_thresholds(&set, -0.1).is_err());
        assert!(optimize_global_threshold(&set, f64::NAN).is_err());
    }

    fn arb_slice() -> impl Strategy<Value = ClassSlice> {
        prop::collection::vec((any::<bool>(), 0u32..=100, any::<bool>()), 0..40).prop_map(|v| {
            ClassSlice::new(
                0,
                v.into_iter()
                    .map(|(c, m, c2)| entry(c, m as f64 / 100.0, c2))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn exact_search_matches_grid(s in arb_slice(), alpha in prop::sample::select(vec![0.0, 0.05, 0.2, 1.0, 5.0])) {
            let (_, best) = optimize_slice(&s, alpha);
            let grid = (0..=1000)
                .map(|k| {
                    let (fp, esc) = enumerate(&s, k as f64 / 1000.0);
                    fp as f64 + alpha * esc as f64
                })
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(best.total, grid);
        }

        #[test]
        fn curve_escalations_nondecreasing(s in arb_slice(), alpha in 0.0f64..5.0) {
            let c = objective_curve(&s, alpha);
            prop_assert!(c.windows(2).all(|w| w[0].escalations <= w[1].escalations));
            prop_assert_eq!(c.iter().filter(|p| p.is_argmin).count(), 1);
            for p in &c {
                let v = objective(&s, p.th, alpha);
                prop_assert_eq!((v.fp, v.escalations), (p.fp, p.escalations));
            }
        }

        #[test]
        fn larger_alpha_never_escalates_more(s in arb_slice(), a in 0.0f64..3.0, d in 0.001f64..3.0) {
            let (lo, _) = optimize_slice(&s, a);
            let (hi, _) = optimize_slice(&s, a + d);
            prop_assert!(escalations_for_class(&s, hi) <= escalations_for_class(&s, lo));
        }

        #[test]
        fn per_class_dominates_global(slices in prop::collection::vec(arb_slice(), 2..5), alpha in 0.0f64..2.0) {
            let slices: Vec<ClassSlice> = slices
                .into_iter()
                .enumerate()
                .map(|(i, s)| ClassSlice::new(i, s.entries))
                .collect();
            let r = optimize_slices(&slices, alpha).unwrap();
            let (th, global_total) = optimize_global_slices(&slices, alpha);
            let per_class: f64 = r.per_class_objective.iter().map(|v| v.total).sum();
            prop_assert!(per_class <= global_total);
            let g = ThresholdPolicy::global(th, None).unwrap();
            prop_assert_eq!(policy_objective(&slices, &g, alpha).unwrap(), global_total);
        }
    }
}
