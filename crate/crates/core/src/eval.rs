//! Cascade evaluation, the expected-energy model and trade-off analysis.

use rayon::prelude::*;

use crate::cascade::{cascade_decide, CascadeSpec, PredictionSet, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::optimizer::{
    build_class_slices, check_alpha, escalations_for_class, false_positives_for_class,
    optimize_class_thresholds, optimize_global_threshold,
};

/// Steps of the default alpha grid on `[0, 1]`.
pub const DEFAULT_ALPHA_STEPS: u32 = 100;

/// Tool default for alpha sweeps: `0, 0.01, ..., 1`. Above 1 an escalation
/// can never pay for itself, so larger values all reproduce stage 1 alone.
pub fn default_alphas() -> Vec<f64> {
    (0..=DEFAULT_ALPHA_STEPS)
        .map(|k| k as f64 / DEFAULT_ALPHA_STEPS as f64)
        .collect()
}

/// Normalized accuracy-gain anchors reported by default.
pub const DEFAULT_QUANTILES: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    PerClass,
    Global,
}

impl PolicyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyMode::PerClass => "per_class",
            PolicyMode::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBreakdown {
    pub class_id: usize,
    pub m_c: u64,
    pub fp: u64,
    pub escalations: u64,
    pub th_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub sample_count: usize,
    pub accuracy: f64,
    pub mean_energy_mj: f64,
    pub escalation_rate: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub stage1_accuracy: f64,
    pub stage2_accuracy: f64,
}

/// `E(M1) + E(M2) * P[escalate]`.
pub fn expected_energy(cascade: &CascadeSpec, escalation_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&escalation_rate) {
        return Err(Error::invalid(format!(
            "escalation rate {escalation_rate} outside [0, 1]"
        )));
    }
    Ok(cascade.little_energy() + cascade.big_energy() * escalation_rate)
}

pub fn evaluate_policy(
    predictions: &PredictionSet,
    policy: &ThresholdPolicy,
    cascade: &CascadeSpec,
) -> Result<EvaluationReport> {
    let class_count = predictions.class_count();
    if cascade.class_count() != class_count {
        return Err(Error::invalid(format!(
            "cascade is configured for {} classes but data has {class_count}",
            cascade.class_count()
        )));
    }
    policy.check_class_count(class_count)?;
    if predictions.is_empty() {
        return Err(Error::invalid("cannot evaluate a policy on an empty prediction set"));
    }

    let mut correct = 0usize;
    let mut escalated = 0usize;
    for s in predictions.samples() {
        let d = cascade_decide(s, policy)?;
        if d.predicted_label == s.true_label() {
            correct += 1;
        }
        if d.escalated() {
            escalated += 1;
        }
    }
    let n = predictions.len() as f64;
    let escalation_rate = escalated as f64 / n;

    let per_class = build_class_slices(predictions)?
        .iter()
        .map(|slice| {
            let th = policy.threshold_for(slice.class_id)?;
            Ok(ClassBreakdown {
                class_id: slice.class_id,
                m_c: slice.len() as u64,
                fp: false_positives_for_class(slice, th),
                escalations: escalations_for_class(slice, th),
                th_used: th,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvaluationReport {
        sample_count: predictions.len(),
        accuracy: correct as f64 / n,
        mean_energy_mj: expected_energy(cascade, escalation_rate)?,
        escalation_rate,
        per_class,
        stage1_accuracy: predictions.stage_accuracy(0)?,
        stage2_accuracy: predictions.stage_accuracy(1)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub accuracy: f64,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    pub alpha: f64,
    /// Absent for curves read back from plot-data files.
    pub policy: Option<ThresholdPolicy>,
    pub accuracy: f64,
    pub mean_energy_mj: f64,
    pub escalation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffCurve {
    pub mode: PolicyMode,
    pub points: Vec<TradeoffPoint>,
    pub baseline_m1: Baseline,
    pub baseline_m2: Baseline,
}

/// Optimizes on `opt_set` for every alpha and evaluates on `test_set`.
pub fn sweep_alpha(
    opt_set: &PredictionSet,
    test_set: &PredictionSet,
    cascade: &CascadeSpec,
    alphas: &[f64],
    mode: PolicyMode,
) -> Result<TradeoffCurve> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha list is empty"));
    }
    if opt_set.class_count() != test_set.class_count() {
        return Err(Error::invalid(format!(
            "optimization set has {} classes, test set has {}",
            opt_set.class_count(),
            test_set.class_count()
        )));
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);

    let points = alphas
        .par_iter()
        .map(|&alpha| {
            let policy = match mode {
                PolicyMode::PerClass => optimize_class_thresholds(opt_set, alpha)?.policy(),
                PolicyMode::Global => optimize_global_threshold(opt_set, alpha)?,
            };
            let report = evaluate_policy(test_set, &policy, cascade)?;
            Ok(TradeoffPoint {
                alpha,
                policy: Some(policy),
                accuracy: report.accuracy,
                mean_energy_mj: report.mean_energy_mj,
                escalation_rate: report.escalation_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TradeoffCurve {
        mode,
        points,
        baseline_m1: Baseline {
            accuracy: test_set.stage_accuracy(0)?,
            energy_mj: cascade.little_energy(),
        },
        baseline_m2: Baseline {
            accuracy: test_set.stage_accuracy(1)?,
            energy_mj: cascade.big_energy(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainPoint {
    pub quantile: f64,
    pub target_accuracy: f64,
    /// `None` when no curve point reaches the target.
    pub mean_energy_mj: Option<f64>,
}

/// Cheapest curve point reaching `acc(M1) + q * (acc(M2) - acc(M1))`, for
/// each quantile `q`. No interpolation between points.
pub fn accuracy_gain_points(curve: &TradeoffCurve, quantiles: &[f64]) -> Vec<GainPoint> {
    let (lo, hi) = (curve.baseline_m1.accuracy, curve.baseline_m2.accuracy);
    quantiles
        .iter()
        .map(|&q| {
            let target = lo + q * (hi - lo);
            let energy = curve
                .points
                .iter()
                .filter(|p| p.accuracy >= target)
                .map(|p| p.mean_energy_mj)
                .min_by(f64::total_cmp);
            GainPoint {
                quantile: q,
                target_accuracy: target,
                mean_energy_mj: energy,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonRow {
    pub quantile: f64,
    pub target_accuracy: f64,
    pub energy_per_class: Option<f64>,
    pub energy_global: Option<f64>,
    /// `(per_class - global) / global`; `None` if either side is unreachable.
    pub relative_difference: Option<f64>,
}

pub fn compare_policies(
    per_class_curve: &TradeoffCurve,
    global_curve: &TradeoffCurve,
    quantiles: &[f64],
) -> Result<Vec<ComparisonRow>> {
    if per_class_curve.baseline_m1 != global_curve.baseline_m1
        || per_class_curve.baseline_m2 != global_curve.baseline_m2
    {
        return Err(Error::invalid(
            "curves were evaluated against different stage baselines",
        ));
    }
    let a = accuracy_gain_points(per_class_curve, quantiles);
    let b = accuracy_gain_points(global_curve, quantiles);
    Ok(a.iter()
        .zip(&b)
        .map(|(p, g)| ComparisonRow {
            quantile: p.quantile,
            target_accuracy: p.target_accuracy,
            energy_per_class: p.mean_energy_mj,
            energy_global: g.mean_energy_mj,
            relative_difference: match (p.mean_energy_mj, g.mean_energy_mj) {
                (Some(e), Some(eg)) if eg != 0.0 => Some((e - eg) / eg),
                (Some(e), Some(eg)) if e == eg => Some(0.0),
                _ => None,
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub correct_counts: Vec<u64>,
    pub incorrect_counts: Vec<u64>,
}

/// Stage-1 margins of the samples predicted as `class_id`, split by whether
/// stage 1 was right. Equal-width bins on `[0, 1]`; the last bin is closed.
pub fn sm_histogram(predictions: &PredictionSet, class_id: usize, bin_count: usize) -> Result<Histogram> {
    if class_id >= predictions.class_count() {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {} classes",
            predictions.class_count()
        )));
    }
    if bin_count == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    let slice = build_class_slices(predictions)?.swap_remove(class_id);
    let mut correct = vec![0u64; bin_count];
    let mut incorrect = vec![0u64; bin_count];
    for e in &slice.entries {
        let bin = ((e.stage1_margin * bin_count as f64) as usize).min(bin_count - 1);
        if e.stage1_correct {
            correct[bin] += 1;
        } else {
            incorrect[bin] += 1;
        }
    }
    Ok(Histogram {
        bin_edges: (0..=bin_count).map(|i| i as f64 / bin_count as f64).collect(),
        correct_counts: correct,
        incorrect_counts: incorrect,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxAccuracySummary {
    pub alpha: f64,
    pub accuracy: f64,
    pub mean_energy_mj: f64,
    pub delta_vs_m2_accuracy: f64,
    pub delta_vs_m2_energy: f64,
}

pub fn max_accuracy_summary(curve: &TradeoffCurve) -> Result<MaxAccuracySummary> {
    let best = curve
        .points
        .iter()
        .min_by(|a, b| {
            b.accuracy
                .total_cmp(&a.accuracy)
                .then(a.mean_energy_mj.total_cmp(&b.mean_energy_mj))
        })
        .ok_or_else(|| Error::invalid("trade-off curve has no points"))?;
    Ok(MaxAccuracySummary {
        alpha: best.alpha,
        accuracy: best.accuracy,
        mean_energy_mj: best.mean_energy_mj,
        delta_vs_m2_accuracy: best.accuracy - curve.baseline_m2.accuracy,
        delta_vs_m2_energy: best.mean_energy_mj - curve.baseline_m2.energy_mj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{Normalization, SampleRecord};

    fn set(rows: &[(&[f64], &[f64], usize)]) -> PredictionSet {
        let samples = rows
            .iter()
            .enumerate()
            .map(|(i, (a, b, y))| SampleRecord::new(format!("s{i}"), *y, vec![a.to_vec(), b.to_vec()]))
            .collect();
        PredictionSet::new(rows[0].0.len(), samples, None, Normalization::Strict).unwrap()
    }

    fn toy() -> PredictionSet {
        set(&[
            (&[0.9, 0.1], &[0.8, 0.2], 0),
            (&[0.6, 0.4], &[0.2, 0.8], 1),
            (&[0.3, 0.7], &[0.3, 0.7], 1),
            (&[0.45, 0.55], &[0.9, 0.1], 0),
        ])
    }

    #[test]
    fn energy_model() {
        let c = CascadeSpec::two_stage(1.0, 10.0, 2).unwrap();
        assert_eq!(expected_energy(&c, 0.0).unwrap(), 1.0);
        assert_eq!(expected_energy(&c, 1.0).unwrap(), 11.0);
        assert_eq!(expected_energy(&c, 0.5).unwrap(), 6.0);
        assert!(expected_energy(&c, 1.5).is_err());
    }

    #[test]
    fn degenerate_policies() {
        let data = toy();
        let c = CascadeSpec::two_stage(1.0, 10.0, 2).unwrap();
        let all = evaluate_policy(&data, &ThresholdPolicy::global(1.0, None).unwrap(), &c).unwrap();
        assert_eq!(all.accuracy, data.stage_accuracy(1).unwrap());
        assert_eq!(all.mean_energy_mj, 11.0);
        assert_eq!(all.escalation_rate, 1.0);

        let none = evaluate_policy(&data, &ThresholdPolicy::global(0.05, None).unwrap(), &c).unwrap();
        assert_eq!(none.accuracy, data.stage_accuracy(0).unwrap());
        assert_eq!(none.mean_energy_mj, 1.0);
        assert_eq!(none.per_class.iter().map(|p| p.m_c).sum::<u64>(), 4);
    }

    #[test]
    fn half_escalated_energy() {
        let data = toy();
        let c = CascadeSpec::two_stage(1.0, 10.0, 2).unwrap();
        // margins 0.8, 0.2, 0.4, 0.1: two at or below 0.3
        let r = evaluate_policy(&data, &ThresholdPolicy::global(0.3, None).unwrap(), &c).unwrap();
        assert_eq!(r.escalation_rate, 0.5);
        assert_eq!(r.mean_energy_mj, 6.0);
        assert_eq!(r.mean_energy_mj - 1.0 - 10.0 * r.escalation_rate, 0.0);
    }

    #[test]
    fn evaluation_dimension_checks() {
        let data = toy();
        let c3 = CascadeSpec::two_stage(1.0, 10.0, 3).unwrap();
        let g = ThresholdPolicy::global(0.5, None).unwrap();
        assert!(evaluate_policy(&data, &g, &c3).is_err());
        let c = CascadeSpec::two_stage(1.0, 10.0, 2).unwrap();
        let p = ThresholdPolicy::per_class(vec![0.1, 0.2, 0.3], None).unwrap();
        assert!(evaluate_policy(&data, &p, &c).is_err());
    }

    #[test]
    fn sweep_points_follow_alpha_order() {
        let data = toy();
        let c = CascadeSpec::two_stage(1.0, 10.0, 2).unwrap();
        let curve = sweep_alpha(&data, &data, &c, &[1.0, 0.0, 0.05], PolicyMode::PerClass).unwrap();
        let alphas: Vec<f64> = curve.points.iter().map(|p| p.alpha).collect();
        assert_eq!(alphas, vec![0.0, 0.05, 1.0]);
        assert!(sweep_alpha(&data, &data, &c, &[], PolicyMode::Global).is_err());

        let one = sweep_alpha(&data, &data, &c, &[1.0], PolicyMode::PerClass).unwrap();
        let direct = optimize_class_thresholds(&data, 1.0).unwrap().policy();
        assert_eq!(one.points[0].policy.as_ref(), Some(&direct));
    }

    fn curve(points: &[(f64, f64)], m1: f64, m2: f64) -> TradeoffCurve {
        TradeoffCurve {
            mode: PolicyMode::PerClass,
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(acc, e))| TradeoffPoint {
                    alpha: i as f64,
                    policy: None,
                    accuracy: acc,
                    mean_energy_mj: e,
                    escalation_rate: 0.0,
                })
                .collect(),
            baseline_m1: Baseline { accuracy: m1, energy_mj: 1.0 },
            baseline_m2: Baseline { accuracy: m2, energy_mj: 10.0 },
        }
    }

    #[test]
    fn gain_points_pick_cheapest_qualifying() {
        let c = curve(&[(0.9, 11.0), (0.8, 5.0), (0.7, 2.0), (0.6, 1.0)], 0.6, 0.9);
        let g = accuracy_gain_points(&c, &[0.0, 0.5, 1.0]);
        assert_eq!(g[0].mean_energy_mj, Some(1.0));
        assert!((g[1].target_accuracy - 0.75).abs() < 1e-12);
        assert_eq!(g[1].mean_energy_mj, Some(5.0));
        assert_eq!(g[2].mean_energy_mj, Some(11.0));

        let low = curve(&[(0.7, 2.0)], 0.6, 0.9);
        assert_eq!(accuracy_gain_points(&low, &[1.0])[0].mean_energy_mj, None);
    }

    #[test]
    fn comparison_of_identical_curves_is_zero() {
        let c = curve(&[(0.9, 11.0), (0.7, 2.0)], 0.6, 0.9);
        let rows = compare_policies(&c, &c, &DEFAULT_QUANTILES).unwrap();
        assert!(rows.iter().all(|r| r.relative_difference == Some(0.0)));

        let other = curve(&[(0.9, 11.0)], 0.5, 0.9);
        assert!(compare_policies(&c, &other, &[0.5]).is_err());

        let unreachable = curve(&[(0.65, 1.5)], 0.6, 0.9);
        let rows = compare_policies(&c, &unreachable, &[1.0]).unwrap();
        assert_eq!(rows[0].relative_difference, None);
    }

    #[test]
    fn histogram_edges_and_partition() {
        let data = set(&[
            (&[1.0, 0.0], &[1.0, 0.0], 0),
            (&[0.5, 0.5], &[0.5, 0.5], 0),
            (&[0.7, 0.3], &[0.7, 0.3], 1),
        ]);
        let h = sm_histogram(&data, 0, 2).unwrap();
        assert_eq!(h.bin_edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.correct_counts, vec![1, 1]);
        assert_eq!(h.incorrect_counts, vec![1, 0]);
        let empty = sm_histogram(&data, 1, 4).unwrap();
        assert!(empty.correct_counts.iter().chain(&empty.incorrect_counts).all(|&c| c == 0));
        assert!(sm_histogram(&data, 2, 4).is_err());
        assert!(sm_histogram(&data, 0, 0).is_err());
    }

    #[test]
    fn max_accuracy_prefers_cheaper_ties() {
        let c = curve(&[(0.9, 11.0), (0.9, 7.0), (0.8, 2.0)], 0.6, 0.88);
        let s = max_accuracy_summary(&c).unwrap();
        assert_eq!((s.accuracy, s.mean_energy_mj), (0.9, 7.0));
        assert!((s.delta_vs_m2_accuracy - 0.02).abs() < 1e-12);
        assert_eq!(s.delta_vs_m2_energy, -3.0);

        let only_escalate = curve(&[(0.88, 11.0)], 0.6, 0.88);
        let s = max_accuracy_summary(&only_escalate).unwrap();
        assert_eq!((s.delta_vs_m2_accuracy, s.delta_vs_m2_energy), (0.0, 1.0));
        assert!(max_accuracy_summary(&curve(&[], 0.6, 0.9)).is_err());
    }
}
