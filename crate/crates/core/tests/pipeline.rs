use margin_cascade::eval::{default_alphas, DEFAULT_QUANTILES};
use margin_cascade::io::{load_prediction_set, save_prediction_set};
use margin_cascade::{
    compare_policies, generate, split, sweep_alpha, CascadeSpec, GeneratorConfig, Normalization,
    PolicyMode, PredictionSet, SampleRecord,
};

#[test]
fn generated_set_survives_stage_files() {
    let cfg = GeneratorConfig { sample_count: 300, seed: 9, ..GeneratorConfig::default() };
    let set = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("s1.csv"), dir.path().join("s2.csv"));
    save_prediction_set(&set, &a, &b).unwrap();
    let back = load_prediction_set(&a, &b, Normalization::Strict, None).unwrap();
    assert_eq!(back.len(), set.len());
    for (x, y) in set.samples().iter().zip(back.samples()) {
        assert_eq!(x.sample_id(), y.sample_id());
        assert_eq!(x.true_label(), y.true_label());
        for stage in 0..2 {
            for (p, q) in x.stage(stage).iter().zip(y.stage(stage)) {
                assert!((p - q).abs() <= 5e-7, "{p} vs {q}");
            }
        }
    }
}

#[test]
fn per_class_beats_single_threshold_on_default_profile() {
    let set = generate(&GeneratorConfig::default()).unwrap();
    let (val, test) = split(&set, 0.5, 42).unwrap();
    let cascade = CascadeSpec::two_stage(1.0, 10.0, set.class_count()).unwrap();
    let alphas = default_alphas();
    let pc = sweep_alpha(&val, &test, &cascade, &alphas, PolicyMode::PerClass).unwrap();
    let g = sweep_alpha(&val, &test, &cascade, &alphas, PolicyMode::Global).unwrap();
    let rows = compare_policies(&pc, &g, &DEFAULT_QUANTILES).unwrap();
    let wins = rows
        .iter()
        .filter(|r| r.relative_difference.is_some_and(|d| d <= 0.0))
        .count();
    assert!(2 * wins > rows.len(), "{rows:?}");
}

#[test]
fn identical_classes_compare_equal() {
    let mut samples = Vec::new();
    for (i, m) in [0.1, 0.3, 0.5, 0.7, 0.9, 0.2].iter().enumerate() {
        for c in 0..3usize {
            let other = (c + 1) % 3;
            let mut s1 = vec![0.0; 3];
            s1[c] = (1.0 + m) / 2.0;
            s1[other] = (1.0 - m) / 2.0;
            let truth = if i % 2 == 0 { c } else { other };
            let mut s2 = vec![0.0; 3];
            s2[truth] = 1.0;
            samples.push(SampleRecord::new(format!("{c}-{i}"), truth, vec![s1, s2]));
        }
    }
    let set = PredictionSet::new(3, samples, None, Normalization::Strict).unwrap();
    let cascade = CascadeSpec::two_stage(1.0, 10.0, 3).unwrap();
    let alphas = default_alphas();
    let pc = sweep_alpha(&set, &set, &cascade, &alphas, PolicyMode::PerClass).unwrap();
    let g = sweep_alpha(&set, &set, &cascade, &alphas, PolicyMode::Global).unwrap();
    for row in compare_policies(&pc, &g, &DEFAULT_QUANTILES).unwrap() {
        assert_eq!(row.relative_difference, Some(0.0));
    }
}
