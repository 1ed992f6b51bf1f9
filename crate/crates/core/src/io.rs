//! File formats: stage prediction CSVs, policy files, run and generator
//! configs, and the delimited plot/report outputs.
//!
//! Numeric values in reports, curves and stage files are written with six
//! fractional digits. Policy files keep full `f64` precision so thresholds
//! round-trip exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{validate_probs, CascadeSpec, Normalization, PredictionSet, SampleRecord, Stage, ThresholdPolicy, Thresholds};
use crate::error::{Error, Result};
use crate::eval::{
    Baseline, ComparisonRow, EvaluationReport, Histogram, PolicyMode, TradeoffCurve, TradeoffPoint,
    DEFAULT_QUANTILES,
};
use crate::optimizer::CurvePoint;
use crate::synth::GeneratorConfig;

pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn validation(path: &Path, row: usize, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        path: path.to_path_buf(),
        row,
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StageRow {
    line: usize,
    sample_id: String,
    true_label: usize,
    probs: Vec<f64>,
}

/// Parses one stage file; returns the class count and rows in file order.
fn read_stage_file(path: &Path, mode: Normalization) -> Result<(usize, Vec<StageRow>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(path, e.to_string()))?,
        None => return Err(parse_error(path, "file is empty, expected a header row")),
    };
    let class_count = header.len().saturating_sub(2);
    let expected: Vec<String> = ["sample_id".to_string(), "true_label".to_string()]
        .into_iter()
        .chain((0..class_count).map(|c| format!("p_{c}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) || class_count < 2 {
        return Err(parse_error(
            path,
            format!(
                "header must be 'sample_id,true_label,p_0,...,p_{{C-1}}' with C >= 2, got '{}'",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| parse_error(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != class_count + 2 {
            return Err(validation(
                path,
                line,
                "*",
                format!("expected {} columns, found {}", class_count + 2, record.len()),
            ));
        }
        let sample_id = record[0].to_string();
        if sample_id.is_empty() {
            return Err(validation(path, line, "sample_id", "empty sample id"));
        }
        let true_label: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| validation(path, line, "true_label", format!("'{}' is not a class index", &record[1])))?;
        if true_label >= class_count {
            return Err(validation(
                path,
                line,
                "true_label",
                format!("{true_label} out of range for {class_count} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(class_count);
        for c in 0..class_count {
            let raw = &record[c + 2];
            let p: f64 = raw
                .trim()
                .parse()
                .map_err(|_| validation(path, line, format!("p_{c}"), format!("'{raw}' is not a number")))?;
            probs.push(p);
        }
        let probs = validate_probs(&probs, mode).map_err(|reason| validation(path, line, "p_*", reason))?;
        rows.push(StageRow {
            line,
            sample_id,
            true_label,
            probs,
        });
    }
    Ok((class_count, rows))
}

fn index_rows<'a>(path: &Path, rows: &'a [StageRow]) -> Result<HashMap<&'a str, &'a StageRow>> {
    let mut index = HashMap::with_capacity(rows.len());
    for row in rows {
        if index.insert(row.sample_id.as_str(), row).is_some() {
            return Err(Error::Join {
                path: path.to_path_buf(),
                sample_id: row.sample_id.clone(),
                reason: format!("is duplicated (row {})", row.line),
            });
        }
    }
    Ok(index)
}

/// Joins a stage-1 and a stage-2 file on `sample_id`. Row order follows
/// the stage-1 file.
pub fn load_prediction_set(
    stage1: &Path,
    stage2: &Path,
    mode: Normalization,
    class_names: Option<Vec<String>>,
) -> Result<PredictionSet> {
    let (c1, rows1) = read_stage_file(stage1, mode)?;
    let (c2, rows2) = read_stage_file(stage2, mode)?;
    if c1 != c2 {
        return Err(Error::Consistency(format!(
            "{} has {c1} classes but {} has {c2}",
            stage1.display(),
            stage2.display()
        )));
    }
    index_rows(stage1, &rows1)?;
    let index2 = index_rows(stage2, &rows2)?;
    let ids1: std::collections::HashSet<&str> = rows1.iter().map(|r| r.sample_id.as_str()).collect();
    if let Some(extra) = rows2.iter().find(|r| !ids1.contains(r.sample_id.as_str())) {
        return Err(Error::Join {
            path: stage1.to_path_buf(),
            sample_id: extra.sample_id.clone(),
            reason: format!("is missing (present in {} row {})", stage2.display(), extra.line),
        });
    }

    let mut samples = Vec::with_capacity(rows1.len());
    for r1 in &rows1 {
        let r2 = index2.get(r1.sample_id.as_str()).ok_or_else(|| Error::Join {
            path: stage2.to_path_buf(),
            sample_id: r1.sample_id.clone(),
            reason: format!("is missing (present in {} row {})", stage1.display(), r1.line),
        })?;
        if r1.true_label != r2.true_label {
            return Err(Error::Consistency(format!(
                "sample_id '{}': true_label {} in {} row {} but {} in {} row {}",
                r1.sample_id,
                r1.true_label,
                stage1.display(),
                r1.line,
                r2.true_label,
                stage2.display(),
                r2.line
            )));
        }
        samples.push(SampleRecord::new(
            r1.sample_id.clone(),
            r1.true_label,
            vec![r1.probs.clone(), r2.probs.clone()],
        ));
    }
    PredictionSet::new(c1, samples, class_names, Normalization::Strict)
}

fn stage_file_contents(set: &PredictionSet, stage: usize) -> String {
    let mut out = String::from("sample_id,true_label");
    for c in 0..set.class_count() {
        let _ = write!(out, ",p_{c}");
    }
    out.push('\n');
    for s in set.samples() {
        let _ = write!(out, "{},{}", s.sample_id(), s.true_label());
        for p in s.stage(stage) {
            let _ = write!(out, ",{}", fmt6(*p));
        }
        out.push('\n');
    }
    out
}

pub fn save_prediction_set(set: &PredictionSet, stage1: &Path, stage2: &Path) -> Result<()> {
    write_file(stage1, &stage_file_contents(set, 0))?;
    write_file(stage2, &stage_file_contents(set, 1))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    format_version: u32,
    class_count: usize,
    #[serde(rename = "policy", default)]
    records: Vec<PolicyRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRecord {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    thresholds: Vec<f64>,
}

const POLICY_FORMAT_VERSION: u32 = 1;

/// Policies read from a policy file, one per alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub class_count: usize,
    pub policies: Vec<ThresholdPolicy>,
}

pub fn save_policies(path: &Path, class_count: usize, policies: &[ThresholdPolicy]) -> Result<()> {
    let mut records = Vec::with_capacity(policies.len());
    for p in policies {
        p.check_class_count(class_count)?;
        let (kind, thresholds) = match p.thresholds() {
            Thresholds::Global(th) => ("global", vec![*th]),
            Thresholds::PerClass(v) => ("per_class", v.clone()),
        };
        records.push(PolicyRecord {
            kind: kind.into(),
            alpha: p.alpha(),
            thresholds,
        });
    }
    let file = PolicyFile {
        format_version: POLICY_FORMAT_VERSION,
        class_count,
        records,
    };
    let text = toml::to_string(&file).map_err(|e| parse_error(path, e.to_string()))?;
    write_file(path, &text)
}

pub fn load_policies(path: &Path) -> Result<PolicyBundle> {
    let text = read_to_string(path)?;
    let file: PolicyFile = toml::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    if file.format_version != POLICY_FORMAT_VERSION {
        return Err(parse_error(
            path,
            format!("unsupported format_version {}", file.format_version),
        ));
    }
    if file.records.is_empty() {
        return Err(parse_error(path, "no [[policy]] records"));
    }
    let mut policies = Vec::with_capacity(file.records.len());
    for (i, r) in file.records.into_iter().enumerate() {
        let policy = match r.kind.as_str() {
            "global" if r.thresholds.len() == 1 => ThresholdPolicy::global(r.thresholds[0], r.alpha),
            "global" => Err(Error::invalid("global policy must have exactly one threshold")),
            "per_class" if r.thresholds.len() == file.class_count => ThresholdPolicy::per_class(r.thresholds, r.alpha),
            "per_class" => Err(Error::invalid(format!(
                "per_class policy has {} thresholds, class_count is {}",
                r.thresholds.len(),
                file.class_count
            ))),
            other => Err(Error::invalid(format!("unknown kind '{other}'"))),
        }
        .map_err(|e| parse_error(path, format!("policy record {i}: {e}")))?;
        policies.push(policy);
    }
    Ok(PolicyBundle {
        class_count: file.class_count,
        policies,
    })
}

/// Settings shared by the `optimize`, `evaluate`, `sweep` and `baseline`
/// commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Stage-1 and stage-2 files of the optimization (validation) set.
    #[serde(default)]
    pub stage_files: Vec<PathBuf>,
    /// Stage-1 and stage-2 files of the held-out test set.
    #[serde(default)]
    pub test_stage_files: Vec<PathBuf>,
    pub energy_mj: Vec<f64>,
    #[serde(default = "crate::eval::default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub renormalize: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_quantiles() -> Vec<f64> {
    DEFAULT_QUANTILES.to_vec()
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn new(energy_mj: [f64; 2]) -> Self {
        RunConfig {
            stage_files: Vec::new(),
            test_stage_files: Vec::new(),
            energy_mj: energy_mj.to_vec(),
            alphas: crate::eval::default_alphas(),
            quantiles: default_quantiles(),
            class_names: None,
            renormalize: false,
            seed: default_seed(),
        }
    }

    pub fn normalization(&self) -> Normalization {
        if self.renormalize {
            Normalization::Renormalize
        } else {
            Normalization::Strict
        }
    }

    pub fn cascade(&self, class_count: usize) -> Result<CascadeSpec> {
        let names = ["little", "big"];
        let stages = self
            .energy_mj
            .iter()
            .zip(names)
            .map(|(&e, n)| Stage {
                name: n.into(),
                energy_mj: e,
            })
            .collect();
        CascadeSpec::new(stages, class_count)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |reason: String| Err(parse_error(path, reason));
        if self.energy_mj.len() != 2 {
            return bad(format!("energy_mj must list 2 values, got {}", self.energy_mj.len()));
        }
        if self.energy_mj.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return bad("energy_mj values must be nonnegative".into());
        }
        for (key, files) in [("stage_files", &self.stage_files), ("test_stage_files", &self.test_stage_files)] {
            if !files.is_empty() && files.len() != 2 {
                return bad(format!("{key} must list exactly 2 files, got {}", files.len()));
            }
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("alphas must be nonnegative".into());
        }
        if self.quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("quantiles must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Reads a run config; relative data paths resolve against the config's
/// directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = read_to_string(path)?;
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    cfg.validate(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in cfg.stage_files.iter_mut().chain(cfg.test_stage_files.iter_mut()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

pub fn load_generator_config(path: &Path) -> Result<GeneratorConfig> {
    let text = read_to_string(path)?;
    let cfg: GeneratorConfig = toml::from_str(&text).map_err(|e| parse_error(path, e.to_string()))?;
    cfg.validate().map_err(|e| parse_error(path, e.to_string()))?;
    Ok(cfg)
}

pub fn report_contents(reports: &[(&ThresholdPolicy, EvaluationReport)], class_names: Option<&[String]>) -> String {
    let mut out = String::new();
    for (i, (policy, r)) in reports.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str("[[report]]\n");
        let kind = if policy.is_global() { "global" } else { "per_class" };
        let _ = writeln!(out, "kind = \"{kind}\"");
        if let Some(a) = policy.alpha() {
            let _ = writeln!(out, "alpha = {}", fmt6(a));
        }
        let _ = writeln!(out, "sample_count = {}", r.sample_count);
        let _ = writeln!(out, "accuracy = {}", fmt6(r.accuracy));
        let _ = writeln!(out, "mean_energy_mj = {}", fmt6(r.mean_energy_mj));
        let _ = writeln!(out, "escalation_rate = {}", fmt6(r.escalation_rate));
        let _ = writeln!(out, "stage1_accuracy = {}", fmt6(r.stage1_accuracy));
        let _ = writeln!(out, "stage2_accuracy = {}", fmt6(r.stage2_accuracy));
        for c in &r.per_class {
            out.push_str("\n[[report.class]]\n");
            let _ = writeln!(out, "class_id = {}", c.class_id);
            if let Some(name) = class_names.and_then(|n| n.get(c.class_id)) {
                let _ = writeln!(out, "name = \"{}\"", name.replace('\\', "\\\\").replace('"', "\\\""));
            }
            let _ = writeln!(out, "m_c = {}", c.m_c);
            let _ = writeln!(out, "fp = {}", c.fp);
            let _ = writeln!(out, "escalations = {}", c.escalations);
            let _ = writeln!(out, "th_used = {}", fmt6(c.th_used));
        }
    }
    out
}

const CURVE_HEADER: &str = "alpha,accuracy,mean_energy_mj,escalation_rate";

pub fn curve_contents(curve: &TradeoffCurve) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# mode,{}", curve.mode.as_str());
    for (name, b) in [("m1", &curve.baseline_m1), ("m2", &curve.baseline_m2)] {
        let _ = writeln!(out, "# baseline,{name},{},{}", fmt6(b.accuracy), fmt6(b.energy_mj));
    }
    out.push_str(CURVE_HEADER);
    out.push('\n');
    for p in &curve.points {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt6(p.alpha),
            fmt6(p.accuracy),
            fmt6(p.mean_energy_mj),
            fmt6(p.escalation_rate)
        );
    }
    out
}

/// Reads a curve written by [`curve_contents`]. Points carry no policies.
pub fn load_curve(path: &Path) -> Result<TradeoffCurve> {
    let text = read_to_string(path)?;
    let mut mode = None;
    let (mut m1, mut m2) = (None, None);
    let mut header_seen = false;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let num = |field: &str, raw: &str| -> Result<f64> {
            raw.parse()
                .map_err(|_| validation(path, row, field, format!("'{raw}' is not a number")))
        };
        if let Some(meta) = line.strip_prefix("# ") {
            let parts: Vec<&str> = meta.split(',').collect();
            match parts.as_slice() {
                ["mode", "per_class"] => mode = Some(PolicyMode::PerClass),
                ["mode", "global"] => mode = Some(PolicyMode::Global),
                ["baseline", which, acc, energy] => {
                    let b = Baseline {
                        accuracy: num("accuracy", acc)?,
                        energy_mj: num("energy_mj", energy)?,
                    };
                    match *which {
                        "m1" => m1 = Some(b),
                        "m2" => m2 = Some(b),
                        other => return Err(validation(path, row, "baseline", format!("unknown stage '{other}'"))),
                    }
                }
                _ => return Err(validation(path, row, "#", format!("unrecognized metadata '{meta}'"))),
            }
            continue;
        }
        if !header_seen {
            if line != CURVE_HEADER {
                return Err(validation(path, row, "header", format!("expected '{CURVE_HEADER}'")));
            }
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(validation(path, row, "*", format!("expected 4 columns, found {}", cols.len())));
        }
        points.push(TradeoffPoint {
            alpha: num("alpha", cols[0])?,
            policy: None,
            accuracy: num("accuracy", cols[1])?,
            mean_energy_mj: num("mean_energy_mj", cols[2])?,
            escalation_rate: num("escalation_rate", cols[3])?,
        });
    }
    let missing = |what: &str| parse_error(path, format!("missing '# {what}' line"));
    Ok(TradeoffCurve {
        mode: mode.ok_or_else(|| missing("mode"))?,
        baseline_m1: m1.ok_or_else(|| missing("baseline,m1"))?,
        baseline_m2: m2.ok_or_else(|| missing("baseline,m2"))?,
        points,
    })
}

pub fn comparison_contents(rows: &[ComparisonRow]) -> String {
    let opt = |v: Option<f64>, none: &str| v.map_or_else(|| none.to_string(), fmt6);
    let mut out = String::from("quantile,target_accuracy,energy_per_class_mj,energy_global_mj,relative_difference\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt6(r.quantile),
            fmt6(r.target_accuracy),
            opt(r.energy_per_class, "unreachable"),
            opt(r.energy_global, "unreachable"),
            opt(r.relative_difference, "undefined")
        );
    }
    out
}

pub fn histogram_contents(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,correct,incorrect\n");
    for (i, (c, w)) in h.correct_counts.iter().zip(&h.incorrect_counts).enumerate() {
        let _ = writeln!(out, "{},{},{c},{w}", fmt6(h.bin_edges[i]), fmt6(h.bin_edges[i + 1]));
    }
    out
}

pub fn objective_curve_contents(points: &[CurvePoint]) -> String {
    let mut out = String::from("th,fp,escalations,total,is_argmin\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt6(p.th),
            p.fp,
            p.escalations,
            fmt6(p.total),
            u8::from(p.is_argmin)
        );
    }
    out
}
