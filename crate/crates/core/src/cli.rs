//! Command-line surface. Each subcommand maps onto one library operation.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cascade::{Normalization, PredictionSet, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::eval::{
    compare_policies, evaluate_policy, max_accuracy_summary, sm_histogram, sweep_alpha, PolicyMode,
};
use crate::io::{self, RunConfig};
use crate::optimizer::{build_class_slices, objective_curve, optimize_class_thresholds, optimize_global_threshold};
use crate::synth::{self, GeneratorConfig};

#[derive(Debug, Parser)]
#[command(name = "margin-cascade", version, about = "Per-class score-margin thresholds for two-stage classifier cascades")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    PerClass,
    Global,
}

impl From<ModeArg> for PolicyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerClass => PolicyMode::PerClass,
            ModeArg::Global => PolicyMode::Global,
        }
    }
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Stage-1 (little model) prediction file.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Stage-2 (big model) prediction file.
    #[arg(long)]
    pub stage2: PathBuf,
    /// Divide probability rows by their sum instead of rejecting them.
    #[arg(long)]
    pub renormalize: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stage-1 file, overriding the config's first `stage_files` entry.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Stage-2 file, overriding the config's second `stage_files` entry.
    #[arg(long)]
    pub stage2: Option<PathBuf>,
    /// Per-inference energy of the two stages in mJ, e.g. `1,10`.
    #[arg(long, value_delimiter = ',')]
    pub energy: Option<Vec<f64>>,
    #[arg(long)]
    pub renormalize: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub test_stage1: Option<PathBuf>,
    #[arg(long)]
    pub test_stage2: Option<PathBuf>,
    /// Alpha grid; defaults to the config's `alphas`.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Trade-off curve output (CSV).
    #[arg(long)]
    pub out_curve: PathBuf,
    /// Policy file with one record per alpha.
    #[arg(long)]
    pub out_policies: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize thresholds on a validation set and write a policy file.
    Optimize {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long, value_enum, default_value = "per-class")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every policy in a policy file on a test set.
    Evaluate {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class alpha sweep: optimize on validation, evaluate on test.
    Sweep(SweepArgs),
    /// Single global threshold alpha sweep.
    Baseline(SweepArgs),
    /// Energy at normalized accuracy-gain points of two curves.
    Compare {
        #[arg(long)]
        per_class: PathBuf,
        #[arg(long)]
        global: PathBuf,
        #[arg(long, value_delimiter = ',')]
        quantiles: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage-1 margin histogram of one predicted class.
    Histogram {
        #[command(flatten)]
        stages: StageArgs,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Objective value at every candidate threshold of one class.
    Curve {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic prediction set as two stage files.
    Generate {
        /// Generator configuration (TOML); built-in five-class profile if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        /// Output directory for stage1.csv and stage2.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep a seeded fraction of each true class.
    Resample {
        #[command(flatten)]
        stages: StageArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified validation/test split.
    Split {
        #[command(flatten)]
        stages: StageArgs,
        #[arg(long, default_value_t = 0.5)]
        fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn normalization(renormalize: bool) -> Normalization {
    if renormalize {
        Normalization::Renormalize
    } else {
        Normalization::Strict
    }
}

/// Prefixes module-level input errors with the files they concern.
fn in_context<T>(res: Result<T>, context: impl FnOnce() -> String) -> Result<T> {
    res.map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", context())),
        other => other,
    })
}

fn emit(out: Option<&Path>, contents: &str) -> Result<()> {
    match out {
        Some(path) => io::write_file(path, contents),
        None => std::io::stdout()
            .write_all(contents.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

struct Resolved {
    config: RunConfig,
    config_path: Option<PathBuf>,
}

impl Resolved {
    fn new(args: &ConfigArgs) -> Result<Self> {
        let mut config = match &args.config {
            Some(path) => io::load_run_config(path)?,
            None => {
                let mut c = RunConfig::new([0.0, 0.0]);
                c.energy_mj.clear();
                c
            }
        };
        if let Some(e) = &args.energy {
            config.energy_mj = e.clone();
        }
        if args.renormalize {
            config.renormalize = true;
        }
        Ok(Resolved {
            config,
            config_path: args.config.clone(),
        })
    }

    fn origin(&self) -> String {
        self.config_path
            .as_ref()
            .map_or_else(|| "command line".to_string(), |p| p.display().to_string())
    }

    fn pick(&self, flag: &Option<PathBuf>, files: &[PathBuf], idx: usize, key: &str, option: &str) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| files.get(idx).cloned())
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{}: no {key} entry {idx} and no --{option} given",
                    self.origin()
                ))
            })
    }

    fn load(&self, s1: &Option<PathBuf>, s2: &Option<PathBuf>, key: &str, prefix: &str) -> Result<(PredictionSet, PathBuf)> {
        let files = if key == "test_stage_files" && self.config.test_stage_files.is_empty() {
            &self.config.stage_files
        } else if key == "test_stage_files" {
            &self.config.test_stage_files
        } else {
            &self.config.stage_files
        };
        let p1 = self.pick(s1, files, 0, key, &format!("{prefix}stage1"))?;
        let p2 = self.pick(s2, files, 1, key, &format!("{prefix}stage2"))?;
        let set = io::load_prediction_set(&p1, &p2, self.config.normalization(), self.config.class_names.clone())?;
        Ok((set, p1))
    }

    fn cascade(&self, class_count: usize) -> Result<crate::cascade::CascadeSpec> {
        if self.config.energy_mj.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "{}: energy_mj needs 2 values (config key energy_mj or --energy)",
                self.origin()
            )));
        }
        in_context(self.config.cascade(class_count), || self.origin())
    }

    fn alphas(&self, flag: &[f64]) -> Vec<f64> {
        if flag.is_empty() {
            self.config.alphas.clone()
        } else {
            flag.to_vec()
        }
    }
}

fn optimize_all(set: &PredictionSet, alphas: &[f64], mode: PolicyMode) -> Result<Vec<ThresholdPolicy>> {
    alphas
        .iter()
        .map(|&a| match mode {
            PolicyMode::PerClass => Ok(optimize_class_thresholds(set, a)?.policy()),
            PolicyMode::Global => optimize_global_threshold(set, a),
        })
        .collect()
}

fn run_sweep(args: &SweepArgs, mode: PolicyMode) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    let (val, val_path) = r.load(&args.common.stage1, &args.common.stage2, "stage_files", "")?;
    let (test, test_path) = r.load(&args.test_stage1, &args.test_stage2, "test_stage_files", "test-")?;
    if val.class_count() != test.class_count() {
        return Err(Error::Consistency(format!(
            "{} has {} classes but {} has {}",
            val_path.display(),
            val.class_count(),
            test_path.display(),
            test.class_count()
        )));
    }
    let cascade = r.cascade(val.class_count())?;
    let alphas = r.alphas(&args.alpha);
    let curve = in_context(sweep_alpha(&val, &test, &cascade, &alphas, mode), || {
        format!("{} / {}", val_path.display(), test_path.display())
    })?;
    io::write_file(&args.out_curve, &io::curve_contents(&curve))?;
    let policies: Vec<ThresholdPolicy> = curve.points.iter().filter_map(|p| p.policy.clone()).collect();
    io::save_policies(&args.out_policies, val.class_count(), &policies)?;

    let s = max_accuracy_summary(&curve)?;
    println!(
        "max_accuracy,alpha={},accuracy={},mean_energy_mj={},delta_accuracy_vs_m2={},delta_energy_vs_m2_mj={}",
        io::fmt6(s.alpha),
        io::fmt6(s.accuracy),
        io::fmt6(s.mean_energy_mj),
        io::fmt6(s.delta_vs_m2_accuracy),
        io::fmt6(s.delta_vs_m2_energy)
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Optimize { common, alpha, mode, out } => {
            let r = Resolved::new(&common)?;
            let (set, path) = r.load(&common.stage1, &common.stage2, "stage_files", "")?;
            let alphas = r.alphas(&alpha);
            if alphas.is_empty() {
                return Err(Error::InvalidInput(format!("{}: alpha list is empty", r.origin())));
            }
            let policies = in_context(optimize_all(&set, &alphas, mode.into()), || path.display().to_string())?;
            io::save_policies(&out, set.class_count(), &policies)
        }
        Command::Evaluate { common, policy, out } => {
            let r = Resolved::new(&common)?;
            let bundle = io::load_policies(&policy)?;
            let (set, path) = r.load(&common.stage1, &common.stage2, "test_stage_files", "")?;
            if bundle.class_count != set.class_count() {
                return Err(Error::Consistency(format!(
                    "{}: policy class_count {} but {} has {} classes",
                    policy.display(),
                    bundle.class_count,
                    path.display(),
                    set.class_count()
                )));
            }
            let cascade = r.cascade(set.class_count())?;
            let reports = bundle
                .policies
                .iter()
                .map(|p| Ok((p, evaluate_policy(&set, p, &cascade)?)))
                .collect::<Result<Vec<_>>>();
            let reports = in_context(reports, || path.display().to_string())?;
            emit(out.as_deref(), &io::report_contents(&reports, set.class_names()))
        }
        Command::Sweep(args) => run_sweep(&args, PolicyMode::PerClass),
        Command::Baseline(args) => run_sweep(&args, PolicyMode::Global),
        Command::Compare { per_class, global, quantiles, out } => {
            let a = io::load_curve(&per_class)?;
            let b = io::load_curve(&global)?;
            let quantiles = if quantiles.is_empty() {
                crate::eval::DEFAULT_QUANTILES.to_vec()
            } else {
                quantiles
            };
            if let Some(q) = quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
                return Err(Error::InvalidInput(format!("--quantiles: {q} outside [0, 1]")));
            }
            let rows = in_context(compare_policies(&a, &b, &quantiles), || {
                format!("{} vs {}", per_class.display(), global.display())
            })?;
            emit(out.as_deref(), &io::comparison_contents(&rows))
        }
        Command::Histogram { stages, class_id, bins, out } => {
            let set = io::load_prediction_set(&stages.stage1, &stages.stage2, normalization(stages.renormalize), None)?;
            let h = in_context(sm_histogram(&set, class_id, bins), || {
                format!("{} (--class/--bins)", stages.stage1.display())
            })?;
            emit(out.as_deref(), &io::histogram_contents(&h))
        }
        Command::Curve { common, class_id, alpha, out } => {
            let r = Resolved::new(&common)?;
            let (set, path) = r.load(&common.stage1, &common.stage2, "stage_files", "")?;
            if class_id >= set.class_count() {
                return Err(Error::InvalidInput(format!(
                    "{}: --class {class_id} out of range for {} classes",
                    path.display(),
                    set.class_count()
                )));
            }
            in_context(crate::optimizer::check_alpha(alpha), || "--alpha".to_string())?;
            let slice = build_class_slices(&set)?.swap_remove(class_id);
            emit(out.as_deref(), &io::objective_curve_contents(&objective_curve(&slice, alpha)))
        }
        Command::Generate { config, seed, samples, out } => {
            let mut cfg = match &config {
                Some(path) => io::load_generator_config(path)?,
                None => GeneratorConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = samples {
                cfg.sample_count = n;
            }
            let set = synth::generate(&cfg)?;
            io::save_prediction_set(&set, &out.join("stage1.csv"), &out.join("stage2.csv"))
        }
        Command::Resample { stages, fractions, seed, out } => {
            let set = io::load_prediction_set(&stages.stage1, &stages.stage2, normalization(stages.renormalize), None)?;
            let kept = in_context(synth::resample_by_class(&set, &fractions, seed), || "--fractions".to_string())?;
            io::save_prediction_set(&kept, &out.join("stage1.csv"), &out.join("stage2.csv"))
        }
        Command::Split { stages, fraction, seed, out } => {
            let set = io::load_prediction_set(&stages.stage1, &stages.stage2, normalization(stages.renormalize), None)?;
            let (val, test) = in_context(synth::split(&set, fraction, seed), || {
                format!("{} (--fraction)", stages.stage1.display())
            })?;
            io::save_prediction_set(&val, &out.join("val_stage1.csv"), &out.join("val_stage2.csv"))?;
            io::save_prediction_set(&test, &out.join("test_stage1.csv"), &out.join("test_stage2.csv"))
        }
    }
}

/// Runs the CLI and returns the process exit code. Errors are reported as a
/// single `error[<Kind>]: <message>` line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            1
        }
    }
}
