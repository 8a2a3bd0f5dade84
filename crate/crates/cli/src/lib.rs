//! `dfn`: describe, analyze, gradient-check, train and evaluate fused nets.
//!
//! Every invocation resolves its flags into a [`Resolved`] configuration,
//! echoes it as JSON on stderr (and to `config.json` under `--out`), and can
//! be replayed with `--config`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use deepfuse::analysis::{analyze, describe, render_analysis};
use deepfuse::data::{load_cifar, synthetic_dataset_sized, CifarVariant, Dataset, Split};
use deepfuse::fusenet::FusedNet;
use deepfuse::netspec::{load_spec, FusedNetSpec};
use deepfuse::tensor::{Precision, Scalar};
use deepfuse::train::{
    evaluate, grad_check_spec, load_checkpoint, save_checkpoint, shrunken, write_metrics_csv,
    GradCheckConfig, GradCheckReport, TrainConfig, TrainMode, TrainState,
};
use deepfuse::Error;
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    /// Layer, block and parameter tables.
    Describe,
    /// Path metrics, grouping count and receptive fields as JSON.
    Analyze,
    /// Finite-difference gradient check in double precision.
    Gradcheck,
    /// Train and write metrics and a checkpoint.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
}

#[derive(Debug, Parser)]
#[command(name = "dfn", version, about = "Deeply-fused nets: build, analyze, train")]
struct Cli {
    verb: Verb,
    /// Builtin name (e.g. N13N33, N1, resnet19, tiny) or a spec JSON file.
    #[arg(long)]
    spec: Option<String>,
    /// `synthetic` or a directory holding the CIFAR binary files.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    variant: Option<CifarVariant>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports, metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep only the first N training images.
    #[arg(long)]
    subset: Option<usize>,
    /// Keep only the first N test images.
    #[arg(long)]
    test_subset: Option<usize>,
    /// Multiply every channel width by this factor.
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Gradient-check tolerance on the relative error.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Widest stage of the shrunken net used by the gradient check.
    #[arg(long)]
    max_width: Option<usize>,
    /// Disable crop and flip augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Checkpoint to write (train) or read (eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Replay a resolved configuration; explicit flags still override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "single" | "f32" => Ok(Precision::Single),
        "double" | "f64" => Ok(Precision::Double),
        _ => Err(format!("unknown precision {s:?} (expected single or double)")),
    }
}

/// Gradient-check settings of a resolved invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub modes: Vec<TrainMode>,
    pub h: f64,
    pub tolerance: f64,
    pub coords_per_kind: usize,
    pub max_width: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        let d = GradCheckConfig::default();
        GradCheckSettings {
            modes: Vec::new(),
            h: d.h,
            tolerance: d.tolerance,
            coords_per_kind: d.coords_per_kind,
            max_width: 8,
        }
    }
}

/// Everything a command depends on, defaults filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Resolved {
    pub verb: Verb,
    pub spec: String,
    pub variant: Option<CifarVariant>,
    pub width_scale: f64,
    pub dataset: String,
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Class overlap of the synthetic dataset, 0 = separable.
    pub synthetic_difficulty: f64,
    pub train: TrainConfig,
    pub gradcheck: GradCheckSettings,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Resolved {
    fn default() -> Self {
        Resolved {
            verb: Verb::Describe,
            spec: String::new(),
            variant: None,
            width_scale: 1.0,
            dataset: "synthetic".into(),
            subset: None,
            test_subset: None,
            synthetic_difficulty: 0.5,
            train: TrainConfig::default(),
            gradcheck: GradCheckSettings::default(),
            out: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Validation(format!("{}: {e}", path.display()))
}

fn resolve(cli: Cli) -> Result<Resolved, Failure> {
    let mut r = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str::<Resolved>(&text)
                .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
        }
        None => Resolved::default(),
    };
    r.verb = cli.verb;
    if let Some(v) = cli.spec {
        r.spec = v;
    }
    if r.spec.is_empty() {
        return Err(Failure::Usage("--spec is required (or --config with a spec)".into()));
    }
    if cli.variant.is_some() {
        r.variant = cli.variant;
    }
    if let Some(v) = cli.width_scale {
        r.width_scale = v;
    }
    if let Some(v) = cli.dataset {
        r.dataset = v;
    }
    if cli.subset.is_some() {
        r.subset = cli.subset;
    }
    if cli.test_subset.is_some() {
        r.test_subset = cli.test_subset;
    }
    let t = &mut r.train;
    if let Some(v) = cli.mode {
        t.mode = v;
    }
    if let Some(v) = cli.epochs {
        t.epochs = v;
    }
    if let Some(v) = cli.batch {
        t.batch = v;
    }
    if let Some(v) = cli.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = cli.wd {
        t.weight_decay = v;
    }
    if let Some(v) = cli.seed {
        t.seed = v;
    }
    if let Some(v) = cli.precision {
        t.precision = v;
    }
    if cli.no_augment {
        t.augment = false;
    }
    if let Some(v) = cli.tolerance {
        r.gradcheck.tolerance = v;
    }
    if let Some(v) = cli.max_width {
        r.gradcheck.max_width = v;
    }
    if let Some(m) = cli.mode {
        r.gradcheck.modes = vec![m];
    }
    if cli.out.is_some() {
        r.out = cli.out;
    }
    if cli.checkpoint.is_some() {
        r.checkpoint = cli.checkpoint;
    }
    if !(r.width_scale > 0.0 && r.width_scale.is_finite()) {
        return Err(Failure::Usage(format!("--width-scale must be positive, got {}", r.width_scale)));
    }
    r.train.validate()?;
    Ok(r)
}

fn build_spec(r: &Resolved) -> Result<FusedNetSpec, Failure> {
    let mut spec = load_spec(&r.spec)?;
    if let Some(v) = r.variant {
        spec = spec.with_classes(v.classes());
    }
    if r.width_scale != 1.0 {
        spec = spec.scale_width(r.width_scale).map_err(Failure::Validation)?;
    }
    let diags = deepfuse::netspec::validate(&spec);
    if !diags.is_empty() {
        return Err(Error::Validation(diags).into());
    }
    Ok(spec)
}

/// Suite run when no mode is given: every topology the spec supports.
fn default_modes(spec: &FusedNetSpec) -> Vec<TrainMode> {
    let mut modes = vec![TrainMode::Deep];
    if spec.member_count() > 1 {
        modes.push(TrainMode::Shallow);
        if spec.member_count() == 2 {
            modes.push(TrainMode::Unidirectional);
        }
        modes.push(TrainMode::DecisionJoint);
    }
    modes.push(TrainMode::DsnAux);
    modes
}

fn load_split(r: &Resolved, spec: &FusedNetSpec, split: Split) -> Result<Dataset, Failure> {
    let limit = match split {
        Split::Train => r.subset,
        Split::Test => r.test_subset,
    };
    let data = if r.dataset == "synthetic" {
        let n = match split {
            Split::Train => r.subset.unwrap_or(500),
            Split::Test => r.test_subset.unwrap_or(r.subset.unwrap_or(500) / 5).max(1),
        };
        let seed = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let side = spec.input.height;
        synthetic_dataset_sized(seed, n, spec.num_classes, r.synthetic_difficulty, side)
    } else {
        let variant = r.variant.unwrap_or(CifarVariant::C10);
        load_cifar(Path::new(&r.dataset), variant, split)?
    };
    Ok(match limit {
        Some(n) => data.truncated(n),
        None => data,
    })
}

fn out_path(r: &Resolved, name: &str) -> Option<PathBuf> {
    r.out.as_ref().map(|d| d.join(name))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| io_failure(path, e))
}

fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("reports always serialize")
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn say(&mut self, text: &str) {
        let _ = writeln!(self.out, "{text}");
    }

    fn note(&mut self, text: &str) {
        let _ = writeln!(self.err, "{text}");
    }
}

fn execute(r: &Resolved, io: &mut Io) -> Result<(), Failure> {
    let spec = build_spec(r)?;
    match r.verb {
        Verb::Describe => {
            let text = describe(&spec)?;
            io.say(text.trim_end());
            if let Some(path) = out_path(r, "describe.txt") {
                write_file(&path, &text)?;
            }
        }
        Verb::Analyze => {
            let report = analyze(&spec)?;
            let json = to_json(&report);
            io.say(&json);
            if let Some(path) = out_path(r, "analysis.json") {
                write_file(&path, &json)?;
            }
            if let Some(path) = out_path(r, "analysis.txt") {
                write_file(&path, &render_analysis(&report))?;
            }
        }
        Verb::Gradcheck => gradcheck(r, &spec, io)?,
        Verb::Train => match r.train.precision {
            Precision::Single => run_train::<f32>(r, &spec, io)?,
            Precision::Double => run_train::<f64>(r, &spec, io)?,
        },
        Verb::Eval => match r.train.precision {
            Precision::Single => run_eval::<f32>(r, &spec, io)?,
            Precision::Double => run_eval::<f64>(r, &spec, io)?,
        },
    }
    Ok(())
}

fn gradcheck(r: &Resolved, spec: &FusedNetSpec, io: &mut Io) -> Result<(), Failure> {
    let small = shrunken(spec, r.gradcheck.max_width);
    let modes = if r.gradcheck.modes.is_empty() {
        default_modes(&small)
    } else {
        r.gradcheck.modes.clone()
    };
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for mode in modes {
        let cfg = GradCheckConfig {
            mode,
            h: r.gradcheck.h,
            tolerance: r.gradcheck.tolerance,
            coords_per_kind: r.gradcheck.coords_per_kind,
            seed: r.train.seed,
            aux_weight: r.train.aux_weight,
            ..GradCheckConfig::default()
        };
        let report = grad_check_spec(&small, &cfg)?;
        io.note(&format!(
            "{:<18} max rel error {:.3e}  {}",
            mode.as_str(),
            report.max_rel_error,
            if report.passed { "ok" } else { "FAILED" }
        ));
        reports.push(report);
    }
    let json = to_json(&reports);
    io.say(&json);
    if let Some(path) = out_path(r, "gradcheck.json") {
        write_file(&path, &json)?;
    }
    match reports.iter().find(|rep| !rep.passed) {
        Some(bad) => Err(Failure::Numeric(format!(
            "gradient check failed in {} mode: max relative error {:.3e} exceeds {:.1e}",
            bad.mode, bad.max_rel_error, bad.tolerance
        ))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    spec: &'a str,
    params: usize,
    epochs: usize,
    final_metrics: Option<&'a deepfuse::train::EpochMetrics>,
    checkpoint: Option<&'a Path>,
}

fn run_train<T: Scalar>(r: &Resolved, spec: &FusedNetSpec, io: &mut Io) -> Result<(), Failure> {
    let train = load_split(r, spec, Split::Train)?;
    let test = load_split(r, spec, Split::Test)?;
    let mut state = TrainState::<T>::new(spec, r.train.clone())?;
    io.note(&format!(
        "training {} ({} params) on {} images, testing on {}",
        spec.name,
        state.net.param_count(),
        train.len(),
        test.len()
    ));
    let result = state.fit_with(&train, Some(&test), |m| {
        let _ = writeln!(
            io.err,
            "epoch {:>4}  lr {:.2e}  loss {:.4}  train err {:.4}  test err {}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_err,
            m.test_err.map_or("-".into(), |e| format!("{e:.4}"))
        );
    });
    let failure = result.err();
    if let Some(path) = out_path(r, "metrics.csv") {
        write_metrics_csv(&path, &state.log)?;
    }
    let ck = r.checkpoint.clone().or_else(|| out_path(r, "checkpoint.dfn"));
    if let Some(path) = &ck {
        save_checkpoint(path, &state.net, Some(&state.velocity))?;
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    let summary = TrainSummary {
        spec: &spec.name,
        params: state.net.param_count(),
        epochs: state.log.len(),
        final_metrics: state.log.last(),
        checkpoint: ck.as_deref(),
    };
    let json = to_json(&summary);
    io.say(&json);
    if let Some(path) = out_path(r, "train.json") {
        write_file(&path, &json)?;
    }
    Ok(())
}

fn run_eval<T: Scalar>(r: &Resolved, spec: &FusedNetSpec, io: &mut Io) -> Result<(), Failure> {
    let path = r
        .checkpoint
        .clone()
        .or_else(|| out_path(r, "checkpoint.dfn"))
        .ok_or_else(|| Failure::Usage("eval needs --checkpoint (or --out holding checkpoint.dfn)".into()))?;
    let mut net = FusedNet::<T>::build_with(spec, r.train.mode.build_options(), r.train.seed)?;
    load_checkpoint(&path, &mut net)?;
    let test = load_split(r, spec, Split::Test)?;
    let report = evaluate(&mut net, &test, r.train.mode, r.train.augmentation.gcn)?;
    if !report.loss.is_finite() {
        return Err(Failure::Numeric(format!("evaluation loss is {}", report.loss)));
    }
    let json = to_json(&report);
    io.say(&json);
    if let Some(p) = out_path(r, "eval.json") {
        write_file(&p, &json)?;
    }
    Ok(())
}

/// Run one command with explicit output streams; returns the exit code.
pub fn run_with<I, A>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let mut io = Io { out, err };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    io.say(text.trim_end());
                    EXIT_OK
                }
                _ => {
                    io.note(text.trim_end());
                    EXIT_USAGE
                }
            };
        }
    };
    let outcome = resolve(cli).and_then(|r| {
        io.note(&format!("resolved config: {}", serde_json::to_string(&r).expect("serializable")));
        if let Some(dir) = &r.out {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            write_file(&dir.join("config.json"), &to_json(&r))?;
        }
        execute(&r, &mut io)
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            io.note(&format!("error: {m}\n\nUsage: dfn <VERB> --spec <SPEC> [OPTIONS] (see dfn --help)"));
            EXIT_USAGE
        }
        Err(Failure::Validation(m)) => {
            io.note(&format!("error: {m}"));
            EXIT_VALIDATION
        }
        Err(Failure::Numeric(m)) => {
            io.note(&format!("error: {m}"));
            EXIT_NUMERIC
        }
    }
}

/// Run one command against the process's stdout and stderr.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let (stdout, stderr) = (std::io::stdout(), std::io::stderr());
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
