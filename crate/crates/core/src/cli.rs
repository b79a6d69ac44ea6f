//! The `rtk` command line.
//!
//! ```text
//! rtk train-teacher [--config FILE] [flags]
//! rtk distill --teacher CKPT [--config FILE] [flags]
//! rtk baseline --mode scratch|kd_only [--teacher CKPT] [flags]
//! rtk eval --checkpoint CKPT [--config FILE]
//! rtk export-attn RUN_DIR --epoch E [--out FILE]
//! ```
//!
//! Training commands create `<runs root>/<timestamp>-<mode>-seed<seed>`
//! (root: `--runs-dir`, else `RTK_RUNS_DIR`, else `runs`) unless
//! `--run-dir` is given, and print a JSON record on stdout. Failures print
//! `{"error": {"kind": ..., "message": ...}}` on stderr and exit with 2 for
//! usage and configuration errors, 1 otherwise.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::attention::AttentionExport;
use crate::error::{Error, Result};
use crate::harness::config::{merge, set_path, ExperimentConfig, TrainMode};
use crate::harness::train::{ATTENTION_DIR, CHECKPOINT_FILE};
use crate::harness::{evaluate, train_student, train_teacher, RunArtifacts};
use crate::models::Model;

/// Environment variable overriding the runs root.
pub const RUNS_DIR_ENV: &str = "RTK_RUNS_DIR";
/// Resolved configuration written into every run directory.
pub const RUN_CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "rtk", version, about = "Feature distillation with representative teacher keys")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher network with cross-entropy.
    TrainTeacher(TeacherCmd),
    /// Train the student with soft targets and the retained-feature loss.
    Distill(DistillCmd),
    /// Train a comparison student (`scratch` or `kd_only`).
    Baseline(BaselineCmd),
    /// Report accuracy and ROC AUC of a checkpoint on the test split.
    Eval(EvalCmd),
    /// Print one epoch's attention matrix as CSV.
    ExportAttn(ExportCmd),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `paper`, `desk` or `synthetic`; overrides the file's profile.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Comma-separated epochs at which the rate drops, e.g. `150,180,210`.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub lr_drops: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_drop_factor: Option<f64>,
    /// Random crop and flip augmentation.
    #[arg(long)]
    pub augment: Option<bool>,
    /// CIFAR-10 binary directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Any config key as `dotted.path=<TOML value>`, e.g. `train.rtk.dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Exact run directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Parent of generated run directories.
    #[arg(long)]
    pub runs_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct KdArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct RtkArgs {
    #[arg(long)]
    pub beta: Option<f64>,
    /// Top-k count for impact scores.
    #[arg(long)]
    pub k: Option<usize>,
    /// Selection threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub renormalize: Option<bool>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    /// `epoch` or `step`.
    #[arg(long)]
    pub cadence: Option<String>,
}

#[derive(Debug, Args)]
pub struct TeacherCmd {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct DistillCmd {
    /// Teacher checkpoint or teacher run directory.
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub kd: KdArgs,
    #[command(flatten)]
    pub rtk: RtkArgs,
}

#[derive(Debug, Args)]
pub struct BaselineCmd {
    /// `scratch` or `kd_only`.
    #[arg(long)]
    pub mode: String,
    /// Teacher checkpoint or run directory (`kd_only` only).
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub kd: KdArgs,
    #[command(flatten)]
    pub rtk: RtkArgs,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Checkpoint or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportCmd {
    pub run_dir: PathBuf,
    #[arg(long)]
    pub epoch: usize,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            return report(&Error::Usage(msg.trim_start_matches("error: ").trim_end().to_string()));
        }
    };
    let written = execute(cli.command).and_then(|out| {
        let mut stdout = std::io::stdout();
        match out {
            Output::Record(r) => writeln!(stdout, "{}", serde_json::to_string_pretty(&r).expect("record serializes")),
            Output::Raw(bytes) => stdout.write_all(&bytes),
        }
        .map_err(|e| Error::io("<stdout>", e))
    });
    match written {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

/// Exit code for an error: 2 for usage and configuration problems.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        _ => 1,
    }
}

fn report(e: &Error) -> i32 {
    let record = json!({"error": {"kind": e.kind(), "message": e.to_string()}});
    let _ = writeln!(std::io::stderr(), "{record}");
    exit_code(e)
}

/// What a command prints on success.
enum Output {
    Record(serde_json::Value),
    Raw(Vec<u8>),
}

fn execute(cmd: Command) -> Result<Output> {
    Ok(match cmd {
        Command::TrainTeacher(c) => {
            let cfg = resolve(&c.run, TrainMode::Teacher, &KdArgs::default(), &RtkArgs::default())?;
            let (train, test) = cfg.data.load()?;
            let arch = cfg.teacher.backbone(&cfg.data)?;
            let dir = prepare_run_dir(&c.run, &cfg)?;
            let art = train_teacher(&cfg.train, &arch, &train, &test, &dir)?;
            Output::Record(run_record(&art))
        }
        Command::Distill(c) => {
            let cfg = resolve(&c.run, TrainMode::Rtk, &c.kd, &c.rtk)?;
            Output::Record(student_run(&c.run, &cfg, Some(&c.teacher))?)
        }
        Command::Baseline(c) => {
            let mode = match c.mode.as_str() {
                "scratch" => TrainMode::Scratch,
                "kd_only" => TrainMode::KdOnly,
                other => {
                    return Err(Error::Usage(format!(
                        "baseline mode must be scratch or kd_only, got `{other}`"
                    )))
                }
            };
            reject_inapplicable(mode, &c.kd, &c.rtk, c.teacher.is_some())?;
            let cfg = resolve(&c.run, mode, &c.kd, &c.rtk)?;
            Output::Record(student_run(&c.run, &cfg, c.teacher.as_deref())?)
        }
        Command::Eval(c) => {
            let path = checkpoint_path(&c.checkpoint);
            let model = Model::<f32>::load(&path)?;
            let mut flags = set_overrides(&c.set)?;
            if let Some(p) = &c.profile {
                flags.insert("profile".into(), toml::Value::String(p.clone()));
            }
            if let Some(d) = &c.data_dir {
                set_path(&mut flags, "data.dir", toml::Value::String(d.display().to_string()));
            }
            let run_cfg = c.checkpoint.join(RUN_CONFIG_FILE);
            let cfg = match (&c.config, c.checkpoint.is_dir() && run_cfg.exists()) {
                (Some(p), _) => ExperimentConfig::load(p, &flags)?,
                (None, true) => ExperimentConfig::load(&run_cfg, &flags)?,
                (None, false) => ExperimentConfig::from_overrides(&flags)?,
            };
            let (_, test) = cfg.data.load()?;
            let eval = evaluate(&model, &test, cfg.train.eval_batch_size)?;
            let auc = eval.roc_auc()?;
            Output::Record(json!({
                "checkpoint": path,
                "samples": test.len(),
                "accuracy": eval.accuracy(),
                "micro_auc": auc.micro,
                "macro_auc": auc.macro_avg,
                "per_class_auc": auc.per_class,
            }))
        }
        Command::ExportAttn(c) => {
            let export = export_attention(&c.run_dir, c.epoch)?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            for row in &export.matrix {
                w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            match &c.out {
                Some(p) => {
                    std::fs::write(p, &bytes).map_err(|e| Error::io(p, e))?;
                    Output::Record(json!({"epoch": c.epoch, "rows": export.n_s, "columns": export.n_t, "out": p}))
                }
                None => Output::Raw(bytes),
            }
        }
    })
}

/// Reads an epoch's export and checks its shape against the run's tap
/// configuration.
pub fn export_attention(run_dir: &Path, epoch: usize) -> Result<AttentionExport> {
    let cfg = ExperimentConfig::load(&run_dir.join(RUN_CONFIG_FILE), &toml::Table::new())?;
    let n_t = cfg.teacher.backbone(&cfg.data)?.tap_points.len();
    let n_s = cfg.student.backbone(&cfg.data)?.tap_points.len();
    let dir = run_dir.join(ATTENTION_DIR);
    if !AttentionExport::json_path(&dir, epoch).exists() {
        return Err(Error::Usage(format!(
            "no attention export for epoch {epoch} in {}",
            run_dir.display()
        )));
    }
    let export = AttentionExport::read(&dir, epoch)?;
    if (export.n_s, export.n_t) != (n_s, n_t) {
        return Err(Error::format(
            AttentionExport::csv_path(&dir, epoch),
            format!(
                "matrix is {}x{} but the run taps {n_s} student and {n_t} teacher features",
                export.n_s, export.n_t
            ),
        ));
    }
    Ok(export)
}

fn reject_inapplicable(mode: TrainMode, kd: &KdArgs, rtk: &RtkArgs, teacher: bool) -> Result<()> {
    let mut bad = Vec::new();
    if mode == TrainMode::Scratch {
        for (flag, set) in [
            ("--alpha", kd.alpha.is_some()),
            ("--temperature", kd.temperature.is_some()),
            ("--teacher", teacher),
        ] {
            if set {
                bad.push(flag);
            }
        }
    }
    for (flag, set) in [
        ("--beta", rtk.beta.is_some()),
        ("--k", rtk.k.is_some()),
        ("--tau", rtk.tau.is_some()),
        ("--renormalize", rtk.renormalize.is_some()),
        ("--attention-dim", rtk.attention_dim.is_some()),
        ("--cadence", rtk.cadence.is_some()),
    ] {
        if set {
            bad.push(flag);
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{} not applicable to baseline mode {}",
            bad.join(", "),
            mode.name()
        )))
    }
}

fn set_overrides(sets: &[String]) -> Result<toml::Table> {
    let mut table = toml::Table::new();
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        let parsed: toml::Table = format!("v = {value}")
            .parse()
            .or_else(|_| format!("v = {}", toml::Value::String(value.to_string())).parse())
            .map_err(|e: toml::de::Error| Error::Usage(format!("bad value in `{s}`: {e}")))?;
        set_path(&mut table, key.trim(), parsed["v"].clone());
    }
    Ok(table)
}

fn resolve(run: &RunArgs, mode: TrainMode, kd: &KdArgs, rtk: &RtkArgs) -> Result<ExperimentConfig> {
    let mut flags = set_overrides(&run.set)?;
    let mut top = toml::Table::new();
    let mut put = |path: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            set_path(&mut top, path, v);
        }
    };
    let int = |v: Option<usize>| v.map(|v| toml::Value::Integer(v as i64));
    let float = |v: Option<f64>| v.map(toml::Value::Float);
    put("profile", run.profile.clone().map(toml::Value::String));
    put("train.seed", run.seed.map(|v| toml::Value::Integer(v as i64)));
    put("train.epochs", int(run.epochs));
    put("train.batch_size", int(run.batch_size));
    put("train.lr", float(run.lr));
    put("train.momentum", float(run.momentum));
    put("train.weight_decay", float(run.weight_decay));
    put(
        "train.lr_drops",
        run.lr_drops
            .as_ref()
            .map(|d| toml::Value::Array(d.iter().map(|&e| toml::Value::Integer(e as i64)).collect())),
    );
    put("train.lr_drop_factor", float(run.lr_drop_factor));
    put("train.augment.enabled", run.augment.map(toml::Value::Boolean));
    put(
        "data.dir",
        run.data_dir.as_ref().map(|d| toml::Value::String(d.display().to_string())),
    );
    put("train.loss.alpha", float(kd.alpha));
    put("train.loss.temperature", float(kd.temperature));
    put("train.loss.beta", float(rtk.beta));
    put("train.rtk.k", int(rtk.k));
    put("train.rtk.tau", float(rtk.tau));
    put("train.rtk.renormalize", rtk.renormalize.map(toml::Value::Boolean));
    put("train.rtk.dim", int(rtk.attention_dim));
    put("train.rtk.cadence", rtk.cadence.clone().map(toml::Value::String));
    put("train.mode", Some(toml::Value::String(mode.name().into())));
    merge(&mut flags, top);
    match &run.config {
        Some(p) => ExperimentConfig::load(p, &flags),
        None => ExperimentConfig::from_overrides(&flags),
    }
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn prepare_run_dir(run: &RunArgs, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = match &run.run_dir {
        Some(d) => d.clone(),
        None => {
            let root = run
                .runs_dir
                .clone()
                .or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs"));
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
            let base = format!("{stamp}-{}-seed{}", cfg.train.mode.name(), cfg.train.seed);
            let mut dir = root.join(&base);
            let mut n = 1;
            while dir.exists() {
                dir = root.join(format!("{base}-{n}"));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(RUN_CONFIG_FILE);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn student_run(run: &RunArgs, cfg: &ExperimentConfig, teacher: Option<&Path>) -> Result<serde_json::Value> {
    let teacher = match teacher {
        Some(p) => {
            let mut t = Model::<f32>::load(&checkpoint_path(p))?;
            let taps = cfg.teacher.apply_taps(t.config().clone()).tap_points;
            t.set_tap_points(taps)?;
            Some(t)
        }
        None if cfg.train.mode.uses_teacher() => {
            return Err(Error::Usage(format!("mode {} needs --teacher", cfg.train.mode.name())))
        }
        None => None,
    };
    let (train, test) = cfg.data.load()?;
    let arch = cfg.student.backbone(&cfg.data)?;
    let dir = prepare_run_dir(run, cfg)?;
    let art = train_student(&cfg.train, &arch, teacher.as_ref(), &train, &test, &dir)?;
    Ok(run_record(&art))
}

fn run_record(art: &RunArtifacts) -> serde_json::Value {
    json!({"run_dir": art.run_dir, "summary": art.summary})
}
