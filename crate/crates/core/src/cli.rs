//! Command-line front end. Every command writes into one run directory
//! and records what it did in `run.json` there.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::{parse_key_values, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::experiment::{AblationRow, Experiment};
use crate::model::Checkpoint;
use crate::pseudo::{PseudoLabelRecord, PseudoLabeler};
use crate::trainer::{train_student, train_teacher, variant_factory, CsvLog, Strategy, LOG_HEADER};
use crate::world::io::dataset_digest;
use crate::world::Dataset;

pub const RUN_METADATA_FILE: &str = "run.json";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.csv";
pub const STUDENT_LOG: &str = "student_log.csv";
pub const PSEUDO_LABELS_FILE: &str = "pseudo_labels.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(name = "xmseg", version, about = "Open-vocabulary instance segmentation with cross-modal pseudo labels")]
pub struct Cli {
    /// Maximum number of worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic base, caption and test splits.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher on the mask-annotated base split.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; log rows are appended.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a student from a frozen teacher.
    TrainStudent {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss wiring; overrides `student.weights` from the config.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Dump pseudo labels of the caption split as JSON lines.
    PseudoLabel {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint whose noise head scores the pseudo masks (defaults to the teacher).
        #[arg(long)]
        noise_model: Option<PathBuf>,
        /// Reference noise level for reliability; defaults to the checkpoint's calibrated value or the config.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Mask mAP of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        protocol: ProtocolArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every strategy from one teacher and tabulate their mAP.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a trained teacher instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Strategies to run (defaults to all).
        #[arg(long, value_enum, value_delimiter = ',')]
        strategies: Vec<StrategyArg>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Config file, JSON or `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set student.optim.lr=0.01`; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data, teacher and student; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    ConstrainedBase,
    ConstrainedTarget,
    Generalized,
    All,
}

impl ProtocolArg {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            ProtocolArg::ConstrainedBase => vec![Protocol::ConstrainedBase],
            ProtocolArg::ConstrainedTarget => vec![Protocol::ConstrainedTarget],
            ProtocolArg::Generalized => vec![Protocol::Generalized],
            ProtocolArg::All => Protocol::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    TeacherOnly,
    XOnly,
    XPlusMask,
    Robust,
    ClassScore,
    PixelScore,
    DropoutEntropy,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::TeacherOnly => Strategy::TeacherOnly,
            StrategyArg::XOnly => Strategy::XOnly,
            StrategyArg::XPlusMask => Strategy::XPlusMask,
            StrategyArg::Robust => Strategy::Robust,
            StrategyArg::ClassScore => Strategy::ClassScore,
            StrategyArg::PixelScore => Strategy::PixelScore,
            StrategyArg::DropoutEntropy => Strategy::DropoutEntropy,
        }
    }
}

impl ConfigArgs {
    /// Defaults, then the config file, then `--set` overrides, then `--seed`.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut value = Value::Object(Map::new());
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            value = if text.trim_start().starts_with('{') {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("config JSON: {e}")))?
            } else {
                parse_key_values(&text)?
            };
        }
        for o in &self.overrides {
            merge(&mut value, parse_key_values(o)?);
        }
        let mut cfg = ExperimentConfig::parse(&value.to_string())?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// What a command records in the run directory's metadata file.
#[derive(Debug, Serialize)]
struct CommandRecord {
    version: &'static str,
    config_digest: String,
    seed: u64,
    config: ExperimentConfig,
    inputs: Map<String, Value>,
}

fn record_run(out: &Path, command: &str, cfg: &ExperimentConfig, seed: u64, inputs: Map<String, Value>) -> Result<()> {
    fs::create_dir_all(out)?;
    let path = out.join(RUN_METADATA_FILE);
    let mut meta: Map<String, Value> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad {}: {e}", path.display())))?,
        Err(_) => Map::new(),
    };
    let rec = CommandRecord { version: env!("CARGO_PKG_VERSION"), config_digest: cfg.digest(), seed, config: cfg.clone(), inputs };
    meta.insert(command.to_string(), serde_json::to_value(rec)?);
    fs::write(path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn input_path(map: &mut Map<String, Value>, key: &str, path: &Path) {
    map.insert(key.to_string(), Value::String(path.display().to_string()));
}

/// Loads a dataset and makes the config's data section match it.
fn load_data(dir: &Path, cfg: &mut ExperimentConfig) -> Result<Dataset> {
    let data = Dataset::load(dir)?;
    cfg.data = data.config.clone();
    Ok(data)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Opens a training log: truncated with a header for a fresh run,
/// appended to when resuming.
fn open_log(path: &Path, resume: bool) -> Result<CsvLog<BufWriter<File>>> {
    let exists = path.exists();
    let file = if resume { OpenOptions::new().create(true).append(true).open(path)? } else { File::create(path)? };
    let mut w = BufWriter::new(file);
    if !resume || !exists {
        writeln!(w, "{LOG_HEADER}")?;
    }
    Ok(CsvLog(w))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match cli.command {
        Command::GenData { config, out } => gen_data(&config.resolve()?, &out),
        Command::TrainTeacher { config, data, out, resume } => cmd_train_teacher(config.resolve()?, &data, &out, resume.as_deref()),
        Command::TrainStudent { config, teacher, data, out, strategy, resume } => {
            cmd_train_student(config.resolve()?, &teacher, &data, &out, strategy.map(Into::into), resume.as_deref())
        }
        Command::PseudoLabel { config, teacher, data, out, noise_model, eta } => {
            cmd_pseudo_label(config.resolve()?, &teacher, &data, &out, noise_model.as_deref(), eta)
        }
        Command::Eval { config, checkpoint, data, protocol, out } => cmd_eval(config.resolve()?, &checkpoint, &data, protocol, &out),
        Command::Ablate { config, data, out, teacher, strategies } => {
            let strategies: Vec<Strategy> = if strategies.is_empty() { Strategy::ALL.to_vec() } else { strategies.into_iter().map(Into::into).collect() };
            cmd_ablate(config.resolve()?, &data, &out, teacher.as_deref(), &strategies)
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = Dataset::generate(&cfg.data)?;
    data.save(out)?;
    let mut inputs = Map::new();
    inputs.insert("dataset_digest".into(), Value::String(dataset_digest(out)?));
    record_run(out, "gen-data", cfg, cfg.data.seed, inputs)
}

pub fn cmd_train_teacher(mut cfg: ExperimentConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let data = load_data(data_dir, &mut cfg)?;
    let resume_ck = resume.map(load_checkpoint).transpose()?;
    fs::create_dir_all(out)?;
    let exp = Experiment::new(cfg.clone(), data);
    let mut log = open_log(&out.join(TEACHER_LOG), resume.is_some())?;
    let ck = train_teacher(&cfg.teacher, &exp.context(), resume_ck, &mut log)?;
    log.0.flush()?;
    ck.save(&out.join(TEACHER_CHECKPOINT))?;
    let mut inputs = Map::new();
    input_path(&mut inputs, "data", data_dir);
    if let Some(r) = resume {
        input_path(&mut inputs, "resume", r);
    }
    record_run(out, "train-teacher", &cfg, cfg.teacher.seed, inputs)
}

pub fn cmd_train_student(mut cfg: ExperimentConfig, teacher: &Path, data_dir: &Path, out: &Path, strategy: Option<Strategy>, resume: Option<&Path>) -> Result<()> {
    let teacher_ck = load_checkpoint(teacher)?;
    let data = load_data(data_dir, &mut cfg)?;
    let resume_ck = resume.map(load_checkpoint).transpose()?;
    if let Some(s) = strategy {
        cfg.student = variant_factory(s, &cfg.student);
    }
    fs::create_dir_all(out)?;
    let exp = Experiment::new(cfg.clone(), data);
    let mut log = open_log(&out.join(STUDENT_LOG), resume.is_some())?;
    let result = train_student(&cfg.student, &teacher_ck.model, &exp.context(), resume_ck, &mut log)?;
    log.0.flush()?;
    result.checkpoint.save(&out.join(STUDENT_CHECKPOINT))?;
    let mut inputs = Map::new();
    input_path(&mut inputs, "teacher", teacher);
    input_path(&mut inputs, "data", data_dir);
    if let Some(s) = strategy {
        inputs.insert("strategy".into(), Value::String(s.name().into()));
    }
    inputs.insert("eta".into(), result.eta.into());
    record_run(out, "train-student", &cfg, cfg.student.seed, inputs)
}

/// Reference noise level stored with a student checkpoint, if any.
fn checkpoint_eta(ck: &Checkpoint) -> Option<f64> {
    ck.run_config.get("eta").and_then(Value::as_f64)
}

pub fn cmd_pseudo_label(mut cfg: ExperimentConfig, teacher: &Path, data_dir: &Path, out: &Path, noise_model: Option<&Path>, eta: Option<f64>) -> Result<()> {
    let teacher_ck = load_checkpoint(teacher)?;
    let noise_ck = noise_model.map(load_checkpoint).transpose()?;
    let data = load_data(data_dir, &mut cfg)?;
    let scorer = noise_ck.as_ref().unwrap_or(&teacher_ck);
    let mut noise_cfg = cfg.loss.noise.clone();
    noise_cfg.eta = eta.or_else(|| checkpoint_eta(scorer)).unwrap_or(noise_cfg.eta);
    if !(noise_cfg.eta > 0.0 && noise_cfg.eta.is_finite()) {
        return Err(Error::Config("eta must be positive".into()));
    }
    let labeler = PseudoLabeler::new(&teacher_ck.model, &data.vocab, &data.embeddings, cfg.proposals.clone());
    let labels = crate::trainer::label_all(&labeler, &data.caption)?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join(PSEUDO_LABELS_FILE))?);
    for (i, (sample, l)) in data.caption.iter().zip(&labels).enumerate() {
        for rec in PseudoLabelRecord::for_sample(i, sample, l, &scorer.model, &noise_cfg)? {
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    w.flush()?;
    let mut inputs = Map::new();
    input_path(&mut inputs, "teacher", teacher);
    input_path(&mut inputs, "data", data_dir);
    if let Some(p) = noise_model {
        input_path(&mut inputs, "noise_model", p);
    }
    inputs.insert("eta".into(), noise_cfg.eta.into());
    record_run(out, "pseudo-label", &cfg, teacher_ck.seed, inputs)
}

pub fn cmd_eval(mut cfg: ExperimentConfig, checkpoint: &Path, data_dir: &Path, protocol: ProtocolArg, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_data(data_dir, &mut cfg)?;
    if ck.model.config.embed_dim != data.embeddings.dim() {
        return Err(Error::Data("checkpoint embedding size does not match the dataset".into()));
    }
    let exp = Experiment::new(cfg.clone(), data);
    fs::create_dir_all(out)?;
    for p in protocol.protocols() {
        if protocol == ProtocolArg::All && !exp.dataset.test.iter().any(|s| s.subset == p.subset()) {
            continue;
        }
        let ev = exp.evaluate(&ck.model, p)?;
        write_json(&out.join(format!("eval_{}.json", p.name())), &ev.report)?;
        let pr_dir = out.join(format!("pr_{}", p.name()));
        fs::create_dir_all(&pr_dir)?;
        for (class, csv) in ev.pr_csv()? {
            fs::write(pr_dir.join(format!("{class}.csv")), csv)?;
        }
    }
    let mut inputs = Map::new();
    input_path(&mut inputs, "checkpoint", checkpoint);
    input_path(&mut inputs, "data", data_dir);
    record_run(out, "eval", &cfg, ck.seed, inputs)
}

pub fn cmd_ablate(mut cfg: ExperimentConfig, data_dir: &Path, out: &Path, teacher: Option<&Path>, strategies: &[Strategy]) -> Result<()> {
    let data = load_data(data_dir, &mut cfg)?;
    let exp = Experiment::new(cfg.clone(), data);
    fs::create_dir_all(out)?;
    let teacher_ck = match teacher {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut log = open_log(&out.join(TEACHER_LOG), false)?;
            let ck = exp.train_teacher(&mut log)?;
            log.0.flush()?;
            ck.save(&out.join(TEACHER_CHECKPOINT))?;
            ck
        }
    };
    let rows: Vec<AblationRow> = exp.ablate(&teacher_ck.model, strategies)?;
    let mut csv = String::from(AblationRow::CSV_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(out.join(ABLATION_CSV), csv)?;
    write_json(&out.join(ABLATION_JSON), &rows)?;
    let mut inputs = Map::new();
    input_path(&mut inputs, "data", data_dir);
    if let Some(p) = teacher {
        input_path(&mut inputs, "teacher", p);
    }
    inputs.insert("strategies".into(), strategies.iter().map(|s| Value::String(s.name().into())).collect());
    record_run(out, "ablate", &cfg, cfg.student.seed, inputs)
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
