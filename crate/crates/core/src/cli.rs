//! Command-line front end: run configuration, experiment pipeline and the
//! `train`, `eval`, `predict`, `synth` and `params` commands.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_cycle, pad_split, read_manifest, split_dataset, synth_generate, write_cycle, write_manifest, zscore_normalize,
    Alphabet, Cycle, DatasetSplit, PadMode, SplitName, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricOptions, SegmentationReport, DEFAULT_TOLERANCE};
use crate::model::{count_params, LayerDims, ModelConfig, ParamCount, PrecTime, Variant};
use crate::train::{evaluate, evaluator, load_checkpoint, prepare_samples, save_checkpoint, train, Checkpoint, Sample, TrainConfig, TrainLog};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VAL_REPORT_FILE: &str = "report_val.json";
pub const TEST_REPORT_FILE: &str = "report_test.json";
pub const EVAL_REPORT_FILE: &str = "report_eval.json";
pub const EVAL_DETAIL_FILE: &str = "changepoints_eval.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";
const LOCK_FILE: &str = ".prectime.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV `path,split` listing the cycles. Relative paths resolve against
    /// the configuration file.
    pub manifest: Option<PathBuf>,
    /// Use cycles from the `[synth]` section instead of a manifest.
    pub synthetic: bool,
    /// Train / val / test fractions for synthetic data.
    pub split: [f64; 3],
    pub normalize: bool,
    pub pad: PadMode,
    /// Exclude padded timesteps from loss and metrics.
    pub mask: bool,
    /// Changepoint matching tolerance in timesteps.
    pub tolerance: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            synthetic: false,
            split: [0.6, 0.2, 0.2],
            normalize: true,
            pad: PadMode::CycleMin,
            mask: true,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Everything a run needs. Sensor and class counts in `[model]` are
/// replaced by the values found in the data when training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only seed of a run; forked for initialisation, dropout, the
    /// dataset split and synthetic data.
    pub seed: u64,
    pub variant: Variant,
    /// Output directory.
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if ![0, cfg.seed].contains(&cfg.train.seed) || ![0, cfg.seed].contains(&cfg.synth.seed) {
            return Err(Error::Config(
                "train.seed and synth.seed must be unset or equal to the top-level `seed`".into(),
            ));
        }
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    /// Reads a configuration file; a relative manifest path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
            if m.is_relative() {
                cfg.data.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            tolerance: self.data.tolerance,
            ..MetricOptions::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.manifest, self.data.synthetic) {
            (None, false) => return Err(Error::Config("no data source: set data.manifest or data.synthetic = true".into())),
            (Some(_), true) => return Err(Error::Config("data.manifest and data.synthetic are mutually exclusive".into())),
            _ => {}
        }
        if self.data.tolerance < 0 {
            return Err(Error::Config(format!("data.tolerance {} is negative", self.data.tolerance)));
        }
        if self.data.synthetic {
            self.synth.validate()?;
        }
        self.train.validate()
    }
}

/// Cycles ready for the model: split, standardised, padded and encoded.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub split: DatasetSplit,
    pub alphabet: Alphabet,
    pub padded_length: usize,
    pub pad_values: Option<Vec<f64>>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// `[model]` with sensor and class counts taken from the data.
    pub model: ModelConfig,
}

fn load_manifest_split(path: &Path) -> Result<DatasetSplit> {
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for entry in read_manifest(path)? {
        let cycle = load_cycle(&entry.path)?;
        match entry.split {
            SplitName::Train => train.push(cycle),
            SplitName::Val => val.push(cycle),
            SplitName::Test => test.push(cycle),
        }
    }
    Ok(DatasetSplit::from_parts(train, val, test))
}

pub fn prepare_experiment(run: &RunConfig) -> Result<Experiment> {
    run.validate()?;
    let split = match &run.data.manifest {
        Some(m) => load_manifest_split(m)?,
        None => split_dataset(synth_generate(&run.synth)?, run.data.split, run.seed)?,
    };
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::Data("the training and validation splits must both be non-empty".into()));
    }
    let sensors = split.train[0].num_sensors();
    if let Some(c) = split.all().find(|c| c.num_sensors() != sensors) {
        return Err(Error::Data(format!("cycle {} has {} sensors, expected {sensors}", c.id, c.num_sensors())));
    }
    let split = if run.data.normalize { zscore_normalize(split)? } else { split };
    let padded = pad_split(split, run.model.window_length, run.data.pad)?;
    let split = padded.split;
    let alphabet = if run.data.mask { split.alphabet.clone() } else { split.alphabet.with_pad() };
    let model = ModelConfig {
        sensors,
        num_classes: alphabet.len(),
        ..run.model.clone()
    };
    model.validate()?;
    Ok(Experiment {
        train: prepare_samples(&split.train, &alphabet, run.data.mask)?,
        val: prepare_samples(&split.val, &alphabet, run.data.mask)?,
        test: prepare_samples(&split.test, &alphabet, run.data.mask)?,
        split,
        alphabet,
        padded_length: padded.padded_length,
        pad_values: padded.pad_values,
        model,
    })
}

/// Result of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub val_report: SegmentationReport,
    /// Absent when there are no test cycles.
    pub test_report: Option<SegmentationReport>,
}

/// Prepares the data, trains, and evaluates on validation and test cycles.
pub fn run_training(run: &RunConfig) -> Result<TrainOutcome> {
    let exp = prepare_experiment(run)?;
    let model = PrecTime::with_variant(exp.model.clone(), run.variant, run.seed)?;
    let (model, log) = train(model, &exp.train, &exp.val, &run.train)?;
    let opts = run.metric_options();
    let val_report = evaluate(&model, &exp.val, &exp.alphabet, opts)?;
    let test_report = if exp.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &exp.test, &exp.alphabet, opts)?)
    };
    let checkpoint = Checkpoint {
        model,
        alphabet: exp.alphabet,
        masked: run.data.mask,
        normalization: exp.split.stats,
        pad_values: exp.pad_values,
        train: Some(run.train.clone()),
        best_val_acc: Some(log.best_val_acc),
        epoch: Some(log.best_epoch),
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        val_report,
        test_report,
    })
}

/// Exclusive use of an output directory for the lifetime of the guard.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is locked by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn output_dir(flag: Option<&Path>, run: Option<&RunConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| run.and_then(|r| r.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn cmd_train(config: &Path, manifest: Option<&Path>, out: Option<&Path>, seed: Option<u64>) -> Result<PathBuf> {
    let mut run = RunConfig::load(config)?;
    if let Some(m) = manifest {
        run.data.manifest = Some(m.to_path_buf());
        run.data.synthetic = false;
    }
    if let Some(s) = seed {
        run.set_seed(s);
    }
    let dir = output_dir(out, Some(&run));
    let _lock = DirLock::acquire(&dir)?;
    let outcome = run_training(&run)?;
    save_checkpoint(&outcome.checkpoint, &dir.join(CHECKPOINT_FILE))?;
    outcome.log.write_csv(&dir.join(TRAIN_LOG_FILE))?;
    outcome.val_report.write_json(&dir.join(VAL_REPORT_FILE))?;
    if let Some(r) = &outcome.test_report {
        r.write_json(&dir.join(TEST_REPORT_FILE))?;
    }
    Ok(dir)
}

/// Loads, normalises and pads a raw cycle for a checkpoint, then encodes it.
pub fn checkpoint_sample(ckpt: &Checkpoint, cycle: &Cycle) -> Result<Sample> {
    check_sensors(ckpt, cycle)?;
    Sample::new(&ckpt.prepare_cycle(cycle)?, &ckpt.alphabet, ckpt.masked)
}

fn check_sensors(ckpt: &Checkpoint, cycle: &Cycle) -> Result<()> {
    let want = ckpt.model.config().sensors;
    if cycle.num_sensors() != want {
        return Err(Error::Data(format!(
            "cycle {} has {} sensors, the checkpoint expects {want}",
            cycle.id,
            cycle.num_sensors()
        )));
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out: Option<&Path>, tolerance: Option<i64>) -> Result<SegmentationReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let samples = read_manifest(manifest)?
        .iter()
        .map(|e| checkpoint_sample(&ckpt, &load_cycle(&e.path)?))
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no cycles", manifest.display())));
    }
    let opts = MetricOptions {
        tolerance: tolerance.unwrap_or(DEFAULT_TOLERANCE),
        ..MetricOptions::default()
    };
    let ev = evaluator(&ckpt.model, &samples, &ckpt.alphabet, opts)?;
    let report = ev.report()?;
    let dir = output_dir(out, None);
    let _lock = DirLock::acquire(&dir)?;
    report.write_json(&dir.join(EVAL_REPORT_FILE))?;
    let detail = dir.join(EVAL_DETAIL_FILE);
    let file = fs::File::create(&detail).map_err(|e| Error::io(&detail, e))?;
    ev.write_detail_csv(std::io::BufWriter::new(file))?;
    Ok(report)
}

/// Per-timestep `t,label,confidence` rows for the recorded part of `cycle`.
pub fn predict_csv(ckpt: &Checkpoint, cycle: &Cycle) -> Result<String> {
    check_sensors(ckpt, cycle)?;
    let prepared = ckpt.prepare_cycle(cycle)?;
    let pred = ckpt.model.predict(&prepared.sensors)?;
    let probs = pred.decoding();
    let mut s = String::from("t,label,confidence\n");
    for (t, class) in probs.argmax_rows().into_iter().enumerate().take(cycle.len()) {
        let _ = writeln!(s, "{t},{},{}", ckpt.alphabet.code(class), probs.row(t)[class]);
    }
    Ok(s)
}

pub fn cmd_predict(checkpoint: &Path, cycle: &Path, out: Option<&Path>) -> Result<Option<PathBuf>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cycle = load_cycle(cycle)?;
    let csv = predict_csv(&ckpt, &cycle)?;
    match out {
        None => {
            print!("{csv}");
            Ok(None)
        }
        Some(dir) => {
            let _lock = DirLock::acquire(dir)?;
            let path = dir.join(format!("{}.pred.csv", cycle.id));
            fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
            Ok(Some(path))
        }
    }
}

/// Writes the `[synth]` cycles and a manifest split with `data.split`.
pub fn cmd_synth(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<PathBuf> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.set_seed(s);
    }
    let cycles = synth_generate(&run.synth)?;
    let split = split_dataset(cycles, run.data.split, run.seed).map_err(|e| match e {
        Error::Argument(m) => Error::Config(m),
        other => other,
    })?;
    let dir = output_dir(out, Some(&run));
    let _lock = DirLock::acquire(&dir)?;
    let mut entries = Vec::new();
    for (name, cycles) in [
        (SplitName::Train, &split.train),
        (SplitName::Val, &split.val),
        (SplitName::Test, &split.test),
    ] {
        for c in cycles {
            let file = format!("{}.csv", c.id);
            write_cycle(c, &dir.join(&file))?;
            entries.push((file, name));
        }
    }
    entries.sort();
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

/// Per-layer counts for `[model]`, or for the published reference
/// dimensions with `reference`.
pub fn cmd_params(config: Option<&Path>, reference: bool) -> Result<(String, ParamCount)> {
    let run = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let dims = if reference {
        LayerDims::reference()
    } else {
        run.model.validate()?;
        LayerDims::from_config(&run.model, run.variant)
    };
    let counts = count_params(&dims, run.variant);
    let mut s = format!("{:<16} {:<18} {:>12}\n", "layer", "kind", "params");
    for l in &counts.layers {
        let _ = writeln!(s, "{:<16} {:<18} {:>12}", l.name, l.kind, l.count);
    }
    let _ = writeln!(s, "{:<16} {:<18} {:>12}", "total", "", counts.total);
    Ok((s, counts))
}

#[derive(Debug, Parser)]
#[command(name = "prectime", version, about = "Time-series segmentation with windowed CNN features and recurrent context")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, training log and reports.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides data.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on every cycle of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Changepoint tolerance in timesteps.
        #[arg(long)]
        tolerance: Option<i64>,
    },
    /// Per-timestep labels for one cycle CSV (stdout unless --out is given).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        cycle: PathBuf,
    },
    /// Generate synthetic cycles and a manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print per-layer trainable parameter counts.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the published reference dimensions.
        #[arg(long)]
        reference: bool,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, manifest, out, seed } => {
            let dir = cmd_train(&config, manifest.as_deref(), out.as_deref(), seed)?;
            eprintln!("wrote {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            tolerance,
        } => {
            let r = cmd_eval(&checkpoint, &manifest, out.as_deref(), tolerance)?;
            println!(
                "accuracy {:.4}  macro-F1 {:.4}  CP precision {:.4}  CP recall {:.4}",
                r.accuracy, r.macro_f1, r.cp_precision, r.cp_recall
            );
        }
        Command::Predict { checkpoint, out, cycle } => {
            if let Some(p) = cmd_predict(&checkpoint, &cycle, out.as_deref())? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Synth { config, out, seed } => {
            let m = cmd_synth(&config, out.as_deref(), seed)?;
            eprintln!("wrote {}", m.display());
        }
        Command::Params { config, reference } => print!("{}", cmd_params(config.as_deref(), reference)?.0),
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
