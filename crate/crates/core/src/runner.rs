//! Experiment runs driven by a flat `key = value` configuration, writing a
//! per-round metrics CSV and a final checkpoint.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::checkpoint::save_checkpoint;
use crate::data::{load_idx, mnist_paths, partition_uniform, Dataset, Shard, SyntheticBlobs, MNIST_MEAN, MNIST_STD};
use crate::dp::{report_budget, BudgetReport, DpConfig};
use crate::error::{Error, Result};
use crate::layers::Initializer;
use crate::model::{build_architecture_for, default_cut, ArchitectureSpec, LENET_INPUT};
use crate::protocols::{run, Algo, Experiment, RelayOrder, RoundReport, RunOutcome, ServerUpdate, TrainConfig};
use crate::transport::TransportKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset {other:?} (mnist|synthetic)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

fn parse_init(s: &str) -> Result<Initializer> {
    match s {
        "xavier" => Ok(Initializer::XavierUniform),
        "he" => Ok(Initializer::HeUniform),
        _ => match s.strip_prefix("gaussian:") {
            Some(std) => Ok(Initializer::Gaussian { std: parse(std, "init")? }),
            None => Err(Error::Config(format!("unknown init {s:?} (xavier|he|gaussian:<std>)"))),
        },
    }
}

fn parse<T: FromStr>(value: &str, key: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Everything a run needs. Keys accepted by [`RunConfig::set`] are listed in
/// [`RunConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algo,
    pub clients: usize,
    pub global_epochs: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub arch: String,
    /// Defaults to just after the first pooling layer.
    pub cut_index: Option<usize>,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Training samples taken from the head of the training set.
    pub subset_size: Option<usize>,
    pub test_size: Option<usize>,
    /// Standardise MNIST pixels with the training-set mean and deviation.
    pub normalize: bool,
    pub synthetic_dim: usize,
    pub synthetic_classes: usize,
    pub synthetic_scale: f64,
    pub synthetic_samples: usize,
    pub synthetic_test: usize,
    pub seed: u64,
    pub dp: DpConfig,
    pub transport: TransportKind,
    pub server_update: ServerUpdate,
    pub relay_order: RelayOrder,
    pub init: Initializer,
    pub delay_ms: u64,
    pub timeout_secs: u64,
    pub out: PathBuf,
    /// Defaults to the metrics path with a `.ckpt` extension.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Sflv1,
            clients: 5,
            global_epochs: 200,
            local_epochs: 1,
            batch_size: 64,
            learning_rate: 0.004,
            momentum: 0.0,
            arch: "lenet_small".into(),
            cut_index: None,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            subset_size: None,
            test_size: None,
            normalize: false,
            synthetic_dim: 16,
            synthetic_classes: 4,
            synthetic_scale: 3.0,
            synthetic_samples: 2000,
            synthetic_test: 500,
            seed: 0,
            dp: DpConfig::default(),
            transport: TransportKind::InProc,
            server_update: ServerUpdate::default(),
            relay_order: RelayOrder::default(),
            init: Initializer::default(),
            delay_ms: 0,
            timeout_secs: 600,
            out: PathBuf::from("metrics.csv"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "algo",
        "clients",
        "global_epochs",
        "local_epochs",
        "batch_size",
        "lr",
        "momentum",
        "arch",
        "cut",
        "dataset",
        "data_dir",
        "subset",
        "test_subset",
        "normalize",
        "synthetic_dim",
        "synthetic_classes",
        "synthetic_scale",
        "synthetic_samples",
        "synthetic_test",
        "seed",
        "gradient_dp",
        "smashed_dp",
        "sigma",
        "clip_norm",
        "epsilon",
        "delta",
        "epsilon_prime",
        "transport",
        "server_update",
        "relay_order",
        "init",
        "delay_ms",
        "timeout_secs",
        "out",
        "checkpoint",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "algo" => self.algo = v.parse()?,
            "clients" => self.clients = parse(v, key)?,
            "global_epochs" => self.global_epochs = parse(v, key)?,
            "local_epochs" => self.local_epochs = parse(v, key)?,
            "batch_size" => self.batch_size = parse(v, key)?,
            "lr" | "learning_rate" => self.learning_rate = parse(v, key)?,
            "momentum" => self.momentum = parse(v, key)?,
            "arch" => self.arch = v.to_string(),
            "cut" | "cut_index" => self.cut_index = Some(parse(v, key)?),
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "subset" => self.subset_size = Some(parse(v, key)?),
            "test_subset" => self.test_size = Some(parse(v, key)?),
            "normalize" => self.normalize = parse_bool(v, key)?,
            "synthetic_dim" => self.synthetic_dim = parse(v, key)?,
            "synthetic_classes" => self.synthetic_classes = parse(v, key)?,
            "synthetic_scale" => self.synthetic_scale = parse(v, key)?,
            "synthetic_samples" => self.synthetic_samples = parse(v, key)?,
            "synthetic_test" => self.synthetic_test = parse(v, key)?,
            "seed" => self.seed = parse(v, key)?,
            "gradient_dp" => self.dp.gradient_dp = parse_bool(v, key)?,
            "smashed_dp" => self.dp.smashed_dp = parse_bool(v, key)?,
            "sigma" | "noise_scale" => self.dp.noise_scale = parse(v, key)?,
            "clip_norm" => self.dp.clip_norm = parse(v, key)?,
            "epsilon" => self.dp.epsilon = parse(v, key)?,
            "delta" => self.dp.delta = parse(v, key)?,
            "epsilon_prime" | "smashed_epsilon" => self.dp.smashed_epsilon = parse(v, key)?,
            "transport" => self.transport = v.parse()?,
            "server_update" => self.server_update = v.parse()?,
            "relay_order" => {
                self.relay_order = match v {
                    "ascending" => RelayOrder::Ascending,
                    "seeded" => RelayOrder::Seeded,
                    _ => return Err(Error::Config(format!("relay_order: expected ascending or seeded, got {v:?}"))),
                }
            }
            "init" => self.init = parse_init(v)?,
            "delay_ms" => self.delay_ms = parse(v, key)?,
            "timeout_secs" => self.timeout_secs = parse(v, key)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text, one setting per line. `#` starts a
    /// comment and blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key, value).map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            global_epochs: self.global_epochs,
            participation: 1.0,
            seed: self.seed,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.with_extension("ckpt"))
    }

    /// Loads the training and test sets named by the configuration.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Mnist => {
                let open = |train: bool| -> Result<Dataset> {
                    let (images, labels) = mnist_paths(&self.data_dir, train);
                    for p in [&images, &labels] {
                        if !p.exists() {
                            return Err(Error::Config(format!("missing MNIST file {}", p.display())));
                        }
                    }
                    load_idx(images, labels)
                };
                let mut train = open(true)?;
                let mut test = open(false)?;
                if let Some(n) = self.subset_size {
                    train = train.head(n);
                }
                if let Some(n) = self.test_size {
                    test = test.head(n);
                }
                if self.normalize {
                    train = train.standardized(MNIST_MEAN, MNIST_STD);
                    test = test.standardized(MNIST_MEAN, MNIST_STD);
                }
                Ok((train, test))
            }
            DatasetKind::Synthetic => {
                let blobs =
                    SyntheticBlobs::new(self.synthetic_dim, self.synthetic_classes, self.seed, self.synthetic_scale)?;
                let n = self.subset_size.unwrap_or(self.synthetic_samples);
                let test_n = self.test_size.unwrap_or(self.synthetic_test);
                Ok((blobs.sample(n, self.seed), blobs.sample(test_n, self.seed.wrapping_add(1))))
            }
        }
    }

    /// The named architecture sized for `train`. Image datasets feed LeNet
    /// through its zero-padded 32×32 input.
    pub fn architecture(&self, train: &Dataset) -> Result<ArchitectureSpec> {
        let classes = train.classes;
        let input: Vec<usize> = match (self.arch.as_str(), train.sample_shape()) {
            ("lenet_small", [_, _, c]) => vec![*c, LENET_INPUT[1], LENET_INPUT[2]],
            ("lenet_small", other) => {
                return Err(Error::Config(format!("lenet_small needs image samples, got shape {other:?}")))
            }
            (_, shape) => vec![shape.iter().product()],
        };
        build_architecture_for(&self.arch, &input, classes)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// A validated configuration with its data loaded, ready to run.
pub struct PreparedRun {
    pub config: RunConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub arch: ArchitectureSpec,
    pub cut_index: usize,
    pub shards: Vec<Shard>,
}

/// Loads data, builds the architecture and shards, and checks every setting.
/// Errors here are configuration errors.
pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    config.train_config().validate()?;
    if config.dp.enabled() {
        config.dp.validate()?;
    }
    if config.clients == 0 {
        return Err(Error::Config("clients must be at least 1".into()));
    }
    if config.algo == Algo::Central && config.clients != 1 {
        return Err(Error::Config("centralized training runs with clients = 1".into()));
    }
    let (train, test) = config.load_datasets()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = config.architecture(&train)?;
    let cut_index = config.cut_index.unwrap_or_else(|| default_cut(&arch));
    let max = arch.layers.len() - 1;
    if config.algo.is_split() && (cut_index < 1 || cut_index > max) {
        return Err(Error::CutOutOfRange { cut: cut_index, max });
    }
    let shards = partition_uniform(train.len(), config.clients, config.seed)?;
    if let Some(dir) = config.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(Error::Config(format!("output directory {} does not exist", dir.display())));
        }
    }
    Ok(PreparedRun { config: config.clone(), train, test, arch, cut_index, shards })
}

impl PreparedRun {
    pub fn experiment(&self) -> Experiment<'_> {
        let cfg = &self.config;
        let mut exp = Experiment::new(
            cfg.algo,
            &self.arch,
            self.cut_index,
            &self.train,
            &self.test,
            &self.shards,
            cfg.train_config(),
        );
        exp.dp = cfg.dp;
        exp.transport = cfg.transport;
        exp.compute_delay = (cfg.delay_ms > 0).then(|| Duration::from_millis(cfg.delay_ms));
        exp.server_update = cfg.server_update;
        exp.relay_order = cfg.relay_order;
        exp.init = cfg.init;
        exp.timeout = Duration::from_secs(cfg.timeout_secs.max(1));
        exp
    }

    /// Runs the experiment, appending one CSV row per round as it finishes,
    /// then writes the final checkpoint. A failed run leaves the rows
    /// written so far in place.
    pub fn execute(&self) -> Result<RunSummary> {
        self.execute_with(&mut |_| {})
    }

    /// [`execute`](Self::execute) with a callback after each round's row is written.
    pub fn execute_with(&self, progress: &mut dyn FnMut(&RoundReport)) -> Result<RunSummary> {
        let cfg = &self.config;
        let file = File::create(&cfg.out)?;
        let mut csv = MetricsWriter::new(BufWriter::new(file), self.shards.len(), &cfg.dp)?;
        let exp = self.experiment();
        let outcome = run(&exp, &mut |r| {
            csv.row(r)?;
            progress(r);
            Ok(())
        })?;
        csv.finish()?;
        let checkpoint = cfg.checkpoint_path();
        save_checkpoint(&checkpoint, &outcome.final_params)?;
        Ok(RunSummary { outcome, metrics: cfg.out.clone(), checkpoint })
    }
}

pub struct RunSummary {
    pub outcome: RunOutcome,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunSummary {
    pub fn mean_epoch_time(&self) -> Option<Duration> {
        mean_epoch_time(&self.outcome.rounds)
    }
}

/// Mean wall time per global epoch, leaving out the first one when there is
/// more than one.
pub fn mean_epoch_time(rounds: &[RoundReport]) -> Option<Duration> {
    let counted = if rounds.len() > 1 { &rounds[1..] } else { rounds };
    if counted.is_empty() {
        return None;
    }
    Some(counted.iter().map(|r| r.wall_time).sum::<Duration>() / counted.len() as u32)
}

/// Column names in order. Per-client traffic columns repeat for each client.
pub fn metrics_header(clients: usize) -> String {
    let mut cols: Vec<String> =
        ["global_epoch", "mean_train_acc", "mean_test_acc", "cv_train", "cv_test"].map(String::from).to_vec();
    for k in 0..clients {
        for field in ["bytes_up", "bytes_down", "elements_up", "elements_down"] {
            cols.push(format!("client{k}_{field}"));
        }
    }
    cols.push("wall_time_sec".into());
    cols.push("epsilon_report".into());
    cols.join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row. `global_epoch` is one-based.
pub fn metrics_row(report: &RoundReport, budget: &BudgetReport) -> String {
    let mut cols = vec![
        (report.round + 1).to_string(),
        report.mean_train_acc().to_string(),
        opt(report.mean_test_acc()),
        opt(report.cv_train()),
        opt(report.cv_test()),
    ];
    for c in &report.clients {
        let t = &c.traffic;
        cols.extend(
            [t.uploaded_bytes, t.downloaded_bytes, t.uploaded_elements, t.downloaded_elements].map(|v| v.to_string()),
        );
    }
    cols.push(format!("{:.6}", report.wall_time.as_secs_f64()));
    cols.push(budget.epsilon.to_string());
    cols.join(",")
}

/// Streams metrics rows to `W`, flushing after every row.
pub struct MetricsWriter<W: Write> {
    out: W,
    budget: BudgetReport,
}

impl<W: Write> MetricsWriter<W> {
    /// Writes the header. When DP is on, `#` comment lines describing the
    /// mechanisms and the accounting method come first.
    pub fn new(mut out: W, clients: usize, dp: &DpConfig) -> Result<Self> {
        let budget = report_budget(dp);
        if dp.enabled() {
            writeln!(
                out,
                "# dp gradient={} sigma={} clip_norm={} epsilon={} delta={} smashed={} epsilon_prime={}",
                dp.gradient_dp, dp.noise_scale, dp.clip_norm, dp.epsilon, dp.delta, dp.smashed_dp, dp.smashed_epsilon
            )?;
            writeln!(out, "# privacy budget ({}, {}) by {}", budget.epsilon, budget.delta, BudgetReport::METHOD)?;
        }
        writeln!(out, "{}", metrics_header(clients))?;
        out.flush()?;
        Ok(Self { out, budget })
    }

    pub fn row(&mut self, report: &RoundReport) -> Result<()> {
        writeln!(self.out, "{}", metrics_row(report, &self.budget))?;
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
