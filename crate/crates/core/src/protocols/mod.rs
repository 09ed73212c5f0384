//! Training protocols: centralized SGD, federated averaging, split
//! learning and the two splitfed variants.
//!
//! The distributed protocols run as threads (clients, main server, fed
//! server or relay) exchanging [`WireMessage`](crate::transport::WireMessage)
//! frames over a chosen transport. Every aggregation reduces in ascending
//! client-id order, so runs are reproducible regardless of thread timing.

mod central;
mod engine;
mod roles;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use crate::data::{Dataset, Shard};
use crate::dp::{ClipStats, DpConfig};
use crate::error::{Error, Result};
use crate::layers::{Initializer, Sgd};
use crate::model::{fit_input, ArchitectureSpec, Segment};
use crate::rng::{self, seeded, stream};
use crate::tensor::{ParameterSet, Tensor};
use crate::transport::{ClientTraffic, MessageTrace, TraceEntry, TrafficCounter, TransportKind};

pub use central::train_centralized;
pub use engine::run_experiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algo {
    Central,
    Fl,
    Sl,
    Sflv1,
    Sflv2,
}

impl Algo {
    pub const DISTRIBUTED: [Algo; 4] = [Algo::Fl, Algo::Sl, Algo::Sflv1, Algo::Sflv2];

    /// Whether the network is cut between clients and a main server.
    pub fn is_split(self) -> bool {
        matches!(self, Algo::Sl | Algo::Sflv1 | Algo::Sflv2)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Central => "central",
            Algo::Fl => "fl",
            Algo::Sl => "sl",
            Algo::Sflv1 => "sflv1",
            Algo::Sflv2 => "sflv2",
        })
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "central" | "centralized" => Ok(Algo::Central),
            "fl" => Ok(Algo::Fl),
            "sl" => Ok(Algo::Sl),
            "sflv1" => Ok(Algo::Sflv1),
            "sflv2" => Ok(Algo::Sflv2),
            other => Err(Error::Config(format!("unknown algorithm {other:?} (central|fl|sl|sflv1|sflv2)"))),
        }
    }
}

/// How the SFLV1 main server turns a round of client sessions into the next
/// server-side model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ServerUpdate {
    /// One replica per client, stepped after every batch, then averaged with
    /// weights n_i/n at the end of the round.
    #[default]
    Replicas,
    /// Every batch is evaluated against the frozen round-start model; one
    /// step with the n_i/n-weighted mean gradient at the end of the round.
    GradientAverage,
}

impl fmt::Display for ServerUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServerUpdate::Replicas => "replicas",
            ServerUpdate::GradientAverage => "gradient-average",
        })
    }
}

impl FromStr for ServerUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicas" => Ok(ServerUpdate::Replicas),
            "gradient-average" => Ok(ServerUpdate::GradientAverage),
            other => Err(Error::Config(format!("unknown server update {other:?} (replicas|gradient-average)"))),
        }
    }
}

/// Order in which the SL relay visits clients each round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum RelayOrder {
    #[default]
    Ascending,
    Seeded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Heavy-ball momentum. Every party starts each training session (one
    /// client round, one server session, one central epoch) with zero velocity.
    pub momentum: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub global_epochs: usize,
    /// Fraction of clients taking part in each round. Only 1.0 is supported.
    pub participation: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.004,
            momentum: 0.0,
            local_epochs: 1,
            batch_size: 64,
            global_epochs: 1,
            participation: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> Sgd {
        Sgd::new(self.learning_rate, self.momentum)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("local epochs and batch size must be at least 1".into()));
        }
        if self.participation != 1.0 {
            return Err(Error::Config(format!("participation fraction must be 1.0, got {}", self.participation)));
        }
        Ok(())
    }
}

/// Shuffled mini-batches of one shard for (client, round, local epoch).
/// The last batch may be short.
pub fn batch_plan(
    shard: &[usize],
    batch_size: usize,
    seed: u64,
    client: usize,
    round: usize,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut r = seeded(seed, &[stream::BATCHES, client as u64, round as u64, epoch as u64]);
    let order = rng::permutation(shard.len(), &mut r);
    order.chunks(batch_size).map(|c| c.iter().map(|&i| shard[i]).collect()).collect()
}

/// Number of mini-batches a shard of `n` samples yields per local epoch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// A client's model after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: u32,
    pub params: ParameterSet,
    pub samples: usize,
}

/// W = Σ_k (n_k/n)·W_k, summed in ascending client-id order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParameterSet> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdateSet);
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let total: usize = sorted.iter().map(|u| u.samples).sum();
    if total == 0 {
        return Err(Error::InvalidInputs("client updates carry no samples".into()));
    }
    for u in &sorted[1..] {
        sorted[0].params.ensure_congruent(&u.params)?;
    }
    let n = total as f64;
    let mut acc = sorted[0].params.clone();
    let w0 = sorted[0].samples as f64 / n;
    for (_, t) in acc.entries_mut() {
        t.scale(w0);
    }
    for u in &sorted[1..] {
        let w = u.samples as f64 / n;
        for ((_, a), (_, b)) in acc.entries_mut().iter_mut().zip(u.params.entries()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += w * y;
            }
        }
    }
    acc.version = sorted.iter().map(|u| u.params.version).max().unwrap_or(0);
    Ok(acc)
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::ZeroMean);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::ZeroMean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions of `logits` that match `labels`.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> u64 {
    logits.data().chunks(logits.row_len()).zip(labels).filter(|(row, &y)| argmax_row(row) == y).count() as u64
}

const EVAL_CHUNK: usize = 500;

/// Accuracy of client-forward then server-forward over `data`.
pub fn evaluate(
    arch: &ArchitectureSpec,
    cut_index: usize,
    client_params: &ParameterSet,
    server_params: &ParameterSet,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let client = arch.segment(0..cut_index);
    let server = arch.segment(cut_index..arch.layers.len());
    let mut correct = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let x = fit_input(&x, &arch.input_shape)?;
        let logits = server.forward(server_params, &client.forward(client_params, &x)?)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of an unsplit parameter set.
pub fn evaluate_full(arch: &ArchitectureSpec, params: &ParameterSet, data: &Dataset) -> Result<f64> {
    let (client, server) = params.split_at(arch.tensor_count(0..1));
    evaluate(arch, 1, &client, &server, data)
}

/// Everything needed to run one experiment.
#[derive(Clone)]
pub struct Experiment<'a> {
    pub algo: Algo,
    pub arch: &'a ArchitectureSpec,
    /// Ignored for FL and centralized training, which never cut the model.
    pub cut_index: usize,
    pub train: &'a Dataset,
    /// Held-out data for per-client test accuracy; may be empty.
    pub test: &'a Dataset,
    pub shards: &'a [Shard],
    pub config: TrainConfig,
    pub dp: DpConfig,
    pub transport: TransportKind,
    /// Artificial per-batch client compute time.
    pub compute_delay: Option<Duration>,
    pub server_update: ServerUpdate,
    pub relay_order: RelayOrder,
    pub init: Initializer,
    pub timeout: Duration,
    pub record_trace: bool,
}

impl<'a> Experiment<'a> {
    pub fn new(
        algo: Algo,
        arch: &'a ArchitectureSpec,
        cut_index: usize,
        train: &'a Dataset,
        test: &'a Dataset,
        shards: &'a [Shard],
        config: TrainConfig,
    ) -> Self {
        Self {
            algo,
            arch,
            cut_index,
            train,
            test,
            shards,
            config,
            dp: DpConfig::default(),
            transport: TransportKind::InProc,
            compute_delay: None,
            server_update: ServerUpdate::default(),
            relay_order: RelayOrder::default(),
            init: Initializer::default(),
            timeout: Duration::from_secs(600),
            record_trace: false,
        }
    }

    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.arch.validate()?;
        if self.dp.enabled() {
            self.dp.validate()?;
        }
        if self.shards.is_empty() {
            return Err(Error::TooManyClients { clients: 0, samples: self.train.len() });
        }
        if self.train.is_empty() || self.shards.iter().any(Shard::is_empty) {
            return Err(Error::EmptyDataset);
        }
        for (k, s) in self.shards.iter().enumerate() {
            if s.client_id != k {
                return Err(Error::Config(format!("shard {k} belongs to client {}", s.client_id)));
            }
            if s.indices.iter().any(|&i| i >= self.train.len()) {
                return Err(Error::Config(format!("shard {k} indexes past the training set")));
            }
        }
        if self.train.classes > self.arch.class_count {
            return Err(Error::LabelOutOfRange { label: self.train.classes - 1, classes: self.arch.class_count });
        }
        if self.algo.is_split() {
            let max = self.arch.layers.len() - 1;
            if self.cut_index < 1 || self.cut_index > max {
                return Err(Error::CutOutOfRange { cut: self.cut_index, max });
            }
        }
        if self.algo == Algo::Central && self.shards.len() != 1 {
            return Err(Error::Config("centralized training takes a single shard".into()));
        }
        Ok(())
    }

    /// Layers `[0, cut)` run on the clients. Unsplit protocols keep the
    /// whole network there.
    pub fn cut(&self) -> usize {
        if self.algo.is_split() {
            self.cut_index
        } else {
            self.arch.layers.len()
        }
    }

    fn segments(&self) -> (Segment<'a>, Segment<'a>) {
        let cut = self.cut();
        (self.arch.segment(0..cut), self.arch.segment(cut..self.arch.layers.len()))
    }
}

/// One client's view of one global epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRound {
    pub client: usize,
    /// Accuracy on the training batches processed during the round.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub samples: usize,
    /// Fingerprint of the parameters the client started the round with.
    pub start_hash: u64,
    /// Fingerprint of the parameters it finished with.
    pub end_hash: u64,
    pub traffic: ClientTraffic,
    pub clip: ClipStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// Zero-based.
    pub round: u32,
    pub clients: Vec<ClientRound>,
    pub wall_time: Duration,
    /// Server-side parameter updates applied during the round.
    pub server_updates: u64,
}

impl RoundReport {
    pub fn mean_train_acc(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.train_acc))
    }

    pub fn mean_test_acc(&self) -> Option<f64> {
        let accs: Option<Vec<f64>> = self.clients.iter().map(|c| c.test_acc).collect();
        accs.map(|a| mean(a.into_iter()))
    }

    pub fn cv_train(&self) -> Option<f64> {
        coefficient_of_variation(&self.clients.iter().map(|c| c.train_acc).collect::<Vec<_>>()).ok()
    }

    pub fn cv_test(&self) -> Option<f64> {
        let accs: Option<Vec<f64>> = self.clients.iter().map(|c| c.test_acc).collect();
        accs.and_then(|a| coefficient_of_variation(&a).ok())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub struct RunOutcome {
    pub rounds: Vec<RoundReport>,
    /// Full model after the last round, client portion first.
    pub final_params: ParameterSet,
    pub traffic: std::sync::Arc<TrafficCounter>,
    pub trace: Vec<TraceEntry>,
}

impl RunOutcome {
    pub fn last(&self) -> Option<&RoundReport> {
        self.rounds.last()
    }
}

/// Runs `exp`, handing each finished round to `on_round` before the next one
/// starts. An error from `on_round` aborts the run.
pub fn run(exp: &Experiment<'_>, on_round: &mut dyn FnMut(&RoundReport) -> Result<()>) -> Result<RunOutcome> {
    exp.validate()?;
    match exp.algo {
        Algo::Central => train_centralized(exp, on_round),
        _ => run_experiment(exp, on_round),
    }
}

pub(crate) fn new_trace(record: bool) -> Option<std::sync::Arc<MessageTrace>> {
    record.then(|| std::sync::Arc::new(MessageTrace::new()))
}
