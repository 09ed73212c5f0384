use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use super::roles::{self, Report};
use super::{evaluate, new_trace, Algo, ClientRound, Experiment, RoundReport, RunOutcome};
use crate::dp::ClipStats;
use crate::error::{Error, Result};
use crate::tensor::ParameterSet;
use crate::transport::{connect, Endpoint, Peer, TrafficCounter};

/// Everything reported for one round, keyed by client.
struct Collected {
    clients: Vec<Option<ClientPart>>,
    sessions: Vec<Option<(Option<ParameterSet>, u64, u64)>>,
    server: Option<(u64, ParameterSet)>,
    aggregate: Option<ParameterSet>,
}

struct ClientPart {
    params: ParameterSet,
    start_hash: u64,
    clip: ClipStats,
    train: Option<(u64, u64)>,
    samples: usize,
}

impl Collected {
    fn new(clients: usize) -> Self {
        Self {
            clients: (0..clients).map(|_| None).collect(),
            sessions: (0..clients).map(|_| None).collect(),
            server: None,
            aggregate: None,
        }
    }

    fn complete(&self, split: bool) -> bool {
        self.clients.iter().all(Option::is_some)
            && self.aggregate.is_some()
            && (!split || (self.server.is_some() && self.sessions.iter().all(Option::is_some)))
    }

    fn add(&mut self, report: Report) {
        match report {
            Report::Client { client, params, start_hash, clip, train, samples, .. } => {
                self.clients[client] = Some(ClientPart { params, start_hash, clip, train, samples });
            }
            Report::Session { client, server_params, correct, seen, .. } => {
                self.sessions[client] = Some((server_params, correct, seen));
            }
            Report::ServerRound { updates, params, .. } => self.server = Some((updates, params)),
            Report::Aggregate { params, .. } => self.aggregate = Some(params),
            Report::Failed { .. } => unreachable!("failures are handled by the caller"),
        }
    }
}

fn ratio(correct: u64, seen: u64) -> f64 {
    if seen == 0 {
        0.0
    } else {
        correct as f64 / seen as f64
    }
}

fn spawn_guarded<'scope, F>(s: &'scope thread::Scope<'scope, '_>, role: String, tx: Sender<Report>, body: F)
where
    F: FnOnce(&Sender<Report>) -> Result<()> + Send + 'scope,
{
    s.spawn(move || {
        if let Err(error) = body(&tx) {
            tx.send(Report::Failed { role, error }).ok();
        }
    });
}

/// Runs FL, SL, SFLV1 or SFLV2 with one thread per client plus server
/// threads, connected over `exp.transport`.
pub fn run_experiment(
    exp: &Experiment<'_>,
    on_round: &mut dyn FnMut(&RoundReport) -> Result<()>,
) -> Result<RunOutcome> {
    let clients = exp.clients();
    let split = exp.algo.is_split();
    let cut = exp.cut();
    let initial = exp.arch.init_params(exp.init, exp.config.seed);
    let (client_init, server_init) = initial.split_at(exp.arch.tensor_count(0..cut));

    let counter = Arc::new(TrafficCounter::new());
    let trace = new_trace(exp.record_trace);
    let timeout = Some(exp.timeout);
    let mut client_fed = Vec::with_capacity(clients);
    let mut server_fed = Vec::with_capacity(clients);
    for (k, pair) in connect(exp.transport, clients, exp.timeout)?.into_iter().enumerate() {
        let (c, s) = Endpoint::pair(pair, k, Peer::FedServer, &counter, trace.as_ref(), timeout);
        client_fed.push(c);
        server_fed.push(s);
    }
    let mut client_main: Vec<Option<Endpoint>> = (0..clients).map(|_| None).collect();
    let mut server_main = Vec::new();
    if split {
        for (k, pair) in connect(exp.transport, clients, exp.timeout)?.into_iter().enumerate() {
            let (c, s) = Endpoint::pair(pair, k, Peer::MainServer, &counter, trace.as_ref(), timeout);
            client_main[k] = Some(c);
            server_main.push(s);
        }
    }

    // taken before any worker can run, so the first round is timed in full
    let first_start = Instant::now();
    let rounds = thread::scope(|s| {
        let (report_tx, report_rx) = mpsc::channel();
        let (go_tx, go_rx) = mpsc::channel::<()>();
        for (k, (fed, main)) in client_fed.into_iter().zip(client_main).enumerate() {
            spawn_guarded(s, format!("client {k}"), report_tx.clone(), move |tx| {
                roles::client_loop(exp, k, fed, main, tx)
            });
        }
        if split {
            spawn_guarded(s, "main server".into(), report_tx.clone(), move |tx| {
                roles::main_server_loop(exp, server_main, server_init, tx)
            });
        }
        let coordinator = if exp.algo == Algo::Sl { "relay" } else { "fed server" };
        spawn_guarded(s, coordinator.into(), report_tx.clone(), move |tx| {
            if exp.algo == Algo::Sl {
                roles::relay_loop(exp, server_fed, client_init, tx, &go_rx)
            } else {
                roles::fed_server_loop(exp, server_fed, client_init, tx, &go_rx)
            }
        });
        drop(report_tx);
        orchestrate(exp, report_rx, go_tx, &counter, first_start, on_round)
    })?;

    let final_params = rounds.1;
    Ok(RunOutcome {
        rounds: rounds.0,
        final_params,
        traffic: counter,
        trace: trace.map(|t| t.entries()).unwrap_or_default(),
    })
}

fn orchestrate(
    exp: &Experiment<'_>,
    reports: Receiver<Report>,
    go: Sender<()>,
    counter: &TrafficCounter,
    first_start: Instant,
    on_round: &mut dyn FnMut(&RoundReport) -> Result<()>,
) -> Result<(Vec<RoundReport>, ParameterSet)> {
    let clients = exp.clients();
    let split = exp.algo.is_split();
    let empty = ParameterSet::default();
    let mut rounds = Vec::with_capacity(exp.config.global_epochs);
    let mut final_params = ParameterSet::default();
    for t in 0..exp.config.global_epochs {
        let round = t as u32;
        // the clock starts before the round is released: on a single core
        // the woken workers may run the whole round before send returns
        let start = if t == 0 { first_start } else { Instant::now() };
        if t > 0 {
            go.send(()).map_err(|_| Error::Protocol("coordinator exited early".into()))?;
        }
        let mut got = Collected::new(clients);
        while !got.complete(split) {
            let report =
                reports.recv().map_err(|_| Error::Protocol("workers exited before the round completed".into()))?;
            if let Report::Failed { role, error } = report {
                return Err(match error {
                    Error::Protocol(m) => Error::Protocol(format!("{role}: {m}")),
                    other => other,
                });
            }
            if report.round() != Some(round) {
                return Err(Error::Protocol(format!("report for round {:?} during round {round}", report.round())));
            }
            got.add(report);
        }
        let wall_time = start.elapsed();

        let (server_updates, round_server) = match got.server.take() {
            Some((u, p)) => (u, Some(p)),
            None => (0, None),
        };
        let mut per_client = Vec::with_capacity(clients);
        for k in 0..clients {
            let part = got.clients[k].take().expect("complete round");
            let (server_params, train_acc) = if split {
                let (sp, correct, seen) = got.sessions[k].take().expect("complete round");
                (sp.or_else(|| round_server.clone()).unwrap_or_default(), ratio(correct, seen))
            } else {
                let (correct, seen) = part.train.unwrap_or((0, 0));
                (ParameterSet::default(), ratio(correct, seen))
            };
            let test_acc = if exp.test.is_empty() {
                None
            } else {
                let sp = if split { &server_params } else { &empty };
                Some(evaluate(exp.arch, exp.cut(), &part.params, sp, exp.test)?)
            };
            per_client.push(ClientRound {
                client: k,
                train_acc,
                test_acc,
                samples: part.samples,
                start_hash: part.start_hash,
                end_hash: part.params.fingerprint(),
                traffic: counter.client_round(k, round),
                clip: part.clip,
            });
        }
        let aggregate = got.aggregate.take().expect("complete round");
        final_params = match &round_server {
            Some(sp) => aggregate.concat(sp)?,
            None => aggregate,
        };
        let report = RoundReport { round, clients: per_client, wall_time, server_updates };
        on_round(&report)?;
        rounds.push(report);
    }
    Ok((rounds, final_params))
}
