//! Thread bodies for clients, the main server, the fed server and the SL
//! relay.

use std::sync::mpsc::{Receiver, Sender};
use std::thread;

use super::{batch_plan, count_correct, fedavg_aggregate, Algo, ClientUpdate, Experiment, RelayOrder, ServerUpdate};
use crate::dp::{private_gradient, randomize_smashed, ClipStats};
use crate::error::{Error, Result};
use crate::layers::{sgd_step, softmax_cross_entropy};
use crate::model::{fit_input, Segment};
use crate::rng::{self, derive_seed, seeded, stream, NoiseSource};
use crate::tensor::{GradientSet, ParameterSet, Tensor};
use crate::transport::codec::LABELS;
use crate::transport::{Control, Endpoint, MsgType, WireMessage};

pub(super) enum Report {
    Client {
        round: u32,
        client: usize,
        params: ParameterSet,
        start_hash: u64,
        clip: ClipStats,
        /// (correct, seen) when the client computes its own loss.
        train: Option<(u64, u64)>,
        samples: usize,
    },
    /// The main server finished one client's session.
    Session {
        round: u32,
        client: usize,
        /// Server-side model as it stood for this client; `None` when the
        /// round-end model applies.
        server_params: Option<ParameterSet>,
        correct: u64,
        seen: u64,
    },
    ServerRound {
        round: u32,
        updates: u64,
        params: ParameterSet,
    },
    /// Fed server aggregate, or the relay's last hand-off.
    Aggregate {
        round: u32,
        params: ParameterSet,
    },
    Failed {
        role: String,
        error: Error,
    },
}

impl Report {
    pub(super) fn round(&self) -> Option<u32> {
        match self {
            Report::Client { round, .. }
            | Report::Session { round, .. }
            | Report::ServerRound { round, .. }
            | Report::Aggregate { round, .. } => Some(*round),
            Report::Failed { .. } => None,
        }
    }
}

pub(super) fn load_batch(exp: &Experiment<'_>, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let (x, y) = exp.train.batch(indices);
    Ok((fit_input(&x, &exp.arch.input_shape)?, y))
}

/// Clients in the order the SL relay visits them in round `t`.
pub(super) fn relay_order(exp: &Experiment<'_>, t: usize) -> Vec<usize> {
    match exp.relay_order {
        RelayOrder::Ascending => (0..exp.clients()).collect(),
        RelayOrder::Seeded => {
            rng::permutation(exp.clients(), &mut seeded(exp.config.seed, &[stream::RELAY_ORDER, t as u64]))
        }
    }
}

/// Order in which the SFLV2 main server processes clients in round `t`.
pub fn server_order(seed: u64, clients: usize, t: usize) -> Vec<usize> {
    rng::permutation(clients, &mut seeded(seed, &[stream::SERVER_ORDER, t as u64]))
}

fn expect(msg: &WireMessage, ty: MsgType, round: u32) -> Result<()> {
    if msg.msg_type != ty || msg.round != round {
        return Err(Error::Protocol(format!(
            "expected {ty} for round {round}, got {} for round {}",
            msg.msg_type, msg.round
        )));
    }
    Ok(())
}

fn labels_tensor(y: &[usize]) -> Tensor {
    Tensor::from_vec(y.iter().map(|&v| v as f64).collect())
}

fn decode_labels(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Protocol(format!("label {v} is not a class index")))
            }
        })
        .collect()
}

/// A client: waits for a model, trains it for `E` local epochs, uploads it.
/// With a main-server link the forward/backward pass is split at the cut.
pub(super) fn client_loop(
    exp: &Experiment<'_>,
    k: usize,
    mut fed: Endpoint,
    mut main: Option<Endpoint>,
    reports: &Sender<Report>,
) -> Result<()> {
    let (segment, _) = exp.segments();
    let cfg = &exp.config;
    let dp = &exp.dp;
    let shard = &exp.shards[k].indices;
    let mut noise = NoiseSource::new(derive_seed(cfg.seed, &[stream::DP, k as u64]));
    let id = k as u32;
    loop {
        let msg = fed.recv()?;
        if msg.control_kind() == Some(Control::Done) {
            return Ok(());
        }
        let round = msg.round;
        expect(&msg, MsgType::GlobalModel, round)?;
        let mut params = msg.into_params()?;
        let start_hash = params.fingerprint();
        let mut clip = ClipStats::default();
        let (mut correct, mut seen) = (0u64, 0u64);
        let mut b = 0u32;
        let mut opt = cfg.optimizer();
        for e in 0..cfg.local_epochs {
            for batch in batch_plan(shard, cfg.batch_size, cfg.seed, k, round as usize, e) {
                if let Some(d) = exp.compute_delay {
                    thread::sleep(d);
                }
                let (x, y) = load_batch(exp, &batch)?;
                let trace = segment.forward_traced(&params, &x)?;
                let grads = match main.as_mut() {
                    None => {
                        let (_, dlogits) = softmax_cross_entropy(&trace.output, &y)?;
                        correct += count_correct(&trace.output, &y);
                        seen += y.len() as u64;
                        segment.backward(&params, &trace, &dlogits)?.1
                    }
                    Some(main) => {
                        let smashed = if dp.smashed_dp {
                            randomize_smashed(&trace.output, dp.smashed_epsilon, &mut noise)
                        } else {
                            trace.output.clone()
                        };
                        main.send(
                            &WireMessage::new(MsgType::Smashed, round, id)
                                .with_meta("batch", f64::from(b))
                                .with("activations", smashed)
                                .with(LABELS, labels_tensor(&y)),
                        )?;
                        let mut reply = main.recv()?;
                        expect(&reply, MsgType::SmashedGrad, round)?;
                        if reply.require_meta("batch")? != f64::from(b) {
                            return Err(Error::Protocol(format!("client {k}: gradient for the wrong batch")));
                        }
                        let upstream = reply.take_tensor("gradient")?;
                        upstream.ensure_same_shape(&trace.output, "smashed gradient")?;
                        if dp.gradient_dp {
                            private_gradient(&segment, &params, &trace, &upstream, dp, &mut noise, &mut clip)?
                        } else {
                            segment.backward(&params, &trace, &upstream)?.1
                        }
                    }
                };
                opt.step(&mut params, &grads)?;
                b += 1;
            }
        }
        if let Some(main) = main.as_mut() {
            main.send(&WireMessage::control(Control::SessionEnd, round, id))?;
        }
        let upload = WireMessage::new(MsgType::ClientUpdate, round, id)
            .with_meta("samples", shard.len() as f64)
            .with_params(&params);
        reports
            .send(Report::Client {
                round,
                client: k,
                params,
                start_hash,
                clip,
                train: main.is_none().then_some((correct, seen)),
                samples: shard.len(),
            })
            .ok();
        fed.send(&upload)?;
    }
}

enum Mode<'m> {
    /// Step the given model after every batch.
    Step(&'m mut ParameterSet),
    /// Leave the model alone and keep each batch's gradient.
    Frozen(&'m ParameterSet),
}

#[derive(Default)]
struct SessionStats {
    correct: u64,
    seen: u64,
    updates: u64,
    /// (batch size, gradient) per batch in `Mode::Frozen`.
    grads: Vec<(usize, GradientSet)>,
}

/// Serves one client's smashed batches until it ends its session.
fn serve_session(
    exp: &Experiment<'_>,
    segment: &Segment<'_>,
    ep: &mut Endpoint,
    round: u32,
    mut mode: Mode<'_>,
) -> Result<SessionStats> {
    let mut stats = SessionStats::default();
    let mut opt = exp.config.optimizer();
    let id = ep.client as u32;
    loop {
        let mut msg = ep.recv()?;
        if msg.round != round || msg.client_id != id {
            return Err(Error::Protocol(format!(
                "main server expected client {id} round {round}, got client {} round {}",
                msg.client_id, msg.round
            )));
        }
        match msg.msg_type {
            MsgType::Control if msg.control_kind() == Some(Control::SessionEnd) => return Ok(stats),
            MsgType::Smashed => {
                let b = msg.require_meta("batch")?;
                let activations = msg.take_tensor("activations")?;
                let labels = decode_labels(&msg.take_tensor(LABELS)?)?;
                if activations.rows() != labels.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} activation rows for {} labels",
                        activations.rows(),
                        labels.len()
                    )));
                }
                let params: &ParameterSet = match &mode {
                    Mode::Step(p) => p,
                    Mode::Frozen(p) => p,
                };
                let trace = segment.forward_traced(params, &activations)?;
                let (_, dlogits) = softmax_cross_entropy(&trace.output, &labels)?;
                stats.correct += count_correct(&trace.output, &labels);
                stats.seen += labels.len() as u64;
                let (d_activations, grads) = segment.backward(params, &trace, &dlogits)?;
                match &mut mode {
                    Mode::Step(p) => {
                        opt.step(p, &grads)?;
                        stats.updates += 1;
                    }
                    Mode::Frozen(_) => stats.grads.push((labels.len(), grads)),
                }
                ep.send(
                    &WireMessage::new(MsgType::SmashedGrad, round, id)
                        .with_meta("batch", b)
                        .with("gradient", d_activations),
                )?;
            }
            other => return Err(Error::Protocol(format!("main server got unexpected {other}"))),
        }
    }
}

/// Σ wᵢ·gᵢ in the given order, starting from the first term.
fn weighted_sum(terms: &[(f64, &GradientSet)]) -> Result<GradientSet> {
    let (w0, g0) = terms.first().ok_or(Error::EmptyUpdateSet)?;
    let mut acc = (*g0).clone();
    acc.scale(*w0);
    for (w, g) in &terms[1..] {
        acc.add_scaled(g, *w)?;
    }
    Ok(acc)
}

pub(super) fn main_server_loop(
    exp: &Experiment<'_>,
    mut links: Vec<Endpoint>,
    mut params: ParameterSet,
    reports: &Sender<Report>,
) -> Result<()> {
    let (_, segment) = exp.segments();
    for t in 0..exp.config.global_epochs {
        let round = t as u32;
        let mut updates = 0;
        match (exp.algo, exp.server_update) {
            (Algo::Sl, _) | (Algo::Sflv2, _) => {
                let order = if exp.algo == Algo::Sl {
                    relay_order(exp, t)
                } else {
                    server_order(exp.config.seed, exp.clients(), t)
                };
                for k in order {
                    let s = serve_session(exp, &segment, &mut links[k], round, Mode::Step(&mut params))?;
                    updates += s.updates;
                    reports
                        .send(Report::Session {
                            round,
                            client: k,
                            server_params: Some(params.clone()),
                            correct: s.correct,
                            seen: s.seen,
                        })
                        .ok();
                }
            }
            (Algo::Sflv1, ServerUpdate::Replicas) => {
                let results: Vec<Result<(ParameterSet, SessionStats)>> = thread::scope(|s| {
                    let handles: Vec<_> = links
                        .iter_mut()
                        .map(|ep| {
                            let mut replica = params.clone();
                            let segment = &segment;
                            s.spawn(move || {
                                serve_session(exp, segment, ep, round, Mode::Step(&mut replica)).map(|st| (replica, st))
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("session thread panicked")).collect()
                });
                let mut replicas = Vec::with_capacity(results.len());
                for (k, r) in results.into_iter().enumerate() {
                    let (replica, st) = r?;
                    updates += st.updates;
                    reports
                        .send(Report::Session {
                            round,
                            client: k,
                            server_params: Some(replica.clone()),
                            correct: st.correct,
                            seen: st.seen,
                        })
                        .ok();
                    replicas.push(ClientUpdate { client_id: k, round, params: replica, samples: st.seen as usize });
                }
                params = fedavg_aggregate(&replicas)?;
            }
            (Algo::Sflv1, ServerUpdate::GradientAverage) => {
                let frozen = &params;
                let results: Vec<Result<SessionStats>> = thread::scope(|s| {
                    let handles: Vec<_> = links
                        .iter_mut()
                        .map(|ep| {
                            let segment = &segment;
                            s.spawn(move || serve_session(exp, segment, ep, round, Mode::Frozen(frozen)))
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("session thread panicked")).collect()
                });
                let stats: Vec<SessionStats> = results.into_iter().collect::<Result<_>>()?;
                let total: u64 = stats.iter().map(|s| s.seen).sum();
                let mut per_client = Vec::with_capacity(stats.len());
                for st in &stats {
                    let n_i = st.seen as f64;
                    let terms: Vec<(f64, &GradientSet)> = st.grads.iter().map(|(b, g)| (*b as f64 / n_i, g)).collect();
                    per_client.push(weighted_sum(&terms)?);
                }
                let terms: Vec<(f64, &GradientSet)> =
                    stats.iter().zip(&per_client).map(|(st, g)| (st.seen as f64 / total as f64, g)).collect();
                sgd_step(&mut params, &weighted_sum(&terms)?, exp.config.learning_rate)?;
                updates = 1;
                for (k, st) in stats.iter().enumerate() {
                    reports
                        .send(Report::Session {
                            round,
                            client: k,
                            server_params: None,
                            correct: st.correct,
                            seen: st.seen,
                        })
                        .ok();
                }
            }
            (algo, _) => return Err(Error::Config(format!("{algo} has no main server"))),
        }
        reports.send(Report::ServerRound { round, updates, params: params.clone() }).ok();
    }
    Ok(())
}

fn finish(links: &mut [Endpoint], rounds: usize) -> Result<()> {
    for ep in links {
        ep.send(&WireMessage::control(Control::Done, rounds as u32, ep.client as u32))?;
    }
    Ok(())
}

/// FL aggregation server or SFL fed server: broadcast, collect, average.
pub(super) fn fed_server_loop(
    exp: &Experiment<'_>,
    mut links: Vec<Endpoint>,
    mut params: ParameterSet,
    reports: &Sender<Report>,
    go: &Receiver<()>,
) -> Result<()> {
    for t in 0..exp.config.global_epochs {
        if t > 0 && go.recv().is_err() {
            return Ok(());
        }
        let round = t as u32;
        for ep in links.iter_mut() {
            ep.send(&WireMessage::new(MsgType::GlobalModel, round, ep.client as u32).with_params(&params))?;
        }
        let mut updates = Vec::with_capacity(links.len());
        for ep in links.iter_mut() {
            let msg = ep.recv()?;
            expect(&msg, MsgType::ClientUpdate, round)?;
            let samples = msg.require_meta("samples")? as usize;
            updates.push(ClientUpdate { client_id: ep.client, round, params: msg.into_params()?, samples });
        }
        params = fedavg_aggregate(&updates)?;
        params.version = u64::from(round) + 1;
        reports.send(Report::Aggregate { round, params: params.clone() }).ok();
    }
    finish(&mut links, exp.config.global_epochs)
}

/// SL relay: hands the client-side model from one client to the next.
pub(super) fn relay_loop(
    exp: &Experiment<'_>,
    mut links: Vec<Endpoint>,
    mut params: ParameterSet,
    reports: &Sender<Report>,
    go: &Receiver<()>,
) -> Result<()> {
    for t in 0..exp.config.global_epochs {
        if t > 0 && go.recv().is_err() {
            return Ok(());
        }
        let round = t as u32;
        for k in relay_order(exp, t) {
            let ep = &mut links[k];
            ep.send(&WireMessage::new(MsgType::GlobalModel, round, k as u32).with_params(&params))?;
            let msg = ep.recv()?;
            expect(&msg, MsgType::ClientUpdate, round)?;
            params = msg.into_params()?;
        }
        reports.send(Report::Aggregate { round, params: params.clone() }).ok();
    }
    finish(&mut links, exp.config.global_epochs)
}
