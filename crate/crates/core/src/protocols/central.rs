use std::thread;
use std::time::Instant;

use super::roles::load_batch;
use super::{batch_plan, count_correct, evaluate, ClientRound, Experiment, RoundReport, RunOutcome};
use crate::dp::ClipStats;
use crate::error::Result;
use crate::layers::softmax_cross_entropy;
use crate::tensor::ParameterSet;
use crate::transport::{ClientTraffic, TrafficCounter};

/// Plain mini-batch SGD on the whole network over the single shard, with
/// the same batch schedule client 0 would follow.
pub fn train_centralized(
    exp: &Experiment<'_>,
    on_round: &mut dyn FnMut(&RoundReport) -> Result<()>,
) -> Result<RunOutcome> {
    let cfg = &exp.config;
    let full = exp.arch.full();
    let layers = exp.arch.layers.len();
    let mut params = exp.arch.init_params(exp.init, cfg.seed);
    let shard = &exp.shards[0].indices;
    let mut rounds = Vec::with_capacity(cfg.global_epochs);
    for t in 0..cfg.global_epochs {
        let start = Instant::now();
        let start_hash = params.fingerprint();
        let (mut correct, mut seen, mut steps) = (0u64, 0u64, 0u64);
        let mut opt = cfg.optimizer();
        for e in 0..cfg.local_epochs {
            for batch in batch_plan(shard, cfg.batch_size, cfg.seed, 0, t, e) {
                if let Some(d) = exp.compute_delay {
                    thread::sleep(d);
                }
                let (x, y) = load_batch(exp, &batch)?;
                let trace = full.forward_traced(&params, &x)?;
                let (_, dlogits) = softmax_cross_entropy(&trace.output, &y)?;
                correct += count_correct(&trace.output, &y);
                seen += y.len() as u64;
                let (_, grads) = full.backward(&params, &trace, &dlogits)?;
                opt.step(&mut params, &grads)?;
                steps += 1;
            }
        }
        let wall_time = start.elapsed();
        let test_acc = if exp.test.is_empty() {
            None
        } else {
            Some(evaluate(exp.arch, layers, &params, &ParameterSet::default(), exp.test)?)
        };
        let report = RoundReport {
            round: t as u32,
            clients: vec![ClientRound {
                client: 0,
                train_acc: if seen == 0 { 0.0 } else { correct as f64 / seen as f64 },
                test_acc,
                samples: shard.len(),
                start_hash,
                end_hash: params.fingerprint(),
                traffic: ClientTraffic::default(),
                clip: ClipStats::default(),
            }],
            wall_time,
            server_updates: steps,
        };
        on_round(&report)?;
        rounds.push(report);
    }
    Ok(RunOutcome {
        rounds,
        final_params: params,
        traffic: std::sync::Arc::new(TrafficCounter::new()),
        trace: Vec::new(),
    })
}
