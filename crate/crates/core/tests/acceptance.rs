//! End-to-end acceptance checks, run sequentially with one result line each.
//! Set `ACCEPTANCE_ONLY=1,3` to run a subset.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitfed::cost::{analytic_costs, compare_measured, CostInputs};
use splitfed::data::{load_idx, mnist_paths, partition_uniform, synthetic, SyntheticBlobs, MNIST_MEAN, MNIST_STD};
use splitfed::dp::{clip_gradient, noisy_average, per_example_gradients, randomize_smashed, DpConfig};
use splitfed::layers::{layer_backward, layer_forward, softmax_cross_entropy, Initializer};
use splitfed::model::{build_architecture, build_architecture_for, default_cut, model_stats, split_at};
use splitfed::protocols::{run, Algo, Experiment, RunOutcome, ServerUpdate, TrainConfig};
use splitfed::rng::NoiseSource;
use splitfed::runner::mean_epoch_time;
use splitfed::tensor::{GradientSet, ParameterSet, Tensor};
use splitfed::transport::{decode, encode, TrafficCounter, TransportKind};
use splitfed::verify::{messages_bit_equal, random_layer, random_message, LAYER_KINDS};

type Verdict = Result<(bool, String), String>;

fn go(exp: &Experiment<'_>) -> Result<RunOutcome, String> {
    run(exp, &mut |_| Ok(())).map_err(|e| e.to_string())
}

fn max_rel(a: &ParameterSet, b: &ParameterSet) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, x), (_, y)) in a.entries().iter().zip(b.entries()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            if p != q {
                worst = worst.max((p - q).abs() / p.abs().max(q.abs()));
            }
        }
    }
    worst
}

/// (16 + 1)·128 + (128 + 1)·4 for mlp2 on 16 features and 4 classes.
const MLP2_PARAMS: u64 = 17 * 128 + 129 * 4;
const MLP2_CLIENT_PARAMS: u64 = 17 * 128;
const MLP2_SMASHED: u64 = 128;

fn criterion_1() -> Verdict {
    let train = synthetic(512, 16, 4, 21).map_err(|e| e.to_string())?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4).map_err(|e| e.to_string())?;
    let shards = partition_uniform(512, 1, 21).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 32,
        global_epochs: 1,
        local_epochs: 1,
        seed: 21,
        ..TrainConfig::default()
    };
    let base = Experiment::new(Algo::Central, &arch, 1, &train, &empty, &shards, cfg);
    let central = go(&base)?.final_params;
    let mut ok = true;
    let mut detail = Vec::new();
    for algo in [Algo::Sl, Algo::Sflv2, Algo::Sflv1] {
        let p = go(&Experiment { algo, ..base.clone() })?.final_params;
        let same = p.entries() == central.entries();
        ok &= same;
        detail.push(format!("{algo} bit-identical={same}"));
    }
    let one_batch = Experiment { config: TrainConfig { batch_size: 512, ..cfg }, ..base.clone() };
    let reference = go(&one_batch)?.final_params;
    let literal =
        go(&Experiment { algo: Algo::Sflv1, server_update: ServerUpdate::GradientAverage, ..one_batch.clone() })?
            .final_params;
    let same = literal.entries() == reference.entries();
    ok &= same;
    detail.push(format!("sflv1 gradient-average single batch bit-identical={same}"));
    let fl = go(&Experiment { algo: Algo::Fl, ..base.clone() })?.final_params;
    let rel = max_rel(&central, &fl);
    ok &= rel <= 1e-9;
    detail.push(format!("fl max relative diff {rel:e}"));
    Ok((ok, detail.join(", ")))
}

fn criterion_2() -> Verdict {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (i, l) = mnist_paths(&dir, true);
    let train = load_idx(i, l).map_err(|e| format!("MNIST training set: {e}"))?.head(10_000);
    let (i, l) = mnist_paths(&dir, false);
    let test = load_idx(i, l).map_err(|e| format!("MNIST test set: {e}"))?.head(2_000);
    let train = train.standardized(MNIST_MEAN, MNIST_STD);
    let test = test.standardized(MNIST_MEAN, MNIST_STD);
    let arch = build_architecture("lenet_small").map_err(|e| e.to_string())?;
    let shards = partition_uniform(train.len(), 5, 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        learning_rate: 0.004,
        momentum: 0.9,
        batch_size: 64,
        global_epochs: 10,
        local_epochs: 3,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut accs = Vec::new();
    for algo in Algo::DISTRIBUTED {
        let mut exp = Experiment::new(algo, &arch, default_cut(&arch), &train, &test, &shards, cfg);
        exp.init = Initializer::HeUniform;
        let start = Instant::now();
        let out = go(&exp)?;
        let acc = out.last().and_then(|r| r.mean_test_acc()).ok_or("no test accuracy")?;
        println!("  {algo}: mean test accuracy {acc:.4} in {:.0}s", start.elapsed().as_secs_f64());
        accs.push((algo, acc));
    }
    let lo = accs.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
    let hi = accs.iter().map(|a| a.1).fold(0.0, f64::max);
    let detail = accs.iter().map(|(a, v)| format!("{a} {:.2}%", v * 100.0)).collect::<Vec<_>>().join(", ");
    Ok((lo >= 0.90 && hi - lo <= 0.03, format!("{detail}; spread {:.2} pp", (hi - lo) * 100.0)))
}

fn criterion_3() -> Verdict {
    let samples = 1000usize;
    let train = synthetic(samples, 16, 4, 5).map_err(|e| e.to_string())?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4).map_err(|e| e.to_string())?;
    let stats = model_stats(&split_at(&arch, 1, 0).map_err(|e| e.to_string())?);
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 50, global_epochs: 2, seed: 5, ..TrainConfig::default() };
    let mut ok = true;
    let mut per_k = Vec::new();
    for k in [1usize, 5, 10] {
        let shards = partition_uniform(samples, k, 5).map_err(|e| e.to_string())?;
        let mut outs = Vec::new();
        for algo in Algo::DISTRIBUTED {
            let out = go(&Experiment::new(algo, &arch, 1, &train, &empty, &shards, cfg))?;
            let expected = match algo {
                Algo::Fl => 2 * MLP2_PARAMS,
                _ => 2 * (samples / k) as u64 * MLP2_SMASHED + 2 * MLP2_CLIENT_PARAMS,
            };
            for r in &out.rounds {
                for c in &r.clients {
                    if c.traffic.total_elements() != expected {
                        ok = false;
                        println!(
                            "  K={k} {algo} client {} round {}: {} != {expected}",
                            c.client,
                            r.round,
                            c.traffic.total_elements()
                        );
                    }
                }
            }
            per_k.push((k, algo, expected));
            outs.push((algo, out));
        }
        let table = analytic_costs(&CostInputs::from_stats(k as u64, samples as u64, &stats, 1.0, 1.0))
            .map_err(|e| e.to_string())?;
        let runs: Vec<(Algo, &TrafficCounter)> = outs.iter().map(|(a, o)| (*a, o.traffic.as_ref())).collect();
        for cmp in compare_measured(&table, &runs).map_err(|e| e.to_string())? {
            ok &= cmp.is_exact();
        }
    }
    let series = |algo: Algo| -> Vec<u64> { per_k.iter().filter(|p| p.1 == algo).map(|p| p.2).collect() };
    for algo in [Algo::Sl, Algo::Sflv1, Algo::Sflv2] {
        ok &= series(algo).windows(2).all(|w| w[1] < w[0]);
    }
    ok &= series(Algo::Fl).windows(2).all(|w| w[1] == w[0]);
    Ok((ok, format!("per-client elements SL {:?}, FL {:?} for K = 1, 5, 10", series(Algo::Sl), series(Algo::Fl))))
}

fn criterion_4() -> Verdict {
    let samples = 640;
    let train = synthetic(samples, 16, 4, 8).map_err(|e| e.to_string())?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 16, global_epochs: 3, seed: 8, ..TrainConfig::default() };
    let mut ok = true;
    let mut detail = Vec::new();
    for k in [4usize, 5, 8] {
        let shards = partition_uniform(samples, k, 8).map_err(|e| e.to_string())?;
        let epoch = |algo| -> Result<f64, String> {
            let mut exp = Experiment::new(algo, &arch, 1, &train, &empty, &shards, cfg);
            exp.compute_delay = Some(Duration::from_millis(200));
            let out = go(&exp)?;
            Ok(mean_epoch_time(&out.rounds).ok_or("no rounds")?.as_secs_f64())
        };
        let sl = epoch(Algo::Sl)?;
        let v1 = epoch(Algo::Sflv1)?;
        let ratio = sl / v1;
        let within = ratio >= 0.8 * k as f64 && ratio <= 1.2 * k as f64;
        ok &= within;
        detail.push(format!("K={k}: SL {sl:.2}s / SFLV1 {v1:.2}s = {ratio:.2}"));
    }
    Ok((ok, detail.join(", ")))
}

fn criterion_5() -> Verdict {
    let dp = DpConfig { gradient_dp: true, smashed_dp: true, ..DpConfig::default() };
    let mut ok = true;
    let mut detail = Vec::new();

    // (a) clipping bound over a full private run, plus an independent norm
    // computation on freshly clipped per-example gradients
    let train = synthetic(600, 16, 4, 3).map_err(|e| e.to_string())?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4).map_err(|e| e.to_string())?;
    let shards = partition_uniform(600, 5, 3).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 32, global_epochs: 3, seed: 3, ..TrainConfig::default() };
    let mut exp = Experiment::new(Algo::Sflv1, &arch, 1, &train, &empty, &shards, cfg);
    exp.dp = dp;
    let private = go(&exp)?;
    let worst_run = private.rounds.iter().flat_map(|r| r.clients.iter().map(|c| c.clip.max_norm)).fold(0.0, f64::max);
    let examples: u64 = private.rounds.iter().flat_map(|r| r.clients.iter().map(|c| c.clip.examples)).sum();
    let params = arch.init_params(Initializer::Gaussian { std: 3.0 }, 9);
    let (client, _) = params.split_at(arch.tensor_count(0..1));
    let seg = arch.segment(0..1);
    let (x, _) = train.batch(&(0..64).collect::<Vec<_>>());
    let trace = seg.forward_traced(&client, &x).map_err(|e| e.to_string())?;
    let upstream =
        Tensor::new(trace.output.shape().to_vec(), trace.output.data().iter().map(|v| v * 0.7 - 0.1).collect())
            .map_err(|e| e.to_string())?;
    let mut worst_direct: f64 = 0.0;
    for g in per_example_gradients(&seg, &client, &trace, &upstream).map_err(|e| e.to_string())? {
        let c = clip_gradient(&g, dp.clip_norm);
        let norm = c.entries().iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        worst_direct = worst_direct.max(norm);
    }
    let bound = dp.clip_norm + 1e-12;
    ok &= worst_run <= bound && worst_direct <= bound && examples == 3 * 600;
    detail.push(format!("(a) max clipped norm {worst_run} over {examples} examples, {worst_direct} direct"));

    // (b) noise statistics
    let draws = 100_000usize;
    let mut noise = NoiseSource::new(77);
    let zero = GradientSet::new(vec![("g".into(), Tensor::zeros(vec![draws]))]);
    let noisy = noisy_average(&[zero], dp.noise_scale, dp.clip_norm, &mut noise).map_err(|e| e.to_string())?;
    let v = noisy.entries()[0].1.data();
    let mean = v.iter().sum::<f64>() / draws as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let want_var = (dp.noise_scale * dp.clip_norm).powi(2);
    let (half, range, eps) = (draws / 2, 3.0, 1.0);
    let mut data = vec![-1.0; half];
    data.extend(std::iter::repeat_n(-1.0 + range, half));
    let acts = Tensor::new(vec![2, half], data).map_err(|e| e.to_string())?;
    let noised = randomize_smashed(&acts, eps, &mut noise);
    let scale = noised.data().iter().zip(acts.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / draws as f64;
    let want_scale = range / eps;
    ok &= (var / want_var - 1.0).abs() <= 0.05 && (scale / want_scale - 1.0).abs() <= 0.05;
    detail.push(format!(
        "(b) gaussian var {var:.4} vs {want_var:.4}, laplace scale {scale:.4} vs {want_scale:.4} over {draws} draws each"
    ));

    // (c) disabled mechanisms
    let mut inert = true;
    for algo in [Algo::Sl, Algo::Sflv1, Algo::Sflv2] {
        let plain = go(&Experiment { algo, dp: DpConfig::default(), ..exp.clone() })?.final_params;
        let off = DpConfig { noise_scale: 4.0, clip_norm: 0.01, smashed_epsilon: 0.2, ..DpConfig::default() };
        let disabled = go(&Experiment { algo, dp: off, ..exp.clone() })?.final_params;
        inert &= plain.entries() == disabled.entries();
    }
    ok &= inert;
    detail.push(format!("(c) disabled dp bit-identical={inert}"));
    Ok((ok, detail.join("; ")))
}

fn criterion_6() -> Verdict {
    let (dim, classes, scale, n) = (16, 4, 2.5, 1000);
    let mut sums = [0.0f64; 3];
    let seeds = [0u64, 1, 2];
    for &seed in &seeds {
        let blobs = SyntheticBlobs::new(dim, classes, seed, scale).map_err(|e| e.to_string())?;
        let train = blobs.sample(n, seed);
        let test = blobs.sample(1000, seed + 100);
        let arch = build_architecture_for("mlp2", &[dim], classes).map_err(|e| e.to_string())?;
        let shards = partition_uniform(n, 5, seed).map_err(|e| e.to_string())?;
        let cfg =
            TrainConfig { learning_rate: 0.05, batch_size: 64, global_epochs: 45, seed, ..TrainConfig::default() };
        for (slot, eps) in [None, Some(9.0), Some(1.0)].into_iter().enumerate() {
            let mut exp = Experiment::new(Algo::Sflv1, &arch, 1, &train, &test, &shards, cfg);
            if let Some(e) = eps {
                exp.dp = DpConfig {
                    gradient_dp: true,
                    smashed_dp: true,
                    noise_scale: 1.3,
                    delta: 1e-5,
                    smashed_epsilon: e,
                    ..DpConfig::default()
                };
            }
            let out = go(&exp)?;
            sums[slot] += out.last().and_then(|r| r.mean_test_acc()).ok_or("no test accuracy")?;
        }
    }
    let [plain, eps9, eps1] = sums.map(|s| s / seeds.len() as f64);
    Ok((
        eps9 > eps1 && plain > eps9 && plain > eps1,
        format!("mean final test accuracy: no dp {plain:.4}, ε′=9 {eps9:.4}, ε′=1 {eps1:.4}"),
    ))
}

fn criterion_7() -> Verdict {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ok = true;
    let mut detail = Vec::new();
    for kind in LAYER_KINDS {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let (layer, input) = random_layer(kind, &mut rng);
            let batch = rng.gen_range(1..=3);
            let mut rand_tensor = |shape: Vec<usize>| {
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let mut shape = vec![batch];
            shape.extend_from_slice(&input);
            let x = rand_tensor(shape);
            let params: Vec<Tensor> = layer.param_shapes().into_iter().map(|(_, s)| rand_tensor(s)).collect();
            let y = layer_forward(&layer, &x, &params).map_err(|e| e.to_string())?;
            let c = rand_tensor(y.shape().to_vec());
            let loss = |x: &Tensor, p: &[Tensor]| -> f64 {
                let y = layer_forward(&layer, x, p).unwrap();
                y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
            };
            let (dx, dp) = layer_backward(&layer, &x, &c, &params).map_err(|e| e.to_string())?;
            let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            for j in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[j] += H;
                xm.data_mut()[j] -= H;
                worst = worst.max(rel(dx.data()[j], (loss(&xp, &params) - loss(&xm, &params)) / (2.0 * H)));
            }
            for (ti, g) in dp.iter().enumerate() {
                for j in 0..g.len() {
                    let (mut pp, mut pm) = (params.clone(), params.clone());
                    pp[ti].data_mut()[j] += H;
                    pm[ti].data_mut()[j] -= H;
                    worst = worst.max(rel(g.data()[j], (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * H)));
                }
            }
        }
        ok &= worst < 1e-4;
        detail.push(format!("{kind} {worst:.1e}"));
    }
    // the loss head used by every model
    let logits = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let labels = [1usize, 3, 0];
    let (_, g) = softmax_cross_entropy(&logits, &labels).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for j in 0..logits.len() {
        let (mut p, mut m) = (logits.clone(), logits.clone());
        p.data_mut()[j] += H;
        m.data_mut()[j] -= H;
        let num =
            (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0) / (2.0 * H);
        worst = worst.max((g.data()[j] - num).abs() / g.data()[j].abs().max(num.abs()).max(1e-6));
    }
    ok &= worst < 1e-4;
    detail.push(format!("softmax-ce {worst:.1e}"));
    Ok((ok, format!("max relative error per kind (20 instances each): {}", detail.join(", "))))
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bad = 0;
    for _ in 0..1000 {
        let m = random_message(&mut rng);
        let bytes = encode(&m).map_err(|e| e.to_string())?;
        match decode(&bytes) {
            Ok(d) if messages_bit_equal(&d, &m) && encode(&d).map(|b| b == bytes).unwrap_or(false) => {}
            _ => bad += 1,
        }
    }
    let train = synthetic(400, 16, 4, 4).map_err(|e| e.to_string())?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4).map_err(|e| e.to_string())?;
    let shards = partition_uniform(400, 4, 4).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 32, global_epochs: 2, seed: 4, ..TrainConfig::default() };
    let mut same = true;
    for algo in Algo::DISTRIBUTED {
        let mut exp = Experiment::new(algo, &arch, 1, &train, &empty, &shards, cfg);
        let a = go(&exp)?;
        exp.transport = TransportKind::Tcp;
        let b = go(&exp)?;
        let counts = |o: &RunOutcome| -> Vec<(u64, u64)> {
            o.rounds
                .iter()
                .flat_map(|r| r.clients.iter().map(|c| (c.traffic.uploaded_elements, c.traffic.downloaded_elements)))
                .collect()
        };
        same &= counts(&a) == counts(&b) && a.final_params.entries() == b.final_params.entries();
    }
    Ok((bad == 0 && same, format!("{bad} of 1000 round trips differ; inproc and tcp element counts identical={same}")))
}

type Criterion = (u32, &'static str, Duration, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "K=1 equivalence oracle", Duration::from_secs(60), criterion_1),
        (2, "scaled accuracy parity on MNIST", Duration::from_secs(15 * 60), criterion_2),
        (3, "communication exactness", Duration::from_secs(5 * 60), criterion_3),
        (4, "time trend SL vs SFLV1", Duration::from_secs(10 * 60), criterion_4),
        (5, "DP mechanism properties", Duration::from_secs(2 * 60), criterion_5),
        (6, "DP utility trend", Duration::from_secs(10 * 60), criterion_6),
        (7, "gradient correctness", Duration::from_secs(60), criterion_7),
        (8, "codec and accounting", Duration::from_secs(60), criterion_8),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let verdict = check();
        let took = start.elapsed();
        let (passed, detail) = match verdict {
            Ok((p, d)) => (p && took <= budget, d),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {n} ({name}): {} [{:.1}s of {}s] {detail}",
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
