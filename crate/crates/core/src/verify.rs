//! Self-checking suites behind the `verify` subcommand.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost::{analytic_costs, compare_measured, CostInputs};
use crate::data::{partition_uniform, synthetic, Dataset};
use crate::dp::{noisy_average, randomize_smashed, DpConfig};
use crate::error::{Error, Result};
use crate::layers::{layer_backward, layer_forward, LayerSpec};
use crate::model::{build_architecture_for, model_stats, split_at, ArchitectureSpec};
use crate::protocols::{run, Algo, Experiment, RunOutcome, ServerUpdate, TrainConfig};
use crate::rng::NoiseSource;
use crate::tensor::{GradientSet, ParameterSet, Tensor};
use crate::transport::{decode, encode, MsgType, TransportKind, WireMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracle,
    Dp,
    Codec,
    Gradcheck,
    Comm,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Oracle, Suite::Dp, Suite::Codec, Suite::Gradcheck, Suite::Comm];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Suite::Oracle),
            "dp" => Ok(Suite::Dp),
            "codec" => Ok(Suite::Codec),
            "gradcheck" => Ok(Suite::Gradcheck),
            "comm" => Ok(Suite::Comm),
            other => Err(Error::Config(format!("unknown suite {other:?} (oracle|dp|codec|gradcheck|comm)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Oracle => "oracle",
            Suite::Dp => "dp",
            Suite::Codec => "codec",
            Suite::Gradcheck => "gradcheck",
            Suite::Comm => "comm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, self.suite, c.name, c.detail)?;
        }
        write!(f, "{}: {}", self.suite, if self.passed() { "PASS" } else { "FAIL" })
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Oracle => oracle_checks()?,
        Suite::Dp => dp_checks()?,
        Suite::Codec => codec_checks(1000, 1)?,
        Suite::Gradcheck => gradcheck_checks(20, 1)?,
        Suite::Comm => comm_checks()?,
    };
    Ok(SuiteReport { suite, checks })
}

/// Largest elementwise relative difference between two congruent sets.
pub fn max_relative_difference(a: &ParameterSet, b: &ParameterSet) -> Result<f64> {
    a.ensure_congruent(b)?;
    let mut worst: f64 = 0.0;
    for ((_, x), (_, y)) in a.entries().iter().zip(b.entries()) {
        for (p, q) in x.data().iter().zip(y.data()) {
            if p != q {
                worst = worst.max((p - q).abs() / p.abs().max(q.abs()));
            }
        }
    }
    Ok(worst)
}

fn blobs_setup() -> Result<(Dataset, ArchitectureSpec)> {
    let train = synthetic(512, 16, 4, 11)?;
    let arch = build_architecture_for("mlp2", &[16], 4)?;
    Ok((train, arch))
}

fn quiet(exp: &Experiment<'_>) -> Result<RunOutcome> {
    run(exp, &mut |_| Ok(()))
}

/// With one client every protocol reduces to centralized SGD.
pub fn oracle_checks() -> Result<Vec<Check>> {
    let (train, arch) = blobs_setup()?;
    let empty = train.head(0);
    let shards = partition_uniform(train.len(), 1, 3)?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 32, global_epochs: 2, seed: 3, ..TrainConfig::default() };
    let base = Experiment::new(Algo::Central, &arch, 1, &train, &empty, &shards, cfg);
    let central = quiet(&base)?.final_params;
    let mut checks = Vec::new();
    for algo in Algo::DISTRIBUTED {
        let out = quiet(&Experiment { algo, ..base.clone() })?.final_params;
        let diff = max_relative_difference(&central, &out)?;
        let passed = if algo == Algo::Fl { diff <= 1e-9 } else { out.fingerprint() == central.fingerprint() };
        checks.push(Check::new(format!("K=1 {algo} vs central"), passed, format!("max relative difference {diff:e}")));
    }
    // one batch per epoch: the averaged server gradient is the batch gradient
    let single = TrainConfig { batch_size: 512, ..cfg };
    let literal_base = Experiment { config: single, ..base.clone() };
    let reference = quiet(&literal_base)?.final_params;
    let literal =
        quiet(&Experiment { algo: Algo::Sflv1, server_update: ServerUpdate::GradientAverage, ..literal_base.clone() })?
            .final_params;
    checks.push(Check::new(
        "K=1 sflv1 gradient-average, one batch",
        literal.fingerprint() == reference.fingerprint(),
        format!("max relative difference {:e}", max_relative_difference(&reference, &literal)?),
    ));
    Ok(checks)
}

/// Empirical variance of `draws` about zero.
fn variance(draws: &[f64]) -> f64 {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn dp_checks() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let dp = DpConfig::default();

    // clipping bound over a full private run
    let (train, arch) = blobs_setup()?;
    let empty = train.head(0);
    let shards = partition_uniform(train.len(), 4, 5)?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 32, global_epochs: 2, seed: 5, ..TrainConfig::default() };
    let mut exp = Experiment::new(Algo::Sflv1, &arch, 1, &train, &empty, &shards, cfg);
    exp.dp = DpConfig { gradient_dp: true, smashed_dp: true, ..dp };
    let private = quiet(&exp)?;
    let (mut examples, mut worst) = (0u64, 0.0f64);
    for r in &private.rounds {
        for c in &r.clients {
            examples += c.clip.examples;
            worst = worst.max(c.clip.max_norm);
        }
    }
    checks.push(Check::new(
        "clipped norms",
        examples == 2 * train.len() as u64 && worst <= dp.clip_norm + 1e-12,
        format!("{examples} per-example gradients, largest norm {worst} (bound {})", dp.clip_norm),
    ));

    // Gaussian mechanism on a zero gradient: each coordinate is pure noise
    let draws = 200_000;
    let zero = GradientSet::new(vec![("g".into(), Tensor::zeros(vec![draws]))]);
    let mut noise = NoiseSource::new(17);
    let noisy = noisy_average(&[zero], dp.noise_scale, dp.clip_norm, &mut noise)?;
    let var = variance(noisy.entries()[0].1.data());
    let want = (dp.noise_scale * dp.clip_norm).powi(2);
    checks.push(Check::new(
        "gaussian variance",
        (var / want - 1.0).abs() <= 0.05,
        format!("{var:.5} vs σ²C′² = {want:.5} over {draws} draws"),
    ));

    // Laplace mechanism: two rows give every column the range Δ
    let (cols, delta_i, eps) = (100_000, 2.0, 1.5);
    let mut data = vec![0.0; cols];
    data.extend(std::iter::repeat_n(delta_i, cols));
    let acts = Tensor::new(vec![2, cols], data)?;
    let out = randomize_smashed(&acts, eps, &mut noise);
    let scale = out.data().iter().zip(acts.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / (2 * cols) as f64;
    let want = delta_i / eps;
    checks.push(Check::new(
        "laplace scale",
        (scale / want - 1.0).abs() <= 0.05,
        format!("mean |noise| {scale:.5} vs ΔI/ε′ = {want:.5} over {} draws", 2 * cols),
    ));

    // disabled mechanisms leave the run untouched
    let mut plain = exp.clone();
    plain.dp = DpConfig::default();
    let mut off = exp.clone();
    off.dp = DpConfig { noise_scale: 9.0, clip_norm: 0.01, smashed_epsilon: 0.1, ..DpConfig::default() };
    let a = quiet(&plain)?.final_params;
    let b = quiet(&off)?.final_params;
    checks.push(Check::new(
        "disabled dp is inert",
        a.fingerprint() == b.fingerprint(),
        format!("{:016x} vs {:016x}", a.fingerprint(), b.fingerprint()),
    ));
    Ok(checks)
}

/// A random frame with 0–4 records of rank 0–3, some named `meta.*`, with
/// arbitrary f64 bit patterns.
pub fn random_message(rng: &mut impl RngCore) -> WireMessage {
    let msg_type = MsgType::from_code(rng.gen_range(1..=5)).expect("valid code");
    let mut m = WireMessage::new(msg_type, rng.gen(), rng.gen());
    for i in 0..rng.gen_range(0..=4) {
        let rank = rng.gen_range(0..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..=5)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f64::from_bits(rng.gen())).collect();
        let name = if rng.gen_bool(0.3) { format!("meta.k{i}") } else { format!("t{i}_{}", rng.gen::<u16>()) };
        m = m.with(name, Tensor::new(shape, data).expect("shape matches data"));
    }
    m
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
pub fn messages_bit_equal(a: &WireMessage, b: &WireMessage) -> bool {
    a.msg_type == b.msg_type
        && a.round == b.round
        && a.client_id == b.client_id
        && a.payload.len() == b.payload.len()
        && a.payload.iter().zip(&b.payload).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

pub fn codec_checks(messages: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..messages {
        let m = random_message(&mut rng);
        let bytes = encode(&m)?;
        let ok = bytes.len() == m.encoded_len()
            && decode(&bytes)
                .map(|d| messages_bit_equal(&d, &m) && encode(&d).ok() == Some(bytes.clone()))
                .unwrap_or(false);
        if !ok {
            failures += 1;
        }
    }
    let mut checks =
        vec![Check::new("round trip", failures == 0, format!("{failures} of {messages} random frames differ"))];

    let (train, arch) = blobs_setup()?;
    let empty = train.head(0);
    let shards = partition_uniform(train.len(), 3, 2)?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 64, global_epochs: 2, seed: 2, ..TrainConfig::default() };
    for algo in Algo::DISTRIBUTED {
        let mut exp = Experiment::new(algo, &arch, 1, &train, &empty, &shards, cfg);
        let inproc = quiet(&exp)?;
        exp.transport = TransportKind::Tcp;
        let tcp = quiet(&exp)?;
        let counts = |o: &RunOutcome| -> Vec<u64> {
            o.rounds.iter().flat_map(|r| r.clients.iter().map(|c| c.traffic.total_elements())).collect()
        };
        let same =
            counts(&inproc) == counts(&tcp) && inproc.final_params.fingerprint() == tcp.final_params.fingerprint();
        checks.push(Check::new(
            format!("{algo} inproc vs tcp"),
            same,
            format!("elements {:?} vs {:?}", counts(&inproc), counts(&tcp)),
        ));
    }
    Ok(checks)
}

/// A random instance of a layer kind with its per-sample input shape.
pub fn random_layer(kind: &str, rng: &mut impl RngCore) -> (LayerSpec, Vec<usize>) {
    let image = |rng: &mut dyn RngCore, min: usize| {
        vec![rng.gen_range(1..=3), rng.gen_range(min..=min + 4), rng.gen_range(min..=min + 4)]
    };
    let (token, input) = match kind {
        "dense" => (format!("dense:{}", rng.gen_range(1..=6)), vec![rng.gen_range(1..=8)]),
        "conv2d" => {
            let (k, s, p) = (rng.gen_range(1..=3), rng.gen_range(1..=2), rng.gen_range(0..=1));
            (format!("conv2d:{}:{k}:{s}:{p}", rng.gen_range(1..=3)), image(rng, k))
        }
        "maxpool2d" | "avgpool2d" => {
            let size = rng.gen_range(1..=3);
            (format!("{kind}:{size}:{}", rng.gen_range(1..=size)), image(rng, size))
        }
        "relu" | "tanh" | "flatten" => (kind.to_string(), image(rng, 1)),
        other => panic!("no layer kind {other}"),
    };
    (LayerSpec::parse(&token, &input).expect("valid random layer"), input)
}

pub const LAYER_KINDS: [&str; 7] = ["dense", "conv2d", "maxpool2d", "avgpool2d", "relu", "tanh", "flatten"];

/// Largest relative error between backprop and central differences for one
/// layer under the loss Σ cᵢyᵢ with random c.
pub fn layer_gradcheck(layer: &LayerSpec, input: &[usize], batch: usize, rng: &mut impl RngCore) -> Result<f64> {
    const H: f64 = 1e-6;
    let mut uniform = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let mut shape = vec![batch];
    shape.extend_from_slice(input);
    let x = uniform(shape)?;
    let params: Vec<Tensor> = layer.param_shapes().into_iter().map(|(_, s)| uniform(s)).collect::<Result<_>>()?;
    let y = layer_forward(layer, &x, &params)?;
    let c = uniform(y.shape().to_vec())?;
    let loss = |x: &Tensor, p: &[Tensor]| -> Result<f64> {
        let y = layer_forward(layer, x, p)?;
        Ok(y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum())
    };
    let (dx, dparams) = layer_backward(layer, &x, &c, &params)?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[j] += H;
        minus.data_mut()[j] -= H;
        let numeric = (loss(&plus, &params)? - loss(&minus, &params)?) / (2.0 * H);
        worst = worst.max(rel(dx.data()[j], numeric));
    }
    for (ti, g) in dparams.iter().enumerate() {
        for j in 0..g.len() {
            let (mut plus, mut minus) = (params.clone(), params.clone());
            plus[ti].data_mut()[j] += H;
            minus[ti].data_mut()[j] -= H;
            let numeric = (loss(&x, &plus)? - loss(&x, &minus)?) / (2.0 * H);
            worst = worst.max(rel(g.data()[j], numeric));
        }
    }
    Ok(worst)
}

pub fn gradcheck_checks(instances: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for kind in LAYER_KINDS {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (layer, input) = random_layer(kind, &mut rng);
            let batch = rng.gen_range(1..=3);
            worst = worst.max(layer_gradcheck(&layer, &input, batch, &mut rng)?);
        }
        checks.push(Check::new(kind, worst < 1e-4, format!("max relative error {worst:e} over {instances} instances")));
    }
    Ok(checks)
}

/// Measured per-client elements per round against the closed forms for
/// K ∈ {1, 5, 10} on mlp2.
pub fn comm_checks() -> Result<Vec<Check>> {
    let samples = 500;
    let train = synthetic(samples, 16, 4, 13)?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4)?;
    let stats = model_stats(&split_at(&arch, 1, 0)?);
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 20, global_epochs: 2, seed: 13, ..TrainConfig::default() };
    let mut checks = Vec::new();
    let mut split_per_client = Vec::new();
    let mut fl_per_client = Vec::new();
    for k in [1usize, 5, 10] {
        let shards = partition_uniform(samples, k, 13)?;
        let table = analytic_costs(&CostInputs::from_stats(k as u64, samples as u64, &stats, 1.0, 1.0))?;
        let outcomes: Vec<(Algo, RunOutcome)> = Algo::DISTRIBUTED
            .iter()
            .map(|&algo| quiet(&Experiment::new(algo, &arch, 1, &train, &empty, &shards, cfg)).map(|o| (algo, o)))
            .collect::<Result<_>>()?;
        let runs: Vec<(Algo, &crate::transport::TrafficCounter)> =
            outcomes.iter().map(|(a, o)| (*a, o.traffic.as_ref())).collect();
        for cmp in compare_measured(&table, &runs)? {
            checks.push(Check::new(
                format!("K={k} {}", cmp.algo),
                cmp.is_exact(),
                format!(
                    "measured {} vs analytic {}, max deviation {}",
                    cmp.measured_mean, cmp.analytic, cmp.max_abs_deviation
                ),
            ));
            match cmp.algo {
                Algo::Sl => split_per_client.push(cmp.measured_mean),
                Algo::Fl => fl_per_client.push(cmp.measured_mean),
                _ => {}
            }
        }
    }
    checks.push(Check::new(
        "split traffic falls with K",
        split_per_client.windows(2).all(|w| w[1] < w[0]),
        format!("{split_per_client:?}"),
    ));
    checks.push(Check::new(
        "fl traffic constant in K",
        fl_per_client.windows(2).all(|w| w[1] == w[0]),
        format!("{fl_per_client:?}"),
    ));
    Ok(checks)
}
