//! Closed-form communication and time costs for LeNet on MNIST as the number
//! of clients grows, checked against traffic measured on a small run.

use splitfed::cost::{analytic_costs, compare_measured, CostInputs};
use splitfed::data::{partition_uniform, synthetic};
use splitfed::model::{build_architecture, build_architecture_for, default_cut, model_stats, split_at};
use splitfed::protocols::{run, Algo, Experiment, TrainConfig};
use splitfed::transport::TrafficCounter;

fn main() -> splitfed::Result<()> {
    let lenet = build_architecture("lenet_small")?;
    let stats = model_stats(&split_at(&lenet, default_cut(&lenet), 0)?);
    for k in [1, 5, 10, 50] {
        let table = analytic_costs(&CostInputs::from_stats(k, 60_000, &stats, 1e7, 1e6))?;
        println!("{table}");
    }

    // measured per-client elements against the formulas
    let samples = 600;
    let train = synthetic(samples, 16, 4, 1)?;
    let empty = train.head(0);
    let mlp = build_architecture_for("mlp2", &[16], 4)?;
    let mlp_stats = model_stats(&split_at(&mlp, 1, 0)?);
    let shards = partition_uniform(samples, 6, 1)?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 20, global_epochs: 2, seed: 1, ..TrainConfig::default() };
    let mut outcomes = Vec::new();
    for algo in Algo::DISTRIBUTED {
        outcomes.push((algo, run(&Experiment::new(algo, &mlp, 1, &train, &empty, &shards, cfg), &mut |_| Ok(()))?));
    }
    let table = analytic_costs(&CostInputs::from_stats(6, samples as u64, &mlp_stats, 1.0, 1.0))?;
    let runs: Vec<(Algo, &TrafficCounter)> = outcomes.iter().map(|(a, o)| (*a, o.traffic.as_ref())).collect();
    for c in compare_measured(&table, &runs)? {
        println!(
            "{:<6} analytic {:>8} measured {:>10.1} exact {}",
            c.algo.to_string(),
            c.analytic,
            c.measured_mean,
            c.is_exact()
        );
    }
    Ok(())
}
