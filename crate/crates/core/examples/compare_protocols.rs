//! Trains the same model with centralized SGD, FL, SL, SFLV1 and SFLV2 on
//! Gaussian blobs and prints accuracy, per-client traffic and epoch time.
//!
//! cargo run --release --example compare_protocols -- [clients] [epochs]

use splitfed::data::{partition_uniform, SyntheticBlobs};
use splitfed::model::build_architecture_for;
use splitfed::protocols::{run, Algo, Experiment, TrainConfig};
use splitfed::runner::mean_epoch_time;

fn main() -> splitfed::Result<()> {
    let mut args = std::env::args().skip(1);
    let clients: usize = args.next().map_or(5, |a| a.parse().expect("clients"));
    let epochs: usize = args.next().map_or(10, |a| a.parse().expect("epochs"));

    let blobs = SyntheticBlobs::new(16, 4, 7, 2.5)?;
    let train = blobs.sample(2000, 7);
    let test = blobs.sample(500, 8);
    let arch = build_architecture_for("mlp2", &[16], 4)?;
    let cfg =
        TrainConfig { learning_rate: 0.05, batch_size: 32, global_epochs: epochs, seed: 7, ..TrainConfig::default() };
    println!("{arch}");
    println!("{:<8}{:>10}{:>10}{:>16}{:>12}", "method", "train", "test", "elements/client", "epoch s");

    let one = partition_uniform(train.len(), 1, 7)?;
    let many = partition_uniform(train.len(), clients, 7)?;
    for algo in [Algo::Central, Algo::Fl, Algo::Sl, Algo::Sflv1, Algo::Sflv2] {
        let shards = if algo == Algo::Central { &one } else { &many };
        let exp = Experiment::new(algo, &arch, 1, &train, &test, shards, cfg);
        let out = run(&exp, &mut |_| Ok(()))?;
        let last = out.last().expect("at least one round");
        let per_client =
            last.clients.iter().map(|c| c.traffic.total_elements()).sum::<u64>() / last.clients.len() as u64;
        println!(
            "{:<8}{:>10.4}{:>10.4}{:>16}{:>12.4}",
            algo.to_string(),
            last.mean_train_acc(),
            last.mean_test_acc().unwrap_or(f64::NAN),
            per_client,
            mean_epoch_time(&out.rounds).map_or(0.0, |d| d.as_secs_f64())
        );
    }
    Ok(())
}
