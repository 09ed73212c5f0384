//! SFLV2 on an MNIST subset with LeNet cut after its first pooling layer.
//! Expects the IDX files (plain or gzip) in data/mnist at the workspace root.
//!
//! cargo run --release --example mnist_splitfed -- [data_dir] [epochs]

use splitfed::data::{load_idx, mnist_paths, partition_uniform, MNIST_MEAN, MNIST_STD};
use splitfed::layers::Initializer;
use splitfed::model::{build_architecture, default_cut};
use splitfed::protocols::{run, Algo, Experiment, TrainConfig};

fn main() -> splitfed::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist").into());
    let epochs: usize = args.next().map_or(3, |a| a.parse().expect("epochs"));

    let (i, l) = mnist_paths(&dir, true);
    let train = load_idx(i, l)?.head(5000).standardized(MNIST_MEAN, MNIST_STD);
    let (i, l) = mnist_paths(&dir, false);
    let test = load_idx(i, l)?.head(1000).standardized(MNIST_MEAN, MNIST_STD);
    println!("{} training and {} test images of shape {:?}", train.len(), test.len(), train.sample_shape());

    let arch = build_architecture("lenet_small")?;
    let shards = partition_uniform(train.len(), 5, 0)?;
    let cfg = TrainConfig {
        learning_rate: 0.004,
        momentum: 0.9,
        local_epochs: 1,
        batch_size: 64,
        global_epochs: epochs,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut exp = Experiment::new(Algo::Sflv2, &arch, default_cut(&arch), &train, &test, &shards, cfg);
    exp.init = Initializer::HeUniform;
    run(&exp, &mut |r| {
        println!(
            "epoch {:>3}  train {:.4}  test {:.4}  {:.1}s",
            r.round + 1,
            r.mean_train_acc(),
            r.mean_test_acc().unwrap_or(f64::NAN),
            r.wall_time.as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}
