//! Drives a run from `key = value` text the way the CLI does, streaming the
//! metrics CSV and writing a checkpoint into a temporary directory.

use splitfed::checkpoint::load_checkpoint;
use splitfed::runner::{prepare, RunConfig};

const CONFIG: &str = "
# FL on Gaussian blobs
algo = fl
clients = 4
dataset = synthetic
arch = mlp2
synthetic_samples = 800
synthetic_test = 200
global_epochs = 5
local_epochs = 2
batch_size = 32
lr = 0.05
seed = 3
";

fn main() -> splitfed::Result<()> {
    let dir = std::env::temp_dir().join(format!("splitfed-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(CONFIG)?;
    cfg.set("out", dir.join("metrics.csv").to_str().expect("utf-8 path"))?;

    let prepared = prepare(&cfg)?;
    let summary = prepared
        .execute_with(&mut |r| println!("epoch {} done, test accuracy {:?}", r.round + 1, r.mean_test_acc()))?;
    println!("\n{}", std::fs::read_to_string(&summary.metrics)?);
    let params = load_checkpoint(&summary.checkpoint)?;
    println!(
        "checkpoint {} holds {} tensors, {} parameters",
        summary.checkpoint.display(),
        params.len(),
        params.element_count()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
