//! Client-side privacy: per-example clipping with Gaussian noise on client
//! gradients and Laplace noise on smashed data, then the accuracy cost of
//! SFLV1 training at two privacy levels.

use splitfed::data::{partition_uniform, SyntheticBlobs};
use splitfed::dp::{clip_gradient, noisy_average, randomize_smashed, report_budget, DpConfig};
use splitfed::model::build_architecture_for;
use splitfed::protocols::{run, Algo, Experiment, TrainConfig};
use splitfed::rng::NoiseSource;
use splitfed::tensor::{GradientSet, Tensor};

fn main() -> splitfed::Result<()> {
    let mut noise = NoiseSource::new(1);
    let g = GradientSet::new(vec![("w".into(), Tensor::from_vec(vec![3.0, 4.0]))]);
    let clipped = clip_gradient(&g, 1.0);
    println!("clip [3, 4] to norm 1 -> {:?}", clipped.entries()[0].1.data());
    let noisy = noisy_average(&[clipped.clone(), clipped], 1.3, 1.0, &mut noise)?;
    println!("noisy average of two copies -> {:?}", noisy.entries()[0].1.data());
    let acts = Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.5, 1.0, 1.0, 1.0])?;
    println!(
        "smashed data with ε′ = 1 -> {:?} (constant column untouched)",
        randomize_smashed(&acts, 1.0, &mut noise).data()
    );

    let blobs = SyntheticBlobs::new(16, 4, 0, 2.5)?;
    let train = blobs.sample(1000, 0);
    let test = blobs.sample(1000, 100);
    let arch = build_architecture_for("mlp2", &[16], 4)?;
    let shards = partition_uniform(train.len(), 5, 0)?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 64, global_epochs: 45, seed: 0, ..TrainConfig::default() };
    for eps in [None, Some(9.0), Some(1.0)] {
        let mut exp = Experiment::new(Algo::Sflv1, &arch, 1, &train, &test, &shards, cfg);
        if let Some(e) = eps {
            exp.dp = DpConfig { gradient_dp: true, smashed_dp: true, smashed_epsilon: e, ..DpConfig::default() };
        }
        let out = run(&exp, &mut |_| Ok(()))?;
        let clip = out.rounds.iter().flat_map(|r| r.clients.iter().map(|c| c.clip.max_norm)).fold(0.0, f64::max);
        println!(
            "{:<10} test accuracy {:.4}  max clipped norm {:.3}  declared budget {}",
            eps.map_or("no dp".into(), |e| format!("ε′ = {e}")),
            out.last().and_then(|r| r.mean_test_acc()).unwrap_or(f64::NAN),
            clip,
            report_budget(&exp.dp)
        );
    }
    Ok(())
}
