//! Cuts LeNet between the client and the main server, checks that the two
//! halves compose to the full network, and back-propagates through the cut.

use splitfed::layers::softmax_cross_entropy;
use splitfed::model::{build_architecture, default_cut, model_stats, split_at};
use splitfed::tensor::Tensor;

fn main() -> splitfed::Result<()> {
    let arch = build_architecture("lenet_small")?;
    println!("{arch}");
    let model = split_at(&arch, default_cut(&arch), 42)?;
    let stats = model_stats(&model);
    println!(
        "cut after layer {}: |W| = {}, client holds {} ({:.4}), smashed size q = {}",
        model.cut_index - 1,
        stats.total_params,
        stats.client_params,
        stats.client_fraction,
        stats.smashed_size
    );

    let batch = 4;
    let x = Tensor::new(vec![batch, 1, 32, 32], (0..batch * 1024).map(|i| ((i * 37) % 255) as f64 / 255.0).collect())?;
    let labels = [0, 3, 7, 9];

    // client forward, smashed data to the server, server forward
    let client_trace = model.client().forward_traced(&model.client_params, &x)?;
    println!("smashed activations {:?}", client_trace.output.shape());
    let server_trace = model.server().forward_traced(&model.server_params, &client_trace.output)?;
    let whole = arch.full().forward(&model.full_params(), &x)?;
    assert_eq!(server_trace.output.data(), whole.data());
    println!("split forward equals the unsplit forward");

    // server backward returns the gradient the client needs at the cut
    let (loss, dlogits) = softmax_cross_entropy(&server_trace.output, &labels)?;
    let (dsmashed, server_grads) = model.server().backward(&model.server_params, &server_trace, &dlogits)?;
    let (_, client_grads) = model.client().backward(&model.client_params, &client_trace, &dsmashed)?;
    println!("loss {loss:.6}");
    println!("server gradient norm {:.6}, client gradient norm {:.6}", server_grads.l2_norm(), client_grads.l2_norm());
    for (name, g) in client_grads.entries() {
        println!("  {name} {:?}", g.shape());
    }
    Ok(())
}
