//! Frames messages with the binary codec, then runs SL over loopback TCP and
//! in-process channels and shows that both carry the same traffic.

use splitfed::data::{partition_uniform, synthetic};
use splitfed::model::build_architecture_for;
use splitfed::protocols::{run, Algo, Experiment, TrainConfig};
use splitfed::tensor::Tensor;
use splitfed::transport::{decode, encode, MsgType, TransportKind, WireMessage};

fn main() -> splitfed::Result<()> {
    let m = WireMessage::new(MsgType::Smashed, 3, 1)
        .with("activations", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.25])?)
        .with("labels", Tensor::from_vec(vec![1.0, 0.0]))
        .with_meta("batch", 0.0);
    let bytes = encode(&m)?;
    println!(
        "{} frame: {} bytes, {} payload elements, {} label elements",
        m.msg_type,
        bytes.len(),
        m.payload_elements(),
        m.label_elements()
    );
    println!("header {:02x?}", &bytes[..13]);
    assert_eq!(decode(&bytes)?, m);

    let train = synthetic(300, 16, 4, 2)?;
    let empty = train.head(0);
    let arch = build_architecture_for("mlp2", &[16], 4)?;
    let shards = partition_uniform(300, 3, 2)?;
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 25, global_epochs: 2, seed: 2, ..TrainConfig::default() };
    for transport in [TransportKind::InProc, TransportKind::Tcp] {
        let mut exp = Experiment::new(Algo::Sl, &arch, 1, &train, &empty, &shards, cfg);
        exp.transport = transport;
        exp.record_trace = true;
        let out = run(&exp, &mut |_| Ok(()))?;
        println!("{transport:?}: final model fingerprint {:016x}", out.final_params.fingerprint());
        for k in 0..shards.len() {
            let t = out.traffic.client_totals(k);
            println!(
                "  client {k}: up {} elements / {} bytes, down {} elements / {} bytes",
                t.uploaded_elements, t.uploaded_bytes, t.downloaded_elements, t.downloaded_bytes
            );
        }
        println!("  first trace lines (round,type,client,elements):");
        for e in out.trace.iter().take(4) {
            println!("    {e}");
        }
    }
    Ok(())
}
