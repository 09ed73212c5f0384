use proptest::collection::vec;
use proptest::prelude::*;
use splitfed::checkpoint::{decode_checkpoint, encode_checkpoint};
use splitfed::cost::{analytic_costs, CostInputs};
use splitfed::data::partition_uniform;
use splitfed::dp::{clip_gradient, randomize_smashed};
use splitfed::protocols::{batch_plan, batches_per_epoch, fedavg_aggregate, Algo, ClientUpdate};
use splitfed::rng::NoiseSource;
use splitfed::tensor::{GradientSet, ParameterSet, Tensor};
use splitfed::transport::{decode, encode, MsgType, WireMessage};

fn shape() -> impl Strategy<Value = Vec<usize>> {
    vec(1usize..5, 0..4)
}

/// Tensors whose elements are arbitrary bit patterns, NaNs and infinities included.
fn raw_tensor() -> impl Strategy<Value = Tensor> {
    shape().prop_flat_map(|s| {
        let n: usize = s.iter().product();
        vec(any::<u64>(), n)
            .prop_map(move |bits| Tensor::new(s.clone(), bits.into_iter().map(f64::from_bits).collect()).unwrap())
    })
}

fn finite_tensor(s: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = s.iter().product();
    vec(-10.0f64..10.0, n).prop_map(move |d| Tensor::new(s.clone(), d).unwrap())
}

fn message() -> impl Strategy<Value = WireMessage> {
    (
        prop::sample::select(MsgType::ALL.to_vec()),
        any::<u32>(),
        any::<u32>(),
        vec(("[a-z_.]{1,12}", raw_tensor()), 0..5),
    )
        .prop_map(|(t, round, client, payload)| WireMessage { msg_type: t, round, client_id: client, payload })
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Parameter sets sharing one layout, one per client.
fn congruent_sets() -> impl Strategy<Value = Vec<ParameterSet>> {
    (vec(shape(), 1..4), 1usize..6).prop_flat_map(|(shapes, k)| {
        let one = shapes.into_iter().map(finite_tensor).collect::<Vec<_>>();
        vec(one, k).prop_map(|sets| {
            sets.into_iter()
                .map(|ts| {
                    ParameterSet::new(ts.into_iter().enumerate().map(|(i, t)| (format!("t{i}"), t)).collect()).unwrap()
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn codec_round_trip_is_bit_exact(m in message()) {
        let bytes = encode(&m).unwrap();
        prop_assert_eq!(bytes.len(), m.encoded_len());
        let d = decode(&bytes).unwrap();
        prop_assert_eq!(d.msg_type, m.msg_type);
        prop_assert_eq!(d.round, m.round);
        prop_assert_eq!(d.client_id, m.client_id);
        prop_assert_eq!(d.payload.len(), m.payload.len());
        for ((na, ta), (nb, tb)) in d.payload.iter().zip(&m.payload) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            prop_assert_eq!(bits(ta), bits(tb));
        }
        prop_assert_eq!(encode(&d).unwrap(), bytes);
    }

    #[test]
    fn truncated_frames_are_rejected(m in message(), cut in 1usize..64) {
        let bytes = encode(&m).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn fedavg_ignores_arrival_order(
        sets in congruent_sets(),
        weights in vec(1usize..50, 6),
        rotation in 0usize..6,
    ) {
        let updates: Vec<ClientUpdate> = sets
            .into_iter()
            .enumerate()
            .map(|(k, params)| ClientUpdate { client_id: k, round: 0, params, samples: weights[k] })
            .collect();
        let forward = fedavg_aggregate(&updates).unwrap();
        let mut shuffled = updates.clone();
        shuffled.rotate_left(rotation % updates.len());
        shuffled.reverse();
        let other = fedavg_aggregate(&shuffled).unwrap();
        for ((_, a), (_, b)) in forward.entries().iter().zip(other.entries()) {
            prop_assert_eq!(bits(a), bits(b));
        }
        // a convex combination stays inside the per-coordinate hull
        for (ti, (_, t)) in forward.entries().iter().enumerate() {
            for (j, v) in t.data().iter().enumerate() {
                let column = updates.iter().map(|u| u.params.entries()[ti].1.data()[j]);
                let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
                prop_assert!(*v >= lo - 1e-12 * lo.abs().max(1.0) && *v <= hi + 1e-12 * hi.abs().max(1.0));
            }
        }
    }

    #[test]
    fn clipping_bounds_the_norm(
        data in vec(-100.0f64..100.0, 1..64),
        clip in 0.01f64..20.0,
    ) {
        let g = GradientSet::new(vec![("g".into(), Tensor::from_vec(data.clone()))]);
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = clip_gradient(&g, clip);
        let clipped_norm = c.entries()[0].1.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(clipped_norm <= clip * (1.0 + 1e-12));
        if norm <= clip {
            prop_assert_eq!(bits(&c.entries()[0].1), bits(&g.entries()[0].1));
        } else {
            // same direction, rescaled to the bound
            let ratio = clip / norm;
            for (a, b) in c.entries()[0].1.data().iter().zip(&data) {
                prop_assert!((a - b * ratio).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn partition_is_exhaustive_disjoint_and_balanced(samples in 1usize..2000, k in 1usize..40, seed in any::<u64>()) {
        prop_assume!(k <= samples);
        let shards = partition_uniform(samples, k, seed).unwrap();
        prop_assert_eq!(shards.len(), k);
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..samples).collect::<Vec<_>>());
        for (i, s) in shards.iter().enumerate() {
            prop_assert_eq!(s.client_id, i);
            prop_assert_eq!(s.len(), samples / k + usize::from(i < samples % k));
        }
    }

    #[test]
    fn partition_is_reproducible(samples in 1usize..500, k in 1usize..10, seed in any::<u64>()) {
        prop_assume!(k <= samples);
        prop_assert_eq!(partition_uniform(samples, k, seed).unwrap(), partition_uniform(samples, k, seed).unwrap());
    }

    #[test]
    fn batch_plan_visits_each_sample_once(
        shard in vec(0usize..100_000, 1..300),
        batch in 1usize..70,
        seed in any::<u64>(),
        round in 0usize..10,
    ) {
        let plan = batch_plan(&shard, batch, seed, 3, round, 0);
        prop_assert_eq!(plan.len(), batches_per_epoch(shard.len(), batch));
        prop_assert!(plan.iter().all(|b| !b.is_empty() && b.len() <= batch));
        prop_assert!(plan[..plan.len() - 1].iter().all(|b| b.len() == batch));
        let mut seen: Vec<usize> = plan.concat();
        let mut want = shard.clone();
        seen.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(tensors in vec(raw_tensor(), 0..6)) {
        let params =
            ParameterSet::new(tensors.into_iter().enumerate().map(|(i, t)| (format!("layer{i}.w"), t)).collect()).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&params)).unwrap();
        prop_assert_eq!(back.len(), params.len());
        for ((na, a), (nb, b)) in back.entries().iter().zip(params.entries()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn cost_totals_are_k_times_per_client(
        k in 1u64..200,
        per in 1u64..2000,
        q in 1u64..5000,
        w in 2u64..10_000_000,
        beta_milli in 1u64..1000,
        t in 0.0f64..1e6,
        wait in 0.0f64..1e6,
    ) {
        let client_params = (w * beta_milli / 1000).clamp(1, w - 1);
        let inputs = CostInputs {
            clients: k,
            samples: k * per,
            smashed_size: q,
            total_params: w,
            client_params,
            train_time: t,
            wait_time: wait,
            local_epochs: 1,
        };
        let table = analytic_costs(&inputs).unwrap();
        for row in &table.rows {
            let want = k as f64 * row.comms_per_client;
            prop_assert!((row.total_comms - want).abs() <= 1e-12 * want);
            prop_assert_eq!(row.exact_comms_per_client.map(|v| v as f64), Some(row.comms_per_client));
        }
        let split: Vec<f64> = [Algo::Sl, Algo::Sflv1, Algo::Sflv2].iter().map(|a| table.row(*a).unwrap().total_comms).collect();
        prop_assert!(split.windows(2).all(|p| p[0] == p[1]));
        prop_assert_eq!(table.row(Algo::Fl).unwrap().comms_per_client, 2.0 * w as f64);
    }

    #[test]
    fn laplace_leaves_constant_columns_alone(rows in 1usize..8, cols in 1usize..8, value in -5.0f64..5.0, eps in 0.1f64..10.0) {
        let mut data = vec![value; rows * cols];
        // column 0 varies when there is more than one row
        for r in 0..rows {
            data[r * cols] = r as f64;
        }
        let acts = Tensor::new(vec![rows, cols], data).unwrap();
        let noised = randomize_smashed(&acts, eps, &mut NoiseSource::new(1));
        prop_assert_eq!(noised.shape(), acts.shape());
        for r in 0..rows {
            for c in 1..cols {
                prop_assert_eq!(noised.data()[r * cols + c].to_bits(), value.to_bits());
            }
        }
        if rows == 1 {
            prop_assert_eq!(bits(&noised), bits(&acts));
        }
    }
}
