use splitfed::cost::{analytic_costs, compare_measured, CostInputs};
use splitfed::error::Error;
use splitfed::protocols::Algo;
use splitfed::transport::TrafficCounter;

fn inputs(k: u64, t: f64, wait: f64) -> CostInputs {
    CostInputs::with_fraction(k, 10_000, 1_000, 1_000_000, 0.1, t, wait).unwrap()
}

#[test]
fn worked_example() {
    let table = analytic_costs(&inputs(5, 100.0, 10.0)).unwrap();
    let sl = table.row(Algo::Sl).unwrap();
    assert_eq!(sl.comms_per_client, 4.2e6);
    assert_eq!(sl.exact_comms_per_client, Some(4_200_000));
    assert_eq!(sl.total_comms, 2.1e7);
    // tK + T(K - 1)
    assert_eq!(sl.total_train_time, 540.0);
    let fl = table.row(Algo::Fl).unwrap();
    assert_eq!(fl.comms_per_client, 2e6);
    assert_eq!(fl.total_comms, 1e7);
    assert_eq!(fl.total_train_time, 100.0 + 5e6);
    assert_eq!(fl.total_cost, 100.0 + 1.5e7);
    let v1 = table.row(Algo::Sflv1).unwrap();
    assert_eq!(v1.total_train_time, 100.0 + 5e6);
    assert_eq!(v1.total_cost, 2e7 + 100.0 + 6e6);
    let v2 = table.row(Algo::Sflv2).unwrap();
    assert_eq!(v2.total_train_time, 100.0 + 5e5);
    assert_eq!(v2.total_cost, 2e7 + 100.0 + 1.5e6);
}

#[test]
fn a_single_sl_client_takes_one_epoch_of_time() {
    let table = analytic_costs(&inputs(1, 123.5, 99.0)).unwrap();
    assert_eq!(table.row(Algo::Sl).unwrap().total_train_time, 123.5);
}

#[test]
fn split_methods_order_by_time_once_training_dominates() {
    for k in 2..=50 {
        let table = analytic_costs(&inputs(k, 1e7, 1e6)).unwrap();
        let time = |a| table.row(a).unwrap().total_train_time;
        assert!(time(Algo::Sflv2) < time(Algo::Sflv1), "K={k}");
        assert!(time(Algo::Sflv1) < time(Algo::Sl), "K={k}");
    }
}

#[test]
fn split_traffic_per_client_falls_with_k_while_fl_stays_flat() {
    let per = |k, a| analytic_costs(&inputs(k, 1.0, 1.0)).unwrap().row(a).unwrap().comms_per_client;
    let ks = [1, 2, 4, 5, 8, 10, 20, 50];
    for w in ks.windows(2) {
        assert!(per(w[1], Algo::Sl) < per(w[0], Algo::Sl));
        assert_eq!(per(w[1], Algo::Fl), per(w[0], Algo::Fl));
    }
}

#[test]
fn uneven_splits_have_no_exact_count() {
    let table = analytic_costs(&CostInputs::with_fraction(3, 10, 4, 100, 0.5, 1.0, 1.0).unwrap()).unwrap();
    let sl = table.row(Algo::Sl).unwrap();
    assert_eq!(sl.exact_comms_per_client, None);
    assert!((sl.comms_per_client - (2.0 * 10.0 / 3.0 * 4.0 + 100.0)).abs() < 1e-12);
    assert_eq!(table.row(Algo::Fl).unwrap().exact_comms_per_client, Some(200));
}

#[test]
fn local_epochs_multiply_smashed_traffic() {
    let mut i = inputs(5, 1.0, 1.0);
    i.local_epochs = 3;
    let sl = *analytic_costs(&i).unwrap().row(Algo::Sl).unwrap();
    assert_eq!(sl.exact_comms_per_client, Some(3 * 4_000_000 + 200_000));
}

#[test]
fn csv_and_text_tables() {
    let table = analytic_costs(&inputs(5, 100.0, 10.0)).unwrap();
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,comms_per_client,total_comms,total_train_time,total_cost");
    assert_eq!(lines.len(), 5);
    assert!(lines[2].starts_with("sl,4200000,21000000,540,"));
    let text = table.to_string();
    assert!(text.contains("K=5"));
    assert!(text.lines().count() >= 6);
}

#[test]
fn invalid_inputs_are_rejected() {
    let ok = inputs(5, 1.0, 1.0);
    let cases = [
        CostInputs { clients: 0, ..ok },
        CostInputs { samples: 0, ..ok },
        CostInputs { smashed_size: 0, ..ok },
        CostInputs { total_params: 0, ..ok },
        CostInputs { client_params: 0, ..ok },
        CostInputs { client_params: ok.total_params, ..ok },
        CostInputs { train_time: -1.0, ..ok },
        CostInputs { wait_time: f64::NAN, ..ok },
        CostInputs { local_epochs: 0, ..ok },
    ];
    for c in cases {
        assert!(matches!(analytic_costs(&c), Err(Error::InvalidInputs(_))), "{c:?}");
    }
    assert!(matches!(CostInputs::with_fraction(5, 100, 10, 1001, 0.1, 1.0, 1.0), Err(Error::InvalidInputs(_))));
    assert!(matches!(CostInputs::with_fraction(5, 100, 10, 1000, 1.0, 1.0, 1.0), Err(Error::InvalidInputs(_))));
}

#[test]
fn comparisons_need_measured_runs() {
    let table = analytic_costs(&inputs(5, 1.0, 1.0)).unwrap();
    assert!(matches!(compare_measured(&table, &[]), Err(Error::MissingRun(_))));
    let empty = TrafficCounter::new();
    assert!(matches!(compare_measured(&table, &[(Algo::Sl, &empty)]), Err(Error::MissingRun(_))));
    assert!(matches!(compare_measured(&table, &[(Algo::Central, &empty)]), Err(Error::MissingRun(_))));
}
