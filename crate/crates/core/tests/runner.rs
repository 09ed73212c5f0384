use std::fs;

use splitfed::checkpoint::load_checkpoint;
use splitfed::error::Error;
use splitfed::protocols::Algo;
use splitfed::runner::{metrics_header, prepare, DatasetKind, RunConfig};
use splitfed::transport::TransportKind;

fn synthetic_config(algo: Algo, clients: usize, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(&format!(
        "algo = {algo}\nclients = {clients}\ndataset = synthetic\narch = mlp2\nsynthetic_samples = 400\n\
         synthetic_test = 100\nglobal_epochs = 3\nbatch_size = 20\nlr = 0.05\nseed = 11\nout = {}\n",
        out.display()
    ))
    .unwrap();
    cfg
}

#[test]
fn config_text_with_comments_and_aliases() {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "# a comment\n\nalgo = SL   # trailing\nlearning_rate=0.01\ncut_index = 2\nsigma = 2.5\n\
         smashed_epsilon = 3\ngradient_dp = on\ntransport = tcp\nrelay_order = seeded\ninit = gaussian:0.1\n",
    )
    .unwrap();
    assert_eq!(cfg.algo, Algo::Sl);
    assert_eq!(cfg.learning_rate, 0.01);
    assert_eq!(cfg.cut_index, Some(2));
    assert_eq!(cfg.dp.noise_scale, 2.5);
    assert_eq!(cfg.dp.smashed_epsilon, 3.0);
    assert!(cfg.dp.gradient_dp && !cfg.dp.smashed_dp);
    assert_eq!(cfg.transport, TransportKind::Tcp);
    assert_eq!(cfg.dataset, DatasetKind::Mnist);
    assert_eq!(cfg.checkpoint_path(), std::path::PathBuf::from("metrics.ckpt"));
}

#[test]
fn config_errors_name_the_line() {
    let mut cfg = RunConfig::default();
    let err = cfg.apply_text("clients = 3\nbatch_size = many\n").unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.starts_with("line 2:")), "{err}");
    assert!(matches!(cfg.apply_text("no_such_key = 1"), Err(Error::Config(m)) if m.contains("no_such_key")));
    assert!(matches!(cfg.apply_text("just words"), Err(Error::Config(m)) if m.starts_with("line 1:")));
    for key in RunConfig::KEYS {
        // every advertised key is understood, whatever the value's fate
        let e = RunConfig::default().set(key, "???");
        assert!(!matches!(e, Err(Error::Config(ref m)) if m.contains("unknown key")), "{key}");
    }
}

#[test]
fn preparation_rejects_bad_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let mut central = synthetic_config(Algo::Central, 3, &out);
    assert!(matches!(prepare(&central), Err(Error::Config(_))));
    central.clients = 1;
    assert!(prepare(&central).is_ok());

    let mut cfg = synthetic_config(Algo::Sl, 2, &out);
    cfg.cut_index = Some(9);
    assert!(matches!(prepare(&cfg), Err(Error::CutOutOfRange { .. })));

    let mut cfg = synthetic_config(Algo::Fl, 2, &dir.path().join("nope/m.csv"));
    assert!(matches!(prepare(&cfg), Err(Error::Config(_))));
    cfg.out = out.clone();
    cfg.dataset = DatasetKind::Mnist;
    cfg.data_dir = dir.path().to_path_buf();
    assert!(matches!(prepare(&cfg), Err(Error::Config(m)) if m.contains("missing MNIST")));

    let mut cfg = synthetic_config(Algo::Fl, 2, &out);
    cfg.momentum = 1.0;
    assert!(prepare(&cfg).is_err());
}

fn strip_wall_time(csv: &str, clients: usize) -> Vec<String> {
    let wall = 5 + 4 * clients;
    csv.lines()
        .map(|l| {
            if l.starts_with('#') || l.starts_with("global_epoch") {
                return l.to_string();
            }
            let mut cols: Vec<&str> = l.split(',').collect();
            cols[wall] = "";
            cols.join(",")
        })
        .collect()
}

#[test]
fn metrics_are_reproducible_apart_from_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}.csv"));
        let mut cfg = synthetic_config(Algo::Sflv2, 4, &out);
        cfg.dp.gradient_dp = true;
        cfg.dp.smashed_dp = true;
        let summary = prepare(&cfg).unwrap().execute().unwrap();
        let saved = load_checkpoint(&summary.checkpoint).unwrap();
        assert_eq!(saved.entries(), summary.outcome.final_params.entries());
        csvs.push(fs::read_to_string(&out).unwrap());
    }
    let text = &csvs[0];
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# dp gradient=true"));
    assert!(lines[1].starts_with("# privacy budget ("));
    assert_eq!(lines[2], metrics_header(4));
    assert_eq!(lines.len(), 3 + 3);
    let first: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(first.len(), 5 + 16 + 2);
    assert_eq!(first[0], "1");
    assert_eq!(strip_wall_time(&csvs[0], 4), strip_wall_time(&csvs[1], 4));
}

#[test]
fn header_layout() {
    let h = metrics_header(2);
    assert_eq!(
        h,
        "global_epoch,mean_train_acc,mean_test_acc,cv_train,cv_test,\
         client0_bytes_up,client0_bytes_down,client0_elements_up,client0_elements_down,\
         client1_bytes_up,client1_bytes_down,client1_elements_up,client1_elements_down,\
         wall_time_sec,epsilon_report"
    );
}

#[test]
fn central_training_fits_separable_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("central.csv");
    let mut cfg = synthetic_config(Algo::Central, 1, &out);
    cfg.global_epochs = 50;
    cfg.synthetic_scale = 6.0;
    let summary = prepare(&cfg).unwrap().execute().unwrap();
    let best = summary.outcome.rounds.iter().map(|r| r.mean_train_acc()).fold(0.0, f64::max);
    assert!(best >= 0.99, "best train accuracy {best}");
    assert!(summary.mean_epoch_time().is_some());
}
