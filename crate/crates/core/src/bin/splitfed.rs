use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use splitfed::cost::{analytic_costs, CostInputs};
use splitfed::model::{build_architecture, default_cut, model_stats, split_at};
use splitfed::runner::{prepare, RunConfig};
use splitfed::verify::{run_suite, Suite};

const CONFIG_ERROR: u8 = 1;
const RUNTIME_FAILURE: u8 = 2;
const VERIFY_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "splitfed", version, about = "Run, cost and verify FL / SL / SplitFed experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write the metrics CSV and final checkpoint.
    Run(Box<RunArgs>),
    /// Print the closed-form communication and time cost table.
    Cost(CostArgs),
    /// Run self-checking suites. Exits 3 if any check fails.
    Verify {
        /// oracle, dp, codec, gradcheck or comm. Repeatable; all when omitted.
        #[arg(long = "suite")]
        suites: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    global_epochs: Option<String>,
    #[arg(long)]
    local_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    cut: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    subset: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    gradient_dp: Option<String>,
    #[arg(long)]
    smashed_dp: Option<String>,
    #[arg(long)]
    epsilon_prime: Option<String>,
    #[arg(long)]
    delay_ms: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let named = [
            ("algo", &self.algo),
            ("clients", &self.clients),
            ("global_epochs", &self.global_epochs),
            ("local_epochs", &self.local_epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("arch", &self.arch),
            ("cut", &self.cut),
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("subset", &self.subset),
            ("seed", &self.seed),
            ("transport", &self.transport),
            ("gradient_dp", &self.gradient_dp),
            ("smashed_dp", &self.smashed_dp),
            ("epsilon_prime", &self.epsilon_prime),
            ("delay_ms", &self.delay_ms),
            ("out", &self.out),
        ];
        let mut out: Vec<(String, String)> =
            named.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))).collect();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            out.push((k.to_string(), v.to_string()));
        }
        out
    }
}

#[derive(Args)]
struct CostArgs {
    /// K
    #[arg(long, default_value_t = 5)]
    clients: u64,
    /// p: training samples per global epoch.
    #[arg(long, default_value_t = 60_000)]
    samples: u64,
    /// Take q, |W| and β from a named architecture split at its default cut.
    #[arg(long, conflicts_with_all = ["smashed_size", "params", "beta"])]
    arch: Option<String>,
    /// q
    #[arg(long)]
    smashed_size: Option<u64>,
    /// |W|
    #[arg(long)]
    params: Option<u64>,
    /// β
    #[arg(long)]
    beta: Option<f64>,
    /// t
    #[arg(long, default_value_t = 1.0)]
    train_time: f64,
    /// T
    #[arg(long, default_value_t = 1.0)]
    wait_time: f64,
    #[arg(long, default_value_t = 1)]
    local_epochs: u64,
    /// text, csv or both.
    #[arg(long, default_value = "both")]
    format: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code)
}

fn run(args: RunArgs) -> ExitCode {
    let mut cfg = match &args.config {
        Some(path) => match RunConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => return fail(CONFIG_ERROR, e),
        },
        None => RunConfig::default(),
    };
    for (k, v) in args.overrides() {
        if let Err(e) = cfg.set(&k, &v) {
            return fail(CONFIG_ERROR, format!("--{k}: {e}"));
        }
    }
    let prepared = match prepare(&cfg) {
        Ok(p) => p,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let total = cfg.global_epochs;
    let result = prepared.execute_with(&mut |r| {
        println!(
            "epoch {}/{total} train {:.4} test {} wall {:.2}s",
            r.round + 1,
            r.mean_train_acc(),
            r.mean_test_acc().map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
            r.wall_time.as_secs_f64()
        );
    });
    match result {
        Ok(summary) => {
            if let Some(t) = summary.mean_epoch_time() {
                println!("mean epoch time (first excluded) {:.3}s", t.as_secs_f64());
            }
            println!("metrics {}", summary.metrics.display());
            println!("checkpoint {}", summary.checkpoint.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(RUNTIME_FAILURE, e),
    }
}

fn cost(args: CostArgs) -> ExitCode {
    let inputs = match &args.arch {
        Some(name) => build_architecture(name).and_then(|arch| split_at(&arch, default_cut(&arch), 0)).map(|m| {
            CostInputs::from_stats(args.clients, args.samples, &model_stats(&m), args.train_time, args.wait_time)
        }),
        None => match (args.smashed_size, args.params, args.beta) {
            (Some(q), Some(w), Some(beta)) => {
                CostInputs::with_fraction(args.clients, args.samples, q, w, beta, args.train_time, args.wait_time)
            }
            _ => return fail(CONFIG_ERROR, "give --arch, or all of --smashed-size, --params and --beta"),
        },
    };
    let inputs = match inputs {
        Ok(i) => CostInputs { local_epochs: args.local_epochs, ..i },
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    let table = match analytic_costs(&inputs) {
        Ok(t) => t,
        Err(e) => return fail(CONFIG_ERROR, e),
    };
    match args.format.as_str() {
        "text" => print!("{table}"),
        "csv" => print!("{}", table.to_csv()),
        "both" => print!("{table}\n{}", table.to_csv()),
        other => return fail(CONFIG_ERROR, format!("unknown format {other:?} (text|csv|both)")),
    }
    ExitCode::SUCCESS
}

fn verify(names: Vec<String>) -> ExitCode {
    let suites: Vec<Suite> = if names.is_empty() {
        Suite::ALL.to_vec()
    } else {
        match names.iter().map(|n| n.parse()).collect::<Result<_, _>>() {
            Ok(s) => s,
            Err(e) => return fail(CONFIG_ERROR, e),
        }
    };
    let mut all_passed = true;
    for suite in suites {
        match run_suite(suite) {
            Ok(report) => {
                println!("{report}");
                all_passed &= report.passed();
            }
            Err(e) => return fail(RUNTIME_FAILURE, format!("{suite}: {e}")),
        }
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VERIFY_FAILURE)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run(args) => run(*args),
        Command::Cost(args) => cost(args),
        Command::Verify { suites } => verify(suites),
    }
}
