//! Closed-form communication and training-time costs of FL, SL, SFLV1 and
//! SFLV2, and their comparison against measured traffic.
//!
//! Element counts are integers. The time columns mix abstract time units with
//! element counts exactly as the closed forms are written (`t + K|W|`), so they
//! are only meaningful for comparing methods against each other.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::ModelStats;
use crate::protocols::Algo;
use crate::transport::TrafficCounter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostInputs {
    /// K
    pub clients: u64,
    /// p: training samples per global epoch across all clients.
    pub samples: u64,
    /// q: smashed-layer elements per sample.
    pub smashed_size: u64,
    /// |W|
    pub total_params: u64,
    /// β|W|
    pub client_params: u64,
    /// t: one global epoch of training.
    pub train_time: f64,
    /// T: per-client wait in the SL relay.
    pub wait_time: f64,
    /// E. Multiplies the smashed-data traffic when above 1.
    pub local_epochs: u64,
}

impl CostInputs {
    pub fn from_stats(clients: u64, samples: u64, stats: &ModelStats, train_time: f64, wait_time: f64) -> Self {
        Self {
            clients,
            samples,
            smashed_size: stats.smashed_size as u64,
            total_params: stats.total_params as u64,
            client_params: stats.client_params as u64,
            train_time,
            wait_time,
            local_epochs: 1,
        }
    }

    /// Inputs given by the client fraction β instead of a client parameter
    /// count. β|W| must be a whole number of parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn with_fraction(
        clients: u64,
        samples: u64,
        smashed_size: u64,
        total_params: u64,
        beta: f64,
        train_time: f64,
        wait_time: f64,
    ) -> Result<Self> {
        let raw = beta * total_params as f64;
        let client_params = raw.round();
        if (raw - client_params).abs() > 1e-6 * raw.abs().max(1.0) {
            return Err(Error::InvalidInputs(format!("β·|W| = {raw} is not a whole parameter count")));
        }
        let inputs = Self {
            clients,
            samples,
            smashed_size,
            total_params,
            client_params: client_params as u64,
            train_time,
            wait_time,
            local_epochs: 1,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    /// β
    pub fn client_fraction(&self) -> f64 {
        self.client_params as f64 / self.total_params as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInputs(m));
        if self.clients == 0 {
            return bad("K must be at least 1".into());
        }
        if self.samples == 0 || self.smashed_size == 0 || self.total_params == 0 || self.local_epochs == 0 {
            return bad("p, q, |W| and E must be positive".into());
        }
        if self.client_params == 0 || self.client_params >= self.total_params {
            return bad(format!("β must lie in (0, 1), got {}/{}", self.client_params, self.total_params));
        }
        if !(self.train_time >= 0.0 && self.train_time.is_finite())
            || !(self.wait_time >= 0.0 && self.wait_time.is_finite())
        {
            return bad("t and T must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Smashed-data elements one client exchanges per global epoch,
    /// 2(p/K)q·E, when p is a multiple of K.
    fn exact_smashed_per_client(&self) -> Option<u64> {
        self.samples
            .is_multiple_of(self.clients)
            .then(|| 2 * (self.samples / self.clients) * self.smashed_size * self.local_epochs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub algo: Algo,
    pub comms_per_client: f64,
    pub total_comms: f64,
    pub total_train_time: f64,
    pub total_cost: f64,
    /// `comms_per_client` as an exact integer when p is a multiple of K.
    pub exact_comms_per_client: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub inputs: CostInputs,
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn row(&self, algo: Algo) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.algo == algo)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,comms_per_client,total_comms,total_train_time,total_cost\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.algo, r.comms_per_client, r.total_comms, r.total_train_time, r.total_cost
            ));
        }
        out
    }
}

impl fmt::Display for CostTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = &self.inputs;
        writeln!(
            f,
            "K={} p={} q={} |W|={} beta={:.6} t={} T={} E={}",
            i.clients,
            i.samples,
            i.smashed_size,
            i.total_params,
            i.client_fraction(),
            i.train_time,
            i.wait_time,
            i.local_epochs
        )?;
        writeln!(
            f,
            "{:<8}{:>20}{:>20}{:>20}{:>20}",
            "method", "comms/client", "total comms", "train time", "total cost"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8}{:>20}{:>20}{:>20}{:>20}",
                r.algo.to_string(),
                fmt_num(r.comms_per_client),
                fmt_num(r.total_comms),
                fmt_num(r.total_train_time),
                fmt_num(r.total_cost)
            )?;
        }
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Evaluates the four rows:
///
/// | method | comms/client | total comms | train time | total cost |
/// |---|---|---|---|---|
/// | FL | 2\|W\| | 2K\|W\| | t + K\|W\| | t + 3K\|W\| |
/// | SL | (2p/K)q + 2β\|W\| | 2pq + 2βK\|W\| | tK + T(K−1) | comms + time |
/// | SFLV1 | as SL | as SL | t + K\|W\| | 2pq + t + (1+2β)K\|W\| |
/// | SFLV2 | as SL | as SL | t + βK\|W\| | 2pq + t + 3βK\|W\| |
pub fn analytic_costs(inputs: &CostInputs) -> Result<CostTable> {
    inputs.validate()?;
    let k = inputs.clients as f64;
    let p = inputs.samples as f64;
    let q = inputs.smashed_size as f64;
    let w = inputs.total_params as f64;
    let bw = inputs.client_params as f64;
    let e = inputs.local_epochs as f64;
    let (t, wait) = (inputs.train_time, inputs.wait_time);

    let split_client = 2.0 * p / k * q * e + 2.0 * bw;
    let split_total = 2.0 * p * q * e + 2.0 * bw * k;
    let split_exact = inputs.exact_smashed_per_client().map(|s| s + 2 * inputs.client_params);

    let fl_time = t + k * w;
    let sl_time = t * k + wait * (k - 1.0);
    let v1_time = t + k * w;
    let v2_time = t + bw * k;
    let rows = vec![
        CostRow {
            algo: Algo::Fl,
            comms_per_client: 2.0 * w,
            total_comms: 2.0 * k * w,
            total_train_time: fl_time,
            total_cost: 2.0 * k * w + fl_time,
            exact_comms_per_client: Some(2 * inputs.total_params),
        },
        CostRow {
            algo: Algo::Sl,
            comms_per_client: split_client,
            total_comms: split_total,
            total_train_time: sl_time,
            total_cost: split_total + sl_time,
            exact_comms_per_client: split_exact,
        },
        CostRow {
            algo: Algo::Sflv1,
            comms_per_client: split_client,
            total_comms: split_total,
            total_train_time: v1_time,
            total_cost: split_total + v1_time,
            exact_comms_per_client: split_exact,
        },
        CostRow {
            algo: Algo::Sflv2,
            comms_per_client: split_client,
            total_comms: split_total,
            total_train_time: v2_time,
            total_cost: split_total + v2_time,
            exact_comms_per_client: split_exact,
        },
    ];
    Ok(CostTable { inputs: *inputs, rows })
}

/// Measured against analytic per-client elements for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct CommComparison {
    pub algo: Algo,
    pub analytic: f64,
    /// Mean over clients and rounds of uploaded + downloaded elements.
    pub measured_mean: f64,
    /// Largest |measured − analytic| over every (client, round).
    pub max_abs_deviation: f64,
    pub relative_deviation: f64,
}

impl CommComparison {
    pub fn is_exact(&self) -> bool {
        self.max_abs_deviation == 0.0
    }
}

/// Compares each measured run with its row of `table`. Labels are excluded
/// from the measured counts, and handshake frames are never tallied.
pub fn compare_measured(table: &CostTable, runs: &[(Algo, &TrafficCounter)]) -> Result<Vec<CommComparison>> {
    if runs.is_empty() {
        return Err(Error::MissingRun("no measured runs supplied".into()));
    }
    let clients = table.inputs.clients as usize;
    let mut out = Vec::with_capacity(runs.len());
    for (algo, counter) in runs {
        let row = table.row(*algo).ok_or_else(|| Error::MissingRun(format!("no analytic row for {algo}")))?;
        let rounds = counter.training_rounds();
        if rounds.is_empty() {
            return Err(Error::MissingRun(format!("{algo}: no traffic was recorded")));
        }
        let analytic = row.exact_comms_per_client.map(|v| v as f64).unwrap_or(row.comms_per_client);
        let (mut sum, mut worst, mut n) = (0.0, 0.0f64, 0usize);
        for &r in &rounds {
            for k in 0..clients {
                let m = counter.client_round(k, r).total_elements() as f64;
                sum += m;
                worst = worst.max((m - analytic).abs());
                n += 1;
            }
        }
        let measured_mean = sum / n as f64;
        out.push(CommComparison {
            algo: *algo,
            analytic,
            measured_mean,
            max_abs_deviation: worst,
            relative_deviation: (measured_mean - analytic).abs() / analytic,
        });
    }
    Ok(out)
}
