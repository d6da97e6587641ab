//! Strategy comparison: every strategy x repeat on one shared dataset.
//!
//! Repeat `r` of every strategy uses master seed `master_seed + r`, so the
//! strategies see the same initial weights, clusters and local shuffles.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::count_messages;
use crate::data::generate_clients;
use crate::error::Result;
use crate::metrics::{aggregate_runs, EvalReport};
use crate::protocol::{run_training_on, RunConfig, RunOptions, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub strategy: StrategyKind,
    pub messages: u64,
    pub bytes: u64,
    /// Message count divided by a FedAvg run's count for the same config.
    pub ratio_vs_fedavg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Repeat-averaged report per strategy, in `compare_strategies` order.
    pub reports: Vec<EvalReport>,
    pub overhead: Vec<OverheadRow>,
}

impl Comparison {
    pub fn report(&self, strategy: StrategyKind) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == strategy.as_str())
    }

    pub fn table_csv(&self) -> String {
        EvalReport::table_csv(&self.reports.iter().collect::<Vec<_>>())
    }

    /// `overhead.csv`: `strategy,messages,bytes,ratio_vs_fedavg`.
    pub fn overhead_csv(&self) -> String {
        let mut out = String::from("strategy,messages,bytes,ratio_vs_fedavg\n");
        for row in &self.overhead {
            writeln!(
                out,
                "{},{},{},{:.4}",
                row.strategy, row.messages, row.bytes, row.ratio_vs_fedavg
            )
            .unwrap();
        }
        out
    }
}

/// The config for repeat `repeat` of `strategy`.
pub fn repeat_config(base: &RunConfig, strategy: StrategyKind, repeat: usize) -> RunConfig {
    RunConfig {
        strategy,
        master_seed: base.master_seed.wrapping_add(repeat as u64),
        ..base.clone()
    }
}

pub fn compare(base: &RunConfig) -> Result<Comparison> {
    let jobs: Vec<RunConfig> = base
        .compare_strategies
        .iter()
        .flat_map(|&s| (0..base.repeats).map(move |r| repeat_config(base, s, r)))
        .collect();
    for job in &jobs {
        job.validate()?;
    }
    let clients = generate_clients(&base.data)?;
    let outcomes = jobs
        .par_iter()
        .map(|job| run_training_on(job, &clients, RunOptions::default()))
        .collect::<Result<Vec<_>>>()?;

    // FedAvg's count is always 2 messages per hospital per round.
    let fedavg_messages = 2 * base.clients as u64 * base.rounds as u64;
    let mut reports = Vec::new();
    let mut overhead = Vec::new();
    for (strategy, runs) in base
        .compare_strategies
        .iter()
        .zip(outcomes.chunks(base.repeats))
    {
        let per_repeat: Vec<EvalReport> = runs.iter().map(|o| o.report.clone()).collect();
        reports.push(aggregate_runs(&per_repeat)?);
        let stats = count_messages(&runs[0].log);
        overhead.push(OverheadRow {
            strategy: *strategy,
            messages: stats.total.messages,
            bytes: stats.total.bytes,
            ratio_vs_fedavg: stats.total.messages as f64 / fedavg_messages as f64,
        });
    }
    Ok(Comparison { reports, overhead })
}
