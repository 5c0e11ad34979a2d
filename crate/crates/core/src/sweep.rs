//! Many seeds of one scenario, each simulated and checked.
//!
//! Seeds are independent, so with the `parallel` feature (default) they are
//! spread over a rayon pool; the sequential path is always available and
//! produces identical reports.

use std::ops::Range;

use serde::Serialize;

use crate::check::{check_records, Verdict};
use crate::scenario::Scenario;
use crate::sim::{self, Outcome, SimOptions};

#[derive(Debug, Clone, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub quiescent: bool,
    pub end_tick: u64,
    /// `Err` when the run could not start or its own trace did not parse.
    pub verdict: Result<Verdict, String>,
}

impl SeedReport {
    pub fn passed(&self) -> bool {
        matches!(&self.verdict, Ok(v) if v.passed())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepReport {
    pub runs: Vec<SeedReport>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(SeedReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SeedReport> {
        self.runs.iter().filter(|r| !r.passed())
    }

    pub fn quiescent(&self) -> usize {
        self.runs.iter().filter(|r| r.quiescent).count()
    }
}

pub fn run_seed(scenario: &Scenario, seed: u64, opts: &SimOptions) -> SeedReport {
    match sim::run(scenario, seed, opts) {
        Ok(r) => SeedReport {
            seed,
            quiescent: matches!(r.outcome, Outcome::Quiescent { .. }),
            end_tick: r.outcome.tick(),
            verdict: check_records(&r.trace).map_err(|e| e.to_string()),
        },
        Err(e) => SeedReport {
            seed,
            quiescent: false,
            end_tick: 0,
            verdict: Err(e.to_string()),
        },
    }
}

pub fn sweep_sequential(scenario: &Scenario, seeds: Range<u64>, opts: &SimOptions) -> SweepReport {
    SweepReport {
        runs: seeds.map(|s| run_seed(scenario, s, opts)).collect(),
    }
}

#[cfg(feature = "parallel")]
pub fn sweep_parallel(scenario: &Scenario, seeds: Range<u64>, opts: &SimOptions) -> SweepReport {
    use rayon::prelude::*;
    SweepReport {
        runs: seeds
            .into_par_iter()
            .map(|s| run_seed(scenario, s, opts))
            .collect(),
    }
}

/// Parallel when built with the `parallel` feature, sequential otherwise.
pub fn sweep(scenario: &Scenario, seeds: Range<u64>, opts: &SimOptions) -> SweepReport {
    #[cfg(feature = "parallel")]
    {
        sweep_parallel(scenario, seeds, opts)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(scenario, seeds, opts)
    }
}
