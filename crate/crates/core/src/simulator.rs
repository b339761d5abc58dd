//! Virtual-clock replay of one iteration.
//!
//! The clock starts at zero, advances to the completion of the slowest map
//! task, then through each tree level by `A` times the child count of the
//! level's fullest node. Partitions follow the engine's round-robin
//! assignment, so the first `R mod N` tasks hold one extra record and each
//! task spills whatever exceeds `M`.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::aggtree::TreeShape;
use crate::cost_model::{ClusterProfile, CostEstimate, FanIn, ModelError, PlanPoint, Regime};
use crate::optimizer::Objective;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("the simulator needs an integer fan-in >= 2, got {0}")]
    FanIn(f64),
    #[error("sweep grids must be nonempty")]
    EmptyGrid,
}

/// Per-task and per-level timings behind one simulated iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub estimate: CostEstimate,
    /// Completion time of each map task.
    pub task_times: Vec<f64>,
    /// Duration of each tree level, leaves first.
    pub level_times: Vec<f64>,
}

fn integer_fanin(fanin: FanIn) -> Result<u64, SimError> {
    match fanin {
        FanIn::Discrete(f) if f >= 2 => Ok(f),
        FanIn::Discrete(f) => Err(SimError::FanIn(f as f64)),
        FanIn::Continuous(f) if f >= 2.0 && f.fract() == 0.0 && f <= u32::MAX as f64 => {
            Ok(f as u64)
        }
        FanIn::Continuous(f) => Err(SimError::FanIn(f)),
    }
}

pub fn simulate_trace(profile: &ClusterProfile, plan: PlanPoint) -> Result<SimTrace, SimError> {
    profile.validate()?;
    let n = plan.machines;
    if n == 0 {
        return Err(ModelError::ZeroMachines.into());
    }
    if n > profile.max_machines {
        return Err(ModelError::TooManyMachines {
            n,
            max: profile.max_machines,
        }
        .into());
    }
    let fanin = integer_fanin(plan.fanin)?;

    let base = profile.records / n;
    let extra = profile.records % n;
    let task_time = |records: u64| {
        let spilled = records.saturating_sub(profile.cache_records);
        records as f64 * profile.map_secs + spilled as f64 * profile.load_secs
    };
    // tasks with equal record counts finish together; compute each class once
    let long = task_time(base + 1);
    let short = task_time(base);
    let task_times: Vec<f64> = (0..n)
        .map(|i| if i < extra { long } else { short })
        .collect();
    let map_done = if extra > 0 { long } else { short };

    let shape =
        TreeShape::new(n as usize, fanin as usize).map_err(|_| SimError::FanIn(fanin as f64))?;
    let level_times: Vec<f64> = shape
        .widest_nodes()
        .into_iter()
        .map(|children| profile.agg_secs * children as f64)
        .collect();
    let agg: f64 = level_times.iter().sum();

    Ok(SimTrace {
        estimate: CostEstimate::assemble(n, map_done, agg, profile.regime(n)),
        task_times,
        level_times,
    })
}

pub fn simulate_iteration(
    profile: &ClusterProfile,
    plan: PlanPoint,
) -> Result<CostEstimate, SimError> {
    simulate_trace(profile, plan).map(|t| t.estimate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub machines: u64,
    pub fanin: u64,
    pub regime: Regime,
    pub time: f64,
    pub cost: f64,
}

/// One row per `(N, f)` grid point, `N` major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const CSV_HEADER: [&'static str; 5] = ["N", "f", "regime", "T_model", "C_model"];

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.machines.to_string(),
                r.fanin.to_string(),
                r.regime.to_string(),
                r.time.to_string(),
                r.cost.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Row minimising `objective`; ties go to the earlier row.
    pub fn argmin(&self, objective: Objective) -> Option<&SweepRow> {
        let value = |r: &SweepRow| match objective {
            Objective::MinTime => r.time,
            Objective::MinCost => r.cost,
        };
        self.rows
            .iter()
            .fold(None, |best: Option<&SweepRow>, r| match best {
                Some(b) if value(b) <= value(r) => Some(b),
                _ => Some(r),
            })
    }

    /// For each machine count, the fan-in minimising iteration time.
    pub fn best_fanin_per_machines(&self) -> Vec<(u64, u64)> {
        let mut machines: Vec<u64> = self.rows.iter().map(|r| r.machines).collect();
        machines.dedup();
        machines
            .into_iter()
            .map(|n| {
                let sub = SweepResult {
                    rows: self
                        .rows
                        .iter()
                        .filter(|r| r.machines == n)
                        .copied()
                        .collect(),
                };
                (n, sub.argmin(Objective::MinTime).expect("nonempty").fanin)
            })
            .collect()
    }
}

pub fn sweep(
    profile: &ClusterProfile,
    n_grid: &[u64],
    f_grid: &[u64],
) -> Result<SweepResult, SimError> {
    if n_grid.is_empty() || f_grid.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    let points: Vec<(u64, u64)> = n_grid
        .iter()
        .flat_map(|&n| f_grid.iter().map(move |&f| (n, f)))
        .collect();
    let rows = points
        .into_par_iter()
        .map(|(n, f)| {
            let est = simulate_iteration(profile, PlanPoint::discrete(n, f))?;
            Ok(SweepRow {
                machines: n,
                fanin: f,
                regime: est.regime,
                time: est.time,
                cost: est.cost,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(SweepResult { rows })
}
