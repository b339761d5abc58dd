//! Analytic time and cost model for one iteration of a MapReduce operator
//! inside a loop.
//!
//! An iteration is split into a map phase, whose time depends only on the
//! number of machines `N`, and an aggregation-tree phase, whose time depends
//! on `N` and the tree fan-in `f`:
//!
//! ```text
//! T(N, f) = T_agg(N, f) + T_map(N)
//! C(N, f) = N * T(N, f)
//! ```
//!
//! The aggregation tree has `h(N, f)` levels and each level costs one node's
//! worth of work, `A * f`. The continuous height `ln N / ln f` is used for
//! closed-form optimization; executable plans use the integer height
//! `ceil(log_f N)`.
//!
//! The map phase runs in one of two regimes. When every record fits in the
//! aggregate cache (`R <= M * N`) each machine processes `R / N` cached
//! records. Otherwise `R - M * N` records are re-loaded from disk every
//! iteration and the per-machine share of that load time is added.

use std::f64::consts::E;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("fan-in must be > 1 for the continuous model, got {0}")]
    ContinuousFanIn(f64),
    #[error("fan-in must be >= 2 for a discrete tree, got {0}")]
    DiscreteFanIn(u64),
    #[error("machine count must be >= 1")]
    ZeroMachines,
    #[error("machine count {n} exceeds N_max = {max}")]
    TooManyMachines { n: u64, max: u64 },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Error)]
pub enum ProfileFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

/// Measured environment parameters for one job on one cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterProfile {
    /// `R`: total number of training records.
    pub records: u64,
    /// `N_max`: maximum number of map tasks. `u64::MAX` stands for unbounded.
    pub max_machines: u64,
    /// `M`: records cached per task before spilling.
    pub cache_records: u64,
    /// `P`: map time per record, seconds.
    pub map_secs: f64,
    /// `D`: disk load time per record, seconds.
    pub load_secs: f64,
    /// `A`: transfer plus aggregation time per statistic object, seconds.
    pub agg_secs: f64,
}

impl ClusterProfile {
    pub fn new(
        records: u64,
        max_machines: u64,
        cache_records: u64,
        map_secs: f64,
        load_secs: f64,
        agg_secs: f64,
    ) -> Result<Self, ModelError> {
        let p = ClusterProfile {
            records,
            max_machines,
            cache_records,
            map_secs,
            load_secs,
            agg_secs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidProfile(m.to_string()));
        if self.records < 1 {
            return bad("R must be >= 1");
        }
        if self.max_machines < 1 {
            return bad("N_max must be >= 1");
        }
        if self.cache_records < 1 {
            return bad("M must be >= 1");
        }
        if !(self.map_secs.is_finite() && self.map_secs > 0.0) {
            return bad("P must be finite and > 0");
        }
        if !(self.load_secs.is_finite() && self.load_secs >= 0.0) {
            return bad("D must be finite and >= 0");
        }
        if !(self.agg_secs.is_finite() && self.agg_secs > 0.0) {
            return bad("A must be finite and > 0");
        }
        Ok(())
    }

    pub fn is_unbounded(&self) -> bool {
        self.max_machines == u64::MAX
    }

    /// Same profile with `N_max` lifted.
    pub fn unbounded(mut self) -> Self {
        self.max_machines = u64::MAX;
        self
    }

    /// `R / M` as a real number: the machine count at which the data exactly
    /// fills the aggregate cache.
    pub fn cache_boundary(&self) -> f64 {
        self.records as f64 / self.cache_records as f64
    }

    /// Smallest integer `N` with `R <= M * N`.
    pub fn min_cached_machines(&self) -> u64 {
        self.records.div_ceil(self.cache_records)
    }

    pub fn regime(&self, n: u64) -> Regime {
        if (self.records as u128) <= (self.cache_records as u128) * (n as u128) {
            Regime::Cached
        } else {
            Regime::Spilling
        }
    }

    /// Records re-read from disk per iteration at `n` machines, `max(0, R - M N)`.
    pub fn spilled_records(&self, n: u64) -> u64 {
        let cap = (self.cache_records as u128) * (n as u128);
        (self.records as u128).saturating_sub(cap) as u64
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProfileFileError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Render in the `key=value` profile format.
    pub fn to_profile_string(&self) -> String {
        let n_max = if self.is_unbounded() {
            "unbounded".to_string()
        } else {
            self.max_machines.to_string()
        };
        format!(
            "R={}\nN_max={}\nM={}\nP={:e}\nD={:e}\nA={:e}\n",
            self.records, n_max, self.cache_records, self.map_secs, self.load_secs, self.agg_secs
        )
    }
}

impl FromStr for ClusterProfile {
    type Err = ProfileFileError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut r = None;
        let mut n_max = None;
        let mut m = None;
        let mut p = None;
        let mut d = None;
        let mut a = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |msg: String| ProfileFileError::Syntax { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.replace('_', "")
                    .parse::<u64>()
                    .map_err(|e| syntax(format!("{key}: {e}")))
            };
            let real = |v: &str| v.parse::<f64>().map_err(|e| syntax(format!("{key}: {e}")));
            match key {
                "R" => r = Some(int(value)?),
                "N_max" => {
                    n_max = Some(match value {
                        "inf" | "unbounded" => u64::MAX,
                        v => int(v)?,
                    })
                }
                "M" => m = Some(int(value)?),
                "P" => p = Some(real(value)?),
                "D" => d = Some(real(value)?),
                "A" => a = Some(real(value)?),
                other => return Err(syntax(format!("unknown key `{other}`"))),
            }
        }
        Ok(ClusterProfile::new(
            r.ok_or(ProfileFileError::MissingKey("R"))?,
            n_max.ok_or(ProfileFileError::MissingKey("N_max"))?,
            m.ok_or(ProfileFileError::MissingKey("M"))?,
            p.ok_or(ProfileFileError::MissingKey("P"))?,
            d.ok_or(ProfileFileError::MissingKey("D"))?,
            a.ok_or(ProfileFileError::MissingKey("A"))?,
        )?)
    }
}

/// Tree fan-in used when costing the aggregation phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FanIn {
    /// Real fan-in with continuous height `ln N / ln f`.
    Continuous(f64),
    /// Integer fan-in with height `ceil(log_f N)`.
    Discrete(u64),
}

impl FanIn {
    /// The time-optimal continuous fan-in `e`.
    pub const OPTIMAL: FanIn = FanIn::Continuous(E);
}

/// A point in the plan space: machine count and fan-in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanPoint {
    pub machines: u64,
    pub fanin: FanIn,
}

impl PlanPoint {
    pub fn new(machines: u64, fanin: FanIn) -> Self {
        PlanPoint { machines, fanin }
    }

    /// `N` machines under the continuous optimal tree (`f = e`).
    pub fn continuous(machines: u64) -> Self {
        PlanPoint::new(machines, FanIn::OPTIMAL)
    }

    pub fn discrete(machines: u64, fanin: u64) -> Self {
        PlanPoint::new(machines, FanIn::Discrete(fanin))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Cached,
    Spilling,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Cached => "cached",
            Regime::Spilling => "spilling",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    /// Iteration wall-clock time, `map_time + agg_time`.
    pub time: f64,
    /// Machine-seconds, `N * time`.
    pub cost: f64,
    pub map_time: f64,
    pub agg_time: f64,
    pub regime: Regime,
}

impl CostEstimate {
    pub(crate) fn assemble(machines: u64, map_time: f64, agg_time: f64, regime: Regime) -> Self {
        let time = map_time + agg_time;
        CostEstimate {
            time,
            cost: machines as f64 * time,
            map_time,
            agg_time,
            regime,
        }
    }
}

/// `A * f * ln N / ln f`.
pub fn agg_time_continuous(machines: u64, fanin: f64, agg_secs: f64) -> Result<f64, ModelError> {
    if fanin.is_nan() || fanin <= 1.0 {
        return Err(ModelError::ContinuousFanIn(fanin));
    }
    if machines == 0 {
        return Err(ModelError::ZeroMachines);
    }
    if machines == 1 {
        return Ok(0.0);
    }
    Ok(agg_secs * fanin * (machines as f64).ln() / fanin.ln())
}

/// `A * f * ceil(log_f N)`.
pub fn agg_time_discrete(machines: u64, fanin: u64, agg_secs: f64) -> Result<f64, ModelError> {
    if fanin < 2 {
        return Err(ModelError::DiscreteFanIn(fanin));
    }
    if machines == 0 {
        return Err(ModelError::ZeroMachines);
    }
    Ok(agg_secs * (fanin * tree_height(machines, fanin) as u64) as f64)
}

/// Number of inner levels of a balanced tree: `ceil(log_f n)`, 0 for a
/// single leaf. Computed with integers so exact powers do not round up.
pub fn tree_height(leaves: u64, fanin: u64) -> u32 {
    debug_assert!(fanin >= 2);
    let mut height = 0;
    let mut width = leaves;
    while width > 1 {
        width = width.div_ceil(fanin);
        height += 1;
    }
    height
}

/// Map-phase time at `n` machines and the regime it runs in.
pub fn map_time(profile: &ClusterProfile, machines: u64) -> (f64, Regime) {
    let n = machines as f64;
    let work = profile.records as f64 * profile.map_secs;
    match profile.regime(machines) {
        Regime::Cached => (work / n, Regime::Cached),
        Regime::Spilling => {
            let spilled = profile.spilled_records(machines) as f64;
            ((work + spilled * profile.load_secs) / n, Regime::Spilling)
        }
    }
}

fn check_machines(profile: &ClusterProfile, machines: u64) -> Result<(), ModelError> {
    if machines == 0 {
        return Err(ModelError::ZeroMachines);
    }
    if machines > profile.max_machines {
        return Err(ModelError::TooManyMachines {
            n: machines,
            max: profile.max_machines,
        });
    }
    Ok(())
}

pub fn iteration_time(
    profile: &ClusterProfile,
    plan: PlanPoint,
) -> Result<CostEstimate, ModelError> {
    check_machines(profile, plan.machines)?;
    let (t_map, regime) = map_time(profile, plan.machines);
    let t_agg = match plan.fanin {
        FanIn::Continuous(f) => agg_time_continuous(plan.machines, f, profile.agg_secs)?,
        FanIn::Discrete(f) => agg_time_discrete(plan.machines, f, profile.agg_secs)?,
    };
    Ok(CostEstimate::assemble(plan.machines, t_map, t_agg, regime))
}

/// Closed-form iteration cost under the optimal in-loop tree (`f = e`),
/// dispatching on the regime at `machines`. See [`cost_cached`] and
/// [`cost_spilling`].
pub fn iteration_cost(profile: &ClusterProfile, machines: u64) -> Result<f64, ModelError> {
    check_machines(profile, machines)?;
    Ok(match profile.regime(machines) {
        Regime::Cached => cost_cached(profile, machines),
        Regime::Spilling => cost_spilling(profile, machines),
    })
}

/// `e A N ln N + R P`, the all-cached cost.
pub fn cost_cached(profile: &ClusterProfile, machines: u64) -> f64 {
    let n = machines as f64;
    E * profile.agg_secs * n * n.ln() + profile.records as f64 * profile.map_secs
}

/// `e A N ln N - N M D + R (P + D)`, the spilling cost. Evaluated as
/// `... + R P + (R - M N) D` so the spilled count stays an exact integer;
/// only meaningful when `R > M N`.
pub fn cost_spilling(profile: &ClusterProfile, machines: u64) -> f64 {
    let spilled = profile.records as i128 - profile.cache_records as i128 * machines as i128;
    cost_cached(profile, machines) + spilled as f64 * profile.load_secs
}
