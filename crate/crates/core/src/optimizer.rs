//! Cost-based choice of machine count and aggregation fan-in.
//!
//! The fan-in is decided first. Under the continuous tree model the fastest
//! tree has fan-in `e` for every `N` and `A`, and inside a loop the fastest
//! tree is also the cheapest because the `N` map machines idle while it runs.
//! With `f = e` fixed, time and cost are functions of `N` alone and each
//! regime (cached, spilling) has a closed-form stationary point:
//!
//! | objective | cached (`N >= R/M`)  | spilling (`N < R/M`)     |
//! |-----------|----------------------|--------------------------|
//! | time      | `R P / (A e)`        | `R (P + D) / (A e)`      |
//! | cost      | lower bound `R / M`  | `exp(M D / (A e) - 1)`   |
//!
//! Every branch objective is unimodal in `N`, so rounding the clamped
//! stationary point down and up, plus both domain ends, covers the integer
//! minimizer. [`validate_against_sweep`] checks that claim against an
//! exhaustive scan.

use std::f64::consts::E;
use std::fmt;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cost_model::{
    agg_time_discrete, iteration_time, tree_height, ClusterProfile, CostEstimate, ModelError,
    PlanPoint, Regime,
};

/// Largest `N_max` the exhaustive sweep accepts.
pub const MAX_SWEEP_MACHINES: u64 = 100_000;

/// Relative slack allowed between the optimizer and the sweep minimum.
pub const SWEEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("leaf count must be >= 2, got {0}")]
    TooFewLeaves(u64),
    #[error("N_max = {0} is too large to sweep (limit {MAX_SWEEP_MACHINES})")]
    SweepTooLarge(u64),
    #[error("optimizer diverged from sweep: {0}")]
    Divergence(Box<SweepReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    MinTime,
    MinCost,
}

impl Objective {
    pub fn of(&self, est: &CostEstimate) -> f64 {
        match self {
            Objective::MinTime => est.time,
            Objective::MinCost => est.cost,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::MinTime => "time",
            Objective::MinCost => "cost",
        })
    }
}

/// Fan-in of the fastest aggregation tree under the continuous model.
pub fn optimal_fanin_time() -> f64 {
    E
}

/// Integer fan-in in `[2, n_leaves]` minimizing `A * f * ceil(log_f n)`,
/// ties going to the smaller fan-in.
///
/// For a fixed height `h` the cost grows with `f`, so only the smallest
/// fan-in reaching each height, `ceil(n^(1/h))`, can be optimal.
pub fn optimal_fanin_discrete(n_leaves: u64, agg_secs: f64) -> Result<u64, OptimizeError> {
    if n_leaves < 2 {
        return Err(OptimizeError::TooFewLeaves(n_leaves));
    }
    if agg_secs.is_nan() || agg_secs <= 0.0 {
        return Err(ModelError::InvalidProfile("A must be > 0".into()).into());
    }
    let mut best: Option<(u64, f64)> = None;
    for h in 1..=tree_height(n_leaves, 2) {
        let f = min_fanin_for_height(n_leaves, h);
        let t = agg_time_discrete(n_leaves, f, agg_secs)?;
        match best {
            Some((bf, bt)) if bt < t || (bt == t && bf <= f) => {}
            _ => best = Some((f, t)),
        }
    }
    Ok(best.map(|(f, _)| f).unwrap_or(2))
}

/// Smallest `f >= 2` with `f^h >= n`.
fn min_fanin_for_height(n: u64, h: u32) -> u64 {
    let reaches = |f: u64| -> bool {
        let mut acc: u128 = 1;
        for _ in 0..h {
            acc *= f as u128;
            if acc >= n as u128 {
                return true;
            }
        }
        acc >= n as u128
    };
    let mut f = ((n as f64).powf(1.0 / h as f64).floor() as u64).max(2);
    while f > 2 && reaches(f - 1) {
        f -= 1;
    }
    while !reaches(f) {
        f += 1;
    }
    f
}

/// Cost-optimal fan-in. A standalone reduce is cheapest as a flat tree
/// (`N`); inside a loop the idle map machines make the fastest tree (`e`)
/// the cheapest as well.
pub fn optimal_fanin_cost(in_loop: bool, machines: u64) -> f64 {
    if in_loop {
        optimal_fanin_time()
    } else {
        machines as f64
    }
}

/// Integer companion of [`optimal_fanin_cost`].
pub fn optimal_fanin_cost_discrete(
    in_loop: bool,
    machines: u64,
    agg_secs: f64,
) -> Result<u64, OptimizeError> {
    if machines < 2 {
        return Err(OptimizeError::TooFewLeaves(machines));
    }
    if in_loop {
        optimal_fanin_discrete(machines, agg_secs)
    } else {
        Ok(machines)
    }
}

/// The optimizer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalPlan {
    pub objective: Objective,
    pub machines: u64,
    pub fanin: u64,
    pub regime: Regime,
    /// Estimate under the continuous `f = e` model the optimizer minimized.
    pub predicted: CostEstimate,
    /// Estimate of the executable plan with the integer fan-in.
    pub executable: CostEstimate,
    /// Stationary point of the chosen branch before clamping and rounding.
    pub continuous_machines: f64,
}

impl PhysicalPlan {
    pub const CSV_HEADER: [&'static str; 7] =
        ["objective", "N", "f", "regime", "T", "C", "continuous_N"];

    pub fn report(&self) -> String {
        format!(
            "objective:        min {}\n\
             machines (N):     {}\n\
             fan-in (f):       {}\n\
             regime:           {}\n\
             predicted time:   {:.6} s (map {:.6} s, aggregation {:.6} s)\n\
             predicted cost:   {:.6} machine-s\n\
             executable time:  {:.6} s with integer fan-in\n\
             continuous N:     {:.4}\n",
            self.objective,
            self.machines,
            self.fanin,
            self.regime,
            self.predicted.time,
            self.predicted.map_time,
            self.predicted.agg_time,
            self.predicted.cost,
            self.executable.time,
            self.continuous_machines,
        )
    }

    pub fn write_csv<W: Write>(&self, out: W, with_header: bool) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if with_header {
            w.write_record(Self::CSV_HEADER)?;
        }
        w.write_record([
            self.objective.to_string(),
            self.machines.to_string(),
            self.fanin.to_string(),
            self.regime.to_string(),
            self.predicted.time.to_string(),
            self.predicted.cost.to_string(),
            self.continuous_machines.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Best integer plan within one regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchOptimum {
    pub regime: Regime,
    pub machines: u64,
    pub value: f64,
    pub estimate: CostEstimate,
    pub continuous_machines: f64,
}

/// Objective value at `n` machines under the `f = e` model.
pub fn objective_value(
    profile: &ClusterProfile,
    machines: u64,
    objective: Objective,
) -> Result<f64, ModelError> {
    Ok(objective.of(&iteration_time(profile, PlanPoint::continuous(machines))?))
}

fn stationary_point(profile: &ClusterProfile, objective: Objective, regime: Regime) -> f64 {
    let r = profile.records as f64;
    let ae = profile.agg_secs * E;
    match (objective, regime) {
        (Objective::MinTime, Regime::Cached) => r * profile.map_secs / ae,
        (Objective::MinTime, Regime::Spilling) => r * (profile.map_secs + profile.load_secs) / ae,
        // Cached cost `e A N ln N + R P` only grows with N.
        (Objective::MinCost, Regime::Cached) => profile.cache_boundary(),
        // d/dN (e A N ln N - N M D) = e A (ln N + 1) - M D
        (Objective::MinCost, Regime::Spilling) => {
            (profile.cache_records as f64 * profile.load_secs / ae - 1.0).exp()
        }
    }
}

/// Integer domain `[lo, hi]` of a regime, intersected with `[1, N_max]`.
fn branch_domain(profile: &ClusterProfile, regime: Regime) -> Option<(u64, u64)> {
    let boundary = profile.min_cached_machines().max(1);
    let (lo, hi) = match regime {
        Regime::Cached => (boundary, profile.max_machines),
        Regime::Spilling => (1, boundary - 1),
    };
    let hi = hi.min(profile.max_machines);
    (lo <= hi).then_some((lo, hi))
}

fn branch_optimum(
    profile: &ClusterProfile,
    objective: Objective,
    regime: Regime,
) -> Result<Option<BranchOptimum>, ModelError> {
    let Some((lo, hi)) = branch_domain(profile, regime) else {
        return Ok(None);
    };
    let x = stationary_point(profile, objective, regime);
    let clamp = |v: f64| (v as u64).clamp(lo, hi);
    let mut candidates = [lo, hi, clamp(x.floor()), clamp(x.ceil())];
    candidates.sort_unstable();

    let mut best: Option<BranchOptimum> = None;
    for n in candidates {
        let estimate = iteration_time(profile, PlanPoint::continuous(n))?;
        debug_assert_eq!(estimate.regime, regime);
        let value = objective.of(&estimate);
        if best.is_none_or(|b| value < b.value) {
            best = Some(BranchOptimum {
                regime,
                machines: n,
                value,
                estimate,
                continuous_machines: x,
            });
        }
    }
    Ok(best)
}

/// Best integer plan of each regime: `(cached, spilling)`.
pub fn branch_optima(
    profile: &ClusterProfile,
    objective: Objective,
) -> Result<(Option<BranchOptimum>, Option<BranchOptimum>), ModelError> {
    profile.validate()?;
    Ok((
        branch_optimum(profile, objective, Regime::Cached)?,
        branch_optimum(profile, objective, Regime::Spilling)?,
    ))
}

/// Optimize for a MapReduce operator inside a loop.
pub fn optimize(
    profile: &ClusterProfile,
    objective: Objective,
) -> Result<PhysicalPlan, OptimizeError> {
    optimize_with(profile, objective, true)
}

/// `in_loop = false` only changes the cost-objective fan-in to the flat tree.
pub fn optimize_with(
    profile: &ClusterProfile,
    objective: Objective,
    in_loop: bool,
) -> Result<PhysicalPlan, OptimizeError> {
    let (cached, spilling) = branch_optima(profile, objective)?;
    let best = match (cached, spilling) {
        (Some(c), Some(s)) => {
            // equal values: fewer machines wins, and spilling always has fewer
            if s.value <= c.value {
                s
            } else {
                c
            }
        }
        (Some(b), None) | (None, Some(b)) => b,
        (None, None) => unreachable!("regime domains partition [1, N_max]"),
    };

    let fanin = if best.machines < 2 {
        2
    } else {
        match objective {
            Objective::MinTime => optimal_fanin_discrete(best.machines, profile.agg_secs)?,
            Objective::MinCost => {
                optimal_fanin_cost_discrete(in_loop, best.machines, profile.agg_secs)?
            }
        }
    };
    let executable = iteration_time(profile, PlanPoint::discrete(best.machines, fanin))?;

    Ok(PhysicalPlan {
        objective,
        machines: best.machines,
        fanin,
        regime: best.regime,
        predicted: best.estimate,
        executable,
        continuous_machines: best.continuous_machines,
    })
}

/// Whether accepting some disk I/O beats every fully cached plan when
/// machines are unlimited.
///
/// With `x = M P / (A e)` and `u = D / P` the spilling optimum lies strictly
/// inside the spilling domain exactly when `x (1 + u) < 1`, and then it is
/// strictly faster than the best cached plan, which sits on the `N = R / M`
/// boundary shared by both regimes. Spilling also needs `R > M`, otherwise a
/// single machine caches everything.
pub fn spill_beneficial(profile: &ClusterProfile) -> bool {
    let (ratio, bounds) = spill_ratio_bounds(profile);
    profile.records > profile.cache_records && ratio > 0.0 && ratio < bounds.exact
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpillBounds {
    /// `1 / x - 1`: tight upper bound on `D / P`.
    pub exact: f64,
    /// `e^(1 - x) - 1`: a sufficient bound, always `<= exact`.
    pub conservative: f64,
}

/// `D / P` and the upper bounds it is compared against.
pub fn spill_ratio_bounds(profile: &ClusterProfile) -> (f64, SpillBounds) {
    let x = profile.cache_records as f64 * profile.map_secs / (profile.agg_secs * E);
    let ratio = profile.load_secs / profile.map_secs;
    (
        ratio,
        SpillBounds {
            exact: 1.0 / x - 1.0,
            conservative: (1.0 - x).exp() - 1.0,
        },
    )
}

/// Optimum of one regime over real `N >= 1` with no upper limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousOptimum {
    pub machines: f64,
    pub time: f64,
}

fn continuous_time(profile: &ClusterProfile, n: f64) -> f64 {
    let r = profile.records as f64;
    let spilled = (r - profile.cache_records as f64 * n).max(0.0);
    (r * profile.map_secs + spilled * profile.load_secs) / n + E * profile.agg_secs * n.ln()
}

/// Minimum-time optimum of each regime over the reals, `N_max` ignored.
/// The spilling entry is `None` when its infimum is only approached at the
/// shared `R / M` boundary (or its domain is empty), since it then never
/// beats the cached branch.
pub fn continuous_time_optima(
    profile: &ClusterProfile,
) -> (ContinuousOptimum, Option<ContinuousOptimum>) {
    let boundary = profile.cache_boundary();
    let cached_n = stationary_point(profile, Objective::MinTime, Regime::Cached)
        .max(boundary)
        .max(1.0);
    let cached = ContinuousOptimum {
        machines: cached_n,
        time: continuous_time(profile, cached_n),
    };
    let w = stationary_point(profile, Objective::MinTime, Regime::Spilling);
    let spilling = (boundary > 1.0 && w < boundary).then(|| {
        let n = w.max(1.0);
        ContinuousOptimum {
            machines: n,
            time: continuous_time(profile, n),
        }
    });
    (cached, spilling)
}

/// Optimizer result next to the exhaustive-scan result for one profile.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub profile: ClusterProfile,
    pub objective: Objective,
    pub optimized_machines: u64,
    pub optimized_value: f64,
    pub sweep_machines: u64,
    pub sweep_value: f64,
}

impl SweepReport {
    /// `(optimized - sweep) / sweep`; never negative when the sweep is exact.
    pub fn relative_gap(&self) -> f64 {
        (self.optimized_value - self.sweep_value) / self.sweep_value.abs()
    }

    pub fn diverged(&self) -> bool {
        self.relative_gap() > SWEEP_TOLERANCE
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "min {} | optimizer N={} value={:.12e} | sweep N={} value={:.12e} | gap={:.3e} | profile R={} N_max={} M={} P={:e} D={:e} A={:e}",
            self.objective,
            self.optimized_machines,
            self.optimized_value,
            self.sweep_machines,
            self.sweep_value,
            self.relative_gap(),
            self.profile.records,
            self.profile.max_machines,
            self.profile.cache_records,
            self.profile.map_secs,
            self.profile.load_secs,
            self.profile.agg_secs,
        )
    }
}

/// Scan every `N` in `[1, N_max]`; ties go to the smaller `N`.
pub fn sweep_minimum(
    profile: &ClusterProfile,
    objective: Objective,
) -> Result<(u64, f64), OptimizeError> {
    profile.validate()?;
    if profile.max_machines > MAX_SWEEP_MACHINES {
        return Err(OptimizeError::SweepTooLarge(profile.max_machines));
    }
    let mut best = (1, objective_value(profile, 1, objective)?);
    for n in 2..=profile.max_machines {
        let v = objective_value(profile, n, objective)?;
        if v < best.1 {
            best = (n, v);
        }
    }
    Ok(best)
}

/// Run [`optimize`] and the exhaustive scan on `profile`, erroring with the
/// report when the optimizer is worse than the scan beyond [`SWEEP_TOLERANCE`].
pub fn validate_against_sweep(
    profile: &ClusterProfile,
    objective: Objective,
) -> Result<SweepReport, OptimizeError> {
    let (sweep_machines, sweep_value) = sweep_minimum(profile, objective)?;
    let plan = optimize(profile, objective)?;
    let report = SweepReport {
        profile: *profile,
        objective,
        optimized_machines: plan.machines,
        optimized_value: objective.of(&plan.predicted),
        sweep_machines,
        sweep_value,
    };
    if report.diverged() {
        return Err(OptimizeError::Divergence(Box::new(report)));
    }
    Ok(report)
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Random profile with log-uniform parameters: `R` in `[1e3, 1e9]`, `M` in
/// `[1e2, 1e7]`, `P` and `D` in `[1e-7, 1e-2]`, `A` in `[1e-2, 10]`, and
/// `N_max` in `[1, max_machines]`.
pub fn random_profile<R: Rng>(rng: &mut R, max_machines: u64) -> ClusterProfile {
    ClusterProfile {
        records: log_uniform(rng, 1e3, 1e9).round() as u64,
        max_machines: (log_uniform(rng, 1.0, max_machines as f64 + 1.0) as u64)
            .clamp(1, max_machines),
        cache_records: log_uniform(rng, 1e2, 1e7).round() as u64,
        map_secs: log_uniform(rng, 1e-7, 1e-2),
        load_secs: log_uniform(rng, 1e-7, 1e-2),
        agg_secs: log_uniform(rng, 1e-2, 10.0),
    }
}

/// Results of validating a base profile plus seeded random profiles.
#[derive(Debug, Default)]
pub struct ValidationSummary {
    pub checked: usize,
    pub divergences: Vec<SweepReport>,
}

/// Validate `base` (if given) and `trials` random profiles for both
/// objectives. Random profiles draw `N_max` up to `max_machines`.
pub fn validate_trials(
    base: Option<&ClusterProfile>,
    trials: usize,
    seed: u64,
    max_machines: u64,
) -> Result<ValidationSummary, OptimizeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiles: Vec<ClusterProfile> = base.copied().into_iter().collect();
    profiles.extend((0..trials).map(|_| random_profile(&mut rng, max_machines)));

    let mut summary = ValidationSummary::default();
    for p in &profiles {
        for objective in [Objective::MinTime, Objective::MinCost] {
            summary.checked += 1;
            match validate_against_sweep(p, objective) {
                Ok(_) => {}
                Err(OptimizeError::Divergence(report)) => summary.divergences.push(*report),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(summary)
}
