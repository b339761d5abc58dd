//! Host microbenchmarks for the cost-model constants.
//!
//! Every timing discards one warm-up run and reports the median of the
//! remaining trials. All measurements run on the calling thread. These are
//! local reconstructions: `A` in particular is measured in-process and is a
//! lower bound on what a networked cluster would see.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::mem::size_of;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggtree::Combiner;
use crate::cost_model::{ClusterProfile, ModelError};
use crate::ingest::{CacheError, CacheReader, CacheWriter};
use crate::ml_bgd::{
    accumulate_gradient, GradientStatistic, GradientSum, LossKind, ModelVector, SparseExample,
};

/// Minimum number of timed trials.
pub const MIN_TRIALS: usize = 5;
/// Samples smaller than this give unstable per-record timings.
pub const STABLE_SAMPLE: usize = 10_000;
/// Relative trial spread above which a measurement is flagged.
pub const MAX_SPREAD: f64 = 0.25;
/// Warm decode faster than this fraction of the cold one is flagged.
pub const WARM_CACHE_RATIO: f64 = 0.1;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("sample is empty")]
    EmptySample,
    #[error("model dimension must be >= 1")]
    ZeroDimension,
    #[error("record needs dimension {needed} but model has {dim}")]
    Dimension { needed: usize, dim: usize },
    #[error("memory budget of {budget} bytes holds no {footprint}-byte record")]
    BudgetTooSmall { budget: u64, footprint: u64 },
    #[error("writing sample file {path}: {error}")]
    SampleFile {
        path: PathBuf,
        error: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Profile(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationWarning {
    SmallSample {
        records: usize,
    },
    /// Trials disagree by more than [`MAX_SPREAD`].
    Unstable {
        spread: f64,
    },
    /// Warm decode under [`WARM_CACHE_RATIO`] of the cold one.
    WarmCacheSuspect {
        warm: f64,
        cold: f64,
    },
}

/// Per-unit time estimate, seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub secs: f64,
    /// Per-unit time of every timed trial.
    pub trials: Vec<f64>,
    pub warnings: Vec<CalibrationWarning>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-unit seconds, floored at one nanosecond per batch so estimates stay
/// strictly positive on coarse clocks.
fn per_unit(elapsed: Duration, units: usize) -> f64 {
    elapsed.max(Duration::from_nanos(1)).as_secs_f64() / units as f64
}

fn estimate(trials: Vec<f64>, mut warnings: Vec<CalibrationWarning>) -> Estimate {
    let secs = median(&trials);
    let lo = trials.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = trials.iter().copied().fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    if spread > MAX_SPREAD {
        log::warn!("trials spread {:.0}%; host may be busy", spread * 100.0);
        warnings.push(CalibrationWarning::Unstable { spread });
    }
    Estimate {
        secs,
        trials,
        warnings,
    }
}

/// `P`: seconds to fold one record's squared-loss gradient into a statistic.
pub fn measure_map_secs(
    sample: &[SparseExample],
    dim: usize,
    trials: usize,
) -> Result<Estimate, CalibrateError> {
    if dim == 0 {
        return Err(CalibrateError::ZeroDimension);
    }
    if sample.is_empty() {
        return Err(CalibrateError::EmptySample);
    }
    if let Some(needed) = sample.iter().filter_map(|r| r.max_index()).max() {
        if needed as usize >= dim {
            return Err(CalibrateError::Dimension {
                needed: needed as usize + 1,
                dim,
            });
        }
    }
    let mut warnings = Vec::new();
    if sample.len() < STABLE_SAMPLE {
        log::warn!(
            "sample of {} records is below {STABLE_SAMPLE}; P may be noisy",
            sample.len()
        );
        warnings.push(CalibrationWarning::SmallSample {
            records: sample.len(),
        });
    }
    let mut model = ModelVector::zeros(dim, 1.0);
    for (i, w) in model.w.iter_mut().enumerate() {
        *w = ((i % 7) as f64 - 3.0) * 1e-3;
    }
    let mut stat = GradientStatistic::zeros(dim);
    let mut run = || -> Result<Duration, CalibrateError> {
        stat.grad.iter_mut().for_each(|g| *g = 0.0);
        let start = Instant::now();
        for rec in sample {
            accumulate_gradient(&mut stat, rec, &model, LossKind::Squared).map_err(|_| {
                CalibrateError::Dimension {
                    needed: dim + 1,
                    dim,
                }
            })?;
        }
        let t = start.elapsed();
        std::hint::black_box(&stat);
        Ok(t)
    };
    run()?;
    let times = (0..trials.max(MIN_TRIALS))
        .map(|_| run().map(|t| per_unit(t, sample.len())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(estimate(times, warnings))
}

/// Write `records` as a cache file at `path`.
pub fn write_sample_file(path: &Path, records: &[SparseExample]) -> Result<(), CalibrateError> {
    let wrap = |error| CalibrateError::SampleFile {
        path: path.to_path_buf(),
        error,
    };
    let mut w = CacheWriter::new(BufWriter::new(File::create(path).map_err(wrap)?))?;
    for r in records {
        w.push(r)?;
    }
    let file = w.finish()?.into_inner().map_err(|e| wrap(e.into_error()))?;
    file.sync_all().map_err(wrap)?;
    Ok(())
}

fn decode_pass(path: &Path) -> Result<(Duration, usize), CalibrateError> {
    let start = Instant::now();
    let mut count = 0;
    for rec in CacheReader::new(BufReader::new(File::open(path)?))? {
        std::hint::black_box(rec?);
        count += 1;
    }
    Ok((start.elapsed(), count))
}

/// `D`: seconds to read and decode one record from a cache file.
///
/// The first pass over the file is the cold reading and is the estimate.
/// Later passes are warm; a warm median far below the cold pass is flagged
/// because it means the file was served from the page cache.
pub fn measure_load_secs(path: &Path, trials: usize) -> Result<Estimate, CalibrateError> {
    let (cold_t, count) = decode_pass(path)?;
    if count == 0 {
        return Err(CalibrateError::EmptySample);
    }
    let cold = per_unit(cold_t, count);
    let warm_trials = (0..trials.max(MIN_TRIALS))
        .map(|_| decode_pass(path).map(|(t, _)| per_unit(t, count)))
        .collect::<Result<Vec<_>, _>>()?;
    let warm = median(&warm_trials);
    let mut warnings = Vec::new();
    if warm < WARM_CACHE_RATIO * cold {
        log::warn!("warm decode {warm:.3e}s vs cold {cold:.3e}s per record");
        warnings.push(CalibrationWarning::WarmCacheSuspect { warm, cold });
    }
    let mut est = estimate(warm_trials, warnings);
    est.secs = cold;
    Ok(est)
}

/// `A`: seconds to move one statistic of `dim` components through an
/// in-process channel and combine it into an accumulator.
pub fn measure_agg_secs(dim: usize, trials: usize) -> Result<Estimate, CalibrateError> {
    if dim == 0 {
        return Err(CalibrateError::ZeroDimension);
    }
    let comb = GradientSum { dim };
    let mut acc = comb.identity();
    let item = GradientStatistic {
        grad: (0..dim).map(|i| i as f64 * 1e-9).collect(),
        loss: 1.0,
        count: 1,
    };
    let (tx, rx) = mpsc::channel::<GradientStatistic>();
    let mut run = || {
        let start = Instant::now();
        tx.send(item.clone()).expect("receiver alive");
        let got = rx.recv().expect("sender alive");
        comb.combine(&mut acc, got);
        start.elapsed()
    };
    run();
    let times: Vec<f64> = (0..trials.max(MIN_TRIALS))
        .map(|_| per_unit(run(), 1))
        .collect();
    std::hint::black_box(&acc);
    Ok(estimate(times, Vec::new()))
}

/// In-memory bytes held by one cached record.
pub fn record_footprint(rec: &SparseExample) -> u64 {
    (size_of::<SparseExample>() + rec.nnz() * size_of::<(u32, f64)>()) as u64
}

/// Mean footprint over `sample`, rounded up.
pub fn mean_footprint(sample: &[SparseExample]) -> Result<u64, CalibrateError> {
    if sample.is_empty() {
        return Err(CalibrateError::EmptySample);
    }
    let total: u64 = sample.iter().map(record_footprint).sum();
    Ok(total.div_ceil(sample.len() as u64))
}

/// `M`: records that fit in `budget` bytes.
pub fn measure_cache_records(budget: u64, footprint: u64) -> Result<u64, CalibrateError> {
    match budget.checked_div(footprint) {
        Some(m) if m >= 1 => Ok(m),
        _ => Err(CalibrateError::BudgetTooSmall { budget, footprint }),
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub profile: ClusterProfile,
    pub map: Estimate,
    pub load: Estimate,
    pub agg: Estimate,
    pub footprint: u64,
}

/// Measure `P`, `D`, `A` and `M` on `sample` and assemble a profile for a
/// job of `records` records on up to `max_machines` machines. The sample
/// is written to a cache file in `scratch` for the `D` measurement.
pub fn calibrate(
    sample: &[SparseExample],
    dim: usize,
    budget: u64,
    records: u64,
    max_machines: u64,
    trials: usize,
    scratch: &Path,
) -> Result<CalibrationReport, CalibrateError> {
    let map = measure_map_secs(sample, dim, trials)?;
    let path = scratch.join("calibration-sample.imr");
    write_sample_file(&path, sample)?;
    let load = measure_load_secs(&path, trials);
    std::fs::remove_file(&path)?;
    let load = load?;
    let agg = measure_agg_secs(dim, trials)?;
    let footprint = mean_footprint(sample)?;
    let cache_records = measure_cache_records(budget, footprint)?;
    let profile = ClusterProfile::new(
        records,
        max_machines,
        cache_records,
        map.secs,
        load.secs,
        agg.secs,
    )?;
    Ok(CalibrationReport {
        profile,
        map,
        load,
        agg,
        footprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ml_bgd::synthetic_dataset;

    #[test]
    fn median_of_trials() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn cache_records_from_budget() {
        assert_eq!(measure_cache_records(10 * 48, 48).unwrap(), 10);
        assert_eq!(measure_cache_records(10 * 48 + 47, 48).unwrap(), 10);
        assert!(matches!(
            measure_cache_records(47, 48),
            Err(CalibrateError::BudgetTooSmall { .. })
        ));
        assert!(matches!(
            measure_cache_records(47, 0),
            Err(CalibrateError::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let sample = synthetic_dataset(10, 8, 3, 1, LossKind::Squared);
        assert!(matches!(
            measure_map_secs(&sample, 0, 5),
            Err(CalibrateError::ZeroDimension)
        ));
        assert!(matches!(
            measure_map_secs(&[], 8, 5),
            Err(CalibrateError::EmptySample)
        ));
        assert!(matches!(
            measure_map_secs(&sample, 4, 5),
            Err(CalibrateError::Dimension { .. })
        ));
        assert!(matches!(
            measure_agg_secs(0, 5),
            Err(CalibrateError::ZeroDimension)
        ));
    }

    #[test]
    fn small_sample_warns_but_succeeds() {
        let sample = synthetic_dataset(100, 8, 3, 1, LossKind::Squared);
        let est = measure_map_secs(&sample, 8, 5).unwrap();
        assert!(est.secs > 0.0);
        assert_eq!(est.trials.len(), 5);
        assert!(est
            .warnings
            .contains(&CalibrationWarning::SmallSample { records: 100 }));
    }

    #[test]
    fn map_estimate_is_stable_under_doubling() {
        let sample = synthetic_dataset(80_000, 64, 16, 4, LossKind::Squared);
        // timing on a shared host is noisy; accept the first of three attempts
        let ratios: Vec<f64> = (0..3)
            .map(|_| {
                let half = measure_map_secs(&sample[..40_000], 64, 9).unwrap().secs;
                let full = measure_map_secs(&sample, 64, 9).unwrap().secs;
                full / half
            })
            .collect();
        assert!(ratios.iter().any(|r| (r - 1.0).abs() <= 0.2), "{ratios:?}");
    }

    #[test]
    fn load_and_agg_estimates_are_positive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.imr");
        write_sample_file(&path, &synthetic_dataset(2000, 32, 8, 2, LossKind::Squared)).unwrap();
        let d = measure_load_secs(&path, 5).unwrap();
        assert!(d.secs > 0.0);
        assert!(d.trials.iter().all(|&t| t > 0.0));
        let a = measure_agg_secs(1 << 12, 5).unwrap();
        assert!(a.secs > 0.0);

        write_sample_file(&path, &[]).unwrap();
        assert!(matches!(
            measure_load_secs(&path, 5),
            Err(CalibrateError::EmptySample)
        ));
    }

    #[test]
    fn full_calibration_yields_a_valid_profile() {
        let dir = tempfile::tempdir().unwrap();
        let sample = synthetic_dataset(2000, 32, 8, 3, LossKind::Squared);
        let footprint = mean_footprint(&sample).unwrap();
        let report = calibrate(&sample, 32, footprint * 500, 1_000_000, 64, 5, dir.path()).unwrap();
        assert_eq!(report.profile.cache_records, 500);
        assert_eq!(report.profile.records, 1_000_000);
        report.profile.validate().unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
