//! Local execution of iterative MapReduce programs.
//!
//! A [`LoopProgram`] is an initializer, a body of [`Step`]s and a condition.
//! The body chains `MapReduce` steps, which turn the current model and the
//! partitioned records into a statistic, with `Sequential` steps, which turn
//! the model and the latest statistic into a new model.
//!
//! Records are loaded once into a [`PartitionSet`]: round-robin over `N`
//! partitions, the first `M` records of each kept in memory and the rest
//! spilled to a binary cache file that is re-read sequentially every
//! iteration. Partition `i` is always processed by map task `i`, and task
//! `i` always runs on worker `i mod workers`.
//!
//! Each map task folds its records into one pre-aggregated leaf statistic.
//! Leaves are reduced through a balanced tree of the plan's fan-in, and the
//! driver applies the `Sequential` step single-threaded.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::aggtree::{tree_fold_timed, AggError, Combiner, LeafOrder, TreeShape};
use crate::ingest::{CacheError, CacheReader, CacheWriter};
use crate::ml_bgd::SparseExample;
use crate::optimizer::PhysicalPlan;

/// Iteration cap applied when none is configured.
pub const DEFAULT_MAX_ITERATIONS: u64 = 100_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("loop body is empty")]
    EmptyBody,
    #[error("body step {0} is Sequential but no MapReduce precedes it")]
    SequentialWithoutStatistic(usize),
    #[error("body must end with a Sequential step so it yields a model")]
    EndsWithMapReduce,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("reading record source: {0}")]
    Source(Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("map task for partition {partition} failed in `{operator}`: {message}")]
    Map {
        partition: usize,
        operator: String,
        message: String,
    },
    #[error("sequential step `{operator}` failed: {message}")]
    Sequential { operator: String, message: String },
    #[error("plan uses {plan} machines but data has {partitions} partitions")]
    PlanMismatch { plan: usize, partitions: usize },
    #[error("machine count must be >= 1")]
    ZeroMachines,
    #[error("loop did not terminate within {0} iterations")]
    IterationCap(u64),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type MapFn<M, S> = dyn Fn(&M, &SparseExample, &mut S) -> Result<(), String> + Send + Sync;
type SeqFn<M, S> = dyn Fn(&M, &S) -> Result<M, String> + Send + Sync;

/// Map function folding records into a per-task accumulator, plus the
/// combiner that reduces accumulators through the tree.
pub struct MapReduce<M, S> {
    name: String,
    combiner: Box<dyn Combiner<S> + Send + Sync>,
    map: Box<MapFn<M, S>>,
}

impl<M, S> MapReduce<M, S> {
    pub fn new<C, F>(name: impl Into<String>, combiner: C, map: F) -> Self
    where
        C: Combiner<S> + Send + Sync + 'static,
        F: Fn(&M, &SparseExample, &mut S) -> Result<(), String> + Send + Sync + 'static,
    {
        MapReduce {
            name: name.into(),
            combiner: Box::new(combiner),
            map: Box::new(map),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

pub struct Sequential<M, S> {
    name: String,
    update: Box<SeqFn<M, S>>,
}

impl<M, S> Sequential<M, S> {
    pub fn new<F>(name: impl Into<String>, update: F) -> Self
    where
        F: Fn(&M, &S) -> Result<M, String> + Send + Sync + 'static,
    {
        Sequential {
            name: name.into(),
            update: Box::new(update),
        }
    }
}

pub enum Step<M, S> {
    MapReduce(MapReduce<M, S>),
    Sequential(Sequential<M, S>),
}

/// What the condition sees before each iteration.
pub struct LoopState<'a, M, S> {
    /// Completed body executions.
    pub iteration: u64,
    pub model: &'a M,
    /// Statistics produced by the last body execution, in body order.
    /// Empty before the first iteration.
    pub outputs: &'a [S],
}

type InitFn<M> = dyn Fn() -> M + Send + Sync;
type CondFn<M, S> = dyn for<'a> Fn(&LoopState<'a, M, S>) -> bool + Send + Sync;

pub struct LoopProgram<M, S> {
    initializer: Box<InitFn<M>>,
    body: Vec<Step<M, S>>,
    condition: Box<CondFn<M, S>>,
}

impl<M, S> LoopProgram<M, S> {
    /// `condition` returns `true` to run the body again.
    pub fn new<I, C>(
        initializer: I,
        body: Vec<Step<M, S>>,
        condition: C,
    ) -> Result<Self, ProgramError>
    where
        I: Fn() -> M + Send + Sync + 'static,
        C: for<'a> Fn(&LoopState<'a, M, S>) -> bool + Send + Sync + 'static,
    {
        if body.is_empty() {
            return Err(ProgramError::EmptyBody);
        }
        let mut seen_map = false;
        for (i, step) in body.iter().enumerate() {
            match step {
                Step::MapReduce(_) => seen_map = true,
                Step::Sequential(_) if !seen_map => {
                    return Err(ProgramError::SequentialWithoutStatistic(i))
                }
                Step::Sequential(_) => {}
            }
        }
        if matches!(body.last(), Some(Step::MapReduce(_))) {
            return Err(ProgramError::EndsWithMapReduce);
        }
        Ok(LoopProgram {
            initializer: Box::new(initializer),
            body,
            condition: Box::new(condition),
        })
    }

    pub fn initial_model(&self) -> M {
        (self.initializer)()
    }

    pub fn body(&self) -> &[Step<M, S>] {
        &self.body
    }
}

/// One map task's share of the data.
#[derive(Debug)]
pub struct Partition {
    index: usize,
    cached: Vec<SparseExample>,
    spill: Option<PathBuf>,
    spilled: u64,
}

impl Partition {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn cached(&self) -> &[SparseExample] {
        &self.cached
    }

    pub fn spilled_len(&self) -> u64 {
        self.spilled
    }

    pub fn len(&self) -> u64 {
        self.cached.len() as u64 + self.spilled
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fold every record, cached ones first, then the spill file in order.
    fn fold<M, S>(&self, op: &MapReduce<M, S>, model: &M) -> Result<(S, TaskCounts), EngineError> {
        let fail = |message: String| EngineError::Map {
            partition: self.index,
            operator: op.name.clone(),
            message,
        };
        let mut acc = op.combiner.identity();
        for rec in &self.cached {
            (op.map)(model, rec, &mut acc).map_err(fail)?;
        }
        let mut from_disk = 0;
        if let Some(path) = &self.spill {
            for rec in CacheReader::new(BufReader::new(File::open(path)?))? {
                (op.map)(model, &rec?, &mut acc).map_err(fail)?;
                from_disk += 1;
            }
        }
        Ok((
            acc,
            TaskCounts {
                from_cache: self.cached.len() as u64,
                from_disk,
            },
        ))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct TaskCounts {
    from_cache: u64,
    from_disk: u64,
}

enum SpillDir {
    Owned(tempfile::TempDir),
    Borrowed(PathBuf),
}

impl SpillDir {
    fn path(&self) -> &Path {
        match self {
            SpillDir::Owned(t) => t.path(),
            SpillDir::Borrowed(p) => p,
        }
    }
}

/// Records loaded and partitioned for a fixed machine count.
pub struct PartitionSet {
    partitions: Vec<Partition>,
    cache_records: usize,
    // keeps an owned temp directory alive as long as the spill files
    _spill_dir: SpillDir,
}

impl PartitionSet {
    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn machines(&self) -> usize {
        self.partitions.len()
    }

    pub fn cache_records(&self) -> usize {
        self.cache_records
    }

    pub fn records(&self) -> u64 {
        self.partitions.iter().map(Partition::len).sum()
    }

    pub fn spilled_records(&self) -> u64 {
        self.partitions.iter().map(|p| p.spilled).sum()
    }
}

struct PartitionBuilder {
    cached: Vec<SparseExample>,
    spill: Option<(PathBuf, CacheWriter<BufWriter<File>>)>,
}

/// Round-robin `source` over `machines` partitions, caching up to
/// `cache_records` records per partition and spilling the rest to cache
/// files in a fresh temporary directory.
pub fn load_and_partition<I, E>(
    source: I,
    machines: usize,
    cache_records: usize,
) -> Result<PartitionSet, EngineError>
where
    I: IntoIterator<Item = Result<SparseExample, E>>,
    E: std::error::Error + Send + Sync + 'static,
{
    let dir = SpillDir::Owned(tempfile::Builder::new().prefix("imr-spill").tempdir()?);
    partition_into(source, machines, cache_records, dir)
}

/// [`load_and_partition`] with spill files written under `spill_dir`.
pub fn load_and_partition_in<I, E>(
    source: I,
    machines: usize,
    cache_records: usize,
    spill_dir: &Path,
) -> Result<PartitionSet, EngineError>
where
    I: IntoIterator<Item = Result<SparseExample, E>>,
    E: std::error::Error + Send + Sync + 'static,
{
    fs::create_dir_all(spill_dir)?;
    partition_into(
        source,
        machines,
        cache_records,
        SpillDir::Borrowed(spill_dir.to_path_buf()),
    )
}

fn partition_into<I, E>(
    source: I,
    machines: usize,
    cache_records: usize,
    dir: SpillDir,
) -> Result<PartitionSet, EngineError>
where
    I: IntoIterator<Item = Result<SparseExample, E>>,
    E: std::error::Error + Send + Sync + 'static,
{
    if machines == 0 {
        return Err(EngineError::ZeroMachines);
    }
    let mut builders: Vec<PartitionBuilder> = (0..machines)
        .map(|_| PartitionBuilder {
            cached: Vec::new(),
            spill: None,
        })
        .collect();
    for (k, rec) in source.into_iter().enumerate() {
        let rec = rec.map_err(|e| EngineError::Source(Box::new(e)))?;
        let i = k % machines;
        let b = &mut builders[i];
        if b.cached.len() < cache_records {
            b.cached.push(rec);
            continue;
        }
        if b.spill.is_none() {
            let path = dir.path().join(format!("partition-{i:05}.imr"));
            let writer = CacheWriter::new(BufWriter::new(File::create(&path)?))?;
            b.spill = Some((path, writer));
        }
        b.spill.as_mut().unwrap().1.push(&rec)?;
    }

    let mut partitions = Vec::with_capacity(machines);
    for (index, b) in builders.into_iter().enumerate() {
        let (spill, spilled) = match b.spill {
            Some((path, writer)) => {
                let n = writer.count() as u64;
                writer
                    .finish()?
                    .into_inner()
                    .map_err(|e| e.into_error())?
                    .sync_all()?;
                (Some(path), n)
            }
            None => (None, 0),
        };
        partitions.push(Partition {
            index,
            cached: b.cached,
            spill,
            spilled,
        });
    }
    Ok(PartitionSet {
        partitions,
        cache_records,
        _spill_dir: dir,
    })
}

/// Machine count, fan-in and leaf order for one execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecPlan {
    pub machines: usize,
    pub fanin: usize,
    pub leaf_order: LeafOrder,
}

impl ExecPlan {
    pub fn new(machines: usize, fanin: usize) -> Self {
        ExecPlan {
            machines,
            fanin,
            leaf_order: LeafOrder::Partition,
        }
    }
}

impl From<&PhysicalPlan> for ExecPlan {
    fn from(p: &PhysicalPlan) -> Self {
        ExecPlan::new(p.machines as usize, p.fanin as usize)
    }
}

/// Measurements for one MapReduce step (and the Sequential step that
/// consumes its statistic) within one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    /// Position of the MapReduce step in the body.
    pub operator: usize,
    pub machines: usize,
    pub fanin: usize,
    /// Measured elapsed time of map, aggregation and sequential phases.
    pub wall_time: Duration,
    /// Slowest map task: the map phase if every task had its own machine.
    pub map_time: Duration,
    /// Sum over tree levels of the slowest node on each level.
    pub agg_time: Duration,
    pub seq_time: Duration,
    pub records_from_cache: u64,
    pub records_from_disk: u64,
    /// `machines * (map_time + agg_time + seq_time)` in seconds.
    pub machine_seconds: f64,
}

impl IterationStats {
    pub const CSV_HEADER: [&'static str; 11] = [
        "iteration",
        "operator",
        "machines",
        "fanin",
        "records_from_cache",
        "records_from_disk",
        "map_time_wall",
        "agg_time_wall",
        "seq_time_wall",
        "total_time_wall",
        "machine_seconds_wall",
    ];

    fn csv_record(&self) -> [String; 11] {
        [
            self.iteration.to_string(),
            self.operator.to_string(),
            self.machines.to_string(),
            self.fanin.to_string(),
            self.records_from_cache.to_string(),
            self.records_from_disk.to_string(),
            self.map_time.as_secs_f64().to_string(),
            self.agg_time.as_secs_f64().to_string(),
            self.seq_time.as_secs_f64().to_string(),
            self.wall_time.as_secs_f64().to_string(),
            self.machine_seconds.to_string(),
        ]
    }
}

/// Appends [`IterationStats`] rows to a CSV file, writing the header when
/// the file is new or empty.
pub struct StatsCsv {
    writer: csv::Writer<File>,
}

impl StatsCsv {
    pub fn append(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(IterationStats::CSV_HEADER)?;
            writer.flush()?;
        }
        Ok(StatsCsv { writer })
    }

    pub fn write(&mut self, stats: &IterationStats) -> Result<(), EngineError> {
        self.writer.write_record(stats.csv_record())?;
        self.writer.flush()?;
        Ok(())
    }
}

/// A file holding the latest model, replaced atomically on every write.
pub struct ModelStore<M> {
    path: PathBuf,
    encode: fn(&M, u64) -> Vec<u8>,
}

impl<M> ModelStore<M> {
    pub fn new(path: impl Into<PathBuf>, encode: fn(&M, u64) -> Vec<u8>) -> Self {
        ModelStore {
            path: path.into(),
            encode,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Write to a sibling temp file, then rename over the target.
    pub fn save(&self, model: &M, iteration: u64) -> Result<(), EngineError> {
        let dir = match self.path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&(self.encode)(model, iteration))?;
        tmp.as_file().sync_all()?;
        tmp.persist(&self.path).map_err(|e| e.error)?;
        Ok(())
    }
}

pub struct LoopOptions<M> {
    pub max_iterations: u64,
    /// Worker threads for map tasks; defaults to `min(N, available cores)`.
    pub workers: Option<usize>,
    pub model_store: Option<ModelStore<M>>,
    pub stats_csv: Option<PathBuf>,
}

impl<M> Default for LoopOptions<M> {
    fn default() -> Self {
        LoopOptions {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            workers: None,
            model_store: None,
            stats_csv: None,
        }
    }
}

#[derive(Debug)]
pub struct LoopOutcome<M, S> {
    pub model: M,
    /// Completed body executions.
    pub iterations: u64,
    /// Statistics from the last body execution, in body order.
    pub outputs: Vec<S>,
    pub stats: Vec<IterationStats>,
}

fn worker_count(machines: usize, configured: Option<usize>) -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    configured.unwrap_or(hw).clamp(1, machines.max(1))
}

fn check_plan(partitions: &PartitionSet, plan: &ExecPlan) -> Result<(), EngineError> {
    if plan.machines != partitions.machines() {
        return Err(EngineError::PlanMismatch {
            plan: plan.machines,
            partitions: partitions.machines(),
        });
    }
    if plan.fanin < 2 {
        return Err(AggError::FanIn(plan.fanin).into());
    }
    Ok(())
}

/// Run the map tasks of `op` and reduce their leaves. Returns the
/// statistic and a partially filled [`IterationStats`] (no seq_time yet).
fn run_map_reduce<M: Sync, S: Send>(
    op: &MapReduce<M, S>,
    model: &M,
    partitions: &PartitionSet,
    plan: &ExecPlan,
    workers: usize,
) -> Result<(S, IterationStats), EngineError> {
    let started = Instant::now();
    let n = partitions.machines();

    type TaskResult<S> = (usize, Result<(S, TaskCounts), EngineError>, Duration);
    let mut results: Vec<TaskResult<S>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| {
                            let t = Instant::now();
                            let r = partitions.partitions[i].fold(op, model);
                            (i, r, t.elapsed())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("map worker panicked"))
            .collect()
    });
    results.sort_by_key(|r| r.0);

    let mut leaves_by_partition = Vec::with_capacity(n);
    let mut counts = TaskCounts::default();
    let mut map_time = Duration::ZERO;
    for (_, r, elapsed) in results {
        let (leaf, c) = r?;
        counts.from_cache += c.from_cache;
        counts.from_disk += c.from_disk;
        map_time = map_time.max(elapsed);
        leaves_by_partition.push(Some(leaf));
    }
    let leaves: Vec<S> = plan
        .leaf_order
        .permutation(n)
        .into_iter()
        .map(|p| leaves_by_partition[p].take().expect("permutation"))
        .collect();

    let shape = TreeShape::new(n, plan.fanin)?;
    let (stat, level_times) = tree_fold_timed(leaves, &shape, op.combiner.as_ref())?;
    let agg_time = level_times.into_iter().sum();

    Ok((
        stat,
        IterationStats {
            iteration: 0,
            operator: 0,
            machines: n,
            fanin: plan.fanin,
            wall_time: started.elapsed(),
            map_time,
            agg_time,
            seq_time: Duration::ZERO,
            records_from_cache: counts.from_cache,
            records_from_disk: counts.from_disk,
            machine_seconds: 0.0,
        },
    ))
}

/// Execute the body once on `model`. Returns the new model, the statistics
/// of every MapReduce step, and one [`IterationStats`] per MapReduce step.
pub fn run_iteration<M: Sync, S: Send>(
    program: &LoopProgram<M, S>,
    model: M,
    partitions: &PartitionSet,
    plan: &ExecPlan,
    iteration: u64,
    workers: Option<usize>,
    mut on_sequential: impl FnMut(&M) -> Result<(), EngineError>,
) -> Result<(M, Vec<S>, Vec<IterationStats>), EngineError> {
    check_plan(partitions, plan)?;
    let workers = worker_count(plan.machines, workers);
    let mut model = model;
    let mut outputs: Vec<S> = Vec::new();
    let mut stats: Vec<IterationStats> = Vec::new();
    for (pos, step) in program.body.iter().enumerate() {
        match step {
            Step::MapReduce(op) => {
                let (stat, mut st) = run_map_reduce(op, &model, partitions, plan, workers)?;
                st.iteration = iteration;
                st.operator = pos;
                outputs.push(stat);
                stats.push(st);
            }
            Step::Sequential(seq) => {
                let t = Instant::now();
                let stat = outputs.last().expect("validated: a MapReduce precedes");
                model = (seq.update)(&model, stat).map_err(|message| EngineError::Sequential {
                    operator: seq.name.clone(),
                    message,
                })?;
                let elapsed = t.elapsed();
                if let Some(st) = stats.last_mut() {
                    st.seq_time += elapsed;
                    st.wall_time += elapsed;
                }
                on_sequential(&model)?;
            }
        }
    }
    for st in &mut stats {
        st.machine_seconds =
            st.machines as f64 * (st.map_time + st.agg_time + st.seq_time).as_secs_f64();
    }
    Ok((model, outputs, stats))
}

/// The loop driver: initializer, then body executions while the condition
/// holds. The condition is checked before every execution, so an empty
/// dataset or an immediately false condition returns the initial model.
pub fn run_loop<M: Sync, S: Send>(
    program: &LoopProgram<M, S>,
    partitions: &PartitionSet,
    plan: &ExecPlan,
    options: &LoopOptions<M>,
) -> Result<LoopOutcome<M, S>, EngineError> {
    check_plan(partitions, plan)?;
    let mut stats_csv = options
        .stats_csv
        .as_ref()
        .map(StatsCsv::append)
        .transpose()?;
    let mut model = program.initial_model();
    if let Some(store) = &options.model_store {
        store.save(&model, 0)?;
    }
    let mut outputs: Vec<S> = Vec::new();
    let mut iteration = 0u64;
    let mut all_stats = Vec::new();

    loop {
        let state = LoopState {
            iteration,
            model: &model,
            outputs: &outputs,
        };
        if !(program.condition)(&state) || partitions.records() == 0 {
            break;
        }
        if iteration >= options.max_iterations {
            return Err(EngineError::IterationCap(options.max_iterations));
        }
        let store = options.model_store.as_ref();
        let (next, outs, stats) = run_iteration(
            program,
            model,
            partitions,
            plan,
            iteration,
            options.workers,
            |m| store.map_or(Ok(()), |s| s.save(m, iteration + 1)),
        )?;
        if let Some(csv) = stats_csv.as_mut() {
            for st in &stats {
                csv.write(st)?;
            }
        }
        log::debug!("iteration {iteration} done");
        model = next;
        outputs = outs;
        all_stats.extend(stats);
        iteration += 1;
    }
    Ok(LoopOutcome {
        model,
        iterations: iteration,
        outputs,
        stats: all_stats,
    })
}
