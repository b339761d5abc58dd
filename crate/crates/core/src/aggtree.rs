//! Balanced aggregation trees.
//!
//! A tree over `n` leaves with fan-in `f` is built level by level: level 0
//! holds the leaves, and node `j` of level `i + 1` owns the contiguous
//! children `j*f .. min((j+1)*f, width_i)` of level `i`. Only the last node
//! of a level can be underfull. Folding is level-synchronous: nodes of one
//! level run in parallel, and each node folds its children in child-index
//! order so the result is deterministic for a fixed shape.

use std::ops::{AddAssign, Range};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggError {
    #[error("fan-in must be >= 2, got {0}")]
    FanIn(usize),
    #[error("a tree needs at least one leaf")]
    NoLeaves,
    #[error("expected {expected} leaves, got {got}")]
    LeafCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeShape {
    fanin: usize,
    /// Node count per level, leaves first, root last.
    levels: Vec<usize>,
}

impl TreeShape {
    pub fn new(n_leaves: usize, fanin: usize) -> Result<Self, AggError> {
        if fanin < 2 {
            return Err(AggError::FanIn(fanin));
        }
        if n_leaves == 0 {
            return Err(AggError::NoLeaves);
        }
        let mut levels = vec![n_leaves];
        let mut width = n_leaves;
        while width > 1 {
            width = width.div_ceil(fanin);
            levels.push(width);
        }
        Ok(TreeShape { fanin, levels })
    }

    pub fn n_leaves(&self) -> usize {
        self.levels[0]
    }

    pub fn fanin(&self) -> usize {
        self.fanin
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Number of inner levels.
    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    /// Children (indices into level `level`) of node `node` on level `level + 1`.
    pub fn children(&self, level: usize, node: usize) -> Range<usize> {
        let start = node * self.fanin;
        start..(start + self.fanin).min(self.levels[level])
    }

    /// Child count of the fullest node on each inner level.
    pub fn widest_nodes(&self) -> Vec<usize> {
        self.levels[..self.levels.len() - 1]
            .iter()
            .map(|&w| w.min(self.fanin))
            .collect()
    }
}

pub fn build_shape(n_leaves: usize, fanin: usize) -> Result<TreeShape, AggError> {
    TreeShape::new(n_leaves, fanin)
}

/// An associative, commutative binary operation with an identity.
pub trait Combiner<S> {
    fn identity(&self) -> S;

    /// Fold `item` into `acc`.
    fn combine(&self, acc: &mut S, item: S);
}

/// Sum of scalars.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarSum;

impl<T: AddAssign + Default> Combiner<T> for ScalarSum {
    fn identity(&self) -> T {
        T::default()
    }

    fn combine(&self, acc: &mut T, item: T) {
        *acc += item;
    }
}

/// Componentwise sum of fixed-length vectors.
#[derive(Debug, Clone, Copy)]
pub struct VecSum {
    pub dim: usize,
}

impl<T: AddAssign + Default + Clone> Combiner<Vec<T>> for VecSum {
    fn identity(&self) -> Vec<T> {
        vec![T::default(); self.dim]
    }

    fn combine(&self, acc: &mut Vec<T>, item: Vec<T>) {
        debug_assert_eq!(acc.len(), item.len());
        for (a, b) in acc.iter_mut().zip(item) {
            *a += b;
        }
    }
}

/// Order in which map outputs are attached to tree leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LeafOrder {
    /// Leaf `i` is partition `i`.
    #[default]
    Partition,
    /// A seeded random permutation of the partitions.
    Shuffled(u64),
}

impl LeafOrder {
    /// `perm[leaf] = partition`.
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        if let LeafOrder::Shuffled(seed) = *self {
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        perm
    }
}

fn fold_node<S, C: Combiner<S> + ?Sized>(combiner: &C, children: Vec<S>) -> S {
    let mut it = children.into_iter();
    let mut acc = it.next().unwrap_or_else(|| combiner.identity());
    for child in it {
        combiner.combine(&mut acc, child);
    }
    acc
}

/// Reduce `leaves` through `shape`.
pub fn tree_fold<S, C>(leaves: Vec<S>, shape: &TreeShape, combiner: &C) -> Result<S, AggError>
where
    S: Send,
    C: Combiner<S> + Sync + ?Sized,
{
    tree_fold_timed(leaves, shape, combiner).map(|(s, _)| s)
}

/// [`tree_fold`] that also reports, per inner level, the time of the
/// slowest node on that level (the level's critical path).
pub fn tree_fold_timed<S, C>(
    leaves: Vec<S>,
    shape: &TreeShape,
    combiner: &C,
) -> Result<(S, Vec<Duration>), AggError>
where
    S: Send,
    C: Combiner<S> + Sync + ?Sized,
{
    if leaves.len() != shape.n_leaves() {
        return Err(AggError::LeafCount {
            expected: shape.n_leaves(),
            got: leaves.len(),
        });
    }
    let mut level = leaves;
    let mut timings = Vec::with_capacity(shape.height());
    while level.len() > 1 {
        let (next, times): (Vec<S>, Vec<Duration>) = level
            .into_par_iter()
            .chunks(shape.fanin())
            .map(|children| {
                let start = Instant::now();
                let node = fold_node(combiner, children);
                (node, start.elapsed())
            })
            .unzip();
        timings.push(times.into_iter().max().unwrap_or_default());
        level = next;
    }
    let root = level.pop().ok_or(AggError::NoLeaves)?;
    Ok((root, timings))
}

/// Plain left fold, the reference every tree must agree with.
pub fn sequential_fold<S, C: Combiner<S> + ?Sized>(leaves: Vec<S>, combiner: &C) -> S {
    let mut acc = combiner.identity();
    for leaf in leaves {
        combiner.combine(&mut acc, leaf);
    }
    acc
}
