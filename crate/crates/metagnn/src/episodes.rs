//! Class partitioning and the episodic task sampler.
//!
//! Classes are split into disjoint meta-training (C₁) and meta-testing (C₂)
//! sets; labels are partitioned, never features or edges. A meta-training
//! task draws |C₂| classes from C₁, a stratified K-shot support set, and a
//! uniform (non-stratified) query set from the remaining nodes of the drawn
//! classes. The meta-test task takes K support nodes per class of C₂ and
//! evaluates on every remaining C₂ node.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::GraphDataset;

/// Disjoint class sets for meta-training (C₁) and meta-testing (C₂).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl ClassSplit {
    /// Episode way-count, fixed for the whole run.
    pub fn ways(&self) -> usize {
        self.test_classes.len()
    }
}

/// One episode: the sampled class set, support and query node lists with
/// local labels, and the class → local-label map.
///
/// Local labels are assigned by ascending global class id: `classes` is
/// sorted and class `classes[i]` maps to local label `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Task {
    pub fn local_label(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn support_nodes(&self) -> Vec<usize> {
        self.support.iter().map(|&(n, _)| n).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, l)| l).collect()
    }

    pub fn query_nodes(&self) -> Vec<usize> {
        self.query.iter().map(|&(n, _)| n).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, l)| l).collect()
    }
}

/// Randomly set apart `c2_size` classes as meta-testing classes; the rest
/// form C₁. Deterministic per `fold_seed`.
pub fn partition_classes(
    dataset: &GraphDataset,
    c2_size: usize,
    fold_seed: u64,
) -> Result<ClassSplit> {
    let n_classes = dataset.n_classes();
    if c2_size >= n_classes {
        return Err(Error::Contract(format!(
            "partition_classes: c2_size {c2_size} must be below the class count {n_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let mut classes: Vec<usize> = (0..n_classes).collect();
    classes.shuffle(&mut rng);
    let mut test_classes: Vec<usize> = classes[..c2_size].to_vec();
    let mut train_classes: Vec<usize> = classes[c2_size..].to_vec();
    test_classes.sort_unstable();
    train_classes.sort_unstable();
    Ok(ClassSplit { train_classes, test_classes })
}

const RESAMPLE_BUDGET: usize = 64;

/// Sample one meta-training task:
/// draw |C₂| classes from C₁, K support nodes per drawn class, then P query
/// nodes uniformly from the drawn classes' remaining nodes.
pub fn sample_task(
    dataset: &GraphDataset,
    split: &ClassSplit,
    k: usize,
    p: usize,
    rng: &mut impl Rng,
) -> Result<Task> {
    let ways = split.ways();
    if split.train_classes.len() < ways {
        return Err(Error::Sampling(format!(
            "need {ways} classes but C1 has {}",
            split.train_classes.len()
        )));
    }
    let by_class = dataset.nodes_by_class();
    for _ in 0..RESAMPLE_BUDGET {
        let mut classes: Vec<usize> = split
            .train_classes
            .choose_multiple(rng, ways)
            .copied()
            .collect();
        classes.sort_unstable();
        if classes.iter().any(|&c| by_class[c].len() < k) {
            continue;
        }
        let pool_size: usize = classes.iter().map(|&c| by_class[c].len()).sum();
        if pool_size < k * ways + p {
            continue;
        }
        return Ok(assemble_task(classes, &by_class, k, Some(p), rng));
    }
    Err(Error::Sampling(format!(
        "no class combination with at least {k} support nodes per class and {p} \
         query nodes after {RESAMPLE_BUDGET} attempts"
    )))
}

/// Build the meta-test task: K support nodes per class of C₂ chosen by
/// `selection_seed`, query = every remaining node of those classes.
pub fn build_meta_test_task(
    dataset: &GraphDataset,
    split: &ClassSplit,
    k: usize,
    selection_seed: u64,
) -> Result<Task> {
    let by_class = dataset.nodes_by_class();
    for &c in &split.test_classes {
        if by_class[c].len() < k {
            return Err(Error::Sampling(format!(
                "test class {c} has {} nodes, fewer than K={k}",
                by_class[c].len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(selection_seed);
    let classes = split.test_classes.clone();
    Ok(assemble_task(classes, &by_class, k, None, &mut rng))
}

/// Draw K support nodes per class; the query is either `p` uniform draws
/// from the leftover pool or, when `p` is None, the entire leftover pool.
fn assemble_task(
    classes: Vec<usize>,
    by_class: &[Vec<usize>],
    k: usize,
    p: Option<usize>,
    rng: &mut impl Rng,
) -> Task {
    let mut support = Vec::with_capacity(k * classes.len());
    let mut pool = Vec::new();
    for (local, &class) in classes.iter().enumerate() {
        let nodes = &by_class[class];
        let chosen: Vec<usize> = nodes.choose_multiple(rng, k).copied().collect();
        for &node in &chosen {
            support.push((node, local));
        }
        for &node in nodes {
            if !chosen.contains(&node) {
                pool.push((node, local));
            }
        }
    }
    let query = match p {
        Some(p) => {
            debug_assert!(pool.len() >= p);
            pool.choose_multiple(rng, p).copied().collect()
        }
        None => pool,
    };
    Task { classes, support, query }
}
