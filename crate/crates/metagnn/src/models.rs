//! Differentiable node classifiers: SGC (a linear head over propagated
//! features) and a two-layer GCN, plus Glorot initialization and the episode
//! cross-entropy loss.
//!
//! Episode losses are c-way categorical cross-entropy, i.e. the mean negative
//! log-likelihood under softmax, which the two-class one-hot form reduces to.
//! The mean (not sum) over rows keeps the task learning rate meaningful
//! across shot counts. No bias terms, no dropout.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::Dense;
use crate::error::{Error, Result};
use crate::graph::{propagate_features, SparseMatrix};
use crate::tape::{NodeId, Tape};

/// Classifier architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Sgc,
    Gcn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Sgc => "sgc",
            Arch::Gcn => "gcn",
        }
    }
}

/// Layer sizes: input features, hidden width (GCN only) and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// Model weights θ. SGC holds one `d×c` matrix; GCN holds `d×h` and `h×c`.
/// Entries are flat-indexable across matrices for gradient arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arch: Arch,
    pub dims: Dims,
    pub weights: Vec<Dense>,
}

impl ParamSet {
    /// Glorot-uniform initialization, bound `√(6/(fan_in+fan_out))`,
    /// deterministic per seed.
    pub fn init(arch: Arch, dims: Dims, seed: u64) -> ParamSet {
        assert!(dims.features > 0 && dims.classes > 0, "dims must be positive");
        assert!(arch == Arch::Sgc || dims.hidden > 0, "dims must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: Vec<(usize, usize)> = match arch {
            Arch::Sgc => vec![(dims.features, dims.classes)],
            Arch::Gcn => vec![(dims.features, dims.hidden), (dims.hidden, dims.classes)],
        };
        let weights = shapes
            .into_iter()
            .map(|(rows, cols)| {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
                Dense::from_vec(rows, cols, data)
            })
            .collect();
        ParamSet { arch, dims, weights }
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Dense::numel).sum()
    }

    /// Entry at a flat index spanning all weight matrices in order.
    pub fn flat_get(&self, index: usize) -> f64 {
        let (w, i) = self.locate(index);
        self.weights[w].data()[i]
    }

    pub fn flat_add(&mut self, index: usize, delta: f64) {
        let (w, i) = self.locate(index);
        self.weights[w].data_mut()[i] += delta;
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (w, m) in self.weights.iter().enumerate() {
            if index < m.numel() {
                return (w, index);
            }
            index -= m.numel();
        }
        panic!("flat index out of range");
    }

    /// Register every weight matrix on a tape as parameter nodes.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.weights.iter().map(|w| tape.parameter(w.clone())).collect()
    }

    /// Max relative error of the tape gradient of `build` against central
    /// finite differences, probing every weight entry.
    pub fn finite_difference_check<F>(&self, build: F, eps: f64) -> Result<f64>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        crate::tape::finite_difference_check(build, &self.weights, eps)
    }
}

/// Inputs readied for episode-time forwards.
///
/// SGC consumes the fully propagated features `Â^L X`; the GCN keeps the
/// adjacency for its per-layer aggregation and caches the constant first
/// product `Â·X` so an episode only touches the rows it needs.
#[derive(Debug, Clone)]
pub enum Prepared {
    Sgc { propagated: Dense },
    Gcn { first_hop: Dense, adj: Arc<SparseMatrix> },
}

impl Prepared {
    pub fn new(arch: Arch, adj: &Arc<SparseMatrix>, features: &Dense, hops: usize) -> Result<Prepared> {
        match arch {
            Arch::Sgc => Ok(Prepared::Sgc {
                propagated: propagate_features(adj, features, hops)?,
            }),
            Arch::Gcn => Ok(Prepared::Gcn {
                first_hop: adj.spmm(features)?,
                adj: Arc::clone(adj),
            }),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Prepared::Sgc { .. } => Arch::Sgc,
            Prepared::Gcn { .. } => Arch::Gcn,
        }
    }
}

/// Row-wise log-probabilities for a list of nodes, recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub node: NodeId,
    pub rows: usize,
    pub classes: usize,
}

/// The constant inputs one episode forward needs, gathered once so repeated
/// forwards over the same node list (inner steps, training epochs) skip the
/// row gathering and submatrix construction.
#[derive(Debug, Clone)]
pub enum EpisodeInputs {
    Sgc {
        rows: Dense,
    },
    Gcn {
        /// Restriction of Â to the episode rows over their neighbor columns.
        sub: Arc<SparseMatrix>,
        /// The matching rows of the cached `Â·X`.
        rows: Dense,
    },
}

impl EpisodeInputs {
    pub fn new(prepared: &Prepared, node_ids: &[usize]) -> Result<EpisodeInputs> {
        match prepared {
            Prepared::Sgc { propagated } => Ok(EpisodeInputs::Sgc {
                rows: propagated.gather_rows(node_ids)?,
            }),
            Prepared::Gcn { first_hop, adj } => {
                let (sub, needed) = adj.select_rows(node_ids)?;
                Ok(EpisodeInputs::Gcn {
                    sub: Arc::new(sub),
                    rows: first_hop.gather_rows(&needed)?,
                })
            }
        }
    }
}

/// The episode's constant inputs registered on a tape, reusable across
/// repeated forwards (each inner step adds only the parametric ops).
#[derive(Debug, Clone)]
pub enum EpisodeNodes {
    Sgc { rows: NodeId },
    Gcn { sub: Arc<SparseMatrix>, rows: NodeId },
}

impl EpisodeInputs {
    pub fn record(&self, tape: &mut Tape) -> Result<EpisodeNodes> {
        match self {
            EpisodeInputs::Sgc { rows } => Ok(EpisodeNodes::Sgc {
                rows: tape.constant(rows.clone())?,
            }),
            EpisodeInputs::Gcn { sub, rows } => Ok(EpisodeNodes::Gcn {
                sub: Arc::clone(sub),
                rows: tape.constant(rows.clone())?,
            }),
        }
    }
}

/// Record the classifier forward pass over episode inputs already on the
/// tape.
///
/// SGC: `log_softmax(F[ids] · W)` over the precomputed propagation `F`.
/// GCN: `log_softmax(Â · relu(Â X W₁) · W₂)` restricted to the rows the
/// selected nodes actually aggregate from.
pub fn forward_recorded(
    tape: &mut Tape,
    params: &[NodeId],
    episode: &EpisodeNodes,
) -> Result<Logits> {
    let logits = match episode {
        EpisodeNodes::Sgc { rows } => {
            let z = tape.matmul(*rows, params[0])?;
            tape.log_softmax(z)?
        }
        EpisodeNodes::Gcn { sub, rows } => {
            let pre = tape.matmul(*rows, params[0])?;
            let hidden = tape.relu(pre)?;
            let aggregated = tape.spmm(Arc::clone(sub), hidden)?;
            let z = tape.matmul(aggregated, params[1])?;
            tape.log_softmax(z)?
        }
    };
    let value = tape.value(logits);
    Ok(Logits {
        node: logits,
        rows: value.rows(),
        classes: value.cols(),
    })
}

/// Convenience forward for a node list: gather, register, run.
pub fn forward(
    tape: &mut Tape,
    params: &[NodeId],
    prepared: &Prepared,
    node_ids: &[usize],
) -> Result<Logits> {
    let inputs = EpisodeInputs::new(prepared, node_ids)?;
    let episode = inputs.record(tape)?;
    forward_recorded(tape, params, &episode)
}

/// Mean negative log-likelihood of the labels under the logits; a scalar
/// node on the tape.
pub fn cross_entropy_loss(tape: &mut Tape, logits: &Logits, labels: &[usize]) -> Result<NodeId> {
    if labels.len() != logits.rows {
        return Err(Error::Contract(format!(
            "cross_entropy_loss: {} labels for {} rows",
            labels.len(),
            logits.rows
        )));
    }
    tape.nll_mean(logits.node, Arc::new(labels.to_vec()))
}

/// Row-wise argmax of the logits: the predicted local class per node.
pub fn predict(logits_value: &Dense) -> Vec<usize> {
    (0..logits_value.rows())
        .map(|r| {
            let row = logits_value.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
