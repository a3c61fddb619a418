//! The meta-learning engine: inner adaptation on a task's support set, the
//! meta-objective over query sets, the meta-update of the shared
//! initialization, the training loop and meta-testing.
//!
//! The meta-gradient is taken with respect to the original θ. In second-order
//! mode the inner gradient step is recorded on the tape (`create_graph`), so
//! the meta-gradient carries the `(I - α₁·H)` factors exactly; first-order
//! mode detaches the inner gradients, which drops those terms.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dense::Dense;
use crate::episodes::{sample_task, ClassSplit, Task};
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::models::{
    cross_entropy_loss, forward, forward_recorded, predict, Arch, Dims, EpisodeInputs, ParamSet,
    Prepared,
};
use crate::tape::{NodeId, Tape};

/// Differentiation mode for the meta-update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    /// Detach inner gradients: the cheap approximation.
    First,
    /// Differentiate through the inner update, Hessian terms included.
    Second,
}

/// How per-task query losses combine into the meta-objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossAgg {
    /// Mean over the batch: step magnitude independent of batch size.
    Mean,
    /// Literal sum over the batch.
    Sum,
}

/// Row reduction of an episode loss inside the meta-engine.
///
/// `Sum` is the literal summed cross-entropy over a set's rows; `Mean`
/// divides by the row count, making the learning rates row-count-invariant
/// but scaling gradients down by |support| and |query| respectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Hyperparameters for meta-training.
#[derive(Debug, Clone)]
pub struct MetaConfig {
    /// Task learning rate α₁ for inner adaptation.
    pub alpha1: f64,
    /// Meta learning rate α₂ for the outer update.
    pub alpha2: f64,
    pub inner_steps: usize,
    /// Tasks per meta-update.
    pub batch_size: usize,
    pub meta_iterations: usize,
    pub order: Order,
    /// Support shots per class.
    pub k: usize,
    /// Query nodes per meta-training task.
    pub p: usize,
    pub arch: Arch,
    /// GCN hidden width; ignored by SGC.
    pub hidden: usize,
    /// Propagation depth (SGC precompute exponent, GCN layer count).
    pub hops: usize,
    pub agg: LossAgg,
    /// Row reduction of the support and query losses.
    pub reduction: Reduction,
    pub seed: u64,
}

impl MetaConfig {
    /// Per-architecture defaults for a given way-count.
    ///
    /// The episode losses default to the summed form: with row-mean losses
    /// the meta-gradients shrink by the query size and plain SGD at these
    /// rates stalls. 20 inner steps give the adaptation enough travel to fit
    /// a K-shot support from a near-random initialization.
    pub fn defaults(arch: Arch, ways: usize) -> MetaConfig {
        let (alpha1, alpha2) = match arch {
            Arch::Sgc => (0.5, 0.003),
            Arch::Gcn => (0.1, 0.001),
        };
        MetaConfig {
            alpha1,
            alpha2,
            inner_steps: 20,
            batch_size: 5,
            meta_iterations: 500,
            order: Order::Second,
            k: 3,
            p: 20 * ways,
            arch,
            hidden: 16,
            hops: 2,
            agg: LossAgg::Mean,
            reduction: Reduction::Sum,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha1 < 0.0 || self.alpha2 <= 0.0 {
            return Err(Error::Contract(
                "meta config: learning rates must be positive".into(),
            ));
        }
        if self.inner_steps < 1 {
            return Err(Error::Contract("meta config: inner_steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Contract("meta config: batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Task-adapted parameters θ′ with provenance back to the base θ.
pub struct AdaptedParams {
    /// Value snapshot of θ′.
    pub params: ParamSet,
    /// θ′ as live tape nodes (differentiable w.r.t. θ when created with
    /// `create_graph`).
    pub nodes: Vec<NodeId>,
    /// Tape ids of the base θ this adaptation started from.
    pub base_nodes: Vec<NodeId>,
    pub task_id: usize,
    pub steps_taken: usize,
}

/// Run `steps` full-batch gradient-descent updates of `nodes` against a
/// rebuilt loss, entirely on the tape. The generic core of [`inner_adapt`].
pub fn gradient_descent_steps<F>(
    tape: &mut Tape,
    nodes: &[NodeId],
    mut build_loss: F,
    alpha: f64,
    steps: usize,
    create_graph: bool,
) -> Result<Vec<NodeId>>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut current = nodes.to_vec();
    for step in 0..steps {
        let result = (|| -> Result<Vec<NodeId>> {
            let loss = build_loss(tape, &current)?;
            let grads = tape.gradient(loss, &current, create_graph)?;
            current
                .iter()
                .zip(grads)
                .map(|(&param, grad)| {
                    let scaled = tape.scalar_mul(grad, alpha)?;
                    tape.sub(param, scaled)
                })
                .collect()
        })();
        current = result.map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("inner step {step}: {op}")),
            other => other,
        })?;
    }
    Ok(current)
}

/// The support/query loss under the configured row reduction: the row-mean
/// cross-entropy, rescaled by the row count for the summed form.
pub fn episode_loss(
    tape: &mut Tape,
    logits: &crate::models::Logits,
    labels: &[usize],
    reduction: Reduction,
) -> Result<NodeId> {
    let mean = cross_entropy_loss(tape, logits, labels)?;
    match reduction {
        Reduction::Mean => Ok(mean),
        Reduction::Sum => tape.scalar_mul(mean, labels.len() as f64),
    }
}

/// Adapt θ to one task by gradient descent on the support loss (Eq. 3 form).
/// With `create_graph` the returned θ′ stays differentiable w.r.t. θ.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    tape: &mut Tape,
    base_nodes: &[NodeId],
    base: &ParamSet,
    prepared: &Prepared,
    task: &Task,
    alpha1: f64,
    steps: usize,
    reduction: Reduction,
    create_graph: bool,
    task_id: usize,
) -> Result<AdaptedParams> {
    let support_labels = task.support_labels();
    let support = EpisodeInputs::new(prepared, &task.support_nodes())?.record(tape)?;
    let adapted = gradient_descent_steps(
        tape,
        base_nodes,
        |tape, current| {
            let logits = forward_recorded(tape, current, &support)?;
            episode_loss(tape, &logits, &support_labels, reduction)
        },
        alpha1,
        steps,
        create_graph,
    )?;
    let weights: Vec<Dense> = adapted.iter().map(|&id| tape.value(id).clone()).collect();
    Ok(AdaptedParams {
        params: ParamSet {
            arch: base.arch,
            dims: base.dims,
            weights,
        },
        nodes: adapted,
        base_nodes: base_nodes.to_vec(),
        task_id,
        steps_taken: steps,
    })
}

/// One meta-update over a batch of tasks.
///
/// Each task runs on its own tape: adapt on the support, evaluate the query
/// loss at θ′, and take the gradient w.r.t. the original θ. Per-task
/// meta-gradients are combined in task order (so results do not depend on
/// thread scheduling) and applied as one plain SGD step on θ.
/// Returns the new θ and the mean query loss of the batch.
pub fn meta_step(
    theta: &ParamSet,
    prepared: &Prepared,
    tasks: &[Task],
    cfg: &MetaConfig,
) -> Result<(ParamSet, f64)> {
    if tasks.is_empty() {
        return Err(Error::Contract("meta_step: batch must be nonempty".into()));
    }
    let create_graph = cfg.order == Order::Second;
    let per_task: Vec<(f64, Vec<Dense>)> = tasks
        .par_iter()
        .enumerate()
        .map(|(task_id, task)| -> Result<(f64, Vec<Dense>)> {
            let mut tape = Tape::new();
            let base = theta.register(&mut tape)?;
            let adapted = inner_adapt(
                &mut tape,
                &base,
                theta,
                prepared,
                task,
                cfg.alpha1,
                cfg.inner_steps,
                cfg.reduction,
                create_graph,
                task_id,
            )?;
            let query_nodes = task.query_nodes();
            let query_labels = task.query_labels();
            let logits = forward(&mut tape, &adapted.nodes, prepared, &query_nodes)?;
            let mean_loss = cross_entropy_loss(&mut tape, &logits, &query_labels)?;
            let loss = match cfg.reduction {
                Reduction::Mean => mean_loss,
                Reduction::Sum => tape.scalar_mul(mean_loss, query_labels.len() as f64)?,
            };
            let grads = tape.gradient(loss, &base, false)?;
            let grad_values = grads.iter().map(|&g| tape.value(g).clone()).collect();
            // telemetry reports the row-mean regardless of the reduction
            Ok((tape.value(mean_loss).scalar_value(), grad_values))
        })
        .collect::<Result<_>>()?;

    let scale = match cfg.agg {
        LossAgg::Mean => 1.0 / tasks.len() as f64,
        LossAgg::Sum => 1.0,
    };
    let mut new_weights = theta.weights.clone();
    for (_, grads) in &per_task {
        for (w, g) in new_weights.iter_mut().zip(grads) {
            let step = cfg.alpha2 * scale;
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv -= step * gv;
            }
        }
    }
    for w in &new_weights {
        if !w.all_finite() {
            return Err(Error::NonFinite("meta_step: updated parameters".into()));
        }
    }
    let mean_loss = per_task.iter().map(|(l, _)| l).sum::<f64>() / tasks.len() as f64;
    Ok((
        ParamSet {
            arch: theta.arch,
            dims: theta.dims,
            weights: new_weights,
        },
        mean_loss,
    ))
}

/// Per-iteration training telemetry.
#[derive(Debug, Clone, Copy)]
pub struct ProgressRecord {
    pub iteration: usize,
    pub mean_query_loss: f64,
    pub elapsed_secs: f64,
}

/// Full meta-training loop: sample a fresh task batch per iteration, take a
/// meta-step, emit telemetry. Returns the final θ.
pub fn meta_train(
    dataset: &GraphDataset,
    split: &ClassSplit,
    prepared: &Prepared,
    cfg: &MetaConfig,
    sink: &mut dyn FnMut(ProgressRecord),
) -> Result<ParamSet> {
    cfg.validate()?;
    let dims = Dims {
        features: dataset.features.cols(),
        hidden: cfg.hidden,
        classes: split.ways(),
    };
    let mut theta = ParamSet::init(cfg.arch, dims, derive_seed(cfg.seed, b"init"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b"tasks"));
    let start = Instant::now();
    for iteration in 0..cfg.meta_iterations {
        let tasks: Vec<Task> = (0..cfg.batch_size)
            .map(|_| sample_task(dataset, split, cfg.k, cfg.p, &mut rng))
            .collect::<Result<_>>()?;
        let (next, mean_loss) = meta_step(&theta, prepared, &tasks, cfg).map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("iteration {iteration}: {op}")),
            other => other,
        })?;
        theta = next;
        sink(ProgressRecord {
            iteration,
            mean_query_loss: mean_loss,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok(theta)
}

/// Fine-tune θ on the meta-test support, then predict the query labels by
/// row-argmax. Returns the predicted local labels and the accuracy.
pub fn meta_test(
    theta: &ParamSet,
    prepared: &Prepared,
    task: &Task,
    alpha1: f64,
    steps: usize,
    reduction: Reduction,
) -> Result<(Vec<usize>, f64)> {
    let mut tape = Tape::new();
    let base = theta.register(&mut tape)?;
    let adapted = inner_adapt(
        &mut tape, &base, theta, prepared, task, alpha1, steps, reduction, false, 0,
    )?;
    let query_nodes = task.query_nodes();
    let logits = forward(&mut tape, &adapted.nodes, prepared, &query_nodes)?;
    let predictions = predict(tape.value(logits.node));
    let labels = task.query_labels();
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    let accuracy = correct as f64 / labels.len().max(1) as f64;
    Ok((predictions, accuracy))
}

/// Stable seed derivation: root seed mixed with a label through splitmix64.
pub fn derive_seed(root: u64, label: &[u8]) -> u64 {
    let mut state = root;
    for &byte in label {
        state = splitmix64(state ^ u64::from(byte));
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
