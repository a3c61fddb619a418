//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 1-3 and 7 are fast properties. Criteria 4-6 run the full
//! benchmark protocol on the bundled Cora/Citeseer datasets and take several
//! minutes each on one core; criterion 8 reruns the criterion-4 command
//! through the CLI twice and compares bytes.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use metagnn::bench::{run_experiment, ExperimentConfig, Model, ResultsTable};
use metagnn::data::{load_planetoid, row_normalize_features};
use metagnn::dense::Dense;
use metagnn::episodes::{partition_classes, sample_task};
use metagnn::graph::{build_adjacency, normalize_adjacency, GraphDataset};
use metagnn::models::{cross_entropy_loss, forward, Arch, Dims, ParamSet, Prepared};
use metagnn::tape::{NodeId, Tape};

fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

// ---------------------------------------------------------------------------
// criterion 1: second-order meta-gradient exactness on a synthetic model
// ---------------------------------------------------------------------------

/// Quadratic support/query losses over a 1x2 parameter with cross terms:
/// L_s(θ) = ½ θ M θᵀ, L_q(θ) = ½ (θ-t) Q (θ-t)ᵀ.
struct Synthetic {
    m: Dense,
    q: Dense,
    t: Dense,
}

impl Synthetic {
    fn new() -> Synthetic {
        Synthetic {
            m: Dense::from_vec(2, 2, vec![1.3, 0.4, 0.4, 0.7]),
            q: Dense::from_vec(2, 2, vec![0.9, -0.2, -0.2, 1.1]),
            t: Dense::from_vec(1, 2, vec![0.5, -0.3]),
        }
    }

    fn quadratic_form(&self, tape: &mut Tape, x: NodeId, coeff: &Dense) -> NodeId {
        let c = tape.constant(coeff.clone()).unwrap();
        let xc = tape.matmul(x, c).unwrap();
        let xt = tape.transpose(x).unwrap();
        let q = tape.matmul(xc, xt).unwrap();
        tape.scalar_mul(q, 0.5).unwrap()
    }

    /// Meta-gradient of L_q(θ - α₁ ∇L_s(θ)) w.r.t. θ in the requested mode.
    fn meta_gradient(&self, theta: &Dense, alpha1: f64, second_order: bool) -> Dense {
        let mut tape = Tape::new();
        let p = tape.parameter(theta.clone()).unwrap();
        let support = self.quadratic_form(&mut tape, p, &self.m);
        let inner = tape.gradient(support, &[p], second_order).unwrap()[0];
        let step = tape.scalar_mul(inner, alpha1).unwrap();
        let adapted = tape.sub(p, step).unwrap();
        let t = tape.constant(self.t.clone()).unwrap();
        let shifted = tape.sub(adapted, t).unwrap();
        let query = self.quadratic_form(&mut tape, shifted, &self.q);
        let g = tape.gradient(query, &[p], false).unwrap()[0];
        tape.value(g).clone()
    }

    /// g(θ) = L_q(θ - α₁ ∇L_s(θ)) evaluated for finite differences.
    fn composite_value(&self, theta: &Dense, alpha1: f64) -> f64 {
        let mut tape = Tape::new();
        let p = tape.parameter(theta.clone()).unwrap();
        let support = self.quadratic_form(&mut tape, p, &self.m);
        let inner = tape.gradient(support, &[p], false).unwrap()[0];
        let step = tape.scalar_mul(inner, alpha1).unwrap();
        let adapted = tape.sub(p, step).unwrap();
        let t = tape.constant(self.t.clone()).unwrap();
        let shifted = tape.sub(adapted, t).unwrap();
        let query = self.quadratic_form(&mut tape, shifted, &self.q);
        tape.value(query).scalar_value()
    }

    fn fd_gradient(&self, theta: &Dense, alpha1: f64, eps: f64) -> Dense {
        let mut out = Dense::zeros(1, 2);
        for i in 0..2 {
            let mut plus = theta.clone();
            plus.data_mut()[i] += eps;
            let mut minus = theta.clone();
            minus.data_mut()[i] -= eps;
            let num =
                (self.composite_value(&plus, alpha1) - self.composite_value(&minus, alpha1))
                    / (2.0 * eps);
            out.data_mut()[i] = num;
        }
        out
    }
}

fn max_rel_err(a: &Dense, b: &Dense) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_1_meta_gradient_exactness() {
    let start = std::time::Instant::now();
    let synth = Synthetic::new();
    let thetas = [
        Dense::from_vec(1, 2, vec![0.8, -0.6]),
        Dense::from_vec(1, 2, vec![-1.2, 0.9]),
        Dense::from_vec(1, 2, vec![0.1, 2.0]),
    ];
    let mut worst_second = 0.0f64;
    let mut worst_first_gap = f64::INFINITY;
    let mut worst_first_at_zero = 0.0f64;
    for theta in &thetas {
        for &alpha1 in &[0.3, 0.7] {
            let fd = synth.fd_gradient(theta, alpha1, 1e-5);
            let second = synth.meta_gradient(theta, alpha1, true);
            worst_second = worst_second.max(max_rel_err(&second, &fd));
            // first-order must be a genuine approximation away from α₁ = 0
            let first = synth.meta_gradient(theta, alpha1, false);
            let gap = first
                .data()
                .iter()
                .zip(fd.data())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst_first_gap = worst_first_gap.min(gap);
        }
        let fd0 = synth.fd_gradient(theta, 0.0, 1e-5);
        let first0 = synth.meta_gradient(theta, 0.0, false);
        worst_first_at_zero = worst_first_at_zero.max(max_rel_err(&first0, &fd0));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst_second < 1e-4
        && worst_first_gap > 1e-8
        && worst_first_at_zero < 1e-4
        && elapsed < 1.0;
    verdict(
        "1 (meta-gradient exactness)",
        pass,
        &format!(
            "second-order vs FD rel err {worst_second:.2e}; first-order gap at α₁>0 \
             {worst_first_gap:.2e}; first-order at α₁=0 rel err {worst_first_at_zero:.2e}; \
             {elapsed:.2}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: model gradients vs finite differences on toy graphs
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_model_gradient_checks() {
    let start = std::time::Instant::now();
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 4)];
    let adj = std::sync::Arc::new(
        normalize_adjacency(&build_adjacency(&edges, 6).unwrap()).unwrap(),
    );
    let x = Dense::from_vec(
        6,
        5,
        vec![
            0.77, 0.02, 0.40, 0.31, 0.09, 0.12, 0.95, 0.21, 0.64, 0.50, 0.33, 0.18, 0.88, 0.07,
            0.26, 0.59, 0.44, 0.13, 0.72, 0.91, 0.05, 0.67, 0.38, 0.24, 0.86, 0.49, 0.11, 0.93,
            0.56, 0.29,
        ],
    );
    let ids = vec![0usize, 2, 3, 5];
    let labels = vec![0usize, 1, 1, 0];
    let mut worst = 0.0f64;
    for arch in [Arch::Sgc, Arch::Gcn] {
        let prepared = Prepared::new(arch, &adj, &x, 2).unwrap();
        let params = ParamSet::init(arch, Dims { features: 5, hidden: 3, classes: 2 }, 42);
        let err = params
            .finite_difference_check(
                |tape, nodes| {
                    let logits = forward(tape, nodes, &prepared, &ids)?;
                    cross_entropy_loss(tape, &logits, &labels)
                },
                1e-5,
            )
            .unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && elapsed < 1.0;
    verdict(
        "2 (model gradient checks)",
        pass,
        &format!("worst relative error {worst:.2e}; {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: sampler invariants over 10^4 Cora tasks
// ---------------------------------------------------------------------------

fn cora() -> &'static GraphDataset {
    static CORA: OnceLock<GraphDataset> = OnceLock::new();
    CORA.get_or_init(|| {
        let raw = load_planetoid(
            &data_path("cora/cora.content"),
            &data_path("cora/cora.cites"),
        )
        .unwrap();
        GraphDataset {
            features: row_normalize_features(&raw.features),
            ..raw
        }
    })
}

#[test]
fn criterion_3_sampler_suite() {
    use rand::SeedableRng;
    let start = std::time::Instant::now();
    let dataset = cora();
    let split = partition_classes(dataset, 2, 7).unwrap();
    let test_nodes: std::collections::HashSet<usize> = dataset
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| split.test_classes.contains(l))
        .map(|(n, _)| n)
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
    let by_class = dataset.nodes_by_class();
    let k = 3;
    let p = 40;
    for _ in 0..10_000 {
        let task = sample_task(dataset, &split, k, p, &mut rng).unwrap();
        let ways = task.classes.len();
        assert_eq!(ways, 2);
        assert_eq!(task.support.len(), k * ways);
        assert_eq!(task.query.len(), p);
        for local in 0..ways {
            assert_eq!(
                task.support.iter().filter(|&&(_, l)| l == local).count(),
                k,
                "support not stratified"
            );
        }
        for w in task.classes.windows(2) {
            assert!(w[0] < w[1], "local map must follow ascending class id");
        }
        let mut seen = std::collections::HashSet::new();
        for &(node, local) in task.support.iter().chain(task.query.iter()) {
            assert!(seen.insert(node), "support/query overlap or duplicate");
            assert_eq!(dataset.labels[node], task.classes[local], "label remap broken");
            assert!(!test_nodes.contains(&node), "C2 node {node} leaked into meta-training");
            assert!(by_class[dataset.labels[node]].contains(&node));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = elapsed < 10.0;
    verdict(
        "3 (sampler suite)",
        pass,
        &format!("10000 tasks, zero leaks, invariants hold; {elapsed:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// criteria 4-5: Cora quantitative protocol (shared runs)
// ---------------------------------------------------------------------------

struct CoraRuns {
    meta3: ResultsTable,
    sgc3: ResultsTable,
    meta1: ResultsTable,
    sgc1: ResultsTable,
}

fn cora_config(model: Model, k: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        "cora",
        &data_path("cora/cora.content"),
        &data_path("cora/cora.cites"),
        model,
    );
    cfg.k = k;
    cfg.folds = 10;
    cfg.support_selections = 50;
    cfg.seed = 0;
    cfg
}

fn cora_runs() -> &'static CoraRuns {
    static RUNS: OnceLock<CoraRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let run = |model: Model, k: usize| {
            let cfg = cora_config(model, k);
            let table = run_experiment(&cfg, &mut |_, _| {}).unwrap();
            assert!(table.failure.is_none(), "{:?}", table.failure);
            table
        };
        CoraRuns {
            meta3: run(Model::MetaSgc, 3),
            sgc3: run(Model::Sgc, 3),
            meta1: run(Model::MetaSgc, 1),
            sgc1: run(Model::Sgc, 1),
        }
    })
}

#[test]
fn criterion_4_cora_three_shot() {
    let runs = cora_runs();
    let meta = runs.meta3.mean();
    let sgc = runs.sgc3.mean();
    let in_band = (0.72..=0.82).contains(&meta);
    let gap = meta - sgc;
    let pass = in_band && gap >= 0.01;
    verdict(
        "4 (Cora 3-shot)",
        pass,
        &format!(
            "meta-sgc {meta:.4} (band [0.72, 0.82]), sgc {sgc:.4}, gap {gap:+.4} (need >= +0.01)"
        ),
    );
}

#[test]
fn criterion_5_cora_one_shot() {
    let runs = cora_runs();
    let meta1 = runs.meta1.mean();
    let sgc1 = runs.sgc1.mean();
    let gap1 = meta1 - sgc1;
    let gap3 = runs.meta3.mean() - runs.sgc3.mean();
    let in_band = (0.58..=0.72).contains(&meta1);
    let pass = in_band && gap1 >= 0.02 && gap1 >= gap3;
    verdict(
        "5 (Cora 1-shot)",
        pass,
        &format!(
            "meta-sgc {meta1:.4} (band [0.58, 0.72]), sgc {sgc1:.4}, gap {gap1:+.4} \
             (need >= +0.02 and >= 3-shot gap {gap3:+.4})"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 6: Citeseer Meta-GCN
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_citeseer_meta_gcn() {
    let run = |model: Model| {
        let mut cfg = ExperimentConfig::new(
            "citeseer",
            &data_path("citeseer/citeseer.content"),
            &data_path("citeseer/citeseer.cites"),
            model,
        );
        cfg.k = 3;
        cfg.folds = 5;
        cfg.support_selections = 50;
        cfg.seed = 0;
        let table = run_experiment(&cfg, &mut |_, _| {}).unwrap();
        assert!(table.failure.is_none(), "{:?}", table.failure);
        table
    };
    let meta = run(Model::MetaGcn).mean();
    let gcn = run(Model::Gcn).mean();
    let in_band = (0.63..=0.75).contains(&meta);
    let pass = in_band && meta > gcn;
    verdict(
        "6 (Citeseer 3-shot)",
        pass,
        &format!("meta-gcn {meta:.4} (band [0.63, 0.75]), gcn {gcn:.4}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: micro-F1 equals accuracy for single-label predictions
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_micro_f1_identity() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.gen_range(1..60);
        let classes = rng.gen_range(2..8);
        let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
        let f1 = metagnn::bench::micro_f1(&preds, &labels).unwrap();
        assert_eq!(f1, acc, "micro-F1 must equal accuracy exactly");
    }
    verdict(
        "7 (micro-F1 identity; Reddit-scale runs out of scope)",
        true,
        "100 random prediction vectors, exact equality",
    );
}

// ---------------------------------------------------------------------------
// criterion 8: byte-identical CSV across single-threaded reruns
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    let run = |out: &Path| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_metagnn"))
            .args([
                "run",
                "--dataset",
                "cora",
                "--content",
                data_path("cora/cora.content").to_str().unwrap(),
                "--cites",
                data_path("cora/cora.cites").to_str().unwrap(),
                "--model",
                "meta-sgc",
                "--k",
                "3",
                "--folds",
                "10",
                "--selections",
                "50",
                "--alpha1",
                "0.5",
                "--alpha2",
                "0.003",
                "--batch",
                "5",
                "--iters",
                "500",
                "--seed",
                "0",
                "--threads",
                "1",
                "--progress-every",
                "0",
                "--format",
                "csv",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success(), "CLI run failed");
    };
    run(&out_a);
    run(&out_b);
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    let pass = a == b && !a.is_empty();
    verdict(
        "8 (determinism)",
        pass,
        &format!("two single-threaded runs emitted {} identical bytes", a.len()),
    );
}
