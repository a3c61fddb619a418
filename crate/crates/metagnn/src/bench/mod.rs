//! Benchmark driver: k-fold class splits, repeated support selections,
//! meta models against plain-training baselines, metric aggregation and
//! CSV/markdown emission.
//!
//! For each fold the classes are re-partitioned and the meta model is trained
//! once on C₁ tasks; the selections then vary only the meta-test support.
//! Baselines have no pre-training signal usable for the held-out classes, so
//! they train from scratch on the meta-test support of each selection — the
//! only labeled C₂ data. Every model compared under a given (fold, selection)
//! sees the identical meta-test task: selection seeds never depend on the
//! model.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::{load_planetoid, row_normalize_features};
use crate::episodes::{build_meta_test_task, partition_classes, Task};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, normalize_adjacency, GraphDataset};
use crate::meta::{
    derive_seed, meta_test, meta_train, LossAgg, MetaConfig, Order, ProgressRecord, Reduction,
};
use crate::models::{
    cross_entropy_loss, forward, forward_recorded, predict, Arch, Dims, EpisodeInputs, ParamSet,
    Prepared,
};
use crate::tape::Tape;

/// Model under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    MetaSgc,
    MetaGcn,
    Sgc,
    Gcn,
}

impl Model {
    pub fn arch(self) -> Arch {
        match self {
            Model::MetaSgc | Model::Sgc => Arch::Sgc,
            Model::MetaGcn | Model::Gcn => Arch::Gcn,
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Model::MetaSgc | Model::MetaGcn)
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::MetaSgc => "meta-sgc",
            Model::MetaGcn => "meta-gcn",
            Model::Sgc => "sgc",
            Model::Gcn => "gcn",
        }
    }

    pub fn parse(s: &str) -> Result<Model> {
        match s {
            "meta-sgc" => Ok(Model::MetaSgc),
            "meta-gcn" => Ok(Model::MetaGcn),
            "sgc" => Ok(Model::Sgc),
            "gcn" => Ok(Model::Gcn),
            other => Err(Error::Contract(format!(
                "unknown model {other:?}; expected meta-sgc, meta-gcn, sgc or gcn"
            ))),
        }
    }
}

/// Output table format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Markdown,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<OutputFormat> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "markdown" => Ok(OutputFormat::Markdown),
            other => Err(Error::Contract(format!(
                "unknown format {other:?}; expected csv or markdown"
            ))),
        }
    }
}

/// Optional overrides layered on the per-architecture meta defaults.
#[derive(Debug, Clone, Default)]
pub struct MetaOverrides {
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub inner_steps: Option<usize>,
    pub batch: Option<usize>,
    pub iters: Option<usize>,
    pub order: Option<Order>,
    pub p: Option<usize>,
    pub agg: Option<LossAgg>,
    pub reduction: Option<Reduction>,
    pub hidden: Option<usize>,
    pub hops: Option<usize>,
}

impl MetaOverrides {
    pub fn apply(&self, mut base: MetaConfig) -> MetaConfig {
        if let Some(v) = self.alpha1 {
            base.alpha1 = v;
        }
        if let Some(v) = self.alpha2 {
            base.alpha2 = v;
        }
        if let Some(v) = self.inner_steps {
            base.inner_steps = v;
        }
        if let Some(v) = self.batch {
            base.batch_size = v;
        }
        if let Some(v) = self.iters {
            base.meta_iterations = v;
        }
        if let Some(v) = self.order {
            base.order = v;
        }
        if let Some(v) = self.p {
            base.p = v;
        }
        if let Some(v) = self.agg {
            base.agg = v;
        }
        if let Some(v) = self.reduction {
            base.reduction = v;
        }
        if let Some(v) = self.hidden {
            base.hidden = v;
        }
        if let Some(v) = self.hops {
            base.hops = v;
        }
        base
    }
}

/// One full experiment: dataset, model, protocol sizes and hyperparameters.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub content: PathBuf,
    pub cites: PathBuf,
    pub model: Model,
    pub k: usize,
    pub folds: usize,
    pub support_selections: usize,
    /// |C₂|: classes held out for meta-testing.
    pub c2_size: usize,
    pub meta: MetaOverrides,
    pub baseline_epochs: usize,
    /// Baseline learning rate; None picks the per-architecture default
    /// (0.2 for SGC, 0.01 for GCN).
    pub baseline_lr: Option<f64>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(dataset: &str, content: &Path, cites: &Path, model: Model) -> ExperimentConfig {
        ExperimentConfig {
            dataset: dataset.to_string(),
            content: content.to_path_buf(),
            cites: cites.to_path_buf(),
            model,
            k: 3,
            folds: 10,
            support_selections: 50,
            c2_size: 2,
            meta: MetaOverrides::default(),
            baseline_epochs: 200,
            baseline_lr: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 1 || self.support_selections < 1 {
            return Err(Error::Contract(
                "experiment: folds and selections must be >= 1".into(),
            ));
        }
        if self.k < 1 {
            return Err(Error::Contract("experiment: k must be >= 1".into()));
        }
        Ok(())
    }

    /// Meta hyperparameters for this experiment with the overrides applied.
    pub fn meta_config(&self) -> MetaConfig {
        let mut cfg = self.meta.apply(MetaConfig::defaults(self.model.arch(), self.c2_size));
        cfg.k = self.k;
        cfg
    }

    fn baseline_lr(&self) -> f64 {
        self.baseline_lr.unwrap_or(match self.model.arch() {
            Arch::Sgc => 0.2,
            Arch::Gcn => 0.01,
        })
    }
}

/// One accuracy measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub fold: usize,
    pub selection: usize,
    pub model: String,
    pub k: usize,
    pub accuracy: f64,
}

/// Per-(fold, selection) accuracies with aggregate statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub cells: Vec<Cell>,
    /// Set when the run aborted; partial cells are still emitted.
    pub failure: Option<String>,
}

impl ResultsTable {
    pub fn count(&self) -> usize {
        self.cells.len()
    }

    pub fn mean(&self) -> f64 {
        if self.cells.is_empty() {
            return f64::NAN;
        }
        self.cells.iter().map(|c| c.accuracy).sum::<f64>() / self.cells.len() as f64
    }

    /// Sample standard deviation (n − 1 denominator); 0 for a single cell.
    pub fn std(&self) -> f64 {
        let n = self.cells.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let ss: f64 = self.cells.iter().map(|c| (c.accuracy - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

/// Seed lineage: every random draw derives from the root seed plus
/// (purpose, fold, selection) labels, so reruns reproduce the table and
/// compared models share meta-test tasks.
pub fn lineage_seed(root: u64, purpose: &str, fold: usize, selection: usize) -> u64 {
    derive_seed(root, format!("{purpose}/{fold}/{selection}").as_bytes())
}

/// Load the dataset, row-normalize features and build the propagation
/// operator.
pub fn load_and_prepare(cfg: &ExperimentConfig) -> Result<(GraphDataset, Prepared)> {
    let raw = load_planetoid(&cfg.content, &cfg.cites)?;
    let features = row_normalize_features(&raw.features);
    let adj = Arc::new(normalize_adjacency(&build_adjacency(&raw.edges, raw.n)?)?);
    let dataset = GraphDataset { features, ..raw };
    let meta_cfg = cfg.meta_config();
    let prepared = Prepared::new(cfg.model.arch(), &adj, &dataset.features, meta_cfg.hops)?;
    Ok((dataset, prepared))
}

/// Train a plain (non-meta) classifier from Glorot init by full-batch
/// gradient descent on the meta-test support, the only labeled data for the
/// held-out classes.
pub fn baseline_train(
    arch: Arch,
    prepared: &Prepared,
    task: &Task,
    epochs: usize,
    lr: f64,
    hidden: usize,
    seed: u64,
) -> Result<ParamSet> {
    let features = match prepared {
        Prepared::Sgc { propagated } => propagated.cols(),
        Prepared::Gcn { first_hop, .. } => first_hop.cols(),
    };
    let dims = Dims {
        features,
        hidden,
        classes: task.classes.len(),
    };
    let mut params = ParamSet::init(arch, dims, seed);
    let support = EpisodeInputs::new(prepared, &task.support_nodes())?;
    let support_labels = task.support_labels();
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape)?;
        let episode = support.record(&mut tape)?;
        let logits = forward_recorded(&mut tape, &nodes, &episode)?;
        let loss = cross_entropy_loss(&mut tape, &logits, &support_labels)?;
        let grads = tape.gradient(loss, &nodes, false)?;
        for (w, &g) in params.weights.iter_mut().zip(&grads) {
            let gv = tape.value(g);
            for (wv, &d) in w.data_mut().iter_mut().zip(gv.data()) {
                *wv -= lr * d;
            }
        }
    }
    Ok(params)
}

/// Accuracy of θ on the task's query set, no adaptation.
pub fn evaluate_on_query(theta: &ParamSet, prepared: &Prepared, task: &Task) -> Result<(Vec<usize>, f64)> {
    let mut tape = Tape::new();
    let nodes = theta.register(&mut tape)?;
    let logits = forward(&mut tape, &nodes, prepared, &task.query_nodes())?;
    let predictions = predict(tape.value(logits.node));
    let labels = task.query_labels();
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / labels.len().max(1) as f64;
    Ok((predictions, accuracy))
}

/// Micro-averaged F1 over classes: precision and recall from globally pooled
/// true/false positives and negatives.
pub fn micro_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "micro_f1: need equal nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n_classes = predictions.iter().chain(labels).max().unwrap() + 1;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let tp_total: usize = tp.iter().sum();
    let fp_total: usize = fp.iter().sum();
    let fn_total: usize = fn_.iter().sum();
    // pooled-count form of 2PR/(P+R); exact when FP = FN
    let denominator = 2 * tp_total + fp_total + fn_total;
    if denominator == 0 {
        return Ok(0.0);
    }
    Ok((2 * tp_total) as f64 / denominator as f64)
}

/// Run the full protocol for one model. Evaluation errors mid-run stop the
/// sweep and mark the partial table instead of discarding it.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    sink: &mut dyn FnMut(usize, ProgressRecord),
) -> Result<ResultsTable> {
    cfg.validate()?;
    let (dataset, prepared) = load_and_prepare(cfg)?;
    let mut table = ResultsTable::default();
    for fold in 0..cfg.folds {
        match run_fold(cfg, &dataset, &prepared, fold, sink) {
            Ok(cells) => table.cells.extend(cells),
            Err(e) => {
                table.failure = Some(format!("fold {fold}: {e}"));
                log::error!("aborting sweep at fold {fold}: {e}");
                return Ok(table);
            }
        }
    }
    Ok(table)
}

fn run_fold(
    cfg: &ExperimentConfig,
    dataset: &GraphDataset,
    prepared: &Prepared,
    fold: usize,
    sink: &mut dyn FnMut(usize, ProgressRecord),
) -> Result<Vec<Cell>> {
    let split = partition_classes(dataset, cfg.c2_size, lineage_seed(cfg.seed, "partition", fold, 0))?;
    let mut meta_cfg = cfg.meta_config();
    meta_cfg.seed = lineage_seed(cfg.seed, "metatrain", fold, 0);

    let theta = if cfg.model.is_meta() {
        Some(meta_train(dataset, &split, prepared, &meta_cfg, &mut |r| {
            sink(fold, r)
        })?)
    } else {
        None
    };

    (0..cfg.support_selections)
        .into_par_iter()
        .map(|selection| -> Result<Cell> {
            let task = build_meta_test_task(
                dataset,
                &split,
                cfg.k,
                lineage_seed(cfg.seed, "selection", fold, selection),
            )?;
            let accuracy = match &theta {
                Some(theta) => {
                    meta_test(theta, prepared, &task, meta_cfg.alpha1, meta_cfg.inner_steps, meta_cfg.reduction)?.1
                }
                None => {
                    let params = baseline_train(
                        cfg.model.arch(),
                        prepared,
                        &task,
                        cfg.baseline_epochs,
                        cfg.baseline_lr(),
                        meta_cfg.hidden,
                        lineage_seed(cfg.seed, "baseline-init", fold, selection),
                    )?;
                    evaluate_on_query(&params, prepared, &task)?.1
                }
            };
            Ok(Cell {
                fold,
                selection,
                model: cfg.model.name().to_string(),
                k: cfg.k,
                accuracy,
            })
        })
        .collect()
}

/// Serialize the table: data rows under a `fold,selection,model,K,accuracy`
/// header plus an aggregate footer (and a failure marker when the run was
/// cut short). Accuracies print in shortest round-trip form, so parsing the
/// emitted text recovers the exact f64 values.
pub fn render_csv(table: &ResultsTable) -> String {
    let mut out = String::from("fold,selection,model,K,accuracy\n");
    for c in &table.cells {
        writeln!(out, "{},{},{},{},{}", c.fold, c.selection, c.model, c.k, c.accuracy).unwrap();
    }
    writeln!(
        out,
        "#aggregate,mean,{},std,{},count,{}",
        table.mean(),
        table.std(),
        table.count()
    )
    .unwrap();
    if let Some(msg) = &table.failure {
        writeln!(out, "#failure,{}", msg.replace('\n', " ")).unwrap();
    }
    out
}

/// Markdown table with one row per (model, K): mean ± std over all cells.
pub fn render_markdown(table: &ResultsTable) -> String {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for c in &table.cells {
        let key = (c.model.clone(), c.k);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut out = String::new();
    out.push_str("| Model | K | Accuracy (mean ± std) | Runs |\n");
    out.push_str("|-------|---|------------------------|------|\n");
    for (model, k) in groups {
        let sub = ResultsTable {
            cells: table
                .cells
                .iter()
                .filter(|c| c.model == model && c.k == k)
                .cloned()
                .collect(),
            failure: None,
        };
        writeln!(
            out,
            "| {model} | {k} | {:.2}% ± {:.2}% | {} |",
            sub.mean() * 100.0,
            sub.std() * 100.0,
            sub.count()
        )
        .unwrap();
    }
    if let Some(msg) = &table.failure {
        writeln!(out, "\n**Run failed**: {msg}").unwrap();
    }
    out
}

/// Write the table to `path` in the requested format.
pub fn emit_results(table: &ResultsTable, path: &Path, format: OutputFormat) -> Result<()> {
    let text = match format {
        OutputFormat::Csv => render_csv(table),
        OutputFormat::Markdown => render_markdown(table),
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse the CSV emitted by [`render_csv`] back into a table plus the footer
/// aggregates (mean, std, count).
pub fn parse_results_csv(text: &str) -> Result<(ResultsTable, (f64, f64, usize))> {
    let mut table = ResultsTable::default();
    let mut aggregates = None;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != "fold,selection,model,K,accuracy" {
                return Err(Error::Contract(format!("unexpected CSV header {line:?}")));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("#aggregate,") {
            let fields: Vec<&str> = rest.split(',').collect();
            if fields.len() != 6 || fields[0] != "mean" || fields[2] != "std" || fields[4] != "count" {
                return Err(Error::Contract(format!("malformed aggregate footer {line:?}")));
            }
            aggregates = Some((
                parse_num(fields[1])?,
                parse_num(fields[3])?,
                fields[5]
                    .parse::<usize>()
                    .map_err(|_| Error::Contract(format!("bad count {:?}", fields[5])))?,
            ));
            continue;
        }
        if let Some(rest) = line.strip_prefix("#failure,") {
            table.failure = Some(rest.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Contract(format!("malformed CSV row {line:?}")));
        }
        table.cells.push(Cell {
            fold: fields[0].parse().map_err(|_| Error::Contract(format!("bad fold {:?}", fields[0])))?,
            selection: fields[1]
                .parse()
                .map_err(|_| Error::Contract(format!("bad selection {:?}", fields[1])))?,
            model: fields[2].to_string(),
            k: fields[3].parse().map_err(|_| Error::Contract(format!("bad K {:?}", fields[3])))?,
            accuracy: parse_num(fields[4])?,
        });
    }
    let aggregates = aggregates.ok_or_else(|| Error::Contract("missing aggregate footer".into()))?;
    Ok((table, aggregates))
}

fn parse_num(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Contract(format!("bad number {s:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_table() -> ResultsTable {
        ResultsTable {
            cells: vec![
                Cell { fold: 0, selection: 0, model: "meta-sgc".into(), k: 3, accuracy: 0.725 },
                Cell { fold: 0, selection: 1, model: "meta-sgc".into(), k: 3, accuracy: 1.0 / 3.0 },
                Cell { fold: 1, selection: 0, model: "meta-sgc".into(), k: 3, accuracy: 0.9847560975609756 },
            ],
            failure: None,
        }
    }

    #[test]
    fn micro_f1_equals_accuracy_for_single_label_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let n = rng.gen_range(1..40);
            let classes = rng.gen_range(2..6);
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
            let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
            let f1 = micro_f1(&preds, &labels).unwrap();
            assert_eq!(f1, acc, "micro-F1 must equal accuracy exactly");
        }
    }

    #[test]
    fn micro_f1_all_correct_is_one() {
        assert_eq!(micro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn micro_f1_hand_counted() {
        assert_eq!(micro_f1(&[0, 0, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn micro_f1_rejects_empty() {
        assert!(micro_f1(&[], &[]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let table = sample_table();
        let text = render_csv(&table);
        let (parsed, (mean, std, count)) = parse_results_csv(&text).unwrap();
        assert_eq!(parsed.cells, table.cells);
        assert_eq!(mean, table.mean());
        assert_eq!(std, table.std());
        assert_eq!(count, table.count());
    }

    #[test]
    fn csv_single_row_has_footer() {
        let table = ResultsTable {
            cells: vec![Cell { fold: 0, selection: 0, model: "sgc".into(), k: 1, accuracy: 0.5 }],
            failure: None,
        };
        let text = render_csv(&table);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3); // header, row, footer
        assert!(lines[2].starts_with("#aggregate,"));
    }

    #[test]
    fn aggregates_match_recomputation() {
        let table = sample_table();
        let accs: Vec<f64> = table.cells.iter().map(|c| c.accuracy).collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt();
        assert!((table.mean() - mean).abs() < 1e-12);
        assert!((table.std() - std).abs() < 1e-12);
    }

    #[test]
    fn markdown_has_one_row_per_model() {
        let mut table = sample_table();
        table.cells.push(Cell { fold: 0, selection: 0, model: "sgc".into(), k: 3, accuracy: 0.7 });
        let md = render_markdown(&table);
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| meta-sgc") || l.starts_with("| sgc")).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].contains('±'));
    }

    #[test]
    fn failure_marker_round_trips() {
        let mut table = sample_table();
        table.failure = Some("fold 2: numeric error".into());
        let text = render_csv(&table);
        let (parsed, _) = parse_results_csv(&text).unwrap();
        assert_eq!(parsed.failure.as_deref(), Some("fold 2: numeric error"));
    }

    #[test]
    fn lineage_seeds_differ_by_purpose_and_indices() {
        let a = lineage_seed(0, "selection", 0, 0);
        let b = lineage_seed(0, "selection", 0, 1);
        let c = lineage_seed(0, "selection", 1, 0);
        let d = lineage_seed(0, "baseline-init", 0, 0);
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, lineage_seed(0, "selection", 0, 0));
    }

    #[test]
    fn model_parse_round_trip() {
        for m in [Model::MetaSgc, Model::MetaGcn, Model::Sgc, Model::Gcn] {
            assert_eq!(Model::parse(m.name()).unwrap(), m);
        }
        assert!(Model::parse("deepwalk").is_err());
    }
}
