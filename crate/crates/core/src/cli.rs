//! Command-line surface. [`run`] parses arguments, dispatches, and maps
//! errors to exit codes: 0 success, 1 I/O, 2 validation or usage,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::drift::{DriftConfig, DriftReference};
use crate::error::{Error, Result};
use crate::graph::{split_edges, Graph};
use crate::io;
use crate::model::{GeoModel, GraphContext};
use crate::smoothing::{smooth, AggregatorKind};
use crate::synth::{generate, SynthSpec};
use crate::train::{
    evaluate_accuracy, evaluate_hit_at_k, gradient_check_geognn, grid_search, grid_to_csv, train_seeds, GridAxes,
    NodeSplits, Task, TaskData,
};

#[derive(Parser, Debug)]
#[command(
    name = "geognn",
    version,
    about = "Geodesic graph learning and semantic drift toolkit"
)]
pub struct Cli {
    /// Worker threads for parallel sections (1 = single-threaded).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic spherical mixture with block-model edges.
    Synth(SynthArgs),
    /// Parameter-free layered smoothing; writes one embedding file per layer.
    Smooth(SmoothArgs),
    /// Semantic drift of aggregated features against the reference features.
    Drift(DriftArgs),
    /// Train GeoGNN for node classification or link prediction.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Sweep tau, alpha, layers and heads.
    Gridsearch(GridArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    pub nodes: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 100.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0.05)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    pub p_out: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AggregatorArgs {
    /// Comma-separated subset of mean, laplacian, attention, geodesic.
    #[arg(long, value_delimiter = ',')]
    pub aggregator: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = AggregatorKind::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = AggregatorKind::DEFAULT_ALPHA)]
    pub alpha: f64,
}

impl AggregatorArgs {
    fn kinds(&self) -> Result<Vec<AggregatorKind>> {
        if self.aggregator.is_empty() {
            return Err(Error::Validation("--aggregator is required".into()));
        }
        self.aggregator
            .iter()
            .map(|name| {
                let kind = match name.parse::<AggregatorKind>()? {
                    AggregatorKind::Attention { .. } => AggregatorKind::Attention { tau: self.tau },
                    AggregatorKind::Geodesic { .. } => AggregatorKind::Geodesic {
                        tau: self.tau,
                        alpha: self.alpha,
                    },
                    other => other,
                };
                kind.validate()?;
                Ok(kind)
            })
            .collect()
    }
}

#[derive(Args, Debug)]
pub struct SmoothArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub edges: PathBuf,
    #[command(flatten)]
    pub agg: AggregatorArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DriftArgs {
    /// Original (encoder) features defining the manifold.
    #[arg(long)]
    pub reference: PathBuf,
    /// A single aggregated matrix to score.
    #[arg(long, conflicts_with_all = ["manifest", "edges"])]
    pub current: Option<PathBuf>,
    /// Manifest written by `smooth`; every layer is scored.
    #[arg(long, conflicts_with = "edges")]
    pub manifest: Option<PathBuf>,
    /// Smooth the reference over these edges and score every layer.
    #[arg(long, requires = "aggregator")]
    pub edges: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub aggregator: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = AggregatorKind::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = AggregatorKind::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub r: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    #[arg(long)]
    pub include_self: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.task` in the config.
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Output directory; defaults to `runs/` next to the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long, value_delimiter = ',')]
    pub taus: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    match s {
        "node" => Ok(Task::Node),
        "link" => Ok(Task::Link),
        other => Err(format!("unknown task '{other}' (expected node or link)")),
    }
}

/// Written by `smooth`, read by `drift --manifest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothManifest {
    pub features: PathBuf,
    pub edges: PathBuf,
    pub runs: Vec<SmoothRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothRun {
    pub aggregator: AggregatorKind,
    pub layers: usize,
    /// Embedding files for layers `0..=layers`, relative to the manifest.
    pub files: Vec<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Smooth(a) => cmd_smooth(a),
        Command::Drift(a) => cmd_drift(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gridsearch(a) => cmd_grid(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn read_graph(edges: &Path, n: usize) -> Result<Graph> {
    Graph::undirected_with_self_loops(&io::read_edges(edges)?, n)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n: a.nodes,
        d: a.dim,
        classes: a.classes,
        kappa: a.kappa,
        p_in: a.p_in,
        p_out: a.p_out,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    io::write_features(&data.features, &a.out.join("features.gemb"))?;
    io::write_labels(&data.labels, &a.out.join("labels.tsv"))?;
    io::write_edges(&data.edges, &a.out.join("edges.tsv"))?;
    io::write_json(&a.out.join("spec.json"), &spec)?;
    log::info!(
        "wrote {} nodes and {} edges to {}",
        spec.n,
        data.edges.len(),
        a.out.display()
    );
    Ok(())
}

fn smooth_runs(
    features: &Array2<f64>,
    graph: &Graph,
    agg: &AggregatorArgs,
) -> Result<Vec<(AggregatorKind, Vec<Array2<f64>>)>> {
    agg.kinds()?
        .into_iter()
        .map(|kind| Ok((kind, smooth(features, graph, kind, agg.layers)?.snapshots)))
        .collect()
}

fn cmd_smooth(a: SmoothArgs) -> Result<()> {
    let features = io::read_features(&a.features)?;
    let graph = read_graph(&a.edges, features.nrows())?;
    let mut runs = Vec::new();
    for (kind, snapshots) in smooth_runs(&features, &graph, &a.agg)? {
        let mut files = Vec::new();
        for (l, snap) in snapshots.iter().enumerate() {
            let name = PathBuf::from(format!("{}_layer{l}.gemb", kind.name()));
            io::write_features(snap, &a.out.join(&name))?;
            files.push(name);
        }
        runs.push(SmoothRun {
            aggregator: kind,
            layers: a.agg.layers,
            files,
        });
    }
    let manifest = SmoothManifest {
        features: std::path::absolute(&a.features)?,
        edges: std::path::absolute(&a.edges)?,
        runs,
    };
    io::write_json(&a.out.join("manifest.json"), &manifest)
}

fn curve_csv(rows: &[(usize, String, f64)]) -> String {
    let mut out = String::from("layer,aggregator,mean_drift\n");
    for (l, name, d) in rows {
        out.push_str(&format!("{l},{name},{d}\n"));
    }
    out
}

fn cmd_drift(a: DriftArgs) -> Result<()> {
    let reference = io::read_features(&a.reference)?;
    let config = DriftConfig {
        k: a.k,
        r: a.r,
        epsilon: a.epsilon,
        include_self_in_knn: a.include_self,
    };
    let fitted = DriftReference::fit(&reference, config)?;

    if let Some(current) = &a.current {
        let report = fitted.score(&io::read_features(current)?, 0)?;
        io::write_json(&a.out.join("drift.json"), &report)?;
        return io::write_atomic(&a.out.join("drift_per_node.csv"), report.to_csv().as_bytes());
    }

    let runs: Vec<(String, Vec<Array2<f64>>)> = if let Some(manifest_path) = &a.manifest {
        let manifest: SmoothManifest = io::read_json(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        manifest
            .runs
            .iter()
            .map(|run| {
                let snaps = run
                    .files
                    .iter()
                    .map(|f| io::read_features(&io::resolve(base, f)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((run.aggregator.name().to_string(), snaps))
            })
            .collect::<Result<_>>()?
    } else if let Some(edges) = &a.edges {
        let graph = read_graph(edges, reference.nrows())?;
        let agg = AggregatorArgs {
            aggregator: a.aggregator.clone(),
            layers: a.layers,
            tau: a.tau,
            alpha: a.alpha,
        };
        smooth_runs(&reference, &graph, &agg)?
            .into_iter()
            .map(|(k, s)| (k.name().to_string(), s))
            .collect()
    } else {
        // Layer 0 only: the reference against itself.
        vec![("reference".to_string(), vec![reference.clone()])]
    };

    let mut curve = Vec::new();
    for (name, snapshots) in &runs {
        for (l, snap) in snapshots.iter().enumerate() {
            let report = fitted.score(snap, l)?;
            io::write_json(&a.out.join(format!("drift_{name}_layer{l}.json")), &report)?;
            curve.push((l, name.clone(), report.mean_drift));
        }
    }
    io::write_atomic(&a.out.join("drift_curve.csv"), curve_csv(&curve).as_bytes())
}

/// Data loaded according to a run config.
struct Loaded {
    features: Array2<f64>,
    graph: Graph,
    labels: Option<Vec<usize>>,
    splits: Option<NodeSplits>,
}

fn load_data(cfg: &RunConfig, task: Task) -> Result<Loaded> {
    let data = &cfg.data;
    let features = io::read_features(data.require(&data.features, "features")?)?;
    let n = features.nrows();
    let graph = read_graph(data.require(&data.edges, "edges")?, n)?;
    let (labels, splits) = match task {
        Task::Link => (None, None),
        Task::Node => {
            let labels = io::read_labels(data.require(&data.labels, "labels")?, n)?;
            let splits = match (&data.train_ids, &data.val_ids, &data.test_ids) {
                (Some(tr), Some(va), Some(te)) => NodeSplits {
                    train: io::read_node_ids(tr)?,
                    val: io::read_node_ids(va)?,
                    test: io::read_node_ids(te)?,
                },
                (None, None, None) => NodeSplits::random(n, cfg.train.split, cfg.train.split_seed)?,
                _ => {
                    return Err(Error::InvalidConfig(
                        "data.train_ids, data.val_ids and data.test_ids must be given together".into(),
                    ))
                }
            };
            splits.validate(n)?;
            (Some(labels), Some(splits))
        }
    };
    Ok(Loaded {
        features,
        graph,
        labels,
        splits,
    })
}

fn config_with_task(path: &Path, task: Option<Task>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(t) = task {
        cfg.train.task = t;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn with_task_data<R>(cfg: &RunConfig, loaded: &Loaded, f: impl FnOnce(&TaskData<'_>) -> Result<R>) -> Result<R> {
    match cfg.train.task {
        Task::Node => f(&TaskData::Node {
            features: &loaded.features,
            graph: &loaded.graph,
            labels: loaded.labels.as_deref().expect("labels loaded for node task"),
            splits: loaded.splits.as_ref().expect("splits loaded for node task"),
        }),
        Task::Link => {
            let split = split_edges(
                &loaded.graph,
                cfg.train.split,
                cfg.train.neg_per_pos,
                cfg.train.split_seed,
            )?;
            f(&TaskData::Link {
                features: &loaded.features,
                split: &split,
            })
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = config_with_task(&a.config, a.task)?;
    let out = a
        .out
        .unwrap_or_else(|| a.config.parent().unwrap_or(Path::new(".")).join("runs"));
    let loaded = load_data(&cfg, cfg.train.task)?;
    let (runs, agg) = with_task_data(&cfg, &loaded, |data| train_seeds(&cfg.model, &cfg.train, data))?;
    for run in &runs {
        let seed = run.record.seed;
        io::save_checkpoint(&run.model, &out.join(format!("checkpoint_seed{seed}.bin")))?;
        io::write_json(&out.join(format!("metrics_seed{seed}.json")), &run.record)?;
        log::info!(
            "seed {seed}: test {} at epoch {}",
            run.record.test,
            run.record.best_epoch
        );
    }
    io::write_atomic(&out.join("aggregate.csv"), agg.to_csv().as_bytes())?;
    io::write_json(&out.join("summary.json"), &agg)?;
    println!(
        "{} test mean {:.4} (std {:.4}) over {} seeds",
        cfg.train.task,
        agg.mean,
        agg.std,
        runs.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    task: Task,
    checkpoint: PathBuf,
    train: Option<f64>,
    val: f64,
    test: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = config_with_task(&a.config, a.task)?;
    let model: GeoModel = io::load_checkpoint(&a.checkpoint)?;
    let loaded = load_data(&cfg, cfg.train.task)?;
    let report = match cfg.train.task {
        Task::Node => {
            let ctx = GraphContext::new(&loaded.graph);
            let probs = model.predict_proba(&loaded.features, &ctx)?;
            let labels = loaded.labels.as_deref().expect("labels loaded for node task");
            let s = loaded.splits.as_ref().expect("splits loaded for node task");
            EvalReport {
                task: Task::Node,
                checkpoint: a.checkpoint.clone(),
                train: Some(evaluate_accuracy(&probs, labels, &s.train)?),
                val: evaluate_accuracy(&probs, labels, &s.val)?,
                test: evaluate_accuracy(&probs, labels, &s.test)?,
            }
        }
        Task::Link => {
            let t = &cfg.train;
            let split = split_edges(&loaded.graph, t.split, t.neg_per_pos, t.split_seed)?;
            let h = model.forward(&loaded.features, &GraphContext::new(&split.train_graph()?))?;
            EvalReport {
                task: Task::Link,
                checkpoint: a.checkpoint.clone(),
                train: None,
                val: evaluate_hit_at_k(
                    &h,
                    &split.val,
                    &split.val_negatives,
                    t.neg_per_pos,
                    t.eval_k,
                    t.similarity,
                )?,
                test: evaluate_hit_at_k(
                    &h,
                    &split.test,
                    &split.test_negatives,
                    t.neg_per_pos,
                    t.eval_k,
                    t.similarity,
                )?,
            }
        }
    };
    io::write_json(&a.out, &report)?;
    println!("{} val {:.4} test {:.4}", report.task, report.val, report.test);
    Ok(())
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let cfg = config_with_task(&a.config, a.task)?;
    let defaults = GridAxes::default();
    let axes = GridAxes {
        taus: if a.taus.is_empty() { defaults.taus } else { a.taus },
        alphas: if a.alphas.is_empty() { defaults.alphas } else { a.alphas },
        layers: if a.layers.is_empty() {
            vec![cfg.model.layers]
        } else {
            a.layers
        },
        heads: if a.heads.is_empty() {
            vec![cfg.model.heads]
        } else {
            a.heads
        },
    };
    let loaded = load_data(&cfg, cfg.train.task)?;
    let rows = with_task_data(&cfg, &loaded, |data| grid_search(&cfg.model, &cfg.train, &axes, data))?;
    io::write_atomic(&a.out.join("grid.csv"), grid_to_csv(&rows).as_bytes())?;
    let failed: Vec<_> = rows.iter().filter(|r| r.status != "ok").collect();
    println!("{} cells, {} failed", rows.len(), failed.len());
    if let Some(first) = failed.first() {
        return Err(Error::Numeric(format!(
            "{} grid cells failed; first (tau {}, alpha {}): {}",
            failed.len(),
            first.tau,
            first.alpha,
            first.status
        )));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let report = gradient_check_geognn(a.seed, a.step)?;
    println!(
        "max relative error {:.3e} over {} entries (clamp boundary hits: {})",
        report.max_rel_error, report.entries_checked, report.clamp_boundary_hits
    );
    if !(report.max_rel_error < a.threshold) {
        return Err(Error::Numeric(format!(
            "max relative error {:.3e} at {:?} exceeds {:.1e}",
            report.max_rel_error, report.worst_entry, a.threshold
        )));
    }
    Ok(())
}
