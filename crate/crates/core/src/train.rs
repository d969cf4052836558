//! Full-batch training loops, metrics and seed/grid orchestration.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{compute_gradients, AdamConfig, AdamState, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeSplit, Graph};
use crate::model::{
    link_logits_on_tape, similarity, ForwardDiagnostics, GeoModel, GraphContext, MlpClassifier, ModelConfig, Similarity,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Node,
    Link,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Node => "node",
            Task::Link => "link",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub neg_per_pos: usize,
    pub eval_k: usize,
    pub similarity: Similarity,
    /// Train/val/test fractions for node or edge splits.
    pub split: (f64, f64, f64),
    pub split_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Node,
            epochs: 1000,
            lr: 1e-3,
            seeds: (0..5).collect(),
            patience: None,
            neg_per_pos: 100,
            eval_k: 10,
            similarity: Similarity::Dot,
            split: (0.6, 0.2, 0.2),
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if self.task == Task::Link && self.neg_per_pos < self.eval_k {
            return Err(Error::InvalidConfig(format!(
                "neg_per_pos ({}) must be at least eval_k ({})",
                self.neg_per_pos, self.eval_k
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: f64,
    /// Validation cross-entropy, used to break ties in `val`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_loss: Option<f64>,
}

/// Log of one training run. `test` is measured at `best_epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub task: Task,
    pub seed: u64,
    pub config: serde_json::Value,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub train: f64,
    pub test: f64,
}

/// Node id lists for train/validation/test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl NodeSplits {
    /// Seeded shuffle partitioned by `ratios`; each list is sorted.
    pub fn random(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (rt, rv, rs) = ratios;
        if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split ratios {ratios:?} must be in [0, 1] and sum to 1"
            )));
        }
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (rv * n as f64).round() as usize;
        let n_test = (rs * n as f64).round() as usize;
        let n_train = n
            .checked_sub(n_val + n_test)
            .ok_or_else(|| Error::InvalidConfig("split larger than node set".into()))?;
        let mut test = ids.split_off(n_train + n_val);
        let mut val = ids.split_off(n_train);
        let mut train = ids;
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let splits = Self { train, val, test };
        splits.validate(n)?;
        Ok(splits)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if ids.is_empty() {
                return Err(Error::Validation(format!("{name} split is empty")));
            }
            if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!(
                    "{name} split has node {bad} but graph has {n} nodes"
                )));
            }
        }
        Ok(())
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of `node_ids` whose argmax class (lowest id on ties) matches.
pub fn evaluate_accuracy(probabilities: &Tensor, labels: &[usize], node_ids: &[usize]) -> Result<f64> {
    if node_ids.is_empty() {
        return Err(Error::Validation("accuracy over an empty node list".into()));
    }
    let mut correct = 0usize;
    for &i in node_ids {
        if i >= probabilities.nrows() || i >= labels.len() {
            return Err(Error::Validation(format!("node id {i} out of range")));
        }
        let row = probabilities.row(i);
        correct += usize::from(argmax_lowest(row.as_slice().expect("standard layout")) == labels[i]);
    }
    Ok(correct as f64 / node_ids.len() as f64)
}

/// Hit@k from raw scores: positive `p` is a hit iff fewer than `k` of its
/// own `neg_per_pos` negatives score at least as high.
pub fn hit_at_k(positive_scores: &[f64], negative_scores: &[f64], neg_per_pos: usize, k: usize) -> Result<f64> {
    if neg_per_pos < k {
        return Err(Error::InvalidConfig(format!(
            "neg_per_pos ({neg_per_pos}) must be at least k ({k})"
        )));
    }
    if positive_scores.is_empty() {
        return Err(Error::Validation("Hit@k over an empty positive set".into()));
    }
    if negative_scores.len() != positive_scores.len() * neg_per_pos {
        return Err(Error::Contract(format!(
            "{} negative scores for {} positives at {} each",
            negative_scores.len(),
            positive_scores.len(),
            neg_per_pos
        )));
    }
    let hits = positive_scores
        .iter()
        .zip(negative_scores.chunks(neg_per_pos))
        .filter(|(&p, negs)| negs.iter().filter(|&&s| s >= p).count() < k)
        .count();
    Ok(hits as f64 / positive_scores.len() as f64)
}

/// Hit@k of embedding similarities. `negatives` holds `neg_per_pos`
/// consecutive pairs for each positive.
pub fn evaluate_hit_at_k(
    embeddings: &Tensor,
    positives: &[(usize, usize)],
    negatives: &[(usize, usize)],
    neg_per_pos: usize,
    k: usize,
    kind: Similarity,
) -> Result<f64> {
    let score = |&(u, v): &(usize, usize)| -> Result<f64> {
        if u >= embeddings.nrows() || v >= embeddings.nrows() {
            return Err(Error::Validation(format!("pair ({u}, {v}) out of range")));
        }
        Ok(similarity(
            embeddings.row(u).as_slice().expect("standard layout"),
            embeddings.row(v).as_slice().expect("standard layout"),
            kind,
        ))
    };
    let pos = positives.iter().map(score).collect::<Result<Vec<_>>>()?;
    let neg = negatives.iter().map(score).collect::<Result<Vec<_>>>()?;
    hit_at_k(&pos, &neg, neg_per_pos, k)
}

/// Separate stream so dropout masks do not reuse the init stream.
fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn config_json(model: &serde_json::Value, train: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "model": model, "train": train })
}

/// Best-validation bookkeeping shared by every loop.
struct Tracker {
    epochs: Vec<EpochLog>,
    best_epoch: usize,
    best_val: f64,
    best_val_loss: f64,
    train: f64,
    test: f64,
    best_params: Vec<Tensor>,
    since_best: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            epochs: Vec::new(),
            best_epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_val_loss: f64::INFINITY,
            train: f64::NAN,
            test: f64::NAN,
            best_params: Vec::new(),
            since_best: 0,
        }
    }

    /// An epoch is better if its validation metric is higher, or equal with
    /// a lower validation loss. Returns true when `patience` says to stop.
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        epoch: usize,
        loss: f64,
        val: f64,
        val_loss: Option<f64>,
        params: &[Parameter],
        patience: Option<usize>,
        train_test: impl FnOnce() -> Result<(f64, f64)>,
    ) -> Result<bool> {
        self.epochs.push(EpochLog {
            epoch,
            train_loss: loss,
            val,
            val_loss,
        });
        let vl = val_loss.unwrap_or(f64::INFINITY);
        if val > self.best_val || (val == self.best_val && vl < self.best_val_loss) {
            self.best_val = val;
            self.best_val_loss = vl;
            self.best_epoch = epoch;
            (self.train, self.test) = train_test()?;
            self.best_params = params.iter().map(|p| p.value.clone()).collect();
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(patience.is_some_and(|p| self.since_best >= p))
    }

    fn finish(self, task: Task, seed: u64, config: serde_json::Value) -> (MetricsRecord, Vec<Tensor>) {
        (
            MetricsRecord {
                task,
                seed,
                config,
                epochs: self.epochs,
                best_epoch: self.best_epoch,
                best_val: self.best_val,
                train: self.train,
                test: self.test,
            },
            self.best_params,
        )
    }
}

/// Mean `-ln p[label]` over `ids`.
fn mean_log_loss(probs: &Tensor, labels: &[usize], ids: &[usize]) -> f64 {
    ids.iter()
        .map(|&i| -probs[[i, labels[i]]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / ids.len() as f64
}

fn numeric_context(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Validation(format!("{} labels for {n} nodes", labels.len())));
    }
    if let Some((i, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= classes) {
        return Err(Error::Validation(format!(
            "node {i} has class {c}, expected < {classes}"
        )));
    }
    Ok(())
}

/// Number of classes implied by a label vector.
pub fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

pub struct Trained<M> {
    pub model: M,
    pub record: MetricsRecord,
}

/// Cross-entropy on train nodes with Adam; returns the best-validation
/// model. `model_config.seed` is replaced by `seed`.
pub fn train_node_classifier(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    features: &Array2<f64>,
    graph: &Graph,
    labels: &[usize],
    splits: &NodeSplits,
    seed: u64,
) -> Result<Trained<GeoModel>> {
    train_config.validate()?;
    let n = graph.num_nodes();
    if features.nrows() != n {
        return Err(Error::Validation(format!(
            "{} feature rows for {n} nodes",
            features.nrows()
        )));
    }
    splits.validate(n)?;
    let classes = num_classes(labels);
    check_labels(labels, n, classes)?;
    let config = ModelConfig {
        seed,
        ..model_config.clone()
    };
    let mut model = GeoModel::new(config, features.ncols(), Some(classes))?;
    let arch = model.clone();
    let ctx = GraphContext::new(graph);
    let targets: Vec<(usize, usize)> = splits.train.iter().map(|&i| (i, labels[i])).collect();
    let mut adam: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::for_param(p, train_config.adam()))
        .collect();
    let mut rng = dropout_rng(seed);
    let mut tracker = Tracker::new();

    for epoch in 1..=train_config.epochs {
        let loss = compute_gradients(model.params_mut(), |tape, vars| {
            let x = tape.constant(features.clone());
            let mut diag = ForwardDiagnostics::default();
            let logits = arch.logits_on_tape(tape, x, vars, &ctx, true, &mut rng, &mut diag)?;
            tape.cross_entropy(logits, &targets)
        })
        .map_err(numeric_context(epoch))?;
        for (state, p) in adam.iter_mut().zip(model.params_mut()) {
            state.step(p)?;
        }
        let probs = model.predict_proba(features, &ctx).map_err(numeric_context(epoch))?;
        let val = evaluate_accuracy(&probs, labels, &splits.val)?;
        let val_loss = mean_log_loss(&probs, labels, &splits.val);
        let stop = tracker.record(
            epoch,
            loss,
            val,
            Some(val_loss),
            model.params(),
            train_config.patience,
            || {
                Ok((
                    evaluate_accuracy(&probs, labels, &splits.train)?,
                    evaluate_accuracy(&probs, labels, &splits.test)?,
                ))
            },
        )?;
        if stop {
            break;
        }
    }
    let cfg = serde_json::to_value(&model.config)?;
    let (record, best) = tracker.finish(Task::Node, seed, config_json(&cfg, train_config));
    for (p, v) in model.params_mut().iter_mut().zip(best) {
        p.value = v;
    }
    Ok(Trained { model, record })
}

/// Graph-free MLP reference trained under the same protocol.
pub fn train_mlp_classifier(
    hidden: usize,
    dropout: f64,
    train_config: &TrainConfig,
    features: &Array2<f64>,
    labels: &[usize],
    splits: &NodeSplits,
    seed: u64,
) -> Result<Trained<MlpClassifier>> {
    train_config.validate()?;
    let n = features.nrows();
    splits.validate(n)?;
    let classes = num_classes(labels);
    check_labels(labels, n, classes)?;
    let mut model = MlpClassifier::new(features.ncols(), hidden, classes, dropout, seed)?;
    let arch = model.clone();
    let targets: Vec<(usize, usize)> = splits.train.iter().map(|&i| (i, labels[i])).collect();
    let mut adam: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::for_param(p, train_config.adam()))
        .collect();
    let mut rng = dropout_rng(seed);
    let mut tracker = Tracker::new();

    for epoch in 1..=train_config.epochs {
        let loss = compute_gradients(model.params_mut(), |tape, vars| {
            let x = tape.constant(features.clone());
            let logits = arch.logits_on_tape(tape, x, vars, true, &mut rng)?;
            tape.cross_entropy(logits, &targets)
        })
        .map_err(numeric_context(epoch))?;
        for (state, p) in adam.iter_mut().zip(model.params_mut()) {
            state.step(p)?;
        }
        let probs = model.predict_proba(features)?;
        let val = evaluate_accuracy(&probs, labels, &splits.val)?;
        let val_loss = mean_log_loss(&probs, labels, &splits.val);
        let stop = tracker.record(
            epoch,
            loss,
            val,
            Some(val_loss),
            model.params(),
            train_config.patience,
            || {
                Ok((
                    evaluate_accuracy(&probs, labels, &splits.train)?,
                    evaluate_accuracy(&probs, labels, &splits.test)?,
                ))
            },
        )?;
        if stop {
            break;
        }
    }
    let cfg = serde_json::json!({ "mlp_hidden": hidden, "dropout": dropout, "seed": seed });
    let (record, best) = tracker.finish(Task::Node, seed, config_json(&cfg, train_config));
    for (p, v) in model.params_mut().iter_mut().zip(best) {
        p.value = v;
    }
    Ok(Trained { model, record })
}

/// Embeddings of `model` with message passing over `graph`.
pub fn embed(model: &GeoModel, features: &Array2<f64>, graph: &Graph) -> Result<Tensor> {
    model.forward(features, &GraphContext::new(graph))
}

/// Binary cross-entropy over train positives and an equal number of fresh
/// negatives each epoch, message passing on train positives only.
/// Validation uses Hit@k on the split's validation pairs.
pub fn train_link_predictor(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    features: &Array2<f64>,
    split: &EdgeSplit,
    seed: u64,
) -> Result<Trained<GeoModel>> {
    let mut tc = train_config.clone();
    tc.task = Task::Link;
    tc.validate()?;
    if features.nrows() != split.n {
        return Err(Error::Validation(format!(
            "{} feature rows for {} nodes",
            features.nrows(),
            split.n
        )));
    }
    if split.neg_per_pos < tc.eval_k {
        return Err(Error::InvalidConfig(format!(
            "split has {} negatives per positive, fewer than k = {}",
            split.neg_per_pos, tc.eval_k
        )));
    }
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Validation("edge split has an empty partition".into()));
    }
    let graph = split.train_graph()?;
    let ctx = GraphContext::new(&graph);
    let config = ModelConfig {
        seed,
        ..model_config.clone()
    };
    let mut model = GeoModel::new(config, features.ncols(), None)?;
    let arch = model.clone();
    let mut adam: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::for_param(p, tc.adam()))
        .collect();
    let mut rng = dropout_rng(seed);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(seed);
    neg_rng.set_stream(2);
    let mut tracker = Tracker::new();
    let mut labels = vec![1.0; split.train.len()];
    labels.resize(2 * split.train.len(), 0.0);

    for epoch in 1..=tc.epochs {
        let mut pairs = split.train.clone();
        pairs.extend(split.sample_negatives(split.train.len(), &mut neg_rng)?);
        let loss = compute_gradients(model.params_mut(), |tape: &mut Tape, vars: &[Var]| {
            let x = tape.constant(features.clone());
            let mut diag = ForwardDiagnostics::default();
            let h = arch.embed_on_tape(tape, x, vars, &ctx, true, &mut rng, &mut diag, None)?;
            let logits = link_logits_on_tape(tape, h, &pairs, tc.similarity)?;
            tape.bce_with_logits(logits, &labels)
        })
        .map_err(numeric_context(epoch))?;
        for (state, p) in adam.iter_mut().zip(model.params_mut()) {
            state.step(p)?;
        }
        let h = model.forward(features, &ctx).map_err(numeric_context(epoch))?;
        let val = evaluate_hit_at_k(
            &h,
            &split.val,
            &split.val_negatives,
            split.neg_per_pos,
            tc.eval_k,
            tc.similarity,
        )?;
        let stop = tracker.record(epoch, loss, val, None, model.params(), tc.patience, || {
            Ok((
                f64::NAN,
                evaluate_hit_at_k(
                    &h,
                    &split.test,
                    &split.test_negatives,
                    split.neg_per_pos,
                    tc.eval_k,
                    tc.similarity,
                )?,
            ))
        })?;
        if stop {
            break;
        }
    }
    let cfg = serde_json::to_value(&model.config)?;
    let (record, best) = tracker.finish(Task::Link, seed, config_json(&cfg, &tc));
    for (p, v) in model.params_mut().iter_mut().zip(best) {
        p.value = v;
    }
    Ok(Trained { model, record })
}

/// Per-seed test metrics and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn from_records(records: &[MetricsRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("no runs to aggregate".into()));
        }
        let per_seed: Vec<(u64, f64)> = records.iter().map(|r| (r.seed, r.test)).collect();
        let m = per_seed.len() as f64;
        let mean = per_seed.iter().map(|s| s.1).sum::<f64>() / m;
        let std = (per_seed.iter().map(|s| (s.1 - mean).powi(2)).sum::<f64>() / m).sqrt();
        Ok(Self { per_seed, mean, std })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,test\n");
        for (seed, t) in &self.per_seed {
            out.push_str(&format!("{seed},{t}\n"));
        }
        out.push_str(&format!("mean,{}\nstd,{}\n", self.mean, self.std));
        out
    }
}

/// The data a grid search trains on.
pub enum TaskData<'a> {
    Node {
        features: &'a Array2<f64>,
        graph: &'a Graph,
        labels: &'a [usize],
        splits: &'a NodeSplits,
    },
    Link {
        features: &'a Array2<f64>,
        split: &'a EdgeSplit,
    },
}

impl TaskData<'_> {
    pub fn train(&self, model: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<Trained<GeoModel>> {
        match *self {
            TaskData::Node {
                features,
                graph,
                labels,
                splits,
            } => train_node_classifier(model, train, features, graph, labels, splits, seed),
            TaskData::Link { features, split } => train_link_predictor(model, train, features, split, seed),
        }
    }
}

/// Runs every seed of `train` and aggregates test metrics.
pub fn train_seeds(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &TaskData<'_>,
) -> Result<(Vec<Trained<GeoModel>>, Aggregate)> {
    let runs = train
        .seeds
        .iter()
        .map(|&s| data.train(model, train, s))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<MetricsRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let agg = Aggregate::from_records(&records)?;
    Ok((runs, agg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
}

impl Default for GridAxes {
    fn default() -> Self {
        let grid: Vec<f64> = (-4..=2).map(|e| 10f64.powi(e)).collect();
        Self {
            taus: grid.clone(),
            alphas: grid,
            layers: vec![2],
            heads: vec![4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub tau: f64,
    pub alpha: f64,
    pub layers: usize,
    pub heads: usize,
    pub mean_val: f64,
    pub mean_test: f64,
    pub std_test: f64,
    /// "ok", or the error that stopped this cell.
    pub status: String,
}

pub fn grid_to_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("tau,alpha,layers,heads,mean_val,mean_test,std_test,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.tau,
            r.alpha,
            r.layers,
            r.heads,
            r.mean_val,
            r.mean_test,
            r.std_test,
            r.status.replace([',', '\n'], ";")
        ));
    }
    out
}

/// Trains every (τ, α, layers, heads) cell over all seeds. Cells run in
/// parallel; rows come back in axis order. A failing cell is reported in
/// its row rather than aborting the sweep.
pub fn grid_search(
    base: &ModelConfig,
    train: &TrainConfig,
    axes: &GridAxes,
    data: &TaskData<'_>,
) -> Result<Vec<GridRow>> {
    let mut cells = Vec::new();
    for &tau in &axes.taus {
        for &alpha in &axes.alphas {
            for &layers in &axes.layers {
                for &heads in &axes.heads {
                    cells.push(ModelConfig {
                        tau,
                        alpha,
                        layers,
                        heads,
                        ..base.clone()
                    });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidConfig("grid has no cells".into()));
    }
    for c in &cells {
        c.validate()?;
    }
    Ok(cells
        .par_iter()
        .map(|cfg| {
            let (mean_val, mean_test, std_test, status) = match train_seeds(cfg, train, data) {
                Ok((runs, agg)) => {
                    let mv = runs.iter().map(|r| r.record.best_val).sum::<f64>() / runs.len() as f64;
                    (mv, agg.mean, agg.std, "ok".to_string())
                }
                Err(e) => (f64::NAN, f64::NAN, f64::NAN, e.to_string()),
            };
            GridRow {
                tau: cfg.tau,
                alpha: cfg.alpha,
                layers: cfg.layers,
                heads: cfg.heads,
                mean_val,
                mean_test,
                std_test,
                status,
            }
        })
        .collect())
}

/// Central-difference check of a 2-layer, 2-head GeoGNN with a
/// cross-entropy head on a seeded 12-node random graph, dropout off.
pub fn gradient_check_geognn(seed: u64, h: f64) -> Result<crate::autodiff::GradCheckReport> {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    let (n, d, classes) = (12, 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::undirected_with_self_loops(&edges, n)?;
    let features = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    let targets: Vec<(usize, usize)> = (0..n).map(|i| (i, rng.random_range(0..classes))).collect();
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        head_dim: 4,
        tau: 1.0,
        alpha: 0.5,
        dropout: 0.0,
        seed,
        ..Default::default()
    };
    let mut model = GeoModel::new(config, d, Some(classes))?;
    let arch = model.clone();
    let ctx = GraphContext::new(&graph);
    crate::autodiff::check_gradients(model.params_mut(), h, |tape, vars| {
        let x = tape.constant(features.clone());
        let mut diag = ForwardDiagnostics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = arch.logits_on_tape(tape, x, vars, &ctx, false, &mut rng, &mut diag)?;
        tape.cross_entropy(logits, &targets)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accuracy_examples() {
        let p = array![[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]];
        assert_eq!(evaluate_accuracy(&p, &[0, 1, 0, 1], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&p, &[0, 1, 1, 1], &[0, 1, 2, 3]).unwrap(), 0.75);
        let uniform = Tensor::from_elem((3, 4), 0.25);
        assert_eq!(evaluate_accuracy(&uniform, &[0, 0, 0], &[0, 1, 2]).unwrap(), 1.0);
        assert!(evaluate_accuracy(&p, &[0; 4], &[]).is_err());
        assert!(evaluate_accuracy(&p, &[0; 4], &[7]).is_err());
    }

    #[test]
    fn hit_examples() {
        let negs: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(hit_at_k(&[2.0], &negs, 100, 10).unwrap(), 1.0);
        // Ten negatives strictly above: rank 11 of 101.
        assert_eq!(hit_at_k(&[0.895], &negs, 100, 10).unwrap(), 0.0);
        // Nine above, one tied.
        assert_eq!(hit_at_k(&[0.90], &negs, 100, 10).unwrap(), 0.0);
        assert_eq!(hit_at_k(&[0.905], &negs, 100, 10).unwrap(), 1.0);
        assert!(matches!(
            hit_at_k(&[1.0], &negs[..5], 5, 10),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn hit_monotone_in_k() {
        let pos = [0.3, 0.9, 0.5, 0.1];
        let neg: Vec<f64> = (0..40).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let mut last = 0.0;
        for k in 1..=10 {
            let h = hit_at_k(&pos, &neg, 10, k).unwrap();
            assert!(h >= last);
            last = h;
        }
    }

    #[test]
    fn node_splits_partition() {
        let s = NodeSplits::random(101, (0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (61, 20, 20));
        let mut all: Vec<usize> = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(s, NodeSplits::random(101, (0.6, 0.2, 0.2), 3).unwrap());
        assert!(NodeSplits::random(10, (0.5, 0.5, 0.5), 0).is_err());
    }

    #[test]
    fn aggregate_mean() {
        let rec = |seed, test| MetricsRecord {
            task: Task::Node,
            seed,
            config: serde_json::Value::Null,
            epochs: vec![],
            best_epoch: 1,
            best_val: 0.0,
            train: 0.0,
            test,
        };
        let recs: Vec<_> = [0.81, 0.79, 0.9, 0.85, 0.8]
            .iter()
            .enumerate()
            .map(|(i, &t)| rec(i as u64, t))
            .collect();
        let agg = Aggregate::from_records(&recs).unwrap();
        assert!((agg.mean - (0.81 + 0.79 + 0.9 + 0.85 + 0.8) / 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let link = TrainConfig {
            task: Task::Link,
            neg_per_pos: 5,
            ..Default::default()
        };
        assert!(matches!(link.validate(), Err(Error::InvalidConfig(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
