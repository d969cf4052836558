//! GeoGNN: per-head projection, spherical normalization, geodesic
//! attention over log-mapped neighbors, exp-map update and head
//! concatenation, with classification and link-scoring heads.
//!
//! Everything is expressed on the [`Tape`], so the same code path serves
//! inference and training.

use std::rc::Rc;

use ndarray::Array2;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Graph, MessageIndex};
use crate::sphere::{ANTIPODAL_TOL, COS_CLAMP};

/// Switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Replace the log/exp cycle by a weighted average of neighbor points.
    pub no_geodesic: bool,
    /// Uniform `1/|N(i)|` weights instead of cosine attention.
    pub no_cos: bool,
    /// Skip the sphere projection; aggregate raw projections in Euclidean space.
    pub no_normalization: bool,
}

impl Ablation {
    pub fn all() -> Self {
        Self {
            no_geodesic: true,
            no_cos: true,
            no_normalization: true,
        }
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_geodesic {
            parts.push("no_geodesic");
        }
        if self.no_cos {
            parts.push("no_cos");
        }
        if self.no_normalization {
            parts.push("no_normalization");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub tau: f64,
    pub alpha: f64,
    pub dropout: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            head_dim: 16,
            tau: 1.0,
            alpha: 0.5,
            dropout: 0.5,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.heads < 1 || self.head_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "need layers >= 1, heads >= 1, head_dim >= 2 (got {}, {}, {})",
                self.layers, self.heads, self.head_dim
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Similarity used to score a candidate edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

/// Uniform Glorot initialization `U[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s).expect("finite bounds");
    Tensor::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Counters gathered during one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardDiagnostics {
    /// Projected rows with zero norm replaced by `e₁`.
    pub degenerate_rows: usize,
    /// Neighbor pairs whose cosine fell below `-1 + 1e-6` and was clamped.
    pub antipodal_pairs: usize,
}

/// Graph arrays prepared once per graph and shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub n: usize,
    pub index: MessageIndex,
    /// `1/|N(i)|` per entry, for uniform weighting.
    uniform: Tensor,
    non_self: Tensor,
}

impl GraphContext {
    pub fn new(graph: &Graph) -> Self {
        let index = graph.message_index();
        let n = graph.num_nodes();
        let uniform = Tensor::from_shape_fn((index.centers.len(), 1), |(e, _)| {
            1.0 / graph.degree(index.centers[e]) as f64
        });
        let non_self =
            Tensor::from_shape_vec((index.non_self.len(), 1), index.non_self.clone()).expect("one mask entry per edge");
        Self {
            n,
            index,
            uniform,
            non_self,
        }
    }
}

/// Input and output of one layer, captured by [`GeoModel::forward_trace`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub input: Tensor,
    pub output: Tensor,
}

/// Stacked GeoGNN layers plus an optional classification matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoModel {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: Option<usize>,
    /// `W⁽ˡ⁾` for each layer, then `W_o` when a classifier is attached.
    params: Vec<Parameter>,
}

impl GeoModel {
    /// Seeded Glorot initialization of every weight.
    pub fn new(config: ModelConfig, input_dim: usize, num_classes: Option<usize>) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::InvalidConfig("input dimension must be positive".into()));
        }
        if num_classes == Some(0) {
            return Err(Error::InvalidConfig("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let width = config.output_dim();
        let mut params = Vec::with_capacity(config.layers + 1);
        let mut d_in = input_dim;
        for l in 0..config.layers {
            params.push(Parameter::new(
                format!("layer{l}.weight"),
                glorot_uniform(width, d_in, &mut rng),
            ));
            d_in = width;
        }
        if let Some(c) = num_classes {
            params.push(Parameter::new("head.weight", glorot_uniform(c, width, &mut rng)));
        }
        Ok(Self {
            config,
            input_dim,
            num_classes,
            params,
        })
    }

    /// Rebuilds a model from stored parameter values, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        input_dim: usize,
        num_classes: Option<usize>,
        values: Vec<Tensor>,
    ) -> Result<Self> {
        let mut model = Self::new(config, input_dim, num_classes)?;
        if values.len() != model.params.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter blocks, got {}",
                model.params.len(),
                values.len()
            )));
        }
        for (p, v) in model.params.iter_mut().zip(values) {
            if v.dim() != p.shape() {
                return Err(Error::Validation(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    v.dim(),
                    p.shape()
                )));
            }
            p.value = v;
        }
        Ok(model)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn layer_weight(&self, l: usize) -> &Parameter {
        &self.params[l]
    }

    pub fn layer_weight_mut(&mut self, l: usize) -> &mut Parameter {
        &mut self.params[l]
    }

    pub fn head_weight(&self) -> Option<&Parameter> {
        self.num_classes.map(|_| &self.params[self.config.layers])
    }

    pub fn head_weight_mut(&mut self) -> Option<&mut Parameter> {
        let l = self.config.layers;
        self.num_classes.map(move |_| &mut self.params[l])
    }

    /// One geodesic layer on the tape: `h` is n×d_in, `weight` is
    /// (H·d_h)×d_in, the result is n×(H·d_h).
    pub fn layer_on_tape(
        &self,
        tape: &mut Tape,
        h: Var,
        weight: Var,
        ctx: &GraphContext,
        diagnostics: &mut ForwardDiagnostics,
    ) -> Result<Var> {
        let cfg = &self.config;
        let ab = cfg.ablation;
        let idx = &ctx.index;
        let wt = tape.transpose(weight);
        let z_all = tape.matmul(h, wt)?;
        let geodesic = !ab.no_geodesic && !ab.no_normalization;
        let mut heads = Vec::with_capacity(cfg.heads);

        for head in 0..cfg.heads {
            let z = tape.slice_cols(z_all, head * cfg.head_dim, (head + 1) * cfg.head_dim)?;
            let before = tape.degenerate_rows();
            let unit = if ab.no_normalization && ab.no_cos {
                None
            } else {
                Some(tape.row_normalize(z))
            };
            diagnostics.degenerate_rows += tape.degenerate_rows() - before;
            let points = if ab.no_normalization {
                z
            } else {
                unit.expect("normalized above")
            };

            let cos = match unit {
                Some(u) if !ab.no_cos || geodesic => {
                    let ui = tape.gather_rows(u, idx.centers.clone())?;
                    let uj = tape.gather_rows(u, idx.neighbors.clone())?;
                    let prod = tape.mul(ui, uj)?;
                    let raw = tape.row_sum(prod);
                    diagnostics.antipodal_pairs +=
                        tape.value(raw).iter().filter(|&&c| c < -1.0 + ANTIPODAL_TOL).count();
                    Some(tape.clamp(raw, -COS_CLAMP, COS_CLAMP))
                }
                _ => None,
            };

            let weights = if ab.no_cos {
                tape.constant(ctx.uniform.clone())
            } else {
                let c = cos.expect("cosine computed when attention is on");
                let scores = tape.scale(c, 1.0 / cfg.tau);
                tape.segment_softmax(scores, idx.offsets.clone())?
            };

            let out = if geodesic {
                let c = cos.expect("cosine computed on the geodesic path");
                self.geodesic_update(tape, points, c, weights, ctx)?
            } else {
                let xj = tape.gather_rows(points, idx.neighbors.clone())?;
                let weighted = tape.scale_rows(xj, weights)?;
                tape.scatter_add_rows(weighted, idx.centers.clone(), ctx.n)?
            };
            heads.push(out);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            tape.concat_cols(&heads)
        }
    }

    /// `u_i = Σ a_ij Log_{x_i}(x_j)` followed by `Exp_{x_i}(α u_i)`.
    fn geodesic_update(&self, tape: &mut Tape, x: Var, cos: Var, weights: Var, ctx: &GraphContext) -> Result<Var> {
        let idx = &ctx.index;
        let alpha = self.config.alpha;
        let xi = tape.gather_rows(x, idx.centers.clone())?;
        let xj = tape.gather_rows(x, idx.neighbors.clone())?;

        let theta = tape.acos(cos);
        let ratio = tape.theta_over_sin(theta);
        // Self-loops contribute a zero tangent vector.
        let mask = tape.constant(ctx.non_self.clone());
        let ratio = tape.mul(ratio, mask)?;
        let coef = tape.mul(ratio, weights)?;
        let along = tape.scale_rows(xi, cos)?;
        let chord = tape.sub(xj, along)?;
        let tangents = tape.scale_rows(chord, coef)?;
        let u = tape.scatter_add_rows(tangents, idx.centers.clone(), ctx.n)?;

        // cos(α‖u‖) x + sin(α‖u‖) u/‖u‖, written with sinc so ‖u‖ = 0 is smooth.
        let norm = tape.row_norm(u);
        let step = tape.scale(norm, alpha);
        let c = tape.cos(step);
        let s = tape.sinc(step);
        let s = tape.scale(s, alpha);
        let radial = tape.scale_rows(x, c)?;
        let tangential = tape.scale_rows(u, s)?;
        let moved = tape.add(radial, tangential)?;
        Ok(tape.row_normalize(moved))
    }

    /// Full stack on the tape. `layer_weights` are the bound `W⁽ˡ⁾` vars.
    #[allow(clippy::too_many_arguments)]
    pub fn embed_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        features: Var,
        layer_weights: &[Var],
        ctx: &GraphContext,
        training: bool,
        rng: &mut R,
        diagnostics: &mut ForwardDiagnostics,
        mut trace: Option<&mut Vec<LayerRecord>>,
    ) -> Result<Var> {
        if layer_weights.len() != self.config.layers {
            return Err(Error::Contract(format!(
                "{} layer weights bound for a {}-layer model",
                layer_weights.len(),
                self.config.layers
            )));
        }
        if tape.shape(features) != (ctx.n, self.input_dim) {
            return Err(Error::Validation(format!(
                "features {:?} do not match graph of {} nodes and input dimension {}",
                tape.shape(features),
                ctx.n,
                self.input_dim
            )));
        }
        let mut h = features;
        for (l, &w) in layer_weights.iter().enumerate() {
            let out = self.layer_on_tape(tape, h, w, ctx, diagnostics)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerRecord {
                    input: tape.value(h).clone(),
                    output: tape.value(out).clone(),
                });
            }
            if let Some((i, _)) = tape.value(out).indexed_iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite output in layer {l} at {i:?}")));
            }
            h = if l + 1 < layer_weights.len() {
                tape.dropout(out, self.config.dropout, training, rng)?
            } else {
                out
            };
        }
        Ok(h)
    }

    /// Evaluation-mode embeddings `H⁽ᴸ⁾`.
    pub fn forward(&self, features: &Array2<f64>, ctx: &GraphContext) -> Result<Tensor> {
        Ok(self.forward_with_diagnostics(features, ctx)?.0)
    }

    pub fn forward_with_diagnostics(
        &self,
        features: &Array2<f64>,
        ctx: &GraphContext,
    ) -> Result<(Tensor, ForwardDiagnostics)> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let ws: Vec<Var> = self.params[..self.config.layers]
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let mut diag = ForwardDiagnostics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.embed_on_tape(&mut tape, x, &ws, ctx, false, &mut rng, &mut diag, None)?;
        Ok((tape.value(out).clone(), diag))
    }

    /// Evaluation-mode forward recording each layer's input and output.
    pub fn forward_trace(&self, features: &Array2<f64>, ctx: &GraphContext) -> Result<Vec<LayerRecord>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let ws: Vec<Var> = self.params[..self.config.layers]
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        let mut diag = ForwardDiagnostics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut records = Vec::new();
        self.embed_on_tape(&mut tape, x, &ws, ctx, false, &mut rng, &mut diag, Some(&mut records))?;
        Ok(records)
    }

    /// Class logits `H W_oᵀ` on the tape; `vars` are all bound parameters.
    #[allow(clippy::too_many_arguments)]
    pub fn logits_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        features: Var,
        vars: &[Var],
        ctx: &GraphContext,
        training: bool,
        rng: &mut R,
        diagnostics: &mut ForwardDiagnostics,
    ) -> Result<Var> {
        if self.num_classes.is_none() {
            return Err(Error::InvalidConfig("model has no classification head".into()));
        }
        let layers = self.config.layers;
        let h = self.embed_on_tape(tape, features, &vars[..layers], ctx, training, rng, diagnostics, None)?;
        let wt = tape.transpose(vars[layers]);
        tape.matmul(h, wt)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict_proba(&self, features: &Array2<f64>, ctx: &GraphContext) -> Result<Tensor> {
        let head = self
            .head_weight()
            .ok_or_else(|| Error::InvalidConfig("model has no classification head".into()))?;
        let h = self.forward(features, ctx)?;
        classify(&h, &head.value)
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise `softmax(W_o h_i)`; `head` is C×D.
pub fn classify(embeddings: &Tensor, head: &Tensor) -> Result<Tensor> {
    if embeddings.ncols() != head.ncols() {
        return Err(Error::Contract(format!(
            "embeddings have width {}, head expects {}",
            embeddings.ncols(),
            head.ncols()
        )));
    }
    let logits = embeddings.dot(&head.t());
    Ok(softmax_rows(&logits))
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let p = softmax_row(row.as_slice().expect("standard layout"));
        row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn similarity(u: &[f64], v: &[f64], kind: Similarity) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    match kind {
        Similarity::Dot => dot,
        Similarity::Cosine => {
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                dot / (nu * nv)
            }
        }
    }
}

/// Edge probability `σ(sim(h_u, h_v))`.
pub fn score_link(u: &[f64], v: &[f64], kind: Similarity) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!(
            "embedding lengths {} and {} differ",
            u.len(),
            v.len()
        )));
    }
    Ok(sigmoid(similarity(u, v, kind)))
}

/// Edge logits `sim(h_u, h_v)` on the tape for a batch of pairs (m×1).
pub fn link_logits_on_tape(tape: &mut Tape, h: Var, pairs: &[(usize, usize)], kind: Similarity) -> Result<Var> {
    let us = Rc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let vs = Rc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let h = match kind {
        Similarity::Dot => h,
        Similarity::Cosine => tape.row_normalize(h),
    };
    let hu = tape.gather_rows(h, us)?;
    let hv = tape.gather_rows(h, vs)?;
    let prod = tape.mul(hu, hv)?;
    Ok(tape.row_sum(prod))
}

/// Two-layer perceptron on node features alone: the graph-free reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    pub hidden: usize,
    pub dropout: f64,
    params: Vec<Parameter>,
}

impl MlpClassifier {
    pub fn new(input_dim: usize, hidden: usize, num_classes: usize, dropout: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig("MLP dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {dropout}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            Parameter::new("fc1.weight", glorot_uniform(hidden, input_dim, &mut rng)),
            Parameter::new("fc1.bias", Tensor::zeros((1, hidden))),
            Parameter::new("fc2.weight", glorot_uniform(num_classes, hidden, &mut rng)),
            Parameter::new("fc2.bias", Tensor::zeros((1, num_classes))),
        ];
        Ok(Self {
            hidden,
            dropout,
            params,
        })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn logits_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: &[Var],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let w1 = tape.transpose(vars[0]);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_vector(h, vars[1])?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout, training, rng)?;
        let w2 = tape.transpose(vars[2]);
        let out = tape.matmul(h, w2)?;
        tape.add_row_vector(out, vars[3])
    }

    pub fn predict_proba(&self, features: &Array2<f64>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.logits_on_tape(&mut tape, x, &vars, false, &mut rng)?;
        Ok(softmax_rows(tape.value(logits)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smoothing::{smooth, AggregatorKind};
    use ndarray::array;

    fn pair() -> (Array2<f64>, GraphContext) {
        let g = Graph::build_csr(&[(0, 1)], 2, true, true).unwrap();
        (array![[1.0, 0.0], [0.0, 1.0]], GraphContext::new(&g))
    }

    fn identity_model(config: ModelConfig) -> GeoModel {
        let d = config.head_dim;
        let mut m = GeoModel::new(config, d, None).unwrap();
        m.layer_weight_mut(0).value = Tensor::eye(d);
        m
    }

    fn single_head(tau: f64, alpha: f64) -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 1,
            head_dim: 2,
            tau,
            alpha,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn two_node_worked_example() {
        let (x, ctx) = pair();
        let out = identity_model(single_head(1.0, 1.0)).forward(&x, &ctx).unwrap();
        assert!((out[[0, 0]] - 0.9121).abs() < 1e-4, "{out}");
        assert!((out[[0, 1]] - 0.4100).abs() < 1e-4, "{out}");
    }

    #[test]
    fn zero_step_returns_normalized_projection() {
        let (_, ctx) = pair();
        let x = array![[3.0, 4.0], [0.0, 2.0]];
        let out = identity_model(single_head(1.0, 0.0)).forward(&x, &ctx).unwrap();
        assert!(out.abs_diff_eq(&array![[0.6, 0.8], [0.0, 1.0]], 1e-15));
    }

    #[test]
    fn no_geodesic_uniform_is_mean() {
        let (x, ctx) = pair();
        let mut cfg = single_head(1.0, 1.0);
        cfg.ablation.no_geodesic = true;
        cfg.ablation.no_cos = true;
        let out = identity_model(cfg).forward(&x, &ctx).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn full_ablation_matches_mean_smoothing() {
        let g = Graph::build_csr(&[(0, 1), (1, 2), (2, 3), (0, 2)], 5, true, true).unwrap();
        let ctx = GraphContext::new(&g);
        let x = array![
            [1.0, -2.0, 0.5],
            [0.3, 0.0, 1.0],
            [2.0, 1.0, 1.0],
            [-1.0, 0.2, 0.0],
            [0.0, 0.0, 0.0]
        ];
        let mut cfg = single_head(1.0, 1.0);
        cfg.head_dim = 3;
        cfg.ablation = Ablation::all();
        let out = identity_model(cfg).forward(&x, &ctx).unwrap();
        let mean = smooth(&x, &g, AggregatorKind::Mean, 1).unwrap();
        assert!(out.abs_diff_eq(&mean.snapshots[1], 1e-12));
    }

    #[test]
    fn multi_head_blocks_are_unit_norm() {
        let g = Graph::build_csr(&[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 4, true, true).unwrap();
        let ctx = GraphContext::new(&g);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.7).sin());
        let cfg = ModelConfig {
            layers: 2,
            heads: 3,
            head_dim: 4,
            dropout: 0.0,
            ..Default::default()
        };
        let m = GeoModel::new(cfg, 5, None).unwrap();
        let records = m.forward_trace(&x, &ctx).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[1].input, records[0].output);
        for rec in &records {
            for row in rec.output.rows() {
                for block in row.as_slice().unwrap().chunks(4) {
                    let n: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let (x, ctx) = pair();
        let cfg = ModelConfig {
            heads: 2,
            head_dim: 3,
            ..single_head(0.5, 0.7)
        };
        let a = GeoModel::new(cfg.clone(), 2, Some(3)).unwrap();
        let b = GeoModel::new(cfg, 2, Some(3)).unwrap();
        assert_eq!(a, b);
        let (pa, pb) = (a.predict_proba(&x, &ctx).unwrap(), b.predict_proba(&x, &ctx).unwrap());
        assert_eq!(pa, pb);
    }

    #[test]
    fn zero_projection_row_falls_back() {
        let (_, ctx) = pair();
        let x = array![[0.0, 0.0], [0.0, 1.0]];
        let (out, diag) = identity_model(single_head(1.0, 1.0))
            .forward_with_diagnostics(&x, &ctx)
            .unwrap();
        assert_eq!(diag.degenerate_rows, 1);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn classify_examples() {
        let h = array![[1.0, 2.0], [-3.0, 0.5]];
        let p = classify(&h, &Tensor::zeros((4, 2))).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax_rows(&array![[3f64.ln(), 0.0]]);
        assert!((p[[0, 0]] - 0.75).abs() < 1e-15 && (p[[0, 1]] - 0.25).abs() < 1e-15);

        let shifted = softmax_rows(&array![[3f64.ln() + 100.0, 100.0]]);
        assert!(shifted.abs_diff_eq(&p, 1e-12));

        let p = classify(&h, &array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn link_score_examples() {
        assert_eq!(score_link(&[1.0, 0.0], &[0.0, 1.0], Similarity::Dot).unwrap(), 0.5);
        let s = score_link(&[0.6, 0.8], &[0.6, 0.8], Similarity::Cosine).unwrap();
        assert!((s - 0.7310585786300049).abs() < 1e-12);
        let (u, v) = ([0.3, -1.2, 2.0], [1.5, 0.1, -0.4]);
        for kind in [Similarity::Dot, Similarity::Cosine] {
            assert_eq!(score_link(&u, &v, kind).unwrap(), score_link(&v, &u, kind).unwrap());
        }
        assert!(score_link(&[1.0], &[1.0, 2.0], Similarity::Dot).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            head_dim: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            alpha: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            dropout: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
