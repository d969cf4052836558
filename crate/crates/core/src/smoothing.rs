//! Parameter-free layered propagation with four aggregators, recording a
//! feature snapshot after every layer.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sphere::{self, LayerGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AggregatorKind {
    Mean,
    Laplacian,
    Attention { tau: f64 },
    Geodesic { tau: f64, alpha: f64 },
}

impl AggregatorKind {
    pub const DEFAULT_TAU: f64 = 1.0;
    pub const DEFAULT_ALPHA: f64 = 1.0;

    pub fn attention() -> Self {
        Self::Attention { tau: Self::DEFAULT_TAU }
    }

    pub fn geodesic() -> Self {
        Self::Geodesic {
            tau: Self::DEFAULT_TAU,
            alpha: Self::DEFAULT_ALPHA,
        }
    }

    /// The four aggregators with default settings.
    pub fn all_defaults() -> [Self; 4] {
        [Self::Mean, Self::Laplacian, Self::attention(), Self::geodesic()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Laplacian => "laplacian",
            Self::Attention { .. } => "attention",
            Self::Geodesic { .. } => "geodesic",
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Self::Geodesic { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Attention { tau } | Self::Geodesic { tau, .. } if !(tau > 0.0) => {
                Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")))
            }
            Self::Geodesic { alpha, .. } if !(alpha >= 0.0) => Err(Error::InvalidConfig(format!(
                "step size must be non-negative, got {alpha}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Self::Mean),
            "laplacian" => Ok(Self::Laplacian),
            "attention" => Ok(Self::attention()),
            "geodesic" => Ok(Self::geodesic()),
            other => Err(Error::Validation(format!("unknown aggregator '{other}'"))),
        }
    }
}

/// Snapshots `0..=L`; snapshot 0 is the input (row-normalized for the
/// geodesic aggregator).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub kind: AggregatorKind,
    pub snapshots: Vec<Array2<f64>>,
    /// Near-antipodal neighbor pairs clamped by the geodesic aggregator.
    pub antipodal_pairs: usize,
}

impl LayerTrace {
    pub fn layers(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn last(&self) -> &Array2<f64> {
        self.snapshots.last().expect("trace always holds the input snapshot")
    }
}

pub fn smooth(features: &Array2<f64>, graph: &Graph, kind: AggregatorKind, layers: usize) -> Result<LayerTrace> {
    kind.validate()?;
    if graph.num_nodes() != features.nrows() {
        return Err(Error::Validation(format!(
            "graph has {} nodes but features have {} rows",
            graph.num_nodes(),
            features.nrows()
        )));
    }
    if layers == 0 {
        return Err(Error::InvalidConfig("smoothing needs at least one layer".into()));
    }

    let geometry = LayerGeometry::new();
    let start = match kind {
        AggregatorKind::Geodesic { .. } => normalize_rows(features)?,
        _ => features.clone(),
    };
    let mut snapshots = vec![start];
    for _ in 0..layers {
        let prev = snapshots.last().unwrap();
        let next = match kind {
            AggregatorKind::Mean => mean_layer(prev, graph),
            AggregatorKind::Laplacian => laplacian_layer(prev, graph),
            AggregatorKind::Attention { tau } => attention_layer(prev, graph, tau)?,
            AggregatorKind::Geodesic { tau, alpha } => geodesic_layer(prev, graph, tau, alpha, &geometry),
        };
        snapshots.push(next);
    }
    Ok(LayerTrace {
        kind,
        snapshots,
        antipodal_pairs: geometry.antipodal_count(),
    })
}

fn normalize_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n >= sphere::MIN_NORM) {
            return Err(Error::Degenerate(format!("node {i} has a zero-norm feature row")));
        }
        row /= n;
    }
    Ok(out)
}

fn assemble(n: usize, d: usize, rows: Vec<Vec<f64>>) -> Array2<f64> {
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("row lengths are uniform")
}

/// Per-node weighted sum `Σ w_ij h_j`; `weights(i)` returns one weight
/// per neighbor in CSR order.
fn weighted_layer<F>(h: &Array2<f64>, graph: &Graph, weights: F) -> Array2<f64>
where
    F: Fn(usize) -> Vec<f64> + Sync,
{
    let (n, d) = h.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nbrs = graph.neighbors(i);
            if nbrs.is_empty() {
                return h.row(i).to_vec();
            }
            let w = weights(i);
            let mut acc = vec![0.0; d];
            for (&j, wj) in nbrs.iter().zip(w) {
                for (a, x) in acc.iter_mut().zip(h.row(j)) {
                    *a += wj * x;
                }
            }
            acc
        })
        .collect();
    assemble(n, d, rows)
}

fn mean_layer(h: &Array2<f64>, graph: &Graph) -> Array2<f64> {
    weighted_layer(h, graph, |i| {
        let k = graph.degree(i);
        vec![1.0 / k as f64; k]
    })
}

/// `D^{-1/2} (A + I) D^{-1/2} h`; self-loops are added when missing.
fn laplacian_layer(h: &Array2<f64>, graph: &Graph) -> Array2<f64> {
    let n = graph.num_nodes();
    let (n_rows, d) = h.dim();
    debug_assert_eq!(n, n_rows);
    let augmented: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut l = graph.neighbors(i).to_vec();
            if let Err(pos) = l.binary_search(&i) {
                l.insert(pos, i);
            }
            l
        })
        .collect();
    let inv_sqrt: Vec<f64> = augmented.iter().map(|l| 1.0 / (l.len() as f64).sqrt()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; d];
            for &j in &augmented[i] {
                let w = inv_sqrt[i] * inv_sqrt[j];
                for (a, x) in acc.iter_mut().zip(h.row(j)) {
                    *a += w * x;
                }
            }
            acc
        })
        .collect();
    assemble(n, d, rows)
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Neighbor weights `softmax_j(cos(h_i, h_j) / τ)` in CSR order.
pub fn cosine_attention_weights(h: &Array2<f64>, graph: &Graph, i: usize, tau: f64) -> Vec<f64> {
    let hi = h.row(i);
    let ni = hi.dot(&hi).sqrt();
    let scores: Vec<f64> = graph
        .neighbors(i)
        .iter()
        .map(|&j| {
            let hj = h.row(j);
            hi.dot(&hj) / (ni * hj.dot(&hj).sqrt()) / tau
        })
        .collect();
    softmax(&scores)
}

fn attention_layer(h: &Array2<f64>, graph: &Graph, tau: f64) -> Result<Array2<f64>> {
    if let Some(i) = (0..h.nrows()).find(|&i| !(h.row(i).dot(&h.row(i)).sqrt() >= sphere::MIN_NORM)) {
        return Err(Error::Degenerate(format!("node {i} has a zero-norm feature row")));
    }
    Ok(weighted_layer(h, graph, |i| cosine_attention_weights(h, graph, i, tau)))
}

/// One geodesic layer over unit rows: clamped-cosine attention, tangent
/// aggregation of log maps, exp map with step `alpha`.
fn geodesic_layer(x: &Array2<f64>, graph: &Graph, tau: f64, alpha: f64, geometry: &LayerGeometry) -> Array2<f64> {
    let (n, d) = x.dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i).to_vec();
            let (tangents, cosines): (Vec<Vec<f64>>, Vec<f64>) = graph
                .neighbors(i)
                .iter()
                .map(|&j| geometry.log_map(&xi, x.row(j).as_slice().expect("standard layout"), i == j))
                .unzip();
            if tangents.is_empty() {
                return xi;
            }
            let scores: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
            let weights = softmax(&scores);
            let mut u = vec![0.0; d];
            for (v, w) in tangents.iter().zip(&weights) {
                for (ui, vi) in u.iter_mut().zip(v) {
                    *ui += w * vi;
                }
            }
            sphere::exp_map_raw(&xi, &u, alpha)
        })
        .collect();
    assemble(n, d, rows)
}
