//! Semantic drift of aggregated features, measured against local tangent
//! subspaces fitted in the original feature space.
//!
//! For every node the k most cosine-similar nodes of the *reference*
//! features are found, a rank-r PCA of those neighbors gives a local
//! tangent subspace, and the current representation of the node is
//! scored by its normalized reconstruction error
//! `D = ‖z - VVᵀz‖² / (‖z‖² + ε)` with `z = h - mean`.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftConfig {
    pub k: usize,
    pub r: usize,
    pub epsilon: f64,
    pub include_self_in_knn: bool,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            k: 15,
            r: 8,
            epsilon: 1e-8,
            include_self_in_knn: false,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self, n: usize, d: usize) -> Result<()> {
        let max_k = if self.include_self_in_knn {
            n
        } else {
            n.saturating_sub(1)
        };
        if self.r < 1 || self.r >= self.k.min(d) {
            return Err(Error::InvalidConfig(format!(
                "rank r={} must satisfy 1 <= r < min(k={}, d={d})",
                self.r, self.k
            )));
        }
        if self.k > max_k {
            return Err(Error::InvalidConfig(format!(
                "k={} exceeds the {max_k} available neighbors",
                self.k
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Mean and orthonormal basis of one node's local tangent subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTangentModel {
    pub owner: usize,
    pub mean: Vec<f64>,
    /// d×r, orthonormal columns.
    pub basis: Array2<f64>,
}

impl LocalTangentModel {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriftScore {
    pub drift: f64,
    pub residual_sq: f64,
    pub centered_sq: f64,
}

fn unit_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!(
                "node {i} has a zero-norm reference feature row"
            )));
        }
        row /= n;
    }
    Ok(out)
}

/// For each node, the `k` ids with the largest cosine similarity in
/// `reference`, ordered by similarity then id. Self is excluded unless the
/// config includes it.
pub fn knn_reference(reference: &Array2<f64>, config: &DriftConfig) -> Result<Vec<Vec<usize>>> {
    let n = reference.nrows();
    let max_k = if config.include_self_in_knn {
        n
    } else {
        n.saturating_sub(1)
    };
    if config.k > max_k {
        return Err(Error::InvalidConfig(format!(
            "k={} exceeds the {max_k} available neighbors",
            config.k
        )));
    }
    let unit = unit_rows(reference)?;
    let table = (0..n)
        .into_par_iter()
        .map(|i| {
            let ui = unit.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| config.include_self_in_knn || j != i)
                .map(|j| (ui.dot(&unit.row(j)), j))
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            cand.truncate(config.k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(table)
}

/// Rank-`r` PCA of the neighbor rows via SVD of the centered matrix.
/// Basis columns are signed so their largest-magnitude entry is positive.
pub fn fit_local_tangent(
    reference: &Array2<f64>,
    neighbors: &[usize],
    r: usize,
    owner: usize,
) -> Result<LocalTangentModel> {
    let d = reference.ncols();
    let k = neighbors.len();
    if k < r + 1 {
        return Err(Error::InvalidConfig(format!(
            "{k} neighbors cannot support a rank-{r} fit"
        )));
    }
    let mut mean = vec![0.0; d];
    for &j in neighbors {
        for (m, x) in mean.iter_mut().zip(reference.row(j)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);

    let centered = DMatrix::from_fn(k, d, |a, b| reference[[neighbors[a], b]] - mean[b]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let top = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    let tol = top * k.max(d) as f64 * f64::EPSILON;
    let achieved = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol && top > 0.0)
        .count();
    if achieved < r {
        return Err(Error::RankDeficient { achieved, requested: r });
    }

    let mut basis = Array2::zeros((d, r));
    for (c, &i) in order.iter().take(r).enumerate() {
        let row = v_t.row(i);
        let pivot = (0..d).fold(0, |best, b| if row[b].abs() > row[best].abs() { b } else { best });
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for b in 0..d {
            basis[[b, c]] = sign * row[b];
        }
    }
    Ok(LocalTangentModel { owner, mean, basis })
}

/// Normalized reconstruction error of `h` against `model`.
pub fn drift_score(h: ArrayView1<f64>, model: &LocalTangentModel, epsilon: f64) -> DriftScore {
    let z: Vec<f64> = h.iter().zip(&model.mean).map(|(a, m)| a - m).collect();
    let coeffs: Vec<f64> = model
        .basis
        .columns()
        .into_iter()
        .map(|col| col.iter().zip(&z).map(|(v, zi)| v * zi).sum())
        .collect();
    let mut residual_sq = 0.0;
    for (b, zb) in z.iter().enumerate() {
        let recon: f64 = coeffs.iter().enumerate().map(|(c, w)| model.basis[[b, c]] * w).sum();
        residual_sq += (zb - recon).powi(2);
    }
    let centered_sq: f64 = z.iter().map(|x| x * x).sum();
    // Pythagoras bounds the residual by the centered norm.
    let residual_sq = residual_sq.min(centered_sq);
    DriftScore {
        drift: residual_sq / (centered_sq + epsilon),
        residual_sq,
        centered_sq,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub mean_drift: f64,
    pub k: usize,
    pub r: usize,
    pub epsilon: f64,
    pub layer: usize,
    pub excluded_nodes: Vec<usize>,
    /// Nodes scored with a rank lowered to what their neighborhood supports.
    pub reduced_rank_nodes: Vec<usize>,
    /// `None` for excluded nodes.
    pub per_node: Vec<Option<f64>>,
}

impl DriftReport {
    pub fn config(&self, include_self_in_knn: bool) -> DriftConfig {
        DriftConfig {
            k: self.k,
            r: self.r,
            epsilon: self.epsilon,
            include_self_in_knn,
        }
    }

    /// `node_id,drift` rows; excluded nodes have an empty drift field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("node_id,drift\n");
        for (i, d) in self.per_node.iter().enumerate() {
            match d {
                Some(v) => out.push_str(&format!("{i},{v}\n")),
                None => out.push_str(&format!("{i},\n")),
            }
        }
        out
    }
}

/// kNN table and tangent models of the reference features, fitted once
/// and reused to score any number of layers.
#[derive(Clone, Debug)]
pub struct DriftReference {
    config: DriftConfig,
    dim: usize,
    neighbors: Vec<Vec<usize>>,
    models: Vec<Option<LocalTangentModel>>,
    reduced: Vec<usize>,
}

impl DriftReference {
    pub fn fit(reference: &Array2<f64>, config: DriftConfig) -> Result<Self> {
        let (n, d) = reference.dim();
        config.validate(n, d)?;
        let neighbors = knn_reference(reference, &config)?;
        let fitted: Vec<(Option<LocalTangentModel>, bool)> = neighbors
            .par_iter()
            .enumerate()
            .map(|(i, nbrs)| match fit_local_tangent(reference, nbrs, config.r, i) {
                Ok(m) => (Some(m), false),
                Err(Error::RankDeficient { achieved, .. }) if achieved >= 1 => {
                    (fit_local_tangent(reference, nbrs, achieved, i).ok(), true)
                }
                Err(_) => (None, false),
            })
            .collect();
        let reduced = fitted
            .iter()
            .enumerate()
            .filter(|(_, (m, r))| *r && m.is_some())
            .map(|(i, _)| i)
            .collect();
        let models = fitted.into_iter().map(|(m, _)| m).collect();
        Ok(Self {
            config,
            dim: d,
            neighbors,
            models,
            reduced,
        })
    }

    pub fn config(&self) -> &DriftConfig {
        &self.config
    }

    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn model(&self, i: usize) -> Option<&LocalTangentModel> {
        self.models[i].as_ref()
    }

    pub fn score(&self, current: &Array2<f64>, layer: usize) -> Result<DriftReport> {
        let (n, d) = current.dim();
        if n != self.models.len() {
            return Err(Error::Validation(format!(
                "current features have {n} rows, reference has {}",
                self.models.len()
            )));
        }
        if d != self.dim {
            return Err(Error::Validation(format!(
                "current feature dimension {d} differs from reference dimension {}",
                self.dim
            )));
        }
        let per_node: Vec<Option<f64>> = self
            .models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                m.as_ref()
                    .map(|m| drift_score(current.row(i), m, self.config.epsilon).drift)
            })
            .collect();
        let scored: Vec<f64> = per_node.iter().flatten().copied().collect();
        if scored.is_empty() {
            return Err(Error::InvalidConfig("no node could be scored".into()));
        }
        if let Some(i) = per_node.iter().position(|d| d.is_some_and(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("drift of node {i} is not finite")));
        }
        let mean_drift = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok(DriftReport {
            mean_drift,
            k: self.config.k,
            r: self.config.r,
            epsilon: self.config.epsilon,
            layer,
            excluded_nodes: per_node
                .iter()
                .enumerate()
                .filter(|(_, d)| d.is_none())
                .map(|(i, _)| i)
                .collect(),
            reduced_rank_nodes: self.reduced.clone(),
            per_node,
        })
    }
}

/// One-shot drift of `current` against tangents fitted on `reference`.
pub fn drift_report(
    current: &Array2<f64>,
    reference: &Array2<f64>,
    config: DriftConfig,
    layer: usize,
) -> Result<DriftReport> {
    if current.nrows() != reference.nrows() {
        return Err(Error::Validation(format!(
            "current has {} rows, reference has {}",
            current.nrows(),
            reference.nrows()
        )));
    }
    DriftReference::fit(reference, config)?.score(current, layer)
}
