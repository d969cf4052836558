//! Seeded spherical mixture with stochastic-block-model edges.
//!
//! Each class has a unit mean direction; a node's feature is the exp map of
//! an isotropic tangent Gaussian (per-coordinate scale `1/√κ`) at its class
//! mean. Same-class pairs link with `p_in`, others with `p_out`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{dot, exp_map_raw};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub kappa: f64,
    pub p_in: f64,
    pub p_out: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 600,
            d: 16,
            classes: 4,
            kappa: 100.0,
            p_in: 0.05,
            p_out: 0.005,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.d < 2 || self.classes < 1 {
            return Err(Error::InvalidConfig(format!(
                "need n >= 1, d >= 2, classes >= 1 (got {}, {}, {})",
                self.n, self.d, self.classes
            )));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.p_in <= self.p_out {
            return Err(Error::InvalidConfig(format!(
                "p_in ({}) must exceed p_out ({})",
                self.p_in, self.p_out
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Undirected edges with `u < v`, in lexicographic order.
    pub edges: Vec<(usize, usize)>,
    /// Unit class mean directions, one row per class.
    pub means: Array2<f64>,
}

fn random_unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Tangent Gaussian at `mu`, mapped onto the sphere.
fn sample_around<R: Rng + ?Sized>(mu: &[f64], kappa: f64, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / kappa.sqrt();
    let g: Vec<f64> = mu
        .iter()
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let c = dot(&g, mu);
    let tangent: Vec<f64> = g.iter().zip(mu).map(|(gi, mi)| gi - c * mi).collect();
    exp_map_raw(mu, &tangent, 1.0)
}

pub fn class_means<R: Rng + ?Sized>(classes: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut means = Array2::zeros((classes, d));
    for mut row in means.rows_mut() {
        row.assign(&ndarray::Array1::from(random_unit(d, rng)));
    }
    means
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec.classes, spec.d, &mut rng);
    let labels: Vec<usize> = (0..spec.n).map(|_| rng.random_range(0..spec.classes)).collect();
    let mut features = Array2::zeros((spec.n, spec.d));
    for (i, &c) in labels.iter().enumerate() {
        let mu = means.row(c).to_vec();
        features
            .row_mut(i)
            .assign(&ndarray::Array1::from(sample_around(&mu, spec.kappa, &mut rng)));
    }
    let mut edges = Vec::new();
    for u in 0..spec.n {
        for v in u + 1..spec.n {
            let p = if labels[u] == labels[v] { spec.p_in } else { spec.p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Ok(SynthData {
        features,
        labels,
        edges,
        means,
    })
}

/// Monte-Carlo accuracy of the nearest-mean rule (by cosine) on fresh
/// samples from the same mixture: how separable the features are without
/// any graph information.
pub fn expected_separability(spec: &SynthSpec, samples: usize) -> Result<f64> {
    spec.validate()?;
    if samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec.classes, spec.d, &mut rng);
    let mut correct = 0usize;
    for _ in 0..samples {
        let c = rng.random_range(0..spec.classes);
        let x = sample_around(&means.row(c).to_vec(), spec.kappa, &mut rng);
        let predicted = (0..spec.classes)
            .map(|k| (k, dot(&x, means.row(k).as_slice().expect("standard layout"))))
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (k, s)| if s > best.1 { (k, s) } else { best },
            )
            .0;
        correct += usize::from(predicted == c);
    }
    Ok(correct as f64 / samples as f64)
}
