//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(d);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| (0..d).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[[p, q]] * a[[p, q]])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[[i, i]]).collect(), v)
}

/// Dense reimplementation of per-node drift: cosine kNN by full sort,
/// explicit centering, eigenvectors of the scatter matrix and a d×d
/// projector.
pub fn brute_force_drift(current: &Array2<f64>, reference: &Array2<f64>, k: usize, r: usize, eps: f64) -> Vec<f64> {
    let (n, d) = reference.dim();
    let norms: Vec<f64> = reference.rows().into_iter().map(|row| row.dot(&row).sqrt()).collect();
    (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (reference.row(i).dot(&reference.row(j)) / (norms[i] * norms[j]), j))
                .collect();
            cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let nbrs: Vec<usize> = cand[..k].iter().map(|c| c.1).collect();

            let mut mean = vec![0.0; d];
            for &j in &nbrs {
                for b in 0..d {
                    mean[b] += reference[[j, b]] / k as f64;
                }
            }
            let z = Array2::from_shape_fn((k, d), |(a, b)| reference[[nbrs[a], b]] - mean[b]);
            let (vals, vecs) = jacobi_eigen(&z.t().dot(&z));
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
            let mut proj = Array2::<f64>::zeros((d, d));
            for &c in &order[..r] {
                let col = vecs.column(c);
                for a in 0..d {
                    for b in 0..d {
                        proj[[a, b]] += col[a] * col[b];
                    }
                }
            }
            let h: Vec<f64> = (0..d).map(|b| current[[i, b]] - mean[b]).collect();
            let mut resid = 0.0;
            for a in 0..d {
                let ph: f64 = (0..d).map(|b| proj[[a, b]] * h[b]).sum();
                resid += (h[a] - ph).powi(2);
            }
            let total: f64 = h.iter().map(|x| x * x).sum();
            resid / (total + eps)
        })
        .collect()
}

/// Random orthogonal matrix from Gram–Schmidt on Gaussian columns.
pub fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let g = gaussian(d, d, seed);
    let mut q = Array2::<f64>::zeros((d, d));
    for c in 0..d {
        let mut v = g.column(c).to_owned();
        for p in 0..c {
            let proj = v.dot(&q.column(p));
            v -= &(&q.column(p) * proj);
        }
        let n = v.dot(&v).sqrt();
        q.column_mut(c).assign(&(v / n));
    }
    q
}

/// Random edge list on `n` nodes with edge probability `p`.
pub fn random_edges(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}
