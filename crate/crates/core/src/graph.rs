//! CSR adjacency, self-loop policy and link-prediction edge splits.

use std::collections::HashSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Immutable compressed-sparse-row adjacency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    has_self_loops: bool,
}

impl Graph {
    /// Builds a graph from `(u, v)` pairs. Duplicates are removed and each
    /// neighbor list is sorted ascending. With `add_self_loops`, every node
    /// lists itself exactly once.
    pub fn build_csr(edges: &[(usize, usize)], n: usize, add_self_loops: bool, symmetrize: bool) -> Result<Self> {
        if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::Validation(format!(
                "edge ({u}, {v}) references a node outside 0..{n}"
            )));
        }
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            lists[u].push(v);
            if symmetrize {
                lists[v].push(u);
            }
        }
        if add_self_loops {
            for (i, l) in lists.iter_mut().enumerate() {
                l.push(i);
            }
        }
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for mut l in lists {
            l.sort_unstable();
            l.dedup();
            col_indices.extend(l);
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n,
            row_offsets,
            col_indices,
            has_self_loops: add_self_loops,
        })
    }

    /// Symmetrized graph with self-loops, the default for every aggregator.
    pub fn undirected_with_self_loops(edges: &[(usize, usize)], n: usize) -> Result<Self> {
        Self::build_csr(edges, n, true, true)
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of stored (directed) adjacency entries, self-loops included.
    pub fn num_entries(&self) -> usize {
        self.col_indices.len()
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn self_loop_count(&self) -> usize {
        (0..self.n).filter(|&i| self.has_edge(i, i)).count()
    }

    /// Every stored entry as `(row, col)` in CSR order.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| self.neighbors(i).iter().map(move |&j| (i, j)))
            .collect()
    }

    /// Undirected edges `(u, v)` with `u < v`, self-loops excluded.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.entries().into_iter().filter(|&(u, v)| u < v).collect()
    }

    /// Edge arrays for message passing: the center (row) and neighbor
    /// (column) of every entry, plus the CSR offsets delimiting each
    /// center's segment.
    pub fn message_index(&self) -> MessageIndex {
        let mut centers = Vec::with_capacity(self.col_indices.len());
        for i in 0..self.n {
            centers.extend(std::iter::repeat_n(i, self.degree(i)));
        }
        let self_mask = centers
            .iter()
            .zip(&self.col_indices)
            .map(|(c, j)| if c == j { 0.0 } else { 1.0 })
            .collect();
        MessageIndex {
            centers: Rc::new(centers),
            neighbors: Rc::new(self.col_indices.clone()),
            offsets: Rc::new(self.row_offsets.clone()),
            non_self: self_mask,
        }
    }
}

/// Per-entry index arrays shared by tape operations.
#[derive(Clone, Debug)]
pub struct MessageIndex {
    pub centers: Rc<Vec<usize>>,
    pub neighbors: Rc<Vec<usize>>,
    pub offsets: Rc<Vec<usize>>,
    /// 0 for self-loop entries, 1 otherwise.
    pub non_self: Vec<f64>,
}

/// Positive and negative pairs for link prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeSplit {
    pub n: usize,
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub val_negatives: Vec<(usize, usize)>,
    pub test_negatives: Vec<(usize, usize)>,
    pub neg_per_pos: usize,
    pub seed: u64,
    all_positive: HashSet<(usize, usize)>,
}

fn key(u: usize, v: usize) -> (usize, usize) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl EdgeSplit {
    /// Message-passing graph over the training positives only, symmetrized
    /// and with self-loops.
    pub fn train_graph(&self) -> Result<Graph> {
        Graph::undirected_with_self_loops(&self.train, self.n)
    }

    pub fn is_positive(&self, u: usize, v: usize) -> bool {
        self.all_positive.contains(&key(u, v))
    }

    /// Draws `count` uniform non-edges (no self-pairs) by rejection.
    pub fn sample_negatives<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
        sample_negatives(self.n, &self.all_positive, count, rng)
    }
}

fn sample_negatives<R: Rng + ?Sized>(
    n: usize,
    positives: &HashSet<(usize, usize)>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let budget = 100 * count.max(1);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts >= budget || n < 2 {
            return Err(Error::SamplingExhausted {
                needed: count,
                found: out.len(),
                attempts,
            });
        }
        attempts += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v || positives.contains(&key(u, v)) {
            continue;
        }
        out.push((u, v));
    }
    Ok(out)
}

/// Shuffles the undirected non-self edges with a seeded generator and
/// partitions them by `ratios` (train, val, test). Validation and test
/// positives each get `neg_per_pos` sampled negatives, drawn against the
/// full edge set.
pub fn split_edges(graph: &Graph, ratios: (f64, f64, f64), neg_per_pos: usize, seed: u64) -> Result<EdgeSplit> {
    let (rt, rv, rs) = ratios;
    if [rt, rv, rs].iter().any(|r| !(0.0..=1.0).contains(r)) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut edges = graph.undirected_edges();
    let n = graph.num_nodes();
    let non_edges = n * n.saturating_sub(1) / 2 - edges.len();
    if neg_per_pos > 0 && non_edges == 0 {
        return Err(Error::SamplingExhausted {
            needed: neg_per_pos,
            found: 0,
            attempts: 0,
        });
    }
    if edges.len() < 10 {
        return Err(Error::Validation(format!(
            "edge split needs at least 10 edges, graph has {}",
            edges.len()
        )));
    }
    let all_positive: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);

    let m = edges.len();
    let n_val = (rv * m as f64).round() as usize;
    let n_test = (rs * m as f64).round() as usize;
    let n_train = m - n_val - n_test;
    let test = edges.split_off(n_train + n_val);
    let val = edges.split_off(n_train);
    let train = edges;

    let val_negatives = sample_negatives(n, &all_positive, val.len() * neg_per_pos, &mut rng)?;
    let test_negatives = sample_negatives(n, &all_positive, test.len() * neg_per_pos, &mut rng)?;

    Ok(EdgeSplit {
        n,
        train,
        val,
        test,
        val_negatives,
        test_negatives,
        neg_per_pos,
        seed,
        all_positive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_edge_with_loops() {
        let g = Graph::build_csr(&[(0, 1)], 2, true, true).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[0, 1]);
    }

    #[test]
    fn isolated_nodes_only_see_themselves() {
        let g = Graph::build_csr(&[], 3, true, true).unwrap();
        for i in 0..3 {
            assert_eq!(g.neighbors(i), &[i]);
        }
        assert_eq!(g.self_loop_count(), 3);
    }

    #[test]
    fn triangle_degrees() {
        let g = Graph::build_csr(&[(0, 1), (1, 2), (2, 0)], 3, false, true).unwrap();
        for i in 0..3 {
            assert_eq!(g.degree(i), 2);
        }
        // Brute-force adjacency check.
        for u in 0..3 {
            for v in 0..3 {
                assert_eq!(g.has_edge(u, v), u != v);
            }
        }
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        assert!(matches!(
            Graph::build_csr(&[(0, 5)], 3, false, false),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicates_are_removed() {
        let g = Graph::build_csr(&[(0, 1), (0, 1), (1, 0)], 2, false, true).unwrap();
        assert_eq!(g.num_entries(), 2);
    }

    fn ring(n: usize) -> Graph {
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Graph::build_csr(&edges, n, true, true).unwrap()
    }

    #[test]
    fn split_sizes_for_ten_edges() {
        let split = split_edges(&ring(10), (0.6, 0.2, 0.2), 1, 7).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (6, 2, 2));
    }

    #[test]
    fn complete_graph_exhausts_sampling() {
        let mut edges = Vec::new();
        for u in 0..4 {
            for v in u + 1..4 {
                edges.push((u, v));
            }
        }
        let k4 = Graph::build_csr(&edges, 4, true, true).unwrap();
        assert!(matches!(
            split_edges(&k4, (0.6, 0.2, 0.2), 1, 0),
            Err(Error::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn too_few_edges_is_rejected() {
        let path = Graph::build_csr(&[(0, 1), (1, 2), (2, 3)], 6, true, true).unwrap();
        assert!(matches!(
            split_edges(&path, (0.6, 0.2, 0.2), 1, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rejection_budget_is_bounded() {
        // Complete K6: every draw is rejected, so the budget of 100 per
        // requested negative runs out.
        let mut pos = HashSet::new();
        for u in 0..6 {
            for v in u + 1..6 {
                pos.insert((u, v));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_negatives(6, &pos, 3, &mut rng),
            Err(Error::SamplingExhausted { attempts: 300, .. })
        ));
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let g = ring(40);
        let a = split_edges(&g, (0.6, 0.2, 0.2), 3, 11).unwrap();
        let b = split_edges(&g, (0.6, 0.2, 0.2), 3, 11).unwrap();
        assert_eq!(a, b);

        let train: HashSet<_> = a.train.iter().copied().collect();
        let val: HashSet<_> = a.val.iter().copied().collect();
        assert!(a.test.iter().all(|e| !train.contains(e) && !val.contains(e)));
        assert!(a.val.iter().all(|e| !train.contains(e)));
        for &(u, v) in a.val_negatives.iter().chain(&a.test_negatives) {
            assert!(u != v && !g.has_edge(u, v));
        }

        let tg = a.train_graph().unwrap();
        for &(u, v) in a.val.iter().chain(&a.test) {
            assert!(!tg.has_edge(u, v) && !tg.has_edge(v, u));
        }
        assert_eq!(tg.self_loop_count(), 40);
    }

    proptest! {
        #[test]
        fn csr_round_trip(n in 1usize..20, raw in prop::collection::vec((0usize..20, 0usize..20), 0..60), loops: bool) {
            let edges: Vec<_> = raw.into_iter().map(|(u, v)| (u % n, v % n)).collect();
            let g = Graph::build_csr(&edges, n, loops, true).unwrap();
            prop_assert_eq!(*g.row_offsets.last().unwrap(), g.col_indices.len());
            prop_assert!(g.row_offsets.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(g.col_indices.iter().all(|&j| j < n));
            if loops {
                prop_assert_eq!(g.self_loop_count(), n);
            }
            let again = Graph::build_csr(&g.entries(), n, loops, false).unwrap();
            prop_assert_eq!(&again, &g);
        }
    }
}
