//! Sparse undirected graphs in CSR form, normalized operators, homophily
//! metrics, and community detection.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

/// Immutable undirected graph. Both directions of every edge are stored;
/// targets are sorted within each row and contain no duplicates or
/// self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    num_nodes: usize,
    csr_offsets: Vec<usize>,
    csr_targets: Vec<usize>,
    degrees: Vec<usize>,
}

impl Graph {
    /// Build from an edge list. Self-loops are dropped, duplicates (in either
    /// direction) collapse to a single undirected edge, and targets end up
    /// sorted per row, so construction is deterministic.
    pub fn build(edges: &[(usize, usize)], num_nodes: usize) -> Result<Graph> {
        if num_nodes == 0 {
            return Err(Error::invalid("graph must have at least one node"));
        }
        let mut pairs = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                continue;
            }
            pairs.push(if a < b { (a, b) } else { (b, a) });
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut degrees = vec![0usize; num_nodes];
        for &(a, b) in &pairs {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        let mut csr_offsets = Vec::with_capacity(num_nodes + 1);
        let mut acc = 0usize;
        csr_offsets.push(0);
        for &d in &degrees {
            acc += d;
            csr_offsets.push(acc);
        }
        let mut cursor = csr_offsets.clone();
        let mut csr_targets = vec![0usize; acc];
        for &(a, b) in &pairs {
            csr_targets[cursor[a]] = b;
            cursor[a] += 1;
            csr_targets[cursor[b]] = a;
            cursor[b] += 1;
        }
        // Rows were filled from a sorted pair list, so each row is sorted.
        Ok(Graph {
            num_nodes,
            csr_offsets,
            csr_targets,
            degrees,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.csr_targets.len() / 2
    }

    pub fn degree(&self, v: usize) -> usize {
        self.degrees[v]
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.csr_targets[self.csr_offsets[v]..self.csr_offsets[v + 1]]
    }

    /// Undirected edge list with src < dst, sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for v in 0..self.num_nodes {
            for &u in self.neighbors(v) {
                if v < u {
                    out.push((v, u));
                }
            }
        }
        out
    }
}

/// Which sparse operator a [`NormalizedOperator`] applies.
///
/// `RawAdj` is the plain neighbor-sum aggregation used by GIN-style message
/// passing; the other kinds are the degree-normalized operators. On
/// zero-degree rows the adjacency kinds produce 0, `SymLaplacian` produces
/// `x_i`, and `ShiftedLaplacian` produces `-x_i` (the row behaves as the
/// lowest-frequency component).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// D^{-1/2} A D^{-1/2}
    SymAdj,
    /// D^{-1} A
    RowAdj,
    /// I - D^{-1/2} A D^{-1/2}
    SymLaplacian,
    /// The Chebyshev-rescaled Laplacian with lambda_max fixed at 2, which
    /// collapses to -D^{-1/2} A D^{-1/2} on nodes with neighbors.
    ShiftedLaplacian,
    /// A (unnormalized neighbor sum)
    RawAdj,
}

/// A sparse operator bound to a graph. Cheap to clone; applications are
/// deterministic and row-parallelizable.
#[derive(Debug, Clone)]
pub struct NormalizedOperator {
    kind: OperatorKind,
    graph: Arc<Graph>,
}

impl NormalizedOperator {
    pub fn new(graph: Arc<Graph>, kind: OperatorKind) -> Self {
        NormalizedOperator { kind, graph }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    /// Apply the operator to an n x d block of signals.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let g = &*self.graph;
        if x.rows() != g.num_nodes() {
            return Err(Error::shape(format!(
                "operator expects {} rows, got {}",
                g.num_nodes(),
                x.rows()
            )));
        }
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        match self.kind {
            OperatorKind::SymAdj => self.sym_adj_into(x, &mut out, 1.0),
            OperatorKind::RowAdj => {
                for i in 0..g.num_nodes() {
                    let deg = g.degree(i);
                    if deg == 0 {
                        continue;
                    }
                    let inv = 1.0 / deg as f64;
                    let row = out.row_mut(i);
                    for &j in g.neighbors(i) {
                        let xr = &x.data()[j * d..(j + 1) * d];
                        for (o, &v) in row.iter_mut().zip(xr) {
                            *o += inv * v;
                        }
                    }
                }
            }
            OperatorKind::SymLaplacian => {
                self.sym_adj_into(x, &mut out, -1.0);
                for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                    *o += v;
                }
            }
            OperatorKind::ShiftedLaplacian => {
                self.sym_adj_into(x, &mut out, -1.0);
                for i in 0..g.num_nodes() {
                    if g.degree(i) == 0 {
                        let row = out.row_mut(i);
                        for (o, &v) in row.iter_mut().zip(x.row(i)) {
                            *o = -v;
                        }
                    }
                }
            }
            OperatorKind::RawAdj => {
                for i in 0..g.num_nodes() {
                    let row = out.row_mut(i);
                    for &j in g.neighbors(i) {
                        let xr = &x.data()[j * d..(j + 1) * d];
                        for (o, &v) in row.iter_mut().zip(xr) {
                            *o += v;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Apply the transpose, used by reverse-mode differentiation. All kinds
    /// except `RowAdj` are self-adjoint; `RowAdj`'s transpose is A D^{-1}.
    pub fn apply_transpose(&self, x: &Matrix) -> Result<Matrix> {
        match self.kind {
            OperatorKind::RowAdj => {
                let g = &*self.graph;
                if x.rows() != g.num_nodes() {
                    return Err(Error::shape(format!(
                        "operator expects {} rows, got {}",
                        g.num_nodes(),
                        x.rows()
                    )));
                }
                let d = x.cols();
                let mut out = Matrix::zeros(x.rows(), d);
                for i in 0..g.num_nodes() {
                    let row = out.row_mut(i);
                    for &j in g.neighbors(i) {
                        // j has at least one neighbor (namely i).
                        let inv = 1.0 / g.degree(j) as f64;
                        let xr = &x.data()[j * d..(j + 1) * d];
                        for (o, &v) in row.iter_mut().zip(xr) {
                            *o += inv * v;
                        }
                    }
                }
                Ok(out)
            }
            _ => self.apply(x),
        }
    }

    fn sym_adj_into(&self, x: &Matrix, out: &mut Matrix, sign: f64) {
        let g = &*self.graph;
        let d = x.cols();
        let inv_sqrt: Vec<f64> = g
            .degrees
            .iter()
            .map(|&deg| if deg == 0 { 0.0 } else { 1.0 / (deg as f64).sqrt() })
            .collect();
        for i in 0..g.num_nodes() {
            let wi = sign * inv_sqrt[i];
            if wi == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for &j in g.neighbors(i) {
                let w = wi * inv_sqrt[j];
                let xr = &x.data()[j * d..(j + 1) * d];
                for (o, &v) in row.iter_mut().zip(xr) {
                    *o += w * v;
                }
            }
        }
    }
}

/// Per-node class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelVector {
            labels,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fraction of each node's neighbors sharing its label. Zero-degree nodes
/// get NaN so they can be excluded from aggregates instead of biasing them.
pub fn node_homophily(g: &Graph, y: &LabelVector) -> Vec<f64> {
    let labels = y.labels();
    (0..g.num_nodes())
        .map(|v| {
            let deg = g.degree(v);
            if deg == 0 {
                return f64::NAN;
            }
            let same = g
                .neighbors(v)
                .iter()
                .filter(|&&u| labels[u] == labels[v])
                .count();
            same as f64 / deg as f64
        })
        .collect()
}

/// Mean of the finite per-node homophily values.
pub fn graph_homophily(per_node: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &h in per_node {
        if h.is_finite() {
            sum += h;
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Modularity of a partition (community id per node).
pub fn modularity(g: &Graph, membership: &[usize]) -> f64 {
    let m = g.num_edges() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let num_comms = membership.iter().copied().max().map_or(0, |c| c + 1);
    let mut intra = vec![0.0f64; num_comms];
    let mut deg_sum = vec![0.0f64; num_comms];
    for v in 0..g.num_nodes() {
        deg_sum[membership[v]] += g.degree(v) as f64;
        for &u in g.neighbors(v) {
            if v < u && membership[v] == membership[u] {
                intra[membership[v]] += 1.0;
            }
        }
    }
    (0..num_comms)
        .map(|c| intra[c] / m - (deg_sum[c] / (2.0 * m)).powi(2))
        .sum()
}

/// Greedy modularity agglomeration. Starts from singletons and repeatedly
/// merges the community pair with the largest modularity gain until no merge
/// improves modularity. Ties break toward the lexicographically smallest
/// pair, so the result is deterministic; the seed parameter is accepted for
/// interface stability but no randomness is consumed.
///
/// Community ids are compacted and ordered by (size descending, smallest
/// member ascending).
pub fn detect_communities(g: &Graph, _seed: u64) -> Vec<usize> {
    let n = g.num_nodes();
    let m = g.num_edges() as f64;
    let mut parent: Vec<usize> = (0..n).collect();
    if m > 0.0 {
        let mut alive = vec![true; n];
        let mut deg_sum: Vec<f64> = g.degrees().iter().map(|&d| d as f64).collect();
        let mut nbrs: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for v in 0..n {
            for &u in g.neighbors(v) {
                if v < u {
                    *nbrs[v].entry(u).or_insert(0.0) += 1.0;
                    *nbrs[u].entry(v).or_insert(0.0) += 1.0;
                }
            }
        }
        loop {
            let mut best: Option<(f64, usize, usize)> = None;
            for c in 0..n {
                if !alive[c] {
                    continue;
                }
                for (&d, &w) in nbrs[c].range(c + 1..) {
                    let dq = w / m - deg_sum[c] * deg_sum[d] / (2.0 * m * m);
                    if best.map_or(true, |(bq, _, _)| dq > bq) {
                        best = Some((dq, c, d));
                    }
                }
            }
            let Some((dq, c, d)) = best else { break };
            if dq <= 1e-12 {
                break;
            }
            // Merge d into c (c < d by construction of the scan).
            let taken = std::mem::take(&mut nbrs[d]);
            for (nbr, w) in taken {
                if nbr == c {
                    continue;
                }
                *nbrs[c].entry(nbr).or_insert(0.0) += w;
                let map = &mut nbrs[nbr];
                map.remove(&d);
                *map.entry(c).or_insert(0.0) += w;
            }
            nbrs[c].remove(&d);
            deg_sum[c] += deg_sum[d];
            alive[d] = false;
            parent[d] = c;
        }
    }
    // Resolve representatives (short chains; compress fully).
    let mut root = vec![0usize; n];
    for v in 0..n {
        let mut r = v;
        while parent[r] != r {
            r = parent[r];
        }
        root[v] = r;
    }
    // Compact ids ordered by (size desc, smallest member asc).
    let mut size: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for v in 0..n {
        let e = size.entry(root[v]).or_insert((0, v));
        e.0 += 1;
    }
    let mut comms: Vec<(usize, usize, usize)> =
        size.into_iter().map(|(r, (s, first))| (s, first, r)).collect();
    comms.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut id_of: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, &(_, _, r)) in comms.iter().enumerate() {
        id_of.insert(r, idx);
    }
    root.into_iter().map(|r| id_of[&r]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn operator(g: &Graph, kind: OperatorKind) -> NormalizedOperator {
        NormalizedOperator::new(Arc::new(g.clone()), kind)
    }

    #[test]
    fn build_single_edge() {
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        assert_eq!(g.degrees(), &[1, 1]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
    }

    #[test]
    fn build_dedups_and_drops_self_loops() {
        let g = Graph::build(&[(0, 1), (1, 0), (0, 0)], 2).unwrap();
        let clean = Graph::build(&[(0, 1)], 2).unwrap();
        assert_eq!(g, clean);
    }

    #[test]
    fn build_triangle() {
        let g = Graph::build(&[(0, 1), (1, 2), (0, 2)], 3).unwrap();
        assert_eq!(g.degrees(), &[2, 2, 2]);
        assert_eq!(g.num_edges(), 3);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(Graph::build(&[(0, 2)], 2).is_err());
        assert!(Graph::build(&[], 0).is_err());
    }

    #[test]
    fn csr_invariants() {
        let g = Graph::build(&[(0, 3), (1, 3), (2, 0)], 5).unwrap();
        assert_eq!(g.csr_offsets.len(), g.num_nodes() + 1);
        assert_eq!(*g.csr_offsets.last().unwrap(), g.csr_targets.len());
        for v in 0..g.num_nodes() {
            assert!(g.csr_offsets[v] <= g.csr_offsets[v + 1]);
            assert_eq!(g.degree(v), g.neighbors(v).len());
            let nb = g.neighbors(v);
            assert!(nb.windows(2).all(|w| w[0] < w[1]));
            for &u in nb {
                assert!(g.neighbors(u).contains(&v), "missing reverse edge");
            }
        }
    }

    #[test]
    fn sym_adj_swaps_on_k2() {
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let y = operator(&g, OperatorKind::SymAdj).apply(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0]);
    }

    #[test]
    fn sym_laplacian_on_k2() {
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let y = operator(&g, OperatorKind::SymLaplacian).apply(&x).unwrap();
        assert_eq!(y.data(), &[-2.0, 2.0]);
    }

    #[test]
    fn row_adj_fixes_constants_on_triangle() {
        let g = Graph::build(&[(0, 1), (1, 2), (0, 2)], 3).unwrap();
        let x = Matrix::from_vec(3, 1, vec![5.0, 5.0, 5.0]).unwrap();
        let y = operator(&g, OperatorKind::RowAdj).apply(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn isolated_node_conventions() {
        // Node 2 is isolated.
        let g = Graph::build(&[(0, 1)], 3).unwrap();
        let x = Matrix::from_vec(3, 1, vec![1.0, 3.0, 7.0]).unwrap();
        let adj = operator(&g, OperatorKind::SymAdj).apply(&x).unwrap();
        assert_eq!(adj.get(2, 0), 0.0);
        let row = operator(&g, OperatorKind::RowAdj).apply(&x).unwrap();
        assert_eq!(row.get(2, 0), 0.0);
        let lap = operator(&g, OperatorKind::SymLaplacian).apply(&x).unwrap();
        assert_eq!(lap.get(2, 0), 7.0);
        let shifted = operator(&g, OperatorKind::ShiftedLaplacian).apply(&x).unwrap();
        assert_eq!(shifted.get(2, 0), -7.0);
    }

    #[test]
    fn operator_rejects_row_mismatch() {
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let x = Matrix::zeros(3, 1);
        assert!(operator(&g, OperatorKind::SymAdj).apply(&x).is_err());
    }

    /// Dense reference built independently from the edge list.
    fn dense_operator(g: &Graph, kind: OperatorKind) -> Matrix {
        let n = g.num_nodes();
        let mut a = Matrix::zeros(n, n);
        for v in 0..n {
            for &u in g.neighbors(v) {
                a.set(v, u, 1.0);
            }
        }
        let deg: Vec<f64> = g.degrees().iter().map(|&d| d as f64).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let aij = a.get(i, j);
                let v = match kind {
                    OperatorKind::RawAdj => aij,
                    OperatorKind::RowAdj => {
                        if deg[i] > 0.0 {
                            aij / deg[i]
                        } else {
                            0.0
                        }
                    }
                    OperatorKind::SymAdj => {
                        if deg[i] > 0.0 && deg[j] > 0.0 {
                            aij / (deg[i] * deg[j]).sqrt()
                        } else {
                            0.0
                        }
                    }
                    OperatorKind::SymLaplacian => {
                        let adj = if deg[i] > 0.0 && deg[j] > 0.0 {
                            aij / (deg[i] * deg[j]).sqrt()
                        } else {
                            0.0
                        };
                        (if i == j { 1.0 } else { 0.0 }) - adj
                    }
                    OperatorKind::ShiftedLaplacian => {
                        let adj = if deg[i] > 0.0 && deg[j] > 0.0 {
                            aij / (deg[i] * deg[j]).sqrt()
                        } else {
                            0.0
                        };
                        if i == j && deg[i] == 0.0 {
                            -1.0
                        } else {
                            -adj
                        }
                    }
                };
                out.set(i, j, v);
            }
        }
        out
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        Graph::build(&edges, n).unwrap()
    }

    #[test]
    fn operators_match_dense_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for seed in 0..5u64 {
            let n = 8 + 7 * seed as usize; // up to 36, with likely isolated nodes at low p
            let g = random_graph(n, 0.15, seed);
            let mut x = Matrix::zeros(n, 3);
            for v in x.data_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
            for kind in [
                OperatorKind::SymAdj,
                OperatorKind::RowAdj,
                OperatorKind::SymLaplacian,
                OperatorKind::ShiftedLaplacian,
                OperatorKind::RawAdj,
            ] {
                let sparse = operator(&g, kind).apply(&x).unwrap();
                let dense = dense_operator(&g, kind).matmul(&x).unwrap();
                let scale = dense.max_abs().max(1.0);
                assert!(
                    sparse.max_abs_diff(&dense) / scale < 1e-12,
                    "kind {kind:?} mismatch"
                );
            }
        }
    }

    #[test]
    fn eigenvalue_ranges_on_small_graphs() {
        use crate::matrix::sym_eigen;
        for seed in 0..4u64 {
            let g = random_graph(20, 0.2, seed + 100);
            let adj = dense_operator(&g, OperatorKind::SymAdj);
            let (eigs, _) = sym_eigen(&adj).unwrap();
            for &l in &eigs {
                assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&l));
            }
            let lap = dense_operator(&g, OperatorKind::SymLaplacian);
            let (eigs, _) = sym_eigen(&lap).unwrap();
            for &l in &eigs {
                assert!((-1e-9..2.0 + 1e-9).contains(&l));
            }
        }
    }

    #[test]
    fn operator_linearity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = random_graph(25, 0.2, 3);
        let mut x = Matrix::zeros(25, 2);
        let mut y = Matrix::zeros(25, 2);
        for v in x.data_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        for v in y.data_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let (a, b) = (1.7, -0.3);
        for kind in [
            OperatorKind::SymAdj,
            OperatorKind::RowAdj,
            OperatorKind::SymLaplacian,
            OperatorKind::ShiftedLaplacian,
        ] {
            let op = operator(&g, kind);
            let lhs = op
                .apply(&x.scale(a).add(&y.scale(b)).unwrap())
                .unwrap();
            let rhs = op.apply(&x).unwrap().scale(a).add(&op.apply(&y).unwrap().scale(b)).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }

    #[test]
    fn homophily_k2_cases() {
        let g = Graph::build(&[(0, 1)], 2).unwrap();
        let same = LabelVector::new(vec![0, 0], 2).unwrap();
        let h = node_homophily(&g, &same);
        assert_eq!(h, vec![1.0, 1.0]);
        assert_eq!(graph_homophily(&h), 1.0);
        let diff = LabelVector::new(vec![0, 1], 2).unwrap();
        let h = node_homophily(&g, &diff);
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(graph_homophily(&h), 0.0);
    }

    #[test]
    fn homophily_path() {
        // Hand enumeration: neighbors of the middle node split 1/1.
        let g = Graph::build(&[(0, 1), (1, 2)], 3).unwrap();
        let y = LabelVector::new(vec![0, 0, 1], 2).unwrap();
        let h = node_homophily(&g, &y);
        assert_eq!(h, vec![1.0, 0.5, 0.0]);
        assert_eq!(graph_homophily(&h), 0.5);
    }

    #[test]
    fn homophily_isolated_is_nan_and_excluded() {
        let g = Graph::build(&[(0, 1)], 3).unwrap();
        let y = LabelVector::new(vec![0, 0, 1], 2).unwrap();
        let h = node_homophily(&g, &y);
        assert!(h[2].is_nan());
        assert_eq!(graph_homophily(&h), 1.0);
    }

    #[test]
    fn communities_disjoint_triangles() {
        let g = Graph::build(&[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 6).unwrap();
        let c = detect_communities(&g, 0);
        assert_eq!(c[0], c[1]);
        assert_eq!(c[1], c[2]);
        assert_eq!(c[3], c[4]);
        assert_eq!(c[4], c[5]);
        assert_ne!(c[0], c[3]);
        assert_eq!(c.iter().copied().max().unwrap(), 1);
    }

    #[test]
    fn communities_clique_is_single() {
        let mut edges = Vec::new();
        for i in 0..5 {
            for j in (i + 1)..5 {
                edges.push((i, j));
            }
        }
        let g = Graph::build(&edges, 5).unwrap();
        let c = detect_communities(&g, 42);
        assert!(c.iter().all(|&x| x == 0));
    }

    fn bridged_cliques() -> Graph {
        let mut edges = Vec::new();
        for i in 0..10 {
            for j in (i + 1)..10 {
                edges.push((i, j));
                edges.push((10 + i, 10 + j));
            }
        }
        edges.push((9, 10));
        Graph::build(&edges, 20).unwrap()
    }

    #[test]
    fn communities_split_bridged_cliques() {
        let g = bridged_cliques();
        let c = detect_communities(&g, 1);
        assert!((0..10).all(|v| c[v] == c[0]));
        assert!((10..20).all(|v| c[v] == c[10]));
        assert_ne!(c[0], c[10]);

        // Modularity oracle: the recovered 2-way split must beat all-in-one.
        let all_one = vec![0usize; 20];
        assert!(modularity(&g, &c) > modularity(&g, &all_one));
    }

    #[test]
    fn communities_deterministic_across_seeds() {
        let g = bridged_cliques();
        assert_eq!(detect_communities(&g, 1), detect_communities(&g, 99));
    }

    proptest::proptest! {
        #[test]
        fn build_invariants_hold_for_arbitrary_edge_lists(
            n in 1usize..20,
            raw in proptest::collection::vec((0usize..25, 0usize..25), 0..60),
        ) {
            let edges: Vec<(usize, usize)> = raw
                .into_iter()
                .map(|(a, b)| (a % n, b % n))
                .collect();
            let g = Graph::build(&edges, n).unwrap();
            proptest::prop_assert_eq!(g.csr_offsets.len(), n + 1);
            proptest::prop_assert_eq!(*g.csr_offsets.last().unwrap(), g.csr_targets.len());
            for v in 0..n {
                proptest::prop_assert!(g.csr_offsets[v] <= g.csr_offsets[v + 1]);
                proptest::prop_assert_eq!(g.degree(v), g.csr_offsets[v + 1] - g.csr_offsets[v]);
                let nb = g.neighbors(v);
                // Sorted, no duplicates, no self-loops, symmetric.
                proptest::prop_assert!(nb.windows(2).all(|w| w[0] < w[1]));
                proptest::prop_assert!(!nb.contains(&v));
                for &u in nb {
                    proptest::prop_assert!(g.neighbors(u).contains(&v));
                }
            }
        }

        #[test]
        fn homophily_values_bounded(
            n in 2usize..15,
            raw in proptest::collection::vec((0usize..20, 0usize..20), 0..40),
            label_bits in proptest::collection::vec(0usize..3, 15),
        ) {
            let edges: Vec<(usize, usize)> = raw
                .into_iter()
                .map(|(a, b)| (a % n, b % n))
                .collect();
            let g = Graph::build(&edges, n).unwrap();
            let y = LabelVector::new(label_bits[..n].to_vec(), 3).unwrap();
            let h = node_homophily(&g, &y);
            let mut finite = Vec::new();
            for (v, &hv) in h.iter().enumerate() {
                if g.degree(v) == 0 {
                    proptest::prop_assert!(hv.is_nan());
                } else {
                    proptest::prop_assert!((0.0..=1.0).contains(&hv));
                    finite.push(hv);
                }
            }
            let hg = graph_homophily(&h);
            if finite.is_empty() {
                proptest::prop_assert!(hg.is_nan());
            } else {
                let mean = finite.iter().sum::<f64>() / finite.len() as f64;
                proptest::prop_assert!((hg - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_consistency() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10u64 {
            let n = 12;
            let g = random_graph(n, 0.3, trial);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let y = LabelVector::new(labels.clone(), 3).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // perm[v] is the new id of old node v.
            let edges: Vec<(usize, usize)> = g
                .edge_list()
                .iter()
                .map(|&(a, b)| (perm[a], perm[b]))
                .collect();
            let gp = Graph::build(&edges, n).unwrap();
            let yp = {
                let mut l = vec![0usize; n];
                for v in 0..n {
                    l[perm[v]] = labels[v];
                }
                LabelVector::new(l, 3).unwrap()
            };
            let h = node_homophily(&g, &y);
            let hp = node_homophily(&gp, &yp);
            for v in 0..n {
                let (a, b) = (h[v], hp[perm[v]]);
                assert!(a == b || (a.is_nan() && b.is_nan()));
                assert_eq!(g.degree(v), gp.degree(perm[v]));
            }
            // Operator outputs permute consistently too.
            let mut x = Matrix::zeros(n, 2);
            for v in x.data_mut() {
                *v = rng.random::<f64>() - 0.5;
            }
            let mut xp = Matrix::zeros(n, 2);
            for v in 0..n {
                for j in 0..2 {
                    xp.set(perm[v], j, x.get(v, j));
                }
            }
            for kind in [OperatorKind::SymAdj, OperatorKind::ShiftedLaplacian] {
                let y0 = operator(&g, kind).apply(&x).unwrap();
                let y1 = operator(&gp, kind).apply(&xp).unwrap();
                for v in 0..n {
                    for j in 0..2 {
                        assert!((y0.get(v, j) - y1.get(perm[v], j)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
