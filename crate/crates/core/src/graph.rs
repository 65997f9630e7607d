//! Patch graph over the invariant feature map.
//!
//! The map is cut into a square grid of patches, one node per patch
//! (mean-pooled pixels). A virtual super node initialized to the mean of
//! all patch nodes is wired bidirectionally to every node, self-loops are
//! added everywhere, and messages mix through `A~ D^-1` (column
//! normalization by source degree, so each node distributes its state in
//! equal shares and the column-stochastic mix conserves feature sums).
//!
//! A plain variant without the super node exists for ablation runs; its
//! readout is the node mean, which keeps the same permutation invariance.

use crate::backbone::Field;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// Square patch layout; `rows * cols` nodes in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || rows != cols {
            return Err(Error::Config(format!(
                "patch grid must be square and non-empty, got {}x{}",
                rows, cols
            )));
        }
        Ok(PatchGrid { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Undirected 0/1 graph with self-loops; optionally one super node wired
/// to everything, stored at the last index.
#[derive(Debug, Clone)]
pub struct NodeGraph {
    nodes: usize,
    adj: Vec<u8>,
    degrees: Vec<usize>,
    super_index: Option<usize>,
}

impl NodeGraph {
    pub fn nodes(&self) -> usize {
        self.nodes
    }
    pub fn adjacency(&self) -> &[u8] {
        &self.adj
    }
    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }
    pub fn super_index(&self) -> Option<usize> {
        self.super_index
    }
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.nodes + j] != 0
    }

    /// Build from a row-major 0/1 adjacency. Requires symmetry and a
    /// self-loop on every node, which keeps every column degree positive.
    pub fn new(nodes: usize, adj: Vec<u8>, super_index: Option<usize>) -> Result<Self> {
        if nodes == 0 || adj.len() != nodes * nodes {
            return Err(Error::Dimension(format!(
                "adjacency of {} entries for {} nodes",
                adj.len(),
                nodes
            )));
        }
        if let Some(s) = super_index {
            if s >= nodes {
                return Err(Error::Dimension(format!(
                    "super index {} outside {} nodes",
                    s, nodes
                )));
            }
        }
        for i in 0..nodes {
            if adj[i * nodes + i] == 0 {
                return Err(Error::Domain(format!("node {} is missing its self-loop", i)));
            }
            for j in 0..nodes {
                let e = adj[i * nodes + j];
                if e > 1 {
                    return Err(Error::Domain(format!(
                        "adjacency entry ({},{}) is {}, want 0 or 1",
                        i, j, e
                    )));
                }
                if e != adj[j * nodes + i] {
                    return Err(Error::Domain(format!(
                        "adjacency is not symmetric at ({},{})",
                        i, j
                    )));
                }
            }
        }
        Ok(Self::from_adjacency(nodes, adj, super_index))
    }

    /// Dense mixing matrix `M[i][j] = A~[i][j] / d_j`. The division happens
    /// in working precision so oracles can reproduce entries bit-for-bit.
    pub fn mixing<T: Scalar>(&self) -> Tensor<T> {
        let n = self.nodes;
        let mut m = vec![T::zero(); n * n];
        for j in 0..n {
            let inv = T::one().div(T::from_f64(self.degrees[j] as f64));
            for i in 0..n {
                if self.adj[i * n + j] != 0 {
                    m[i * n + j] = inv;
                }
            }
        }
        Tensor::from_raw(vec![n, n], m)
    }

    fn from_adjacency(nodes: usize, adj: Vec<u8>, super_index: Option<usize>) -> Self {
        let mut degrees = vec![0usize; nodes];
        for j in 0..nodes {
            degrees[j] = (0..nodes).map(|i| adj[i * nodes + j] as usize).sum();
        }
        NodeGraph { nodes, adj, degrees, super_index }
    }
}

/// Patch graph with the virtual super node: 4-neighborhood grid edges,
/// super node connected to all, self-loops on every node (super included).
pub fn build_graph(grid: &PatchGrid) -> NodeGraph {
    let n = grid.node_count();
    let total = n + 1;
    let mut adj = vec![0u8; total * total];
    grid_edges(grid, &mut adj, total);
    for i in 0..total {
        adj[i * total + i] = 1;
        adj[n * total + i] = 1;
        adj[i * total + n] = 1;
    }
    NodeGraph::from_adjacency(total, adj, Some(n))
}

/// Grid edges and self-loops only; the ablation graph without a super node.
pub fn build_plain_graph(grid: &PatchGrid) -> NodeGraph {
    let n = grid.node_count();
    let mut adj = vec![0u8; n * n];
    grid_edges(grid, &mut adj, n);
    for i in 0..n {
        adj[i * n + i] = 1;
    }
    NodeGraph::from_adjacency(n, adj, None)
}

fn grid_edges(grid: &PatchGrid, adj: &mut [u8], stride: usize) {
    let (rows, cols) = (grid.rows(), grid.cols());
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if r + 1 < rows {
                let j = (r + 1) * cols + c;
                adj[i * stride + j] = 1;
                adj[j * stride + i] = 1;
            }
            if c + 1 < cols {
                let j = r * cols + c + 1;
                adj[i * stride + j] = 1;
                adj[j * stride + i] = 1;
            }
        }
    }
}

/// Cut the one-orientation map `[C,1,S,S]` into grid patches and mean-pool
/// each; rows of the result are patch nodes `[N, C]` in row-major patch
/// order.
pub fn partition<T: Scalar>(g: &mut Graph<T>, map: &Field, grid: &PatchGrid) -> Result<Var> {
    if map.orientations != 1 {
        return Err(Error::Dimension(format!(
            "partition wants a one-orientation map, got {}",
            map.orientations
        )));
    }
    if map.height != map.width {
        return Err(Error::Geometry(format!(
            "partition wants a square map, got {}x{}",
            map.height, map.width
        )));
    }
    if map.height % grid.rows() != 0 {
        return Err(Error::Geometry(format!(
            "map side {} not divisible by grid side {}",
            map.height,
            grid.rows()
        )));
    }
    let side = map.height;
    let p = side / grid.rows();
    let (n, c) = (grid.node_count(), map.channels);
    // regroup pixels as [N, C, p*p], then average the patch axis
    let mut index = Vec::with_capacity(n * c * p * p);
    for node in 0..n {
        let (pr, pc) = (node / grid.cols(), node % grid.cols());
        for ch in 0..c {
            for qy in 0..p {
                for qx in 0..p {
                    index.push(ch * side * side + (pr * p + qy) * side + (pc * p + qx));
                }
            }
        }
    }
    let grouped = g.gather(map.var, Arc::new(index), vec![n, c, p * p])?;
    g.mean_axis(grouped, 2)
}

/// Append the super node state: the mean of all patch rows (global average
/// pooling over nodes).
pub fn init_super<T: Scalar>(g: &mut Graph<T>, nodes: Var) -> Result<Var> {
    let s = g.value(nodes).shape().to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "init_super wants non-empty [N,d] nodes, got {:?}",
            s
        )));
    }
    let (n, d) = (s[0], s[1]);
    let mean = g.mean_axis(nodes, 0)?;
    let flat = g.reshape(nodes, vec![n * d])?;
    let cat = g.concat(&[flat, mean])?;
    g.reshape(cat, vec![n + 1, d])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One round of message passing: `sigma((A~ D^-1 H) W)`.
pub fn gcn_propagate<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    graph: &NodeGraph,
    weight: Var,
    act: Activation,
) -> Result<Var> {
    let hs = g.value(h).shape().to_vec();
    if hs.len() != 2 || hs[0] != graph.nodes() {
        return Err(Error::Dimension(format!(
            "node features {:?} for a {}-node graph",
            hs,
            graph.nodes()
        )));
    }
    let mix = g.leaf(graph.mixing::<T>());
    let mixed = g.matmul(mix, h)?;
    let out = g.matmul(mixed, weight)?;
    Ok(match act {
        Activation::Relu => g.relu(out),
        Activation::Identity => out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    SuperOnly,
    Concat,
}

/// Collapse final node states into the retrieval descriptor and
/// L2-normalize it. `SuperOnly` takes the super row (node mean for the
/// plain ablation graph, which has no super node); `Concat` flattens all
/// rows.
pub fn readout<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    graph: &NodeGraph,
    mode: ReadoutMode,
) -> Result<Var> {
    let s = g.value(h).shape().to_vec();
    if s.len() != 2 || s[0] != graph.nodes() {
        return Err(Error::Dimension(format!(
            "readout wants [{},d] node features, got {:?}",
            graph.nodes(),
            s
        )));
    }
    let (n, d) = (s[0], s[1]);
    let z = match mode {
        ReadoutMode::SuperOnly => match graph.super_index() {
            Some(idx) => {
                let index: Vec<usize> = (0..d).map(|c| idx * d + c).collect();
                g.gather(h, Arc::new(index), vec![d])?
            }
            None => g.mean_axis(h, 0)?,
        },
        ReadoutMode::Concat => g.reshape(h, vec![n * d])?,
    };
    Ok(g.l2_normalize(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FeatureField;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(side: usize) -> PatchGrid {
        PatchGrid::new(side, side).unwrap()
    }

    fn map_field<T: Scalar>(g: &mut Graph<T>, t: Tensor<T>) -> Field {
        Field::input(g, &FeatureField::new(t).unwrap())
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn two_by_two_grid_degrees() {
        let g = build_graph(&grid(2));
        assert_eq!(g.nodes(), 5);
        assert_eq!(g.degrees(), &[4, 4, 4, 4, 5]);
        assert_eq!(g.super_index(), Some(4));
    }

    #[test]
    fn one_by_one_grid_degrees() {
        let g = build_graph(&grid(1));
        assert_eq!(g.nodes(), 2);
        assert_eq!(g.degrees(), &[2, 2]);
    }

    #[test]
    fn four_by_four_grid_degrees() {
        let g = build_graph(&grid(4));
        assert_eq!(g.nodes(), 17);
        // corner (0,0), edge (0,1), interior (1,1), super
        assert_eq!(g.degrees()[0], 4);
        assert_eq!(g.degrees()[1], 5);
        assert_eq!(g.degrees()[5], 6);
        assert_eq!(g.degrees()[16], 17);
    }

    #[test]
    fn adjacency_is_symmetric_with_full_diagonal() {
        let g = build_graph(&grid(3));
        let n = g.nodes();
        for i in 0..n {
            assert!(g.has_edge(i, i));
            assert!(g.has_edge(i, n - 1));
            assert!(g.has_edge(n - 1, i));
            for j in 0..n {
                assert_eq!(g.has_edge(i, j), g.has_edge(j, i));
            }
        }
    }

    #[test]
    fn plain_graph_has_no_super_node() {
        let g = build_plain_graph(&grid(2));
        assert_eq!(g.nodes(), 4);
        assert_eq!(g.super_index(), None);
        // 2 grid neighbors + self
        assert_eq!(g.degrees(), &[3, 3, 3, 3]);
    }

    #[test]
    fn partition_degenerate_patches_are_pixels() {
        let mut g = Graph::<f64>::new();
        let map = map_field(
            &mut g,
            Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let nodes = partition(&mut g, &map, &grid(2)).unwrap();
        assert_eq!(g.value(nodes).shape(), &[4, 1]);
        assert_eq!(g.value(nodes).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn partition_of_constant_map_is_constant() {
        let mut g = Graph::<f32>::new();
        let map = map_field(&mut g, Tensor::new(vec![3, 1, 8, 8], vec![0.5; 192]).unwrap());
        let nodes = partition(&mut g, &map, &grid(4)).unwrap();
        assert!(g.value(nodes).values().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn partition_rejects_indivisible_map() {
        let mut g = Graph::<f32>::new();
        let map = map_field(&mut g, Tensor::zeros(vec![1, 1, 6, 6]));
        assert!(partition(&mut g, &map, &grid(4)).is_err());
    }

    #[test]
    fn partition_commutes_with_quarter_turn() {
        // rotating the map permutes patch nodes by the grid rotation
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let side = 8;
        let gs = 4;
        let t = Tensor::new(vec![2, 1, side, side], rand_vec(&mut rng, 2 * side * side)).unwrap();
        let rt = crate::backbone::rot90_tensor(&t, 1).unwrap();

        let mut g = Graph::<f32>::new();
        let map = map_field(&mut g, t);
        let nodes = partition(&mut g, &map, &grid(gs)).unwrap();
        let base = g.value(nodes).values().to_vec();
        let mut g2 = Graph::<f32>::new();
        let map_r = map_field(&mut g2, rt);
        let nodes_r = partition(&mut g2, &map_r, &grid(gs)).unwrap();
        let rot = g2.value(nodes_r).values().to_vec();

        let c = 2;
        for i in 0..gs {
            for j in 0..gs {
                // same block permutation as pixels: out (i,j) <- in (j, gs-1-i)
                let dst = i * gs + j;
                let src = j * gs + (gs - 1 - i);
                for ch in 0..c {
                    let d = (rot[dst * c + ch] - base[src * c + ch]).abs();
                    assert!(d <= 1e-6, "node ({},{}) ch {}: diff {}", i, j, ch, d);
                }
            }
        }
    }

    #[test]
    fn init_super_matches_hand_mean() {
        let mut g = Graph::<f64>::new();
        let nodes = g.leaf(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = init_super(&mut g, nodes).unwrap();
        assert_eq!(g.value(h).shape(), &[5, 1]);
        assert_eq!(g.value(h).values(), &[1.0, 2.0, 3.0, 4.0, 2.5]);
    }

    #[test]
    fn init_super_of_equal_nodes_repeats_them() {
        let mut g = Graph::<f32>::new();
        let nodes = g.leaf(Tensor::new(vec![3, 2], vec![0.25; 6]).unwrap());
        let h = init_super(&mut g, nodes).unwrap();
        assert!(g.value(h).values().iter().all(|&x| x == 0.25));
    }

    #[test]
    fn init_super_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vals = rand_vec(&mut rng, 6 * 3);
        let mut perm: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f32> = perm
            .iter()
            .flat_map(|&p| vals[p * 3..(p + 1) * 3].to_vec())
            .collect();

        let super_row = |v: Vec<f32>| {
            let mut g = Graph::<f32>::new();
            let nodes = g.leaf(Tensor::new(vec![6, 3], v).unwrap());
            let h = init_super(&mut g, nodes).unwrap();
            g.value(h).values()[6 * 3..].to_vec()
        };
        let a = super_row(vals);
        let b = super_row(permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn gcn_two_node_hand_oracle() {
        // 1x1 grid: two mutually connected self-looped nodes, degrees 2.
        // M = [[1/2,1/2],[1/2,1/2]], H = [[2],[4]], W = [[1]] -> [[3],[3]]
        let graph = build_graph(&grid(1));
        let mut g = Graph::<f64>::new();
        let h = g.leaf(Tensor::new(vec![2, 1], vec![2.0, 4.0]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let out = gcn_propagate(&mut g, h, &graph, w, Activation::Identity).unwrap();
        assert_eq!(g.value(out).values(), &[3.0, 3.0]);
    }

    #[test]
    fn gcn_single_node_identity() {
        let graph = NodeGraph::from_adjacency(1, vec![1], None);
        let mut g = Graph::<f64>::new();
        let h = g.leaf(Tensor::new(vec![1, 3], vec![1.5, -2.0, 0.25]).unwrap());
        let w = g.leaf(Tensor::new(vec![3, 3], vec![
            1.0, 0.0, 0.0,
            0.0, 1.0, 0.0,
            0.0, 0.0, 1.0,
        ]).unwrap());
        let out = gcn_propagate(&mut g, h, &graph, w, Activation::Identity).unwrap();
        assert_eq!(g.value(out).values(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn gcn_zero_weight_relu_is_zero() {
        let graph = build_graph(&grid(2));
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut g = Graph::<f32>::new();
        let h = g.leaf(Tensor::new(vec![5, 3], rand_vec(&mut rng, 15)).unwrap());
        let w = g.leaf(Tensor::zeros(vec![3, 3]));
        let out = gcn_propagate(&mut g, h, &graph, w, Activation::Relu).unwrap();
        assert!(g.value(out).values().iter().all(|&x| x == 0.0));
    }

    /// Per-node, per-neighbor message pass with the same accumulation
    /// order as the dense product.
    fn brute_propagate(graph: &NodeGraph, h: &[f32], d: usize, w: &[f32], dw: usize) -> Vec<f32> {
        let n = graph.nodes();
        let mut msg = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..n {
                if graph.has_edge(i, j) {
                    let m = 1.0f32 / graph.degrees()[j] as f32;
                    for c in 0..d {
                        msg[i * d + c] += m * h[j * d + c];
                    }
                }
            }
        }
        let mut out = vec![0.0f32; n * dw];
        for i in 0..n {
            for k in 0..d {
                let mik = msg[i * d + k];
                for c in 0..dw {
                    out[i * dw + c] += mik * w[k * dw + c];
                }
            }
        }
        out
    }

    #[test]
    fn dense_propagation_equals_brute_force_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..50 {
            let n = rng.gen_range(1..=20);
            let mut adj = vec![0u8; n * n];
            for i in 0..n {
                adj[i * n + i] = 1;
                for j in 0..i {
                    if rng.gen_bool(0.4) {
                        adj[i * n + j] = 1;
                        adj[j * n + i] = 1;
                    }
                }
            }
            let graph = NodeGraph::from_adjacency(n, adj, None);
            let d = rng.gen_range(1..=6);
            let dw = rng.gen_range(1..=6);
            let hv = rand_vec(&mut rng, n * d);
            let wv = rand_vec(&mut rng, d * dw);

            let mut g = Graph::<f32>::new();
            let h = g.leaf(Tensor::new(vec![n, d], hv.clone()).unwrap());
            let w = g.leaf(Tensor::new(vec![d, dw], wv.clone()).unwrap());
            let out = gcn_propagate(&mut g, h, &graph, w, Activation::Identity).unwrap();

            let want = brute_propagate(&graph, &hv, d, &wv, dw);
            assert_eq!(g.value(out).values(), &want[..], "trial {}", trial);
        }
    }

    #[test]
    fn column_stochastic_mix_conserves_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let graph = build_graph(&grid(4));
        let n = graph.nodes();
        let d = 5;
        let hv = rand_vec(&mut rng, n * d);
        let mut g = Graph::<f32>::new();
        let h = g.leaf(Tensor::new(vec![n, d], hv.clone()).unwrap());
        let eye: Vec<f32> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let w = g.leaf(Tensor::new(vec![d, d], eye).unwrap());
        let out = gcn_propagate(&mut g, h, &graph, w, Activation::Identity).unwrap();
        let ov = g.value(out).values();
        for c in 0..d {
            let before: f32 = (0..n).map(|i| hv[i * d + c]).sum();
            let after: f32 = (0..n).map(|i| ov[i * d + c]).sum();
            assert!((before - after).abs() <= 1e-5, "channel {}: {} vs {}", c, before, after);
        }
    }

    #[test]
    fn propagation_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for trial in 0..20 {
            let graph = build_graph(&grid(3));
            let n = graph.nodes();
            let d = 4;
            let hv = rand_vec(&mut rng, n * d);
            let wv = rand_vec(&mut rng, d * d);

            // pi[new] = old
            let mut pi: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                pi.swap(i, rng.gen_range(0..=i));
            }
            let mut padj = vec![0u8; n * n];
            for i in 0..n {
                for j in 0..n {
                    padj[i * n + j] = graph.adjacency()[pi[i] * n + pi[j]];
                }
            }
            let pgraph = NodeGraph::from_adjacency(n, padj, None);
            let phv: Vec<f32> = pi.iter().flat_map(|&p| hv[p * d..(p + 1) * d].to_vec()).collect();

            let run = |graph: &NodeGraph, hv: &[f32]| {
                let mut g = Graph::<f32>::new();
                let h = g.leaf(Tensor::new(vec![n, d], hv.to_vec()).unwrap());
                let w = g.leaf(Tensor::new(vec![d, d], wv.clone()).unwrap());
                let out = gcn_propagate(&mut g, h, graph, w, Activation::Relu).unwrap();
                g.value(out).values().to_vec()
            };

            let base = run(&graph, &hv);
            let perm = run(&pgraph, &phv);
            for i in 0..n {
                for c in 0..d {
                    let diff = (perm[i * d + c] - base[pi[i] * d + c]).abs();
                    assert!(diff <= 1e-6, "trial {} node {} ch {}: {}", trial, i, c, diff);
                }
            }
        }
    }

    #[test]
    fn readout_super_row_is_selected_exactly() {
        let graph = build_graph(&grid(2));
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let hv = rand_vec(&mut rng, 5 * 3);
        let mut g = Graph::<f32>::new();
        let h = g.leaf(Tensor::new(vec![5, 3], hv.clone()).unwrap());
        let z = readout(&mut g, h, &graph, ReadoutMode::SuperOnly).unwrap();
        assert_eq!(g.value(z).shape(), &[3]);
        // direction matches the raw super row
        let raw = &hv[4 * 3..];
        let norm = (raw.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
        for (zi, &ri) in g.value(z).values().iter().zip(raw) {
            assert!(((*zi as f64) - ri as f64 / norm).abs() <= 1e-6);
        }
    }

    #[test]
    fn readout_concat_length_and_norm() {
        let graph = build_graph(&grid(2));
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut g = Graph::<f32>::new();
        let h = g.leaf(Tensor::new(vec![5, 3], rand_vec(&mut rng, 15)).unwrap());
        let z = readout(&mut g, h, &graph, ReadoutMode::Concat).unwrap();
        assert_eq!(g.value(z).shape(), &[15]);
        let norm: f64 = g.value(z).values().iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn plain_graph_super_only_readout_is_node_mean() {
        let graph = build_plain_graph(&grid(2));
        let mut g = Graph::<f64>::new();
        let h = g.leaf(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let z = readout(&mut g, h, &graph, ReadoutMode::SuperOnly).unwrap();
        // mean 2.5, normalized to 1.0
        assert_eq!(g.value(z).shape(), &[1]);
        assert!((g.value(z).values()[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn graph_head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let grid2 = grid(2);
        let graph = build_graph(&grid2);
        let mapv: Vec<f64> = (0..2 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let map_t = Tensor::new(vec![2, 1, 4, 4], mapv).unwrap();
        let w1v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1 = Tensor::new(vec![2, 2], w1v).unwrap();
        let w2 = Tensor::new(vec![2, 2], w2v).unwrap();
        let probe = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();

        let report = crate::gradcheck::grad_check(&[w1, w2, probe], 1e-5, |g, vars| {
            let map = map_field(g, map_t.clone());
            let nodes = partition(g, &map, &grid2)?;
            let h0 = init_super(g, nodes)?;
            let h1 = gcn_propagate(g, h0, &graph, vars[0], Activation::Relu)?;
            let h2 = gcn_propagate(g, h1, &graph, vars[1], Activation::Identity)?;
            let z = readout(g, h2, &graph, ReadoutMode::SuperOnly)?;
            let p = g.mul(z, vars[2])?;
            Ok(g.mean_all(p))
        })
        .unwrap();
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }
}
