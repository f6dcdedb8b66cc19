//! Feature-space kNN graph over spatial nodes and single-head (optionally
//! multi-head averaged) attention restricted to each node's neighborhood.
//! Scores use the concatenation form a . [phi(z_u) || phi(z_v)]; the
//! softmax-weighted aggregation runs over the raw node features.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, Var};

use super::{glorot, ParamGroup};

/// Sparse directed neighborhoods of one time slice. Every node leads its
/// own list (self-loop); all lists share length `min(k + 1, n_nodes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    n_nodes: usize,
    list_len: usize,
    neighbors: Vec<usize>,
}

impl GraphSnapshot {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn list_len(&self) -> usize {
        self.list_len
    }

    pub fn neighbors_of(&self, node: usize) -> &[usize] {
        &self.neighbors[node * self.list_len..(node + 1) * self.list_len]
    }

    pub fn flat_neighbors(&self) -> &[usize] {
        &self.neighbors
    }
}

/// Directed kNN by Euclidean distance in feature space, ties broken toward
/// the lower node index. `k` is clamped to n-1.
pub fn build_knn_graph(features: &Tensor, k: usize) -> GraphSnapshot {
    assert_eq!(features.rank(), 2, "node features must be [N, F]");
    let n = features.shape()[0];
    let f = features.shape()[1];
    let k = k.min(n.saturating_sub(1));
    let list_len = k + 1;
    let data = features.data();
    let mut neighbors = Vec::with_capacity(n * list_len);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n.saturating_sub(1));
    for u in 0..n {
        scratch.clear();
        let zu = &data[u * f..(u + 1) * f];
        for v in 0..n {
            if v == u {
                continue;
            }
            let zv = &data[v * f..(v + 1) * f];
            let d2: f64 = zu
                .iter()
                .zip(zv)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            scratch.push((d2, v));
        }
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.push(u);
        neighbors.extend(scratch.iter().take(k).map(|&(_, v)| v));
    }
    GraphSnapshot {
        n_nodes: n,
        list_len,
        neighbors,
    }
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub phi: Tensor,        // [F, F_att]
    pub attn_self: Tensor,  // [F_att, 1]
    pub attn_neigh: Tensor, // [F_att, 1]
}

/// One or more attention heads over a graph snapshot; multiple heads are
/// averaged so the output keeps the input feature width.
#[derive(Clone, Debug)]
pub struct GraphAttentionParams {
    pub heads: Vec<AttentionHead>,
}

#[derive(Clone, Debug)]
pub struct GraphAttentionVars {
    heads: Vec<(Var, Var, Var)>,
}

impl GraphAttentionVars {
    pub fn heads(&self) -> &[(Var, Var, Var)] {
        &self.heads
    }
}

impl GraphAttentionParams {
    pub fn init(rng: &mut ChaCha8Rng, feature_dim: usize, attn_dim: usize, n_heads: usize) -> Self {
        let heads = (0..n_heads.max(1))
            .map(|_| AttentionHead {
                phi: glorot(rng, &[feature_dim, attn_dim], feature_dim, attn_dim),
                attn_self: glorot(rng, &[attn_dim, 1], attn_dim, 1),
                attn_neigh: glorot(rng, &[attn_dim, 1], attn_dim, 1),
            })
            .collect();
        GraphAttentionParams { heads }
    }

    /// Zero compatibility parameters: attention degenerates to the
    /// neighborhood mean.
    pub fn zeros(feature_dim: usize, attn_dim: usize, n_heads: usize) -> Self {
        let heads = (0..n_heads.max(1))
            .map(|_| AttentionHead {
                phi: Tensor::zeros(&[feature_dim, attn_dim]),
                attn_self: Tensor::zeros(&[attn_dim, 1]),
                attn_neigh: Tensor::zeros(&[attn_dim, 1]),
            })
            .collect();
        GraphAttentionParams { heads }
    }

    pub fn bind(&self, tape: &mut Tape) -> GraphAttentionVars {
        GraphAttentionVars {
            heads: self
                .heads
                .iter()
                .map(|h| {
                    (
                        tape.param(&h.phi),
                        tape.param(&h.attn_self),
                        tape.param(&h.attn_neigh),
                    )
                })
                .collect(),
        }
    }
}

impl ParamGroup for GraphAttentionParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, h) in self.heads.iter().enumerate() {
            f(format!("{prefix}.head{i}.phi"), &h.phi);
            f(format!("{prefix}.head{i}.attn_self"), &h.attn_self);
            f(format!("{prefix}.head{i}.attn_neigh"), &h.attn_neigh);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(format!("{prefix}.head{i}.phi"), &mut h.phi);
            f(format!("{prefix}.head{i}.attn_self"), &mut h.attn_self);
            f(format!("{prefix}.head{i}.attn_neigh"), &mut h.attn_neigh);
        }
    }
}

/// Neighborhood attention: per node u, weights = softmax over N(u) of
/// a . [phi(z_u) || phi(z_v)], output_u = sum_v w_uv z_v.
pub fn graph_attention(
    tape: &mut Tape,
    vars: &GraphAttentionVars,
    graph: &GraphSnapshot,
    z: Var,
) -> Result<Var> {
    let n = graph.n_nodes();
    let m = graph.list_len();
    let f = tape.value(z).shape()[1];
    let idx = graph.flat_neighbors();

    let mut head_outputs = Vec::with_capacity(vars.heads.len());
    for &(phi, attn_self, attn_neigh) in &vars.heads {
        let zphi = tape.matmul(z, phi)?;
        let s_self = tape.matmul(zphi, attn_self)?; // [N, 1]
        let s_neigh = tape.matmul(zphi, attn_neigh)?; // [N, 1]

        let sn = tape.gather_rows(s_neigh, idx)?; // [N*m, 1]
        let sn = tape.reshape(sn, &[n, m])?;
        let su = tape.broadcast(s_self, &[n, m])?;
        let scores = tape.add(su, sn)?;
        let weights = tape.softmax(scores, 1)?;

        let zn = tape.gather_rows(z, idx)?; // [N*m, F]
        let zn = tape.reshape(zn, &[n, m, f])?;
        let w3 = tape.reshape(weights, &[n, m, 1])?;
        let w3 = tape.broadcast(w3, &[n, m, f])?;
        let weighted = tape.mul(w3, zn)?;
        head_outputs.push(tape.sum(weighted, &[1])?); // [N, F]
    }

    let mut out = head_outputs[0];
    for &h in &head_outputs[1..] {
        out = tape.add(out, h)?;
    }
    if head_outputs.len() > 1 {
        out = tape.scale_add(out, 1.0 / head_outputs.len() as f64, 0.0)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn collinear_features_pick_nearest_neighbor() {
        let z = Tensor::new(vec![3, 1], vec![0.0, 1.0, 10.0]).unwrap();
        let g = build_knn_graph(&z, 1);
        assert_eq!(g.neighbors_of(0), &[0, 1]);
        assert_eq!(g.neighbors_of(1), &[1, 0]);
        assert_eq!(g.neighbors_of(2), &[2, 1]);
    }

    #[test]
    fn large_k_gives_fully_connected_lists() {
        let z = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 2.0]).unwrap();
        let g = build_knn_graph(&z, 10);
        assert_eq!(g.list_len(), 3);
        for u in 0..3 {
            let mut l = g.neighbors_of(u).to_vec();
            l.sort_unstable();
            assert_eq!(l, vec![0, 1, 2]);
        }
    }

    #[test]
    fn duplicate_features_tie_break_toward_lower_index() {
        let z = Tensor::new(vec![4, 1], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let g = build_knn_graph(&z, 2);
        assert_eq!(g.neighbors_of(0), &[0, 1, 2]);
        assert_eq!(g.neighbors_of(3), &[3, 0, 1]);
    }

    #[test]
    fn knn_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 7;
        let f = 3;
        let data: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = Tensor::new(vec![n, f], data.clone()).unwrap();
        let g = build_knn_graph(&z, 2);

        // relabel nodes by the permutation sigma(i) = (i + 3) % n
        let sigma = |i: usize| (i + 3) % n;
        let mut permuted = vec![0.0; n * f];
        for i in 0..n {
            permuted[sigma(i) * f..(sigma(i) + 1) * f].copy_from_slice(&data[i * f..(i + 1) * f]);
        }
        let zp = Tensor::new(vec![n, f], permuted).unwrap();
        let gp = build_knn_graph(&zp, 2);
        for u in 0..n {
            let relabeled: Vec<usize> = g.neighbors_of(u).iter().map(|&v| sigma(v)).collect();
            assert_eq!(gp.neighbors_of(sigma(u)), &relabeled[..]);
        }
    }

    #[test]
    fn zero_compatibility_equals_neighborhood_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 5;
        let f = 3;
        let data: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z_t = Tensor::new(vec![n, f], data).unwrap();
        let g = build_knn_graph(&z_t, 2);
        let params = GraphAttentionParams::zeros(f, 4, 1);

        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let z = tape.constant(z_t.clone());
        let out = graph_attention(&mut tape, &vars, &g, z).unwrap();

        let m = g.list_len() as f64;
        for u in 0..n {
            for c in 0..f {
                // accumulate in neighbor-list order with uniform weights,
                // matching the aggregation order bit for bit
                let mut acc = 0.0;
                for &v in g.neighbors_of(u) {
                    acc += (1.0 / m) * z_t.get(&[v, c]);
                }
                assert_eq!(tape.value(out).get(&[u, c]), acc);
            }
        }
    }

    #[test]
    fn single_node_with_self_loop_is_identity() {
        let z_t = Tensor::new(vec![1, 3], vec![0.4, -0.7, 2.0]).unwrap();
        let g = build_knn_graph(&z_t, 3);
        assert_eq!(g.list_len(), 1);
        let params = GraphAttentionParams::init(&mut ChaCha8Rng::seed_from_u64(13), 3, 2, 1);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let z = tape.constant(z_t.clone());
        let out = graph_attention(&mut tape, &vars, &g, z).unwrap();
        assert_eq!(tape.value(out).data(), z_t.data());
    }

    #[test]
    fn two_node_line_matches_hand_evaluated_softmax() {
        // z0 = [1, 0], z1 = [0, 1]; phi = identity; a_self = [0.3, 0.1],
        // a_neigh = [-0.2, 0.4]
        let z_t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = build_knn_graph(&z_t, 1);
        let params = GraphAttentionParams {
            heads: vec![AttentionHead {
                phi: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                attn_self: Tensor::new(vec![2, 1], vec![0.3, 0.1]).unwrap(),
                attn_neigh: Tensor::new(vec![2, 1], vec![-0.2, 0.4]).unwrap(),
            }],
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let z = tape.constant(z_t);
        let out = graph_attention(&mut tape, &vars, &g, z).unwrap();

        // node 0: s_self(0) = 0.3, s_neigh(0) = -0.2, s_neigh(1) = 0.4
        // scores over [self=0, neighbor=1] = [0.1, 0.7]
        let e0 = (0.1f64).exp();
        let e1 = (0.7f64).exp();
        let w_self = e0 / (e0 + e1);
        let w_n = e1 / (e0 + e1);
        // output_0 = w_self * z0 + w_n * z1 = [w_self, w_n]
        let got = tape.value(out);
        assert!((got.get(&[0, 0]) - w_self).abs() < 1e-12);
        assert!((got.get(&[0, 1]) - w_n).abs() < 1e-12);

        // node 1: s_self(1) = 0.1, neighbor 0: s_neigh(0) = -0.2
        // scores = [0.1 + 0.4, 0.1 - 0.2] = [0.5, -0.1]
        let f0 = (0.5f64).exp();
        let f1 = (-0.1f64).exp();
        assert!((got.get(&[1, 0]) - f1 / (f0 + f1)).abs() < 1e-12);
        assert!((got.get(&[1, 1]) - f0 / (f0 + f1)).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_are_normalized_and_gradients_flow() {
        use crate::tensor::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let n = 6;
        let f = 3;
        let data: Vec<f64> = (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z_t = Tensor::new(vec![n, f], data).unwrap();
        let g = build_knn_graph(&z_t, 2);
        let params = GraphAttentionParams::init(&mut rng, f, 4, 2);

        let p = params.clone();
        let gg = g.clone();
        let report = grad_check(
            move |t, z| {
                let vars = p.bind(t);
                let out = graph_attention(t, &vars, &gg, z)?;
                let sq = t.square(out)?;
                t.sum_all(sq)
            },
            &z_t,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
    }
}
