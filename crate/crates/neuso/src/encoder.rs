//! Query graph encoder: label embeddings, feature initialization,
//! triangle-attention layers, and attention pooling.
//!
//! Each layer updates a vertex from three sources: its own projection,
//! attention over its neighbors (paired with the connecting edge's
//! features), and attention over the edges *between* its neighbors —
//! the edges that close triangles with it. The triangle term is what
//! lifts the encoder past plain message passing: two graphs that agree
//! under 1-WL color refinement but differ in triangle structure get
//! different embeddings.
//!
//! Two forward paths exist: a taped one for training and a plain one for
//! inference. Both call the same tensor routines in the same order, so
//! their outputs are bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::graph::{LabeledGraph, VertexSet};
use crate::matcher::CandidateContext;
use crate::numerics::{NodeId, NumericsError, ParamId, ParamStore, Tape, Tensor};

#[derive(Error, Debug)]
pub enum EncoderError {
    #[error("query label {0} not covered by the embedding table")]
    UnknownLabel(u32),
    #[error("feature width {found} does not match encoder input width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("pooling over the empty vertex set")]
    EmptyPool,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-label embedding rows derived from the label-augmented data graph.
#[derive(Debug, Clone)]
pub struct LabelEmbeddings {
    pub table: Vec<Vec<f64>>,
    pub d_label: usize,
}

/// Deterministic truncated spectral embedding of the label-augmented
/// graph: one extra vertex per label, one edge `(u, L(u))` per vertex.
/// Subspace iteration on the symmetric-normalized adjacency, started
/// from degree-derived columns (so graph automorphisms are preserved
/// exactly), sign-fixed by each column's largest-magnitude entry. Rows
/// are taken at the label vertices.
pub fn build_label_embeddings(g: &LabeledGraph, d_label: usize, seed: u64) -> LabelEmbeddings {
    let n = g.vertex_count();
    let sigma = g.label_alphabet_size() as usize;
    let n_a = n + sigma;

    // label-augmented adjacency
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n_a];
    for u in 0..n as u32 {
        for &v in g.neighbors(u) {
            if u < v {
                adj[u as usize].push(v);
                adj[v as usize].push(u);
            }
        }
        let lv = (n + g.label(u) as usize) as u32;
        adj[u as usize].push(lv);
        adj[lv as usize].push(u);
    }

    // D^{-1/2}(A+I)D^{-1/2} with the self-loop counted in the degree
    let inv_sqrt_deg: Vec<f64> = adj
        .iter()
        .map(|l| 1.0 / ((l.len() + 1) as f64).sqrt())
        .collect();
    let spmv = |x: &[f64], y: &mut [f64]| {
        for u in 0..n_a {
            let mut acc = x[u] * inv_sqrt_deg[u] * inv_sqrt_deg[u];
            for &v in &adj[u] {
                acc += x[v as usize] * inv_sqrt_deg[u] * inv_sqrt_deg[v as usize];
            }
            y[u] = acc;
        }
    };

    // seeded global phases keep automorphism symmetry: every vertex of a
    // given degree gets the same initial coordinates
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    use rand::Rng;
    let mut cols: Vec<Vec<f64>> = (0..d_label)
        .map(|_| {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let omega: f64 = rng.gen_range(0.5..3.0);
            (0..n_a)
                .map(|u| (theta + omega * (adj[u].len() as f64 + 1.0)).cos())
                .collect()
        })
        .collect();

    let orthonormalize = |cols: &mut Vec<Vec<f64>>| {
        for j in 0..cols.len() {
            for i in 0..j {
                let dot: f64 = cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                let (head, tail) = cols.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= dot * y;
                }
            }
            let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                cols[j].iter_mut().for_each(|x| *x = 0.0);
            } else {
                cols[j].iter_mut().for_each(|x| *x /= norm);
            }
        }
    };

    let mut scratch = vec![0.0; n_a];
    for round in 0..30 {
        for col in cols.iter_mut() {
            spmv(col, &mut scratch);
            col.copy_from_slice(&scratch);
        }
        if round % 5 == 4 {
            orthonormalize(&mut cols);
        }
    }
    orthonormalize(&mut cols);

    // order columns by Rayleigh quotient, largest first
    let mut quotients: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, col)| {
            if col.iter().all(|&x| x == 0.0) {
                return (j, f64::NEG_INFINITY);
            }
            spmv(col, &mut scratch);
            let r: f64 = col.iter().zip(&scratch).map(|(a, b)| a * b).sum();
            (j, r)
        })
        .collect();
    quotients
        .sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));

    let mut table = vec![vec![0.0; d_label]; sigma];
    for (slot, &(j, _)) in quotients.iter().enumerate() {
        let col = &cols[j];
        // sign fix: first largest-magnitude entry becomes positive
        let mut best = 0usize;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        for l in 0..sigma {
            table[l][slot] = sign * col[n + l];
        }
    }
    LabelEmbeddings { table, d_label }
}

/// Encoder hyperparameters. Defaults: 128-wide initial features
/// (d_label = 127 plus the candidate-count scalar), two 64-wide layers,
/// four heads.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub d_label: usize,
    pub layer_widths: Vec<usize>,
    pub heads: usize,
    pub attn_dim: usize,
    pub pool_dim: usize,
    /// Normalize pooling coefficients with a softmax instead of using the
    /// raw inner products. Off by default.
    pub pool_softmax: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_label: 127,
            layer_widths: vec![64, 64],
            heads: 4,
            attn_dim: 16,
            pool_dim: 64,
            pool_softmax: false,
        }
    }
}

impl EncoderConfig {
    /// A small configuration for tests where finite differences over
    /// every coordinate must stay cheap.
    pub fn tiny() -> Self {
        EncoderConfig {
            d_label: 7,
            layer_widths: vec![8, 8],
            heads: 2,
            attn_dim: 4,
            pool_dim: 8,
            pool_softmax: false,
        }
    }

    pub fn input_width(&self) -> usize {
        self.d_label + 1
    }

    pub fn edge_input_width(&self) -> usize {
        2 * self.input_width() + 1
    }

    /// Width of the final vertex embeddings.
    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("at least one layer")
    }
}

struct HeadParams {
    w_self: ParamId,
    theta: ParamId,
    psi: ParamId,
    w1: ParamId,
    w2: ParamId,
    a: ParamId,
    b: ParamId,
}

struct LayerParams {
    heads: Vec<HeadParams>,
    w_e: ParamId,
}

/// All learnable encoder tensors, registered in a [`ParamStore`].
pub struct EncoderParams {
    pub config: EncoderConfig,
    layers: Vec<LayerParams>,
    pool_k1: ParamId,
    pool_k2: ParamId,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, config: EncoderConfig, rng: &mut ChaCha12Rng) -> Self {
        assert!(!config.layer_widths.is_empty());
        assert!(config
            .layer_widths
            .iter()
            .all(|w| w % config.heads == 0 && *w > 0));
        let mut layers = Vec::new();
        let mut v_in = config.input_width();
        let mut e_in = config.edge_input_width();
        for (k, &width) in config.layer_widths.iter().enumerate() {
            let head_width = width / config.heads;
            let heads = (0..config.heads)
                .map(|h| {
                    let tag = |p: &str| format!("enc.l{k}.h{h}.{p}");
                    HeadParams {
                        w_self: store.register_xavier(tag("w_self"), head_width, v_in, rng),
                        theta: store.register_xavier(tag("theta"), head_width, v_in, rng),
                        psi: store.register_xavier(tag("psi"), head_width, e_in, rng),
                        w1: store.register_xavier(tag("w1"), config.attn_dim, v_in, rng),
                        w2: store.register_xavier(tag("w2"), config.attn_dim, e_in, rng),
                        a: store.register_xavier_vec(tag("a"), 2 * config.attn_dim, rng),
                        b: store.register_xavier_vec(tag("b"), 2 * config.attn_dim, rng),
                    }
                })
                .collect();
            let w_e = store.register_xavier(format!("enc.l{k}.w_e"), width, 2 * width, rng);
            layers.push(LayerParams { heads, w_e });
            v_in = width;
            e_in = width;
        }
        let m = config.output_width();
        let pool_k1 = store.register_xavier("enc.pool.k1", config.pool_dim, m, rng);
        let pool_k2 = store.register_xavier("enc.pool.k2", config.pool_dim, m, rng);
        EncoderParams {
            config,
            layers,
            pool_k1,
            pool_k2,
        }
    }

    /// Zeroes every triangle projection Ψ and attention vector b, which
    /// turns each layer into a plain message-passing update.
    pub fn disable_triangle_term(&self, store: &mut ParamStore) {
        for layer in &self.layers {
            for head in &layer.heads {
                for id in [head.psi, head.b] {
                    store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }
}

/// Canonical edge list, per-vertex incidence, and the triangle index
/// `E_N(u)`: for each vertex, the edges joining two of its neighbors.
#[derive(Debug, Clone)]
pub struct QueryTopology {
    pub edges: Vec<(u32, u32)>,
    /// Per vertex: `(neighbor, edge id)` pairs, neighbor ascending.
    pub incident: Vec<Vec<(u32, usize)>>,
    /// Per vertex: ids of edges in `E_N(u)`.
    pub tri_edges: Vec<Vec<usize>>,
}

impl QueryTopology {
    pub fn new(q: &LabeledGraph) -> Self {
        let edges = q.edges();
        let mut edge_id = std::collections::BTreeMap::new();
        for (i, &e) in edges.iter().enumerate() {
            edge_id.insert(e, i);
        }
        let n = q.vertex_count();
        let mut incident = vec![Vec::new(); n];
        for u in 0..n as u32 {
            for &v in q.neighbors(u) {
                let key = (u.min(v), u.max(v));
                incident[u as usize].push((v, edge_id[&key]));
            }
        }
        let mut tri_edges = vec![Vec::new(); n];
        for u in 0..n as u32 {
            let nbrs = q.neighbors(u);
            for (i, &v1) in nbrs.iter().enumerate() {
                for &v2 in &nbrs[i + 1..] {
                    if let Some(&eid) = edge_id.get(&(v1, v2)) {
                        tri_edges[u as usize].push(eid);
                    }
                }
            }
        }
        QueryTopology {
            edges,
            incident,
            tri_edges,
        }
    }

    /// Triangle count via Σ|E_N(u)| = 3|Δ|.
    pub fn triangle_count(&self) -> usize {
        self.tri_edges.iter().map(Vec::len).sum::<usize>() / 3
    }
}

/// Constant input features: per vertex the label embedding concatenated
/// with `log(1+|C(u)|)`, per edge both endpoint features plus
/// `log(1+|C(u1,u2)|)`.
#[derive(Debug, Clone)]
pub struct QueryFeatures {
    pub vertex: Vec<Tensor>,
    pub edge: Vec<Tensor>,
    pub topology: QueryTopology,
}

pub fn init_features(
    q: &LabeledGraph,
    ctx: &CandidateContext,
    emb: &LabelEmbeddings,
) -> Result<QueryFeatures, EncoderError> {
    let topology = QueryTopology::new(q);
    let mut vertex = Vec::with_capacity(q.vertex_count());
    for u in 0..q.vertex_count() as u32 {
        let label = q.label(u);
        let row = emb
            .table
            .get(label as usize)
            .ok_or(EncoderError::UnknownLabel(label))?;
        let mut data = row.clone();
        data.push((1.0 + ctx.candidate_count(u) as f64).ln());
        vertex.push(Tensor::vector(data));
    }
    let edge = topology
        .edges
        .iter()
        .map(|&(u1, u2)| {
            let mut data = vertex[u1 as usize].data().to_vec();
            data.extend_from_slice(vertex[u2 as usize].data());
            data.push((1.0 + ctx.edge_count(u1, u2) as f64).ln());
            Tensor::vector(data)
        })
        .collect();
    Ok(QueryFeatures {
        vertex,
        edge,
        topology,
    })
}

/// Attention-score slots evaluated per layer, shared across heads:
/// `phi` counts (vertex, incident edge) pairs (= 2|E|), `tau` counts
/// (vertex, neighbor-pair edge) pairs (= 3|Δ|).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionCounts {
    pub phi_per_layer: Vec<usize>,
    pub tau_per_layer: Vec<usize>,
}

/// Final vertex embeddings plus the triangle index and score-slot counts.
#[derive(Debug, Clone)]
pub struct EncodedQuery {
    pub embeddings: Vec<Tensor>,
    pub triangle_index: Vec<Vec<(u32, u32)>>,
    pub counts: AttentionCounts,
}

/// Taped encoder output: one node per vertex embedding.
pub struct TapedEncoding {
    pub vertex_nodes: Vec<NodeId>,
    pub counts: AttentionCounts,
}

/// Runs the encoder on a tape (for training).
pub fn encode_query_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    features: &QueryFeatures,
    expected_width: usize,
) -> Result<TapedEncoding, EncoderError> {
    if let Some(v) = features.vertex.first() {
        if v.len() != expected_width {
            return Err(EncoderError::WidthMismatch {
                expected: expected_width,
                found: v.len(),
            });
        }
    }
    let topo = &features.topology;
    let n = features.vertex.len();
    let mut xv: Vec<NodeId> = features
        .vertex
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let mut xe: Vec<NodeId> = features
        .edge
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let mut counts = AttentionCounts::default();

    for layer in &params.layers {
        counts
            .phi_per_layer
            .push(topo.incident.iter().map(Vec::len).sum());
        counts
            .tau_per_layer
            .push(topo.tri_edges.iter().map(Vec::len).sum());

        let mut head_outputs: Vec<Vec<NodeId>> = vec![Vec::with_capacity(params.config.heads); n];
        for head in &layer.heads {
            let w_self = tape.param(store, head.w_self);
            let theta = tape.param(store, head.theta);
            let psi = tape.param(store, head.psi);
            let w1 = tape.param(store, head.w1);
            let w2 = tape.param(store, head.w2);
            let a = tape.param(store, head.a);
            let b = tape.param(store, head.b);

            let pre1: Vec<NodeId> = xv
                .iter()
                .map(|&x| tape.matmul(w1, x))
                .collect::<Result<_, _>>()?;
            let pre2: Vec<NodeId> = xe
                .iter()
                .map(|&e| tape.matmul(w2, e))
                .collect::<Result<_, _>>()?;
            let projected: Vec<NodeId> = xv
                .iter()
                .map(|&x| tape.matmul(theta, x))
                .collect::<Result<_, _>>()?;
            let edge_projected: Vec<NodeId> = xe
                .iter()
                .map(|&e| tape.matmul(psi, e))
                .collect::<Result<_, _>>()?;

            // one flat score vector per aggregation, softmaxed per vertex
            let mut phi_scores = Vec::new();
            let mut phi_groups = Vec::with_capacity(n);
            for u in 0..n {
                let start = phi_scores.len();
                for &(v, eid) in &topo.incident[u] {
                    let _ = v;
                    let cat = tape.concat(&[pre1[u], pre2[eid]])?;
                    let raw = tape.dot(a, cat)?;
                    phi_scores.push(tape.leaky_relu(raw, 0.2)?);
                }
                phi_groups.push((start, phi_scores.len() - start));
            }
            let mut tau_scores = Vec::new();
            let mut tau_groups = Vec::with_capacity(n);
            for u in 0..n {
                let start = tau_scores.len();
                for &eid in &topo.tri_edges[u] {
                    let cat = tape.concat(&[pre1[u], pre2[eid]])?;
                    let raw = tape.dot(b, cat)?;
                    tau_scores.push(tape.leaky_relu(raw, 0.2)?);
                }
                tau_groups.push((start, tau_scores.len() - start));
            }
            let alpha = if phi_scores.is_empty() {
                None
            } else {
                let stacked = tape.stack(&phi_scores)?;
                Some(tape.softmax_groups(stacked, phi_groups.clone())?)
            };
            let beta = if tau_scores.is_empty() {
                None
            } else {
                let stacked = tape.stack(&tau_scores)?;
                Some(tape.softmax_groups(stacked, tau_groups.clone())?)
            };

            for u in 0..n {
                let mut acc = tape.matmul(w_self, xv[u])?;
                let (start, len) = phi_groups[u];
                if len > 0 {
                    let weights = tape.slice(alpha.unwrap(), start, len)?;
                    let items: Vec<NodeId> = topo.incident[u]
                        .iter()
                        .map(|&(v, _)| projected[v as usize])
                        .collect();
                    let phi = tape.linear_comb(weights, &items)?;
                    acc = tape.add(acc, phi)?;
                }
                let (start, len) = tau_groups[u];
                if len > 0 {
                    let weights = tape.slice(beta.unwrap(), start, len)?;
                    let items: Vec<NodeId> = topo.tri_edges[u]
                        .iter()
                        .map(|&eid| edge_projected[eid])
                        .collect();
                    let tau = tape.linear_comb(weights, &items)?;
                    acc = tape.add(acc, tau)?;
                }
                head_outputs[u].push(tape.relu(acc)?);
            }
        }

        let next_xv: Vec<NodeId> = head_outputs
            .into_iter()
            .map(|heads| tape.concat(&heads))
            .collect::<Result<_, _>>()?;
        xv = next_xv;
        let w_e = tape.param(store, layer.w_e);
        let next_xe: Vec<NodeId> = topo
            .edges
            .iter()
            .map(|&(u1, u2)| {
                let cat = tape.concat(&[xv[u1 as usize], xv[u2 as usize]])?;
                tape.matmul(w_e, cat)
            })
            .collect::<Result<_, _>>()?;
        xe = next_xe;
    }

    Ok(TapedEncoding {
        vertex_nodes: xv,
        counts,
    })
}

/// Plain-inference encoder: runs the taped forward on a scratch tape and
/// extracts the values, so the two paths cannot drift apart.
pub fn encode_query(
    store: &ParamStore,
    params: &EncoderParams,
    features: &QueryFeatures,
) -> Result<EncodedQuery, EncoderError> {
    let mut tape = Tape::new();
    let taped = encode_query_tape(
        &mut tape,
        store,
        params,
        features,
        params.config.input_width(),
    )?;
    let embeddings = taped
        .vertex_nodes
        .iter()
        .map(|&id| tape.value(id).clone())
        .collect();
    let triangle_index = features
        .topology
        .tri_edges
        .iter()
        .map(|eids| {
            eids.iter()
                .map(|&eid| features.topology.edges[eid])
                .collect()
        })
        .collect();
    Ok(EncodedQuery {
        embeddings,
        triangle_index,
        counts: taped.counts,
    })
}

/// Pools vertex embeddings over `s` with the self-attention weights
/// `α_u = (K1·x_u)·(K2·x_u)` (raw inner products unless the config asks
/// for a softmax). Taped version.
pub fn pool_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    vertex_nodes: &[NodeId],
    s: VertexSet,
) -> Result<NodeId, EncoderError> {
    if s.is_empty() {
        return Err(EncoderError::EmptyPool);
    }
    let k1 = tape.param(store, params.pool_k1);
    let k2 = tape.param(store, params.pool_k2);
    let mut weights = Vec::with_capacity(s.len());
    let mut items = Vec::with_capacity(s.len());
    for u in s.iter() {
        let x = vertex_nodes[u as usize];
        let a = tape.matmul(k1, x)?;
        let b = tape.matmul(k2, x)?;
        weights.push(tape.dot(a, b)?);
        items.push(x);
    }
    let mut stacked = tape.stack(&weights)?;
    if params.config.pool_softmax {
        let len = s.len();
        stacked = tape.softmax_groups(stacked, vec![(0, len)])?;
    }
    Ok(tape.linear_comb(stacked, &items)?)
}

/// Plain-inference pooling over precomputed embeddings.
pub fn pool(
    store: &ParamStore,
    params: &EncoderParams,
    enc: &EncodedQuery,
    s: VertexSet,
) -> Result<Tensor, EncoderError> {
    if s.is_empty() {
        return Err(EncoderError::EmptyPool);
    }
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = enc
        .embeddings
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let pooled = pool_tape(&mut tape, store, params, &nodes, s)?;
    Ok(tape.value(pooled).clone())
}

/// Reusable per-query pooling cache for the planner: the attention
/// weights and embeddings are fixed after one encoder pass, so pooling a
/// subquery is a weighted sum.
pub struct PoolCache {
    weights: Vec<f64>,
    embeddings: Vec<Tensor>,
    softmax: bool,
}

impl PoolCache {
    pub fn new(
        store: &ParamStore,
        params: &EncoderParams,
        enc: &EncodedQuery,
    ) -> Result<Self, EncoderError> {
        let k1 = store.get(params.pool_k1);
        let k2 = store.get(params.pool_k2);
        let mut weights = Vec::with_capacity(enc.embeddings.len());
        for x in &enc.embeddings {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let k1n = tape.constant(k1.clone());
            let k2n = tape.constant(k2.clone());
            let a = tape.matmul(k1n, xn)?;
            let b = tape.matmul(k2n, xn)?;
            let d = tape.dot(a, b)?;
            weights.push(tape.value(d).scalar_value());
        }
        Ok(PoolCache {
            weights,
            embeddings: enc.embeddings.clone(),
            softmax: params.config.pool_softmax,
        })
    }

    pub fn pooled(&self, s: VertexSet) -> Result<Tensor, EncoderError> {
        if s.is_empty() {
            return Err(EncoderError::EmptyPool);
        }
        let dim = self.embeddings[0].len();
        let mut raw: Vec<f64> = s.iter().map(|u| self.weights[u as usize]).collect();
        if self.softmax {
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = raw.iter().map(|x| (x - max).exp()).sum();
            for x in &mut raw {
                *x = (*x - max).exp() / denom;
            }
        }
        let mut out = vec![0.0; dim];
        for (w, u) in raw.iter().zip(s.iter()) {
            for (o, x) in out.iter_mut().zip(self.embeddings[u as usize].data()) {
                *o += w * x;
            }
        }
        Ok(Tensor::vector(out))
    }
}
