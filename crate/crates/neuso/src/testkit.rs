//! Reference implementations and generators used by the test suites.
//!
//! Everything here is deliberately naive and independent of the engine's
//! fast paths: brute-force enumeration over injective maps, color
//! refinement by literal recoloring, Dijkstra over explicit edge lists.
//! Slow by design; none of it is used by the engine itself.

use rand::prelude::*;

use crate::graph::{LabeledGraph, VertexSet};

/// Random undirected labeled graph: each pair becomes an edge with
/// probability `edge_prob`, labels uniform over `label_count`.
pub fn random_graph<R: Rng>(
    rng: &mut R,
    max_vertices: usize,
    edge_prob: f64,
    label_count: u32,
) -> LabeledGraph {
    let n = rng.gen_range(2..=max_vertices);
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..label_count)).collect();
    let mut edges = Vec::new();
    for u in 0..n as u32 {
        for v in u + 1..n as u32 {
            if rng.gen_bool(edge_prob) {
                edges.push((u, v));
            }
        }
    }
    LabeledGraph::new(labels, &edges).unwrap()
}

/// Extracts a random connected induced subgraph of `g` with at most
/// `max_size` vertices (at least one) via random walk.
pub fn random_connected_query<R: Rng>(
    rng: &mut R,
    g: &LabeledGraph,
    max_size: usize,
) -> LabeledGraph {
    let size = rng.gen_range(1..=max_size.min(g.vertex_count()));
    loop {
        let start = rng.gen_range(0..g.vertex_count()) as u32;
        let mut chosen = vec![start];
        let mut cur = start;
        let mut tries = 0;
        while chosen.len() < size && tries < 200 {
            tries += 1;
            let nbrs = g.neighbors(cur);
            if nbrs.is_empty() {
                break;
            }
            cur = nbrs[rng.gen_range(0..nbrs.len())];
            if !chosen.contains(&cur) {
                chosen.push(cur);
            }
        }
        if chosen.len() == size {
            chosen.sort_unstable();
            let set = VertexSet::from_iter(chosen.iter().copied());
            let (q, _) = g.induced(set);
            return q;
        }
        // graph may not have a connected region of that size from here
        if size > 1 && tries >= 200 {
            let set = VertexSet::from_iter(chosen.iter().copied());
            if !set.is_empty() {
                let (q, _) = g.induced(set);
                return q;
            }
        }
    }
}

/// All subgraph isomorphisms of `q` in `g` as vectors indexed by query
/// vertex, by exhaustive search over injective maps.
pub fn brute_force_matches(g: &LabeledGraph, q: &LabeledGraph) -> Vec<Vec<u32>> {
    brute_force_matches_in_candidates(g, q, |_, _| true)
}

/// As [`brute_force_matches`], additionally requiring every image to pass
/// the given membership predicate (used to restrict to candidate spaces).
pub fn brute_force_matches_in_candidates(
    g: &LabeledGraph,
    q: &LabeledGraph,
    admit: impl Fn(u32, u32) -> bool,
) -> Vec<Vec<u32>> {
    let n = q.vertex_count();
    let mut out = Vec::new();
    let mut assign: Vec<u32> = Vec::with_capacity(n);
    let mut used = vec![false; g.vertex_count()];
    fn rec(
        g: &LabeledGraph,
        q: &LabeledGraph,
        admit: &impl Fn(u32, u32) -> bool,
        assign: &mut Vec<u32>,
        used: &mut Vec<bool>,
        out: &mut Vec<Vec<u32>>,
    ) {
        let u = assign.len() as u32;
        if u as usize == q.vertex_count() {
            out.push(assign.clone());
            return;
        }
        for v in 0..g.vertex_count() as u32 {
            if used[v as usize] || g.label(v) != q.label(u) || !admit(u, v) {
                continue;
            }
            let edges_ok = q.neighbors(u).iter().all(|&w| {
                if w < u {
                    g.has_edge(assign[w as usize], v)
                } else {
                    true
                }
            });
            if !edges_ok {
                continue;
            }
            assign.push(v);
            used[v as usize] = true;
            rec(g, q, admit, assign, used, out);
            assign.pop();
            used[v as usize] = false;
        }
    }
    rec(g, q, &admit, &mut assign, &mut used, &mut out);
    out
}

/// Every prefix-connected permutation of the query vertices.
pub fn all_valid_orders(q: &LabeledGraph) -> Vec<Vec<u32>> {
    let n = q.vertex_count();
    let mut out = Vec::new();
    let mut order = Vec::with_capacity(n);
    fn rec(q: &LabeledGraph, order: &mut Vec<u32>, placed: VertexSet, out: &mut Vec<Vec<u32>>) {
        if order.len() == q.vertex_count() {
            out.push(order.clone());
            return;
        }
        for v in 0..q.vertex_count() as u32 {
            if placed.contains(v) {
                continue;
            }
            if !order.is_empty() && !q.neighbors(v).iter().any(|&w| placed.contains(w)) {
                continue;
            }
            order.push(v);
            rec(q, order, placed.insert(v), out);
            order.pop();
        }
    }
    rec(q, &mut order, VertexSet::EMPTY, &mut out);
    out
}

/// Edge list of the complete graph on `n` vertices.
pub fn complete_edges(n: u32) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            edges.push((u, v));
        }
    }
    edges
}

/// 1-WL color refinement. Returns the stable multiset of vertex colors,
/// canonicalized so that two graphs are 1-WL-equivalent iff their
/// signatures are equal.
pub fn color_refinement_signature(g: &LabeledGraph) -> Vec<u64> {
    use std::collections::BTreeMap;
    let n = g.vertex_count();
    let mut colors: Vec<u64> = (0..n).map(|v| g.label(v as u32) as u64).collect();
    for _ in 0..n {
        // recolor by (own color, sorted neighbor colors)
        let mut keys: Vec<(u64, Vec<u64>)> = (0..n)
            .map(|v| {
                let mut nbr: Vec<u64> = g
                    .neighbors(v as u32)
                    .iter()
                    .map(|&w| colors[w as usize])
                    .collect();
                nbr.sort_unstable();
                (colors[v], nbr)
            })
            .collect();
        let mut palette: BTreeMap<(u64, Vec<u64>), u64> = BTreeMap::new();
        let mut sorted_keys = keys.clone();
        sorted_keys.sort();
        sorted_keys.dedup();
        for (i, k) in sorted_keys.into_iter().enumerate() {
            palette.insert(k, i as u64);
        }
        let next: Vec<u64> = keys.drain(..).map(|k| palette[&k]).collect();
        if next == colors {
            break;
        }
        colors = next;
    }
    colors.sort_unstable();
    colors
}

/// True iff the two graphs receive identical stable color histograms.
pub fn one_wl_equivalent(a: &LabeledGraph, b: &LabeledGraph) -> bool {
    // joint refinement keeps the palettes comparable
    let joint = disjoint_union(a, b);
    let n_a = a.vertex_count();
    use std::collections::BTreeMap;
    let n = joint.vertex_count();
    let mut colors: Vec<u64> = (0..n).map(|v| joint.label(v as u32) as u64).collect();
    for _ in 0..n {
        let mut keys: Vec<(u64, Vec<u64>)> = (0..n)
            .map(|v| {
                let mut nbr: Vec<u64> = joint
                    .neighbors(v as u32)
                    .iter()
                    .map(|&w| colors[w as usize])
                    .collect();
                nbr.sort_unstable();
                (colors[v], nbr)
            })
            .collect();
        let mut palette: BTreeMap<(u64, Vec<u64>), u64> = BTreeMap::new();
        let mut sorted_keys = keys.clone();
        sorted_keys.sort();
        sorted_keys.dedup();
        for (i, k) in sorted_keys.into_iter().enumerate() {
            palette.insert(k, i as u64);
        }
        let next: Vec<u64> = keys.drain(..).map(|k| palette[&k]).collect();
        if next == colors {
            break;
        }
        colors = next;
    }
    let mut ca = colors[..n_a].to_vec();
    let mut cb = colors[n_a..].to_vec();
    ca.sort_unstable();
    cb.sort_unstable();
    ca == cb
}

/// Disjoint union with `b`'s vertex ids shifted past `a`'s.
pub fn disjoint_union(a: &LabeledGraph, b: &LabeledGraph) -> LabeledGraph {
    let shift = a.vertex_count() as u32;
    let mut labels = a.labels().to_vec();
    labels.extend_from_slice(b.labels());
    let mut edges = a.edges();
    edges.extend(b.edges().into_iter().map(|(u, v)| (u + shift, v + shift)));
    LabeledGraph::new(labels, &edges).unwrap()
}

/// Cycle graph C_n with uniform label 0.
pub fn cycle(n: u32) -> LabeledGraph {
    let edges: Vec<(u32, u32)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    LabeledGraph::new(vec![0; n as usize], &edges).unwrap()
}

/// Dijkstra over an explicit weighted digraph given as adjacency lists of
/// `(target, weight)`. Returns distances from `source` (u64::MAX when
/// unreachable).
pub fn dijkstra(adj: &[Vec<(usize, u64)>], source: usize) -> Vec<u64> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut dist = vec![u64::MAX; adj.len()];
    dist[source] = 0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse((0u64, source)));
    while let Some(Reverse((d, v))) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(w, cost) in &adj[v] {
            let nd = d + cost;
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(Reverse((nd, w)));
            }
        }
    }
    dist
}

/// Spearman rank correlation of two equally long samples; ties get the
/// average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Distance between two multisets of embedding vectors: both sides are
/// sorted lexicographically and compared position by position. Zero iff
/// the multisets are identical; large when any row differs.
pub fn multiset_distance(a: &[crate::numerics::Tensor], b: &[crate::numerics::Tensor]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let sorted = |xs: &[crate::numerics::Tensor]| {
        let mut rows: Vec<Vec<f64>> = xs.iter().map(|t| t.data().to_vec()).collect();
        rows.sort_by(|x, y| {
            for (p, q) in x.iter().zip(y) {
                match p.partial_cmp(q).unwrap() {
                    std::cmp::Ordering::Equal => continue,
                    other => return other,
                }
            }
            std::cmp::Ordering::Equal
        });
        rows
    };
    let (ra, rb) = (sorted(a), sorted(b));
    let mut max = 0.0f64;
    for (x, y) in ra.iter().zip(&rb) {
        for (p, q) in x.iter().zip(y) {
            max = max.max((p - q).abs());
        }
    }
    max
}

/// Count of triangles by sorted-adjacency intersection, independent of
/// the encoder's triangle index.
pub fn triangle_count(g: &LabeledGraph) -> usize {
    let mut count = 0;
    for (u, v) in g.edges() {
        let (a, b) = (g.neighbors(u), g.neighbors(v));
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    if a[i] > v {
                        count += 1;
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
    }
    count
}
