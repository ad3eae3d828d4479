//! Storage, parsing, and canonical identity for vertex-labeled graphs.
//!
//! Both data graphs and query graphs use [`LabeledGraph`]: an undirected
//! vertex-labeled graph with sorted adjacency lists. Query graphs are
//! additionally capped at 64 vertices so that a subquery state fits in a
//! single [`VertexSet`] machine word.

use std::fmt::Write as _;

use thiserror::Error;

/// Hard cap on query size; a subquery state is one `u64` bitmask.
pub const MAX_QUERY_VERTICES: usize = 64;

#[derive(Error, Debug)]
pub enum GraphParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate edge ({u}, {v})")]
    DuplicateEdge { line: usize, u: u32, v: u32 },
    #[error("line {line}: self-loop on vertex {v}")]
    SelfLoop { line: usize, v: u32 },
    #[error("line {line}: vertex id {id} out of range (vertex count {count})")]
    OutOfRange { line: usize, id: u64, count: usize },
    #[error("declared {declared} {what}, found {found}")]
    CountMismatch {
        what: &'static str,
        declared: usize,
        found: usize,
    },
    #[error("line {line}: declared degree {declared} of vertex {v} does not match adjacency ({actual})")]
    DegreeMismatch {
        line: usize,
        v: u32,
        declared: usize,
        actual: usize,
    },
    #[error("vertex ids are not dense 0..{count}: id {id} repeated or missing")]
    NonDenseIds { count: usize, id: u32 },
}

/// An undirected vertex-labeled graph with sorted adjacency lists.
///
/// Immutable after construction; safe to share across concurrent readers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledGraph {
    labels: Vec<u32>,
    adjacency: Vec<Vec<u32>>,
    edge_count: usize,
    label_alphabet_size: u32,
}

impl LabeledGraph {
    /// Builds a graph from per-vertex labels and an edge list.
    /// Duplicate edges and self-loops are errors.
    pub fn new(labels: Vec<u32>, edges: &[(u32, u32)]) -> Result<Self, GraphParseError> {
        let n = labels.len();
        let mut adjacency = vec![Vec::new(); n];
        for (i, &(u, v)) in edges.iter().enumerate() {
            let line = i + 1;
            if u == v {
                return Err(GraphParseError::SelfLoop { line, v });
            }
            for id in [u, v] {
                if id as usize >= n {
                    return Err(GraphParseError::OutOfRange {
                        line,
                        id: id as u64,
                        count: n,
                    });
                }
            }
            adjacency[u as usize].push(v);
            adjacency[v as usize].push(u);
        }
        for (v, list) in adjacency.iter_mut().enumerate() {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                let dup = list
                    .windows(2)
                    .find(|w| w[0] == w[1])
                    .map(|w| w[0])
                    .unwrap();
                return Err(GraphParseError::DuplicateEdge {
                    line: 0,
                    u: v as u32,
                    v: dup,
                });
            }
        }
        let label_alphabet_size = labels.iter().copied().max().map_or(1, |m| m + 1);
        Ok(Self {
            labels,
            adjacency,
            edge_count: edges.len(),
            label_alphabet_size,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// |Σ|: one more than the largest label id present.
    pub fn label_alphabet_size(&self) -> u32 {
        self.label_alphabet_size
    }

    pub fn label(&self, v: u32) -> u32 {
        self.labels[v as usize]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Neighbors of `v`, strictly ascending.
    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.adjacency[v as usize]
    }

    pub fn degree(&self, v: u32) -> usize {
        self.adjacency[v as usize].len()
    }

    pub fn has_edge(&self, u: u32, v: u32) -> bool {
        self.adjacency[u as usize].binary_search(&v).is_ok()
    }

    /// Edges as canonical `(min, max)` pairs, ascending.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for u in 0..self.vertex_count() as u32 {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn average_degree(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            2.0 * self.edge_count as f64 / self.labels.len() as f64
        }
    }

    /// Serializes to the text format accepted by [`load_graph`].
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "t {} {}", self.vertex_count(), self.edge_count());
        for v in 0..self.vertex_count() as u32 {
            let _ = writeln!(out, "v {} {} {}", v, self.label(v), self.degree(v));
        }
        for (u, v) in self.edges() {
            let _ = writeln!(out, "e {} {}", u, v);
        }
        out
    }

    /// The induced subgraph on the query vertices in `s`, with vertices
    /// renumbered by ascending original id. Returns the subgraph and the
    /// original ids, position-aligned with the new ids.
    pub fn induced(&self, s: VertexSet) -> (LabeledGraph, Vec<u32>) {
        let verts: Vec<u32> = s.iter().collect();
        let mut pos = vec![u32::MAX; self.vertex_count()];
        for (i, &v) in verts.iter().enumerate() {
            pos[v as usize] = i as u32;
        }
        let labels: Vec<u32> = verts.iter().map(|&v| self.label(v)).collect();
        let mut edges = Vec::new();
        for &v in &verts {
            for &w in self.neighbors(v) {
                if v < w && s.contains(w) {
                    edges.push((pos[v as usize], pos[w as usize]));
                }
            }
        }
        let mut g = LabeledGraph::new(labels, &edges).expect("induced subgraph is valid");
        // Keep the parent alphabet so label-derived features stay aligned.
        g.label_alphabet_size = self.label_alphabet_size;
        (g, verts)
    }
}

/// Parses the one-record-per-line text format:
/// `t <|V|> <|E|>`, then `v <id> <label> <degree>` per vertex,
/// then `e <u> <v>` per undirected edge, each edge listed once.
pub fn load_graph(text: &str) -> Result<LabeledGraph, GraphParseError> {
    let mut vertex_count: usize = 0;
    let mut edge_count: usize = 0;
    let mut labels: Vec<u32> = Vec::new();
    let mut declared_degrees: Vec<usize> = Vec::new();
    let mut seen: Vec<bool> = Vec::new();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut edge_lines: Vec<usize> = Vec::new();
    let mut header_seen = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let tag = it.next().unwrap();
        let malformed = |msg: &str| GraphParseError::Malformed {
            line,
            msg: msg.to_string(),
        };
        let mut next_num = |what: &str| -> Result<u64, GraphParseError> {
            it.next()
                .ok_or_else(|| malformed(&format!("missing {what}")))?
                .parse::<u64>()
                .map_err(|_| malformed(&format!("invalid {what}")))
        };
        match tag {
            "t" => {
                if header_seen {
                    return Err(malformed("duplicate header"));
                }
                header_seen = true;
                vertex_count = next_num("vertex count")? as usize;
                edge_count = next_num("edge count")? as usize;
                labels = vec![0; vertex_count];
                declared_degrees = vec![0; vertex_count];
                seen = vec![false; vertex_count];
            }
            "v" => {
                if !header_seen {
                    return Err(malformed("vertex record before header"));
                }
                let id = next_num("vertex id")?;
                let label = next_num("label")?;
                let degree = next_num("degree")?;
                if id >= vertex_count as u64 {
                    return Err(GraphParseError::OutOfRange {
                        line,
                        id,
                        count: vertex_count,
                    });
                }
                let id = id as u32;
                if seen[id as usize] {
                    return Err(GraphParseError::NonDenseIds {
                        count: vertex_count,
                        id,
                    });
                }
                seen[id as usize] = true;
                labels[id as usize] = label as u32;
                declared_degrees[id as usize] = degree as usize;
            }
            "e" => {
                if !header_seen {
                    return Err(malformed("edge record before header"));
                }
                let u = next_num("endpoint")?;
                let v = next_num("endpoint")?;
                for id in [u, v] {
                    if id >= vertex_count as u64 {
                        return Err(GraphParseError::OutOfRange {
                            line,
                            id,
                            count: vertex_count,
                        });
                    }
                }
                let (u, v) = (u as u32, v as u32);
                if u == v {
                    return Err(GraphParseError::SelfLoop { line, v });
                }
                let key = (u.min(v), u.max(v));
                if edges.contains(&key) {
                    return Err(GraphParseError::DuplicateEdge {
                        line,
                        u: key.0,
                        v: key.1,
                    });
                }
                edges.push(key);
                edge_lines.push(line);
            }
            _ => return Err(malformed(&format!("unknown record tag '{tag}'"))),
        }
    }

    if !header_seen {
        return Err(GraphParseError::Malformed {
            line: 0,
            msg: "missing header".to_string(),
        });
    }
    if let Some(first_missing) = seen.iter().position(|&s| !s) {
        return Err(GraphParseError::NonDenseIds {
            count: vertex_count,
            id: first_missing as u32,
        });
    }
    if edges.len() != edge_count {
        return Err(GraphParseError::CountMismatch {
            what: "edges",
            declared: edge_count,
            found: edges.len(),
        });
    }
    let g = LabeledGraph::new(labels, &edges)?;
    for v in 0..vertex_count {
        if g.degree(v as u32) != declared_degrees[v] {
            return Err(GraphParseError::DegreeMismatch {
                line: 0,
                v: v as u32,
                declared: declared_degrees[v],
                actual: g.degree(v as u32),
            });
        }
    }
    Ok(g)
}

/// Parses only the `t <|V|> <|E|>` header of the text format.
pub fn parse_header(line: &str) -> Result<(usize, usize), GraphParseError> {
    let mut it = line.split_whitespace();
    let malformed = |msg: &str| GraphParseError::Malformed {
        line: 1,
        msg: msg.to_string(),
    };
    if it.next() != Some("t") {
        return Err(malformed("expected 't' header"));
    }
    let v = it
        .next()
        .ok_or_else(|| malformed("missing vertex count"))?
        .parse::<usize>()
        .map_err(|_| malformed("invalid vertex count"))?;
    let e = it
        .next()
        .ok_or_else(|| malformed("missing edge count"))?
        .parse::<usize>()
        .map_err(|_| malformed("invalid edge count"))?;
    Ok((v, e))
}

/// A set of query vertices as a 64-bit mask. Each state of the subquery
/// lattice is one such set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VertexSet(u64);

impl VertexSet {
    pub const EMPTY: VertexSet = VertexSet(0);

    pub fn from_bits(bits: u64) -> Self {
        VertexSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn singleton(v: u32) -> Self {
        debug_assert!((v as usize) < MAX_QUERY_VERTICES);
        VertexSet(1u64 << v)
    }

    /// All vertices `0..n`.
    pub fn full(n: usize) -> Self {
        debug_assert!(n <= MAX_QUERY_VERTICES);
        if n == 64 {
            VertexSet(u64::MAX)
        } else {
            VertexSet((1u64 << n) - 1)
        }
    }

    pub fn contains(self, v: u32) -> bool {
        self.0 >> v & 1 == 1
    }

    pub fn insert(self, v: u32) -> Self {
        VertexSet(self.0 | 1u64 << v)
    }

    pub fn remove(self, v: u32) -> Self {
        VertexSet(self.0 & !(1u64 << v))
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = u32> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let v = bits.trailing_zeros();
                bits &= bits - 1;
                Some(v)
            }
        })
    }

    pub fn from_iter(vs: impl IntoIterator<Item = u32>) -> Self {
        let mut s = VertexSet::EMPTY;
        for v in vs {
            s = s.insert(v);
        }
        s
    }
}

/// A permutation of query vertices driving backtracking enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingOrder(pub Vec<u32>);

impl MatchingOrder {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// True iff the induced subgraph on `s` is connected. The empty set is
/// admitted as connected (the root state of the subquery lattice).
pub fn connected(g: &LabeledGraph, s: VertexSet) -> bool {
    if s.is_empty() {
        return true;
    }
    let start = s.iter().next().unwrap();
    let mut visited = VertexSet::singleton(start);
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for &w in g.neighbors(v) {
            if s.contains(w) && !visited.contains(w) {
                visited = visited.insert(w);
                stack.push(w);
            }
        }
    }
    visited == s
}

/// True iff `o` is a permutation of the query vertices where every vertex
/// after the first has at least one earlier neighbor (prefix connectivity).
pub fn validate_order(q: &LabeledGraph, o: &MatchingOrder) -> bool {
    let n = q.vertex_count();
    if o.len() != n || n > MAX_QUERY_VERTICES {
        return false;
    }
    let mut placed = VertexSet::EMPTY;
    for (i, &v) in o.as_slice().iter().enumerate() {
        if v as usize >= n || placed.contains(v) {
            return false;
        }
        if i > 0 && !q.neighbors(v).iter().any(|&w| placed.contains(w)) {
            return false;
        }
        placed = placed.insert(v);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> LabeledGraph {
        LabeledGraph::new(vec![0, 0, 0], &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn parse_triangle() {
        let text = "t 3 3\nv 0 0 2\nv 1 0 2\nv 2 1 2\ne 0 1\ne 1 2\ne 0 2\n";
        let g = load_graph(text).unwrap();
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.edge_count(), 3);
        assert_eq!(g.labels(), &[0, 0, 1]);
        assert!(g.has_edge(0, 2));
        assert_eq!(g.label_alphabet_size(), 2);
    }

    #[test]
    fn parse_header_counts() {
        let (v, e) = parse_header("t 3112 12519").unwrap();
        assert_eq!(v, 3112);
        assert_eq!(e, 12519);
    }

    #[test]
    fn parse_isolated_vertex() {
        let g = load_graph("t 1 0\nv 0 5 0\n").unwrap();
        assert_eq!(g.vertex_count(), 1);
        assert_eq!(g.label(0), 5);
        assert_eq!(g.degree(0), 0);
    }

    #[test]
    fn parse_errors_name_lines() {
        let dup = "t 2 2\nv 0 0 1\nv 1 0 1\ne 0 1\ne 1 0\n";
        match load_graph(dup) {
            Err(GraphParseError::DuplicateEdge { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected duplicate edge, got {other:?}"),
        }
        let selfloop = "t 2 1\nv 0 0 0\nv 1 0 0\ne 1 1\n";
        match load_graph(selfloop) {
            Err(GraphParseError::SelfLoop { line, v }) => {
                assert_eq!(line, 4);
                assert_eq!(v, 1);
            }
            other => panic!("expected self-loop, got {other:?}"),
        }
        let out_of_range = "t 2 1\nv 0 0 1\nv 1 0 1\ne 0 7\n";
        assert!(matches!(
            load_graph(out_of_range),
            Err(GraphParseError::OutOfRange { line: 4, id: 7, .. })
        ));
        let count_mismatch = "t 2 2\nv 0 0 1\nv 1 0 1\ne 0 1\n";
        assert!(matches!(
            load_graph(count_mismatch),
            Err(GraphParseError::CountMismatch { .. })
        ));
        let non_dense = "t 2 0\nv 0 0 0\nv 0 1 0\n";
        assert!(matches!(
            load_graph(non_dense),
            Err(GraphParseError::NonDenseIds { .. })
        ));
        let degree_mismatch = "t 2 1\nv 0 0 2\nv 1 0 1\ne 0 1\n";
        assert!(matches!(
            load_graph(degree_mismatch),
            Err(GraphParseError::DegreeMismatch { .. })
        ));
    }

    #[test]
    fn connected_path_cases() {
        let g = path3();
        assert!(!connected(&g, VertexSet::from_iter([0, 2])));
        assert!(connected(&g, VertexSet::from_iter([0, 1, 2])));
        assert!(connected(&g, VertexSet::EMPTY));
        assert!(connected(&g, VertexSet::singleton(2)));
    }

    /// Union-find over the induced edges; independent of the BFS path.
    fn connected_oracle(g: &LabeledGraph, s: VertexSet) -> bool {
        if s.is_empty() {
            return true;
        }
        let verts: Vec<u32> = s.iter().collect();
        let mut parent: Vec<usize> = (0..verts.len()).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for (i, &v) in verts.iter().enumerate() {
            for (j, &w) in verts.iter().enumerate() {
                if v < w && g.has_edge(v, w) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let root = find(&mut parent, 0);
        (0..verts.len()).all(|i| find(&mut parent, i) == root)
    }

    #[test]
    fn connected_matches_union_find_exhaustively() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for n in 2..=8usize {
            for _ in 0..5 {
                let mut edges = Vec::new();
                for u in 0..n as u32 {
                    for v in u + 1..n as u32 {
                        if rng.gen_bool(0.35) {
                            edges.push((u, v));
                        }
                    }
                }
                let g = LabeledGraph::new(vec![0; n], &edges).unwrap();
                for bits in 0..(1u64 << n) {
                    let s = VertexSet::from_bits(bits);
                    assert_eq!(connected(&g, s), connected_oracle(&g, s), "bits={bits:b}");
                }
            }
        }
    }

    #[test]
    fn validate_order_cases() {
        let g = path3();
        assert!(validate_order(&g, &MatchingOrder(vec![0, 1, 2])));
        assert!(!validate_order(&g, &MatchingOrder(vec![0, 2, 1])));
        assert!(!validate_order(&g, &MatchingOrder(vec![0, 1])));
        assert!(!validate_order(&g, &MatchingOrder(vec![0, 1, 1])));

        // star: center 1, leaves 0,2,3,4; leaf-first order is fine
        let star = LabeledGraph::new(vec![0; 5], &[(0, 1), (1, 2), (1, 3), (1, 4)]).unwrap();
        let o = MatchingOrder(vec![0, 1, 2, 3, 4]);
        assert!(validate_order(&star, &o));
        // every prefix of a valid order is connected
        let mut prefix = VertexSet::EMPTY;
        for &v in o.as_slice() {
            prefix = prefix.insert(v);
            assert!(connected(&star, prefix));
        }
    }

    #[test]
    fn vertex_set_ops() {
        let s = VertexSet::from_iter([0, 3, 5]);
        assert_eq!(s.len(), 3);
        assert!(s.contains(3));
        assert!(!s.contains(1));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![0, 3, 5]);
        assert_eq!(s.remove(3).len(), 2);
        assert_eq!(VertexSet::full(3).bits(), 0b111);
        assert_eq!(VertexSet::full(64).bits(), u64::MAX);
    }

    #[test]
    fn induced_subgraph_keeps_labels_and_edges() {
        let g = load_graph("t 3 3\nv 0 0 2\nv 1 0 2\nv 2 1 2\ne 0 1\ne 1 2\ne 0 2\n").unwrap();
        let (sub, ids) = g.induced(VertexSet::from_iter([0, 2]));
        assert_eq!(ids, vec![0, 2]);
        assert_eq!(sub.labels(), &[0, 1]);
        assert_eq!(sub.edge_count(), 1);
        assert_eq!(sub.label_alphabet_size(), 2);
    }
}
