//! Candidate filtering, backtracking enumeration, and deterministic cost
//! metering.
//!
//! Execution cost is metered in *probes*: one probe per element inspected
//! during a candidate-list intersection plus one per injectivity check.
//! Probe counts are deterministic for fixed inputs, which makes them
//! usable as training targets where wall-clock times are not. Wall time
//! is still recorded for reporting.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graph::{connected, validate_order, LabeledGraph, MatchingOrder, VertexSet};

#[derive(Error, Debug)]
pub enum MatcherError {
    #[error("matching order is not a prefix-connected permutation")]
    InvalidOrder,
    #[error("subquery vertex set is not connected")]
    DisconnectedSubquery,
    #[error("vertex {0} is not adjacent to the subquery")]
    NotAdjacent(u32),
    #[error("query graph has no vertices")]
    EmptyQuery,
    #[error("budget limit {0} must be positive")]
    NonPositiveBudget(&'static str),
}

/// Per-query filter output: candidate sets `C(u)` and candidate edge
/// counts `|C(u1, u2)|`.
#[derive(Debug, Clone)]
pub struct CandidateContext {
    candidates: Vec<Vec<u32>>,
    edge_counts: BTreeMap<(u32, u32), u64>,
}

impl CandidateContext {
    /// `C(u)`, sorted ascending.
    pub fn candidates(&self, u: u32) -> &[u32] {
        &self.candidates[u as usize]
    }

    pub fn candidate_count(&self, u: u32) -> u64 {
        self.candidates[u as usize].len() as u64
    }

    /// `|C(u1, u2)|` for a query edge; the pair is unordered.
    pub fn edge_count(&self, u1: u32, u2: u32) -> u64 {
        let key = (u1.min(u2), u1.max(u2));
        self.edge_counts.get(&key).copied().unwrap_or(0)
    }

    pub fn edge_counts(&self) -> &BTreeMap<(u32, u32), u64> {
        &self.edge_counts
    }

    #[cfg(test)]
    pub(crate) fn candidates_mut_for_tests(&mut self, u: u32) -> &mut Vec<u32> {
        &mut self.candidates[u as usize]
    }

    #[cfg(test)]
    pub(crate) fn edge_counts_mut_for_tests(&mut self) -> &mut BTreeMap<(u32, u32), u64> {
        &mut self.edge_counts
    }
}

/// Produces a complete candidate set per query vertex: no data vertex that
/// participates in any isomorphism image of `u` may be pruned.
pub trait CandidateFilter {
    fn candidates(&self, g: &LabeledGraph, q: &LabeledGraph) -> Vec<Vec<u32>>;
}

/// Label equality plus degree lower bound.
pub struct LabelDegreeFilter;

impl CandidateFilter for LabelDegreeFilter {
    fn candidates(&self, g: &LabeledGraph, q: &LabeledGraph) -> Vec<Vec<u32>> {
        let by_label = group_by_label(g);
        (0..q.vertex_count() as u32)
            .map(|u| {
                let lbl = q.label(u) as usize;
                let mut c: Vec<u32> = by_label
                    .get(lbl)
                    .map(|vs| {
                        vs.iter()
                            .copied()
                            .filter(|&v| g.degree(v) >= q.degree(u))
                            .collect()
                    })
                    .unwrap_or_default();
                c.sort_unstable();
                c
            })
            .collect()
    }
}

/// [`LabelDegreeFilter`] refined by one neighbor-label-frequency pass:
/// `v` stays in `C(u)` only if, for each label among `u`'s neighbors, `v`
/// has at least as many neighbors of that label. Still complete: any
/// isomorphism image of `u` satisfies the per-label counts.
pub struct NlfFilter;

impl CandidateFilter for NlfFilter {
    fn candidates(&self, g: &LabeledGraph, q: &LabeledGraph) -> Vec<Vec<u32>> {
        let base = LabelDegreeFilter.candidates(g, q);
        let alphabet = g.label_alphabet_size().max(q.label_alphabet_size()) as usize;
        let mut q_counts = vec![0u32; alphabet];
        let mut g_counts = vec![0u32; alphabet];
        base.into_iter()
            .enumerate()
            .map(|(u, cand)| {
                let u = u as u32;
                q_counts.iter_mut().for_each(|c| *c = 0);
                let mut touched: Vec<u32> = Vec::new();
                for &w in q.neighbors(u) {
                    let l = q.label(w);
                    if q_counts[l as usize] == 0 {
                        touched.push(l);
                    }
                    q_counts[l as usize] += 1;
                }
                let keep: Vec<u32> = cand
                    .into_iter()
                    .filter(|&v| {
                        for &l in &touched {
                            g_counts[l as usize] = 0;
                        }
                        for &w in g.neighbors(v) {
                            let l = g.label(w) as usize;
                            if l < alphabet {
                                g_counts[l] += 1;
                            }
                        }
                        touched.iter().all(|&l| g_counts[l as usize] >= q_counts[l as usize])
                    })
                    .collect();
                keep
            })
            .collect()
    }
}

fn group_by_label(g: &LabeledGraph) -> Vec<Vec<u32>> {
    let mut by_label = vec![Vec::new(); g.label_alphabet_size() as usize];
    for v in 0..g.vertex_count() as u32 {
        by_label[g.label(v) as usize].push(v);
    }
    by_label
}

/// Builds candidate sets with the default [`NlfFilter`] and counts the
/// data edges between every query edge's candidate sets.
pub fn build_candidates(g: &LabeledGraph, q: &LabeledGraph) -> CandidateContext {
    build_candidates_with(g, q, &NlfFilter)
}

pub fn build_candidates_with(
    g: &LabeledGraph,
    q: &LabeledGraph,
    filter: &dyn CandidateFilter,
) -> CandidateContext {
    let candidates = filter.candidates(g, q);
    let n_g = g.vertex_count();
    let membership: Vec<Vec<bool>> = candidates
        .iter()
        .map(|c| {
            let mut m = vec![false; n_g];
            for &v in c {
                m[v as usize] = true;
            }
            m
        })
        .collect();
    let mut edge_counts = BTreeMap::new();
    for (u1, u2) in q.edges() {
        let (m1, m2) = (&membership[u1 as usize], &membership[u2 as usize]);
        let mut count = 0u64;
        for (a, b) in g.edges() {
            let (a, b) = (a as usize, b as usize);
            if (m1[a] && m2[b]) || (m2[a] && m1[b]) {
                count += 1;
            }
        }
        edge_counts.insert((u1, u2), count);
    }
    CandidateContext {
        candidates,
        edge_counts,
    }
}

/// Limits on a single enumeration. All limits must be positive when set.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExecutionBudget {
    pub max_probes: Option<u64>,
    pub max_matches: Option<u64>,
    pub max_elapsed: Option<Duration>,
}

impl ExecutionBudget {
    pub const UNLIMITED: ExecutionBudget = ExecutionBudget {
        max_probes: None,
        max_matches: None,
        max_elapsed: None,
    };

    pub fn validate(&self) -> Result<(), MatcherError> {
        if self.max_probes == Some(0) {
            return Err(MatcherError::NonPositiveBudget("max_probes"));
        }
        if self.max_matches == Some(0) {
            return Err(MatcherError::NonPositiveBudget("max_matches"));
        }
        if self.max_elapsed == Some(Duration::ZERO) {
            return Err(MatcherError::NonPositiveBudget("max_elapsed"));
        }
        Ok(())
    }
}

/// Result of one metered enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecutionStats {
    pub match_count: u64,
    pub probe_count: u64,
    pub truncated: bool,
    pub elapsed: Duration,
}

/// Result of [`local_candidates`]: the intersection and the probes it
/// cost to compute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalCandidates {
    pub values: Vec<u32>,
    pub probes: u64,
}

/// Local candidates for `u` given a partial match: the sorted intersection
/// of `C(u)` with the data-adjacency lists of the images of `u`'s mapped
/// neighbors. With no mapped neighbor (first vertex) the result is `C(u)`
/// at one probe per scanned candidate.
pub fn local_candidates(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    u: u32,
    partial: &[Option<u32>],
) -> LocalCandidates {
    let mut lists: Vec<&[u32]> = vec![ctx.candidates(u)];
    for &w in q.neighbors(u) {
        if let Some(img) = partial[w as usize] {
            lists.push(g.neighbors(img));
        }
    }
    if lists.len() == 1 {
        return LocalCandidates {
            values: lists[0].to_vec(),
            probes: lists[0].len() as u64,
        };
    }
    // shortest list first keeps intermediate results small
    lists.sort_by_key(|l| l.len());
    let mut probes = 0u64;
    let mut cur = intersect_sorted(lists[0], lists[1], &mut probes);
    for list in &lists[2..] {
        if cur.is_empty() {
            break;
        }
        cur = intersect_sorted(&cur, list, &mut probes);
    }
    LocalCandidates {
        values: cur,
        probes,
    }
}

/// Sorted-merge intersection; one probe per merge step.
fn intersect_sorted(a: &[u32], b: &[u32], probes: &mut u64) -> Vec<u32> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        *probes += 1;
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Shared backtracking engine. `on_match` fires once per complete match
/// of the prefix order and may add extra probe charges through the meter.
struct Runner<'a> {
    g: &'a LabeledGraph,
    q: &'a LabeledGraph,
    ctx: &'a CandidateContext,
    budget: ExecutionBudget,
    probes: u64,
    matches: u64,
    truncated: bool,
    partial: Vec<Option<u32>>,
    used: Vec<bool>,
    started: Instant,
    ticks: u32,
}

impl<'a> Runner<'a> {
    fn new(
        g: &'a LabeledGraph,
        q: &'a LabeledGraph,
        ctx: &'a CandidateContext,
        budget: ExecutionBudget,
    ) -> Self {
        Runner {
            g,
            q,
            ctx,
            budget,
            probes: 0,
            matches: 0,
            truncated: false,
            partial: vec![None; q.vertex_count()],
            used: vec![false; g.vertex_count()],
            started: Instant::now(),
            ticks: 0,
        }
    }

    fn over_budget(&mut self) -> bool {
        if self.truncated {
            return true;
        }
        if self.budget.max_probes.is_some_and(|m| self.probes > m)
            || self.budget.max_matches.is_some_and(|m| self.matches > m)
        {
            self.truncated = true;
            return true;
        }
        if let Some(limit) = self.budget.max_elapsed {
            // amortize the clock read
            self.ticks = self.ticks.wrapping_add(1);
            if self.ticks % 1024 == 0 && self.started.elapsed() > limit {
                self.truncated = true;
                return true;
            }
        }
        false
    }

    fn descend<F: FnMut(&mut Runner<'a>)>(&mut self, order: &[u32], depth: usize, on_match: &mut F) {
        if depth == order.len() {
            self.matches += 1;
            on_match(self);
            return;
        }
        let u = order[depth];
        let local = local_candidates(self.g, self.q, self.ctx, u, &self.partial);
        self.probes += local.probes;
        if self.over_budget() {
            return;
        }
        for v in local.values {
            // injectivity check
            self.probes += 1;
            if self.used[v as usize] {
                continue;
            }
            if self.over_budget() {
                return;
            }
            self.partial[u as usize] = Some(v);
            self.used[v as usize] = true;
            self.descend(order, depth + 1, on_match);
            self.partial[u as usize] = None;
            self.used[v as usize] = false;
            if self.truncated {
                return;
            }
        }
    }

    fn stats(&self) -> ExecutionStats {
        ExecutionStats {
            match_count: self.matches,
            probe_count: self.probes,
            truncated: self.truncated,
            elapsed: self.started.elapsed(),
        }
    }
}

/// Enumerates all subgraph isomorphisms of `q` in `g` along `o`.
pub fn enumerate(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    o: &MatchingOrder,
    budget: ExecutionBudget,
) -> Result<ExecutionStats, MatcherError> {
    if q.vertex_count() == 0 {
        return Err(MatcherError::EmptyQuery);
    }
    if !validate_order(q, o) {
        return Err(MatcherError::InvalidOrder);
    }
    budget.validate()?;
    let mut runner = Runner::new(g, q, ctx, budget);
    runner.descend(o.as_slice(), 0, &mut |_| {});
    Ok(runner.stats())
}

/// A deterministic prefix-connected order of the vertices in `s`:
/// start at the smallest id, then repeatedly append the smallest-id
/// vertex adjacent to the prefix.
pub fn subquery_order(q: &LabeledGraph, s: VertexSet) -> Vec<u32> {
    let mut order = Vec::with_capacity(s.len());
    if s.is_empty() {
        return order;
    }
    let mut placed = VertexSet::EMPTY;
    order.push(s.iter().next().unwrap());
    placed = placed.insert(order[0]);
    while order.len() < s.len() {
        let next = s
            .iter()
            .filter(|&v| !placed.contains(v))
            .find(|&v| q.neighbors(v).iter().any(|&w| placed.contains(w)))
            .expect("connected vertex set always has an adjacent extension");
        order.push(next);
        placed = placed.insert(next);
    }
    order
}

/// Counts the partial embeddings of the induced subquery on `s` within
/// the candidate space of the full query.
pub fn count_subquery(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    s: VertexSet,
    budget: ExecutionBudget,
) -> Result<ExecutionStats, MatcherError> {
    if !connected(q, s) {
        return Err(MatcherError::DisconnectedSubquery);
    }
    budget.validate()?;
    if s.is_empty() {
        // the root state: exactly the empty match
        return Ok(ExecutionStats {
            match_count: 1,
            probe_count: 0,
            truncated: false,
            elapsed: Duration::ZERO,
        });
    }
    let order = subquery_order(q, s);
    let mut runner = Runner::new(g, q, ctx, budget);
    runner.descend(&order, 0, &mut |_| {});
    Ok(runner.stats())
}

/// Cost and result size of extending subquery matches by one vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionMeasure {
    /// Σ over matches `f` of the start state of the probes incurred by
    /// `local_candidates(add | f)`.
    pub cost: u64,
    /// Cardinality of the extended state (injectivity enforced).
    pub extended_cardinality: u64,
    pub truncated: bool,
}

/// Measured extension of one state by all the given vertices in a single
/// enumeration pass over the state's matches.
#[derive(Debug, Clone)]
pub struct StateExploration {
    /// Cardinality of the state itself.
    pub cardinality: u64,
    /// Probes consumed enumerating the state.
    pub base_probes: u64,
    /// True when the state's own enumeration hit a budget limit; all
    /// measures are then unusable.
    pub truncated: bool,
    /// One measure per requested extension vertex, position-aligned.
    pub transitions: Vec<TransitionMeasure>,
    pub elapsed: Duration,
}

/// Enumerates the state `s` once and, for every match, measures the local
/// candidates of each extension vertex in `outs`. Budgets apply to the
/// base enumeration and per extension measure.
pub fn explore_state(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    s: VertexSet,
    outs: &[u32],
    budget: ExecutionBudget,
) -> Result<StateExploration, MatcherError> {
    if !connected(q, s) {
        return Err(MatcherError::DisconnectedSubquery);
    }
    for &u in outs {
        let adjacent = s.is_empty() || q.neighbors(u).iter().any(|&w| s.contains(w));
        if s.contains(u) || !adjacent {
            return Err(MatcherError::NotAdjacent(u));
        }
    }
    budget.validate()?;
    let started = Instant::now();

    if s.is_empty() {
        // ∅ → {u}: a scan of C(u), one probe per candidate
        let transitions = outs
            .iter()
            .map(|&u| {
                let c = ctx.candidate_count(u);
                TransitionMeasure {
                    cost: c,
                    extended_cardinality: c,
                    truncated: budget.max_matches.is_some_and(|m| c > m)
                        || budget.max_probes.is_some_and(|m| c > m),
                }
            })
            .collect();
        return Ok(StateExploration {
            cardinality: 1,
            base_probes: 0,
            truncated: false,
            transitions,
            elapsed: started.elapsed(),
        });
    }

    let order = subquery_order(q, s);
    let mut measures = vec![
        TransitionMeasure {
            cost: 0,
            extended_cardinality: 0,
            truncated: false,
        };
        outs.len()
    ];
    let mut runner = Runner::new(g, q, ctx, budget);
    runner.descend(&order, 0, &mut |r| {
        for (slot, &u) in measures.iter_mut().zip(outs) {
            if slot.truncated {
                continue;
            }
            let local = local_candidates(r.g, r.q, r.ctx, u, &r.partial);
            slot.cost += local.probes;
            r.probes += local.probes;
            for v in &local.values {
                r.probes += 1; // injectivity check for the extension
                if !r.used[*v as usize] {
                    slot.extended_cardinality += 1;
                }
            }
            if budget.max_probes.is_some_and(|m| slot.cost > m)
                || budget
                    .max_matches
                    .is_some_and(|m| slot.extended_cardinality > m)
            {
                slot.truncated = true;
            }
        }
    });
    let base_truncated = runner.truncated;
    if base_truncated {
        for slot in &mut measures {
            slot.truncated = true;
        }
    }
    Ok(StateExploration {
        cardinality: runner.matches,
        base_probes: runner.probes,
        truncated: base_truncated,
        transitions: measures,
        elapsed: started.elapsed(),
    })
}

/// Σ over all matches of `from` of the local-candidate probes for `add`;
/// `|C(add)|` when `from` is the empty state.
pub fn measure_transition(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    from: VertexSet,
    add: u32,
    budget: ExecutionBudget,
) -> Result<TransitionMeasure, MatcherError> {
    let exploration = explore_state(g, q, ctx, from, &[add], budget)?;
    Ok(exploration.transitions[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_graph;
    use crate::testkit;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn triangle() -> LabeledGraph {
        load_graph("t 3 3\nv 0 0 2\nv 1 0 2\nv 2 1 2\ne 0 1\ne 1 2\ne 0 2\n").unwrap()
    }

    #[test]
    fn single_vertex_label_filter() {
        let g = triangle();
        let q = LabeledGraph::new(vec![0], &[]).unwrap();
        let ctx = build_candidates(&g, &q);
        assert_eq!(ctx.candidates(0), &[0, 1]);
    }

    #[test]
    fn star_edge_query_counts() {
        // center label 1, four leaves label 0
        let g = LabeledGraph::new(vec![1, 0, 0, 0, 0], &[(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        let q = LabeledGraph::new(vec![0, 1], &[(0, 1)]).unwrap();
        let ctx = build_candidates(&g, &q);
        assert_eq!(ctx.candidates(0), &[1, 2, 3, 4]);
        assert_eq!(ctx.candidates(1), &[0]);
        assert_eq!(ctx.edge_count(0, 1), 4);
    }

    #[test]
    fn candidates_are_complete_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..40 {
            let g = testkit::random_graph(&mut rng, 12, 0.3, 3);
            let q = testkit::random_connected_query(&mut rng, &g, 4);
            let ctx = build_candidates(&g, &q);
            for f in testkit::brute_force_matches(&g, &q) {
                for (u, &v) in f.iter().enumerate() {
                    assert!(
                        ctx.candidates(u as u32).contains(&v),
                        "image {v} of query vertex {u} pruned"
                    );
                }
            }
        }
    }

    #[test]
    fn local_candidates_first_vertex_scans() {
        let g = LabeledGraph::new(vec![0; 8], &[(3, 7)]).unwrap();
        let q = LabeledGraph::new(vec![0], &[]).unwrap();
        let ctx = CandidateContext {
            candidates: vec![vec![3, 7]],
            edge_counts: BTreeMap::new(),
        };
        let lc = local_candidates(&g, &q, &ctx, 0, &[None]);
        assert_eq!(lc.values, vec![3, 7]);
        assert_eq!(lc.probes, 2);
    }

    #[test]
    fn local_candidates_intersects_with_neighbor_adjacency() {
        // data: vertex 0 adjacent to {2, 3, 9}
        let g = LabeledGraph::new(vec![0; 10], &[(0, 2), (0, 3), (0, 9)]).unwrap();
        let q = LabeledGraph::new(vec![0, 0], &[(0, 1)]).unwrap();
        let ctx = CandidateContext {
            candidates: vec![vec![0], vec![1, 2, 3]],
            edge_counts: BTreeMap::new(),
        };
        let partial = vec![Some(0u32), None];
        let lc = local_candidates(&g, &q, &ctx, 1, &partial);
        assert_eq!(lc.values, vec![2, 3]);
    }

    #[test]
    fn local_candidates_matches_definitional_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = testkit::random_graph(&mut rng, 10, 0.35, 2);
            let q = testkit::random_connected_query(&mut rng, &g, 4);
            let ctx = build_candidates(&g, &q);
            let order = subquery_order(&q, VertexSet::full(q.vertex_count()));
            // map a random prefix by brute force so it is a real partial match
            let prefix_len = rng.gen_range(1..q.vertex_count());
            let prefix = VertexSet::from_iter(order[..prefix_len].iter().copied());
            let (sub, ids) = q.induced(prefix);
            let sub_matches = testkit::brute_force_matches_in_candidates(&g, &sub, |u, v| {
                ctx.candidates(ids[u as usize]).contains(&v)
            });
            let Some(f) = sub_matches.first() else {
                continue;
            };
            let mut partial = vec![None; q.vertex_count()];
            for (i, &orig) in ids.iter().enumerate() {
                partial[orig as usize] = Some(f[i]);
            }
            let u = order[prefix_len];
            let got = local_candidates(&g, &q, &ctx, u, &partial).values;
            // definitional: scan all data vertices, test candidate membership
            // plus adjacency to every mapped neighbor image
            let want: Vec<u32> = (0..g.vertex_count() as u32)
                .filter(|&v| ctx.candidates(u).contains(&v))
                .filter(|&v| {
                    q.neighbors(u)
                        .iter()
                        .filter_map(|&w| partial[w as usize])
                        .all(|img| g.has_edge(img, v))
                })
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn enumerate_triangle_unique_labels() {
        let g = load_graph("t 3 3\nv 0 0 2\nv 1 1 2\nv 2 2 2\ne 0 1\ne 1 2\ne 0 2\n").unwrap();
        let ctx = build_candidates(&g, &g);
        let stats = enumerate(
            &g,
            &g,
            &ctx,
            &MatchingOrder(vec![0, 1, 2]),
            ExecutionBudget::UNLIMITED,
        )
        .unwrap();
        assert_eq!(stats.match_count, 1);
        assert!(!stats.truncated);
    }

    #[test]
    fn enumerate_k3_uniform_labels() {
        let g = LabeledGraph::new(vec![0, 0, 0], &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let ctx = build_candidates(&g, &g);
        let stats = enumerate(
            &g,
            &g,
            &ctx,
            &MatchingOrder(vec![0, 1, 2]),
            ExecutionBudget::UNLIMITED,
        )
        .unwrap();
        assert_eq!(stats.match_count, 6);
        assert!(stats.probe_count >= stats.match_count);
    }

    #[test]
    fn enumerate_agrees_with_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = testkit::random_graph(&mut rng, 12, 0.3, 3);
            let q = testkit::random_connected_query(&mut rng, &g, 5);
            let ctx = build_candidates(&g, &q);
            let order = subquery_order(&q, VertexSet::full(q.vertex_count()));
            let stats = enumerate(
                &g,
                &q,
                &ctx,
                &MatchingOrder(order),
                ExecutionBudget::UNLIMITED,
            )
            .unwrap();
            let expected = testkit::brute_force_matches(&g, &q).len() as u64;
            assert_eq!(stats.match_count, expected);
        }
    }

    #[test]
    fn match_count_is_order_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = testkit::random_graph(&mut rng, 10, 0.4, 2);
            let q = testkit::random_connected_query(&mut rng, &g, 4);
            let ctx = build_candidates(&g, &q);
            let orders = testkit::all_valid_orders(&q);
            let counts: Vec<u64> = orders
                .iter()
                .map(|o| {
                    enumerate(
                        &g,
                        &q,
                        &ctx,
                        &MatchingOrder(o.clone()),
                        ExecutionBudget::UNLIMITED,
                    )
                    .unwrap()
                    .match_count
                })
                .collect();
            assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        }
    }

    #[test]
    fn invalid_order_rejected_before_execution() {
        let g = triangle();
        let q = LabeledGraph::new(vec![0, 0, 1], &[(0, 1), (1, 2)]).unwrap();
        let ctx = build_candidates(&g, &q);
        let err = enumerate(
            &g,
            &q,
            &ctx,
            &MatchingOrder(vec![0, 2, 1]),
            ExecutionBudget::UNLIMITED,
        );
        assert!(matches!(err, Err(MatcherError::InvalidOrder)));
    }

    #[test]
    fn probe_count_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let g = testkit::random_graph(&mut rng, 12, 0.35, 2);
        let q = testkit::random_connected_query(&mut rng, &g, 4);
        let ctx = build_candidates(&g, &q);
        let order = MatchingOrder(subquery_order(&q, VertexSet::full(q.vertex_count())));
        let a = enumerate(&g, &q, &ctx, &order, ExecutionBudget::UNLIMITED).unwrap();
        let b = enumerate(&g, &q, &ctx, &order, ExecutionBudget::UNLIMITED).unwrap();
        assert_eq!(a.probe_count, b.probe_count);
        assert_eq!(a.match_count, b.match_count);
    }

    #[test]
    fn budget_truncates_and_flags() {
        let g = LabeledGraph::new(vec![0; 6], &testkit::complete_edges(6)).unwrap();
        let q = LabeledGraph::new(vec![0, 0, 0], &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let ctx = build_candidates(&g, &q);
        let order = MatchingOrder(vec![0, 1, 2]);
        let full = enumerate(&g, &q, &ctx, &order, ExecutionBudget::UNLIMITED).unwrap();
        assert!(!full.truncated);
        let clipped = enumerate(
            &g,
            &q,
            &ctx,
            &order,
            ExecutionBudget {
                max_matches: Some(5),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(clipped.truncated);
        assert!(clipped.match_count < full.match_count);
        // zero budgets are rejected
        assert!(matches!(
            enumerate(
                &g,
                &q,
                &ctx,
                &order,
                ExecutionBudget {
                    max_probes: Some(0),
                    ..Default::default()
                }
            ),
            Err(MatcherError::NonPositiveBudget("max_probes"))
        ));
    }

    #[test]
    fn count_subquery_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let g = testkit::random_graph(&mut rng, 12, 0.35, 2);
        let q = testkit::random_connected_query(&mut rng, &g, 5);
        let ctx = build_candidates(&g, &q);

        // single vertex: exactly the candidate count
        let s = VertexSet::singleton(0);
        let stats = count_subquery(&g, &q, &ctx, s, ExecutionBudget::UNLIMITED).unwrap();
        assert_eq!(stats.match_count, ctx.candidate_count(0));

        // full set equals enumerate
        let full = VertexSet::full(q.vertex_count());
        let via_subquery = count_subquery(&g, &q, &ctx, full, ExecutionBudget::UNLIMITED).unwrap();
        let order = MatchingOrder(subquery_order(&q, full));
        let via_enumerate = enumerate(&g, &q, &ctx, &order, ExecutionBudget::UNLIMITED).unwrap();
        assert_eq!(via_subquery.match_count, via_enumerate.match_count);

        // disconnected set is a contract violation
        if q.vertex_count() >= 3 {
            for bits in 0..(1u64 << q.vertex_count()) {
                let s = VertexSet::from_bits(bits);
                if !s.is_empty() && !connected(&q, s) {
                    assert!(matches!(
                        count_subquery(&g, &q, &ctx, s, ExecutionBudget::UNLIMITED),
                        Err(MatcherError::DisconnectedSubquery)
                    ));
                    break;
                }
            }
        }
    }

    #[test]
    fn count_subquery_matches_candidate_space_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..30 {
            let g = testkit::random_graph(&mut rng, 11, 0.35, 2);
            let q = testkit::random_connected_query(&mut rng, &g, 5);
            let ctx = build_candidates(&g, &q);
            for bits in 1..(1u64 << q.vertex_count()) {
                let s = VertexSet::from_bits(bits);
                if !connected(&q, s) {
                    continue;
                }
                let got = count_subquery(&g, &q, &ctx, s, ExecutionBudget::UNLIMITED)
                    .unwrap()
                    .match_count;
                let (sub, ids) = q.induced(s);
                let want = testkit::brute_force_matches_in_candidates(&g, &sub, |u, v| {
                    ctx.candidates(ids[u as usize]).contains(&v)
                })
                .len() as u64;
                assert_eq!(got, want, "state {bits:b}");
            }
        }
    }

    #[test]
    fn monotone_containment_of_matches() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let g = testkit::random_graph(&mut rng, 10, 0.4, 2);
        let q = testkit::random_connected_query(&mut rng, &g, 5);
        let ctx = build_candidates(&g, &q);
        let n = q.vertex_count();
        for bits in 1..(1u64 << n) {
            let big = VertexSet::from_bits(bits);
            if !connected(&q, big) || big.len() < 2 {
                continue;
            }
            for v in big.iter() {
                let small = big.remove(v);
                if small.is_empty() || !connected(&q, small) {
                    continue;
                }
                let (sub_b, ids_b) = q.induced(big);
                let matches_big =
                    testkit::brute_force_matches_in_candidates(&g, &sub_b, |u, vv| {
                        ctx.candidates(ids_b[u as usize]).contains(&vv)
                    });
                let (sub_s, ids_s) = q.induced(small);
                let matches_small: std::collections::HashSet<Vec<u32>> =
                    testkit::brute_force_matches_in_candidates(&g, &sub_s, |u, vv| {
                        ctx.candidates(ids_s[u as usize]).contains(&vv)
                    })
                    .into_iter()
                    .collect();
                for f in matches_big {
                    let restricted: Vec<u32> = ids_s
                        .iter()
                        .map(|&orig| {
                            let pos = ids_b.iter().position(|&x| x == orig).unwrap();
                            f[pos]
                        })
                        .collect();
                    assert!(matches_small.contains(&restricted));
                }
            }
        }
    }

    #[test]
    fn measure_transition_from_empty_is_candidate_scan() {
        let g = LabeledGraph::new(vec![0; 5], &testkit::complete_edges(5)).unwrap();
        let q = LabeledGraph::new(vec![0, 0], &[(0, 1)]).unwrap();
        let ctx = build_candidates(&g, &q);
        assert_eq!(ctx.candidate_count(0), 5);
        let m = measure_transition(&g, &q, &ctx, VertexSet::EMPTY, 0, ExecutionBudget::UNLIMITED)
            .unwrap();
        assert_eq!(m.cost, 5);
        assert!(!m.truncated);
    }

    #[test]
    fn measure_transition_zero_matches_zero_cost() {
        // no data vertex with label 9: C(u0) empty, so {u0} has no matches
        let g = LabeledGraph::new(vec![0, 0], &[(0, 1)]).unwrap();
        let q = LabeledGraph::new(vec![9, 0], &[(0, 1)]).unwrap();
        let ctx = build_candidates(&g, &q);
        let m = measure_transition(
            &g,
            &q,
            &ctx,
            VertexSet::singleton(0),
            1,
            ExecutionBudget::UNLIMITED,
        )
        .unwrap();
        assert_eq!(m.cost, 0);
        assert_eq!(m.extended_cardinality, 0);
    }

    #[test]
    fn measure_transition_matches_instrumented_reexecution() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..30 {
            let g = testkit::random_graph(&mut rng, 10, 0.4, 2);
            let q = testkit::random_connected_query(&mut rng, &g, 4);
            let ctx = build_candidates(&g, &q);
            let n = q.vertex_count();
            for bits in 1..(1u64 << n) {
                let from = VertexSet::from_bits(bits);
                if !connected(&q, from) || from.len() == n as usize {
                    continue;
                }
                for add in 0..n as u32 {
                    if from.contains(add)
                        || !q.neighbors(add).iter().any(|&w| from.contains(w))
                    {
                        continue;
                    }
                    let fast =
                        measure_transition(&g, &q, &ctx, from, add, ExecutionBudget::UNLIMITED)
                            .unwrap();
                    // oracle: enumerate `from` by brute force within the
                    // candidate space, then recompute local candidates per
                    // match independently
                    let (sub, ids) = q.induced(from);
                    let mut want = 0u64;
                    for f in testkit::brute_force_matches_in_candidates(&g, &sub, |u, v| {
                        ctx.candidates(ids[u as usize]).contains(&v)
                    }) {
                        let mut partial = vec![None; n];
                        for (i, &orig) in ids.iter().enumerate() {
                            partial[orig as usize] = Some(f[i]);
                        }
                        want += local_candidates(&g, &q, &ctx, add, &partial).probes;
                    }
                    assert_eq!(fast.cost, want);
                }
            }
        }
    }

    #[test]
    fn explore_state_cardinality_matches_count_subquery() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let g = testkit::random_graph(&mut rng, 10, 0.4, 2);
        let q = testkit::random_connected_query(&mut rng, &g, 4);
        let ctx = build_candidates(&g, &q);
        let n = q.vertex_count();
        for bits in 1..(1u64 << n) {
            let s = VertexSet::from_bits(bits);
            if !connected(&q, s) {
                continue;
            }
            let outs: Vec<u32> = (0..n as u32)
                .filter(|&u| !s.contains(u) && q.neighbors(u).iter().any(|&w| s.contains(w)))
                .collect();
            let exp = explore_state(&g, &q, &ctx, s, &outs, ExecutionBudget::UNLIMITED).unwrap();
            let direct = count_subquery(&g, &q, &ctx, s, ExecutionBudget::UNLIMITED).unwrap();
            assert_eq!(exp.cardinality, direct.match_count);
            for (i, &u) in outs.iter().enumerate() {
                let extended = count_subquery(&g, &q, &ctx, s.insert(u), ExecutionBudget::UNLIMITED)
                    .unwrap();
                assert_eq!(
                    exp.transitions[i].extended_cardinality, extended.match_count,
                    "extension by {u}"
                );
            }
        }
    }
}
