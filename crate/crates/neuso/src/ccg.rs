//! The lattice of connected subqueries, annotated with measured
//! cardinalities and transition costs, plus training-data collection.
//!
//! States are vertex sets of connected subqueries (the empty set is the
//! root); transitions add exactly one vertex. Small queries are explored
//! exhaustively; larger ones along a seed matching order plus each path
//! state's out-neighbors.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{LabeledGraph, MatchingOrder, VertexSet};
use crate::matcher::{
    explore_state, CandidateContext, ExecutionBudget, MatcherError,
};

/// Routing ceiling between full and partial exploration.
pub const DEFAULT_STATE_LIMIT: usize = 5_000;

/// Desk-scale per-transition budget: 10 s wall, 10^7 probes, 10^6 rows.
pub fn desk_budget() -> ExecutionBudget {
    ExecutionBudget {
        max_probes: Some(10_000_000),
        max_matches: Some(1_000_000),
        max_elapsed: Some(std::time::Duration::from_secs(10)),
    }
}

#[derive(Error, Debug)]
pub enum CcgError {
    #[error("query has {found} connected subqueries, over the limit of {limit}; collect partially instead")]
    StateLimit { found: usize, limit: usize },
    #[error("seed order is not a valid matching order")]
    InvalidSeedOrder,
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error("samples: {0}")]
    Io(#[from] std::io::Error),
    #[error("samples line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exploration {
    Full,
    Partial,
    Unvisited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateRecord {
    pub cardinality: Option<u64>,
    pub min_cost: Option<u64>,
    pub explored: Exploration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionRecord {
    /// Probe-count units.
    pub cost: u64,
    /// Truncated transitions are excluded from min-cost computation and
    /// from training data.
    pub truncated: bool,
}

/// Cardinality-cost graph of one query against one data graph.
#[derive(Debug, Clone, Default)]
pub struct Ccg {
    pub states: BTreeMap<VertexSet, StateRecord>,
    /// Keyed by (source state, added vertex).
    pub transitions: BTreeMap<(VertexSet, u32), TransitionRecord>,
    pub goal: VertexSet,
}

impl Ccg {
    pub fn root(&self) -> VertexSet {
        VertexSet::EMPTY
    }

    /// Recorded incoming transitions of `s` as (predecessor, added vertex,
    /// record).
    pub fn in_transitions(&self, s: VertexSet) -> Vec<(VertexSet, u32, TransitionRecord)> {
        s.iter()
            .filter_map(|v| {
                let pred = s.remove(v);
                self.transitions
                    .get(&(pred, v))
                    .map(|rec| (pred, v, *rec))
            })
            .collect()
    }

    /// States one vertex larger than `s` reachable by a recorded
    /// transition.
    pub fn out_neighbors(&self, s: VertexSet) -> Vec<(u32, VertexSet, TransitionRecord)> {
        self.transitions
            .range((s, 0u32)..=(s, u32::MAX))
            .map(|(&(_, v), rec)| (v, s.insert(v), *rec))
            .collect()
    }
}

/// Vertices adjacent to `s` but outside it; every vertex when `s` is
/// empty.
pub fn extension_vertices(q: &LabeledGraph, s: VertexSet) -> Vec<u32> {
    (0..q.vertex_count() as u32)
        .filter(|&u| {
            !s.contains(u)
                && (s.is_empty() || q.neighbors(u).iter().any(|&w| s.contains(w)))
        })
        .collect()
}

/// All connected subquery states (the root included), layered by size.
/// Aborts once more than `limit` states exist.
pub fn enumerate_states(q: &LabeledGraph, limit: usize) -> Result<Vec<VertexSet>, CcgError> {
    let mut all: Vec<VertexSet> = vec![VertexSet::EMPTY];
    let mut layer: BTreeSet<VertexSet> = [VertexSet::EMPTY].into();
    while !layer.is_empty() {
        let mut next: BTreeSet<VertexSet> = BTreeSet::new();
        for &s in &layer {
            for u in extension_vertices(q, s) {
                next.insert(s.insert(u));
            }
        }
        all.extend(next.iter().copied());
        if all.len() > limit {
            return Err(CcgError::StateLimit {
                found: all.len(),
                limit,
            });
        }
        layer = next;
    }
    Ok(all)
}

/// Materializes the complete lattice: every connected subquery's
/// cardinality and every transition's cost, measured by enumeration.
pub fn build_full_ccg(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    budget: ExecutionBudget,
    state_limit: usize,
) -> Result<Ccg, CcgError> {
    let states = enumerate_states(q, state_limit)?;
    let mut ccg = Ccg {
        goal: VertexSet::full(q.vertex_count()),
        ..Default::default()
    };
    for &s in &states {
        ccg.states.entry(s).or_insert(StateRecord {
            cardinality: None,
            min_cost: None,
            explored: Exploration::Full,
        });
    }
    for &s in &states {
        let outs = extension_vertices(q, s);
        let exploration = explore_state(g, q, ctx, s, &outs, budget)?;
        if !exploration.truncated {
            ccg.states.get_mut(&s).unwrap().cardinality = Some(exploration.cardinality);
        }
        for (slot, &u) in exploration.transitions.iter().zip(&outs) {
            ccg.transitions.insert(
                (s, u),
                TransitionRecord {
                    cost: slot.cost,
                    truncated: slot.truncated,
                },
            );
            if !slot.truncated {
                let child = ccg.states.get_mut(&s.insert(u)).unwrap();
                if child.cardinality.is_none() {
                    child.cardinality = Some(slot.extended_cardinality);
                }
            }
        }
    }
    Ok(ccg)
}

/// Shortest-path distances from the root, by dynamic programming in
/// state-size order. Truncated transitions are skipped; states with no
/// usable incoming transition keep `min_cost = None`.
pub fn exact_min_costs(mut ccg: Ccg) -> Ccg {
    let mut order: Vec<VertexSet> = ccg.states.keys().copied().collect();
    order.sort_by_key(|s| (s.len(), s.bits()));
    for s in order {
        if s.is_empty() {
            let rec = ccg.states.get_mut(&s).unwrap();
            rec.min_cost = Some(0);
            rec.cardinality = rec.cardinality.or(Some(1));
            continue;
        }
        let mut best: Option<u64> = None;
        for (pred, _, rec) in ccg.in_transitions(s) {
            if rec.truncated {
                continue;
            }
            if let Some(pred_cost) = ccg.states.get(&pred).and_then(|r| r.min_cost) {
                let total = pred_cost + rec.cost;
                best = Some(best.map_or(total, |b| b.min(total)));
            }
        }
        let rec = ccg.states.get_mut(&s).unwrap();
        // min_cost only coexists with a known cardinality
        if rec.cardinality.is_some() {
            rec.min_cost = best;
        }
    }
    ccg
}

/// One state's labels for training, in the JSONL schema's field order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub query_id: String,
    pub state: u64,
    pub exploration: Exploration,
    pub cardinality: Option<u64>,
    pub min_cost: Option<u64>,
    pub in_transitions: Vec<InTransition>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InTransition {
    pub from: u64,
    pub cost: u64,
}

impl TrainingSample {
    pub fn state_set(&self) -> VertexSet {
        VertexSet::from_bits(self.state)
    }
}

/// Flattens a fully explored lattice into samples, one per state, sorted
/// by (size, bits). States whose measurements were truncated away are
/// dropped.
pub fn samples_from_full_ccg(query_id: &str, ccg: &Ccg) -> Vec<TrainingSample> {
    let mut order: Vec<VertexSet> = ccg.states.keys().copied().collect();
    order.sort_by_key(|s| (s.len(), s.bits()));
    order
        .into_iter()
        .filter_map(|s| {
            let rec = ccg.states[&s];
            let cardinality = rec.cardinality?;
            let min_cost = rec.min_cost?;
            let in_transitions = ccg
                .in_transitions(s)
                .into_iter()
                .filter(|(_, _, t)| !t.truncated)
                .map(|(pred, _, t)| InTransition {
                    from: pred.bits(),
                    cost: t.cost,
                })
                .collect();
            Some(TrainingSample {
                query_id: query_id.to_string(),
                state: s.bits(),
                exploration: Exploration::Full,
                cardinality: Some(cardinality),
                min_cost: Some(min_cost),
                in_transitions,
            })
        })
        .collect()
}

/// Walks the seed order's states and each path state's out-neighbors,
/// recording cardinalities and transition costs only. A budget-truncated
/// path step ends the walk; truncated measurements are dropped.
pub fn collect_partial(
    g: &LabeledGraph,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    seed_order: &MatchingOrder,
    budget: ExecutionBudget,
    query_id: &str,
) -> Result<Vec<TrainingSample>, CcgError> {
    if !crate::graph::validate_order(q, seed_order) {
        return Err(CcgError::InvalidSeedOrder);
    }
    let n = seed_order.len();
    let mut cardinalities: BTreeMap<VertexSet, u64> = BTreeMap::new();
    let mut transitions: BTreeMap<(VertexSet, u32), u64> = BTreeMap::new();
    cardinalities.insert(VertexSet::EMPTY, 1);

    // the root only measures the path's first transition; other
    // singletons are out of scope for partial collection
    let first = seed_order.as_slice()[0];
    let root_pass = explore_state(g, q, ctx, VertexSet::EMPTY, &[first], budget)?;
    if !root_pass.transitions[0].truncated {
        transitions.insert((VertexSet::EMPTY, first), root_pass.transitions[0].cost);
        cardinalities.insert(
            VertexSet::singleton(first),
            root_pass.transitions[0].extended_cardinality,
        );
    }

    let mut path_state = VertexSet::EMPTY;
    for i in 0..n {
        path_state = path_state.insert(seed_order.as_slice()[i]);
        let outs = extension_vertices(q, path_state);
        let exploration = explore_state(g, q, ctx, path_state, &outs, budget)?;
        if exploration.truncated {
            // path step over budget: keep what previous states produced
            break;
        }
        cardinalities.insert(path_state, exploration.cardinality);
        for (slot, &u) in exploration.transitions.iter().zip(&outs) {
            if slot.truncated {
                continue;
            }
            transitions.insert((path_state, u), slot.cost);
            cardinalities
                .entry(path_state.insert(u))
                .or_insert(slot.extended_cardinality);
        }
    }

    // group measured in-transitions per destination state
    let mut incoming: BTreeMap<VertexSet, Vec<InTransition>> = BTreeMap::new();
    for (&(from, v), &cost) in &transitions {
        incoming.entry(from.insert(v)).or_default().push(InTransition {
            from: from.bits(),
            cost,
        });
    }

    let mut states: Vec<VertexSet> = cardinalities.keys().copied().collect();
    states.sort_by_key(|s| (s.len(), s.bits()));
    Ok(states
        .into_iter()
        .map(|s| TrainingSample {
            query_id: query_id.to_string(),
            state: s.bits(),
            exploration: Exploration::Partial,
            cardinality: cardinalities.get(&s).copied(),
            min_cost: None,
            in_transitions: incoming.remove(&s).unwrap_or_default(),
        })
        .collect())
}

/// JSON-lines, one sample per line, fields in schema order.
pub fn export_samples<W: Write>(samples: &[TrainingSample], mut out: W) -> Result<(), CcgError> {
    for s in samples {
        serde_json::to_writer(&mut out, s)
            .map_err(|e| CcgError::Parse { line: 0, msg: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn import_samples<R: BufRead>(input: R) -> Result<Vec<TrainingSample>, CcgError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TrainingSample =
            serde_json::from_str(&line).map_err(|e| CcgError::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        out.push(sample);
    }
    Ok(out)
}
