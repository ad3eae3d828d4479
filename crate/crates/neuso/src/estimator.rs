//! Prediction heads, losses, and the multi-task training loop.
//!
//! All three heads emit a scalar in log space: they are trained against
//! `ln(1+y)` targets and predictions come back through `exp(z) − 1`, so
//! zero cardinalities and costs are representable and predictions are
//! never negative. The single-join cost head consumes the concatenated
//! representations of both endpoint states; the empty state's
//! representation is a fixed zero vector.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ccg::{Exploration, TrainingSample};
use crate::encoder::{
    encode_query_tape, pool_tape, EncoderConfig, EncoderError, EncoderParams, QueryFeatures,
};
use crate::graph::{LabeledGraph, VertexSet};
use crate::matcher::CandidateContext;
use crate::numerics::{
    adamw_step, backward, scheduled_lr, Checkpoint, NodeId, NumericsError, OptimizerState,
    ParamId, ParamStore, Tape, Tensor,
};

#[derive(Error, Debug)]
pub enum EstimatorError {
    #[error("representation width {found}, expected {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("loss inputs must be non-negative")]
    NegativeLossInput,
    #[error("head produced a non-finite prediction")]
    NonFinitePrediction,
    #[error("loss weights must lie in [0, 1]")]
    BadLossWeights,
    #[error("vertex {0} is not adjacent to the subquery")]
    NotAdjacent(u32),
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Per-task weights α_card, α_cost, α_mc.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub card: f64,
    pub cost: f64,
    pub mc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            card: 0.4,
            cost: 0.3,
            mc: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        for w in [self.card, self.cost, self.mc] {
            if !(0.0..=1.0).contains(&w) {
                return Err(EstimatorError::BadLossWeights);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub schedule_factor: f64,
    pub schedule_period: u32,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// The consistency penalty tying the min-cost head to the single-step
    /// cost head. On by default; disabled only for ablations.
    pub use_constraint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.002,
            schedule_factor: 0.8,
            schedule_period: 20,
            batch_size: 16,
            seed: 7,
            weights: LossWeights::default(),
            use_constraint: true,
        }
    }
}

/// One scalar-output MLP: two ReLU hidden layers, linear output.
struct Mlp {
    w: Vec<ParamId>,
    b: Vec<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Mlp {
    fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w0 = store.register_xavier(format!("head.{name}.w0"), hidden, input, rng);
        let b0 = store.register(format!("head.{name}.b0"), Tensor::zeros(vec![hidden]));
        let w1 = store.register_xavier(format!("head.{name}.w1"), hidden, hidden, rng);
        let b1 = store.register(format!("head.{name}.b1"), Tensor::zeros(vec![hidden]));
        let out_w = store.register_xavier_vec(format!("head.{name}.out_w"), hidden, rng);
        let out_b = store.register(format!("head.{name}.out_b"), Tensor::scalar(0.0));
        Mlp {
            w: vec![w0, w1],
            b: vec![b0, b1],
            out_w,
            out_b,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId, NumericsError> {
        let mut h = x;
        for (w, b) in self.w.iter().zip(&self.b) {
            let wn = tape.param(store, *w);
            let bn = tape.param(store, *b);
            let lin = tape.matmul(wn, h)?;
            let shifted = tape.add(lin, bn)?;
            h = tape.relu(shifted)?;
        }
        let ow = tape.param(store, self.out_w);
        let ob = tape.param(store, self.out_b);
        let d = tape.dot(ow, h)?;
        tape.add(d, ob)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.w.clone();
        ids.extend(&self.b);
        ids.push(self.out_w);
        ids.push(self.out_b);
        ids
    }
}

/// Model hyperparameters stored alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig::tiny(),
            head_hidden: 8,
        }
    }
}

/// Everything learnable: encoder layers, pooling matrices, three heads.
pub struct ModelBundle {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    card: Mlp,
    cost: Mlp,
    mc: Mlp,
    pub config: ModelConfig,
    pub seed: u64,
}

impl ModelBundle {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut store, config.encoder.clone(), &mut rng);
        let m = config.encoder.output_width();
        let card = Mlp::init(&mut store, "card", m, config.head_hidden, &mut rng);
        let cost = Mlp::init(&mut store, "cost", 2 * m, config.head_hidden, &mut rng);
        let mc = Mlp::init(&mut store, "mc", m, config.head_hidden, &mut rng);
        ModelBundle {
            store,
            encoder,
            card,
            cost,
            mc,
            config,
            seed,
        }
    }

    pub fn representation_width(&self) -> usize {
        self.config.encoder.output_width()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let hyper = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::from_store(&self.store, self.seed, hyper)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EstimatorError> {
        let config: ModelConfig = serde_json::from_value(ckpt.hyperparameters.clone())
            .map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        let mut bundle = ModelBundle::init(config, ckpt.seed);
        ckpt.restore_into(&mut bundle.store)?;
        Ok(bundle)
    }

    /// Zeroes a head, pinning its predictions to exp(0)−1 = 0.
    pub fn zero_head(&mut self, which: Head) {
        let ids = match which {
            Head::Card => self.card.param_ids(),
            Head::Cost => self.cost.param_ids(),
            Head::MinCost => self.mc.param_ids(),
        };
        for id in ids {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn head(&self, which: Head) -> &Mlp {
        match which {
            Head::Card => &self.card,
            Head::Cost => &self.cost,
            Head::MinCost => &self.mc,
        }
    }

    /// Log-space head output for a prebuilt representation.
    pub fn head_log_output(&self, which: Head, x: &Tensor) -> Result<f64, EstimatorError> {
        let expected = match which {
            Head::Cost => 2 * self.representation_width(),
            _ => self.representation_width(),
        };
        if x.len() != expected {
            return Err(EstimatorError::WidthMismatch {
                expected,
                found: x.len(),
            });
        }
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let z = self.head(which).forward(&mut tape, &self.store, xn)?;
        let out = tape.value(z).scalar_value();
        if !out.is_finite() {
            return Err(EstimatorError::NonFinitePrediction);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Card,
    Cost,
    MinCost,
}

fn from_log_space(z: f64) -> Result<f64, EstimatorError> {
    let pred = z.exp() - 1.0;
    if !pred.is_finite() {
        return Err(EstimatorError::NonFinitePrediction);
    }
    Ok(pred.max(0.0))
}

/// Predicted cardinality of the subquery represented by `x_q`.
pub fn predict_card(bundle: &ModelBundle, x_q: &Tensor) -> Result<f64, EstimatorError> {
    from_log_space(bundle.head_log_output(Head::Card, x_q)?)
}

/// Predicted cost of the single-vertex extension from `x_q1` to `x_q2`.
pub fn predict_cost(
    bundle: &ModelBundle,
    x_q1: &Tensor,
    x_q2: &Tensor,
) -> Result<f64, EstimatorError> {
    let mut data = x_q1.data().to_vec();
    data.extend_from_slice(x_q2.data());
    from_log_space(bundle.head_log_output(Head::Cost, &Tensor::vector(data))?)
}

/// Predicted cheapest execution cost of the subquery represented by
/// `x_q`. The caller maps the empty state to 0 without invoking this.
pub fn predict_min_cost(bundle: &ModelBundle, x_q: &Tensor) -> Result<f64, EstimatorError> {
    from_log_space(bundle.head_log_output(Head::MinCost, x_q)?)
}

/// Traditional single-join cost estimate: the running cardinality of the
/// source state times the tightest candidate edge-to-set ratio over the
/// backward neighbors of the added vertex. An empty backward candidate
/// set forces 0.
pub fn gcbo_cost(
    card_q1: f64,
    q: &LabeledGraph,
    ctx: &CandidateContext,
    from: VertexSet,
    add: u32,
) -> Result<f64, EstimatorError> {
    let mut best: Option<f64> = None;
    for &u in q.neighbors(add) {
        if !from.contains(u) {
            continue;
        }
        let denom = ctx.candidate_count(u) as f64;
        if denom == 0.0 {
            return Ok(0.0);
        }
        let ratio = ctx.edge_count(u, add) as f64 / denom;
        best = Some(best.map_or(ratio, |b: f64| b.min(ratio)));
    }
    match best {
        Some(ratio) => Ok(card_q1 * ratio),
        None => Err(EstimatorError::NotAdjacent(add)),
    }
}

/// Squared log-ratio loss with +1 smoothing:
/// `(ln(1+pred) − ln(1+truth))²`.
pub fn q_loss(pred: f64, truth: f64) -> Result<f64, EstimatorError> {
    if pred < 0.0 || truth < 0.0 {
        return Err(EstimatorError::NegativeLossInput);
    }
    let d = (1.0 + pred).ln() - (1.0 + truth).ln();
    Ok(d * d)
}

/// Consistency penalty in log space: how far the min-cost estimate falls
/// below the cheapest single-step estimate into the state. No explored
/// in-neighbors, no penalty.
pub fn constraint_loss(step_cost_logs: &[f64], mc_log: f64) -> f64 {
    let Some(min_step) = step_cost_logs
        .iter()
        .copied()
        .fold(None::<f64>, |acc, x| Some(acc.map_or(x, |a| a.min(x))))
    else {
        return 0.0;
    };
    let gap = (min_step - mc_log).max(0.0);
    gap * gap
}

/// One query's training inputs: its features plus the labeled lattice
/// samples collected for it.
pub struct TrainQuery {
    pub query_id: String,
    pub features: QueryFeatures,
    pub samples: Vec<TrainingSample>,
}

impl TrainQuery {
    fn is_full(&self) -> bool {
        self.samples
            .iter()
            .all(|s| s.exploration == Exploration::Full)
    }
}

/// Per-epoch loss components, in the order they land in the CSV log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub card_loss: f64,
    pub cost_loss: f64,
    pub mc_loss: f64,
    pub constraint_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,card_loss,cost_loss,mc_loss,constraint_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.card_loss, e.cost_loss, e.mc_loss, e.constraint_loss, e.lr
            );
        }
        out
    }

    pub fn total(&self, epoch: usize) -> f64 {
        let e = &self.epochs[epoch];
        e.card_loss + e.cost_loss + e.mc_loss + e.constraint_loss
    }
}

struct QueryLossNodes {
    card: Vec<NodeId>,
    cost: Vec<NodeId>,
    mc: Vec<NodeId>,
    constraint: Vec<NodeId>,
}

/// Builds the taped loss terms for one query: encoder forward, memoized
/// pooling, per-sample head losses, and the constraint penalties.
fn build_query_losses(
    bundle: &ModelBundle,
    query: &TrainQuery,
    use_constraint: bool,
    tape: &mut Tape,
) -> Result<QueryLossNodes, EstimatorError> {
    let store = &bundle.store;
    let taped = encode_query_tape(
        tape,
        store,
        &bundle.encoder,
        &query.features,
        bundle.config.encoder.input_width(),
    )?;
    let m = bundle.representation_width();
    let zero_rep = tape.constant(Tensor::zeros(vec![m]));
    let mut pooled: BTreeMap<u64, NodeId> = BTreeMap::new();
    pooled.insert(0, zero_rep);
    let mut pooled_node = |tape: &mut Tape, s: VertexSet| -> Result<NodeId, EstimatorError> {
        if let Some(&n) = pooled.get(&s.bits()) {
            return Ok(n);
        }
        let n = pool_tape(tape, store, &bundle.encoder, &taped.vertex_nodes, s)?;
        pooled.insert(s.bits(), n);
        Ok(n)
    };

    let full = query.is_full();
    let mut nodes = QueryLossNodes {
        card: Vec::new(),
        cost: Vec::new(),
        mc: Vec::new(),
        constraint: Vec::new(),
    };
    let mut cost_estimates: BTreeMap<(u64, u64), NodeId> = BTreeMap::new();

    for sample in &query.samples {
        let state = sample.state_set();
        if !state.is_empty() {
            let rep = pooled_node(tape, state)?;
            if let Some(card) = sample.cardinality {
                let z = bundle.card.forward(tape, store, rep)?;
                let target = tape.constant(Tensor::scalar((1.0 + card as f64).ln()));
                let diff = tape.sub(z, target)?;
                nodes.card.push(tape.mul(diff, diff)?);
            }
            if full {
                if let Some(mc) = sample.min_cost {
                    let z = bundle.mc.forward(tape, store, rep)?;
                    let target = tape.constant(Tensor::scalar((1.0 + mc as f64).ln()));
                    let diff = tape.sub(z, target)?;
                    nodes.mc.push(tape.mul(diff, diff)?);
                }
            }
        }
        for transition in &sample.in_transitions {
            let from = VertexSet::from_bits(transition.from);
            let from_rep = pooled_node(tape, from)?;
            let to_rep = pooled_node(tape, state)?;
            let pair = tape.concat(&[from_rep, to_rep])?;
            let z = bundle.cost.forward(tape, store, pair)?;
            cost_estimates.insert((transition.from, sample.state), z);
            let target = tape.constant(Tensor::scalar((1.0 + transition.cost as f64).ln()));
            let diff = tape.sub(z, target)?;
            nodes.cost.push(tape.mul(diff, diff)?);
        }
    }

    if use_constraint {
        for sample in &query.samples {
            if sample.state_set().is_empty() || sample.in_transitions.is_empty() {
                continue;
            }
            let steps: Vec<NodeId> = sample
                .in_transitions
                .iter()
                .map(|t| cost_estimates[&(t.from, sample.state)])
                .collect();
            let min_step = tape.min_scalars(&steps)?;
            let rep = pooled_node(tape, sample.state_set())?;
            let z_mc = bundle.mc.forward(tape, store, rep)?;
            let gap = tape.sub(min_step, z_mc)?;
            let hinge = tape.relu(gap)?;
            nodes.constraint.push(tape.mul(hinge, hinge)?);
        }
    }
    Ok(nodes)
}

/// Folds loss terms batch by batch, scaling each batch subtotal by
/// `weight`; returns the scalar node and its value.
fn fold_terms(
    tape: &mut Tape,
    terms: &[NodeId],
    weight: f64,
    batch_size: usize,
    total: &mut Option<NodeId>,
) -> Result<f64, EstimatorError> {
    if terms.is_empty() || weight == 0.0 {
        return Ok(0.0);
    }
    let w = tape.scalar(weight);
    let mut value = 0.0;
    for batch in terms.chunks(batch_size.max(1)) {
        let mut acc = batch[0];
        for &t in &batch[1..] {
            acc = tape.add(acc, t)?;
        }
        let weighted = tape.mul(acc, w)?;
        value += tape.value(weighted).scalar_value();
        *total = Some(match *total {
            Some(prev) => tape.add(prev, weighted)?,
            None => weighted,
        });
    }
    Ok(value)
}

/// Multi-task training: per query one encoder pass, the weighted task
/// losses plus the unweighted constraint penalty, one optimizer step.
/// Deterministic for a fixed seed.
pub fn train(
    queries: &[TrainQuery],
    cfg: &TrainConfig,
    bundle: &mut ModelBundle,
) -> Result<TrainLog, EstimatorError> {
    if queries.is_empty() {
        return Err(EstimatorError::EmptyDataset);
    }
    cfg.weights.validate()?;
    let mut optimizer = OptimizerState::new(&bundle.store, cfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(
            cfg.learning_rate,
            cfg.schedule_factor,
            cfg.schedule_period,
            epoch,
        );
        optimizer.learning_rate = lr;
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.shuffle(&mut rng);

        let mut stats = EpochStats {
            epoch,
            card_loss: 0.0,
            cost_loss: 0.0,
            mc_loss: 0.0,
            constraint_loss: 0.0,
            lr,
        };
        for &qi in &order {
            let query = &queries[qi];
            let mut tape = Tape::new();
            let nodes = build_query_losses(bundle, query, cfg.use_constraint, &mut tape)?;
            let mut total: Option<NodeId> = None;
            stats.card_loss += fold_terms(
                &mut tape,
                &nodes.card,
                cfg.weights.card,
                cfg.batch_size,
                &mut total,
            )?;
            stats.cost_loss += fold_terms(
                &mut tape,
                &nodes.cost,
                cfg.weights.cost,
                cfg.batch_size,
                &mut total,
            )?;
            stats.mc_loss += fold_terms(
                &mut tape,
                &nodes.mc,
                cfg.weights.mc,
                cfg.batch_size,
                &mut total,
            )?;
            stats.constraint_loss += fold_terms(
                &mut tape,
                &nodes.constraint,
                1.0,
                cfg.batch_size,
                &mut total,
            )?;
            let Some(loss) = total else {
                continue; // nothing to learn from this query
            };
            let grads = backward(&tape, loss)?;
            adamw_step(&mut bundle.store, &grads, &mut optimizer);
        }
        log.epochs.push(stats);
    }
    Ok(log)
}

/// Builds [`TrainQuery`] inputs by joining samples (grouped by query id)
/// with per-query features; ids the lookup cannot resolve are dropped.
pub fn assemble_train_queries(
    samples: &[TrainingSample],
    lookup: impl Fn(&str) -> Option<QueryFeatures>,
) -> Vec<TrainQuery> {
    let mut by_query: BTreeMap<String, Vec<TrainingSample>> = BTreeMap::new();
    for s in samples {
        by_query.entry(s.query_id.clone()).or_default().push(s.clone());
    }
    by_query
        .into_iter()
        .filter_map(|(query_id, samples)| {
            let features = lookup(&query_id)?;
            Some(TrainQuery {
                query_id,
                features,
                samples,
            })
        })
        .collect()
}
