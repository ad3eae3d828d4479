//! Reverse-mode autodiff over a flat operation tape.
//!
//! Forward calls append nodes (inputs always precede outputs), backward
//! walks the tape once in reverse and accumulates adjoints. A parameter
//! appears as a single leaf node no matter how often it is used, so its
//! adjoint accumulates naturally.

use std::collections::BTreeMap;

use super::tensor::{self, Tensor};
use super::{NumericsError, ParamId, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    SumRows(NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxGroups(NodeId, Vec<(usize, usize)>),
    Dot(NodeId, NodeId),
    Stack(Vec<NodeId>),
    Slice(NodeId, usize, usize),
    LinearComb(NodeId, Vec<NodeId>),
    MinScalars(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf for a learnable tensor; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.get(id).clone(),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        self.push(Op::Mul(a, b), value)
    }

    /// Tensor times scalar node.
    pub fn scale(&mut self, t: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(NumericsError::ShapeMismatch {
                op: "scale",
                lhs: self.value(t).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let factor = self.value(s).scalar_value();
        let data = self.value(t).data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(self.value(t).shape().to_vec(), data)?;
        self.push(Op::Scale(t, s), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat(&tensors);
        self.push(Op::Concat(parts.to_vec()), value)
    }

    pub fn sum(&mut self, t: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(t).data().iter().sum());
        self.push(Op::Sum(t), value)
    }

    /// Column sums of a matrix: `(r × c)` → `(c)`.
    pub fn sum_rows(&mut self, t: NodeId) -> Result<NodeId> {
        let v = self.value(t);
        if v.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "sum_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v.data()[i * c + j];
            }
        }
        self.push(Op::SumRows(t), Tensor::vector(out))
    }

    pub fn relu(&mut self, t: NodeId) -> Result<NodeId> {
        let data = self.value(t).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::from_vec(self.value(t).shape().to_vec(), data)?;
        self.push(Op::Relu(t), value)
    }

    pub fn leaky_relu(&mut self, t: NodeId, slope: f64) -> Result<NodeId> {
        let data = self
            .value(t)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let value = Tensor::from_vec(self.value(t).shape().to_vec(), data)?;
        self.push(Op::LeakyRelu(t, slope), value)
    }

    pub fn exp(&mut self, t: NodeId) -> Result<NodeId> {
        let data = self.value(t).data().iter().map(|x| x.exp()).collect();
        let value = Tensor::from_vec(self.value(t).shape().to_vec(), data)?;
        self.push(Op::Exp(t), value)
    }

    pub fn log(&mut self, t: NodeId) -> Result<NodeId> {
        if self.value(t).data().iter().any(|&x| x <= 0.0) {
            return Err(NumericsError::Domain { op: "log" });
        }
        let data = self.value(t).data().iter().map(|x| x.ln()).collect();
        let value = Tensor::from_vec(self.value(t).shape().to_vec(), data)?;
        self.push(Op::Log(t), value)
    }

    /// Softmax over each `(start, len)` slice of a flat score vector.
    pub fn softmax_groups(&mut self, t: NodeId, groups: Vec<(usize, usize)>) -> Result<NodeId> {
        let len = self.value(t).len();
        for &(start, glen) in &groups {
            if start + glen > len {
                return Err(NumericsError::ShapeMismatch {
                    op: "softmax_groups",
                    lhs: vec![len],
                    rhs: vec![start, glen],
                });
            }
        }
        let value = tensor::softmax_groups(self.value(t), &groups);
        self.push(Op::SoftmaxGroups(t, groups), value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(tensor::dot(self.value(a), self.value(b))?);
        self.push(Op::Dot(a, b), value)
    }

    /// Scalars stacked into a vector.
    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if !self.value(s).is_scalar() {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack",
                    lhs: self.value(s).shape().to_vec(),
                    rhs: vec![1],
                });
            }
            data.push(self.value(s).scalar_value());
        }
        self.push(Op::Stack(scalars.to_vec()), Tensor::vector(data))
    }

    pub fn slice(&mut self, t: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.value(t).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice",
                lhs: self.value(t).shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = self.value(t).data()[start..start + len].to_vec();
        self.push(Op::Slice(t, start, len), Tensor::vector(data))
    }

    /// Σ_i weights[i] · items[i] for equally shaped item vectors.
    pub fn linear_comb(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        if self.value(weights).len() != items.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "linear_comb",
                lhs: self.value(weights).shape().to_vec(),
                rhs: vec![items.len()],
            });
        }
        if items.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "linear_comb",
                lhs: vec![0],
                rhs: vec![0],
            });
        }
        let dim = self.value(items[0]).len();
        let mut out = vec![0.0; dim];
        for (idx, &item) in items.iter().enumerate() {
            let w = self.value(weights).data()[idx];
            let iv = self.value(item);
            if iv.len() != dim {
                return Err(NumericsError::ShapeMismatch {
                    op: "linear_comb",
                    lhs: vec![dim],
                    rhs: iv.shape().to_vec(),
                });
            }
            for (o, x) in out.iter_mut().zip(iv.data()) {
                *o += w * x;
            }
        }
        self.push(
            Op::LinearComb(weights, items.to_vec()),
            Tensor::vector(out),
        )
    }

    /// Minimum of scalar nodes; the adjoint flows to the first argmin.
    pub fn min_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "min_scalars",
                lhs: vec![0],
                rhs: vec![0],
            });
        }
        let mut best = f64::INFINITY;
        for &x in xs {
            let v = self.value(x).scalar_value();
            if v < best {
                best = v;
            }
        }
        self.push(Op::MinScalars(xs.to_vec()), Tensor::scalar(best))
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Concat(_) => "concat",
        Op::Sum(_) => "sum",
        Op::SumRows(_) => "sum_rows",
        Op::Relu(_) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::SoftmaxGroups(..) => "softmax_groups",
        Op::Dot(..) => "dot",
        Op::Stack(_) => "stack",
        Op::Slice(..) => "slice",
        Op::LinearComb(..) => "linear_comb",
        Op::MinScalars(_) => "min_scalars",
    }
}

/// Adjoints of the learnable leaves; parameters the loss never reaches
/// are simply absent and read back as zero.
#[derive(Debug, Default)]
pub struct GradientMap {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    /// Gradient for `id`, zeros when unreachable from the loss.
    pub fn get_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor {
        self.by_param
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn merge(&mut self, other: GradientMap) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}

/// Reverse sweep from a scalar loss node.
pub fn backward(tape: &Tape, loss: NodeId) -> Result<GradientMap> {
    if !tape.value(loss).is_scalar() {
        return Err(NumericsError::NonScalarLoss);
    }
    let mut adjoints: Vec<Option<Tensor>> = vec![None; tape.nodes.len()];
    adjoints[loss.0] = Some(Tensor::scalar(1.0));

    let add_into = |slot: &mut Option<Tensor>, delta: &[f64], shape: &[usize]| {
        match slot {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                *slot = Some(Tensor::from_vec(shape.to_vec(), delta.to_vec()).unwrap());
            }
        }
    };

    for idx in (0..tape.nodes.len()).rev() {
        let Some(grad) = adjoints[idx].take() else {
            continue;
        };
        let node = &tape.nodes[idx];
        let g = grad.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {
                adjoints[idx] = Some(grad);
                continue;
            }
            Op::Add(a, b) => {
                let shape = tape.value(*a).shape().to_vec();
                add_into(&mut adjoints[a.0], g, &shape);
                add_into(&mut adjoints[b.0], g, &shape);
            }
            Op::Sub(a, b) => {
                let shape = tape.value(*a).shape().to_vec();
                add_into(&mut adjoints[a.0], g, &shape);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                add_into(&mut adjoints[b.0], &neg, &shape);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let da: Vec<f64> = g.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                add_into(&mut adjoints[a.0], &da, av.shape());
                add_into(&mut adjoints[b.0], &db, bv.shape());
            }
            Op::Scale(t, s) => {
                let (tv, sv) = (tape.value(*t), tape.value(*s));
                let factor = sv.scalar_value();
                let dt: Vec<f64> = g.iter().map(|x| x * factor).collect();
                let ds: f64 = g.iter().zip(tv.data()).map(|(x, y)| x * y).sum();
                add_into(&mut adjoints[t.0], &dt, tv.shape());
                add_into(&mut adjoints[s.0], &[ds], &[1]);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let (r, c) = (av.shape()[0], av.shape()[1]);
                if bv.shape().len() == 1 {
                    // dA[i][l] = g[i] b[l]; dB[l] = Σ_i A[i][l] g[i]
                    let mut da = vec![0.0; r * c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        let gi = g[i];
                        for l in 0..c {
                            da[i * c + l] = gi * bv.data()[l];
                            db[l] += av.data()[i * c + l] * gi;
                        }
                    }
                    add_into(&mut adjoints[a.0], &da, av.shape());
                    add_into(&mut adjoints[b.0], &db, bv.shape());
                } else {
                    let k = bv.shape()[1];
                    let mut da = vec![0.0; r * c];
                    let mut db = vec![0.0; c * k];
                    for i in 0..r {
                        for l in 0..c {
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += g[i * k + j] * bv.data()[l * k + j];
                                db[l * k + j] += av.data()[i * c + l] * g[i * k + j];
                            }
                            da[i * c + l] = acc;
                        }
                    }
                    add_into(&mut adjoints[a.0], &da, av.shape());
                    add_into(&mut adjoints[b.0], &db, bv.shape());
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = tape.value(p);
                    add_into(
                        &mut adjoints[p.0],
                        &g[offset..offset + pv.len()],
                        pv.shape(),
                    );
                    offset += pv.len();
                }
            }
            Op::Sum(t) => {
                let tv = tape.value(*t);
                let dt = vec![g[0]; tv.len()];
                add_into(&mut adjoints[t.0], &dt, tv.shape());
            }
            Op::SumRows(t) => {
                let tv = tape.value(*t);
                let (r, c) = (tv.shape()[0], tv.shape()[1]);
                let mut dt = vec![0.0; r * c];
                for i in 0..r {
                    dt[i * c..(i + 1) * c].copy_from_slice(g);
                }
                add_into(&mut adjoints[t.0], &dt, tv.shape());
            }
            Op::Relu(t) => {
                let tv = tape.value(*t);
                let dt: Vec<f64> = g
                    .iter()
                    .zip(tv.data())
                    .map(|(gx, &x)| if x > 0.0 { *gx } else { 0.0 })
                    .collect();
                add_into(&mut adjoints[t.0], &dt, tv.shape());
            }
            Op::LeakyRelu(t, slope) => {
                let tv = tape.value(*t);
                let dt: Vec<f64> = g
                    .iter()
                    .zip(tv.data())
                    .map(|(gx, &x)| if x > 0.0 { *gx } else { slope * gx })
                    .collect();
                add_into(&mut adjoints[t.0], &dt, tv.shape());
            }
            Op::Exp(t) => {
                let dt: Vec<f64> = g.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                add_into(&mut adjoints[t.0], &dt, tape.value(*t).shape());
            }
            Op::Log(t) => {
                let tv = tape.value(*t);
                let dt: Vec<f64> = g.iter().zip(tv.data()).map(|(x, y)| x / y).collect();
                add_into(&mut adjoints[t.0], &dt, tv.shape());
            }
            Op::SoftmaxGroups(t, groups) => {
                let y = node.value.data();
                let mut dt = vec![0.0; y.len()];
                for &(start, len) in groups {
                    let mut inner = 0.0;
                    for i in start..start + len {
                        inner += g[i] * y[i];
                    }
                    for i in start..start + len {
                        dt[i] = y[i] * (g[i] - inner);
                    }
                }
                add_into(&mut adjoints[t.0], &dt, tape.value(*t).shape());
            }
            Op::Dot(a, b) => {
                let (av, bv) = (tape.value(*a), tape.value(*b));
                let da: Vec<f64> = bv.data().iter().map(|x| x * g[0]).collect();
                let db: Vec<f64> = av.data().iter().map(|x| x * g[0]).collect();
                add_into(&mut adjoints[a.0], &da, av.shape());
                add_into(&mut adjoints[b.0], &db, bv.shape());
            }
            Op::Stack(scalars) => {
                for (i, &s) in scalars.iter().enumerate() {
                    add_into(&mut adjoints[s.0], &[g[i]], &[1]);
                }
            }
            Op::Slice(t, start, len) => {
                let tv = tape.value(*t);
                let mut dt = vec![0.0; tv.len()];
                dt[*start..start + len].copy_from_slice(g);
                add_into(&mut adjoints[t.0], &dt, tv.shape());
            }
            Op::LinearComb(weights, items) => {
                let wv = tape.value(*weights);
                let mut dw = vec![0.0; wv.len()];
                for (i, &item) in items.iter().enumerate() {
                    let iv = tape.value(item);
                    dw[i] = g.iter().zip(iv.data()).map(|(x, y)| x * y).sum();
                    let di: Vec<f64> = g.iter().map(|x| x * wv.data()[i]).collect();
                    add_into(&mut adjoints[item.0], &di, iv.shape());
                }
                add_into(&mut adjoints[weights.0], &dw, wv.shape());
            }
            Op::MinScalars(xs) => {
                let best = node.value.scalar_value();
                let argmin = xs
                    .iter()
                    .position(|&x| tape.value(x).scalar_value() == best)
                    .unwrap();
                add_into(&mut adjoints[xs[argmin].0], &[g[0]], &[1]);
            }
        }
    }

    let mut out = GradientMap::default();
    for (idx, node) in tape.nodes.iter().enumerate() {
        if let Op::Param(pid) = node.op {
            if let Some(grad) = adjoints[idx].take() {
                out.by_param.insert(pid, grad);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    /// |a−b| relative to max(1, |a|, |b|).
    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Central finite difference of `loss(store)` w.r.t. one coordinate.
    fn fd_coord(
        store: &mut ParamStore,
        id: ParamId,
        coord: usize,
        h: f64,
        loss: &mut dyn FnMut(&ParamStore) -> f64,
    ) -> f64 {
        let orig = store.get(id).data()[coord];
        store.get_mut(id).data_mut()[coord] = orig + h;
        let up = loss(store);
        store.get_mut(id).data_mut()[coord] = orig - h;
        let down = loss(store);
        store.get_mut(id).data_mut()[coord] = orig;
        (up - down) / (2.0 * h)
    }

    fn check_all_coords(
        store: &mut ParamStore,
        id: ParamId,
        loss: &mut dyn FnMut(&ParamStore) -> f64,
        analytic: &Tensor,
        tol: f64,
    ) {
        for coord in 0..analytic.len() {
            let fd = fd_coord(store, id, coord, 1e-5, loss);
            let ad = analytic.data()[coord];
            assert!(
                rel_err(ad, fd) < tol,
                "coord {coord}: analytic {ad} vs fd {fd}"
            );
        }
    }

    #[test]
    fn relu_values_and_grads() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let mut store = ParamStore::new();
        let p = store.register("x", Tensor::vector(vec![-1.0, 2.0]));
        let mut tape = Tape::new();
        let xp = tape.param(&store, p);
        let y = tape.relu(xp).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert!((tape.value(y).scalar_value() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let m = store.register_xavier("m", 3, 4, &mut rng);
        let v = store.register_xavier_vec("v", 4, &mut rng);
        let w = store.register_xavier_vec("w", 3, &mut rng);
        // keep log inputs positive and relu inputs off the kink
        for id in [v, w] {
            for x in store.get_mut(id).data_mut() {
                *x = x.abs() + 0.3;
            }
        }

        type Builder = fn(&mut Tape, &ParamStore, ParamId, ParamId, ParamId) -> NodeId;
        let cases: Vec<(&str, Builder)> = vec![
            ("matmul", |t, s, m, v, _w| {
                let (m, v) = (t.param(s, m), t.param(s, v));
                let y = t.matmul(m, v).unwrap();
                t.sum(y).unwrap()
            }),
            ("add_mul_sub", |t, s, _m, v, _w| {
                let v = t.param(s, v);
                let a = t.add(v, v).unwrap();
                let b = t.sub(a, v).unwrap();
                let c = t.mul(b, v).unwrap();
                t.sum(c).unwrap()
            }),
            ("concat_slice", |t, s, _m, v, w| {
                let (v, w) = (t.param(s, v), t.param(s, w));
                let c = t.concat(&[v, w]).unwrap();
                let sl = t.slice(c, 2, 4).unwrap();
                let sq = t.mul(sl, sl).unwrap();
                t.sum(sq).unwrap()
            }),
            ("relu_leaky", |t, s, _m, v, _w| {
                let v = t.param(s, v);
                let shifted = t.constant(Tensor::vector(vec![-1.0, 0.5, -0.25, 2.0]));
                let x = t.add(v, shifted).unwrap();
                let r = t.relu(x).unwrap();
                let l = t.leaky_relu(x, 0.2).unwrap();
                let both = t.add(r, l).unwrap();
                t.sum(both).unwrap()
            }),
            ("exp_log", |t, s, _m, v, _w| {
                let v = t.param(s, v);
                let e = t.exp(v).unwrap();
                let l = t.log(e).unwrap();
                let m2 = t.mul(e, l).unwrap();
                t.sum(m2).unwrap()
            }),
            ("softmax_groups", |t, s, _m, v, _w| {
                let v = t.param(s, v);
                let sm = t.softmax_groups(v, vec![(0, 2), (2, 2)]).unwrap();
                let weights = t.constant(Tensor::vector(vec![0.3, -1.0, 2.0, 0.7]));
                let weighted = t.mul(sm, weights).unwrap();
                t.sum(weighted).unwrap()
            }),
            ("dot_scale", |t, s, _m, v, _w| {
                let v = t.param(s, v);
                let d = t.dot(v, v).unwrap();
                let scaled = t.scale(v, d).unwrap();
                t.sum(scaled).unwrap()
            }),
            ("stack_linear_comb", |t, s, _m, v, w| {
                let (v, w) = (t.param(s, v), t.param(s, w));
                let s0 = t.slice(w, 0, 1).unwrap();
                let s1 = t.slice(w, 1, 1).unwrap();
                let ws = t.stack(&[s0, s1]).unwrap();
                let half = t.slice(v, 0, 2).unwrap();
                let other = t.slice(v, 2, 2).unwrap();
                let lc = t.linear_comb(ws, &[half, other]).unwrap();
                let sq = t.mul(lc, lc).unwrap();
                t.sum(sq).unwrap()
            }),
            ("min_scalars", |t, s, _m, v, _w| {
                let v = t.param(s, v);
                let a = t.slice(v, 0, 1).unwrap();
                let b = t.slice(v, 1, 1).unwrap();
                let c = t.slice(v, 2, 1).unwrap();
                let m2 = t.min_scalars(&[a, b, c]).unwrap();
                let sq = t.mul(m2, m2).unwrap();
                t.sum(sq).unwrap()
            }),
            ("sum_rows", |t, s, m, _v, w| {
                let (m, w) = (t.param(s, m), t.param(s, w));
                let mm = t.matmul(m, m).ok(); // shape mismatch; ignore
                assert!(mm.is_none() || true);
                let sr = t.sum_rows(m).unwrap();
                let picked = t.slice(sr, 0, 3).unwrap();
                let d = t.dot(picked, w).unwrap();
                t.mul(d, d).unwrap()
            }),
        ];

        for (name, build) in cases {
            for pid in [m, v, w] {
                let mut eval = |s: &ParamStore| {
                    let mut t = Tape::new();
                    let loss = build(&mut t, s, m, v, w);
                    t.value(loss).scalar_value()
                };
                let mut tape = Tape::new();
                let loss = build(&mut tape, &store, m, v, w);
                let grads = backward(&tape, loss).unwrap();
                let analytic = grads.get_or_zeros(pid, store.get(pid).shape());
                for coord in 0..analytic.len() {
                    let fd = fd_coord(&mut store, pid, coord, 1e-5, &mut eval);
                    let ad = analytic.data()[coord];
                    assert!(
                        rel_err(ad, fd) < 1e-6,
                        "{name} grad wrt {} coord {coord}: {ad} vs {fd}",
                        store.name(pid)
                    );
                }
            }
        }
    }

    #[test]
    fn sum_of_matvec_broadcasts_input() {
        // loss = sum(W x) with x fixed ⇒ ∂loss/∂W = x broadcast to every row
        let mut store = ParamStore::new();
        let w = store.register(
            "w",
            Tensor::from_vec(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.matmul(wn, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(
            grads.get(w).unwrap().data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut store = ParamStore::new();
        let used = store.register("used", Tensor::scalar(2.0));
        let unused = store.register("unused", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _lonely = tape.param(&store, unused);
        let loss = tape.mul(u, u).unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(
            grads.get_or_zeros(unused, store.get(unused).shape()).data(),
            &[0.0]
        );
        assert_eq!(grads.get(used).unwrap().data(), &[4.0]);
    }

    #[test]
    fn three_layer_composite_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let w1 = store.register_xavier("w1", 5, 4, &mut rng);
        let w2 = store.register_xavier("w2", 3, 5, &mut rng);
        let w3 = store.register_xavier_vec("w3", 3, &mut rng);
        let input = Tensor::vector(vec![0.3, -0.7, 1.1, 0.4]);

        let build = |t: &mut Tape, s: &ParamStore| -> NodeId {
            let (w1, w2, w3) = (t.param(s, w1), t.param(s, w2), t.param(s, w3));
            let x = t.constant(input.clone());
            let h1 = t.matmul(w1, x).unwrap();
            let a1 = t.leaky_relu(h1, 0.2).unwrap();
            let h2 = t.matmul(w2, a1).unwrap();
            let a2 = t.relu(h2).unwrap();
            let out = t.dot(w3, a2).unwrap();
            t.mul(out, out).unwrap()
        };
        let mut eval = |s: &ParamStore| {
            let mut t = Tape::new();
            let l = build(&mut t, s);
            t.value(l).scalar_value()
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        let grads = backward(&tape, loss).unwrap();
        for pid in [w1, w2, w3] {
            let analytic = grads.get_or_zeros(pid, store.get(pid).shape());
            check_all_coords(&mut store, pid, &mut eval, &analytic, 1e-4);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            backward(&tape, x),
            Err(NumericsError::NonScalarLoss)
        ));
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(
            tape.exp(x),
            Err(NumericsError::NonFinite { op: "exp" })
        ));
        let zero = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(
            tape.log(zero),
            Err(NumericsError::Domain { op: "log" })
        ));
    }
}
