//! Define-by-run expression graph with reverse-mode differentiation.
//!
//! Every operation is recorded as a node and evaluated eagerly, so a graph is
//! both a trace and a cache of forward values. The backward pass emits its
//! gradient computation as new nodes of the same graph, which is what makes
//! the mixed second derivative exact: differentiating the emitted gradient
//! nodes a second time is an ordinary reverse sweep.
//!
//! Graphs are rebuilt per optimization step and sized for ~10^4 parameters.

use std::collections::BTreeMap;

use super::{Array, GraphError, ParamSet};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    /// Named parameter; value bound from a [`ParamSet`].
    Leaf(String),
    /// Fixed value, never differentiated.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    ScalarAdd(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    /// Derivative mask of the leaky rectifier; piecewise constant, no gradient.
    LreluMask(NodeId, f64),
    /// Per-row maximum, (n,c) -> (n,1). Detached: used only to shift logits.
    RowMax(NodeId),
    /// (n,c) -> (n,1)
    SumLast(NodeId),
    /// (n,1) -> (n,c)
    BroadcastLast(NodeId, usize),
    /// (n,c) -> (1,c)
    SumRows(NodeId),
    /// (1,c) -> (n,c)
    BroadcastRows(NodeId, usize),
    /// any -> scalar
    SumAll(NodeId),
    /// any -> scalar
    MeanAll(NodeId),
    /// scalar -> given shape
    BroadcastScalar(NodeId, Vec<usize>),
    /// max(x, floor); counts how often the floor engages.
    ClampMin(NodeId, f64),
    /// 1 where x > floor else 0; piecewise constant, no gradient.
    ClampMask(NodeId, f64),
    /// Row selection: out[i,:] = in[rows[i],:]
    GatherRows(NodeId, Vec<usize>),
    /// Adjoint of GatherRows: accumulate rows back into an (n,c) array.
    ScatterRows(NodeId, Vec<usize>, usize),
    /// 3x3 zero-padded window extraction: (h*w, c) -> (h*w, 9c).
    Unfold3x3 { src: NodeId, h: usize, w: usize, c: usize },
    /// Adjoint of Unfold3x3: (h*w, 9c) -> (h*w, c).
    Fold3x3 { src: NodeId, h: usize, w: usize, c: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScalarMul(..) => "scalar_mul",
            Op::ScalarAdd(..) => "scalar_add",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::LreluMask(..) => "leaky_relu_mask",
            Op::RowMax(..) => "row_max",
            Op::SumLast(..) => "sum_last",
            Op::BroadcastLast(..) => "broadcast_last",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::ClampMin(..) => "clamp_min",
            Op::ClampMask(..) => "clamp_mask",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Unfold3x3 { .. } => "unfold3x3",
            Op::Fold3x3 { .. } => "fold3x3",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// A recorded computation over dense arrays.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    clamp_hits: u64,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of values that hit the `ClampMin` floor during the most
    /// recent evaluation sweep (including eager evaluation at build time).
    pub fn clamp_hits(&self) -> u64 {
        self.clamp_hits
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Leaf(name) => format!("node #{} (leaf '{}')", id.0, name),
            op => format!("node #{} ({})", id.0, op.name()),
        }
    }

    fn push(&mut self, op: Op, value: Array) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        if !value.all_finite() {
            let msg = format!("node #{} ({})", id.0, op.name());
            return Err(GraphError::NonFinite(msg));
        }
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    // ── node constructors ────────────────────────────────────────────

    pub fn leaf(&mut self, name: &str, value: Array) -> Result<NodeId, GraphError> {
        if self.leaves.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let id = self.push(Op::Leaf(name.to_string()), value)?;
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Creates one leaf per entry of `params`, named after the entries.
    pub fn leaves_from(&mut self, params: &ParamSet) -> Result<BTreeMap<String, NodeId>, GraphError> {
        let mut out = BTreeMap::new();
        for (name, value) in params.iter() {
            out.insert(name.clone(), self.leaf(name, value.clone())?);
        }
        Ok(out)
    }

    pub fn constant(&mut self, value: Array) -> Result<NodeId, GraphError> {
        self.push(Op::Constant, value)
    }

    fn check_same_shape(&self, what: &str, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(GraphError::BadShape(format!(
                "{}: {} has shape {:?}, {} has shape {:?}",
                what,
                self.describe(a),
                self.value(a).shape(),
                self.describe(b),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn check_2d(&self, what: &str, a: NodeId) -> Result<(), GraphError> {
        if self.value(a).shape().len() != 2 {
            return Err(GraphError::BadShape(format!(
                "{}: {} has shape {:?}, expected 2-D",
                what,
                self.describe(a),
                self.value(a).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_same_shape("add", a, b)?;
        let v = zip_arrays(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_same_shape("sub", a, b)?;
        let v = zip_arrays(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_same_shape("mul", a, b)?;
        let v = zip_arrays(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_same_shape("div", a, b)?;
        let v = zip_arrays(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::ScalarMul(a, c), v)
    }

    pub fn scalar_add(&mut self, a: NodeId, c: f64) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::ScalarAdd(a, c), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check_2d("matmul", a)?;
        self.check_2d("matmul", b)?;
        if self.value(a).cols() != self.value(b).rows() {
            return Err(GraphError::BadShape(format!(
                "matmul: {} is {:?} but {} is {:?}",
                self.describe(a),
                self.value(a).shape(),
                self.describe(b),
                self.value(b).shape()
            )));
        }
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_2d("transpose", a)?;
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    fn lrelu_mask(&mut self, a: NodeId, slope: f64) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
        self.push(Op::LreluMask(a, slope), v)
    }

    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_2d("row_max", a)?;
        let v = eval_row_max(self.value(a));
        self.push(Op::RowMax(a), v)
    }

    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_2d("sum_last", a)?;
        let v = eval_sum_last(self.value(a));
        self.push(Op::SumLast(a), v)
    }

    pub fn broadcast_last(&mut self, a: NodeId, c: usize) -> Result<NodeId, GraphError> {
        self.check_2d("broadcast_last", a)?;
        if self.value(a).cols() != 1 {
            return Err(GraphError::BadShape(format!(
                "broadcast_last: {} has shape {:?}, expected (n,1)",
                self.describe(a),
                self.value(a).shape()
            )));
        }
        let v = eval_broadcast_last(self.value(a), c);
        self.push(Op::BroadcastLast(a, c), v)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check_2d("sum_rows", a)?;
        let v = eval_sum_rows(self.value(a));
        self.push(Op::SumRows(a), v)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId, GraphError> {
        self.check_2d("broadcast_rows", a)?;
        if self.value(a).rows() != 1 {
            return Err(GraphError::BadShape(format!(
                "broadcast_rows: {} has shape {:?}, expected (1,c)",
                self.describe(a),
                self.value(a).shape()
            )));
        }
        let v = eval_broadcast_rows(self.value(a), n);
        self.push(Op::BroadcastRows(a, n), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let v = Array::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let n = self.value(a).numel() as f64;
        let v = Array::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(Op::MeanAll(a), v)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if !self.value(a).is_scalar() {
            return Err(GraphError::NotScalar(self.describe(a)));
        }
        let v = Array::filled(shape, self.value(a).item());
        self.push(Op::BroadcastScalar(a, shape.to_vec()), v)
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId, GraphError> {
        let mut hits = 0u64;
        let v = self.value(a).map(|x| {
            if x > floor {
                x
            } else {
                hits += 1;
                floor
            }
        });
        self.clamp_hits += hits;
        self.push(Op::ClampMin(a, floor), v)
    }

    fn clamp_mask(&mut self, a: NodeId, floor: f64) -> Result<NodeId, GraphError> {
        let v = self.value(a).map(|x| if x > floor { 1.0 } else { 0.0 });
        self.push(Op::ClampMask(a, floor), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId, GraphError> {
        self.check_2d("gather_rows", a)?;
        let n = self.value(a).rows();
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(GraphError::BadShape(format!(
                "gather_rows: row index {} out of bounds for {} with {} rows",
                bad,
                self.describe(a),
                n
            )));
        }
        let v = eval_gather_rows(self.value(a), &rows);
        self.push(Op::GatherRows(a, rows), v)
    }

    pub fn scatter_rows(&mut self, a: NodeId, rows: Vec<usize>, n: usize) -> Result<NodeId, GraphError> {
        self.check_2d("scatter_rows", a)?;
        if rows.len() != self.value(a).rows() {
            return Err(GraphError::BadShape(format!(
                "scatter_rows: {} rows vs {} indices",
                self.value(a).rows(),
                rows.len()
            )));
        }
        let v = eval_scatter_rows(self.value(a), &rows, n);
        self.push(Op::ScatterRows(a, rows, n), v)
    }

    /// 3x3 window extraction with zero padding; input (h*w, c), output (h*w, 9c).
    pub fn unfold3x3(&mut self, a: NodeId, h: usize, w: usize) -> Result<NodeId, GraphError> {
        self.check_2d("unfold3x3", a)?;
        let c = self.value(a).cols();
        if self.value(a).rows() != h * w {
            return Err(GraphError::BadShape(format!(
                "unfold3x3: {} has {} rows, expected h*w = {}",
                self.describe(a),
                self.value(a).rows(),
                h * w
            )));
        }
        let v = eval_unfold3x3(self.value(a), h, w, c);
        self.push(Op::Unfold3x3 { src: a, h, w, c }, v)
    }

    fn fold3x3(&mut self, a: NodeId, h: usize, w: usize, c: usize) -> Result<NodeId, GraphError> {
        let v = eval_fold3x3(self.value(a), h, w, c);
        self.push(Op::Fold3x3 { src: a, h, w, c }, v)
    }

    /// Row-wise softmax of a (n,c) array of logits.
    ///
    /// The row maximum is subtracted through a detached node before
    /// exponentiation; softmax is shift-invariant, so the gradient is exact.
    pub fn softmax_rows(&mut self, logits: NodeId) -> Result<NodeId, GraphError> {
        self.check_2d("softmax", logits)?;
        let c = self.value(logits).cols();
        let m = self.row_max(logits)?;
        let mb = self.broadcast_last(m, c)?;
        let shifted = self.sub(logits, mb)?;
        let e = self.exp(shifted)?;
        let s = self.sum_last(e)?;
        let sb = self.broadcast_last(s, c)?;
        self.div(e, sb)
    }

    // ── evaluation ───────────────────────────────────────────────────

    /// Rebinds the value of a leaf. Callers must [`Graph::reeval`] afterwards.
    pub fn set_leaf(&mut self, name: &str, value: Array) -> Result<(), GraphError> {
        let id = self
            .leaves
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))?;
        if self.nodes[id.0].value.shape() != value.shape() {
            return Err(GraphError::BadShape(format!(
                "leaf '{}' has shape {:?}, cannot bind {:?}",
                name,
                self.nodes[id.0].value.shape(),
                value.shape()
            )));
        }
        self.nodes[id.0].value = value;
        Ok(())
    }

    /// Rebinds every leaf present in `params` (missing graph leaves error).
    pub fn bind(&mut self, params: &ParamSet) -> Result<(), GraphError> {
        for (name, value) in params.iter() {
            self.set_leaf(name, value.clone())?;
        }
        Ok(())
    }

    /// Recomputes every non-leaf, non-constant node in insertion order.
    ///
    /// Insertion order is a topological order by construction, and a second
    /// sweep over unchanged leaves reproduces every value bit for bit.
    pub fn reeval(&mut self) -> Result<(), GraphError> {
        self.clamp_hits = 0;
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf(_) | Op::Constant => continue,
                Op::Add(a, b) => zip_arrays(self.value(*a), self.value(*b), |x, y| x + y),
                Op::Sub(a, b) => zip_arrays(self.value(*a), self.value(*b), |x, y| x - y),
                Op::Mul(a, b) => zip_arrays(self.value(*a), self.value(*b), |x, y| x * y),
                Op::Div(a, b) => zip_arrays(self.value(*a), self.value(*b), |x, y| x / y),
                Op::ScalarMul(a, c) => {
                    let c = *c;
                    self.value(*a).map(|x| x * c)
                }
                Op::ScalarAdd(a, c) => {
                    let c = *c;
                    self.value(*a).map(|x| x + c)
                }
                Op::MatMul(a, b) => self.value(*a).matmul(self.value(*b)),
                Op::Transpose(a) => self.value(*a).transpose(),
                Op::Exp(a) => self.value(*a).map(f64::exp),
                Op::Log(a) => self.value(*a).map(f64::ln),
                Op::Sigmoid(a) => self.value(*a).map(|x| 1.0 / (1.0 + (-x).exp())),
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    self.value(*a).map(|x| if x > 0.0 { x } else { s * x })
                }
                Op::LreluMask(a, s) => {
                    let s = *s;
                    self.value(*a).map(|x| if x > 0.0 { 1.0 } else { s })
                }
                Op::RowMax(a) => eval_row_max(self.value(*a)),
                Op::SumLast(a) => eval_sum_last(self.value(*a)),
                Op::BroadcastLast(a, c) => eval_broadcast_last(self.value(*a), *c),
                Op::SumRows(a) => eval_sum_rows(self.value(*a)),
                Op::BroadcastRows(a, n) => eval_broadcast_rows(self.value(*a), *n),
                Op::SumAll(a) => Array::scalar(self.value(*a).data().iter().sum()),
                Op::MeanAll(a) => {
                    let n = self.value(*a).numel() as f64;
                    Array::scalar(self.value(*a).data().iter().sum::<f64>() / n)
                }
                Op::BroadcastScalar(a, shape) => Array::filled(shape, self.value(*a).item()),
                Op::ClampMin(a, floor) => {
                    let floor = *floor;
                    let mut hits = 0u64;
                    let v = self.value(*a).map(|x| {
                        if x > floor {
                            x
                        } else {
                            hits += 1;
                            floor
                        }
                    });
                    self.clamp_hits += hits;
                    v
                }
                Op::ClampMask(a, floor) => {
                    let floor = *floor;
                    self.value(*a).map(|x| if x > floor { 1.0 } else { 0.0 })
                }
                Op::GatherRows(a, rows) => eval_gather_rows(self.value(*a), rows),
                Op::ScatterRows(a, rows, n) => eval_scatter_rows(self.value(*a), rows, *n),
                Op::Unfold3x3 { src, h, w, c } => eval_unfold3x3(self.value(*src), *h, *w, *c),
                Op::Fold3x3 { src, h, w, c } => eval_fold3x3(self.value(*src), *h, *w, *c),
            };
            if !value.all_finite() {
                return Err(GraphError::NonFinite(self.describe(NodeId(i))));
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    // ── differentiation ──────────────────────────────────────────────

    /// Emits the reverse sweep from a scalar `root` as new graph nodes and
    /// returns the gradient node of each requested leaf (`None` when the leaf
    /// is unreachable from the root).
    pub fn gradient_nodes(
        &mut self,
        root: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<Option<NodeId>>, GraphError> {
        if !self.value(root).is_scalar() {
            return Err(GraphError::NotScalar(self.describe(root)));
        }
        let mut grads: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        let seed = self.constant(Array::scalar(1.0))?;
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf(_) | Op::Constant => {}
                // Piecewise-constant helpers: no gradient flows through them.
                Op::LreluMask(..) | Op::RowMax(..) | Op::ClampMask(..) => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    self.accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g)?;
                    let neg = self.scalar_mul(g, -1.0)?;
                    self.accumulate(&mut grads, b, neg)?;
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b)?;
                    self.accumulate(&mut grads, a, da)?;
                    let db = self.mul(g, a)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::Div(a, b) => {
                    let da = self.div(g, b)?;
                    self.accumulate(&mut grads, a, da)?;
                    let out_over_b = self.div(NodeId(i), b)?;
                    let gb = self.mul(g, out_over_b)?;
                    let db = self.scalar_mul(gb, -1.0)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::ScalarMul(a, c) => {
                    let da = self.scalar_mul(g, c)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::ScalarAdd(a, _) => {
                    self.accumulate(&mut grads, a, g)?;
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    self.accumulate(&mut grads, a, da)?;
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    self.accumulate(&mut grads, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Exp(a) => {
                    let da = self.mul(g, NodeId(i))?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Log(a) => {
                    let da = self.div(g, a)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Sigmoid(a) => {
                    let neg = self.scalar_mul(NodeId(i), -1.0)?;
                    let one_minus = self.scalar_add(neg, 1.0)?;
                    let so = self.mul(g, NodeId(i))?;
                    let da = self.mul(so, one_minus)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let mask = self.lrelu_mask(a, slope)?;
                    let da = self.mul(g, mask)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::SumLast(a) => {
                    let c = self.value(a).cols();
                    let da = self.broadcast_last(g, c)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::BroadcastLast(a, _) => {
                    let da = self.sum_last(g)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::SumRows(a) => {
                    let n = self.value(a).rows();
                    let da = self.broadcast_rows(g, n)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::BroadcastRows(a, _) => {
                    let da = self.sum_rows(g)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let da = self.broadcast_scalar(g, &shape)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::MeanAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let n = self.value(a).numel() as f64;
                    let filled = self.broadcast_scalar(g, &shape)?;
                    let da = self.scalar_mul(filled, 1.0 / n)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::BroadcastScalar(a, _) => {
                    let da = self.sum_all(g)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::ClampMin(a, floor) => {
                    let mask = self.clamp_mask(a, floor)?;
                    let da = self.mul(g, mask)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::GatherRows(a, rows) => {
                    let n = self.value(a).rows();
                    let da = self.scatter_rows(g, rows, n)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::ScatterRows(a, rows, _) => {
                    let da = self.gather_rows(g, rows)?;
                    self.accumulate(&mut grads, a, da)?;
                }
                Op::Unfold3x3 { src, h, w, c } => {
                    let da = self.fold3x3(g, h, w, c)?;
                    self.accumulate(&mut grads, src, da)?;
                }
                Op::Fold3x3 { src, h, w, .. } => {
                    let da = self.unfold3x3(g, h, w)?;
                    self.accumulate(&mut grads, src, da)?;
                }
            }
        }

        Ok(wrt.iter().map(|id| grads.get(id.0).copied().flatten()).collect())
    }

    fn accumulate(
        &mut self,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<(), GraphError> {
        grads[target.0] = Some(match grads[target.0] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    /// Gradient of a scalar `root` with respect to the named leaves.
    ///
    /// Leaves unreachable from the root get zero gradients of their own shape.
    pub fn gradient(&mut self, root: NodeId, wrt: &[&str]) -> Result<ParamSet, GraphError> {
        let ids: Vec<NodeId> = wrt
            .iter()
            .map(|name| {
                self.leaves
                    .get(*name)
                    .copied()
                    .ok_or_else(|| GraphError::UnknownLeaf(name.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let grad_nodes = self.gradient_nodes(root, &ids)?;
        let mut out = ParamSet::new();
        for ((name, id), gn) in wrt.iter().zip(ids.iter()).zip(grad_nodes.iter()) {
            let arr = match gn {
                Some(g) => self.value(*g).clone(),
                None => Array::zeros(self.value(*id).shape()),
            };
            out.insert(name, arr)?;
        }
        Ok(out)
    }

    /// Exact mixed second derivative: d/dT of the inner product between the
    /// gradient of `root` with respect to the `v`-named leaves and the fixed
    /// vector `v`.
    ///
    /// The first reverse sweep is emitted as graph nodes; dotting those nodes
    /// with `v` yields a scalar node whose own reverse sweep is the mixed
    /// derivative.
    pub fn mixed_second_gradient(
        &mut self,
        root: NodeId,
        v: &ParamSet,
        wrt: &[&str],
    ) -> Result<ParamSet, GraphError> {
        let v_ids: Vec<NodeId> = v
            .iter()
            .map(|(name, value)| {
                let id = self
                    .leaves
                    .get(name)
                    .copied()
                    .ok_or_else(|| GraphError::UnknownLeaf(name.clone()))?;
                if self.value(id).shape() != value.shape() {
                    return Err(GraphError::BadShape(format!(
                        "v entry '{}' has shape {:?}, leaf has {:?}",
                        name,
                        value.shape(),
                        self.value(id).shape()
                    )));
                }
                Ok(id)
            })
            .collect::<Result<_, _>>()?;

        let grad_nodes = self.gradient_nodes(root, &v_ids)?;
        let mut dot: Option<NodeId> = None;
        for ((_, value), gn) in v.iter().zip(grad_nodes.iter()) {
            if let Some(g) = gn {
                let vc = self.constant(value.clone())?;
                let prod = self.mul(*g, vc)?;
                let s = self.sum_all(prod)?;
                dot = Some(match dot {
                    Some(acc) => self.add(acc, s)?,
                    None => s,
                });
            }
        }
        let dot = match dot {
            Some(d) => d,
            // The gradient does not depend on any v entry: mixed term is zero.
            None => self.constant(Array::scalar(0.0))?,
        };
        self.gradient(dot, wrt)
    }
}

// ── kernels ──────────────────────────────────────────────────────────

fn zip_arrays(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Array::from_vec(a.shape(), data).expect("zip preserves shape")
}

fn eval_row_max(a: &Array) -> Array {
    let (n, c) = (a.rows(), a.cols());
    let mut out = Array::zeros(&[n, 1]);
    for i in 0..n {
        let row = &a.data()[i * c..(i + 1) * c];
        out.data_mut()[i] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    out
}

fn eval_sum_last(a: &Array) -> Array {
    let (n, c) = (a.rows(), a.cols());
    let mut out = Array::zeros(&[n, 1]);
    for i in 0..n {
        out.data_mut()[i] = a.data()[i * c..(i + 1) * c].iter().sum();
    }
    out
}

fn eval_broadcast_last(a: &Array, c: usize) -> Array {
    let n = a.rows();
    let mut out = Array::zeros(&[n, c]);
    for i in 0..n {
        let v = a.data()[i];
        out.data_mut()[i * c..(i + 1) * c].fill(v);
    }
    out
}

fn eval_sum_rows(a: &Array) -> Array {
    let (n, c) = (a.rows(), a.cols());
    let mut out = Array::zeros(&[1, c]);
    for i in 0..n {
        for j in 0..c {
            out.data_mut()[j] += a.data()[i * c + j];
        }
    }
    out
}

fn eval_broadcast_rows(a: &Array, n: usize) -> Array {
    let c = a.cols();
    let mut out = Array::zeros(&[n, c]);
    for i in 0..n {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(a.data());
    }
    out
}

fn eval_gather_rows(a: &Array, rows: &[usize]) -> Array {
    let c = a.cols();
    let mut out = Array::zeros(&[rows.len(), c]);
    for (i, &r) in rows.iter().enumerate() {
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&a.data()[r * c..(r + 1) * c]);
    }
    out
}

fn eval_scatter_rows(a: &Array, rows: &[usize], n: usize) -> Array {
    let c = a.cols();
    let mut out = Array::zeros(&[n, c]);
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..c {
            out.data_mut()[r * c + j] += a.data()[i * c + j];
        }
    }
    out
}

/// Window layout: for output pixel (r,col), the 9 offsets (dy,dx) in row-major
/// order each contribute `c` channels; out-of-bounds neighbors contribute 0.
fn eval_unfold3x3(a: &Array, h: usize, w: usize, c: usize) -> Array {
    let mut out = Array::zeros(&[h * w, 9 * c]);
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            for (d, (dy, dx)) in window_offsets().enumerate() {
                let rr = r as isize + dy;
                let cc = col as isize + dx;
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                let q = rr as usize * w + cc as usize;
                let dst = p * 9 * c + d * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&a.data()[q * c..(q + 1) * c]);
            }
        }
    }
    out
}

fn eval_fold3x3(a: &Array, h: usize, w: usize, c: usize) -> Array {
    let mut out = Array::zeros(&[h * w, c]);
    for r in 0..h {
        for col in 0..w {
            let p = r * w + col;
            for (d, (dy, dx)) in window_offsets().enumerate() {
                let rr = r as isize + dy;
                let cc = col as isize + dx;
                if rr < 0 || rr >= h as isize || cc < 0 || cc >= w as isize {
                    continue;
                }
                let q = rr as usize * w + cc as usize;
                let src = p * 9 * c + d * c;
                for ch in 0..c {
                    out.data_mut()[q * c + ch] += a.data()[src + ch];
                }
            }
        }
    }
    out
}

fn window_offsets() -> impl Iterator<Item = (isize, isize)> {
    (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)))
}
