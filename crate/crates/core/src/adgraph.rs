//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is a define-by-run tape: every node is evaluated when it is
//! created, and the reverse sweep ([`Graph::gradients`]) appends the adjoint
//! computation to the same graph as ordinary nodes. Gradients are therefore
//! themselves differentiable, which is what makes double backprop work:
//! take [`Graph::input_gradient`] of an energy, build a loss from it, and
//! call [`Graph::gradients`] again for the parameters.
//!
//! All values are 2D (`rows x cols`); scalars are `1 x 1`. Binary
//! elementwise ops broadcast an operand along a dimension of size one.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("root node {0} is not scalar (shape {1:?})")]
    NonScalarRoot(usize, Vec<usize>),
    #[error("node {0} is not a leaf input")]
    NotALeaf(usize),
    #[error("node {input} is not an ancestor of root {root}")]
    NotAnAncestor { input: usize, root: usize },
    #[error("node {0} cannot be rebound: {1}")]
    Bind(usize, String),
    #[error("silu derivative of order {0} is not supported")]
    DerivativeOrder(u8),
    #[error("invalid array: {0}")]
    Array(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Dense row-major array of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for RealArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RealArray")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(GraphError::Array(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2D array (a 1D array counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    /// The single value of a `1 x 1` array.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `order`-th derivative of silu(x) = x * sigmoid(x).
    Silu {
        a: NodeId,
        order: u8,
    },
    Powf(NodeId, f64),
    SumRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    Broadcast {
        a: NodeId,
        rows: usize,
        cols: usize,
    },
    Gather {
        table: NodeId,
        indices: Arc<Vec<usize>>,
    },
    ScatterAdd {
        src: NodeId,
        indices: Arc<Vec<usize>>,
        rows: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu { .. } => "silu",
            Op::Powf(..) => "powf",
            Op::SumRows(_) => "sum-rows",
            Op::SumCols(_) => "sum-cols",
            Op::SumAll(_) => "sum-all",
            Op::Broadcast { .. } => "broadcast",
            Op::Gather { .. } => "embedding-lookup",
            Op::ScatterAdd { .. } => "scatter-add",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Constant => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Silu { a, .. }
            | Op::Powf(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Broadcast { a, .. } => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::ScatterAdd { src, .. } => vec![src],
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Constant)
    }
}

struct Node {
    op: Op,
    value: Arc<RealArray>,
}

/// A tape of differentiable nodes; see the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &RealArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims()
    }

    /// A rebindable leaf.
    pub fn input(&mut self, value: RealArray) -> NodeId {
        self.input_shared(Arc::new(value))
    }

    /// A rebindable leaf backed by a shared array (no copy).
    pub fn input_shared(&mut self, value: Arc<RealArray>) -> NodeId {
        self.push_raw(Op::Input, value)
    }

    pub fn constant(&mut self, value: RealArray) -> NodeId {
        self.push_raw(Op::Constant, Arc::new(value))
    }

    fn push_raw(&mut self, op: Op, value: Arc<RealArray>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.compute(id, &op)?;
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Ok(NodeId(id))
    }

    /// Rebinds an input leaf. Call [`Graph::forward`] to refresh dependants.
    pub fn set_input(&mut self, id: NodeId, value: RealArray) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(GraphError::Bind(id.0, "not an input".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(GraphError::Bind(
                id.0,
                format!("shape {:?} != {:?}", value.shape(), node.value.shape()),
            ));
        }
        node.value = Arc::new(value);
        Ok(())
    }

    /// Recomputes every non-leaf node from the current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        self.forward_through(self.nodes.len())
    }

    fn forward_through(&mut self, end: usize) -> Result<()> {
        for i in 0..end {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let v = self.compute(i, &op)?;
            self.nodes[i].value = Arc::new(v);
        }
        Ok(())
    }

    /// Re-evaluates the graph up to `root` and returns its value.
    pub fn eval(&mut self, root: NodeId) -> Result<RealArray> {
        self.forward_through(root.0 + 1)?;
        Ok((*self.nodes[root.0].value).clone())
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Silu { a, order: 0 })
    }

    pub fn powf(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        self.push(Op::Powf(a, exponent))
    }

    /// Column sums: `[n, m] -> [1, m]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumRows(a))
    }

    /// Row sums: `[n, m] -> [n, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }

    pub fn broadcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.push(Op::Broadcast { a, rows, cols })
    }

    /// Row lookup into `table`, one row per index.
    pub fn embedding(&mut self, table: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        self.push(Op::Gather { table, indices })
    }

    fn scatter_add(
        &mut self,
        src: NodeId,
        indices: Arc<Vec<usize>>,
        rows: usize,
    ) -> Result<NodeId> {
        self.push(Op::ScatterAdd { src, indices, rows })
    }

    /// `x * w + b` with `w: [in, out]` and `b: [1, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(xw, b),
            None => Ok(xw),
        }
    }

    /// Layer normalisation over the feature (column) dimension with an
    /// affine `scale`/`shift` of shape `[1, m]`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (_, m) = self.shape(x);
        let sum = self.sum_cols(x)?;
        let mean = self.scale(sum, 1.0 / m as f64)?;
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let sq_sum = self.sum_cols(sq)?;
        let var = self.scale(sq_sum, 1.0 / m as f64)?;
        let eps_node = self.constant(RealArray::scalar(eps));
        let var_eps = self.add(var, eps_node)?;
        let inv_std = self.powf(var_eps, -0.5)?;
        let normed = self.mul(centered, inv_std)?;
        let scaled = self.mul(normed, scale)?;
        self.add(scaled, shift)
    }

    /// `<a, b>` summed over all entries.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    pub fn sum_of_squares(&mut self, a: NodeId) -> Result<NodeId> {
        self.dot(a, a)
    }

    /// Per-row squared norm: `[n, m] -> [n, 1]`.
    pub fn row_sum_of_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let p = self.mul(a, a)?;
        self.sum_cols(p)
    }

    // ---- evaluation -----------------------------------------------------

    fn shape_err(&self, node: usize, op: &Op, detail: String) -> GraphError {
        GraphError::Shape {
            node,
            op: op.name(),
            detail,
        }
    }

    fn compute(&self, id: usize, op: &Op) -> Result<RealArray> {
        let v = |n: NodeId| -> &RealArray { &self.nodes[n.0].value };
        match op {
            Op::Input | Op::Constant => Ok((*self.nodes[id].value).clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (v(*a), v(*b));
                let (ar, ac) = a.dims();
                let (br, bc) = b.dims();
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let (k2, n) = if *tb { (bc, br) } else { (br, bc) };
                if k != k2 {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("inner dims {k} vs {k2} ({ar}x{ac} * {br}x{bc}, ta={ta}, tb={tb})"),
                    ));
                }
                let mut out = vec![0.0; m * n];
                let (rsa, csa) = if *ta {
                    (1, ac as isize)
                } else {
                    (ac as isize, 1)
                };
                let (rsb, csb) = if *tb {
                    (1, bc as isize)
                } else {
                    (bc as isize, 1)
                };
                if m > 0 && n > 0 && k > 0 {
                    // SAFETY: strides describe in-bounds views of `a`, `b` and `out`.
                    unsafe {
                        matrixmultiply::dgemm(
                            m,
                            k,
                            n,
                            1.0,
                            a.data.as_ptr(),
                            rsa,
                            csa,
                            b.data.as_ptr(),
                            rsb,
                            csb,
                            0.0,
                            out.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                }
                RealArray::matrix(m, n, out)
            }
            Op::Add(a, b) => self.broadcast_binary(id, op, v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => self.broadcast_binary(id, op, v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => self.broadcast_binary(id, op, v(*a), v(*b), |x, y| x * y),
            Op::Scale(a, c) => Ok(map(v(*a), |x| x * c)),
            Op::Silu { a, order } => {
                let order = *order;
                if order > 4 {
                    return Err(GraphError::DerivativeOrder(order));
                }
                Ok(map(v(*a), |x| silu_derivative(x, order)))
            }
            Op::Powf(a, p) => Ok(map(v(*a), |x| x.powf(*p))),
            Op::SumRows(a) => {
                let a = v(*a);
                let (r, c) = a.dims();
                let mut out = vec![0.0; c];
                for row in a.data.chunks_exact(c.max(1)).take(r) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                RealArray::matrix(1, c, out)
            }
            Op::SumCols(a) => {
                let a = v(*a);
                let (r, c) = a.dims();
                let out = if c == 0 {
                    vec![0.0; r]
                } else {
                    a.data.chunks_exact(c).map(|row| row.iter().sum()).collect()
                };
                RealArray::matrix(r, 1, out)
            }
            Op::SumAll(a) => Ok(RealArray::scalar(v(*a).data.iter().sum())),
            Op::Broadcast { a, rows, cols } => {
                let a = v(*a);
                let (r, c) = a.dims();
                if !(r == *rows || r == 1) || !(c == *cols || c == 1) {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("cannot broadcast {r}x{c} to {rows}x{cols}"),
                    ));
                }
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..*rows {
                    let ri = if r == 1 { 0 } else { i };
                    for j in 0..*cols {
                        let cj = if c == 1 { 0 } else { j };
                        out.push(a.data[ri * c + cj]);
                    }
                }
                RealArray::matrix(*rows, *cols, out)
            }
            Op::Gather { table, indices } => {
                let t = v(*table);
                let (tr, tc) = t.dims();
                let mut out = Vec::with_capacity(indices.len() * tc);
                for &ix in indices.iter() {
                    if ix >= tr {
                        return Err(self.shape_err(
                            id,
                            op,
                            format!("index {ix} out of range for {tr} rows"),
                        ));
                    }
                    out.extend_from_slice(&t.data[ix * tc..(ix + 1) * tc]);
                }
                RealArray::matrix(indices.len(), tc, out)
            }
            Op::ScatterAdd { src, indices, rows } => {
                let s = v(*src);
                let (sr, sc) = s.dims();
                if sr != indices.len() {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("{} indices for {} source rows", indices.len(), sr),
                    ));
                }
                let mut out = vec![0.0; rows * sc];
                for (i, &ix) in indices.iter().enumerate() {
                    if ix >= *rows {
                        return Err(self.shape_err(
                            id,
                            op,
                            format!("index {ix} out of range for {rows} rows"),
                        ));
                    }
                    for j in 0..sc {
                        out[ix * sc + j] += s.data[i * sc + j];
                    }
                }
                RealArray::matrix(*rows, sc, out)
            }
        }
    }

    fn broadcast_binary(
        &self,
        id: usize,
        op: &Op,
        a: &RealArray,
        b: &RealArray,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<RealArray> {
        let (ar, ac) = a.dims();
        let (br, bc) = b.dims();
        let rows = broadcast_dim(ar, br)
            .ok_or_else(|| self.shape_err(id, op, format!("{ar}x{ac} vs {br}x{bc}")))?;
        let cols = broadcast_dim(ac, bc)
            .ok_or_else(|| self.shape_err(id, op, format!("{ar}x{ac} vs {br}x{bc}")))?;
        if ar == br && ac == bc {
            let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
            return RealArray::matrix(rows, cols, data);
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ia = if ar == 1 { 0 } else { i };
            let ib = if br == 1 { 0 } else { i };
            for j in 0..cols {
                let ja = if ac == 1 { 0 } else { j };
                let jb = if bc == 1 { 0 } else { j };
                out.push(f(a.data[ia * ac + ja], b.data[ib * bc + jb]));
            }
        }
        RealArray::matrix(rows, cols, out)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Appends the reverse sweep for `root` and returns one gradient node per
    /// entry of `wrt`. The returned nodes are ordinary graph nodes and can be
    /// differentiated again.
    pub fn gradients(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(GraphError::NonScalarRoot(root.0, shape));
        }
        let end = root.0 + 1;
        // Only nodes that lie on a path from some `wrt` node get adjoints.
        let mut live = vec![false; end];
        for &w in wrt {
            if w.0 < end {
                live[w.0] = true;
            }
        }
        for i in 0..end {
            if !live[i] && self.nodes[i].op.operands().iter().any(|o| live[o.0]) {
                live[i] = true;
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; end];
        if live[root.0] {
            adjoint[root.0] = Some(self.constant(RealArray::scalar(1.0)));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            let op = self.nodes[i].op.clone();
            if op.is_leaf() {
                continue;
            }
            for (operand, contribution) in self.vjp(NodeId(i), &op, g, &live)? {
                adjoint[operand.0] = Some(match adjoint[operand.0] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let found = if w.0 < end { adjoint[w.0] } else { None };
            out.push(match found {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(RealArray::zeros(r, c))
                }
            });
        }
        Ok(out)
    }

    /// Gradient of a scalar `root` with respect to the leaf `input`, as a
    /// differentiable node.
    pub fn input_gradient(&mut self, root: NodeId, input: NodeId) -> Result<NodeId> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(GraphError::NonScalarRoot(
                root.0,
                self.nodes[root.0].value.shape().to_vec(),
            ));
        }
        if !self.nodes[input.0].op.is_leaf() {
            return Err(GraphError::NotALeaf(input.0));
        }
        if !self.is_ancestor(input, root) {
            return Err(GraphError::NotAnAncestor {
                input: input.0,
                root: root.0,
            });
        }
        Ok(self.gradients(root, &[input])?[0])
    }

    fn is_ancestor(&self, candidate: NodeId, root: NodeId) -> bool {
        if candidate.0 > root.0 {
            return false;
        }
        let mut reach = vec![false; root.0 + 1];
        reach[candidate.0] = true;
        for i in candidate.0..=root.0 {
            if !reach[i] && self.nodes[i].op.operands().iter().any(|o| reach[o.0]) {
                reach[i] = true;
            }
        }
        reach[root.0]
    }

    /// Sums `g` down to the shape of `target` (undoing broadcasting).
    fn reduce_to(&mut self, g: NodeId, target: NodeId) -> Result<NodeId> {
        let (gr, gc) = self.shape(g);
        let (tr, tc) = self.shape(target);
        let mut out = g;
        if tr == 1 && gr != 1 {
            out = self.sum_rows(out)?;
        }
        if tc == 1 && gc != 1 {
            out = self.sum_cols(out)?;
        }
        Ok(out)
    }

    fn vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        live: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Input | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                if live[a.0] {
                    // d op(a) = G op(b)^T, transposed back when `ta`.
                    let ga = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true)?,
                        (false, true) => self.matmul_t(g, b, false, false)?,
                        (true, false) => self.matmul_t(b, g, false, true)?,
                        (true, true) => self.matmul_t(b, g, true, true)?,
                    };
                    out.push((a, ga));
                }
                if live[b.0] {
                    let gb = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false)?,
                        (false, true) => self.matmul_t(g, a, true, false)?,
                        (true, false) => self.matmul_t(a, g, false, false)?,
                        (true, true) => self.matmul_t(g, a, true, true)?,
                    };
                    out.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                if live[a.0] {
                    out.push((a, self.reduce_to(g, a)?));
                }
                if live[b.0] {
                    out.push((b, self.reduce_to(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if live[a.0] {
                    out.push((a, self.reduce_to(g, a)?));
                }
                if live[b.0] {
                    let neg = self.scale(g, -1.0)?;
                    out.push((b, self.reduce_to(neg, b)?));
                }
            }
            Op::Mul(a, b) => {
                if live[a.0] {
                    let p = self.mul(g, b)?;
                    out.push((a, self.reduce_to(p, a)?));
                }
                if live[b.0] {
                    let p = self.mul(g, a)?;
                    out.push((b, self.reduce_to(p, b)?));
                }
            }
            Op::Scale(a, c) => {
                if live[a.0] {
                    out.push((a, self.scale(g, c)?));
                }
            }
            Op::Silu { a, order } => {
                if live[a.0] {
                    if order >= 4 {
                        return Err(GraphError::DerivativeOrder(order + 1));
                    }
                    let d = self.push(Op::Silu {
                        a,
                        order: order + 1,
                    })?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::Powf(a, p) => {
                if live[a.0] {
                    let lower = self.powf(a, p - 1.0)?;
                    let d = self.scale(lower, p)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::SumRows(a) | Op::SumCols(a) | Op::SumAll(a) => {
                if live[a.0] {
                    let (r, c) = self.shape(a);
                    out.push((a, self.broadcast(g, r, c)?));
                }
            }
            Op::Broadcast { a, .. } => {
                if live[a.0] {
                    out.push((a, self.reduce_to(g, a)?));
                }
            }
            Op::Gather { table, ref indices } => {
                if live[table.0] {
                    let rows = self.shape(table).0;
                    out.push((table, self.scatter_add(g, indices.clone(), rows)?));
                }
            }
            Op::ScatterAdd {
                src, ref indices, ..
            } => {
                if live[src.0] {
                    out.push((src, self.embedding(g, indices.clone())?));
                }
            }
        }
        debug_assert!(out.iter().all(|(o, _)| o.0 < node.0));
        Ok(out)
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn map(a: &RealArray, f: impl Fn(f64) -> f64) -> RealArray {
    RealArray {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivatives of silu(x) = x * s(x), written with u = s(1 - s), w = 1 - 2s.
fn silu_derivative(x: f64, order: u8) -> f64 {
    let s = sigmoid(x);
    let u = s * (1.0 - s);
    let w = 1.0 - 2.0 * s;
    match order {
        0 => x * s,
        1 => s + x * u,
        2 => 2.0 * u + x * u * w,
        3 => 3.0 * u * w + x * u * (w * w - 2.0 * u),
        4 => 4.0 * u * (w * w - 2.0 * u) + x * u * w * (w * w - 8.0 * u),
        _ => f64::NAN,
    }
}
