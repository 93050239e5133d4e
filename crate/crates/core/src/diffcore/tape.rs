//! Reverse-mode tape over dense matrices.
//!
//! Ops append nodes holding the forward value; `backward` replays the record
//! in reverse, accumulating one gradient matrix per node and exposing the
//! gradients of registered parameters. Matrix-level ops keep the node count
//! small: a full training step on a batch is a few dozen nodes.

use super::matrix::{row_norm, softmax_row_in_place, DenseMatrix};
use crate::error::{Error, Result};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    MatMul(VarId, VarId),
    MatMulTransposeB(VarId, VarId),
    Tanh(VarId),
    Exp(VarId),
    Ln(VarId),
    XLogX(VarId),
    SoftmaxRows(VarId, f64),
    NormalizeRows(VarId),
    AddRowBroadcast(VarId, VarId),
    BroadcastRow(VarId),
    HConcat(VarId, VarId),
    Reshape(VarId),
    GatherCols(VarId, Vec<usize>),
    Sum(VarId),
    Mean(VarId),
    FrobeniusSq(VarId),
    PairwiseSqDist(VarId),
    AffinityFromSqDist(VarId),
}

struct Node {
    value: DenseMatrix,
    op: OpKind,
}

/// Gradients indexed by the `VarId` of the node they belong to.
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the node's value, if the node
    /// influenced the loss at all.
    pub fn get(&self, id: VarId) -> Option<&DenseMatrix> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, VarId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DenseMatrix, op: OpKind) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFiniteInput(format!("{:?}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(self.nodes.len() - 1)
    }

    /// Inserts a constant; no gradient is tracked beyond it.
    pub fn constant(&mut self, value: DenseMatrix) -> Result<VarId> {
        self.push(value, OpKind::Leaf)
    }

    /// Inserts a constant and registers it as a named trainable parameter.
    pub fn param(&mut self, name: &str, value: DenseMatrix) -> Result<VarId> {
        let id = self.push(value, OpKind::Leaf)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    pub fn value(&self, id: VarId) -> &DenseMatrix {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn shape(&self, id: VarId) -> (usize, usize) {
        (self.nodes[id].value.rows, self.nodes[id].value.cols)
    }

    fn same_shape(&self, a: VarId, b: VarId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "add")?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y)?;
        self.push(v, OpKind::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "sub")?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x - y)?;
        self.push(v, OpKind::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "mul")?;
        let v = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x * y)?;
        self.push(v, OpKind::Mul(a, b))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.nodes[a].value.map(|x| x * c);
        self.push(v, OpKind::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(v, OpKind::AddScalar(a))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.push(v, OpKind::MatMul(a, b))
    }

    /// a (n x m) times b^T where b is (k x m); result n x k.
    pub fn matmul_transpose_b(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.matmul_transpose_b(&self.nodes[b].value)?;
        self.push(v, OpKind::MatMulTransposeB(a, b))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(f64::tanh);
        self.push(v, OpKind::Tanh(a))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(f64::exp);
        self.push(v, OpKind::Exp(a))
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(v, OpKind::Ln(a))
    }

    /// x ln x with the continuous extension 0 at x = 0.
    pub fn xlogx(&mut self, a: VarId) -> Result<VarId> {
        let v = self.nodes[a].value.map(|x| if x == 0.0 { 0.0 } else { x * x.ln() });
        self.push(v, OpKind::XLogX(a))
    }

    pub fn softmax_rows(&mut self, a: VarId, temperature: f64) -> Result<VarId> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidTemperature(temperature));
        }
        let mut v = self.nodes[a].value.clone();
        for i in 0..v.rows {
            softmax_row_in_place(v.row_mut(i), temperature);
        }
        self.push(v, OpKind::SoftmaxRows(a, temperature))
    }

    pub fn normalize_rows(&mut self, a: VarId) -> Result<VarId> {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for i in 0..v.rows {
            let norm = row_norm(v.row(i));
            if norm < 1e-12 {
                return Err(Error::DegenerateZeroVector(i));
            }
            for e in v.row_mut(i) {
                *e /= norm;
            }
        }
        self.push(v, OpKind::NormalizeRows(a))
    }

    /// a (m x n) plus row vector b (1 x n) added to every row.
    pub fn add_row_broadcast(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != ac {
            return Err(Error::DimensionMismatch(format!(
                "add_row_broadcast: {ar}x{ac} plus {br}x{bc}"
            )));
        }
        let mut v = self.nodes[a].value.clone();
        let row = self.nodes[b].value.data.clone();
        for i in 0..ar {
            for (e, r) in v.row_mut(i).iter_mut().zip(&row) {
                *e += r;
            }
        }
        self.push(v, OpKind::AddRowBroadcast(a, b))
    }

    /// Repeats a 1 x n row k times into a k x n matrix.
    pub fn broadcast_row(&mut self, a: VarId, k: usize) -> Result<VarId> {
        let (ar, ac) = self.shape(a);
        if ar != 1 {
            return Err(Error::DimensionMismatch(format!(
                "broadcast_row expects 1x{ac}, got {ar}x{ac}"
            )));
        }
        let row = self.nodes[a].value.data.clone();
        let mut data = Vec::with_capacity(k * ac);
        for _ in 0..k {
            data.extend_from_slice(&row);
        }
        let v = DenseMatrix::from_vec(k, ac, data)?;
        self.push(v, OpKind::BroadcastRow(a))
    }

    /// Concatenates columns: (m x p) and (m x q) into (m x (p+q)).
    pub fn hconcat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::DimensionMismatch(format!(
                "hconcat: {ar}x{ac} with {br}x{bc}"
            )));
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            data.extend_from_slice(self.nodes[a].value.row(i));
            data.extend_from_slice(self.nodes[b].value.row(i));
        }
        let v = DenseMatrix::from_vec(ar, ac + bc, data)?;
        self.push(v, OpKind::HConcat(a, b))
    }

    pub fn reshape(&mut self, a: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let (ar, ac) = self.shape(a);
        if ar * ac != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "reshape {ar}x{ac} into {rows}x{cols}"
            )));
        }
        let v = DenseMatrix::from_vec(rows, cols, self.nodes[a].value.data.clone())?;
        self.push(v, OpKind::Reshape(a))
    }

    /// Picks entry (i, cols[i]) of each row into an n x 1 column.
    pub fn gather_cols(&mut self, a: VarId, cols: Vec<usize>) -> Result<VarId> {
        let (ar, ac) = self.shape(a);
        if cols.len() != ar {
            return Err(Error::DimensionMismatch(format!(
                "gather_cols: {} indices for {ar} rows",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= ac) {
            return Err(Error::DimensionMismatch(format!(
                "gather_cols: column {bad} out of {ac}"
            )));
        }
        let data: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.nodes[a].value.get(i, c))
            .collect();
        let v = DenseMatrix::from_vec(ar, 1, data)?;
        self.push(v, OpKind::GatherCols(a, cols))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let v = DenseMatrix::from_vec(1, 1, vec![s])?;
        self.push(v, OpKind::Sum(a))
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = self.nodes[a].value.data.len();
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let v = DenseMatrix::from_vec(1, 1, vec![s / n as f64])?;
        self.push(v, OpKind::Mean(a))
    }

    pub fn frobenius_sq(&mut self, a: VarId) -> Result<VarId> {
        let s = self.nodes[a].value.frobenius_sq();
        let v = DenseMatrix::from_vec(1, 1, vec![s])?;
        self.push(v, OpKind::FrobeniusSq(a))
    }

    /// From x (n x d) builds the n x n matrix of squared Euclidean distances.
    pub fn pairwise_sq_dist(&mut self, a: VarId) -> Result<VarId> {
        let x = &self.nodes[a].value;
        let n = x.rows;
        let mut v = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..x.cols {
                    let diff = x.get(i, p) - x.get(j, p);
                    acc += diff * diff;
                }
                v.set(i, j, acc);
            }
        }
        self.push(v, OpKind::PairwiseSqDist(a))
    }

    /// Row-wise softmax of the negated distances, excluding the diagonal.
    /// Row i holds p_ij = exp(-D_ij) / sum_{k != i} exp(-D_ik), zero at j = i.
    pub fn affinity_from_sq_dist(&mut self, a: VarId) -> Result<VarId> {
        let d = &self.nodes[a].value;
        if d.rows != d.cols || d.rows < 2 {
            return Err(Error::DimensionMismatch(format!(
                "affinity needs a square matrix with >= 2 rows, got {}x{}",
                d.rows, d.cols
            )));
        }
        let n = d.rows;
        let mut v = DenseMatrix::zeros(n, n);
        for i in 0..n {
            let mut zmax = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    zmax = zmax.max(-d.get(i, j));
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if j != i {
                    let e = (-d.get(i, j) - zmax).exp();
                    v.set(i, j, e);
                    sum += e;
                }
            }
            for j in 0..n {
                if j != i {
                    v.set(i, j, v.get(i, j) / sum);
                }
            }
        }
        self.push(v, OpKind::AffinityFromSqDist(a))
    }

    /// Reverse pass from a 1 x 1 loss node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let (lr, lc) = self.shape(loss);
        if (lr, lc) != (1, 1) {
            return Err(Error::DimensionMismatch(format!(
                "backward expects a 1x1 loss, got {lr}x{lc}"
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(DenseMatrix::from_vec(1, 1, vec![1.0])?);

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            // Leaves keep their accumulated gradient; interior nodes give
            // theirs up once it has been pushed to their inputs.
            if matches!(node.op, OpKind::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                OpKind::Leaf => {}
                OpKind::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                OpKind::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    let neg = g.map(|v| -v);
                    accumulate(&mut grads, *b, &neg, &self.nodes);
                }
                OpKind::Mul(a, b) => {
                    let ga = g.zip(&self.nodes[*b].value, |gv, bv| gv * bv)?;
                    let gb = g.zip(&self.nodes[*a].value, |gv, av| gv * av)?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                OpKind::Scale(a, c) => {
                    let ga = g.map(|v| v * c);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::AddScalar(a) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                }
                OpKind::MatMul(a, b) => {
                    let ga = g.matmul_transpose_b(&self.nodes[*b].value)?;
                    let gb = self.nodes[*a].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                OpKind::MatMulTransposeB(a, b) => {
                    let ga = g.matmul(&self.nodes[*b].value)?;
                    let gb = g.transpose().matmul(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                OpKind::Tanh(a) => {
                    let ga = g.zip(&node.value, |gv, y| gv * (1.0 - y * y))?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::Exp(a) => {
                    let ga = g.zip(&node.value, |gv, y| gv * y)?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::Ln(a) => {
                    let ga = g.zip(&self.nodes[*a].value, |gv, x| gv / x)?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::XLogX(a) => {
                    let ga = g.zip(&self.nodes[*a].value, |gv, x| {
                        if x == 0.0 {
                            0.0
                        } else {
                            gv * (x.ln() + 1.0)
                        }
                    })?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::SoftmaxRows(a, tau) => {
                    let y = &node.value;
                    let mut ga = DenseMatrix::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..y.cols {
                            ga.set(i, j, yr[j] * (gr[j] - dot) / tau);
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::NormalizeRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let mut ga = DenseMatrix::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let norm = row_norm(x.row(i));
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..x.cols {
                            ga.set(i, j, (gr[j] - dot * yr[j]) / norm);
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::AddRowBroadcast(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    let mut gb = DenseMatrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            gb.data[j] += g.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                OpKind::BroadcastRow(a) => {
                    let mut ga = DenseMatrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            ga.data[j] += g.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::HConcat(a, b) => {
                    let (_, ac) = self.shape(*a);
                    let (_, bc) = self.shape(*b);
                    let mut ga = DenseMatrix::zeros(g.rows, ac);
                    let mut gb = DenseMatrix::zeros(g.rows, bc);
                    for i in 0..g.rows {
                        ga.row_mut(i).copy_from_slice(&g.row(i)[..ac]);
                        gb.row_mut(i).copy_from_slice(&g.row(i)[ac..]);
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                OpKind::Reshape(a) => {
                    let (ar, ac) = self.shape(*a);
                    let ga = DenseMatrix::from_vec(ar, ac, g.data.clone())?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::GatherCols(a, cols) => {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = DenseMatrix::zeros(ar, ac);
                    for (i, &c) in cols.iter().enumerate() {
                        ga.set(i, c, g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::Sum(a) => {
                    let g0 = g.data[0];
                    let (ar, ac) = self.shape(*a);
                    let ga = DenseMatrix::from_vec(ar, ac, vec![g0; ar * ac])?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::Mean(a) => {
                    let (ar, ac) = self.shape(*a);
                    let g0 = g.data[0] / (ar * ac) as f64;
                    let ga = DenseMatrix::from_vec(ar, ac, vec![g0; ar * ac])?;
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::FrobeniusSq(a) => {
                    let g0 = g.data[0];
                    let ga = self.nodes[*a].value.map(|x| 2.0 * g0 * x);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::PairwiseSqDist(a) => {
                    let x = &self.nodes[*a].value;
                    let n = x.rows;
                    let mut ga = DenseMatrix::zeros(n, x.cols);
                    for i in 0..n {
                        for j in 0..n {
                            let w = g.get(i, j);
                            if w == 0.0 {
                                continue;
                            }
                            for p in 0..x.cols {
                                let diff = 2.0 * w * (x.get(i, p) - x.get(j, p));
                                ga.data[i * x.cols + p] += diff;
                                ga.data[j * x.cols + p] -= diff;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                OpKind::AffinityFromSqDist(a) => {
                    let p = &node.value;
                    let n = p.rows;
                    let mut ga = DenseMatrix::zeros(n, n);
                    for i in 0..n {
                        let mut dot = 0.0;
                        for j in 0..n {
                            if j != i {
                                dot += g.get(i, j) * p.get(i, j);
                            }
                        }
                        for j in 0..n {
                            if j != i {
                                let dz = p.get(i, j) * (g.get(i, j) - dot);
                                ga.set(i, j, -dz);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every registered parameter, zeros when the parameter did
    /// not reach the loss.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<(String, DenseMatrix)> {
        self.params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| {
                        let (r, c) = self.shape(*id);
                        DenseMatrix::zeros(r, c)
                    });
                (name.clone(), g)
            })
            .collect()
    }
}

fn op_name(op: &OpKind) -> &'static str {
    match op {
        OpKind::Leaf => "leaf",
        OpKind::Add(..) => "add",
        OpKind::Sub(..) => "sub",
        OpKind::Mul(..) => "mul",
        OpKind::Scale(..) => "scale",
        OpKind::AddScalar(..) => "add_scalar",
        OpKind::MatMul(..) => "matmul",
        OpKind::MatMulTransposeB(..) => "matmul_transpose_b",
        OpKind::Tanh(..) => "tanh",
        OpKind::Exp(..) => "exp",
        OpKind::Ln(..) => "ln",
        OpKind::XLogX(..) => "xlogx",
        OpKind::SoftmaxRows(..) => "softmax_rows",
        OpKind::NormalizeRows(..) => "normalize_rows",
        OpKind::AddRowBroadcast(..) => "add_row_broadcast",
        OpKind::BroadcastRow(..) => "broadcast_row",
        OpKind::HConcat(..) => "hconcat",
        OpKind::Reshape(..) => "reshape",
        OpKind::GatherCols(..) => "gather_cols",
        OpKind::Sum(..) => "sum",
        OpKind::Mean(..) => "mean",
        OpKind::FrobeniusSq(..) => "frobenius_sq",
        OpKind::PairwiseSqDist(..) => "pairwise_sq_dist",
        OpKind::AffinityFromSqDist(..) => "affinity_from_sq_dist",
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], id: VarId, g: &DenseMatrix, nodes: &[Node]) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        None => {
            debug_assert_eq!(
                (nodes[id].value.rows, nodes[id].value.cols),
                (g.rows, g.cols)
            );
            grads[id] = Some(g.clone());
        }
    }
}
