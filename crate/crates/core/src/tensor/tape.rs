//! Define-by-run tape. Every forward pass builds a fresh [`Tape`]; each
//! operation on a [`Var`] computes its value eagerly and, in recording mode,
//! appends the operation so [`Tape::backward`] can replay it in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use super::{ParamId, ParamStore, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Exp,
    Log,
    Tanh,
    Relu,
    Sqrt,
    Square,
    Elu { alpha: f64 },
    LeakyRelu { slope: f64 },
    Clamp { lo: f64, hi: f64 },
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Relu => "relu",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Elu { .. } => "elu",
            UnaryOp::LeakyRelu { .. } => "leaky_relu",
            UnaryOp::Clamp { .. } => "clamp",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            UnaryOp::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryOp::Clamp { lo, hi } => x.clamp(lo, hi),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Tanh => 1.0 - y * y,
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Elu { alpha } => {
                if x > 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
            UnaryOp::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            UnaryOp::Clamp { lo, hi } => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeMode {
    Recording,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(Binary, usize, usize),
    Unary(UnaryOp, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    GatherRows(usize, Rc<[usize]>),
    SegmentSum(usize, Rc<[usize]>),
    SegmentSoftmax(usize, Rc<[usize]>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    LogSoftmaxRows(usize),
    LogSumExpRows(usize),
    BlockSum(usize, usize),
    RepeatCols(usize, usize),
    NormalizeRows(usize),
    CosineRows(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: TapeMode,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(TapeMode::Recording)
    }

    pub fn inference() -> Self {
        Self::with_mode(TapeMode::Inference)
    }

    pub fn with_mode(mode: TapeMode) -> Self {
        Self { nodes: RefCell::new(Vec::new()), mode }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.mode == TapeMode::Recording
    }

    /// Number of operations recorded so far. Always 0 in inference mode.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        debug_assert!(value.is_finite(), "non-finite forward value from {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = match self.mode {
            TapeMode::Inference => (Op::Leaf, false),
            TapeMode::Recording => {
                let rg = inputs.iter().any(|&i| nodes[i].requires_grad);
                if rg {
                    (op, true)
                } else {
                    (Op::Leaf, false)
                }
            }
        };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push_leaf(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && self.is_recording();
        let op = if self.is_recording() { op } else { Op::Leaf };
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, Op::Leaf, true)
    }

    /// Snapshot of a trainable parameter.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push_leaf(store.value(id).clone(), Op::Param(id), true)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse traversal from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.is_recording() {
            return Err(TensorError::Contract("backward on an inference-mode tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut params = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Param(pid) => {
                    params.push((*pid, id));
                    grads[id] = Some(g);
                    continue;
                }
                op => backprop(op, &nodes, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads, params })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it lies on a path to the loss.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = &mut store.get_mut(pid).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
                debug_assert!(dst.iter().all(|v| v.is_finite()), "non-finite gradient");
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// `f(a_ij, b_ij)` over the broadcast `r × c` shape.
fn broadcast(a: &Tensor, b: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ar, ac) = dims2(a);
    let (br, bc) = dims2(b);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let x = &ad[if ar == 1 { 0 } else { i * ac }..][..ac];
        let y = &bd[if br == 1 { 0 } else { i * bc }..][..bc];
        match (ac == c, bc == c) {
            (true, true) => out.extend(x.iter().zip(y).map(|(&u, &v)| f(u, v))),
            (true, false) => out.extend(x.iter().map(|&u| f(u, y[0]))),
            (false, true) => out.extend(y.iter().map(|&v| f(x[0], v))),
            (false, false) => out.extend(std::iter::repeat_n(f(x[0], y[0]), c)),
        }
    }
    out
}

/// `f(g_ij, t_ij)` with `t` broadcast to the `r × c` shape of `g`.
fn broadcast_grad(g: &[f64], t: &Tensor, r: usize, c: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let gt = Tensor::matrix(r, c, g.to_vec());
    broadcast(&gt, t, r, c, f)
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// Sums a broadcast gradient of shape `(r, c)` back down to `(tr, tc)`.
fn reduce_to(g: Vec<f64>, r: usize, c: usize, tr: usize, tc: usize) -> Vec<f64> {
    if tr == r && tc == c {
        return g;
    }
    let mut out = vec![0.0; tr * tc];
    for i in 0..r {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] += g[i * c + j];
        }
    }
    out
}

fn backprop(op: &Op, nodes: &[Node], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |i: usize| nodes[i].requires_grad;
    match op {
        Op::Leaf | Op::Param(_) => unreachable!(),
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (r, c) = dims2(out);
            let (ar, ac) = dims2(av);
            let (br, bc) = dims2(bv);
            if needs(*a) {
                let ga = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => broadcast_grad(g, bv, r, c, |gk, y| gk * y),
                    Binary::Div => broadcast_grad(g, bv, r, c, |gk, y| gk / y),
                };
                add_into(grads, *a, reduce_to(ga, r, c, ar, ac));
            }
            if needs(*b) {
                let gb = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|v| -v).collect(),
                    Binary::Mul => broadcast_grad(g, av, r, c, |gk, x| gk * x),
                    Binary::Div => {
                        let ab = broadcast(av, bv, r, c, |x, y| x / (y * y));
                        g.iter().zip(&ab).map(|(gk, q)| -gk * q).collect()
                    }
                };
                add_into(grads, *b, reduce_to(gb, r, c, br, bc));
            }
        }
        Op::BlockSum(a, block) => {
            let h = out.cols();
            let c = h * block;
            let mut d = vec![0.0; out.rows() * c];
            for (i, row) in d.chunks_mut(c).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = g[i * h + j / block];
                }
            }
            add_into(grads, *a, d);
        }
        Op::RepeatCols(a, times) => {
            let c = out.cols();
            let h = c / times;
            let d = g.chunks(*times).map(|chunk| chunk.iter().sum()).collect::<Vec<f64>>();
            debug_assert_eq!(d.len(), out.rows() * h);
            add_into(grads, *a, d);
        }
        Op::Unary(u, a) => {
            let x = nodes[*a].value.data();
            let y = out.data();
            let d = (0..x.len()).map(|k| g[k] * u.derivative(x[k], y[k])).collect();
            add_into(grads, *a, d);
        }
        Op::Scale(a, s) => add_into(grads, *a, g.iter().map(|v| v * s).collect()),
        Op::Offset(a) => add_into(grads, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = dims2(av);
            let n = bv.cols();
            if needs(*a) {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                let bd = bv.data();
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] = gi.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                add_into(grads, *a, da);
            }
            if needs(*b) {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                let ad = av.data();
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let dst = &mut db[p * n..(p + 1) * n];
                        for (d, gv) in dst.iter_mut().zip(gi) {
                            *d += aip * gv;
                        }
                    }
                }
                add_into(grads, *b, db);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = dims2(out);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            add_into(grads, *a, d);
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            add_into(grads, *a, vec![g[0]; n]);
        }
        Op::SumRows(a) => {
            let (r, c) = dims2(&nodes[*a].value);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = g[i]);
            }
            add_into(grads, *a, d);
        }
        Op::SumCols(a) => {
            let (r, c) = dims2(&nodes[*a].value);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c..(i + 1) * c].copy_from_slice(g);
            }
            add_into(grads, *a, d);
        }
        Op::GatherRows(a, idx) => {
            let (r, c) = dims2(&nodes[*a].value);
            let mut d = vec![0.0; r * c];
            for (e, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    d[src * c + j] += g[e * c + j];
                }
            }
            add_into(grads, *a, d);
        }
        Op::SegmentSum(a, seg) => {
            let c = out.cols();
            let mut d = vec![0.0; seg.len() * c];
            for (e, &s) in seg.iter().enumerate() {
                d[e * c..(e + 1) * c].copy_from_slice(&g[s * c..(s + 1) * c]);
            }
            add_into(grads, *a, d);
        }
        Op::SegmentSoftmax(a, seg) => {
            // dx_e = y_e (g_e − Σ_{f∈seg(e)} y_f g_f), per column
            let (e_count, h) = dims2(out);
            let y = out.data();
            let mut d = vec![0.0; e_count * h];
            let mut start = 0;
            while start < e_count {
                let mut end = start + 1;
                while end < e_count && seg[end] == seg[start] {
                    end += 1;
                }
                for col in 0..h {
                    let dot: f64 = (start..end).map(|e| y[e * h + col] * g[e * h + col]).sum();
                    for e in start..end {
                        d[e * h + col] = y[e * h + col] * (g[e * h + col] - dot);
                    }
                }
                start = end;
            }
            add_into(grads, *a, d);
        }
        Op::ConcatCols(parts) => {
            let r = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if needs(p) {
                    let mut d = vec![0.0; r * pc];
                    for i in 0..r {
                        d[i * pc..(i + 1) * pc].copy_from_slice(&g[i * total + offset..i * total + offset + pc]);
                    }
                    add_into(grads, p, d);
                }
                offset += pc;
            }
        }
        Op::SliceCols(a, start) => {
            let (r, c) = dims2(&nodes[*a].value);
            let w = out.cols();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            add_into(grads, *a, d);
        }
        Op::LogSoftmaxRows(a) => {
            let (r, c) = dims2(out);
            let y = out.data();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    d[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gs;
                }
            }
            add_into(grads, *a, d);
        }
        Op::LogSumExpRows(a) => {
            let x = &nodes[*a].value;
            let (r, c) = dims2(x);
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let lse = out.data()[i];
                for j in 0..c {
                    d[i * c + j] = g[i] * (x.data()[i * c + j] - lse).exp();
                }
            }
            add_into(grads, *a, d);
        }
        Op::NormalizeRows(a) => {
            let x = &nodes[*a].value;
            let (r, c) = dims2(x);
            let y = out.data();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let norm = row_norm(x.row(i));
                if norm == 0.0 {
                    continue;
                }
                let yi = &y[i * c..(i + 1) * c];
                let gi = &g[i * c..(i + 1) * c];
                let dot: f64 = yi.iter().zip(gi).map(|(p, q)| p * q).sum();
                for j in 0..c {
                    d[i * c + j] = (gi[j] - yi[j] * dot) / norm;
                }
            }
            add_into(grads, *a, d);
        }
        Op::CosineRows(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (r, c) = dims2(av);
            let mut da = vec![0.0; r * c];
            let mut db = vec![0.0; r * c];
            for i in 0..r {
                let (x, y) = (av.row(i), bv.row(i));
                let (nx, ny) = (row_norm(x), row_norm(y));
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                let cos = out.data()[i];
                for j in 0..c {
                    da[i * c + j] = g[i] * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                    db[i * c + j] = g[i] * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                }
            }
            if needs(*a) {
                add_into(grads, *a, da);
            }
            if needs(*b) {
                add_into(grads, *b, db);
            }
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Checks that `segments` is non-decreasing; returns the run boundaries.
pub(crate) fn segment_runs(segments: &[usize]) -> Option<Vec<(usize, usize)>> {
    let mut runs = Vec::new();
    let mut start = 0;
    while start < segments.len() {
        let mut end = start + 1;
        while end < segments.len() && segments[end] == segments[start] {
            end += 1;
        }
        if end < segments.len() && segments[end] < segments[start] {
            return None;
        }
        runs.push((start, end));
        start = end;
    }
    Some(runs)
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    /// Forward value (shared, cheap to clone).
    pub fn value(self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(self, other: Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        let (ar, ac) = dims2(&a);
        let (br, bc) = dims2(&b);
        let shape_err = || TensorError::Shape { op: name, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            if a.shape() != b.shape() {
                return Err(shape_err());
            }
        }
        let r = if ar == br || br == 1 {
            ar
        } else if ar == 1 {
            br
        } else {
            return Err(shape_err());
        };
        let c = if ac == bc || bc == 1 {
            ac
        } else if ac == 1 {
            bc
        } else {
            return Err(shape_err());
        };
        let data = match kind {
            Binary::Add => broadcast(&a, &b, r, c, |x, y| x + y),
            Binary::Sub => broadcast(&a, &b, r, c, |x, y| x - y),
            Binary::Mul => broadcast(&a, &b, r, c, |x, y| x * y),
            Binary::Div => broadcast(&a, &b, r, c, |x, y| x / y),
        };
        let shape = if a.shape().len() == 2 || b.shape().len() == 2 { vec![r, c] } else { a.shape().to_vec() };
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.push(value, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise sum; 2-D operands broadcast along unit dimensions.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let x = self.value();
        match op {
            UnaryOp::Log if x.data().iter().any(|&v| v <= 0.0) => {
                return Err(TensorError::Domain { op: "log", detail: "non-positive input".into() })
            }
            UnaryOp::Sqrt if x.data().iter().any(|&v| v < 0.0) => {
                return Err(TensorError::Domain { op: "sqrt", detail: "negative input".into() })
            }
            _ => {}
        }
        let y = x.map(|v| op.apply(v));
        debug_assert!(y.is_finite(), "{} produced a non-finite value", op.name());
        Ok(self.tape.push(y, Op::Unary(op, self.id), &[self.id]))
    }

    fn unary_total(self, op: UnaryOp) -> Var<'t> {
        self.unary(op).expect("total elementwise op")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary_total(UnaryOp::Sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary_total(UnaryOp::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary_total(UnaryOp::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary_total(UnaryOp::Relu)
    }

    pub fn square(self) -> Var<'t> {
        self.unary_total(UnaryOp::Square)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    /// Pins values to `[lo, hi]`; no gradient flows outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary_total(UnaryOp::Clamp { lo, hi })
    }

    pub fn elu(self) -> Var<'t> {
        self.unary_total(UnaryOp::Elu { alpha: 1.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary_total(UnaryOp::LeakyRelu { slope })
    }

    /// Multiplication by a constant.
    pub fn scale(self, s: f64) -> Var<'t> {
        let y = self.value().map(|v| v * s);
        self.tape.push(y, Op::Scale(self.id, s), &[self.id])
    }

    /// Addition of a constant.
    pub fn offset(self, s: f64) -> Var<'t> {
        let y = self.value().map(|v| v + s);
        self.tape.push(y, Op::Offset(self.id), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `1 - x`.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().offset(1.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(TensorError::Shape { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (a.data(), b.data());
        for i in 0..m {
            let dst = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (d, bv) in dst.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *d += aip * bv;
                }
            }
        }
        let value = Tensor::matrix(m, n, out);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Var<'t> {
        let y = self.value().transpose();
        self.tape.push(y, Op::Transpose(self.id), &[self.id])
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Per-row sums, `m×n → m×1`.
    pub fn sum_rows(self) -> Var<'t> {
        let x = self.value();
        let data = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        self.tape.push(Tensor::matrix(x.rows(), 1, data), Op::SumRows(self.id), &[self.id])
    }

    /// Per-column sums, `m×n → 1×n`.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut data = vec![0.0; c];
        for i in 0..x.rows() {
            for (d, v) in data.iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        self.tape.push(Tensor::matrix(1, c, data), Op::SumCols(self.id), &[self.id])
    }

    /// Rows `idx[0], idx[1], ...` of a 2-D tensor.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(TensorError::Structure {
                op: "gather_rows",
                detail: format!("row index {bad} out of range for {} rows", x.rows()),
            });
        }
        let y = x.select_rows(&idx);
        Ok(self.tape.push(y, Op::GatherRows(self.id, idx), &[self.id]))
    }

    /// Row `i` of the output is the sum of the input rows whose segment is `i`.
    pub fn segment_sum(self, segments: Rc<[usize]>, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() != segments.len() && !(x.is_empty() && segments.is_empty()) {
            return Err(TensorError::Shape { op: "segment_sum", lhs: x.shape().to_vec(), rhs: vec![segments.len()] });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n) {
            return Err(TensorError::Structure {
                op: "segment_sum",
                detail: format!("segment index {bad} out of range for {n} segments"),
            });
        }
        let c = x.cols();
        let mut out = vec![0.0; n * c];
        for (e, &s) in segments.iter().enumerate() {
            for (d, v) in out[s * c..(s + 1) * c].iter_mut().zip(x.row(e)) {
                *d += v;
            }
        }
        Ok(self.tape.push(Tensor::matrix(n, c, out), Op::SegmentSum(self.id, segments), &[self.id]))
    }

    /// Softmax within runs of equal segment ids, independently per column.
    /// Segments must be sorted.
    pub fn segment_softmax(self, segments: Rc<[usize]>) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() != segments.len() {
            return Err(TensorError::Shape { op: "segment_softmax", lhs: x.shape().to_vec(), rhs: vec![segments.len()] });
        }
        let runs = segment_runs(&segments).ok_or_else(|| TensorError::Structure {
            op: "segment_softmax",
            detail: "segments are not sorted".into(),
        })?;
        let h = x.cols();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for (start, end) in runs {
            for col in 0..h {
                let max = (start..end).map(|e| xd[e * h + col]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in start..end {
                    let v = (xd[e * h + col] - max).exp();
                    out[e * h + col] = v;
                    z += v;
                }
                for e in start..end {
                    out[e * h + col] /= z;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(y, Op::SegmentSoftmax(self.id, segments), &[self.id]))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = values[0].rows();
        for v in &values {
            if v.rows() != r {
                return Err(TensorError::Shape { op: "concat_cols", lhs: values[0].shape().to_vec(), rhs: v.shape().to_vec() });
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &values {
                out.extend_from_slice(v.row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Tensor::matrix(r, total, out), Op::ConcatCols(ids.clone()), &ids))
    }

    /// Sums each run of `block` adjacent columns, `m×(h·block) → m×h`.
    pub fn block_sum_cols(self, block: usize) -> Result<Var<'t>> {
        let x = self.value();
        if block == 0 || x.cols() % block != 0 {
            return Err(TensorError::Shape { op: "block_sum_cols", lhs: x.shape().to_vec(), rhs: vec![block] });
        }
        let h = x.cols() / block;
        let data = x.data().chunks(block).map(|c| c.iter().sum()).collect();
        let y = Tensor::matrix(x.rows(), h, data);
        Ok(self.tape.push(y, Op::BlockSum(self.id, block), &[self.id]))
    }

    /// Repeats every column `times` times in place, `m×h → m×(h·times)`.
    pub fn repeat_cols(self, times: usize) -> Result<Var<'t>> {
        let x = self.value();
        if times == 0 {
            return Err(TensorError::Shape { op: "repeat_cols", lhs: x.shape().to_vec(), rhs: vec![times] });
        }
        let data = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, times)).collect();
        let y = Tensor::matrix(x.rows(), x.cols() * times, data);
        Ok(self.tape.push(y, Op::RepeatCols(self.id, times), &[self.id]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start > end || end > x.cols() {
            return Err(TensorError::Shape { op: "slice_cols", lhs: x.shape().to_vec(), rhs: vec![start, end] });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(x.rows() * w);
        for i in 0..x.rows() {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        Ok(self.tape.push(Tensor::matrix(x.rows(), w, out), Op::SliceCols(self.id, start), &[self.id]))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let row = x.row(i);
            let lse = logsumexp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let y = Tensor::matrix(x.rows(), c, out);
        self.tape.push(y, Op::LogSoftmaxRows(self.id), &[self.id])
    }

    /// Per-row `log Σ exp`, `m×n → m×1`.
    pub fn logsumexp_rows(self) -> Var<'t> {
        let x = self.value();
        let data = (0..x.rows()).map(|i| logsumexp(x.row(i))).collect();
        self.tape.push(Tensor::matrix(x.rows(), 1, data), Op::LogSumExpRows(self.id), &[self.id])
    }

    /// Rows scaled to unit Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(self) -> Var<'t> {
        let x = self.value();
        let c = x.cols();
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let row = x.row(i);
            let n = row_norm(row);
            if n == 0.0 {
                out.extend(std::iter::repeat_n(0.0, c));
            } else {
                out.extend(row.iter().map(|v| v / n));
            }
        }
        self.tape.push(Tensor::matrix(x.rows(), c, out), Op::NormalizeRows(self.id), &[self.id])
    }

    /// Row-wise cosine similarity, `m×n, m×n → m×1`. Zero rows give 0.
    pub fn cosine_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(TensorError::Shape { op: "cosine_rows", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let data = (0..a.rows()).map(|i| cosine(a.row(i), b.row(i))).collect();
        Ok(self.tape.push(Tensor::matrix(a.rows(), 1, data), Op::CosineRows(self.id, other.id), &[self.id, other.id]))
    }

    /// Multiplies by a fixed 0/1 mask scaled by `1/(1-rate)` (inverted dropout).
    pub fn dropout(self, mask: &[bool], rate: f64) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != x.len() {
            return Err(TensorError::Shape { op: "dropout", lhs: x.shape().to_vec(), rhs: vec![mask.len()] });
        }
        let keep = 1.0 - rate;
        let m = mask.iter().map(|&k| if k && keep > 0.0 { 1.0 / keep } else { 0.0 }).collect();
        let m = self.tape.constant(Tensor::new(x.shape().to_vec(), m)?);
        self.mul(m)
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (row_norm(a), row_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}
