//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Nodes are appended in execution order, so insertion order is a topological
//! order and backward is a single reverse sweep that visits each node once.
//! Leaves bound to [`ParamStore`] slots share the parameter buffer (no copy).

use std::collections::HashMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;

use crate::error::NnError;
use crate::tensor::{ArrD, Gradients, ParamStore, SharedArrD, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf { param_slot: Option<usize> },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Transpose { a: NodeId },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<f64>, inv_std: Array1<f64> },
    Gelu { x: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    Dropout { a: NodeId, mask: ArrD },
    NllSum { logits: NodeId, targets: Vec<usize>, active: Vec<bool>, probs: Array2<f64> },
}

struct Node {
    value: SharedArrD,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, NodeId>,
    train: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Inference-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new(), train: false }
    }

    /// Training-mode graph: dropout is active.
    pub fn training() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new(), train: true }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &SharedArrD {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn param_slot(&self, id: NodeId) -> Option<usize> {
        match self.nodes[id.0].op {
            Op::Leaf { param_slot } => param_slot,
            _ => None,
        }
    }

    fn push(&mut self, value: ArrD, op: Op, requires_grad: bool) -> NodeId {
        self.push_shared(value.into_shared(), op, requires_grad)
    }

    fn push_shared(&mut self, value: SharedArrD, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, requires_grad });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- leaves ----

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, a: ArrD) -> NodeId {
        self.push(a, Op::Leaf { param_slot: None }, false)
    }

    pub fn constant_shared(&mut self, a: SharedArrD) -> NodeId {
        self.push_shared(a, Op::Leaf { param_slot: None }, false)
    }

    /// Differentiable leaf not tied to a parameter slot (tests, probes).
    pub fn leaf(&mut self, a: ArrD) -> NodeId {
        self.push(a, Op::Leaf { param_slot: None }, true)
    }

    /// Binds a parameter slot as a differentiable leaf; memoized per graph so
    /// repeated bindings of the same slot accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, slot: usize) -> NodeId {
        if let Some(&id) = self.bound.get(&slot) {
            return id;
        }
        let data = store.by_slot(slot).data().clone();
        let id = self.push_shared(data, Op::Leaf { param_slot: Some(slot) }, true);
        self.bound.insert(slot, id);
        id
    }

    // ---- shape helpers ----

    fn view2(&self, id: NodeId, op: &'static str) -> Result<ArrayView2<'_, f64>, NnError> {
        self.nodes[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| NnError::shape(op, format!("expected 2-d, got {:?}", self.shape(id))))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let av = self.view2(a, "matmul")?;
        let bv = self.view2(b, "matmul")?;
        if av.ncols() != bv.nrows() {
            return Err(NnError::shape(
                "matmul",
                format!("{:?} x {:?}", av.dim(), bv.dim()),
            ));
        }
        let out = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul { a, b }, rg))
    }

    /// Element-wise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Broadcasts a length-n row vector over an (m, n) matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NnError> {
        let av = self.view2(a, "add_row")?;
        let rv = &self.nodes[row.0].value;
        if rv.ndim() != 1 || rv.len() != av.ncols() {
            return Err(NnError::shape(
                "add_row",
                format!("matrix {:?} vs row {:?}", av.dim(), rv.shape()),
            ));
        }
        let row1 = rv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let out = (&av + &row1).into_dyn();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow { a, row }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.mapv(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let av = self.view2(a, "transpose")?;
        let out = av.t().to_owned().into_dyn();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose { a }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        self.concat(parts, Axis(0))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        self.concat(parts, Axis(1))
    }

    fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(NnError::shape("concat", "no parts"));
        }
        let views: Vec<ArrayView2<f64>> = parts
            .iter()
            .map(|&p| self.view2(p, "concat"))
            .collect::<Result<_, _>>()?;
        let out = concatenate(axis, &views)
            .map_err(|e| NnError::shape("concat", e.to_string()))?
            .into_dyn();
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = if axis == Axis(0) {
            Op::ConcatRows { parts: parts.to_vec() }
        } else {
            Op::ConcatCols { parts: parts.to_vec() }
        };
        Ok(self.push(out, op, rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let av = self.view2(a, "slice_rows")?;
        if start + len > av.nrows() {
            return Err(NnError::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, av.dim()),
            ));
        }
        let out = av.slice(s![start..start + len, ..]).to_owned().into_dyn();
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let av = self.view2(a, "slice_cols")?;
        if start + len > av.ncols() {
            return Err(NnError::shape(
                "slice_cols",
                format!("cols {}..{} of {:?}", start, start + len, av.dim()),
            ));
        }
        let out = av.slice(s![.., start..start + len]).to_owned().into_dyn();
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    /// Row-wise softmax. With a mask, `false` positions get exactly zero
    /// weight; every row must keep at least one `true` entry.
    pub fn softmax(&mut self, a: NodeId, mask: Option<&Array2<bool>>) -> Result<NodeId, NnError> {
        let av = self.view2(a, "softmax")?;
        let (m, n) = av.dim();
        if let Some(mk) = mask {
            if mk.dim() != (m, n) {
                return Err(NnError::shape(
                    "softmax",
                    format!("mask {:?} vs input ({m}, {n})", mk.dim()),
                ));
            }
            if mk.rows().into_iter().any(|r| !r.iter().any(|&b| b)) {
                return Err(NnError::shape("softmax", "fully masked row"));
            }
        }
        let mut out = Array2::<f64>::zeros((m, n));
        for i in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.map_or(true, |mk| mk[(i, j)]) {
                    mx = mx.max(av[(i, j)]);
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mask.map_or(true, |mk| mk[(i, j)]) {
                    let e = (av[(i, j)] - mx).exp();
                    out[(i, j)] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[(i, j)] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out.into_dyn(), Op::Softmax { a }, rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, NnError> {
        let xv = self.view2(x, "layer_norm")?;
        let (m, n) = xv.dim();
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        if gv.ndim() != 1 || gv.len() != n || bv.ndim() != 1 || bv.len() != n {
            return Err(NnError::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs width {n}", gv.shape(), bv.shape()),
            ));
        }
        let mut xhat = Array2::<f64>::zeros((m, n));
        let mut inv_std = Array1::<f64>::zeros(m);
        let mut out = Array2::<f64>::zeros((m, n));
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                xhat[(i, j)] = xh;
                out[(i, j)] = xh * gv[IxDyn(&[j])] + bv[IxDyn(&[j])];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out.into_dyn(), Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(gelu_fwd);
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg)
    }

    /// Selects rows of `table` by id; gradients scatter-add back.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NnError> {
        let tv = self.view2(table, "embedding_lookup")?;
        let (v, h) = tv.dim();
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NnError::shape(
                "embedding_lookup",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let mut out = Array2::<f64>::zeros((ids.len(), h));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(out.into_dyn(), Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout. Identity when the graph is not in training mode or
    /// when `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl Rng) -> NodeId {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask = self.nodes[a.0]
            .value
            .mapv(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let out = &self.nodes[a.0].value * &mask;
        let rg = self.rg(a);
        self.push(out, Op::Dropout { a, mask }, rg)
    }

    /// Sum of negative log-softmax probabilities of `targets` over the rows
    /// of `logits`, skipping rows where `active` is false. Output is a
    /// single-element node.
    pub fn nll_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        active: &[bool],
    ) -> Result<NodeId, NnError> {
        let lv = self.view2(logits, "nll_sum")?;
        let (m, v) = lv.dim();
        if targets.len() != m || active.len() != m {
            return Err(NnError::shape(
                "nll_sum",
                format!("{m} logit rows vs {} targets / {} flags", targets.len(), active.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NnError::shape("nll_sum", format!("target id {bad} >= vocab {v}")));
        }
        let mut probs = Array2::<f64>::zeros((m, v));
        let mut loss = 0.0;
        for i in 0..m {
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[(i, j)] = e;
                sum += e;
            }
            let log_z = mx + sum.ln();
            for j in 0..v {
                probs[(i, j)] /= sum;
            }
            if active[i] {
                loss -= row[targets[i]] - log_z;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::NllSum { logits, targets: targets.to_vec(), active: active.to_vec(), probs },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a single-element loss node. Returns one gradient
    /// per node (None for nodes the loss does not reach or that do not
    /// require gradients).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<ArrD>>, NnError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<ArrD>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrD::from_elem(IxDyn(self.shape(loss)), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        Ok(grads)
    }

    /// Collapses node gradients into per-parameter-slot buckets.
    pub fn param_grads(&self, node_grads: &[Option<ArrD>], n_slots: usize) -> Gradients {
        let mut out = Gradients::new(n_slots);
        for (&slot, &id) in &self.bound {
            if let Some(g) = &node_grads[id.0] {
                out.accumulate_slot(slot, g);
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<ArrD>], id: NodeId, delta: ArrD) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, go: &ArrD, grads: &mut [Option<ArrD>]) {
        let go2 = || go.view().into_dimensionality::<Ix2>().unwrap();
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let av = self.view2(*a, "matmul.bwd").unwrap();
                let bv = self.view2(*b, "matmul.bwd").unwrap();
                let g = go2();
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&bv.t()).into_dyn());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, av.t().dot(&g).into_dyn());
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, go.clone());
                self.acc(grads, *b, go.clone());
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, go.clone());
                if self.rg(*row) {
                    let g = go2().sum_axis(Axis(0)).into_dyn();
                    self.acc(grads, *row, g);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    self.acc(grads, *a, (go * &*self.nodes[b.0].value).into_owned());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, (go * &*self.nodes[a.0].value).into_owned());
                }
            }
            Op::Scale { a, c } => {
                self.acc(grads, *a, go.mapv(|v| v * c));
            }
            Op::Transpose { a } => {
                self.acc(grads, *a, go2().t().to_owned().into_dyn());
            }
            Op::ConcatRows { parts } => {
                let g = go2();
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if self.rg(p) {
                        let gp = g.slice(s![off..off + rows, ..]).to_owned().into_dyn();
                        self.acc(grads, p, gp);
                    }
                    off += rows;
                }
            }
            Op::ConcatCols { parts } => {
                let g = go2();
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    if self.rg(p) {
                        let gp = g.slice(s![.., off..off + cols]).to_owned().into_dyn();
                        self.acc(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::SliceRows { a, start } => {
                let g = go2();
                let full = self.view2(*a, "slice_rows.bwd").unwrap().dim();
                let mut ga = Array2::<f64>::zeros(full);
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.acc(grads, *a, ga.into_dyn());
            }
            Op::SliceCols { a, start } => {
                let g = go2();
                let full = self.view2(*a, "slice_cols.bwd").unwrap().dim();
                let mut ga = Array2::<f64>::zeros(full);
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.acc(grads, *a, ga.into_dyn());
            }
            Op::Softmax { a } => {
                let out = self.view2(NodeId(i), "softmax.bwd").unwrap();
                let g = go2();
                let mut ga = Array2::<f64>::zeros(out.dim());
                for r in 0..out.nrows() {
                    let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(x, y)| x * y).sum();
                    for c in 0..out.ncols() {
                        ga[(r, c)] = out[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                self.acc(grads, *a, ga.into_dyn());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let g = go2();
                let (m, n) = g.dim();
                let gv = &self.nodes[gain.0].value;
                if self.rg(*x) {
                    let mut gx = Array2::<f64>::zeros((m, n));
                    for r in 0..m {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..n {
                            let dxhat = g[(r, c)] * gv[IxDyn(&[c])];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat[(r, c)];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for c in 0..n {
                            let dxhat = g[(r, c)] * gv[IxDyn(&[c])];
                            gx[(r, c)] = inv_std[r]
                                * (dxhat - mean_dxhat - xhat[(r, c)] * mean_dxhat_xhat);
                        }
                    }
                    self.acc(grads, *x, gx.into_dyn());
                }
                if self.rg(*gain) {
                    let gg = (&g * xhat).sum_axis(Axis(0)).into_dyn();
                    self.acc(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    self.acc(grads, *bias, g.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[x.0].value;
                let mut ga = xv.mapv(gelu_grad);
                ga *= go;
                self.acc(grads, *x, ga);
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let g = go2();
                    let dim = self.view2(*table, "embedding.bwd").unwrap().dim();
                    let mut gt = Array2::<f64>::zeros(dim);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(r);
                    }
                    self.acc(grads, *table, gt.into_dyn());
                }
            }
            Op::Dropout { a, mask } => {
                self.acc(grads, *a, (go * mask).into_owned());
            }
            Op::NllSum { logits, targets, active, probs } => {
                if self.rg(*logits) {
                    let scale = go[IxDyn(&[0])];
                    let mut gl = probs.clone();
                    for (r, (&t, &on)) in targets.iter().zip(active).enumerate() {
                        if on {
                            gl[(r, t)] -= 1.0;
                        } else {
                            gl.row_mut(r).fill(0.0);
                        }
                    }
                    gl *= scale;
                    self.acc(grads, *logits, gl.into_dyn());
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
