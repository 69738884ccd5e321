//! Layer DAG with cached forward traces and hand-written backward passes.
//!
//! Nodes are appended in topological order (builder methods only accept ids
//! of earlier nodes), so `forward` is a single sweep and `backward` is the
//! reverse sweep. The 3x3 convolution dominates runtime; its inner loops are
//! written as contiguous-slice operations so they vectorize.

use super::{NnError, ParamId, ParamStore, Tensor4};
use crate::math;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub type NodeId = usize;

/// One layer application. Weight axis conventions:
/// convolutions store `[out_ch, in_ch, ky, kx]`, the fully-connected layer
/// `[out, in, 1, 1]`, per-channel gains/biases `[1, ch, 1, 1]`, and the
/// timestep projection `[ch, embed_dim, 1, 1]`.
#[derive(Debug, Clone)]
pub enum NodeOp {
    /// Placeholder for the graph input at the given slot.
    Input(usize),
    /// 3x3 convolution, stride 1, zero padding 1 (shape preserving).
    Conv3x3 { w: ParamId, b: Option<ParamId> },
    /// 1x1 convolution (per-cell channel mix).
    Conv1x1 { w: ParamId, b: Option<ParamId> },
    /// Fully-connected layer on `[n, ch, 1, 1]` vectors.
    Linear { w: ParamId, b: Option<ParamId> },
    Relu,
    Silu,
    /// Per-channel affine normalization over the spatial axes (batch-free):
    /// each (n, c) plane is standardized, then scaled and shifted.
    ChannelNorm { gain: ParamId, bias: ParamId, eps: f64 },
    /// Nearest-neighbour 2x down-sampling (keeps the top-left sample).
    Down2x,
    /// Nearest-neighbour 2x up-sampling.
    Up2x,
    /// Channel concatenation of two inputs.
    Concat,
    /// Elementwise sum of two inputs (residual connections).
    Add,
    /// Adds a learned projection of the sinusoidal embedding of the timestep
    /// as a per-channel bias.
    TimeEmbed { w: ParamId, b: ParamId, dim: usize },
}

impl NodeOp {
    fn name(&self) -> &'static str {
        match self {
            NodeOp::Input(_) => "input",
            NodeOp::Conv3x3 { .. } => "conv3x3",
            NodeOp::Conv1x1 { .. } => "conv1x1",
            NodeOp::Linear { .. } => "linear",
            NodeOp::Relu => "relu",
            NodeOp::Silu => "silu",
            NodeOp::ChannelNorm { .. } => "channel_norm",
            NodeOp::Down2x => "down2x",
            NodeOp::Up2x => "up2x",
            NodeOp::Concat => "concat",
            NodeOp::Add => "add",
            NodeOp::TimeEmbed { .. } => "time_embed",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: NodeOp,
    inputs: Vec<NodeId>,
}

/// All node outputs from one forward pass, kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Tensor4>,
    t: f64,
    n_inputs: usize,
}

impl Trace {
    /// Output of the final node.
    pub fn output(&self) -> &Tensor4 {
        self.values.last().expect("trace of empty graph")
    }

    pub fn node_output(&self, id: NodeId) -> &Tensor4 {
        &self.values[id]
    }
}

/// Parameter gradients, indexed like the [`ParamStore`]; allocated lazily so
/// untouched parameters stay `None`.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn for_store(params: &ParamStore) -> Self {
        Gradients { slots: vec![None; params.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor4> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    /// Gradient slot for a parameter, zero-initialized on first touch.
    pub fn slot_mut(&mut self, params: &ParamStore, id: ParamId) -> &mut Tensor4 {
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        self.slots[id].get_or_insert_with(|| Tensor4::zeros(params.get(id).shape()))
    }

    /// Scales every accumulated gradient (loss averaging).
    pub fn scale(&mut self, k: f64) {
        for s in self.slots.iter_mut().flatten() {
            s.scale(k);
        }
    }

    /// Fails on the first NaN/infinite gradient, naming the parameter.
    pub fn ensure_finite(&self, params: &ParamStore) -> Result<(), NnError> {
        for (id, slot) in self.slots.iter().enumerate() {
            if let Some(g) = slot {
                if !g.is_finite() {
                    return Err(NnError::NonFiniteGradient(params.name(id).into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    n_inputs: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: NodeOp, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "graph inputs must reference earlier nodes");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, slot: usize) -> NodeId {
        self.n_inputs = self.n_inputs.max(slot + 1);
        self.push(NodeOp::Input(slot), vec![])
    }

    pub fn conv3x3(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        self.push(NodeOp::Conv3x3 { w, b }, vec![x])
    }

    pub fn conv1x1(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        self.push(NodeOp::Conv1x1 { w, b }, vec![x])
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        self.push(NodeOp::Linear { w, b }, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(NodeOp::Relu, vec![x])
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.push(NodeOp::Silu, vec![x])
    }

    pub fn channel_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        self.push(NodeOp::ChannelNorm { gain, bias, eps: 1e-5 }, vec![x])
    }

    pub fn down2x(&mut self, x: NodeId) -> NodeId {
        self.push(NodeOp::Down2x, vec![x])
    }

    pub fn up2x(&mut self, x: NodeId) -> NodeId {
        self.push(NodeOp::Up2x, vec![x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeOp::Concat, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeOp::Add, vec![a, b])
    }

    pub fn time_embed(&mut self, x: NodeId, w: ParamId, b: ParamId, dim: usize) -> NodeId {
        self.push(NodeOp::TimeEmbed { w, b, dim }, vec![x])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn err(&self, id: NodeId, detail: &str) -> NnError {
        NnError::Shape(format!("node {id} ({}): {detail}", self.nodes[id].op.name()))
    }

    /// Evaluates every node; `t` feeds the timestep embeddings (ignored by
    /// graphs without one).
    pub fn forward(
        &self,
        params: &ParamStore,
        inputs: &[&Tensor4],
        t: f64,
    ) -> Result<Trace, NnError> {
        let mut values: Vec<Tensor4> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                NodeOp::Input(slot) => inputs
                    .get(*slot)
                    .map(|t| (*t).clone())
                    .ok_or_else(|| self.err(id, &format!("missing graph input slot {slot}")))?,
                NodeOp::Conv3x3 { w, b } => {
                    conv3x3_forward(&values[node.inputs[0]], params.get(*w), b.map(|b| params.get(b)))
                        .map_err(|d| self.err(id, &d))?
                }
                NodeOp::Conv1x1 { w, b } => {
                    conv1x1_forward(&values[node.inputs[0]], params.get(*w), b.map(|b| params.get(b)))
                        .map_err(|d| self.err(id, &d))?
                }
                NodeOp::Linear { w, b } => {
                    linear_forward(&values[node.inputs[0]], params.get(*w), b.map(|b| params.get(b)))
                        .map_err(|d| self.err(id, &d))?
                }
                NodeOp::Relu => values[node.inputs[0]].map(|v| v.max(0.0)),
                NodeOp::Silu => values[node.inputs[0]].map(silu),
                NodeOp::ChannelNorm { gain, bias, eps } => {
                    channel_norm_forward(&values[node.inputs[0]], params.get(*gain), params.get(*bias), *eps)
                        .map_err(|d| self.err(id, &d))?
                }
                NodeOp::Down2x => down2x_forward(&values[node.inputs[0]]).map_err(|d| self.err(id, &d))?,
                NodeOp::Up2x => up2x_forward(&values[node.inputs[0]]),
                NodeOp::Concat => concat_forward(&values[node.inputs[0]], &values[node.inputs[1]])
                    .map_err(|d| self.err(id, &d))?,
                NodeOp::Add => {
                    let mut out = values[node.inputs[0]].clone();
                    out.add_scaled(&values[node.inputs[1]], 1.0)
                        .map_err(|_| self.err(id, "operand shapes differ"))?;
                    out
                }
                NodeOp::TimeEmbed { w, b, dim } => {
                    time_embed_forward(&values[node.inputs[0]], params.get(*w), params.get(*b), *dim, t)
                        .map_err(|d| self.err(id, &d))?
                }
            };
            values.push(v);
        }
        if values.is_empty() {
            return Err(NnError::Shape("forward pass over an empty graph".into()));
        }
        Ok(Trace { values, t, n_inputs: self.n_inputs })
    }

    /// Reverse sweep. `grad_out` is the loss gradient at the final node;
    /// parameter gradients accumulate into `grads` (so several passes can sum)
    /// and the returned tensors are the gradients at each input slot.
    pub fn backward(
        &self,
        params: &ParamStore,
        trace: &Trace,
        grad_out: &Tensor4,
        grads: &mut Gradients,
    ) -> Result<Vec<Tensor4>, NnError> {
        if trace.values.len() != self.nodes.len() {
            return Err(NnError::Shape("trace does not belong to this graph".into()));
        }
        let mut node_grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        if grad_out.shape() != trace.output().shape() {
            return Err(NnError::Shape(format!(
                "grad_out {:?} vs output {:?}",
                grad_out.shape(),
                trace.output().shape()
            )));
        }
        node_grads[self.nodes.len() - 1] = Some(grad_out.clone());
        let mut input_grads: Vec<Option<Tensor4>> = vec![None; trace.n_inputs];

        for id in (0..self.nodes.len()).rev() {
            let g = match node_grads[id].take() {
                Some(g) => g,
                None => continue, // node does not influence the output
            };
            let node = &self.nodes[id];
            match &node.op {
                NodeOp::Input(slot) => {
                    match &mut input_grads[*slot] {
                        Some(acc) => acc.add_scaled(&g, 1.0).map_err(|_| {
                            self.err(id, "inconsistent shapes feeding one input slot")
                        })?,
                        empty => *empty = Some(g),
                    }
                    continue;
                }
                NodeOp::Conv3x3 { w, b } => {
                    let x = &trace.values[node.inputs[0]];
                    let gin = conv3x3_backward(x, params.get(*w), &g, grads, params, *w, *b);
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                NodeOp::Conv1x1 { w, b } => {
                    let x = &trace.values[node.inputs[0]];
                    let gin = conv1x1_backward(x, params.get(*w), &g, grads, params, *w, *b);
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                NodeOp::Linear { w, b } => {
                    let x = &trace.values[node.inputs[0]];
                    let gin = linear_backward(x, params.get(*w), &g, grads, params, *w, *b);
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                NodeOp::Relu => {
                    let x = &trace.values[node.inputs[0]];
                    let mut gin = g;
                    for (gv, xv) in gin.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                NodeOp::Silu => {
                    let x = &trace.values[node.inputs[0]];
                    let mut gin = g;
                    for (gv, xv) in gin.data_mut().iter_mut().zip(x.data()) {
                        *gv *= silu_grad(*xv);
                    }
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                NodeOp::ChannelNorm { gain, bias, eps } => {
                    let x = &trace.values[node.inputs[0]];
                    let gin =
                        channel_norm_backward(x, params.get(*gain), &g, *eps, grads, params, *gain, *bias);
                    accumulate(&mut node_grads[node.inputs[0]], gin);
                }
                NodeOp::Down2x => {
                    let x = &trace.values[node.inputs[0]];
                    accumulate(&mut node_grads[node.inputs[0]], down2x_backward(x, &g));
                }
                NodeOp::Up2x => {
                    let x = &trace.values[node.inputs[0]];
                    accumulate(&mut node_grads[node.inputs[0]], up2x_backward(x, &g));
                }
                NodeOp::Concat => {
                    let ca = trace.values[node.inputs[0]].shape()[1];
                    let (ga, gb) = concat_backward(&g, ca);
                    accumulate(&mut node_grads[node.inputs[0]], ga);
                    accumulate(&mut node_grads[node.inputs[1]], gb);
                }
                NodeOp::Add => {
                    accumulate(&mut node_grads[node.inputs[0]], g.clone());
                    accumulate(&mut node_grads[node.inputs[1]], g);
                }
                NodeOp::TimeEmbed { w, b, dim } => {
                    time_embed_backward(&g, *dim, trace.t, grads, params, *w, *b);
                    accumulate(&mut node_grads[node.inputs[0]], g);
                }
            }
        }

        Ok(input_grads
            .into_iter()
            .map(|g| g.unwrap_or_else(|| Tensor4::zeros([0, 0, 0, 0])))
            .collect())
    }
}

fn accumulate(slot: &mut Option<Tensor4>, g: Tensor4) {
    match slot {
        Some(acc) => acc.add_scaled(&g, 1.0).expect("internal gradient shape mismatch"),
        empty => *empty = Some(g),
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + math::exp(-x))
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + math::exp(-x));
    s * (1.0 + x * (1.0 - s))
}

/// `dst += k * src` over matching slices; the hot loop of every convolution.
#[inline]
fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * *s;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes
/// without reassociating a single serial chain.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    for j in 4 * chunks..n {
        s0 += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3)
}

/// Valid output-row range for a kernel offset `d` on an axis of length `len`:
/// positions `y` with `0 <= y + d < len`.
#[inline]
fn offset_range(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len - d as usize } else { len };
    (lo, hi)
}

fn conv3x3_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: Option<&Tensor4>,
) -> Result<Tensor4, alloc::string::String> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, kh, kw] = w.shape();
    if wci != ci || kh != 3 || kw != 3 {
        return Err(format!("weights {:?} vs input {:?}", w.shape(), x.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [1, co, 1, 1] {
            return Err(format!("bias {:?} for {co} channels", b.shape()));
        }
    }
    let mut out = Tensor4::zeros([n, co, h, wd]);
    for bn in 0..n {
        for oc in 0..co {
            if let Some(bias) = b {
                out.plane_mut(bn, oc).iter_mut().for_each(|v| *v = bias.data()[oc]);
            }
            for ic in 0..ci {
                let xp = x.plane(bn, ic);
                let op = out.plane_mut(bn, oc);
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    let (ylo, yhi) = offset_range(h, dy);
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let (xlo, xhi) = offset_range(wd, dx);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w.at(oc, ic, ky, kx);
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let src = &xp[sy * wd + (xlo as isize + dx) as usize
                                ..sy * wd + (xhi as isize + dx) as usize];
                            let dst = &mut op[y * wd + xlo..y * wd + xhi];
                            axpy(dst, src, wv);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &Tensor4,
    w: &Tensor4,
    go: &Tensor4,
    grads: &mut Gradients,
    params: &ParamStore,
    wid: ParamId,
    bid: Option<ParamId>,
) -> Tensor4 {
    let [n, ci, h, wd] = x.shape();
    let co = w.shape()[0];
    let mut gin = Tensor4::zeros(x.shape());

    // Input gradient: scatter each output row back through the kernel.
    for bn in 0..n {
        for ic in 0..ci {
            let gp = gin.plane_mut(bn, ic);
            for oc in 0..co {
                let gop = go.plane(bn, oc);
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    let (ylo, yhi) = offset_range(h, dy);
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let (xlo, xhi) = offset_range(wd, dx);
                        if xlo >= xhi {
                            continue;
                        }
                        let wv = w.at(oc, ic, ky, kx);
                        for y in ylo..yhi {
                            let sy = (y as isize + dy) as usize;
                            let dst = &mut gp[sy * wd + (xlo as isize + dx) as usize
                                ..sy * wd + (xhi as isize + dx) as usize];
                            let src = &gop[y * wd + xlo..y * wd + xhi];
                            axpy(dst, src, wv);
                        }
                    }
                }
            }
        }
    }

    // Weight gradient: correlate output grads with shifted input rows.
    {
        let gw = grads.slot_mut(params, wid);
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    let (ylo, yhi) = offset_range(h, dy);
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let (xlo, xhi) = offset_range(wd, dx);
                        if xlo >= xhi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for bn in 0..n {
                            let gop = go.plane(bn, oc);
                            let xp = x.plane(bn, ic);
                            for y in ylo..yhi {
                                let sy = (y as isize + dy) as usize;
                                acc += dot(
                                    &gop[y * wd + xlo..y * wd + xhi],
                                    &xp[sy * wd + (xlo as isize + dx) as usize
                                        ..sy * wd + (xhi as isize + dx) as usize],
                                );
                            }
                        }
                        *gw.at_mut(oc, ic, ky, kx) += acc;
                    }
                }
            }
        }
    }

    if let Some(bid) = bid {
        let gb = grads.slot_mut(params, bid);
        for oc in 0..co {
            let mut acc = 0.0;
            for bn in 0..n {
                acc += go.plane(bn, oc).iter().sum::<f64>();
            }
            gb.data_mut()[oc] += acc;
        }
    }
    gin
}

fn conv1x1_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: Option<&Tensor4>,
) -> Result<Tensor4, alloc::string::String> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, kh, kw] = w.shape();
    if wci != ci || kh != 1 || kw != 1 {
        return Err(format!("weights {:?} vs input {:?}", w.shape(), x.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [1, co, 1, 1] {
            return Err(format!("bias {:?} for {co} channels", b.shape()));
        }
    }
    let mut out = Tensor4::zeros([n, co, h, wd]);
    for bn in 0..n {
        for oc in 0..co {
            if let Some(bias) = b {
                out.plane_mut(bn, oc).iter_mut().for_each(|v| *v = bias.data()[oc]);
            }
            for ic in 0..ci {
                let wv = w.at(oc, ic, 0, 0);
                let xp = x.plane(bn, ic);
                axpy(out.plane_mut(bn, oc), xp, wv);
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv1x1_backward(
    x: &Tensor4,
    w: &Tensor4,
    go: &Tensor4,
    grads: &mut Gradients,
    params: &ParamStore,
    wid: ParamId,
    bid: Option<ParamId>,
) -> Tensor4 {
    let [n, ci, _, _] = x.shape();
    let co = w.shape()[0];
    let mut gin = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ic in 0..ci {
            for oc in 0..co {
                let wv = w.at(oc, ic, 0, 0);
                axpy(gin.plane_mut(bn, ic), go.plane(bn, oc), wv);
            }
        }
    }
    {
        let gw = grads.slot_mut(params, wid);
        for oc in 0..co {
            for ic in 0..ci {
                let mut acc = 0.0;
                for bn in 0..n {
                    acc += dot(go.plane(bn, oc), x.plane(bn, ic));
                }
                *gw.at_mut(oc, ic, 0, 0) += acc;
            }
        }
    }
    if let Some(bid) = bid {
        let gb = grads.slot_mut(params, bid);
        for oc in 0..co {
            let mut acc = 0.0;
            for bn in 0..n {
                acc += go.plane(bn, oc).iter().sum::<f64>();
            }
            gb.data_mut()[oc] += acc;
        }
    }
    gin
}

fn linear_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: Option<&Tensor4>,
) -> Result<Tensor4, alloc::string::String> {
    let [n, ci, h, wd] = x.shape();
    if h != 1 || wd != 1 {
        return Err(format!("linear expects [n, ch, 1, 1], got {:?}", x.shape()));
    }
    let [co, wci, _, _] = w.shape();
    if wci != ci {
        return Err(format!("weights {:?} vs input {:?}", w.shape(), x.shape()));
    }
    let mut out = Tensor4::zeros([n, co, 1, 1]);
    for bn in 0..n {
        let xrow = &x.data()[bn * ci..(bn + 1) * ci];
        for oc in 0..co {
            let wrow = &w.data()[oc * ci..(oc + 1) * ci];
            let mut v = dot(wrow, xrow);
            if let Some(b) = b {
                v += b.data()[oc];
            }
            out.data_mut()[bn * co + oc] = v;
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &Tensor4,
    w: &Tensor4,
    go: &Tensor4,
    grads: &mut Gradients,
    params: &ParamStore,
    wid: ParamId,
    bid: Option<ParamId>,
) -> Tensor4 {
    let [n, ci, _, _] = x.shape();
    let co = w.shape()[0];
    let mut gin = Tensor4::zeros(x.shape());
    for bn in 0..n {
        let grow = &go.data()[bn * co..(bn + 1) * co];
        let xrow = &x.data()[bn * ci..(bn + 1) * ci];
        {
            let gw = grads.slot_mut(params, wid);
            for oc in 0..co {
                let g = grow[oc];
                axpy(&mut gw.data_mut()[oc * ci..(oc + 1) * ci], xrow, g);
            }
        }
        for oc in 0..co {
            let g = grow[oc];
            let wrow = &w.data()[oc * ci..(oc + 1) * ci];
            axpy(&mut gin.data_mut()[bn * ci..(bn + 1) * ci], wrow, g);
        }
        if let Some(bid) = bid {
            let gb = grads.slot_mut(params, bid);
            axpy(&mut gb.data_mut()[..co], grow, 1.0);
        }
    }
    gin
}

fn channel_norm_forward(
    x: &Tensor4,
    gain: &Tensor4,
    bias: &Tensor4,
    eps: f64,
) -> Result<Tensor4, alloc::string::String> {
    let [n, c, _, _] = x.shape();
    if gain.shape() != [1, c, 1, 1] || bias.shape() != [1, c, 1, 1] {
        return Err(format!(
            "gain {:?} / bias {:?} for {c} channels",
            gain.shape(),
            bias.shape()
        ));
    }
    let mut out = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            let xp = x.plane(bn, ch);
            let hw = xp.len() as f64;
            let mean = xp.iter().sum::<f64>() / hw;
            let var = xp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            let inv = 1.0 / math::sqrt(var + eps);
            let (g, b) = (gain.data()[ch], bias.data()[ch]);
            for (o, v) in out.plane_mut(bn, ch).iter_mut().zip(xp) {
                *o = g * (v - mean) * inv + b;
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn channel_norm_backward(
    x: &Tensor4,
    gain: &Tensor4,
    go: &Tensor4,
    eps: f64,
    grads: &mut Gradients,
    params: &ParamStore,
    gain_id: ParamId,
    bias_id: ParamId,
) -> Tensor4 {
    let [n, c, _, _] = x.shape();
    let mut gin = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            let xp = x.plane(bn, ch);
            let gp = go.plane(bn, ch);
            let hw = xp.len() as f64;
            let mean = xp.iter().sum::<f64>() / hw;
            let var = xp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            let inv = 1.0 / math::sqrt(var + eps);
            let g = gain.data()[ch];

            // d/dxhat, then fold the mean and variance paths back in. With
            // xhat_i = (x_i - mean) * inv:
            //   dx_i = g*inv * (go_i - mean(go) - xhat_i * mean(go * xhat))
            let mut go_sum = 0.0;
            let mut goxh_sum = 0.0;
            for (gv, xv) in gp.iter().zip(xp) {
                go_sum += gv;
                goxh_sum += gv * (xv - mean) * inv;
            }
            let go_mean = go_sum / hw;
            let goxh_mean = goxh_sum / hw;
            for ((d, gv), xv) in gin.plane_mut(bn, ch).iter_mut().zip(gp).zip(xp) {
                let xh = (xv - mean) * inv;
                *d = g * inv * (gv - go_mean - xh * goxh_mean);
            }
            {
                let ggain = grads.slot_mut(params, gain_id);
                ggain.data_mut()[ch] += goxh_sum;
            }
            {
                let gbias = grads.slot_mut(params, bias_id);
                gbias.data_mut()[ch] += go_sum;
            }
        }
    }
    gin
}

fn down2x_forward(x: &Tensor4) -> Result<Tensor4, alloc::string::String> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(format!("spatial dims must be even, got {h}x{w}"));
    }
    let mut out = Tensor4::zeros([n, c, h / 2, w / 2]);
    for bn in 0..n {
        for ch in 0..c {
            let xp = x.plane(bn, ch);
            let op = out.plane_mut(bn, ch);
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    op[y * (w / 2) + xx] = xp[(2 * y) * w + 2 * xx];
                }
            }
        }
    }
    Ok(out)
}

fn down2x_backward(x: &Tensor4, go: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut gin = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            let gp = gin.plane_mut(bn, ch);
            let gop = go.plane(bn, ch);
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    gp[(2 * y) * w + 2 * xx] = gop[y * (w / 2) + xx];
                }
            }
        }
    }
    gin
}

fn up2x_forward(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]);
    for bn in 0..n {
        for ch in 0..c {
            let xp = x.plane(bn, ch);
            let op = out.plane_mut(bn, ch);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    op[y * 2 * w + xx] = xp[(y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}

fn up2x_backward(x: &Tensor4, go: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut gin = Tensor4::zeros(x.shape());
    for bn in 0..n {
        for ch in 0..c {
            let gp = gin.plane_mut(bn, ch);
            let gop = go.plane(bn, ch);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    gp[(y / 2) * w + xx / 2] += gop[y * 2 * w + xx];
                }
            }
        }
    }
    gin
}

fn concat_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4, alloc::string::String> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if na != nb || ha != hb || wa != wb {
        return Err(format!("cannot concat {:?} with {:?}", a.shape(), b.shape()));
    }
    let mut out = Tensor4::zeros([na, ca + cb, ha, wa]);
    for bn in 0..na {
        for ch in 0..ca {
            out.plane_mut(bn, ch).copy_from_slice(a.plane(bn, ch));
        }
        for ch in 0..cb {
            out.plane_mut(bn, ca + ch).copy_from_slice(b.plane(bn, ch));
        }
    }
    Ok(out)
}

fn concat_backward(go: &Tensor4, ca: usize) -> (Tensor4, Tensor4) {
    let [n, c, h, w] = go.shape();
    let mut ga = Tensor4::zeros([n, ca, h, w]);
    let mut gb = Tensor4::zeros([n, c - ca, h, w]);
    for bn in 0..n {
        for ch in 0..ca {
            ga.plane_mut(bn, ch).copy_from_slice(go.plane(bn, ch));
        }
        for ch in 0..c - ca {
            gb.plane_mut(bn, ch).copy_from_slice(go.plane(bn, ca + ch));
        }
    }
    (ga, gb)
}

/// Sinusoidal embedding of a scalar timestep: `dim/2` sine components over
/// geometrically spaced frequencies, then the matching cosines.
pub(crate) fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    let denom = (half.saturating_sub(1)).max(1) as f64;
    for i in 0..half {
        let freq = math::exp(-math::ln(10000.0) * i as f64 / denom);
        e[i] = math::sin(t * freq);
        e[half + i] = math::cos(t * freq);
    }
    e
}

fn time_embed_forward(
    x: &Tensor4,
    w: &Tensor4,
    b: &Tensor4,
    dim: usize,
    t: f64,
) -> Result<Tensor4, alloc::string::String> {
    let [n, c, _, _] = x.shape();
    if dim < 2 || dim % 2 != 0 {
        return Err(format!("embedding dim must be even and >= 2, got {dim}"));
    }
    if w.shape() != [c, dim, 1, 1] || b.shape() != [1, c, 1, 1] {
        return Err(format!(
            "projection {:?} / bias {:?} for {c} channels, embed dim {dim}",
            w.shape(),
            b.shape()
        ));
    }
    let e = sinusoidal_embedding(t, dim);
    let mut out = x.clone();
    for bn in 0..n {
        for ch in 0..c {
            let shift = dot(&w.data()[ch * dim..(ch + 1) * dim], &e) + b.data()[ch];
            out.plane_mut(bn, ch).iter_mut().for_each(|v| *v += shift);
        }
    }
    Ok(out)
}

fn time_embed_backward(
    go: &Tensor4,
    dim: usize,
    t: f64,
    grads: &mut Gradients,
    params: &ParamStore,
    wid: ParamId,
    bid: ParamId,
) {
    let [n, c, _, _] = go.shape();
    let e = sinusoidal_embedding(t, dim);
    for ch in 0..c {
        let mut acc = 0.0;
        for bn in 0..n {
            acc += go.plane(bn, ch).iter().sum::<f64>();
        }
        {
            let gw = grads.slot_mut(params, wid);
            axpy(&mut gw.data_mut()[ch * dim..(ch + 1) * dim], &e, acc);
        }
        let gb = grads.slot_mut(params, bid);
        gb.data_mut()[ch] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn conv3x3_matches_direct_convolution_on_small_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = Tensor4::randn([1, 2, 4, 5], 1.0, &mut rng);
        let w = Tensor4::randn([3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor4::randn([1, 3, 1, 1], 0.5, &mut rng);
        let out = conv3x3_forward(&x, &w, Some(&b)).unwrap();
        // Reference: quadruple loop with explicit zero padding.
        for oc in 0..3 {
            for y in 0..4i64 {
                for xx in 0..5i64 {
                    let mut want = b.data()[oc];
                    for ic in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let sy = y + ky - 1;
                                let sx = xx + kx - 1;
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    want += w.at(oc, ic, ky as usize, kx as usize)
                                        * x.at(0, ic, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    let got = out.at(0, oc, y as usize, xx as usize);
                    assert!((got - want).abs() < 1e-12, "({oc},{y},{xx}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn down_then_up_keeps_top_left_samples() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let down = down2x_forward(&x).unwrap();
        assert_eq!(down.data(), &[1.0]);
        let up = up2x_forward(&down);
        assert_eq!(up.shape(), [1, 1, 2, 2]);
        assert!(up.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn down2x_rejects_odd_dims() {
        let x = Tensor4::zeros([1, 1, 3, 4]);
        assert!(down2x_forward(&x).is_err());
    }

    #[test]
    fn channel_norm_standardizes_each_plane() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor4::randn([2, 3, 4, 4], 2.5, &mut rng);
        let mut gain = Tensor4::zeros([1, 3, 1, 1]);
        gain.fill(1.0);
        let bias = Tensor4::zeros([1, 3, 1, 1]);
        let y = channel_norm_forward(&x, &gain, &bias, 1e-5).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let p = y.plane(n, c);
                let mean: f64 = p.iter().sum::<f64>() / p.len() as f64;
                let var: f64 = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-4); // eps shrinks variance slightly
            }
        }
    }

    #[test]
    fn concat_stacks_channels_in_order() {
        let a = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor4::from_vec([1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = concat_forward(&a, &b).unwrap();
        assert_eq!(out.shape(), [1, 3, 1, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct_per_step() {
        let a = sinusoidal_embedding(1.0, 8);
        let b = sinusoidal_embedding(2.0, 8);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }

    #[test]
    fn graph_rejects_missing_input_slot() {
        let mut g = Graph::new();
        let x = g.input(0);
        g.relu(x);
        let params = ParamStore::new();
        assert!(matches!(g.forward(&params, &[], 0.0), Err(NnError::Shape(_))));
    }

    #[test]
    fn residual_add_doubles_on_shared_input() {
        let mut g = Graph::new();
        let x = g.input(0);
        g.add(x, x);
        let params = ParamStore::new();
        let t = Tensor4::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let trace = g.forward(&params, &[&t], 0.0).unwrap();
        assert_eq!(trace.output().data(), &[2.0, -4.0, 6.0]);
        // Both branches feed the same input: gradient doubles.
        let mut grads = Gradients::for_store(&params);
        let go = Tensor4::from_vec([1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let gin = g.backward(&params, &trace, &go, &mut grads).unwrap();
        assert_eq!(gin[0].data(), &[2.0, 2.0, 2.0]);
    }
}
