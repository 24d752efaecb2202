use std::ops::Range;

use super::kernels::{self, ConvDims};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
/// `var` is the biased (population) variance used for normalization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        x: Var,
        len: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: BnMode,
        dims: (usize, usize, usize),
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        features: usize,
        outputs: usize,
    },
    WeightedCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
        sample_weights: Vec<f32>,
        total_weight: f32,
    },
    KlDistill {
        student: Var,
        ps: Vec<f32>,
        pt: Vec<f32>,
        temperature: f32,
        batch: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        alpha: f32,
    },
    Slice {
        x: Var,
        ranges: Vec<Range<usize>>,
    },
    FakeQuant {
        x: Var,
        pass: Vec<bool>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable operations in execution order.
///
/// A tape built with [`Tape::inference`] records values only; nothing on it
/// requires a gradient and no backward state is kept.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    record: bool,
    visit_order: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
            visit_order: Vec::new(),
        }
    }

    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let rg = t.requires_grad;
        self.push(value, rg, Op::Leaf)
    }

    /// Moves a tensor onto the tape as a constant.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.node(v).value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`. Only leaves
    /// keep their gradients after the pass.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices visited by the last backward pass, in visiting order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.visit_order
    }

    // ---- ops ----

    /// Cross-correlation over the last axis of `[C_in, L]` or `[N, C_in, L]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (batch, c_in, len) = match xs.as_slice() {
            [c, l] => (1, *c, *l),
            [n, c, l] => (*n, *c, *l),
            _ => {
                return Err(Error::shape(format!(
                    "conv1d input must be rank 2 or 3, got {xs:?}"
                )))
            }
        };
        let [c_out, w_in, kernel] = ws[..] else {
            return Err(Error::shape(format!(
                "conv1d weight must be [C_out, C_in, K], got {ws:?}"
            )));
        };
        if w_in != c_in {
            return Err(Error::shape(format!(
                "conv1d input has {c_in} channels but weight expects {w_in}"
            )));
        }
        if bs != [c_out] {
            return Err(Error::shape(format!(
                "conv1d bias {bs:?} does not match {c_out} outputs"
            )));
        }
        let out_len = kernels::conv1d_out_len(len, kernel, padding).ok_or_else(|| {
            Error::shape(format!("kernel {kernel} longer than padded input {len}"))
        })?;
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            kernel,
            len,
            out_len,
            pad: padding,
        };
        let y = kernels::conv1d_forward(self.data(x), self.data(w), self.data(b), dims);
        let shape = if xs.len() == 2 {
            vec![c_out, out_len]
        } else {
            vec![batch, c_out, out_len]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, rg, Op::Conv1d { x, w, b, dims }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu { x })
    }

    /// Windowed maximum over the last axis. Ties go to the first index.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| Error::shape("maxpool1d on a scalar"))?;
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid(
                "maxpool1d kernel and stride must be positive",
            ));
        }
        if kernel > len {
            return Err(Error::shape(format!(
                "maxpool1d kernel {kernel} exceeds length {len}"
            )));
        }
        let out_len = (len - kernel) / stride + 1;
        let rows = numel(&shape) / len;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            for o in 0..out_len {
                let start = o * stride;
                let mut best = start;
                for j in start + 1..start + kernel {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.push(row[best]);
                argmax.push((r * len + best) as u32);
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = out_len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::MaxPool { x, argmax }))
    }

    /// Mean over the last axis: `[C, L] -> [C]`, `[N, C, L] -> [N, C]`.
    pub fn global_avgpool1d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "global_avgpool1d needs rank >= 2, got {shape:?}"
            )));
        }
        let len = *shape.last().unwrap();
        let src = self.data(x);
        let out: Vec<f32> = src
            .chunks_exact(len)
            .map(|row| row.iter().sum::<f32>() / len as f32)
            .collect();
        let rg = self.rg(x);
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        Ok(self.push(value, rg, Op::GlobalAvgPool { x, len }))
    }

    /// Batch norm over `[N, C, L]` (statistics over N and L).
    ///
    /// In [`BnMode::Train`] the batch statistics are returned so the caller
    /// can update its running averages. In [`BnMode::Eval`] `running` must be
    /// supplied.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(Var, Option<BnStats>)> {
        let xs = self.shape(x).to_vec();
        let [n, c, l] = xs[..] else {
            return Err(Error::shape(format!(
                "batchnorm1d expects [N, C, L], got {xs:?}"
            )));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "batchnorm1d affine params must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.data(x);
        let count = n * l;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f32;
                    for b in 0..n {
                        s += src[(b * c + ch) * l..(b * c + ch + 1) * l]
                            .iter()
                            .sum::<f32>();
                    }
                    let m = s / count as f32;
                    let mut sq = 0.0f32;
                    for b in 0..n {
                        sq += src[(b * c + ch) * l..(b * c + ch + 1) * l]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<f32>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f32;
                }
                let stats = BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| {
                    Error::invalid("eval-mode batch norm needs running statistics")
                })?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape(
                        "running statistics length does not match channels",
                    ));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        if inv_std.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("batch norm variance + eps must be positive"));
        }
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0f32; src.len()];
        let mut out = vec![0.0f32; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * l;
                for j in base..base + l {
                    let h = (src[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + bt[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
            dims: (n, c, l),
        };
        Ok((self.push(Tensor::new(xs, out)?, rg, op), stats))
    }

    /// Affine map on `[F]` or `[N, F]` with weight `[O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, features) = match xs[..] {
            [f] => (1, f),
            [n, f] => (n, f),
            _ => {
                return Err(Error::shape(format!(
                    "linear input must be rank 1 or 2, got {xs:?}"
                )))
            }
        };
        let [outputs, wf] = ws[..] else {
            return Err(Error::shape(format!(
                "linear weight must be [O, F], got {ws:?}"
            )));
        };
        if wf != features {
            return Err(Error::shape(format!(
                "linear input has {features} features but weight expects {wf}"
            )));
        }
        if self.shape(b) != [outputs] {
            return Err(Error::shape("linear bias does not match outputs"));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(batch * outputs);
        for row in xd.chunks_exact(features) {
            for o in 0..outputs {
                out.push(bd[o] + kernels::dot(row, &wd[o * features..(o + 1) * features]));
            }
        }
        let shape = if xs.len() == 1 {
            vec![outputs]
        } else {
            vec![batch, outputs]
        };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let op = Op::Linear {
            x,
            w,
            b,
            batch,
            features,
            outputs,
        };
        Ok(self.push(Tensor::new(shape, out)?, rg, op))
    }

    /// `Σ_n w[y_n]·(−log softmax(logits_n)[y_n]) / Σ_n w[y_n]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[f32],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::shape(format!(
                "logits must be [N, K], got {shape:?}"
            )));
        };
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for batch of {n}",
                labels.len()
            )));
        }
        if class_weights.len() != k {
            return Err(Error::shape(format!(
                "{} class weights for {k} classes",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("class weights must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
        }
        let probs = softmax_rows(self.data(logits), k, 1.0);
        let sample_weights: Vec<f32> = labels.iter().map(|&y| class_weights[y]).collect();
        let total_weight: f32 = sample_weights.iter().sum();
        let mut loss = 0.0f32;
        for (i, &y) in labels.iter().enumerate() {
            let row = &self.data(logits)[i * k..(i + 1) * k];
            loss += sample_weights[i] * -log_softmax_at(row, y);
        }
        loss /= total_weight;
        let rg = self.rg(logits);
        let op = Op::WeightedCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
            sample_weights,
            total_weight,
        };
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, rg, op))
    }

    /// Batch mean of `KL(softmax(teacher/T) ‖ softmax(student/T))`.
    pub fn kl_distill(
        &mut self,
        student: Var,
        teacher_logits: &[f32],
        temperature: f32,
    ) -> Result<Var> {
        let shape = self.shape(student).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::shape(format!(
                "student logits must be [N, K], got {shape:?}"
            )));
        };
        if teacher_logits.len() != n * k {
            return Err(Error::shape("teacher logits do not match student logits"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("distillation temperature must be positive"));
        }
        let ps = softmax_rows(self.data(student), k, temperature);
        let pt = softmax_rows(teacher_logits, k, temperature);
        let mut loss = 0.0f32;
        for i in 0..n {
            let srow = &self.data(student)[i * k..(i + 1) * k];
            let trow = &teacher_logits[i * k..(i + 1) * k];
            let ls = log_softmax_row(srow, temperature);
            let lt = log_softmax_row(trow, temperature);
            for j in 0..k {
                let p = pt[i * k + j];
                if p > 0.0 {
                    loss += p * (lt[j] - ls[j]);
                }
            }
        }
        loss /= n as f32;
        let rg = self.rg(student);
        let op = Op::KlDistill {
            student,
            ps,
            pt,
            temperature,
            batch: n,
        };
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(p, q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, alpha: f32) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * alpha).collect(),
            requires_grad: false,
            grad: None,
        };
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale { x, alpha })
    }

    /// Contiguous sub-block, one range per axis.
    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let full = ranges
            .iter()
            .zip(self.shape(x))
            .all(|(r, &d)| r.start == 0 && r.end == d);
        if full && ranges.len() == self.shape(x).len() {
            return Ok(x);
        }
        let data = slice_copy(self.data(x), self.shape(x), ranges)?;
        let shape = ranges.iter().map(|r| r.len()).collect();
        let rg = self.rg(x);
        let op = Op::Slice {
            x,
            ranges: ranges.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, data)?, rg, op))
    }

    /// `clamp(round(x/scale), qmin, qmax)·scale` with a straight-through
    /// gradient inside `[qmin·scale, qmax·scale]` and zero outside.
    pub fn fake_quantize(&mut self, x: Var, scale: f32, qmin: f32, qmax: f32) -> Result<Var> {
        if !(scale > 0.0) || !scale.is_finite() || qmin > qmax {
            return Err(Error::invalid(format!(
                "bad quantizer scale {scale} range [{qmin}, {qmax}]"
            )));
        }
        let t = self.value(x);
        let mut pass = Vec::with_capacity(t.len());
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let q = v / scale;
                pass.push(q >= qmin && q <= qmax);
                q.round_ties_even().clamp(qmin, qmax) * scale
            })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::FakeQuant { x, pass }))
    }

    // ---- backward ----

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagates an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<f32>) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(Error::shape("seed gradient does not match output"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.visit_order.clear();
        if !self.rg(out) {
            return Ok(());
        }
        self.grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[idx].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.visit_order.push(idx);
            self.propagate(idx, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) -> Result<()> {
        let mut out: Vec<(Var, Vec<f32>)> = Vec::with_capacity(3);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Conv1d { x, w, b, dims } => {
                if self.rg(x) {
                    out.push((x, kernels::conv1d_backward_input(g, self.data(w), dims)));
                }
                let (dw, db) =
                    kernels::conv1d_backward_params(g, self.data(x), dims, self.rg(w), self.rg(b));
                if let Some(dw) = dw {
                    out.push((w, dw));
                }
                if let Some(db) = db {
                    out.push((b, db));
                }
            }
            &Op::Relu { x } => {
                let dx = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0f32; self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src as usize] += gv;
                }
                out.push((*x, dx));
            }
            &Op::GlobalAvgPool { x, len } => {
                let inv = 1.0 / len as f32;
                let mut dx = Vec::with_capacity(g.len() * len);
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv * inv, len));
                }
                out.push((x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
                dims: (n, c, l),
            } => {
                let (n, c, l) = (*n, *c, *l);
                let gd = self.data(*gamma);
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * l;
                        for j in base..base + l {
                            dbeta[ch] += g[j];
                            dgamma[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    let m = (n * l) as f32;
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * l;
                            let k = gd[ch] * inv_std[ch];
                            for j in base..base + l {
                                dx[j] = match mode {
                                    BnMode::Eval => k * g[j],
                                    BnMode::Train => {
                                        k / m * (m * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                    }
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            &Op::Linear {
                x,
                w,
                b,
                batch,
                features,
                outputs,
            } => {
                let (xd, wd) = (self.data(x), self.data(w));
                if self.rg(x) {
                    let mut dx = vec![0.0f32; batch * features];
                    for r in 0..batch {
                        let dxr = &mut dx[r * features..(r + 1) * features];
                        for o in 0..outputs {
                            let gv = g[r * outputs + o];
                            for (a, &wv) in
                                dxr.iter_mut().zip(&wd[o * features..(o + 1) * features])
                            {
                                *a += gv * wv;
                            }
                        }
                    }
                    out.push((x, dx));
                }
                if self.rg(w) {
                    let mut dw = vec![0.0f32; outputs * features];
                    for r in 0..batch {
                        let xr = &xd[r * features..(r + 1) * features];
                        for o in 0..outputs {
                            let gv = g[r * outputs + o];
                            for (a, &xv) in dw[o * features..(o + 1) * features].iter_mut().zip(xr)
                            {
                                *a += gv * xv;
                            }
                        }
                    }
                    out.push((w, dw));
                }
                if self.rg(b) {
                    let mut db = vec![0.0f32; outputs];
                    for r in 0..batch {
                        for o in 0..outputs {
                            db[o] += g[r * outputs + o];
                        }
                    }
                    out.push((b, db));
                }
            }
            Op::WeightedCrossEntropy {
                logits,
                probs,
                labels,
                sample_weights,
                total_weight,
            } => {
                let k = probs.len() / labels.len();
                let mut dl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let f = g[0] * sample_weights[i] / total_weight;
                    let row = &mut dl[i * k..(i + 1) * k];
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= f);
                }
                out.push((*logits, dl));
            }
            Op::KlDistill {
                student,
                ps,
                pt,
                temperature,
                batch,
            } => {
                let f = g[0] / (*temperature * *batch as f32);
                let ds = ps.iter().zip(pt).map(|(s, t)| (s - t) * f).collect();
                out.push((*student, ds));
            }
            &Op::Add { a, b } => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Scale { x, alpha } => {
                out.push((x, g.iter().map(|v| v * alpha).collect()));
            }
            Op::Slice { x, ranges } => {
                let shape = self.shape(*x).to_vec();
                let mut dx = vec![0.0f32; numel(&shape)];
                slice_scatter_add(&mut dx, &shape, ranges, g);
                out.push((*x, dx));
            }
            Op::FakeQuant { x, pass } => {
                let dx = g
                    .iter()
                    .zip(pass)
                    .map(|(&gv, &p)| if p { gv } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
        }
        for (v, gv) in out {
            self.accumulate(v, gv);
        }
        Ok(())
    }
}

fn softmax_rows(logits: &[f32], k: usize, temperature: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
        let e: Vec<f32> = row.iter().map(|&v| (v / temperature - m).exp()).collect();
        let s: f32 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    out
}

fn log_softmax_row(row: &[f32], temperature: f32) -> Vec<f32> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) / temperature;
    let lse = row
        .iter()
        .map(|&v| (v / temperature - m).exp())
        .sum::<f32>()
        .ln()
        + m;
    row.iter().map(|&v| v / temperature - lse).collect()
}

fn log_softmax_at(row: &[f32], idx: usize) -> f32 {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln() + m;
    row[idx] - lse
}

fn check_ranges(shape: &[usize], ranges: &[Range<usize>]) -> Result<()> {
    if ranges.len() != shape.len() {
        return Err(Error::shape(format!(
            "{} ranges for rank {}",
            ranges.len(),
            shape.len()
        )));
    }
    for (r, &d) in ranges.iter().zip(shape) {
        if r.start >= r.end || r.end > d {
            return Err(Error::shape(format!("range {r:?} invalid for extent {d}")));
        }
    }
    Ok(())
}

/// Visits every contiguous last-axis run of the block, passing
/// `(source offset, destination offset, run length)`.
fn for_each_run(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let run = ranges[rank - 1].len();
    let outer: Vec<usize> = ranges[..rank - 1].iter().map(|r| r.len()).collect();
    let count: usize = outer.iter().product();
    let mut idx = vec![0usize; rank - 1];
    for dst_run in 0..count {
        let mut src = ranges[rank - 1].start;
        for d in 0..rank - 1 {
            src += (ranges[d].start + idx[d]) * strides[d];
        }
        f(src, dst_run * run, run);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < outer[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn slice_copy(
    data: &[f32],
    shape: &[usize],
    ranges: &[Range<usize>],
) -> Result<Vec<f32>> {
    check_ranges(shape, ranges)?;
    let mut out = vec![0.0f32; ranges.iter().map(|r| r.len()).product()];
    for_each_run(shape, ranges, |s, d, n| {
        out[d..d + n].copy_from_slice(&data[s..s + n])
    });
    Ok(out)
}

fn slice_scatter_add(dst: &mut [f32], shape: &[usize], ranges: &[Range<usize>], src: &[f32]) {
    for_each_run(shape, ranges, |s, d, n| {
        dst[s..s + n]
            .iter_mut()
            .zip(&src[d..d + n])
            .for_each(|(a, b)| *a += b);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_same_padding_example() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 3], &[1., 0., -1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 4]);
        assert_eq!(tape.data(y), &[-2., -2., -2., 3.]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 5], &[0.3, -1., 2., 7., 0.]));
        let w = tape.constant(t(&[1, 1, 3], &[0., 1., 0.]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv1d_full_width_shape() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[128, 128]));
        let w = tape.constant(Tensor::zeros(&[128, 128, 5]));
        let b = tape.constant(Tensor::zeros(&[128]));
        let y = tape.conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[128, 128]);
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.conv1d(x, w, b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1., 0., 2.]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0., 0., 2.]);
        tape.backward_with(y, vec![1., 1., 1.]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 0., 1.]);
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 4], &[1., 3., 2., 4.]).with_grad());
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[3., 4.]);

        let c = tape.leaf(&t(&[1, 4], &[5.; 4]).with_grad());
        let yc = tape.maxpool1d(c, 2, 2).unwrap();
        assert_eq!(tape.data(yc), &[5., 5.]);
        tape.backward_with(yc, vec![1., 1.]).unwrap();
        // ties route to the first index of each window
        assert_eq!(tape.grad(c).unwrap(), &[1., 0., 1., 0.]);

        let long = tape.constant(Tensor::zeros(&[3, 128]));
        let yl = tape.maxpool1d(long, 2, 2).unwrap();
        assert_eq!(tape.shape(yl), &[3, 64]);

        let short = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.maxpool1d(short, 3, 1).is_err());
    }

    #[test]
    fn global_avgpool_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[2., 4.]).with_grad());
        let y = tape.global_avgpool1d(x).unwrap();
        assert_eq!(tape.data(y), &[3.]);
        tape.backward_with(y, vec![1.]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.5, 0.5]);

        let one = tape.constant(t(&[2, 1], &[7., -1.]));
        let y1 = tape.global_avgpool1d(one).unwrap();
        assert_eq!(tape.data(y1), &[7., -1.]);
    }

    #[test]
    fn batchnorm_eval_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1., -2., 3., 0.5, 0., 9.]));
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let (y, stats) = tape
            .batchnorm1d(x, g, b, BnMode::Eval, Some((&[0., 0.], &[1., 1.])), 0.0)
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24)
            .map(|i| (i as f32 * 0.37).sin() * 3.0 + 5.0)
            .collect();
        let x = tape.constant(t(&[3, 2, 4], &data));
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let (y, stats) = tape
            .batchnorm1d(x, g, b, BnMode::Train, None, 1e-5)
            .unwrap();
        assert_eq!(stats.unwrap().count, 12);
        let yd = tape.data(y);
        for ch in 0..2 {
            let vals: Vec<f32> = (0..3)
                .flat_map(|n| yd[(n * 2 + ch) * 4..(n * 2 + ch + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f32>() / 12.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 12.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_identity_and_shape_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.constant(t(&[3, 3], &eye));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1., 2., 3.]);
        let w2 = tape.constant(Tensor::zeros(&[2, 4]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.linear(x, w2, b2).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[4, 12]));
        let loss = tape
            .weighted_cross_entropy(logits, &[0, 3, 7, 11], &[1.0; 12])
            .unwrap();
        assert!((tape.data(loss)[0] - 12f32.ln()).abs() < 1e-6);
        assert!((12f32.ln() - 2.4849).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_confident_correct_is_zero() {
        let mut tape = Tape::new();
        let mut l = vec![0.0; 12];
        l[5] = 200.0;
        let logits = tape.constant(t(&[1, 12], &l));
        let loss = tape
            .weighted_cross_entropy(logits, &[5], &[1.0; 12])
            .unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_class_weight_scales_term() {
        // two samples: one of class 0 (weight 0.25) and one of class 1 (weight 1)
        let logits_data = [0.3, -0.2, 1.0, 0.1, 0.5, -1.0];
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[2, 3], &logits_data));
        let loss = tape
            .weighted_cross_entropy(logits, &[0, 1], &[0.25, 1.0, 1.0])
            .unwrap();
        let nll = |row: &[f32], y: usize| -log_softmax_at(row, y);
        let expected = (0.25 * nll(&logits_data[0..3], 0) + nll(&logits_data[3..6], 1)) / 1.25;
        assert!((tape.data(loss)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 12]));
        assert!(tape
            .weighted_cross_entropy(logits, &[12], &[1.0; 12])
            .is_err());
        assert!(tape
            .weighted_cross_entropy(logits, &[0], &[0.0; 12])
            .is_err());
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let s = [0.2, -1.0, 3.0, 0.0, 0.7, 0.7];
        let logits = tape.constant(t(&[2, 3], &s));
        let kl = tape.kl_distill(logits, &s, 2.0).unwrap();
        assert!(tape.data(kl)[0].abs() < 1e-6);
    }

    #[test]
    fn fake_quantize_straight_through() {
        let mut tape = Tape::new();
        let scale = 1.0 / 128.0;
        let x = tape.leaf(&t(&[3], &[0.25, 10.0 * 127.0 * scale, -0.5]).with_grad());
        let y = tape.fake_quantize(x, scale, -128.0, 127.0).unwrap();
        assert_eq!(tape.data(y), &[0.25, 127.0 * scale, -0.5]);
        tape.backward_with(y, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn slice_gradient_scatters_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 3, 4]).with_grad());
        let s = tape.slice(x, &[0..1, 1..3, 1..3]).unwrap();
        assert_eq!(tape.shape(s), &[1, 2, 2]);
        tape.backward_with(s, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 4);
        assert_eq!(g[4 + 1], 1.0);
        assert_eq!(g[4 + 2], 2.0);
        assert_eq!(g[8 + 1], 3.0);
        assert_eq!(g[8 + 2], 4.0);
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 4], &[1., -2., 3., 4.]).with_grad());
        let a = tape.relu(x);
        let b = tape.scale(a, 2.0);
        let c = tape.global_avgpool1d(b).unwrap();
        let d = tape.global_avgpool1d(c).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(
            tape.last_backward_order(),
            &[d.index(), c.index(), b.index(), a.index()]
        );
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn inference_tape_matches_recording_tape() {
        let xs = t(
            &[2, 3, 6],
            &(0..36).map(|v| (v as f32 * 0.7).cos()).collect::<Vec<_>>(),
        );
        let ws = t(
            &[4, 3, 3],
            &(0..36).map(|v| (v as f32 * 0.3).sin()).collect::<Vec<_>>(),
        )
        .with_grad();
        let bs = t(&[4], &[0.1, 0.2, -0.3, 0.0]).with_grad();
        let run = |tape: &mut Tape| {
            let x = tape.leaf(&xs);
            let w = tape.leaf(&ws);
            let b = tape.leaf(&bs);
            let y = tape.conv1d(x, w, b, 1).unwrap();
            let y = tape.relu(y);
            tape.data(y).to_vec()
        };
        assert_eq!(run(&mut Tape::new()), run(&mut Tape::inference()));
    }
}
