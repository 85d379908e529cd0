//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes are appended in forward order, so walking the tape backwards is a
//! valid reverse topological order. Each training step builds a fresh tape;
//! parameters enter as gradient-requiring leaves and their gradients are
//! read back after `backward`.

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::ops::{BatchStats, RunningStats};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum OpRecord<T> {
    Leaf,
    Conv2d {
        x: VarId,
        k: VarId,
        stride: usize,
        padding: usize,
    },
    ConvT2d {
        x: VarId,
        k: VarId,
        stride: usize,
        padding: usize,
    },
    BnTrain {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    BnEval {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        x: VarId,
    },
    LeakyRelu {
        x: VarId,
        slope: T,
    },
    Sigmoid {
        x: VarId,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<usize>,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        c: T,
    },
    ConcatChannels {
        a: VarId,
        b: VarId,
    },
    RowSelect {
        table: VarId,
        rows: Vec<usize>,
    },
    Linear {
        x: VarId,
        w: VarId,
    },
    ContractChannels {
        features: VarId,
        embeddings: VarId,
    },
    PadHw {
        x: VarId,
    },
    CropHw {
        x: VarId,
        rows: usize,
        cols: usize,
    },
    Bce {
        pred: VarId,
        target: Tensor<T>,
    },
    SumWeighted {
        x: VarId,
        weights: Tensor<T>,
    },
    Reshape {
        x: VarId,
    },
    ClampUnit {
        x: VarId,
        lo: T,
        hi: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: OpRecord<T>,
}

/// The tape itself. All forward ops are methods and append one node.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, OpRecord::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: OpRecord<T>) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // -- forward ops --------------------------------------------------------

    pub fn conv2d(&mut self, x: VarId, k: VarId, stride: usize, padding: usize) -> Result<VarId> {
        let out = ops::conv2d(self.value(x), self.value(k), stride, padding)?;
        let rg = self.needs(x) || self.needs(k);
        Ok(self.push(out, rg, OpRecord::Conv2d { x, k, stride, padding }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        k: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let out = ops::conv_transpose2d(self.value(x), self.value(k), stride, padding)?;
        let rg = self.needs(x) || self.needs(k);
        Ok(self.push(out, rg, OpRecord::ConvT2d { x, k, stride, padding }))
    }

    /// Train-mode batch norm; returns the output and the batch statistics so
    /// the caller can update its running buffers.
    pub fn batchnorm2d_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
    ) -> Result<(VarId, BatchStats<T>)> {
        let (out, stats) = ops::batchnorm2d_train(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let id = self.push(
            out,
            rg,
            OpRecord::BnTrain {
                x,
                gamma,
                beta,
                mean: stats.mean.clone(),
                inv_std: stats.inv_std.clone(),
            },
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: &RunningStats<T>,
    ) -> Result<VarId> {
        let out = ops::batchnorm2d_eval(self.value(x), self.value(gamma), self.value(beta), running)?;
        let eps = T::from_f64c(ops::BN_EPS);
        let inv_std: Vec<T> = running
            .var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            rg,
            OpRecord::BnEval {
                x,
                gamma,
                beta,
                mean: running.mean.clone(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.needs(x);
        self.push(out, rg, OpRecord::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let s = T::from_f64c(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.needs(x);
        self.push(out, rg, OpRecord::LeakyRelu { x, slope: s })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out = self
            .value(x)
            .map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.needs(x);
        self.push(out, rg, OpRecord::Sigmoid { x })
    }

    pub fn maxpool2d(&mut self, x: VarId, kernel: usize, stride: usize) -> Result<VarId> {
        let (out, argmax) = ops::maxpool2d(self.value(x), kernel, stride)?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, OpRecord::MaxPool { x, argmax }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let out = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        );
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, OpRecord::Add { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let out = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        );
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, OpRecord::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let cv = T::from_f64c(c);
        let out = self.value(x).map(|v| v * cv);
        let rg = self.needs(x);
        self.push(out, rg, OpRecord::Scale { x, c: cv })
    }

    /// Concatenate along the channel axis: `[N,C1,H,W] ++ [N,C2,H,W]`.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::shape(
                "concat_channels",
                format!("{sa:?}"),
                format!("{sb:?}"),
            ));
        }
        let (n, c1, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let c2 = sb[1];
        let mut out = Tensor::zeros(&[n, c1 + c2, h, w]);
        {
            let va = self.value(a).data();
            let vb = self.value(b).data();
            let y = out.data_mut();
            let plane = h * w;
            for ni in 0..n {
                let dst = ni * (c1 + c2) * plane;
                y[dst..dst + c1 * plane]
                    .copy_from_slice(&va[ni * c1 * plane..(ni + 1) * c1 * plane]);
                y[dst + c1 * plane..dst + (c1 + c2) * plane]
                    .copy_from_slice(&vb[ni * c2 * plane..(ni + 1) * c2 * plane]);
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, rg, OpRecord::ConcatChannels { a, b }))
    }

    /// Gather rows of a `[R,K]` table into `[rows.len(), K]`.
    pub fn row_select(&mut self, table: VarId, rows: &[usize]) -> Result<VarId> {
        let shape = self.value(table).shape();
        if shape.len() != 2 {
            return Err(Error::shape("row_select", "2-d table", format!("{shape:?}")));
        }
        let (r, k) = (shape[0], shape[1]);
        for &row in rows {
            if row >= r {
                return Err(Error::shape(
                    "row_select",
                    format!("row < {r}"),
                    format!("{row}"),
                ));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * k);
        for &row in rows {
            data.extend_from_slice(&self.value(table).data()[row * k..(row + 1) * k]);
        }
        let out = Tensor::from_vec(&[rows.len(), k], data);
        let rg = self.needs(table);
        Ok(self.push(
            out,
            rg,
            OpRecord::RowSelect {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `x [n, in] * w^T [out, in] -> [n, out]`.
    pub fn linear(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("{sx:?}"), format!("{sw:?}")));
        }
        let (n, k_in) = (sx[0], sx[1]);
        let k_out = sw[0];
        let mut out = Tensor::zeros(&[n, k_out]);
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let y = out.data_mut();
            for ni in 0..n {
                for oi in 0..k_out {
                    let mut acc = T::zero();
                    for ii in 0..k_in {
                        acc += xd[ni * k_in + ii] * wd[oi * k_in + ii];
                    }
                    y[ni * k_out + oi] = acc;
                }
            }
        }
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, rg, OpRecord::Linear { x, w }))
    }

    /// Contract a `[N,K,H,W]` feature map with per-source embeddings
    /// `[N,S,K]` into `[N,S,H,W]` logits.
    pub fn contract_channels(&mut self, features: VarId, embeddings: VarId) -> Result<VarId> {
        let (sf, se) = (self.value(features).shape(), self.value(embeddings).shape());
        if sf.len() != 4 || se.len() != 3 || sf[0] != se[0] || sf[1] != se[2] {
            return Err(Error::shape(
                "contract_channels",
                format!("features {sf:?}"),
                format!("embeddings {se:?}"),
            ));
        }
        let (n, k, h, w) = (sf[0], sf[1], sf[2], sf[3]);
        let s = se[1];
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, s, h, w]);
        {
            let f = self.value(features).data();
            let e = self.value(embeddings).data();
            let y = out.data_mut();
            for ni in 0..n {
                for si in 0..s {
                    let ybase = (ni * s + si) * plane;
                    for ki in 0..k {
                        let ev = e[(ni * s + si) * k + ki];
                        if ev == T::zero() {
                            continue;
                        }
                        let fbase = (ni * k + ki) * plane;
                        for p in 0..plane {
                            y[ybase + p] += ev * f[fbase + p];
                        }
                    }
                }
            }
        }
        let rg = self.needs(features) || self.needs(embeddings);
        Ok(self.push(out, rg, OpRecord::ContractChannels { features, embeddings }))
    }

    /// Zero-pad the bottom/right of `[N,C,H,W]` up to `[N,C,H2,W2]`.
    pub fn pad_hw(&mut self, x: VarId, h2: usize, w2: usize) -> Result<VarId> {
        let shape = self.value(x).shape();
        if shape.len() != 4 || shape[2] > h2 || shape[3] > w2 {
            return Err(Error::shape(
                "pad_hw",
                format!("target at least {shape:?}"),
                format!("{h2}x{w2}"),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        {
            let xd = self.value(x).data();
            let y = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..h {
                        let src = ((ni * c + ci) * h + hi) * w;
                        let dst = ((ni * c + ci) * h2 + hi) * w2;
                        y[dst..dst + w].copy_from_slice(&xd[src..src + w]);
                    }
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, rg, OpRecord::PadHw { x }))
    }

    /// Keep the top-left `rows x cols` region of `[N,C,H,W]`.
    pub fn crop_hw(&mut self, x: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let shape = self.value(x).shape();
        if shape.len() != 4 || rows > shape[2] || cols > shape[3] {
            return Err(Error::shape(
                "crop_hw",
                format!("{shape:?}"),
                format!("{rows}x{cols}"),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = Tensor::zeros(&[n, c, rows, cols]);
        {
            let xd = self.value(x).data();
            let y = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..rows {
                        let src = ((ni * c + ci) * h + hi) * w;
                        let dst = ((ni * c + ci) * rows + hi) * cols;
                        y[dst..dst + cols].copy_from_slice(&xd[src..src + cols]);
                    }
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, rg, OpRecord::CropHw { x, rows, cols }))
    }

    /// Mean binary cross entropy against a constant target; scalar output.
    pub fn bce_loss(&mut self, pred: VarId, target: Tensor<T>) -> Result<VarId> {
        let loss = ops::bce_loss(self.value(pred), &target)?;
        let rg = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            OpRecord::Bce { pred, target },
        ))
    }

    /// Weighted sum against a constant weight tensor; scalar output. Used to
    /// reduce arbitrary outputs to a scalar in gradient checks.
    pub fn sum_weighted(&mut self, x: VarId, weights: Tensor<T>) -> Result<VarId> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape(
                "sum_weighted",
                format!("{:?}", self.value(x).shape()),
                format!("{:?}", weights.shape()),
            ));
        }
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            OpRecord::SumWeighted { x, weights },
        ))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} elements", self.value(x).numel()),
                format!("{shape:?}"),
            ));
        }
        let out = Tensor::from_vec(shape, self.value(x).data().to_vec());
        let rg = self.needs(x);
        Ok(self.push(out, rg, OpRecord::Reshape { x }))
    }

    /// Clamp into [lo, hi]; gradient passes through only where unclamped.
    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> VarId {
        let lov = T::from_f64c(lo);
        let hiv = T::from_f64c(hi);
        let out = self.value(x).map(|v| v.max(lov).min(hiv));
        let rg = self.needs(x);
        self.push(out, rg, OpRecord::ClampUnit { x, lo: lov, hi: hiv })
    }

    // -- backward -----------------------------------------------------------

    fn accumulate(&mut self, id: VarId, t: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gv, tv) in g.data_mut().iter_mut().zip(t.data()) {
                    *gv += *tv;
                }
            }
            slot @ None => *slot = Some(t),
        }
    }

    /// Run reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, OpRecord::Leaf);
            let g = self.nodes[idx].grad.take().unwrap();
            let updates = self.parent_grads(idx, &op, &g)?;
            for (id, t) in updates {
                self.accumulate(id, t);
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    /// Gradients flowing to the parents of node `idx` given its grad `g`.
    fn parent_grads(
        &self,
        idx: usize,
        op: &OpRecord<T>,
        g: &Tensor<T>,
    ) -> Result<Vec<(VarId, Tensor<T>)>> {
        let mut out = Vec::new();
        match op {
            OpRecord::Leaf => {}
            OpRecord::Conv2d { x, k, stride, padding } => {
                let (gin, gk) = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    *stride,
                    *padding,
                    self.needs(*x),
                )?;
                if self.needs(*x) {
                    out.push((*x, gin));
                }
                if self.needs(*k) {
                    out.push((*k, gk));
                }
            }
            OpRecord::ConvT2d { x, k, stride, padding } => {
                let (gin, gk) = ops::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    *stride,
                    *padding,
                    self.needs(*x),
                )?;
                if self.needs(*x) {
                    out.push((*x, gin));
                }
                if self.needs(*k) {
                    out.push((*k, gk));
                }
            }
            OpRecord::BnTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.value(*x).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let m = T::from_usize(n * h * w).unwrap();
                let xd = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let gd = g.data();

                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gsum = vec![T::zero(); c];
                let mut gxhat_sum = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            let xhat = (xd[base + p] - mean[ci]) * inv_std[ci];
                            let gv = gd[base + p];
                            dgamma[ci] += gv * xhat;
                            dbeta[ci] += gv;
                            gsum[ci] += gv;
                            gxhat_sum[ci] += gv * xhat;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gin = Tensor::zeros(shape);
                    let gi = gin.data_mut();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * h * w;
                            let scale = gm[ci] * inv_std[ci];
                            for p in 0..h * w {
                                let xhat = (xd[base + p] - mean[ci]) * inv_std[ci];
                                gi[base + p] = scale
                                    * (gd[base + p]
                                        - gsum[ci] / m
                                        - xhat * gxhat_sum[ci] / m);
                            }
                        }
                    }
                    out.push((*x, gin));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, Tensor::from_vec(&[c], dgamma)));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::from_vec(&[c], dbeta)));
                }
            }
            OpRecord::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.value(*x).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let xd = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gin = Tensor::zeros(shape);
                let gi = gin.data_mut();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            let xhat = (xd[base + p] - mean[ci]) * inv_std[ci];
                            dgamma[ci] += gd[base + p] * xhat;
                            dbeta[ci] += gd[base + p];
                            gi[base + p] = gd[base + p] * gm[ci] * inv_std[ci];
                        }
                    }
                }
                if self.needs(*x) {
                    out.push((*x, gin));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, Tensor::from_vec(&[c], dgamma)));
                }
                if self.needs(*beta) {
                    out.push((*beta, Tensor::from_vec(&[c], dbeta)));
                }
            }
            OpRecord::Relu { x } => {
                if self.needs(*x) {
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data)));
                }
            }
            OpRecord::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *slope })
                        .collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data)));
                }
            }
            OpRecord::Sigmoid { x } => {
                if self.needs(*x) {
                    let data = self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data)));
                }
            }
            OpRecord::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let mut gin = Tensor::zeros(self.value(*x).shape());
                    let gi = gin.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g.data()[o];
                    }
                    out.push((*x, gin));
                }
            }
            OpRecord::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            OpRecord::Mul { a, b } => {
                if self.needs(*a) {
                    let data = self
                        .value(*b)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&bv, &gv)| bv * gv)
                        .collect();
                    out.push((*a, Tensor::from_vec(g.shape(), data)));
                }
                if self.needs(*b) {
                    let data = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&av, &gv)| av * gv)
                        .collect();
                    out.push((*b, Tensor::from_vec(g.shape(), data)));
                }
            }
            OpRecord::Scale { x, c } => {
                if self.needs(*x) {
                    out.push((*x, g.map(|gv| gv * *c)));
                }
            }
            OpRecord::ConcatChannels { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, c1, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let c2 = sb[1];
                let plane = h * w;
                let gd = g.data();
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(sa);
                    let gad = ga.data_mut();
                    for ni in 0..n {
                        let src = ni * (c1 + c2) * plane;
                        gad[ni * c1 * plane..(ni + 1) * c1 * plane]
                            .copy_from_slice(&gd[src..src + c1 * plane]);
                    }
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(sb);
                    let gbd = gb.data_mut();
                    for ni in 0..n {
                        let src = ni * (c1 + c2) * plane + c1 * plane;
                        gbd[ni * c2 * plane..(ni + 1) * c2 * plane]
                            .copy_from_slice(&gd[src..src + c2 * plane]);
                    }
                    out.push((*b, gb));
                }
            }
            OpRecord::RowSelect { table, rows } => {
                if self.needs(*table) {
                    let k = self.value(*table).shape()[1];
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    let gtd = gt.data_mut();
                    for (i, &row) in rows.iter().enumerate() {
                        for kk in 0..k {
                            gtd[row * k + kk] += g.data()[i * k + kk];
                        }
                    }
                    out.push((*table, gt));
                }
            }
            OpRecord::Linear { x, w } => {
                let (sx, sw) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, k_in) = (sx[0], sx[1]);
                let k_out = sw[0];
                let gd = g.data();
                if self.needs(*x) {
                    let mut gx = Tensor::zeros(sx);
                    let gxd = gx.data_mut();
                    let wd = self.value(*w).data();
                    for ni in 0..n {
                        for ii in 0..k_in {
                            let mut acc = T::zero();
                            for oi in 0..k_out {
                                acc += gd[ni * k_out + oi] * wd[oi * k_in + ii];
                            }
                            gxd[ni * k_in + ii] = acc;
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = Tensor::zeros(sw);
                    let gwd = gw.data_mut();
                    let xd = self.value(*x).data();
                    for oi in 0..k_out {
                        for ii in 0..k_in {
                            let mut acc = T::zero();
                            for ni in 0..n {
                                acc += gd[ni * k_out + oi] * xd[ni * k_in + ii];
                            }
                            gwd[oi * k_in + ii] = acc;
                        }
                    }
                    out.push((*w, gw));
                }
            }
            OpRecord::ContractChannels { features, embeddings } => {
                let sf = self.value(*features).shape();
                let se = self.value(*embeddings).shape();
                let (n, k, h, w) = (sf[0], sf[1], sf[2], sf[3]);
                let s = se[1];
                let plane = h * w;
                let gd = g.data();
                if self.needs(*features) {
                    let mut gf = Tensor::zeros(sf);
                    let gfd = gf.data_mut();
                    let ed = self.value(*embeddings).data();
                    for ni in 0..n {
                        for si in 0..s {
                            let gbase = (ni * s + si) * plane;
                            for ki in 0..k {
                                let ev = ed[(ni * s + si) * k + ki];
                                if ev == T::zero() {
                                    continue;
                                }
                                let fbase = (ni * k + ki) * plane;
                                for p in 0..plane {
                                    gfd[fbase + p] += ev * gd[gbase + p];
                                }
                            }
                        }
                    }
                    out.push((*features, gf));
                }
                if self.needs(*embeddings) {
                    let mut ge = Tensor::zeros(se);
                    let ged = ge.data_mut();
                    let fd = self.value(*features).data();
                    for ni in 0..n {
                        for si in 0..s {
                            let gbase = (ni * s + si) * plane;
                            for ki in 0..k {
                                let fbase = (ni * k + ki) * plane;
                                let mut acc = T::zero();
                                for p in 0..plane {
                                    acc += gd[gbase + p] * fd[fbase + p];
                                }
                                ged[(ni * s + si) * k + ki] = acc;
                            }
                        }
                    }
                    out.push((*embeddings, ge));
                }
            }
            OpRecord::PadHw { x } => {
                if self.needs(*x) {
                    let sx = self.value(*x).shape();
                    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let sg = g.shape();
                    let (h2, w2) = (sg[2], sg[3]);
                    let mut gx = Tensor::zeros(sx);
                    let gxd = gx.data_mut();
                    let gd = g.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..h {
                                let src = ((ni * c + ci) * h2 + hi) * w2;
                                let dst = ((ni * c + ci) * h + hi) * w;
                                gxd[dst..dst + w].copy_from_slice(&gd[src..src + w]);
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            OpRecord::CropHw { x, rows, cols } => {
                if self.needs(*x) {
                    let sx = self.value(*x).shape();
                    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let mut gx = Tensor::zeros(sx);
                    let gxd = gx.data_mut();
                    let gd = g.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            for hi in 0..*rows {
                                let src = ((ni * c + ci) * rows + hi) * cols;
                                let dst = ((ni * c + ci) * h + hi) * w;
                                gxd[dst..dst + cols].copy_from_slice(&gd[src..src + cols]);
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            OpRecord::Bce { pred, target } => {
                if self.needs(*pred) {
                    let mut gp = ops::bce_loss_backward(self.value(*pred), target);
                    let gs = g.data()[0];
                    for v in gp.data_mut() {
                        *v *= gs;
                    }
                    out.push((*pred, gp));
                }
            }
            OpRecord::SumWeighted { x, weights } => {
                if self.needs(*x) {
                    let gs = g.data()[0];
                    out.push((*x, weights.map(|wv| wv * gs)));
                }
            }
            OpRecord::Reshape { x } => {
                if self.needs(*x) {
                    out.push((
                        *x,
                        Tensor::from_vec(self.value(*x).shape(), g.data().to_vec()),
                    ));
                }
            }
            OpRecord::ClampUnit { x, lo, hi } => {
                if self.needs(*x) {
                    let data = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v < *lo || v > *hi { T::zero() } else { gv })
                        .collect();
                    out.push((*x, Tensor::from_vec(g.shape(), data)));
                }
            }
        }
        Ok(out)
    }
}
