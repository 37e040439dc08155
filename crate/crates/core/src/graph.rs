//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records each operation as a node holding its output value and the
//! ids of its inputs. [`Tape::backward`] walks the tape once in reverse,
//! accumulating vector-Jacobian products into dense per-node gradient
//! buffers. Ops are composite on purpose (linear, conv, batchnorm, softmax,
//! entropy reductions) so each gets a bespoke, numerically explicit adjoint
//! instead of a chain of primitive ones.
//!
//! The tape owns values only. Model parameters live outside it; they enter
//! as leaf nodes and their gradients are read back out of the
//! [`TapeGrads`] returned by `backward`.

use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Normalization layout: `outer` batch entries, `feat` normalized features,
/// `inner` spatial positions per entry (1 for flat activations).
#[derive(Debug, Clone, Copy)]
pub struct BnLayout {
    pub outer: usize,
    pub feat: usize,
    pub inner: usize,
}

/// Per-feature batch statistics computed by a training-mode batchnorm node.
///
/// `var` is the population variance (divisor `M`), matching the statistics
/// used for the normalization itself; callers converting to running
/// statistics apply the unbiased correction themselves.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Reshape {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        layout: BnLayout,
    },
    SoftmaxRows {
        x: NodeId,
        tau: f64,
    },
    CosineToAnchors {
        z: NodeId,
        anchors: Vec<f64>,
        anchor_norms: Vec<f64>,
        dim: usize,
    },
    MeanRowEntropy {
        p: NodeId,
    },
    EntropyOfMeanRow {
        p: NodeId,
    },
    CrossEntropyOneHot {
        p: NodeId,
        labels: Vec<usize>,
    },
    CrossEntropyRows {
        target: NodeId,
        pred: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Gradient buffers produced by one backward pass, aligned with tape nodes.
pub struct TapeGrads {
    grads: Vec<Vec<f64>>,
}

impl TapeGrads {
    /// Gradient buffer of a node.
    pub fn of(&self, id: NodeId) -> &[f64] {
        &self.grads[id.0]
    }
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Shape of a node.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// True when every recorded value on the tape is finite. Overflow deep
    /// inside a network can be masked downstream (a rectifier zeroing NaN,
    /// clamped logarithms), so callers that must detect it inspect every
    /// node, not just the output.
    pub fn values_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.data.iter().all(|v| v.is_finite()))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { shape, data, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input leaf. Leaves receive gradients but have no inputs.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tape leaf",
                format!("{:?}", shape),
                format!("{} elements", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf))
    }

    /// Records a constant: same as a leaf, gradients flow in and stop.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data)
    }

    /// Copies a node's current value into a fresh leaf, cutting it off from
    /// the recorded history. Gradients do not flow past the copy.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let shape = self.nodes[id.0].shape.clone();
        let data = self.nodes[id.0].data.clone();
        self.push(shape, data, Op::Leaf)
    }

    /// Reinterprets a node's buffer under a new shape of equal length.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if len != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?}", shape),
                format!("{:?}", self.nodes[x.0].shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(shape, data, Op::Reshape { x }))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.push(shape, data, Op::Relu { x })
    }

    /// Affine map of row vectors: `y = x · wᵀ + b`.
    ///
    /// `x` is `[n, d_in]`, `w` is `[d_out, d_in]`, `b` is `[d_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::shape(
                "linear",
                "x [n, d_in], w [d_out, d_in], b [d_out]".to_string(),
                format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            ));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut data = vec![0.0; n * d_out];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..n {
                for o in 0..d_out {
                    let mut acc = bd[o];
                    let xr = &xd[i * d_in..(i + 1) * d_in];
                    let wr = &wd[o * d_in..(o + 1) * d_in];
                    for k in 0..d_in {
                        acc += xr[k] * wr[k];
                    }
                    data[i * d_out + o] = acc;
                }
            }
        }
        Ok(self.push(vec![n, d_out], data, Op::Linear { x, w, b }))
    }

    /// 3×3 convolution, stride 1, zero padding 1, so spatial size is kept.
    ///
    /// `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, 3, 3]`, `b` is
    /// `[c_out]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let bs = self.nodes[b.0].shape.clone();
        let ok = xs.len() == 4
            && ws.len() == 4
            && bs.len() == 1
            && ws[1] == xs[1]
            && ws[2] == 3
            && ws[3] == 3
            && bs[0] == ws[0];
        if !ok {
            return Err(Error::shape(
                "conv2d",
                "x [n, c_in, h, w], w [c_out, c_in, 3, 3], b [c_out]".to_string(),
                format!("x {:?}, w {:?}, b {:?}", xs, ws, bs),
            ));
        }
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let c_out = ws[0];
        let mut data = vec![0.0; n * c_out * h * wd];
        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[w.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..n {
                for o in 0..c_out {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = bd[o];
                            for c in 0..c_in {
                                for dy in 0..3usize {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..3usize {
                                        let sx = xx as isize + dx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        let xi = ((i * c_in + c) * h + sy as usize) * wd
                                            + sx as usize;
                                        let ki = ((o * c_in + c) * 3 + dy) * 3 + dx;
                                        acc += xd[xi] * kd[ki];
                                    }
                                }
                            }
                            data[((i * c_out + o) * h + y) * wd + xx] = acc;
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![n, c_out, h, wd], data, Op::Conv2d { x, w, b }))
    }

    fn bn_layout(&self, x: NodeId) -> Result<BnLayout> {
        let xs = &self.nodes[x.0].shape;
        match xs.len() {
            2 => Ok(BnLayout {
                outer: xs[0],
                feat: xs[1],
                inner: 1,
            }),
            4 => Ok(BnLayout {
                outer: xs[0],
                feat: xs[1],
                inner: xs[2] * xs[3],
            }),
            _ => Err(Error::shape(
                "batchnorm",
                "[n, c] or [n, c, h, w]".to_string(),
                format!("{:?}", xs),
            )),
        }
    }

    fn bn_check_params(&self, gamma: NodeId, beta: NodeId, feat: usize) -> Result<()> {
        if self.nodes[gamma.0].data.len() != feat || self.nodes[beta.0].data.len() != feat {
            return Err(Error::shape(
                "batchnorm scale/shift",
                format!("[{feat}]"),
                format!(
                    "gamma {:?}, beta {:?}",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            ));
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
        layout: BnLayout,
    ) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let mut data = vec![0.0; self.nodes[x.0].data.len()];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for o in 0..layout.outer {
                for f in 0..layout.feat {
                    let base = (o * layout.feat + f) * layout.inner;
                    for k in 0..layout.inner {
                        let xhat = (xd[base + k] - mean[f]) * inv_std[f];
                        data[base + k] = gd[f] * xhat + bd[f];
                    }
                }
            }
        }
        self.push(
            shape,
            data,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                layout,
            },
        )
    }

    /// Batch normalization using the batch's own statistics (population
    /// variance). Returns the output node plus the statistics so the caller
    /// can fold them into running buffers. Requires at least two batch
    /// entries.
    pub fn batchnorm_batch(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let layout = self.bn_layout(x)?;
        self.bn_check_params(gamma, beta, layout.feat)?;
        if layout.outer < 2 {
            return Err(Error::BatchTooSmall {
                context: "batchnorm with batch statistics".into(),
                n: layout.outer,
            });
        }
        let m = (layout.outer * layout.inner) as f64;
        let mut mean = vec![0.0; layout.feat];
        let mut var = vec![0.0; layout.feat];
        {
            let xd = &self.nodes[x.0].data;
            for o in 0..layout.outer {
                for f in 0..layout.feat {
                    let base = (o * layout.feat + f) * layout.inner;
                    for k in 0..layout.inner {
                        mean[f] += xd[base + k];
                    }
                }
            }
            for f in 0..layout.feat {
                mean[f] /= m;
            }
            for o in 0..layout.outer {
                for f in 0..layout.feat {
                    let base = (o * layout.feat + f) * layout.inner;
                    for k in 0..layout.inner {
                        let d = xd[base + k] - mean[f];
                        var[f] += d * d;
                    }
                }
            }
            for f in 0..layout.feat {
                var[f] /= m;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BnBatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count: layout.outer * layout.inner,
        };
        let node = self.bn_apply(x, gamma, beta, mean, inv_std, true, layout);
        Ok((node, stats))
    }

    /// Batch normalization with externally supplied statistics (running
    /// averages). The statistics are constants; gradients flow to the input
    /// and to scale/shift only.
    pub fn batchnorm_given(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let layout = self.bn_layout(x)?;
        self.bn_check_params(gamma, beta, layout.feat)?;
        if mean.len() != layout.feat || var.len() != layout.feat {
            return Err(Error::shape(
                "batchnorm running statistics",
                format!("[{}]", layout.feat),
                format!("mean [{}], var [{}]", mean.len(), var.len()),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean.to_vec(), inv_std, false, layout))
    }

    /// Row-wise softmax with temperature: `y_ik = exp(x_ik/τ) / Σ_j exp(x_ij/τ)`.
    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 2 {
            return Err(Error::shape(
                "softmax rows",
                "[n, c]".to_string(),
                format!("{:?}", xs),
            ));
        }
        let (n, c) = (xs[0], xs[1]);
        let mut data = vec![0.0; n * c];
        {
            let xd = &self.nodes[x.0].data;
            for i in 0..n {
                let row = &xd[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..c {
                    let e = ((row[k] - m) / tau).exp();
                    data[i * c + k] = e;
                    z += e;
                }
                for k in 0..c {
                    data[i * c + k] /= z;
                }
            }
        }
        Ok(self.push(vec![n, c], data, Op::SoftmaxRows { x, tau }))
    }

    /// Cosine similarity of each row of `z` against a fixed bank of anchor
    /// rows. Output is `[n, num_anchors]`. A row or anchor with norm below
    /// `1e-12` produces similarity `0` and passes no gradient.
    pub fn cosine_to_anchors(
        &mut self,
        z: NodeId,
        anchors: &[Vec<f64>],
    ) -> Result<NodeId> {
        let zs = self.nodes[z.0].shape.clone();
        if zs.len() != 2 {
            return Err(Error::shape(
                "cosine to anchors",
                "[n, d]".to_string(),
                format!("{:?}", zs),
            ));
        }
        let (n, d) = (zs[0], zs[1]);
        if anchors.is_empty() || anchors.iter().any(|a| a.len() != d) {
            return Err(Error::shape(
                "anchor bank",
                format!("rows of [{d}]"),
                format!("{} anchors", anchors.len()),
            ));
        }
        let c = anchors.len();
        let mut flat = Vec::with_capacity(c * d);
        for a in anchors {
            flat.extend_from_slice(a);
        }
        let anchor_norms: Vec<f64> = anchors.iter().map(|a| crate::tensor::norm(a)).collect();
        let mut data = vec![0.0; n * c];
        {
            let zd = &self.nodes[z.0].data;
            for i in 0..n {
                let row = &zd[i * d..(i + 1) * d];
                let zn = crate::tensor::norm(row);
                if zn < 1e-12 {
                    continue;
                }
                for k in 0..c {
                    if anchor_norms[k] < 1e-12 {
                        continue;
                    }
                    let a = &flat[k * d..(k + 1) * d];
                    data[i * c + k] = crate::tensor::dot(row, a) / (zn * anchor_norms[k]);
                }
            }
        }
        Ok(self.push(
            vec![n, c],
            data,
            Op::CosineToAnchors {
                z,
                anchors: flat,
                anchor_norms,
                dim: d,
            },
        ))
    }

    /// Mean Shannon entropy of probability rows: `(1/n) Σ_i H(p_i)`.
    pub fn mean_row_entropy(&mut self, p: NodeId) -> Result<NodeId> {
        let ps = self.nodes[p.0].shape.clone();
        if ps.len() != 2 {
            return Err(Error::shape(
                "mean row entropy",
                "[n, c]".to_string(),
                format!("{:?}", ps),
            ));
        }
        let (n, c) = (ps[0], ps[1]);
        let pd = &self.nodes[p.0].data;
        let mut acc = 0.0;
        for i in 0..n {
            acc += crate::tensor::entropy(&pd[i * c..(i + 1) * c]);
        }
        let v = acc / n as f64;
        Ok(self.push(vec![1], vec![v], Op::MeanRowEntropy { p }))
    }

    /// Entropy of the column-wise mean of probability rows: `H((1/n) Σ_i p_i)`.
    pub fn entropy_of_mean_row(&mut self, p: NodeId) -> Result<NodeId> {
        let ps = self.nodes[p.0].shape.clone();
        if ps.len() != 2 {
            return Err(Error::shape(
                "entropy of mean row",
                "[n, c]".to_string(),
                format!("{:?}", ps),
            ));
        }
        let (n, c) = (ps[0], ps[1]);
        let pd = &self.nodes[p.0].data;
        let mut m = vec![0.0; c];
        for i in 0..n {
            for k in 0..c {
                m[k] += pd[i * c + k];
            }
        }
        for v in &mut m {
            *v /= n as f64;
        }
        let v = crate::tensor::entropy(&m);
        Ok(self.push(vec![1], vec![v], Op::EntropyOfMeanRow { p }))
    }

    /// Mean cross-entropy of probability rows against integer labels:
    /// `-(1/n) Σ_i ln max(p_i[y_i], 1e-12)`.
    pub fn cross_entropy_one_hot(&mut self, p: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ps = self.nodes[p.0].shape.clone();
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(Error::shape(
                "cross entropy (one-hot)",
                format!("[{}, c]", labels.len()),
                format!("{:?}", ps),
            ));
        }
        let (n, c) = (ps[0], ps[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let pd = &self.nodes[p.0].data;
        let mut acc = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            acc -= pd[i * c + y].max(1e-12).ln();
        }
        let v = acc / n as f64;
        Ok(self.push(
            vec![1],
            vec![v],
            Op::CrossEntropyOneHot {
                p,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy between two probability-row nodes:
    /// `-(1/n) Σ_i Σ_k t_ik ln max(q_ik, 1e-12)`.
    ///
    /// Gradients flow into both arguments; detach the target first for a
    /// stop-gradient.
    pub fn cross_entropy_rows(&mut self, target: NodeId, pred: NodeId) -> Result<NodeId> {
        let ts = self.nodes[target.0].shape.clone();
        let qs = self.nodes[pred.0].shape.clone();
        if ts.len() != 2 || ts != qs {
            return Err(Error::shape(
                "cross entropy (rows)",
                format!("{:?}", ts),
                format!("{:?}", qs),
            ));
        }
        let (n, c) = (ts[0], ts[1]);
        let td = &self.nodes[target.0].data;
        let qd = &self.nodes[pred.0].data;
        let mut acc = 0.0;
        for i in 0..n * c {
            acc -= td[i] * qd[i].max(1e-12).ln();
        }
        let v = acc / n as f64;
        Ok(self.push(vec![1], vec![v], Op::CrossEntropyRows { target, pred }))
    }

    /// Linear combination of scalar nodes: `Σ coeff_j · term_j`.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::invalid("weighted sum of no terms"));
        }
        let mut v = 0.0;
        for &(id, coeff) in terms {
            if self.nodes[id.0].data.len() != 1 {
                return Err(Error::shape(
                    "weighted sum term",
                    "[1]".to_string(),
                    format!("{:?}", self.nodes[id.0].shape),
                ));
            }
            v += coeff * self.nodes[id.0].data[0];
        }
        Ok(self.push(
            vec![1],
            vec![v],
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss node. Returns dense gradient
    /// buffers for every node at or below the loss on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<TapeGrads> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward on a node not on this tape"));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(
                "backward root",
                "[1] (scalar loss)".to_string(),
                format!("{:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[loss.0][0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let has_signal = grads[idx].iter().any(|&g| g != 0.0);
            if !has_signal {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = g;
        }
        Ok(TapeGrads { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Reshape { x } => {
                for (gx, gi) in grads[x.0].iter_mut().zip(g) {
                    *gx += gi;
                }
            }
            Op::Relu { x } => {
                let xd = &self.nodes[x.0].data;
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        grads[x.0][i] += g[i];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[w.0].data;
                let n = self.nodes[x.0].shape[0];
                let d_in = self.nodes[x.0].shape[1];
                let d_out = self.nodes[w.0].shape[0];
                let mut gx = std::mem::take(&mut grads[x.0]);
                let mut gw = std::mem::take(&mut grads[w.0]);
                let mut gb = std::mem::take(&mut grads[b.0]);
                for i in 0..n {
                    for o in 0..d_out {
                        let go = g[i * d_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let xr = &xd[i * d_in..(i + 1) * d_in];
                        let wr = &wd[o * d_in..(o + 1) * d_in];
                        let gxr = &mut gx[i * d_in..(i + 1) * d_in];
                        let gwr = &mut gw[o * d_in..(o + 1) * d_in];
                        for k in 0..d_in {
                            gxr[k] += go * wr[k];
                            gwr[k] += go * xr[k];
                        }
                    }
                }
                grads[x.0] = gx;
                grads[w.0] = gw;
                grads[b.0] = gb;
            }
            Op::Conv2d { x, w, b } => {
                let xd = &self.nodes[x.0].data;
                let kd = &self.nodes[w.0].data;
                let xs = &self.nodes[x.0].shape;
                let (n, c_in, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
                let c_out = self.nodes[w.0].shape[0];
                let mut gx = std::mem::take(&mut grads[x.0]);
                let mut gw = std::mem::take(&mut grads[w.0]);
                let mut gb = std::mem::take(&mut grads[b.0]);
                for i in 0..n {
                    for o in 0..c_out {
                        for y in 0..h {
                            for xx in 0..wd_ {
                                let go = g[((i * c_out + o) * h + y) * wd_ + xx];
                                if go == 0.0 {
                                    continue;
                                }
                                gb[o] += go;
                                for c in 0..c_in {
                                    for dy in 0..3usize {
                                        let sy = y as isize + dy as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for dx in 0..3usize {
                                            let sx = xx as isize + dx as isize - 1;
                                            if sx < 0 || sx >= wd_ as isize {
                                                continue;
                                            }
                                            let xi = ((i * c_in + c) * h + sy as usize) * wd_
                                                + sx as usize;
                                            let ki = ((o * c_in + c) * 3 + dy) * 3 + dx;
                                            gx[xi] += go * kd[ki];
                                            gw[ki] += go * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                grads[x.0] = gx;
                grads[w.0] = gw;
                grads[b.0] = gb;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                layout,
            } => {
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let mut gx = std::mem::take(&mut grads[x.0]);
                let mut gg = std::mem::take(&mut grads[gamma.0]);
                let mut gb = std::mem::take(&mut grads[beta.0]);
                let m = (layout.outer * layout.inner) as f64;
                for f in 0..layout.feat {
                    let istd = inv_std[f];
                    let mu = mean[f];
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    for o in 0..layout.outer {
                        let base = (o * layout.feat + f) * layout.inner;
                        for k in 0..layout.inner {
                            let gy = g[base + k];
                            let xhat = (xd[base + k] - mu) * istd;
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                    }
                    gb[f] += sum_gy;
                    gg[f] += sum_gy_xhat;
                    if *batch_stats {
                        for o in 0..layout.outer {
                            let base = (o * layout.feat + f) * layout.inner;
                            for k in 0..layout.inner {
                                let gy = g[base + k];
                                let xhat = (xd[base + k] - mu) * istd;
                                gx[base + k] += gd[f] * istd / m
                                    * (m * gy - sum_gy - xhat * sum_gy_xhat);
                            }
                        }
                    } else {
                        let scale = gd[f] * istd;
                        for o in 0..layout.outer {
                            let base = (o * layout.feat + f) * layout.inner;
                            for k in 0..layout.inner {
                                gx[base + k] += scale * g[base + k];
                            }
                        }
                    }
                }
                grads[x.0] = gx;
                grads[gamma.0] = gg;
                grads[beta.0] = gb;
            }
            Op::SoftmaxRows { x, tau } => {
                let yd = &node.data;
                let n = node.shape[0];
                let c = node.shape[1];
                for i in 0..n {
                    let yr = &yd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let inner: f64 = yr.iter().zip(gr).map(|(y, gk)| y * gk).sum();
                    for k in 0..c {
                        grads[x.0][i * c + k] += yr[k] * (gr[k] - inner) / tau;
                    }
                }
            }
            Op::CosineToAnchors {
                z,
                anchors,
                anchor_norms,
                dim,
            } => {
                let zd = &self.nodes[z.0].data;
                let yd = &node.data;
                let n = node.shape[0];
                let c = node.shape[1];
                let d = *dim;
                for i in 0..n {
                    let row = &zd[i * d..(i + 1) * d];
                    let zn = crate::tensor::norm(row);
                    if zn < 1e-12 {
                        continue;
                    }
                    for k in 0..c {
                        let go = g[i * c + k];
                        if go == 0.0 || anchor_norms[k] < 1e-12 {
                            continue;
                        }
                        let a = &anchors[k * d..(k + 1) * d];
                        let s = yd[i * c + k];
                        let denom = zn * anchor_norms[k];
                        for j in 0..d {
                            grads[z.0][i * d + j] +=
                                go * (a[j] / denom - s * row[j] / (zn * zn));
                        }
                    }
                }
            }
            Op::MeanRowEntropy { p } => {
                let pd = &self.nodes[p.0].data;
                let n = self.nodes[p.0].shape[0] as f64;
                let gs = g[0];
                for (i, &v) in pd.iter().enumerate() {
                    if v > 0.0 {
                        grads[p.0][i] += gs * (-(v.ln() + 1.0)) / n;
                    }
                }
            }
            Op::EntropyOfMeanRow { p } => {
                let pd = &self.nodes[p.0].data;
                let n = self.nodes[p.0].shape[0];
                let c = self.nodes[p.0].shape[1];
                let gs = g[0];
                let mut m = vec![0.0; c];
                for i in 0..n {
                    for k in 0..c {
                        m[k] += pd[i * c + k];
                    }
                }
                for v in &mut m {
                    *v /= n as f64;
                }
                for i in 0..n {
                    for k in 0..c {
                        if m[k] > 0.0 {
                            grads[p.0][i * c + k] += gs * (-(m[k].ln() + 1.0)) / n as f64;
                        }
                    }
                }
            }
            Op::CrossEntropyOneHot { p, labels } => {
                let pd = &self.nodes[p.0].data;
                let n = labels.len() as f64;
                let c = self.nodes[p.0].shape[1];
                let gs = g[0];
                for (i, &y) in labels.iter().enumerate() {
                    let v = pd[i * c + y];
                    if v > 1e-12 {
                        grads[p.0][i * c + y] += gs * (-1.0 / (n * v));
                    }
                }
            }
            Op::CrossEntropyRows { target, pred } => {
                let td = &self.nodes[target.0].data;
                let qd = &self.nodes[pred.0].data;
                let n = self.nodes[target.0].shape[0] as f64;
                let gs = g[0];
                let mut gt = std::mem::take(&mut grads[target.0]);
                let mut gq = std::mem::take(&mut grads[pred.0]);
                for i in 0..td.len() {
                    gt[i] += gs * (-qd[i].max(1e-12).ln()) / n;
                    if qd[i] > 1e-12 {
                        gq[i] += gs * (-td[i] / (n * qd[i]));
                    }
                }
                grads[target.0] = gt;
                grads[pred.0] = gq;
            }
            Op::WeightedSum { terms } => {
                let gs = g[0];
                for &(id, coeff) in terms {
                    grads[id.0][0] += gs * coeff;
                }
            }
        }
    }
}
