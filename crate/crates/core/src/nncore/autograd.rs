//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation of one forward pass together with
//! whatever the backward rule needs. [`Tape::gradients`] walks the list in
//! reverse and returns the gradient of a scalar with respect to every node
//! that depends on a gradient-requiring leaf.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Zero padding of the two spatial axes of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub const NONE: Padding2d = Padding2d {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn width(left: usize, right: usize) -> Self {
        Self {
            left,
            right,
            ..Self::NONE
        }
    }
}

/// Parameters of one GRU direction, gate order (reset, update, candidate).
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    /// `[3H, F]`
    pub w_ih: Var,
    /// `[3H, H]`
    pub w_hh: Var,
    /// `[3H]`
    pub b_ih: Var,
    /// `[3H]`
    pub b_hh: Var,
}

#[derive(Debug)]
struct GruCache {
    hidden: usize,
    steps: usize,
    features: usize,
    batch: usize,
    /// Per (direction, batch, step): r, z, n, h_prev, r*h_prev, each `hidden` long.
    gates: Vec<f64>,
}

impl GruCache {
    fn offset(&self, dir: usize, b: usize, s: usize) -> usize {
        ((dir * self.batch + b) * self.steps + s) * 5 * self.hidden
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: Padding2d,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    BiGru {
        x: Var,
        dirs: [GruVars; 2],
        cache: GruCache,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Focal {
        p: Var,
        picks: Vec<usize>,
        alpha: f64,
        gamma: f64,
    },
    Huber {
        y: Var,
        picks: Vec<(usize, f64)>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Result of a batch-normalization forward pass in batch-statistics mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divisor M) variance used for normalization.
    pub var: Vec<f64>,
    /// Number of values reduced per feature map.
    pub count: usize,
}

/// Probability floor applied before taking logarithms in the focal loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to tape nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn huber(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        0.5 * u * u
    } else {
        a - 0.5
    }
}

fn huber_grad(u: f64) -> f64 {
    u.clamp(-1.0, 1.0)
}

pub fn focal(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.max(PROB_FLOOR);
    -alpha * (1.0 - p).powf(gamma) * p.ln()
}

fn focal_grad(p: f64, alpha: f64, gamma: f64) -> f64 {
    if p < PROB_FLOOR {
        return 0.0;
    }
    let q = 1.0 - p;
    let modulating = if gamma == 0.0 || q <= 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * p.ln()
    };
    alpha * (modulating - q.powf(gamma) / p)
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), !p.frozen, Op::Param(id))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: Padding2d,
    ) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Batch normalization over axis 1 of an `[N, F, ...]` tensor.
    ///
    /// With `running = None` the batch statistics normalize the input and
    /// are returned so the caller can update its running averages. With
    /// `running = Some((mean, var))` those are used instead.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("batchnorm needs [N, F, ...], got {shape:?}")));
        }
        let (n, f) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let m = n * inner;
        if self.value(gamma).numel() != f || self.value(beta).numel() != f {
            return Err(Error::Shape(format!(
                "batchnorm affine parameters must have {f} elements"
            )));
        }
        let data = xv.data();
        let (mean, var, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != f || rv.len() != f {
                    return Err(Error::Shape("running statistics length".into()));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                if m < 2 {
                    return Err(Error::Shape(format!(
                        "batchnorm in training mode needs at least 2 values per feature, got {m}"
                    )));
                }
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for b in 0..n {
                    for c in 0..f {
                        let base = (b * f + c) * inner;
                        mean[c] += data[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for b in 0..n {
                    for c in 0..f {
                        let base = (b * f + c) * inner;
                        var[c] += data[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: m,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for c in 0..f {
                let base = (b * f + c) * inner;
                for i in base..base + inner {
                    let h = (data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = stats.is_some();
        let var_out = self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| a.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Shape(format!("softmax axis {axis} invalid for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Softmax { x, axis }))
    }

    /// Average pooling along the last axis.
    pub fn avgpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let w = *shape
            .last()
            .ok_or_else(|| Error::Shape("avgpool1d on a scalar".into()))?;
        if kernel == 0 || stride == 0 || kernel > w {
            return Err(Error::Shape(format!(
                "avgpool1d kernel {kernel} stride {stride} invalid for width {w}"
            )));
        }
        let wo = (w - kernel) / stride + 1;
        let rows = v.numel() / w;
        let src = v.data();
        let mut out = vec![0.0; rows * wo];
        for r in 0..rows {
            for j in 0..wo {
                let start = r * w + j * stride;
                out[r * wo + j] = src[start..start + kernel].iter().sum::<f64>() / kernel as f64;
            }
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = wo;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&oshape, out)?, rg, Op::AvgPool { x, kernel, stride }))
    }

    /// Bidirectional GRU over `x: [N, F, T]`, returning `[N, H, 2, T]` where
    /// index 0 of the third axis is the forward pass and 1 the backward pass.
    ///
    /// Candidate state uses the reset gate on the previous hidden state
    /// before the recurrent product: `n = tanh(W_in x + b_in + W_hn (r*h) + b_hn)`.
    pub fn bigru(&mut self, x: Var, dirs: [GruVars; 2]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("bigru expects [N, F, T], got {shape:?}")));
        }
        let (batch, features, steps) = (shape[0], shape[1], shape[2]);
        let hidden = self.value(dirs[0].w_hh).shape().get(1).copied().unwrap_or(0);
        for d in &dirs {
            let expect = [
                (d.w_ih, vec![3 * hidden, features]),
                (d.w_hh, vec![3 * hidden, hidden]),
                (d.b_ih, vec![3 * hidden]),
                (d.b_hh, vec![3 * hidden]),
            ];
            for (v, s) in expect {
                if self.value(v).shape() != s.as_slice() {
                    return Err(Error::Shape(format!(
                        "gru parameter shape {:?}, expected {s:?}",
                        self.value(v).shape()
                    )));
                }
            }
        }
        let mut cache = GruCache {
            hidden,
            steps,
            features,
            batch,
            gates: vec![0.0; 2 * batch * steps * 5 * hidden],
        };
        let mut out = vec![0.0; batch * hidden * 2 * steps];
        let xd = xv.data();
        for (dir, d) in dirs.iter().enumerate() {
            let w_ih = self.value(d.w_ih).data();
            let w_hh = self.value(d.w_hh).data();
            let b_ih = self.value(d.b_ih).data();
            let b_hh = self.value(d.b_hh).data();
            for b in 0..batch {
                let xb = &xd[b * features * steps..(b + 1) * features * steps];
                let gi = input_projection(xb, features, steps, w_ih, b_ih, 3 * hidden);
                let mut h = vec![0.0; hidden];
                for s in 0..steps {
                    let t = if dir == 0 { s } else { steps - 1 - s };
                    let off = cache.offset(dir, b, s);
                    let g = &mut cache.gates[off..off + 5 * hidden];
                    let (r, rest) = g.split_at_mut(hidden);
                    let (z, rest) = rest.split_at_mut(hidden);
                    let (n, rest) = rest.split_at_mut(hidden);
                    let (hp, rh) = rest.split_at_mut(hidden);
                    hp.copy_from_slice(&h);
                    let git = &gi[t * 3 * hidden..(t + 1) * 3 * hidden];
                    for i in 0..hidden {
                        let row_r = &w_hh[i * hidden..(i + 1) * hidden];
                        let row_z = &w_hh[(hidden + i) * hidden..(hidden + i + 1) * hidden];
                        let ar = git[i] + b_hh[i] + dot(row_r, hp);
                        let az = git[hidden + i] + b_hh[hidden + i] + dot(row_z, hp);
                        r[i] = sigmoid(ar);
                        z[i] = sigmoid(az);
                    }
                    for i in 0..hidden {
                        rh[i] = r[i] * hp[i];
                    }
                    for i in 0..hidden {
                        let row_n = &w_hh[(2 * hidden + i) * hidden..(2 * hidden + i + 1) * hidden];
                        let an = git[2 * hidden + i] + b_hh[2 * hidden + i] + dot(row_n, rh);
                        n[i] = an.tanh();
                        h[i] = (1.0 - z[i]) * n[i] + z[i] * hp[i];
                        out[((b * hidden + i) * 2 + dir) * steps + t] = h[i];
                    }
                }
            }
        }
        let rg = self.rg(x)
            || dirs
                .iter()
                .any(|d| self.rg(d.w_ih) || self.rg(d.w_hh) || self.rg(d.b_ih) || self.rg(d.b_hh));
        Ok(self.push(
            Tensor::new(&[batch, hidden, 2, steps], out)?,
            rg,
            Op::BiGru { x, dirs, cache },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out = permute_data(v, perm);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| a * k).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// Mean of `-alpha (1 - p)^gamma ln p` over the picked flat indices of
    /// `p`; zero when nothing is picked.
    pub fn focal_mean(&mut self, p: Var, picks: Vec<usize>, alpha: f64, gamma: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if let Some(&bad) = picks.iter().find(|&&i| i >= pv.len()) {
            return Err(Error::Shape(format!("focal pick {bad} out of range")));
        }
        let value = if picks.is_empty() {
            0.0
        } else {
            picks.iter().map(|&i| focal(pv[i], alpha, gamma)).sum::<f64>() / picks.len() as f64
        };
        let rg = self.rg(p) && !picks.is_empty();
        Ok(self.push(
            Tensor::scalar(value),
            rg,
            Op::Focal {
                p,
                picks,
                alpha,
                gamma,
            },
        ))
    }

    /// `(1 / norm) * sum huber(y[i] - target)` over the picked entries;
    /// zero when `norm == 0`.
    pub fn huber_sum(&mut self, y: Var, picks: Vec<(usize, f64)>, norm: f64) -> Result<Var> {
        let yv = self.value(y).data();
        if let Some(&(bad, _)) = picks.iter().find(|(i, _)| *i >= yv.len()) {
            return Err(Error::Shape(format!("huber pick {bad} out of range")));
        }
        let value = if norm == 0.0 {
            0.0
        } else {
            picks.iter().map(|&(i, t)| huber(yv[i] - t)).sum::<f64>() / norm
        };
        let rg = self.rg(y) && norm != 0.0;
        Ok(self.push(Tensor::scalar(value), rg, Op::Huber { y, picks, norm }))
    }

    /// Gradients of the scalar `loss` with respect to all nodes.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates the gradient of `loss` into every non-frozen parameter
    /// of `store` that appears on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let p = store.get_mut(id);
                if p.frozen {
                    continue;
                }
                if let Some(g) = &grads.grads[i] {
                    match &mut p.grad {
                        Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => p.grad = Some(Tensor::new(p.value.shape(), g.clone())?),
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    node.value.shape(),
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, |s| add_into(s, &dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, |s| add_into(s, &dw));
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, f) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for b in 0..n {
                    for c in 0..f {
                        let base = (b * f + c) * inner;
                        for i in base..base + inner {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for c in 0..f {
                            let base = (b * f + c) * inner;
                            for i in base..base + inner {
                                dx[i] = if *batch_stats {
                                    // d/dx of gamma * (x - mean_B) / std_B + beta
                                    gam[c] * inv_std[c] / m
                                        * (m * g[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    gam[c] * inv_std[c] * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, |s| add_into(s, &dx));
                }
                self.accumulate(grads, *gamma, |s| add_into(s, &dgamma));
                self.accumulate(grads, *beta, |s| add_into(s, &dbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, |s| add_into(s, &dx));
            }
            Op::AvgPool { x, kernel, stride } => {
                let w = *self.value(*x).shape().last().unwrap();
                let wo = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / wo;
                let k = *kernel as f64;
                self.accumulate(grads, *x, |s| {
                    for r in 0..rows {
                        for j in 0..wo {
                            let start = r * w + j * stride;
                            for v in &mut s[start..start + kernel] {
                                *v += g[r * wo + j] / k;
                            }
                        }
                    }
                });
            }
            Op::BiGru { x, dirs, cache } => self.bigru_backward(*x, dirs, cache, g, grads),
            Op::Reshape(x) => self.accumulate(grads, *x, |s| add_into(s, g)),
            Op::Permute { x, perm } => {
                // Inverse permutation maps the gradient back.
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let back = permute_data(&gt, &inv);
                self.accumulate(grads, *x, |s| add_into(s, back.data()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    s.iter_mut().zip(g.iter().zip(vb)).for_each(|(s, (g, v))| *s += g * v)
                });
                self.accumulate(grads, *b, |s| {
                    s.iter_mut().zip(g.iter().zip(va)).for_each(|(s, (g, v))| *s += g * v)
                });
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k))
            }
            Op::Sum(x) => self.accumulate(grads, *x, |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Focal {
                p,
                picks,
                alpha,
                gamma,
            } => {
                let pv = self.value(*p).data();
                let scale = g[0] / picks.len() as f64;
                self.accumulate(grads, *p, |s| {
                    for &i in picks {
                        s[i] += scale * focal_grad(pv[i], *alpha, *gamma);
                    }
                });
            }
            Op::Huber { y, picks, norm } => {
                let yv = self.value(*y).data();
                let scale = g[0] / norm;
                self.accumulate(grads, *y, |s| {
                    for &(i, t) in picks {
                        s[i] += scale * huber_grad(yv[i] - t);
                    }
                });
            }
        }
        Ok(())
    }

    fn bigru_backward(
        &self,
        x: Var,
        dirs: &[GruVars; 2],
        cache: &GruCache,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (hidden, steps, features, batch) = (cache.hidden, cache.steps, cache.features, cache.batch);
        let h3 = 3 * hidden;
        let xd = self.value(x).data();
        let mut dx = vec![0.0; xd.len()];
        for (dir, d) in dirs.iter().enumerate() {
            let w_ih = self.value(d.w_ih).data();
            let w_hh = self.value(d.w_hh).data();
            let mut dw_ih = vec![0.0; h3 * features];
            let mut dw_hh = vec![0.0; h3 * hidden];
            let mut db_ih = vec![0.0; h3];
            let mut db_hh = vec![0.0; h3];
            for b in 0..batch {
                let xb = &xd[b * features * steps..(b + 1) * features * steps];
                let mut dh = vec![0.0; hidden];
                let mut dgi = vec![0.0; h3];
                for s in (0..steps).rev() {
                    let t = if dir == 0 { s } else { steps - 1 - s };
                    for (i, v) in dh.iter_mut().enumerate() {
                        *v += g[((b * hidden + i) * 2 + dir) * steps + t];
                    }
                    let off = cache.offset(dir, b, s);
                    let gates = &cache.gates[off..off + 5 * hidden];
                    let (r, rest) = gates.split_at(hidden);
                    let (z, rest) = rest.split_at(hidden);
                    let (n, rest) = rest.split_at(hidden);
                    let (hp, rh) = rest.split_at(hidden);

                    let mut dhp = vec![0.0; hidden];
                    let mut dan = vec![0.0; hidden];
                    for i in 0..hidden {
                        let dn = dh[i] * (1.0 - z[i]);
                        let dz = dh[i] * (hp[i] - n[i]);
                        dhp[i] = dh[i] * z[i];
                        dan[i] = dn * (1.0 - n[i] * n[i]);
                        dgi[hidden + i] = dz * z[i] * (1.0 - z[i]);
                        dgi[2 * hidden + i] = dan[i];
                    }
                    // Candidate recurrent product W_hn (r * h_prev).
                    let mut drh = vec![0.0; hidden];
                    for i in 0..hidden {
                        let row = (2 * hidden + i) * hidden;
                        let a = dan[i];
                        if a != 0.0 {
                            for j in 0..hidden {
                                drh[j] += w_hh[row + j] * a;
                                dw_hh[row + j] += a * rh[j];
                            }
                        }
                        db_hh[2 * hidden + i] += a;
                    }
                    for i in 0..hidden {
                        let dr = drh[i] * hp[i];
                        dhp[i] += drh[i] * r[i];
                        dgi[i] = dr * r[i] * (1.0 - r[i]);
                    }
                    // Reset and update gates: recurrent products W_h{r,z} h_prev.
                    for i in 0..2 * hidden {
                        let a = dgi[i];
                        db_hh[i] += a;
                        if a != 0.0 {
                            let row = i * hidden;
                            for j in 0..hidden {
                                dhp[j] += w_hh[row + j] * a;
                                dw_hh[row + j] += a * hp[j];
                            }
                        }
                    }
                    // Input projection.
                    for gi in 0..h3 {
                        let a = dgi[gi];
                        db_ih[gi] += a;
                        if a != 0.0 {
                            let row = gi * features;
                            for f in 0..features {
                                dw_ih[row + f] += a * xb[f * steps + t];
                                dx[b * features * steps + f * steps + t] += w_ih[row + f] * a;
                            }
                        }
                    }
                    dh = dhp;
                }
            }
            self.accumulate(grads, d.w_ih, |s| add_into(s, &dw_ih));
            self.accumulate(grads, d.w_hh, |s| add_into(s, &dw_hh));
            self.accumulate(grads, d.b_ih, |s| add_into(s, &db_ih));
            self.accumulate(grads, d.b_hh, |s| add_into(s, &db_hh));
        }
        self.accumulate(grads, x, |s| add_into(s, &dx));
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `gi[t, g] = sum_f w[g, f] x[f, t] + b[g]` for one sequence stored `[F, T]`.
fn input_projection(x: &[f64], features: usize, steps: usize, w: &[f64], b: &[f64], rows: usize) -> Vec<f64> {
    let mut gi = vec![0.0; steps * rows];
    for t in 0..steps {
        gi[t * rows..(t + 1) * rows].copy_from_slice(b);
    }
    for g in 0..rows {
        for f in 0..features {
            let wv = w[g * features + f];
            if wv == 0.0 {
                continue;
            }
            let xrow = &x[f * steps..(f + 1) * steps];
            for t in 0..steps {
                gi[t * rows + g] += wv * xrow[t];
            }
        }
    }
    gi
}

fn permute_data(v: &Tensor, perm: &[usize]) -> Tensor {
    let shape = v.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = Tensor::strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = v.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let src = v.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves size")
}

/// Output extent of a strided valid convolution over a padded axis.
pub fn conv_out_len(len: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = len + pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Valid index range `j` with `0 <= j*stride + q - pad < len`, `j < out`.
fn tap_range(out: usize, len: usize, q: usize, pad: usize, stride: usize) -> std::ops::Range<usize> {
    let (q, pad, stride, len) = (q as isize, pad as isize, stride as isize, len as isize);
    let lo = if pad > q { (pad - q + stride - 1) / stride } else { 0 };
    let hi = (len - 1 + pad - q).div_euclid(stride) + 1;
    let hi = hi.clamp(0, out as isize);
    (lo.min(hi) as usize)..(hi as usize)
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: (usize, usize),
    pad: Padding2d,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"
        )));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d input has {cin} channels, weight expects {wcin}"
        )));
    }
    if let Some(b) = b {
        if b.numel() != cout {
            return Err(Error::Shape(format!("conv2d bias needs {cout} elements, got {}", b.numel())));
        }
    }
    let ho = conv_out_len(h, pad.top + pad.bottom, kh, stride.0).ok_or_else(|| {
        Error::Shape(format!("conv2d kernel height {kh} exceeds input height {h} (+padding)"))
    })?;
    let wo = conv_out_len(wd, pad.left + pad.right, kw, stride.1).ok_or_else(|| {
        Error::Shape(format!("conv2d kernel width {kw} exceeds input width {wd} (+padding)"))
    })?;
    let (sh, sw) = stride;
    let xd = x.data();
    let wdata = w.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for o in 0..cout {
            let obase = (bi * cout + o) * ho * wo;
            if let Some(b) = b {
                out[obase..obase + ho * wo].fill(b.data()[o]);
            }
            for c in 0..cin {
                let xbase = (bi * cin + c) * h * wd;
                for p in 0..kh {
                    let rows = tap_range(ho, h, p, pad.top, sh);
                    for q in 0..kw {
                        let wv = wdata[((o * cin + c) * kh + p) * kw + q];
                        let cols = tap_range(wo, wd, q, pad.left, sw);
                        for i in rows.clone() {
                            let xi = i * sh + p - pad.top;
                            let xrow = &xd[xbase + xi * wd..xbase + (xi + 1) * wd];
                            let orow = &mut out[obase + i * wo..obase + (i + 1) * wo];
                            for j in cols.clone() {
                                orow[j] += wv * xrow[j * sw + q - pad.left];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    out_shape: &[usize],
    stride: (usize, usize),
    pad: Padding2d,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let (sh, sw) = stride;
    let xd = x.data();
    let wdata = w.data();
    let mut dx = need_dx.then(|| vec![0.0; xd.len()]);
    let mut dw = need_dw.then(|| vec![0.0; wdata.len()]);
    let mut db = vec![0.0; cout];
    for bi in 0..n {
        for o in 0..cout {
            let obase = (bi * cout + o) * ho * wo;
            db[o] += g[obase..obase + ho * wo].iter().sum::<f64>();
            for c in 0..cin {
                let xbase = (bi * cin + c) * h * wd;
                for p in 0..kh {
                    let rows = tap_range(ho, h, p, pad.top, sh);
                    for q in 0..kw {
                        let widx = ((o * cin + c) * kh + p) * kw + q;
                        let wv = wdata[widx];
                        let cols = tap_range(wo, wd, q, pad.left, sw);
                        let mut acc = 0.0;
                        for i in rows.clone() {
                            let xi = i * sh + p - pad.top;
                            let grow = &g[obase + i * wo..obase + (i + 1) * wo];
                            let xoff = xbase + xi * wd;
                            if let Some(dx) = dx.as_mut() {
                                for j in cols.clone() {
                                    dx[xoff + j * sw + q - pad.left] += wv * grow[j];
                                }
                            }
                            if need_dw {
                                for j in cols.clone() {
                                    acc += grow[j] * xd[xoff + j * sw + q - pad.left];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
