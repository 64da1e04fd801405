//! Reverse-mode automatic differentiation on a tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] (never copied) and become gradient-carrying
//! leaves; data enters through [`Graph::input`] and carries no gradient.
//! [`Graph::detach`] produces a constant copy of a value, which is how
//! stop-gradient contracts are expressed.
//!
//! Non-smooth operations (ReLU, max-pool, the Gaussian-seed minimum, chamfer
//! nearest neighbours) expose their discrete choices through
//! [`Graph::branch_signature`], so finite-difference checks can tell when a
//! perturbation crossed a kink.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    ChannelAffine { x: Var, scale: Vec<f64> },
    MeanPool2d(Var),
    GroupMax { x: Var, argmax: Vec<usize> },
    PointTransform { pts: Var, t: Var, n: usize },
    Concat(Var, Var),
    Reshape(Var),
    GaussMin { x: Var, n: usize, take_x: Vec<bool> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    RowNorm(Var),
    Mean(Var),
    Dot { x: Var, weights: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Chamfer { x: Var, target: Vec<f64>, n: usize, fwd: Vec<usize>, bwd: Vec<usize> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: BTreeMap<String, Var>,
    training: bool,
    tags: Vec<(String, Var)>,
}

/// `[N, C, H, W]` or `[R, C]` (read as `[R, C, 1, 1]`).
fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [n, c, h, w] => (n, c, h * w),
        [r, c] => (r, c, 1),
        _ => panic!("expected a 2D or 4D tensor, got {shape:?}"),
    }
}

/// Index range `i in [lo, hi)` such that `i * stride + k - pad` lands in
/// `[0, target_len)`.
fn valid_range(len_i: usize, target_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if target_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((target_len - 1 + pad - k) / stride + 1).min(len_i);
    (lo.min(hi), hi)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            training: true,
            tags: Vec::new(),
        }
    }

    /// A graph whose normalization layers use stored running statistics.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { training: false, ..Self::new(params) }
    }

    /// Whether normalization layers use batch statistics.
    pub fn training(&self) -> bool {
        self.training
    }

    /// Attaches a name to a node so callers can find it after the forward pass.
    pub fn tag(&mut self, name: &str, v: Var) {
        self.tags.push((name.to_string(), v));
    }

    pub fn tagged(&self) -> &[(String, Var)] {
        &self.tags
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Gradient-carrying leaf for a named parameter. Repeated calls return the
    /// same node, so a module applied twice accumulates into one gradient.
    ///
    /// Panics if the parameter is absent; model construction guarantees
    /// presence for every name a forward pass asks for.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data leaf that does collect a gradient (for input sensitivities).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`: same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i_dim) = self.value(x).dims2();
        let (wi, o_dim) = self.value(w).dims2();
        assert_eq!(i_dim, wi, "linear: input width {i_dim} vs weight rows {wi}");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o_dim];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o_dim);
            for row in out.chunks_mut(o_dim) {
                row.copy_from_slice(bv);
            }
        }
        for r in 0..n {
            let orow = &mut out[r * o_dim..(r + 1) * o_dim];
            for (i, &xi) in xv[r * i_dim..(r + 1) * i_dim].iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wv[i * o_dim..(i + 1) * o_dim];
                for (o, w) in orow.iter_mut().zip(wrow) {
                    *o += xi * w;
                }
            }
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(vec![n, o_dim], out), Op::Linear { x, w, b }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Sigmoid(a), &[a])
    }

    /// 2-D cross-correlation. `x: [N, C, H, W]`, `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, k, k2) = self.value(w).dims4();
        assert_eq!((c, k), (wc, k2), "conv2d: channel/kernel mismatch");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oc in 0..o {
                let plane = &mut out[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                plane.fill(bv[oc]);
                for ci in 0..c {
                    let xp = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    for ky in 0..k {
                        let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                        for kx in 0..k {
                            let wval = wv[((oc * c + ci) * k + ky) * k + kx];
                            let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                            for oy in oy0..oy1 {
                                let iy = oy * stride + ky - pad;
                                let xrow = &xp[iy * wd..(iy + 1) * wd];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for ox in ox0..ox1 {
                                    orow[ox] += wval * xrow[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, o, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            &[x, w, b],
        )
    }

    /// 2-D transposed convolution. `x: [N, C, H, W]`, `w: [C, O, K, K]`,
    /// `b: [O]`; output side `(in - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (wc, o, k, k2) = self.value(w).dims4();
        assert_eq!((c, k), (wc, k2), "conv_transpose2d: channel/kernel mismatch");
        let ho = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .expect("conv_transpose2d: padding exceeds output");
        let wo = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .expect("conv_transpose2d: padding exceeds output");
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oc in 0..o {
                out[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo].fill(bv[oc]);
            }
            for ci in 0..c {
                let xp = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                for oc in 0..o {
                    let plane = &mut out[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                    for ky in 0..k {
                        let (iy0, iy1) = valid_range(h, ho, ky, stride, pad);
                        for kx in 0..k {
                            let wval = wv[((ci * o + oc) * k + ky) * k + kx];
                            let (ix0, ix1) = valid_range(wd, wo, kx, stride, pad);
                            for iy in iy0..iy1 {
                                let oy = iy * stride + ky - pad;
                                let xrow = &xp[iy * wd..(iy + 1) * wd];
                                let orow = &mut plane[oy * wo..(oy + 1) * wo];
                                for ix in ix0..ix1 {
                                    orow[ix * stride + kx - pad] += wval * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![n, o, ho, wo], out),
            Op::ConvTranspose2d { x, w, b, stride, pad },
            &[x, w, b],
        )
    }

    /// Batch normalization per channel of `[N, C, H, W]` or `[R, C]` with the
    /// statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c, hw) = channel_dims(&shape);
        let m = (n * hw) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        let mut out = vec![0.0; xv.len()];
        for ci in 0..c {
            let plane = |ni: usize| (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
            let mean = (0..n).map(|ni| xv[plane(ni)].iter().sum::<f64>()).sum::<f64>() / m;
            let var = (0..n)
                .map(|ni| xv[plane(ni)].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ci] = is;
            means[ci] = mean;
            vars[ci] = var;
            for ni in 0..n {
                for idx in plane(ni) {
                    let xh = (xv[idx] - mean) * is;
                    xhat[idx] = xh;
                    out[idx] = gv[ci] * xh + bv[ci];
                }
            }
        }
        self.push(
            Tensor::new(shape, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, mean: means, var: vars },
            &[x, gamma, beta],
        )
    }

    /// Per-channel mean, biased variance and element count seen by a
    /// [`batch_norm`](Self::batch_norm) node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64], usize)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, xhat, .. } => Some((mean, var, xhat.len() / mean.len().max(1))),
            _ => None,
        }
    }

    /// `x * scale[c] + shift[c]` per channel with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (n, c, hw) = channel_dims(&shape);
        assert!(scale.len() == c && shift.len() == c, "channel_affine: {c} channels");
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for idx in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                    out[idx] = xv[idx] * scale[ci] + shift[ci];
                }
            }
        }
        self.push(Tensor::new(shape, out), Op::ChannelAffine { x, scale: scale.to_vec() }, &[x])
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn mean_pool2d(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        self.push(Tensor::new(vec![n, c], out), Op::MeanPool2d(x), &[x])
    }

    /// Column-wise max over consecutive row groups of size `n`:
    /// `[N * n, C] -> [N, C]`. Ties resolve to the first row.
    pub fn group_max(&mut self, x: Var, n: usize) -> Var {
        let (rows, c) = self.value(x).dims2();
        assert!(n > 0 && rows % n == 0, "group_max: {rows} rows not divisible by {n}");
        let groups = rows / n;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            let o = &mut out[g * c..(g + 1) * c];
            let a = &mut argmax[g * c..(g + 1) * c];
            for r in g * n..(g + 1) * n {
                for (j, &v) in xv[r * c..(r + 1) * c].iter().enumerate() {
                    if v > o[j] {
                        o[j] = v;
                        a[j] = r;
                    }
                }
            }
        }
        self.push(Tensor::new(vec![groups, c], out), Op::GroupMax { x, argmax }, &[x])
    }

    /// Applies one `F x F` matrix per sample to its points (`p -> T p`, i.e.
    /// `P * T^T`). `pts: [N * n, F]`, `t: [N, F * F]` row-major.
    pub fn point_transform(&mut self, pts: Var, t: Var, n: usize) -> Var {
        let (rows, f) = self.value(pts).dims2();
        let (groups, ff) = self.value(t).dims2();
        assert_eq!(ff, f * f, "point_transform: matrix width");
        assert_eq!(rows, groups * n, "point_transform: row count");
        let pv = self.value(pts).data();
        let tv = self.value(t).data();
        let mut out = vec![0.0; rows * f];
        for r in 0..rows {
            let m = &tv[(r / n) * ff..(r / n + 1) * ff];
            let p = &pv[r * f..(r + 1) * f];
            for i in 0..f {
                out[r * f + i] = (0..f).map(|j| m[i * f + j] * p[j]).sum();
            }
        }
        self.push(Tensor::new(vec![rows, f], out), Op::PointTransform { pts, t, n }, &[pts, t])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, ca) = self.value(a).dims2();
        let (nb, cb) = self.value(b).dims2();
        assert_eq!(n, nb, "concat_cols: row mismatch");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::new(vec![n, ca + cb], out), Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape.to_vec());
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Gaussian seed for point decoding: entry `(b * n + i, k)` is
    /// `min(noise[b * n + i, k], x[b, k])`. `noise: [N * n, K]`.
    pub fn gauss_min(&mut self, x: Var, noise: &Tensor, n: usize) -> Var {
        let (groups, k) = self.value(x).dims2();
        assert_eq!(noise.shape(), &[groups * n, k], "gauss_min: noise shape");
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups * n * k];
        let mut take_x = vec![false; groups * n * k];
        for r in 0..groups * n {
            let xrow = &xv[(r / n) * k..(r / n + 1) * k];
            for j in 0..k {
                let g = noise.data()[r * k + j];
                if xrow[j] <= g {
                    out[r * k + j] = xrow[j];
                    take_x[r * k + j] = true;
                } else {
                    out[r * k + j] = g;
                }
            }
        }
        self.push(Tensor::new(vec![groups * n, k], out), Op::GaussMin { x, n, take_x }, &[x])
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(labels.len(), n, "softmax_cross_entropy: label count");
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            assert!(labels[r] < k, "label {} out of range for {k} classes", labels[r]);
            loss += z.ln() + mx - row[labels[r]];
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// Euclidean norm of every row: `[N, D] -> [N]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let (n, d) = self.value(a).dims2();
        let out = self
            .value(a)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Tensor::new(vec![n], out), Op::RowNorm(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `sum(x * weights)` for a constant weight tensor of the same size.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), weights.len(), "dot_const: length mismatch");
        let s = xv.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::Dot { x, weights: weights.to_vec() }, &[x])
    }

    /// Rows scaled to unit Euclidean norm (norm floored at 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for row in xv.chunks(d) {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(nr);
            out.extend(row.iter().map(|v| v / nr));
        }
        self.push(Tensor::new(vec![n, d], out), Op::NormalizeRows { x, norms }, &[x])
    }

    /// Symmetric chamfer distance per sample between `x: [N * n, F]` and a
    /// constant target of the same shape: mean squared distance to the nearest
    /// target point plus mean squared distance from each target point to its
    /// nearest prediction. Output `[N]`.
    pub fn chamfer(&mut self, x: Var, target: &Tensor, n: usize) -> Var {
        let (rows, f) = self.value(x).dims2();
        assert_eq!(target.shape(), &[rows, f], "chamfer: target shape");
        assert!(n > 0 && rows % n == 0);
        let groups = rows / n;
        let xv = self.value(x).data();
        let tv = target.data();
        let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        let mut out = vec![0.0; groups];
        let mut fwd = vec![0usize; rows];
        let mut bwd = vec![0usize; rows];
        for g in 0..groups {
            let base = g * n;
            let mut total = 0.0;
            for i in 0..n {
                let xi = &xv[(base + i) * f..(base + i + 1) * f];
                let (mut best, mut arg) = (f64::INFINITY, 0);
                for j in 0..n {
                    let d = d2(xi, &tv[(base + j) * f..(base + j + 1) * f]);
                    if d < best {
                        best = d;
                        arg = base + j;
                    }
                }
                fwd[base + i] = arg;
                total += best;
            }
            for j in 0..n {
                let tj = &tv[(base + j) * f..(base + j + 1) * f];
                let (mut best, mut arg) = (f64::INFINITY, 0);
                for i in 0..n {
                    let d = d2(&xv[(base + i) * f..(base + i + 1) * f], tj);
                    if d < best {
                        best = d;
                        arg = base + i;
                    }
                }
                bwd[base + j] = arg;
                total += best;
            }
            out[g] = total / n as f64;
        }
        self.push(
            Tensor::new(vec![groups], out),
            Op::Chamfer { x, target: tv.to_vec(), n, fwd, bwd },
            &[x],
        )
    }

    /// Hash of every discrete choice made by non-smooth operations.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(_) => {
                    mix(idx as u64);
                    for &v in node.value.data() {
                        mix(u64::from(v > 0.0));
                    }
                }
                Op::GroupMax { argmax, .. } => {
                    mix(idx as u64);
                    argmax.iter().for_each(|&a| mix(a as u64));
                }
                Op::GaussMin { take_x, .. } => {
                    mix(idx as u64);
                    take_x.iter().for_each(|&t| mix(u64::from(t)));
                }
                Op::Chamfer { fwd, bwd, .. } => {
                    mix(idx as u64);
                    fwd.iter().chain(bwd).for_each(|&a| mix(a as u64));
                }
                _ => {}
            }
        }
        h
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { by_node: grads }
    }

    /// Gradients of every parameter touched by this graph, keyed by name.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.param_vars
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .of(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn backprop_node(&self, node: &Node<'p>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, i_dim) = self.value(*x).dims2();
                let o_dim = self.value(*w).dims2().1;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..n {
                        let grow = &gd[r * o_dim..(r + 1) * o_dim];
                        for i in 0..i_dim {
                            let wrow = &wv[i * o_dim..(i + 1) * o_dim];
                            dx[r * i_dim + i] += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for r in 0..n {
                        let grow = &gd[r * o_dim..(r + 1) * o_dim];
                        for i in 0..i_dim {
                            let xi = xv[r * i_dim + i];
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, gv) in dw[i * o_dim..(i + 1) * o_dim].iter_mut().zip(grow) {
                                *d += xi * gv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for grow in gd.chunks(o_dim) {
                            for (d, gv) in db.iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y));
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, hw) = channel_dims(self.value(*x).shape());
                self.accumulate(grads, *x, |d| {
                    for (i, (dv, gv)) in d.iter_mut().zip(gd).enumerate() {
                        *dv += scale[(i / hw) % c] * gv;
                    }
                });
            }
            Op::Relu(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |d| {
                    for ((x, y), o) in d.iter_mut().zip(gd).zip(out) {
                        if *o > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |d| {
                    for ((x, y), s) in d.iter_mut().zip(gd).zip(out) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (n, c, h, wd) = self.value(*x).dims4();
                let (o, _, k, _) = self.value(*w).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *b, |db| {
                    for ni in 0..n {
                        for oc in 0..o {
                            db[oc] += gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for ni in 0..n {
                        for oc in 0..o {
                            let gp = &gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                            for ci in 0..c {
                                let xp = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                                for ky in 0..k {
                                    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                                    for kx in 0..k {
                                        let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                                        let mut acc = 0.0;
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let xrow = &xp[iy * wd..(iy + 1) * wd];
                                            let grow = &gp[oy * wo..(oy + 1) * wo];
                                            for ox in ox0..ox1 {
                                                acc += grow[ox] * xrow[ox * stride + kx - pad];
                                            }
                                        }
                                        dw[((oc * c + ci) * k + ky) * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for ni in 0..n {
                        for oc in 0..o {
                            let gp = &gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                            for ci in 0..c {
                                let dxp = &mut dx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                                for ky in 0..k {
                                    let (oy0, oy1) = valid_range(ho, h, ky, stride, pad);
                                    for kx in 0..k {
                                        let wval = wv[((oc * c + ci) * k + ky) * k + kx];
                                        let (ox0, ox1) = valid_range(wo, wd, kx, stride, pad);
                                        for oy in oy0..oy1 {
                                            let iy = oy * stride + ky - pad;
                                            let grow = &gp[oy * wo..(oy + 1) * wo];
                                            let drow = &mut dxp[iy * wd..(iy + 1) * wd];
                                            for ox in ox0..ox1 {
                                                drow[ox * stride + kx - pad] += wval * grow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (n, c, h, wd) = self.value(*x).dims4();
                let (_, o, k, _) = self.value(*w).dims4();
                let (_, _, ho, wo) = node.value.dims4();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                self.accumulate(grads, *b, |db| {
                    for ni in 0..n {
                        for oc in 0..o {
                            db[oc] += gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |dw| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let xp = &xv[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                            for oc in 0..o {
                                let gp = &gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                                for ky in 0..k {
                                    let (iy0, iy1) = valid_range(h, ho, ky, stride, pad);
                                    for kx in 0..k {
                                        let (ix0, ix1) = valid_range(wd, wo, kx, stride, pad);
                                        let mut acc = 0.0;
                                        for iy in iy0..iy1 {
                                            let oy = iy * stride + ky - pad;
                                            let xrow = &xp[iy * wd..(iy + 1) * wd];
                                            let grow = &gp[oy * wo..(oy + 1) * wo];
                                            for ix in ix0..ix1 {
                                                acc += xrow[ix] * grow[ix * stride + kx - pad];
                                            }
                                        }
                                        dw[((ci * o + oc) * k + ky) * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let dxp = &mut dx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                            for oc in 0..o {
                                let gp = &gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
                                for ky in 0..k {
                                    let (iy0, iy1) = valid_range(h, ho, ky, stride, pad);
                                    for kx in 0..k {
                                        let wval = wv[((ci * o + oc) * k + ky) * k + kx];
                                        let (ix0, ix1) = valid_range(wd, wo, kx, stride, pad);
                                        for iy in iy0..iy1 {
                                            let oy = iy * stride + ky - pad;
                                            let grow = &gp[oy * wo..(oy + 1) * wo];
                                            let drow = &mut dxp[iy * wd..(iy + 1) * wd];
                                            for ix in ix0..ix1 {
                                                drow[ix] += wval * grow[ix * stride + kx - pad];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, .. } => {
                let (n, c, hw) = channel_dims(self.value(*x).shape());
                let m = (n * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for idx in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            sum_g[ci] += gd[idx];
                            sum_gx[ci] += gd[idx] * xhat[idx];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b));
                self.accumulate(grads, *x, |dx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gv[ci] * inv_std[ci] / m;
                            for idx in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                                dx[idx] += scale * (m * gd[idx] - sum_g[ci] - xhat[idx] * sum_gx[ci]);
                            }
                        }
                    }
                });
            }
            Op::MeanPool2d(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.accumulate(grads, *x, |dx| {
                    for (plane, gv) in dx.chunks_mut(hw).zip(gd) {
                        let v = gv / hw as f64;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                });
            }
            Op::GroupMax { x, argmax } => {
                let c = node.value.dims2().1;
                self.accumulate(grads, *x, |dx| {
                    for (slot, (&row, gv)) in argmax.iter().zip(gd).enumerate() {
                        dx[row * c + slot % c] += gv;
                    }
                });
            }
            Op::PointTransform { pts, t, n } => {
                let (rows, f) = self.value(*pts).dims2();
                let ff = f * f;
                let pv = self.value(*pts).data();
                let tv = self.value(*t).data();
                self.accumulate(grads, *pts, |dp| {
                    for r in 0..rows {
                        let m = &tv[(r / n) * ff..(r / n + 1) * ff];
                        for j in 0..f {
                            dp[r * f + j] += (0..f).map(|i| m[i * f + j] * gd[r * f + i]).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *t, |dt| {
                    for r in 0..rows {
                        let b = r / n;
                        for i in 0..f {
                            for j in 0..f {
                                dt[b * ff + i * f + j] += gd[r * f + i] * pv[r * f + j];
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (n, ca) = self.value(*a).dims2();
                let cb = self.value(*b).dims2().1;
                self.accumulate(grads, *a, |da| {
                    for r in 0..n {
                        for j in 0..ca {
                            da[r * ca + j] += gd[r * (ca + cb) + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for r in 0..n {
                        for j in 0..cb {
                            db[r * cb + j] += gd[r * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::GaussMin { x, n, take_x } => {
                let k = self.value(*x).dims2().1;
                self.accumulate(grads, *x, |dx| {
                    for (idx, (&t, gv)) in take_x.iter().zip(gd).enumerate() {
                        if t {
                            let r = idx / k;
                            dx[(r / n) * k + idx % k] += gv;
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.value(*logits).dims2().1;
                let scale = gd[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |dl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == lab { 1.0 } else { 0.0 };
                            dl[r * k + j] += scale * (probs[r * k + j] - target);
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let d = self.value(*a).dims2().1;
                let av = self.value(*a).data();
                let norms = node.value.data();
                self.accumulate(grads, *a, |da| {
                    for (r, (&nr, gv)) in norms.iter().zip(gd).enumerate() {
                        if nr > 0.0 {
                            for j in 0..d {
                                da[r * d + j] += gv * av[r * d + j] / nr;
                            }
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let v = gd[0] / self.value(*a).numel() as f64;
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += v));
            }
            Op::Dot { x, weights } => {
                let s = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().zip(weights).for_each(|(a, w)| *a += s * w));
            }
            Op::NormalizeRows { x, norms } => {
                let d = self.value(*x).dims2().1;
                let y = node.value.data();
                self.accumulate(grads, *x, |dx| {
                    for (r, &nr) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * proj) / nr;
                        }
                    }
                });
            }
            Op::Chamfer { x, target, n, fwd, bwd } => {
                let f = self.value(*x).dims2().1;
                let xv = self.value(*x).data();
                let n = *n;
                self.accumulate(grads, *x, |dx| {
                    for (i, &j) in fwd.iter().enumerate() {
                        let s = 2.0 * gd[i / n] / n as f64;
                        for c in 0..f {
                            dx[i * f + c] += s * (xv[i * f + c] - target[j * f + c]);
                        }
                    }
                    for (j, &i) in bwd.iter().enumerate() {
                        let s = 2.0 * gd[j / n] / n as f64;
                        for c in 0..f {
                            dx[i * f + c] += s * (xv[i * f + c] - target[j * f + c]);
                        }
                    }
                });
            }
        }
    }
}
