//! Dense f64 tensors and a reverse-mode tape.
//!
//! Feature maps are laid out `[batch, channels, spatial...]`, row-major.
//! Every op is recorded with enough state to run its exact backward pass.

use crate::error::{NeuralError, Result};

pub type NodeId = usize;

const NONE: u32 = u32::MAX;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NeuralError::shape("tensor", format!("{n} values for {shape:?}"), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-axis padding and dilation of a convolution over the spatial axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub pad: Vec<usize>,
    pub dilation: Vec<usize>,
}

impl ConvSpec {
    /// Output size equals input size (odd kernels).
    pub fn same(kernel: &[usize]) -> Self {
        Self {
            pad: kernel.iter().map(|k| (k - 1) / 2).collect(),
            dilation: vec![1; kernel.len()],
        }
    }

    pub fn valid(rank: usize) -> Self {
        Self {
            pad: vec![0; rank],
            dilation: vec![1; rank],
        }
    }
}

#[derive(Debug, Clone)]
struct ConvGeom {
    n: usize,
    ci: usize,
    co: usize,
    in_sp: usize,
    out_sp: usize,
    kk: usize,
    /// `table[k * out_sp + q]` is the input offset read by kernel tap `k` at
    /// output position `q`, or `NONE` in the padding.
    table: Vec<u32>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: Box<ConvGeom> },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Reshape(NodeId),
    Mean { x: NodeId, axis: usize },
    Max { x: NodeId, arg: Vec<usize> },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Mse { pred: NodeId, target: NodeId },
    SumAll(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<usize>,
}

/// Batch statistics recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every parameter leaf reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some((((*p)?), g.as_deref()?)))
    }
}

fn broadcast_shape(layer: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(NeuralError::shape(layer, format!("rank {}", a.len()), b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(NeuralError::shape(layer, format!("broadcastable with {a:?}"), b)),
        })
        .collect()
}

/// Flat input index for every flat output index under broadcasting.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if inp[d] == 1 { 0 } else { s };
        s *= inp[d];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = a · b` for row-major views given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64], accumulate: bool) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the caller's slices cover every element addressed by the
    // given dims and strides; c is a dense m × n row-major block.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to parameter `index`.
    pub fn param(&mut self, index: usize, t: Tensor, trainable: bool) -> NodeId {
        let id = self.push(t, Op::Leaf, trainable);
        self.nodes[id].param = Some(index);
        id
    }

    /// Convolution over all spatial axes: `x [N, Ci, S...]`, `w [Co, Ci, K...]`.
    pub fn conv(&mut self, layer: &str, x: NodeId, w: NodeId, b: Option<NodeId>, spec: &ConvSpec) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let rank = ws.len().saturating_sub(2);
        if xs.len() != ws.len() || rank == 0 || spec.pad.len() != rank || spec.dilation.len() != rank {
            return Err(NeuralError::shape(layer, format!("input of rank {} with {rank} spatial axes", ws.len()), &xs));
        }
        if xs[1] != ws[1] {
            return Err(NeuralError::shape(layer, format!("{} input channels", ws[1]), &xs));
        }
        let (n, ci, co) = (xs[0], xs[1], ws[0]);
        let in_dims = &xs[2..];
        let k_dims = &ws[2..];
        let mut out_dims = Vec::with_capacity(rank);
        for j in 0..rank {
            let span = spec.dilation[j] * (k_dims[j] - 1);
            let padded = in_dims[j] + 2 * spec.pad[j];
            if padded <= span {
                return Err(NeuralError::shape(layer, format!("spatial axis {j} longer than kernel span {span}"), &xs));
            }
            out_dims.push(padded - span);
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(NeuralError::shape(layer, format!("bias [{co}]"), self.shape(b)));
            }
        }
        let in_sp: usize = in_dims.iter().product();
        let out_sp: usize = out_dims.iter().product();
        let kk: usize = k_dims.iter().product();

        let mut table = vec![NONE; kk * out_sp];
        let mut kidx = vec![0usize; rank];
        for k in 0..kk {
            let mut rem = k;
            for j in (0..rank).rev() {
                kidx[j] = rem % k_dims[j];
                rem /= k_dims[j];
            }
            for q in 0..out_sp {
                let mut rem = q;
                let mut flat = 0usize;
                let mut valid = true;
                let mut stride = 1usize;
                for j in (0..rank).rev() {
                    let o = rem % out_dims[j];
                    rem /= out_dims[j];
                    let i = (o + kidx[j] * spec.dilation[j]) as isize - spec.pad[j] as isize;
                    if i < 0 || i >= in_dims[j] as isize {
                        valid = false;
                        break;
                    }
                    flat += i as usize * stride;
                    stride *= in_dims[j];
                }
                if valid {
                    table[k * out_sp + q] = flat as u32;
                }
            }
        }
        let geom = ConvGeom {
            n,
            ci,
            co,
            in_sp,
            out_sp,
            kk,
            table,
        };
        let cols = im2col(&self.nodes[x].value.data, &geom);
        let nq = n * out_sp;
        let mut mat = vec![0.0; co * nq];
        let wv = &self.nodes[w].value.data;
        gemm(co, ci * kk, nq, wv, (ci * kk) as isize, 1, &cols, nq as isize, 1, &mut mat, false);
        let mut out = vec![0.0; n * co * out_sp];
        let bias = b.map(|b| &self.nodes[b].value.data);
        for c in 0..co {
            let bc = bias.map_or(0.0, |b| b[c]);
            for s in 0..n {
                let src = &mat[c * nq + s * out_sp..][..out_sp];
                let dst = &mut out[(s * co + c) * out_sp..][..out_sp];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bc;
                }
            }
        }
        let mut shape = vec![n, co];
        shape.extend(out_dims);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv { x, w, b, geom: Box::new(geom) }, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        };
        let ng = self.ng(&[x]);
        self.push(t, Op::Sigmoid(x), ng)
    }

    fn binary(&mut self, layer: &str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(layer, sa, sb)?;
        let (va, vb) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&shape, sa);
            let mb = broadcast_map(&shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((Tensor { shape, data }, self.ng(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, ng) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, ng) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, ng) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(parts[0]).to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(NeuralError::shape("concat", format!("[{}, _, {:?}]", first[0], &first[2..]), s));
            }
            channels += s[1];
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &p in parts {
                let v = &self.nodes[p].value;
                let block = v.shape[1] * inner;
                data.extend_from_slice(&v.data[s * block..(s + 1) * block]);
            }
        }
        let mut shape = first;
        shape[1] = channels;
        let ng = self.ng(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), ng))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || start + len > s[1] || len == 0 {
            return Err(NeuralError::shape("slice", format!("channels {start}..{}", start + len), &s));
        }
        let inner: usize = s[2..].iter().product();
        let v = &self.nodes[x].value.data;
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for n in 0..s[0] {
            let base = (n * s[1] + start) * inner;
            data.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Slice { x, start }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(NeuralError::shape("reshape", format!("{} values", v.len()), shape));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean over `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = &self.nodes[x].value;
        let (outer, len, inner) = axis_split(&v.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data[(o * len + l) * inner..][..inner];
                for (d, s) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= len as f64);
        let mut shape = v.shape.clone();
        shape[axis] = 1;
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::Mean { x, axis }, ng)
    }

    /// Max over `axis`, keeping it with length 1. Ties go to the lowest index.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = &self.nodes[x].value;
        let (outer, len, inner) = axis_split(&v.shape, axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if v.data[src] > data[dst] {
                        data[dst] = v.data[src];
                        arg[dst] = src;
                    }
                }
            }
        }
        let mut shape = v.shape.clone();
        shape[axis] = 1;
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::Max { x, arg }, ng)
    }

    /// Pairwise mean along the last axis; an odd tail element stands alone.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let l = *v.shape.last().unwrap();
        let lo = l.div_ceil(2);
        let rows = v.len() / l;
        let mut data = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            let src = &v.data[r * l..][..l];
            for j in 0..lo {
                if 2 * j + 1 < l {
                    data.push(0.5 * (src[2 * j] + src[2 * j + 1]));
                } else {
                    data.push(src[2 * j]);
                }
            }
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = lo;
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour upsampling of the last axis to `len` (= 2l or 2l − 1).
    pub fn upsample2(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        let v = &self.nodes[x].value;
        let l = *v.shape.last().unwrap();
        if len.div_ceil(2) != l {
            return Err(NeuralError::shape("upsample", format!("target length with ceil(len/2) = {l}"), len));
        }
        let rows = v.len() / l;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let src = &v.data[r * l..][..l];
            data.extend((0..len).map(|j| src[j / 2]));
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::Upsample2(x), ng))
    }

    /// Per-channel normalization. Training mode uses batch statistics (also
    /// returned); evaluation mode uses the given running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let v = &self.nodes[x].value;
        let c = v.shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(NeuralError::shape("batch_norm", format!("gamma/beta [{c}]"), self.shape(gamma)));
        }
        let n = v.shape[0];
        let inner: usize = v.shape[2..].iter().product();
        let m = (n * inner) as f64;
        let (mean, var, train) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += v.data[(b * c + ch) * inner..][..inner].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += v.data[(b * c + ch) * inner..][..inner].iter().map(|x| (x - mu).powi(2)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = &self.nodes[gamma].value.data;
        let bt = &self.nodes[beta].value.data;
        let mut xhat = vec![0.0; v.len()];
        let mut out = vec![0.0; v.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (v.data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let shape = v.shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        let id = self.push(
            Tensor { shape, data: out },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        );
        Ok((id, train.then_some(BatchStats { mean, var })))
    }

    /// Mean squared error as a one-element tensor.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (&self.nodes[pred].value, &self.nodes[target].value);
        if p.shape != t.shape {
            return Err(NeuralError::shape("mse", format!("{:?}", t.shape), &p.shape));
        }
        let s: f64 = p.data.iter().zip(&t.data).map(|(a, b)| (a - b).powi(2)).sum();
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![s / p.len() as f64],
            },
            Op::Mse { pred, target },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.data.iter().sum();
        let ng = self.ng(&[x]);
        self.push(
            Tensor {
                shape: vec![1],
                data: vec![s],
            },
            Op::SumAll(x),
            ng,
        )
    }

    /// Reverse pass from the one-element node `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0; self.nodes[root].value.len()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn backprop(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[target].needs_grad {
                return;
            }
            let slot = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (n, ci, co, out_sp, kk) = (geom.n, geom.ci, geom.co, geom.out_sp, geom.kk);
                let nq = n * out_sp;
                let mut dmat = vec![0.0; co * nq];
                for s in 0..n {
                    for c in 0..co {
                        dmat[c * nq + s * out_sp..][..out_sp].copy_from_slice(&g[(s * co + c) * out_sp..][..out_sp]);
                    }
                }
                if self.wants(*w) {
                    let cols = im2col(&self.nodes[*x].value.data, geom);
                    acc(*w, &mut |dw| {
                        gemm(co, nq, ci * kk, &dmat, nq as isize, 1, &cols, 1, nq as isize, dw, true);
                    });
                }
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += dmat[c * nq..(c + 1) * nq].iter().sum::<f64>();
                        }
                    });
                }
                if self.wants(*x) {
                    let wv = &self.nodes[*w].value.data;
                    let mut dcols = vec![0.0; ci * kk * nq];
                    gemm(ci * kk, co, nq, wv, 1, (ci * kk) as isize, &dmat, nq as isize, 1, &mut dcols, false);
                    acc(*x, &mut |dx| col2im(&dcols, geom, dx));
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value.data;
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let out = &node.value.shape;
                for (t, s) in [(*a, 1.0), (*b, sign)] {
                    let ts = &self.nodes[t].value.shape;
                    if ts == out {
                        acc(t, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
                    } else {
                        let map = broadcast_map(out, ts);
                        acc(t, &mut |d| map.iter().zip(g).for_each(|(&i, g)| d[i] += s * g));
                    }
                }
            }
            Op::Mul(a, b) => {
                let out = &node.value.shape;
                for (t, o) in [(*a, *b), (*b, *a)] {
                    let ts = &self.nodes[t].value.shape;
                    let os = &self.nodes[o].value.shape;
                    let ov = &self.nodes[o].value.data;
                    let mt = (ts != out).then(|| broadcast_map(out, ts));
                    let mo = (os != out).then(|| broadcast_map(out, os));
                    acc(t, &mut |d| {
                        for k in 0..g.len() {
                            let i = mt.as_ref().map_or(k, |m| m[k]);
                            let j = mo.as_ref().map_or(k, |m| m[k]);
                            d[i] += g[k] * ov[j];
                        }
                    });
                }
            }
            Op::Concat(parts) => {
                let n = node.value.shape[0];
                let inner: usize = node.value.shape[2..].iter().product();
                let total = node.value.shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.nodes[p].value.shape[1] * inner;
                    acc(p, &mut |d| {
                        for s in 0..n {
                            let src = &g[s * total + offset..][..block];
                            d[s * block..][..block].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { x, start } => {
                let xs = &self.nodes[*x].value.shape;
                let inner: usize = xs[2..].iter().product();
                let len = node.value.shape[1];
                acc(*x, &mut |d| {
                    for s in 0..xs[0] {
                        let base = (s * xs[1] + start) * inner;
                        let src = &g[s * len * inner..][..len * inner];
                        d[base..base + len * inner].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(&self.nodes[*x].value.shape, *axis);
                let inv = 1.0 / len as f64;
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[(o * len + l) * inner + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                });
            }
            Op::Max { x, arg, .. } => acc(*x, &mut |d| arg.iter().zip(g).for_each(|(&i, g)| d[i] += g)),
            Op::AvgPool2(x) => {
                let l = *self.nodes[*x].value.shape.last().unwrap();
                let lo = l.div_ceil(2);
                acc(*x, &mut |d| {
                    for r in 0..d.len() / l {
                        for j in 0..lo {
                            let gv = g[r * lo + j];
                            if 2 * j + 1 < l {
                                d[r * l + 2 * j] += 0.5 * gv;
                                d[r * l + 2 * j + 1] += 0.5 * gv;
                            } else {
                                d[r * l + 2 * j] += gv;
                            }
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let l = *self.nodes[*x].value.shape.last().unwrap();
                let len = *node.value.shape.last().unwrap();
                acc(*x, &mut |d| {
                    for r in 0..d.len() / l {
                        for j in 0..len {
                            d[r * l + j / 2] += g[r * len + j];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = &node.value.shape;
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gv = &self.nodes[*gamma].value.data;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |d| d.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v));
                acc(*beta, &mut |d| d.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v));
                acc(*x, &mut |d| {
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * inner;
                            let k = gv[ch] * inv_std[ch];
                            for i in base..base + inner {
                                d[i] += if *train {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let p = &self.nodes[*pred].value.data;
                let t = &self.nodes[*target].value.data;
                let k = 2.0 * g[0] / p.len() as f64;
                acc(*pred, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += k * (p[i] - t[i]);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (n, ci, in_sp, out_sp, kk) = (geom.n, geom.ci, geom.in_sp, geom.out_sp, geom.kk);
    let nq = n * out_sp;
    let mut cols = vec![0.0; ci * kk * nq];
    for s in 0..n {
        for c in 0..ci {
            let xs = &x[(s * ci + c) * in_sp..][..in_sp];
            for k in 0..kk {
                let tbl = &geom.table[k * out_sp..][..out_sp];
                let dst = &mut cols[(c * kk + k) * nq + s * out_sp..][..out_sp];
                for (d, &t) in dst.iter_mut().zip(tbl) {
                    if t != NONE {
                        *d = xs[t as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let (n, ci, in_sp, out_sp, kk) = (geom.n, geom.ci, geom.in_sp, geom.out_sp, geom.kk);
    let nq = n * out_sp;
    for s in 0..n {
        for c in 0..ci {
            let xs = &mut dx[(s * ci + c) * in_sp..][..in_sp];
            for k in 0..kk {
                let tbl = &geom.table[k * out_sp..][..out_sp];
                let src = &dcols[(c * kk + k) * nq + s * out_sp..][..out_sp];
                for (&v, &t) in src.iter().zip(tbl) {
                    if t != NONE {
                        xs[t as usize] += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut tape = Tape::new();
        let xv: Vec<f64> = (0..2 * 3 * 7).map(|i| (i as f64).sin()).collect();
        let x = tape.input(t(&[2, 3, 7], &xv));
        let mut w = vec![0.0; 3 * 3 * 3];
        for c in 0..3 {
            w[(c * 3 + c) * 3 + 1] = 1.0;
        }
        let w = tape.input(t(&[3, 3, 3], &w));
        let y = tape.conv("id", x, w, None, &ConvSpec::same(&[3])).unwrap();
        assert_eq!(tape.value(y).data, xv);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut tape = Tape::new();
        let xv: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let x = tape.input(t(&[1, 1, 10], &xv));
        let w = tape.input(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let b = tape.input(t(&[1], &[0.5]));
        let y = tape.conv("c", x, w, Some(b), &ConvSpec::same(&[3])).unwrap();
        for i in 0..10 {
            let at = |j: isize| if (0..10).contains(&j) { xv[j as usize] } else { 0.0 };
            let e = at(i as isize - 1) + 2.0 * at(i as isize) + 3.0 * at(i as isize + 1) + 0.5;
            assert_eq!(tape.value(y).data[i], e);
        }
    }

    #[test]
    fn valid_band_kernel_collapses_axis() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[1, 1, 4, 5], 1.0));
        let w = tape.input(Tensor::filled(&[2, 1, 4, 1], 0.25));
        let y = tape.conv("bands", x, w, None, &ConvSpec::valid(2)).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 1, 5]);
        assert!(tape.value(y).data.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn conv_reports_layer_on_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 8]));
        let w = tape.input(Tensor::zeros(&[4, 3, 3]));
        let err = tape.conv("trunk.0", x, w, None, &ConvSpec::same(&[3])).unwrap_err();
        assert!(err.to_string().starts_with("trunk.0"), "{err}");
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1, 1, 4], &[-1.0, 2.0, -0.5, 3.0]));
        let y = tape.relu(x);
        let s = tape.sum_all(y);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_map_follows_strides() {
        assert_eq!(broadcast_map(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_map(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn pool_and_upsample_lengths() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 5], &[1.0, 3.0, 5.0, 7.0, 9.0]));
        let p = tape.avg_pool2(x);
        assert_eq!(tape.value(p).data, vec![2.0, 6.0, 9.0]);
        let u = tape.upsample2(p, 5).unwrap();
        assert_eq!(tape.value(u).data, vec![2.0, 2.0, 6.0, 6.0, 9.0]);
        assert!(tape.upsample2(p, 8).is_err());
    }
}
