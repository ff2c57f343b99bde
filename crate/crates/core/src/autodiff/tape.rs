// Define-by-run reverse-mode tape.
//
// Nodes are appended in evaluation order, so insertion order is already a
// topological order. Backward walks the node list once in reverse and
// accumulates into zero-initialized buffers; accumulation order is therefore
// fixed by insertion order, which makes repeated runs bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_index_map, broadcast_shape, col2im, im2col, keepdim_shape, matmul_kernel, matmul_nt_kernel,
    matmul_tn_kernel, reduce_to_shape, row_major_strides, ConvGeometry, Real, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    ClampMin(Var, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geo: ConvGeometry,
        cols: Vec<T>,
    },
    Reshape(Var),
    NchwToTokens(Var),
    SelectTokens(Var, Vec<usize>),
    MeanAxes(Var, Vec<usize>),
    SumAxes(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad_enabled: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Outputs of every `detach` call, in call order.
    detached: Vec<Var>,
    /// When set, `detach` replays these values instead of copying its input.
    frozen: Option<Vec<Tensor<T>>>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visits: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when `v` was unreachable.
    pub fn wrt_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }

    /// Number of nodes visited by the backward sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            detached: Vec::new(),
            frozen: None,
        }
    }

    /// A tape whose `detach` calls return `values` in order, regardless of
    /// their inputs. Used to hold stop-gradient targets fixed while probing
    /// an objective with finite differences.
    pub fn with_frozen_detached(values: Vec<Tensor<T>>) -> Self {
        Tape {
            frozen: Some(values),
            ..Tape::new()
        }
    }

    /// Values produced by `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor<T>> {
        self.detached.iter().map(|&v| self.value(v).clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad_enabled(&self, v: Var) -> bool {
        self.nodes[v.0].grad_enabled
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad_enabled: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad_enabled)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Stop-gradient: same values, no edge back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = match &self.frozen {
            Some(vals) => {
                let v = vals
                    .get(self.detached.len())
                    .expect("more detach calls than frozen values")
                    .clone();
                assert_eq!(v.shape(), self.shape(x), "frozen detach value has the wrong shape");
                v
            }
            None => self.nodes[x.0].value.clone(),
        };
        let out = self.constant(value);
        self.detached.push(out);
        out
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Ok((Tensor::new(out_shape, data)?, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, g) = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), g))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let g = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, c), g)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        let g = self.any_grad(&[x]);
        self.push(t, Op::AddScalar(x), g)
    }

    /// Elementwise max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let g = self.any_grad(&[x]);
        self.push(t, Op::Relu(x), g)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let g = self.any_grad(&[x]);
        self.push(t, Op::Square(x), g)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.sqrt());
        let g = self.any_grad(&[x]);
        self.push(t, Op::Sqrt(x), g)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.abs());
        let g = self.any_grad(&[x]);
        self.push(t, Op::Abs(x), g)
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let t = self.value(x).map(|v| if v > floor { v } else { floor });
        let g = self.any_grad(&[x]);
        self.push(t, Op::ClampMin(x, floor), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, p);
        let t = Tensor::new(vec![m, p], data)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), g))
    }

    /// Cross-correlation with zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(k), stride, pad)?;
        let (img_len, cols_len) = (geo.in_channels * geo.in_h * geo.in_w, geo.patch_len() * geo.positions());
        let out_len = geo.out_channels * geo.positions();
        let mut cols = Vec::with_capacity(geo.batch * cols_len);
        let mut out = Vec::with_capacity(geo.batch * out_len);
        {
            let xd = self.value(x).data();
            let kd = self.value(k).data();
            for b in 0..geo.batch {
                let c = im2col(&geo, &xd[b * img_len..(b + 1) * img_len]);
                out.extend(matmul_kernel(
                    kd,
                    &c,
                    geo.out_channels,
                    geo.patch_len(),
                    geo.positions(),
                ));
                cols.extend(c);
            }
        }
        let t = Tensor::new(geo.out_shape(), out)?;
        let g = self.any_grad(&[x, k]);
        Ok(self.push(t, Op::Conv2d { x, k, geo, cols }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    /// B×C×H×W → B×(H·W)×C, or B×C → B×1×C.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        match shape.len() {
            2 => self.reshape(x, &[shape[0], 1, shape[1]]),
            4 => {
                let (b, c, n) = (shape[0], shape[1], shape[2] * shape[3]);
                let src = self.value(x).data();
                let mut data = vec![T::zero(); b * n * c];
                for bi in 0..b {
                    for ci in 0..c {
                        for ni in 0..n {
                            data[(bi * n + ni) * c + ci] = src[(bi * c + ci) * n + ni];
                        }
                    }
                }
                let t = Tensor::new(vec![b, n, c], data)?;
                let g = self.any_grad(&[x]);
                Ok(self.push(t, Op::NchwToTokens(x), g))
            }
            _ => Err(Error::Dimension(format!(
                "token view needs a rank-2 or rank-4 tensor, got {shape:?}"
            ))),
        }
    }

    /// Gather rows `idx` along the token axis of a B×N×C tensor.
    pub fn index_select_tokens(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("token gather needs B×N×C, got {shape:?}")));
        }
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("token index {i} out of range [0,{n})")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Index(format!("duplicate token index {i}")));
            }
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * idx.len() * c);
        for bi in 0..b {
            for &i in idx {
                let start = (bi * n + i) * c;
                data.extend_from_slice(&src[start..start + c]);
            }
        }
        let t = Tensor::new(vec![b, idx.len(), c], data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::SelectTokens(x, idx.to_vec()), g))
    }

    fn check_axes(&self, x: Var, axes: &[usize]) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(x);
        if axes.is_empty() {
            return Err(Error::Contract("reduction needs at least one axis".into()));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || *sorted.last().unwrap() >= shape.len() {
            return Err(Error::Dimension(format!("invalid axes {axes:?} for shape {shape:?}")));
        }
        let count: usize = sorted.iter().map(|&a| shape[a]).product();
        if count == 0 {
            return Err(Error::Degenerate(format!(
                "empty reduction over axes {axes:?} of {shape:?}"
            )));
        }
        Ok((sorted, count))
    }

    /// For every input element, the flat index of its group in the keepdim output.
    fn group_index(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
        let out_strides = row_major_strides(out_shape);
        let rank = in_shape.len();
        let mut strides = vec![0; rank];
        for d in 0..rank {
            if out_shape[d] != 1 {
                strides[d] = out_strides[d];
            }
        }
        let total: usize = in_shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut idx = 0usize;
        for _ in 0..total {
            map.push(idx);
            for d in (0..rank).rev() {
                counter[d] += 1;
                idx += strides[d];
                if counter[d] < in_shape[d] {
                    break;
                }
                idx -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        map
    }

    /// Mean over `axes`, keeping them as extent 1.
    ///
    /// Each group is shifted by its first element before summing, so a
    /// constant group returns that constant exactly.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (axes, count) = self.check_axes(x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = keepdim_shape(&shape, &axes);
        let groups: usize = out_shape.iter().product();
        let map = Self::group_index(&shape, &out_shape);
        let src = self.value(x).data();
        let mut first: Vec<Option<T>> = vec![None; groups];
        let mut acc = vec![T::zero(); groups];
        for (&g, &v) in map.iter().zip(src) {
            let base = *first[g].get_or_insert(v);
            acc[g] = acc[g] + (v - base);
        }
        let n = T::lit(count as f64);
        let data = first
            .iter()
            .zip(&acc)
            .map(|(f, &a)| f.unwrap_or_else(T::zero) + a / n)
            .collect();
        let t = Tensor::new(out_shape, data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::MeanAxes(x, axes), g))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let (axes, _) = self.check_axes(x, axes)?;
        let shape = self.shape(x).to_vec();
        let out_shape = keepdim_shape(&shape, &axes);
        let map = Self::group_index(&shape, &out_shape);
        let mut data = vec![T::zero(); out_shape.iter().product()];
        for (&g, &v) in map.iter().zip(self.value(x).data()) {
            data[g] = data[g] + v;
        }
        let t = Tensor::new(out_shape, data)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::SumAxes(x), g))
    }

    /// Mean and population variance over `axes`, both with keepdim shapes.
    pub fn moments(&mut self, x: Var, axes: &[usize]) -> Result<(Var, Var)> {
        let mean = self.mean_axes(x, axes)?;
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered);
        let var = self.mean_axes(sq, axes)?;
        Ok((mean, var))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(Error::Degenerate("mean of an empty tensor".into()));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s / T::lit(len as f64)), Op::Mean(x), g))
    }

    /// Batch mean of −log softmax(logits)[label], max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross-entropy on logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        if b == 0 {
            return Err(Error::Degenerate("cross-entropy on an empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range [0,{k})")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for i in 0..b {
            let row = &src[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                z = z + e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / z;
            }
            total = total + (z.ln() + max - row[labels[i]]);
        }
        let loss = total / T::lit(b as f64);
        let g = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            g,
        ))
    }

    /// Reverse sweep from a scalar root. Every node is visited exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].grad_enabled {
            grads[root.0] = Some(Tensor::ones(self.shape(root).to_vec()));
        }
        let mut visits = 0;
        for i in (0..self.nodes.len()).rev() {
            visits += 1;
            let node = &self.nodes[i];
            if !node.grad_enabled {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visits })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.nodes[v.0].grad_enabled {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()));
        buf.add_assign(&contrib);
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                self.accumulate(grads, *b, reduce_to_shape(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                let neg = g.map(|v| -v);
                self.accumulate(grads, *b, reduce_to_shape(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.grad_enabled(*a) {
                    let ga = self.broadcast_product(g, vb, |gv, y| gv * y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&ga, va.shape()));
                }
                if self.grad_enabled(*b) {
                    let gb = self.broadcast_product(g, va, |gv, x| gv * x)?;
                    self.accumulate(grads, *b, reduce_to_shape(&gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.grad_enabled(*a) {
                    let ga = self.broadcast_product(g, vb, |gv, y| gv / y)?;
                    self.accumulate(grads, *a, reduce_to_shape(&ga, va.shape()));
                }
                if self.grad_enabled(*b) {
                    // d(a/b)/db = −out/b
                    let gq: Vec<T> = g.data().iter().zip(out.data()).map(|(&x, &q)| x * q).collect();
                    let gq = Tensor::new(g.shape().to_vec(), gq)?;
                    let gb = self.broadcast_product(&gq, vb, |v, y| -v / y)?;
                    self.accumulate(grads, *b, reduce_to_shape(&gb, vb.shape()));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| two * xv * gv)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                // A zero upstream gradient stays zero even where sqrt has a vertical tangent.
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &s)| if gv == T::zero() { T::zero() } else { gv / (two * s) })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::Abs(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::ClampMin(x, floor) => {
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > *floor { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.grad_enabled(*a) {
                    let ga = matmul_nt_kernel(g.data(), vb.data(), m, p, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.grad_enabled(*b) {
                    let gb = matmul_tn_kernel(va.data(), g.data(), m, k, p);
                    self.accumulate(grads, *b, Tensor::new(vec![k, p], gb)?);
                }
            }
            Op::Conv2d { x, k, geo, cols } => {
                let (cl, pl, pos) = (geo.patch_len() * geo.positions(), geo.patch_len(), geo.positions());
                let ol = geo.out_channels * pos;
                let il = geo.in_channels * geo.in_h * geo.in_w;
                if self.grad_enabled(*k) {
                    let mut gk = Tensor::zeros(self.shape(*k).to_vec());
                    for b in 0..geo.batch {
                        let part = matmul_nt_kernel(
                            &g.data()[b * ol..(b + 1) * ol],
                            &cols[b * cl..(b + 1) * cl],
                            geo.out_channels,
                            pos,
                            pl,
                        );
                        for (acc, v) in gk.data_mut().iter_mut().zip(part) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *k, gk);
                }
                if self.grad_enabled(*x) {
                    let kd = self.value(*k).data();
                    let mut gx = Tensor::zeros(self.shape(*x).to_vec());
                    for b in 0..geo.batch {
                        let gcols = matmul_tn_kernel(kd, &g.data()[b * ol..(b + 1) * ol], geo.out_channels, pl, pos);
                        col2im(geo, &gcols, &mut gx.data_mut()[b * il..(b + 1) * il]);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x).to_vec())?);
            }
            Op::NchwToTokens(x) => {
                let s = self.shape(*x).to_vec();
                let (b, c, n) = (s[0], s[1], s[2] * s[3]);
                let mut data = vec![T::zero(); b * c * n];
                for bi in 0..b {
                    for ci in 0..c {
                        for ni in 0..n {
                            data[(bi * c + ci) * n + ni] = g.data()[(bi * n + ni) * c + ci];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, data)?);
            }
            Op::SelectTokens(x, idx) => {
                let s = self.shape(*x).to_vec();
                let (b, n, c) = (s[0], s[1], s[2]);
                let mut gx = Tensor::zeros(s);
                let gd = g.data();
                let dst = gx.data_mut();
                for bi in 0..b {
                    for (r, &i) in idx.iter().enumerate() {
                        let from = (bi * idx.len() + r) * c;
                        let to = (bi * n + i) * c;
                        for ci in 0..c {
                            dst[to + ci] = dst[to + ci] + gd[from + ci];
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAxes(x, axes) => {
                let s = self.shape(*x);
                let count: usize = axes.iter().map(|&a| s[a]).product();
                let inv = T::one() / T::lit(count as f64);
                let map = broadcast_index_map(g.shape(), s);
                let data = map.iter().map(|&i| g.data()[i] * inv).collect();
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), data)?);
            }
            Op::SumAxes(x) => {
                let s = self.shape(*x);
                let map = broadcast_index_map(g.shape(), s);
                let data = map.iter().map(|&i| g.data()[i]).collect();
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), data)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len() as f64);
                let gv = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let s = self.shape(*logits).to_vec();
                let (b, k) = (s[0], s[1]);
                let scale = g.data()[0] / T::lit(b as f64);
                let mut data = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    data[i * k + l] = data[i * k + l] - T::one();
                }
                for v in &mut data {
                    *v = *v * scale;
                }
                self.accumulate(grads, *logits, Tensor::new(s, data)?);
            }
        }
        Ok(())
    }

    /// Elementwise `f(g, other)` with `other` broadcast to the shape of `g`.
    fn broadcast_product(&self, g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let data = if g.shape() == other.shape() {
            g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
        } else {
            let map = broadcast_index_map(other.shape(), g.shape());
            g.data().iter().zip(map).map(|(&a, j)| f(a, other.data()[j])).collect()
        };
        Tensor::new(g.shape().to_vec(), data)
    }
}
