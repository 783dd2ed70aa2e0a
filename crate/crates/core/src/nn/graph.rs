//! Reverse-mode autodiff tape over single-sample tensors.
//!
//! A [`Graph`] records one forward pass for one sample. Batches are built by
//! running one graph per sample (possibly in parallel) and summing the
//! resulting [`Gradients`] in sample order.

use serde::{Deserialize, Serialize};

use super::tensor::{self, gemm, Tensor, KVOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors of one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Little-endian f32 concatenation of all tensors in registration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Overwrites the tensor contents from [`ParamStore::to_bytes`] output.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<(), String> {
        if bytes.len() != self.num_scalars() * 4 {
            return Err(format!("weights blob has {} bytes, expected {}", bytes.len(), self.num_scalars() * 4));
        }
        let mut chunks = bytes.chunks_exact(4);
        for t in &mut self.tensors {
            for v in &mut t.data {
                let c = chunks.next().expect("length checked");
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients; `None` for parameters the graph never touched.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    fn add_param(&mut self, id: usize, g: Tensor) {
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn accumulate(&mut self, other: Gradients) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.add_param(i, g);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.grads.iter_mut().flatten() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    /// Sums in slice order, so the result does not depend on how the parts were computed.
    pub fn sum_ordered(n: usize, parts: impl IntoIterator<Item = Gradients>) -> Gradients {
        let mut acc = Gradients::empty(n);
        for p in parts {
            acc.accumulate(p);
        }
        acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, stride: usize, cols: Vec<f32>, in_dims: [usize; 3], cin: usize },
    Upsample(Var),
    DepthToSpace(Var),
    AvgPool(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Crop { x: Var, origin: [usize; 3] },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(64) }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.tensors[id],
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).data[0]
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Tensor::zeros(vec![0]), Op::Param(id.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect());
        self.push(t, op)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape, y.shape, "elementwise op on mismatched shapes");
        let t = Tensor::new(x.shape.clone(), x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect());
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        self.unary(a, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        // Clamped so saturated outputs never go subnormal.
        self.unary(a, |v| 1.0 / (1.0 + (-v.clamp(-30.0, 30.0)).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(a))
    }

    /// `W·x + b` for `W: [out, in]`; `x` is flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = (wv.shape[0], wv.shape[1]);
        assert_eq!(xv.len(), inp, "linear: input has {} values, weight expects {inp}", xv.len());
        let mut y = bv.data.clone();
        gemm(out, inp, 1, 1.0, &wv.data, false, &xv.data, false, 1.0, &mut y);
        self.push(Tensor::new(vec![out], y), Op::Linear { x, w, b })
    }

    /// 3×3×3 convolution, padding 1, on `[C, D, H, W]` with `W: [Cout, C·27]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let cin = xv.shape[0];
        let in_dims = xv.spatial();
        let cout = wv.shape[0];
        assert_eq!(wv.shape[1], cin * KVOL, "conv weight/input channel mismatch");
        let (cols, od) = tensor::im2col(&xv.data, cin, in_dims, stride);
        let n = od[0] * od[1] * od[2];
        let mut y = vec![0.0f32; cout * n];
        for (co, chunk) in y.chunks_mut(n).enumerate() {
            chunk.fill(bv.data[co]);
        }
        gemm(cout, cin * KVOL, n, 1.0, &wv.data, false, &cols, false, 1.0, &mut y);
        let t = Tensor::new(vec![cout, od[0], od[1], od[2]], y);
        self.push(t, Op::Conv { x, w, b, stride, cols, in_dims, cin })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, d) = (xv.shape[0], xv.spatial());
        let t = Tensor::new(vec![c, 2 * d[0], 2 * d[1], 2 * d[2]], tensor::upsample2(&xv.data, c, d));
        self.push(t, Op::Upsample(x))
    }

    /// `[8c, d, h, w]` → `[c, 2d, 2h, 2w]`; see [`tensor::depth_to_space`].
    pub fn depth_to_space(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape[0] % 8, 0, "depth_to_space needs a multiple of 8 channels");
        let (c, d) = (xv.shape[0] / 8, xv.spatial());
        let t = Tensor::new(vec![c, 2 * d[0], 2 * d[1], 2 * d[2]], tensor::depth_to_space(&xv.data, c, d));
        self.push(t, Op::DepthToSpace(x))
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, d) = (xv.shape[0], xv.spatial());
        let t = Tensor::new(vec![c, d[0] / 2, d[1] / 2, d[2] / 2], tensor::avgpool2(&xv.data, c, d));
        self.push(t, Op::AvgPool(x))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape.clone();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape[1..], first[1..], "concat trailing dims differ");
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()))
    }

    /// `len` entries of the leading axis starting at `start`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let inner: usize = xv.shape[1..].iter().product();
        let mut shape = xv.shape.clone();
        shape[0] = len;
        let data = xv.data[start * inner..(start + len) * inner].to_vec();
        self.push(Tensor::new(shape, data), Op::Slice { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(shape, xv.data.clone());
        self.push(t, Op::Reshape(x))
    }

    /// Spatial crop of `[C, D, H, W]`.
    pub fn crop(&mut self, x: Var, origin: [usize; 3], size: [usize; 3]) -> Var {
        let xv = self.value(x);
        let c = xv.shape[0];
        let d = xv.spatial();
        assert!((0..3).all(|k| origin[k] + size[k] <= d[k]), "crop outside tensor");
        let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
        for ci in 0..c {
            for a in 0..size[0] {
                for b in 0..size[1] {
                    let base = ((ci * d[0] + origin[0] + a) * d[1] + origin[1] + b) * d[2] + origin[2];
                    data.extend_from_slice(&xv.data[base..base + size[2]]);
                }
            }
        }
        self.push(Tensor::new(vec![c, size[0], size[1], size[2]], data), Op::Crop { x, origin })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: f64 = xv.data.iter().map(|&v| v as f64).sum();
        let m = (s / xv.len() as f64) as f32;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(self.params.len());

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        fn map(g: &Tensor, f: impl Fn(usize, f32) -> f32) -> Tensor {
            Tensor::new(g.shape.clone(), g.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect())
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.add_param(*id, g),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, map(&g, |_, v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, map(&g, |k, v| v * bv.data[k]));
                    acc(&mut grads, *b, map(&g, |k, v| v * av.data[k]));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, map(&g, |_, v| v * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, map(&g, |k, v| if av.data[k] > 0.0 { v } else { v * slope }));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, map(&g, |k, v| v * y.data[k] * (1.0 - y.data[k])));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, map(&g, |k, v| v * (1.0 - y.data[k] * y.data[k])));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, map(&g, |k, v| v * y.data[k]));
                }
                Op::Abs(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, map(&g, |k, v| v * av.data[k].signum() * (av.data[k] != 0.0) as u8 as f32));
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, map(&g, |k, v| 2.0 * v * av.data[k]));
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    acc(&mut grads, *a, map(&g, |k, v| v / (1.0 + (-av.data[k]).exp())));
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (o, n) = (wv.shape[0], wv.shape[1]);
                    let mut gw = vec![0.0f32; o * n];
                    gemm(o, 1, n, 1.0, &g.data, false, &xv.data, false, 0.0, &mut gw);
                    let mut gx = vec![0.0f32; n];
                    gemm(n, o, 1, 1.0, &wv.data, true, &g.data, false, 0.0, &mut gx);
                    acc(&mut grads, *w, Tensor::new(vec![o, n], gw));
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), gx));
                    acc(&mut grads, *b, g);
                }
                Op::Conv { x, w, b, stride, cols, in_dims, cin } => {
                    let wv = self.value(*w);
                    let cout = wv.shape[0];
                    let k = cin * KVOL;
                    let n = g.len() / cout;
                    let mut gw = vec![0.0f32; cout * k];
                    gemm(cout, n, k, 1.0, &g.data, false, cols, true, 0.0, &mut gw);
                    let gb: Vec<f32> =
                        g.data.chunks(n).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
                    let mut gcols = vec![0.0f32; k * n];
                    gemm(k, cout, n, 1.0, &wv.data, true, &g.data, false, 0.0, &mut gcols);
                    let gx = tensor::col2im(&gcols, *cin, *in_dims, *stride);
                    acc(&mut grads, *w, Tensor::new(vec![cout, k], gw));
                    acc(&mut grads, *b, Tensor::new(vec![cout], gb));
                    acc(&mut grads, *x, Tensor::new(vec![*cin, in_dims[0], in_dims[1], in_dims[2]], gx));
                }
                Op::Upsample(x) => {
                    let xv = self.value(*x);
                    let gx = tensor::upsample2_backward(&g.data, xv.shape[0], xv.spatial());
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), gx));
                }
                Op::DepthToSpace(x) => {
                    let xv = self.value(*x);
                    let gx = tensor::space_to_depth(&g.data, xv.shape[0] / 8, xv.spatial());
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), gx));
                }
                Op::AvgPool(x) => {
                    let xv = self.value(*x);
                    let gx = tensor::avgpool2_backward(&g.data, xv.shape[0], xv.spatial());
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), gx));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let n = pv.len();
                        acc(&mut grads, *p, Tensor::new(pv.shape.clone(), g.data[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Slice { x, start } => {
                    let xv = self.value(*x);
                    let inner: usize = xv.shape[1..].iter().product();
                    let mut gx = Tensor::zeros(xv.shape.clone());
                    gx.data[start * inner..start * inner + g.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape.clone();
                    acc(&mut grads, *x, Tensor::new(shape, g.data));
                }
                Op::Crop { x, origin } => {
                    let xv = self.value(*x);
                    let d = xv.spatial();
                    let size = [g.shape[1], g.shape[2], g.shape[3]];
                    let mut gx = Tensor::zeros(xv.shape.clone());
                    let mut src = 0;
                    for ci in 0..xv.shape[0] {
                        for a in 0..size[0] {
                            for b in 0..size[1] {
                                let base = ((ci * d[0] + origin[0] + a) * d[1] + origin[1] + b) * d[2] + origin[2];
                                gx.data[base..base + size[2]].copy_from_slice(&g.data[src..src + size[2]]);
                                src += size[2];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), vec![g.data[0]; xv.len()]));
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let v = g.data[0] / xv.len() as f32;
                    acc(&mut grads, *x, Tensor::new(xv.shape.clone(), vec![v; xv.len()]));
                }
            }
        }
        out
    }
}
