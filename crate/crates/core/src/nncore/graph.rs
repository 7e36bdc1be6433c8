//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar output with respect to every node.

use super::kernels::{self, ConvDims, ConvGeom};
use super::params::ParamStore;
use super::tensor::{inverse_axes, permute_data, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    AddBias(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MeanAxis { x: Var, axis: usize },
    Bce { p: Var, target: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a named parameter; repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?
            .clone();
        let v = self.input(t);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(n, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (n.clone(), g)
            })
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vb.numel();
        if vx.shape().last() != Some(&n) || vb.rank() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, bv) in row.iter_mut().zip(vb.data()) {
                *r += *bv;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// Adds a constant tensor that receives no gradient.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(Error::shape(
                "add_const",
                format!("{:?} vs {:?}", vx.shape(), c.shape()),
            ));
        }
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| *a + *b).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddConst(x)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| *v * c).collect())
            .expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.rank() != 2 || vx.rank() == 0 || vx.shape().last() != Some(&vw.shape()[0]) {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", vx.shape(), vw.shape()),
            ));
        }
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        let rows = vx.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        kernels::gemm(false, false, rows, n, k, vx.data(), vw.data(), &mut out);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    /// Affine map over the last axis: `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Batched matmul `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` for `b[B,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3 || vb.rank() != 3 || va.shape()[0] != vb.shape()[0] {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (kb, n) = if trans_b {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        if kb != k {
            return Err(Error::shape(
                "bmm",
                format!("inner dims {k} vs {kb} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::gemm(
                false,
                trans_b,
                m,
                n,
                k,
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.rank()];
        if axes.len() != vx.rank() || axes.iter().any(|&a| a >= seen.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} for shape {:?}", vx.shape()),
            ));
        }
        let (data, shape) = permute_data(vx.data(), vx.shape(), axes);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v.max(T::zero())).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Normalizes over the last axis (eps 1e-5), then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if vg.numel() != d || vb.numel() != d || d == 0 {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let rows = vx.numel() / d;
        let mut out = Vec::with_capacity(vx.numel());
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in vx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Channels-last cross-correlation: `x[t,h,w,cin]`, `w[kt,kh,kw,cin,cout]`, `b[cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.rank() != 4 || vw.rank() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?}, kernel {:?}", vx.shape(), vw.shape()),
            ));
        }
        let xs = vx.shape();
        let ws = vw.shape();
        if ws[..3] != geom.kernel || ws[3] != xs[3] || vb.numel() != ws[4] {
            return Err(Error::shape(
                "conv3d",
                format!("input {xs:?}, kernel {ws:?}, bias {:?}, geom {geom:?}", vb.shape()),
            ));
        }
        let input = [xs[0], xs[1], xs[2]];
        let output = geom.output_dims(input).ok_or_else(|| {
            Error::shape("conv3d", format!("input {xs:?} smaller than kernel {:?}", geom.kernel))
        })?;
        let dims = ConvDims {
            input,
            output,
            cin: xs[3],
            cout: ws[4],
        };
        let mut out = vec![T::zero(); output.iter().product::<usize>() * dims.cout];
        kernels::conv3d_forward(&geom, &dims, vx.data(), vw.data(), vb.data(), &mut out);
        let out = Tensor::new(vec![output[0], output[1], output[2], dims.cout], out)?;
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }))
    }

    /// 2-D cross-correlation on `x[h,w,cin]` with `w[kh,kw,cin,cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: [usize; 2], stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let x4 = self.reshape(x, &[1, xs[0], xs[1], xs[2]])?;
        let w5 = self.reshape(w, &[1, ws[0], ws[1], ws[2], ws[3]])?;
        let geom = ConvGeom {
            kernel: [1, kernel[0], kernel[1]],
            stride: [1, stride[0], stride[1]],
            pad: [0, pad[0], pad[1]],
        };
        let y = self.conv3d(x4, w5, b, geom)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &ys[1..])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || vx.shape()[axis] == 0 {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} of {:?}", vx.shape()),
            ));
        }
        let s = vx.shape();
        let outer: usize = s[..axis].iter().product();
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let inv = T::one() / T::of(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &vx.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                kernels::axpy(inv, src, &mut out[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `target`.
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, p: Var, target: &[T]) -> Result<Var> {
        let vp = self.value(p);
        if vp.numel() != target.len() || target.is_empty() {
            return Err(Error::shape(
                "bce_loss",
                format!("{} probabilities vs {} targets", vp.numel(), target.len()),
            ));
        }
        let loss = vp
            .data()
            .iter()
            .zip(target)
            .map(|(&pv, &y)| bce(pv, y))
            .sum::<T>()
            / T::of(target.len() as f64);
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                target: target.to_vec(),
            },
        ))
    }

    /// `Σ x·weights`, used to reduce tensors to scalars in gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != weights.len() {
            return Err(Error::shape("weighted_sum", "weight count"));
        }
        let s = kernels::dot(vx.data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(slot!(*a), g);
                add_into(slot!(*b), g);
            }
            Op::AddBias(x, b) => {
                add_into(slot!(*x), g);
                let gb = slot!(*b);
                let n = gb.len();
                for row in g.chunks(n) {
                    add_into(gb, row);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => add_into(slot!(*x), g),
            Op::Scale(x, c) => kernels::axpy(*c, g, slot!(*x)),
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let rows = g.len() / n;
                let (xv, wv) = (val(*x).to_vec(), val(*w));
                kernels::gemm(false, true, rows, k, n, g, wv, slot!(*x));
                kernels::gemm(true, false, k, n, rows, &xv, g, slot!(*w));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (bs * m);
                let (av, bv) = (val(*a), val(*b));
                {
                    let ga = slot!(*a);
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        // ga = g · op(b)ᵀ
                        kernels::gemm(false, !*trans_b, m, k, n, gi, bi, gai);
                    }
                }
                let gb = slot!(*b);
                for i in 0..bs {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        kernels::gemm(true, false, n, k, m, gi, ai, gbi);
                    } else {
                        kernels::gemm(true, false, k, n, m, ai, gi, gbi);
                    }
                }
            }
            Op::Permute(x, axes) => {
                let (back, _) = permute_data(g, node.value.shape(), &inverse_axes(axes));
                add_into(slot!(*x), &back);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                for ((o, gv), xv) in slot!(*x).iter_mut().zip(g).zip(xv) {
                    if *xv > T::zero() {
                        *o += *gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                for ((o, gv), yv) in slot!(*x).iter_mut().zip(g).zip(y) {
                    *o += *gv * *yv * (T::one() - *yv);
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let gx = slot!(*x);
                for ((gr, yr), or) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = kernels::dot(gr, yr);
                    for j in 0..n {
                        or[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = rstd.len().max(1);
                let d = g.len() / d;
                let gv = val(*gain).to_vec();
                let dn = T::of(d as f64);
                {
                    let gg = slot!(*gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let gb = slot!(*bias);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                let gx = slot!(*x);
                let mut dxhat = vec![T::zero(); d];
                for (r, ((gr, hr), or)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / dn;
                    let m2 = kernels::dot(&dxhat, hr) / dn;
                    for j in 0..d {
                        or[j] += rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let os = node.value.shape();
                let dims = ConvDims {
                    input: [xs[0], xs[1], xs[2]],
                    output: [os[0], os[1], os[2]],
                    cin: xs[3],
                    cout: ws[4],
                };
                let mut gx = vec![T::zero(); val(*x).len()];
                let mut gw = vec![T::zero(); val(*w).len()];
                let mut gb = vec![T::zero(); dims.cout];
                kernels::conv3d_backward(geom, &dims, val(*x), val(*w), g, &mut gx, &mut gw, &mut gb);
                add_into(slot!(*x), &gx);
                add_into(slot!(*w), &gw);
                add_into(slot!(*b), &gb);
            }
            Op::MeanAxis { x, axis } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let n = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let inv = T::one() / T::of(n as f64);
                let gx = slot!(*x);
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        kernels::axpy(inv, go, &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner]);
                    }
                }
            }
            Op::Bce { p, target } => {
                let inv = g[0] / T::of(target.len() as f64);
                let pv = val(*p).to_vec();
                for ((o, &pv), &y) in slot!(*p).iter_mut().zip(&pv).zip(target) {
                    *o += inv * bce_grad(pv, y);
                }
            }
            Op::WeightedSum { x, weights } => kernels::axpy(g[0], weights, slot!(*x)),
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let lo = T::of(PROB_CLAMP);
    p.max(lo).min(T::one() - lo)
}

/// `-[y·ln p + (1-y)·ln(1-p)]` with `p` clamped away from 0 and 1.
pub fn bce<T: Scalar>(p: T, y: T) -> T {
    let p = clamp_prob(p);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

fn bce_grad<T: Scalar>(p: T, y: T) -> T {
    let lo = T::of(PROB_CLAMP);
    if p < lo || p > T::one() - lo {
        return T::zero();
    }
    -y / p + (T::one() - y) / (T::one() - p)
}
