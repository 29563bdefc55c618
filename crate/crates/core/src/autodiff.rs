//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] is an append-only tape: nodes are created in topological
//! order, so the backward pass walks the tape in reverse. A graph is
//! single-owner; independent graphs (one per batch element) can be built on
//! different threads against shared read-only parameters.

use crate::error::{Error, Result};
use crate::feature::{dlkfm_backward, dlkfm_forward};
use crate::tensor::{Real, Tensor};
use crate::warp::{warp_backward, warp_forward};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum OpKind<T> {
    /// Differentiable input.
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    /// `min(0, x)` elementwise.
    MinZero(Var),
    Sum(Var),
    BilinearWarp {
        source: Var,
        homography: Var,
    },
    /// `Σ w_i (a_i - b_i)²`, unit weights when `weights` is `None`.
    Sse {
        a: Var,
        b: Var,
        weights: Option<Vec<T>>,
    },
    Dlkfm(Var),
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub op: OpKind<T>,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient from the last backward pass; `None` for constants.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: OpKind<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite(&value, "leaf")?;
        Ok(self.push(OpKind::Leaf, value, true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite(&value, "constant")?;
        Ok(self.push(OpKind::Constant, value, false))
    }

    /// 3x3 same-padded convolution of `[h, w, c_in]` with
    /// `[3, 3, c_in, c_out]`; output pixel `(y, x)` is centred on input
    /// pixel `(stride·y, stride·x)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::Shape(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        let (_, _, cin) = x.hwc()?;
        let (kc_in, c_out) = match k.shape() {
            [3, 3, ci, co] => (*ci, *co),
            s => return Err(Error::Shape(format!("conv2d kernel must be 3x3xCinxCout, got {s:?}"))),
        };
        if kc_in != cin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, kernel expects {kc_in}"
            )));
        }
        if b.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d bias must have shape [{c_out}], got {:?}",
                b.shape()
            )));
        }
        let out = conv_forward(x, k, b, stride)?;
        check_finite(&out, "conv2d")?;
        let rg = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            OpKind::Conv2d {
                input,
                kernel,
                bias,
                stride,
            },
            out,
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(x);
        Ok(self.push(OpKind::Relu(x), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let mut out = va.clone();
        out.add_assign(vb);
        check_finite(&out, "add")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(OpKind::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        check_finite(&out, "sub")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(OpKind::Sub(a, b), out, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        check_finite(&out, "scale")?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::Scale(x, factor), out, rg))
    }

    pub fn min_zero(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.min(T::zero()));
        let rg = self.needs(x);
        Ok(self.push(OpKind::MinZero(x), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        check_finite(&out, "sum")?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::Sum(x), out, rg))
    }

    /// Sum of several scalars (or equally shaped tensors).
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Usage("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Samples a single-channel `source` at `H · (x, y, 1)` for every pixel
    /// of an `out_h x out_w` grid; `homography` is an 8-element node.
    pub fn bilinear_warp(&mut self, source: Var, homography: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let hom = self.value(homography);
        if hom.len() != 8 {
            return Err(Error::Shape(format!(
                "homography node must hold 8 values, got shape {:?}",
                hom.shape()
            )));
        }
        let out = warp_forward(self.value(source), hom.data(), out_h, out_w)?;
        check_finite(&out, "bilinear_warp")?;
        let rg = self.needs(source) || self.needs(homography);
        Ok(self.push(OpKind::BilinearWarp { source, homography }, out, rg))
    }

    pub fn reduce_sse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sse(a, b, None)
    }

    /// `Σ w_i (a_i - b_i)²` with fixed, non-differentiable weights.
    pub fn weighted_sse(&mut self, a: Var, b: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::Shape(format!(
                "weighted_sse: {} weights for {} values",
                weights.len(),
                self.value(a).len()
            )));
        }
        self.sse(a, b, Some(weights))
    }

    fn sse(&mut self, a: Var, b: Var, weights: Option<Vec<T>>) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "reduce_sse")?;
        let total: T = match &weights {
            None => va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum(),
            Some(w) => va
                .data()
                .iter()
                .zip(vb.data())
                .zip(w)
                .map(|((&x, &y), &wi)| wi * (x - y) * (x - y))
                .sum(),
        };
        let out = Tensor::scalar(total);
        check_finite(&out, "reduce_sse")?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(OpKind::Sse { a, b, weights }, out, rg))
    }

    /// Row-sum-bound eigenvalue-ratio map of a `[h, w, c]` block.
    pub fn dlkfm(&mut self, block: Var) -> Result<Var> {
        let out = dlkfm_forward(self.value(block))?;
        check_finite(&out, "dlkfm")?;
        let rg = self.needs(block);
        Ok(self.push(OpKind::Dlkfm(block), out, rg))
    }

    /// Reverse pass from a single-element `output`. Clears every previous
    /// gradient first; afterwards every differentiable node up to `output`
    /// holds a gradient (zeros when disconnected).
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let out_shape = self.value(output).shape().to_vec();
        self.nodes[output.0].grad = Some(Tensor::full(&out_shape, T::one()));

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(&op, &grad)?;
            self.nodes[i].grad = Some(grad);
        }
        for node in &mut self.nodes[..=output.0] {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Tensor<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        if node.grad.is_none() {
            node.grad = Some(Tensor::zeros(node.value.shape()));
        }
        node.grad.as_mut()
    }

    fn accumulate(&mut self, v: Var, g: &Tensor<T>) {
        if let Some(slot) = self.grad_slot(v) {
            slot.add_assign(g);
        }
    }

    fn propagate(&mut self, op: &OpKind<T>, grad: &Tensor<T>) -> Result<()> {
        match op {
            OpKind::Leaf | OpKind::Constant => {}
            OpKind::Conv2d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let grads = conv_backward(
                    self.value(*input),
                    self.value(*kernel),
                    grad,
                    *stride,
                    self.needs(*input),
                    self.needs(*kernel),
                )?;
                if let Some(gi) = grads.input {
                    self.accumulate(*input, &gi);
                }
                if let Some(gk) = grads.kernel {
                    self.accumulate(*kernel, &gk);
                }
                if self.needs(*bias) {
                    self.accumulate(*bias, &grads.bias);
                }
            }
            OpKind::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                let g = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(*x, &g);
            }
            OpKind::Add(a, b) => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            OpKind::Sub(a, b) => {
                self.accumulate(*a, grad);
                let neg = grad.map(|g| -g);
                self.accumulate(*b, &neg);
            }
            OpKind::Scale(x, factor) => {
                let f = *factor;
                let g = grad.map(|g| g * f);
                self.accumulate(*x, &g);
            }
            OpKind::MinZero(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v < T::zero() { g } else { T::zero() })
                    .collect();
                let g = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(*x, &g);
            }
            OpKind::Sum(x) => {
                let g = Tensor::full(self.value(*x).shape(), grad.item()?);
                self.accumulate(*x, &g);
            }
            OpKind::BilinearWarp { source, homography } => {
                let src = self.value(*source).clone();
                let hom = self.value(*homography).data().to_vec();
                let mut gs = self.needs(*source).then(|| Tensor::zeros(src.shape()));
                let mut gh = self.needs(*homography).then(|| Tensor::zeros(&[hom.len()]));
                warp_backward(
                    &src,
                    &hom,
                    grad,
                    gs.as_mut().map(|t| t.data_mut()),
                    gh.as_mut().map(|t| t.data_mut()),
                )?;
                if let Some(gs) = gs {
                    self.accumulate(*source, &gs);
                }
                if let Some(mut gh) = gh {
                    let shape = self.value(*homography).shape().to_vec();
                    gh = gh.reshape(shape)?;
                    self.accumulate(*homography, &gh);
                }
            }
            OpKind::Sse { a, b, weights } => {
                let g = grad.item()?;
                let two = T::c(2.0);
                let (va, vb) = (self.value(*a), self.value(*b));
                let data: Vec<T> = match weights {
                    None => va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| two * g * (x - y))
                        .collect(),
                    Some(w) => va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .zip(w)
                        .map(|((&x, &y), &wi)| two * g * wi * (x - y))
                        .collect(),
                };
                let ga = Tensor::new(va.shape().to_vec(), data)?;
                let gb = ga.map(|v| -v);
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            OpKind::Dlkfm(block) => {
                if self.needs(*block) {
                    let bv = self.value(*block).clone();
                    let mut gb = Tensor::zeros(bv.shape());
                    dlkfm_backward(&bv, grad.data(), gb.data_mut())?;
                    self.accumulate(*block, &gb);
                }
            }
        }
        Ok(())
    }
}

fn out_dim(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// `[ho·wo, 9·c_in]` patch matrix; column `(ky·3 + kx)·c_in + ci`.
fn im2col<T: Real>(x: &Tensor<T>, stride: usize) -> Result<(Vec<T>, usize, usize)> {
    let (h, w, c) = x.hwc()?;
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let row = 9 * c;
    let mut cols = vec![T::zero(); ho * wo * row];
    let src = x.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut cols[(oy * wo + ox) * row..(oy * wo + ox + 1) * row];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * c;
                    let d = (ky * 3 + kx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    Ok((cols, ho, wo))
}

fn col2im<T: Real>(cols: &[T], h: usize, w: usize, c: usize, stride: usize) -> Tensor<T> {
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let row = 9 * c;
    let mut out = Tensor::zeros(&[h, w, c]);
    let dst = out.data_mut();
    for oy in 0..ho {
        for ox in 0..wo {
            let src = &cols[(oy * wo + ox) * row..(oy * wo + ox + 1) * row];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    let s = (ky * 3 + kx) * c;
                    for ci in 0..c {
                        dst[d + ci] += src[s + ci];
                    }
                }
            }
        }
    }
    out
}

fn conv_forward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (_, _, cin) = x.hwc()?;
    let cout = k.shape()[3];
    let (cols, ho, wo) = im2col(x, stride)?;
    let m = ho * wo;
    let mut out = Vec::with_capacity(m * cout);
    for _ in 0..m {
        out.extend_from_slice(b.data());
    }
    T::gemm(m, 9 * cin, cout, &cols, ((9 * cin) as isize, 1), k.data(), (cout as isize, 1), T::one(), &mut out);
    Tensor::new(vec![ho, wo, cout], out)
}

struct ConvGrads<T: Real> {
    input: Option<Tensor<T>>,
    kernel: Option<Tensor<T>>,
    bias: Tensor<T>,
}

fn conv_backward<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<ConvGrads<T>> {
    let (h, w, cin) = x.hwc()?;
    let cout = k.shape()[3];
    let (ho, wo, _) = grad_out.hwc()?;
    let m = ho * wo;
    let g = grad_out.data();

    let mut bias = vec![T::zero(); cout];
    for row in g.chunks_exact(cout) {
        for (b, &v) in bias.iter_mut().zip(row) {
            *b += v;
        }
    }

    let kernel = if want_kernel {
        let (cols, _, _) = im2col(x, stride)?;
        let mut gk = vec![T::zero(); 9 * cin * cout];
        // colsᵀ · grad_out
        T::gemm(9 * cin, m, cout, &cols, (1, (9 * cin) as isize), g, (cout as isize, 1), T::zero(), &mut gk);
        Some(Tensor::new(vec![3, 3, cin, cout], gk)?)
    } else {
        None
    };

    let input = if want_input {
        let mut gcols = vec![T::zero(); m * 9 * cin];
        // grad_out · kernelᵀ
        T::gemm(m, cout, 9 * cin, g, (cout as isize, 1), k.data(), (1, cout as isize), T::zero(), &mut gcols);
        Some(col2im(&gcols, h, w, cin, stride))
    } else {
        None
    };

    Ok(ConvGrads {
        input,
        kernel,
        bias: Tensor::new(vec![cout], bias)?,
    })
}
