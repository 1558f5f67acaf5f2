use super::conv::{self, Conv2dGeometry, ConvSaved};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sqrt,
    Square,
    Sigmoid,
    /// Leaky rectifier with the given negative slope.
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Stride-2 convolution; spatial dims become `ceil(n / 2)`.
    Down2,
    /// Nearest-neighbour doubling followed by a stride-1 convolution.
    Up2,
}

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sum(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: Conv2dGeometry,
        saved: Option<ConvSaved<T>>,
    },
    UpsampleNearest2(Var),
    Concat(Var, Var),
    SliceChannels(Var, usize),
    Crop(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Define-by-run record of a computation.
///
/// Nodes are appended in evaluation order and never removed, so the tape is
/// acyclic by construction and reverse insertion order is a valid reverse
/// topological order. Build a fresh tape for every evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input. Receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, shaped like the node's value.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Moves the gradient out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // -- elementwise -------------------------------------------------------

    /// Elementwise binary op. Shapes must be equal, or one side must hold a
    /// single element which is broadcast.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(op, va, vb)?;
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let data: Vec<T> = match (va.numel(), vb.numel()) {
            (n, m) if n == m => va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            (1, _) => {
                let x = va.data()[0];
                vb.data().iter().map(|&y| f(x, y)).collect()
            }
            _ => {
                let y = vb.data()[0];
                va.data().iter().map(|&x| f(x, y)).collect()
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Binary(op, a, b)))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let value = match op {
            UnaryOp::Sqrt => va.map(|x| x.sqrt()),
            UnaryOp::Square => va.map(|x| x * x),
            UnaryOp::Sigmoid => va.map(sigmoid),
            UnaryOp::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                va.map(|x| if x > T::zero() { x } else { s * x })
            }
        };
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Unary(op, a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + s);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::MulScalar(a, s))
    }

    /// Sum of all elements as a zero-dimensional tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), rg, Op::Sum(a))
    }

    // -- spatial -----------------------------------------------------------

    /// 2-D convolution (cross-correlation) of `x: [Cin, H, W]` with
    /// `kernel: [Cout, Cin, kh, kw]` and mirror boundary extension.
    ///
    /// Output is `[Cout, ceil(H / stride), ceil(W / stride)]`; output pixel
    /// `(i, j)` is centred on input pixel `(stride * i, stride * j)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, dilation: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vk = &self.nodes[kernel.0].value;
        let (cin, h, w) = vx.chw()?;
        let [cout, kcin, kh, kw] = vk.shape()[..] else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel must be [Cout, Cin, kh, kw], got {:?}", vk.shape()),
            });
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", vx.shape(), vk.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel extent must be odd, got {kh}x{kw}"),
            });
        }
        if !(1..=2).contains(&stride) || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride must be 1 or 2 and dilation >= 1, got stride {stride}, dilation {dilation}"
            )));
        }
        let bias_data = match bias {
            Some(b) => {
                let vb = &self.nodes[b.0].value;
                if vb.numel() != cout {
                    return Err(Error::shape("conv2d bias", vb.shape(), &[cout]));
                }
                Some(vb.data())
            }
            None => None,
        };
        let geometry = Conv2dGeometry {
            in_channels: cin,
            height: h,
            width: w,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            dilation,
        };
        let (out, saved) = conv::conv2d_forward(vx.data(), vk.data(), bias_data, &geometry);
        let value = Tensor {
            shape: vec![cout, geometry.out_height(), geometry.out_width()],
            data: out,
        };
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let rg = self.any_grad(&inputs);
        // Saved input data is only needed for the kernel gradient.
        let saved = self.nodes[kernel.0].requires_grad.then_some(saved);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geometry,
                saved,
            },
        ))
    }

    /// Nearest-neighbour doubling of both spatial dims.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = vx.chw()?;
        let (h2, w2) = (2 * h, 2 * w);
        let src = vx.data();
        let mut data = Vec::with_capacity(c * h2 * w2);
        for ch in 0..c {
            for i in 0..h2 {
                let row = &src[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                data.extend(row.iter().flat_map(|&v| [v, v]));
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, h2, w2],
                data,
            },
            rg,
            Op::UpsampleNearest2(x),
        ))
    }

    /// Learned resampling: stride-2 convolution down, nearest+convolution up.
    pub fn resample(&mut self, x: Var, dir: Resample, kernel: Var, bias: Option<Var>) -> Result<Var> {
        match dir {
            Resample::Down2 => {
                let (_, h, w) = self.nodes[x.0].value.chw()?;
                if h < 2 || w < 2 {
                    return Err(Error::InvalidShape {
                        op: "resample",
                        detail: format!("down2 needs spatial dims >= 2, got {h}x{w}"),
                    });
                }
                self.conv2d(x, kernel, bias, 2, 1)
            }
            Resample::Up2 => {
                let up = self.upsample_nearest2(x)?;
                self.conv2d(up, kernel, bias, 1, 1)
            }
        }
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ca, ha, wa) = va.chw()?;
        let (cb, hb, wb) = vb.chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape("concat", va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![ca + cb, ha, wa],
                data,
            },
            rg,
            Op::Concat(a, b),
        ))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = vx.chw()?;
        if start + len > c || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                detail: format!("channels {start}..{} out of range for {c}", start + len),
            });
        }
        let plane = h * w;
        let data = vx.data()[start * plane..(start + len) * plane].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![len, h, w],
                data,
            },
            rg,
            Op::SliceChannels(x, start),
        ))
    }

    /// Top-left `height x width` window of every channel.
    pub fn crop(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (c, h, w) = vx.chw()?;
        if height > h || width > w {
            return Err(Error::InvalidShape {
                op: "crop",
                detail: format!("cannot crop {h}x{w} to {height}x{width}"),
            });
        }
        let src = vx.data();
        let mut data = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for i in 0..height {
                let start = (ch * h + i) * w;
                data.extend_from_slice(&src[start..start + width]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![c, height, width],
                data,
            },
            rg,
            Op::Crop(x),
        ))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every node that requires a gradient holds one (zeros when
    /// the loss does not depend on it). A tape supports a single backward
    /// pass; build a new tape for the next evaluation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this tape".into()));
        }
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Backward("loss does not depend on any parameter".into()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let contributions = self.local_grads(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
            for (v, dg) in contributions {
                self.accumulate(v, dg);
            }
        }

        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, dg: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(dg) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(dg),
        }
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, idx: usize, op: &Op<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Binary(bop, a, b) => {
                let (va, vb) = (val(a).data(), val(b).data());
                let n = g.len();
                let at = |s: &[T], i: usize| if s.len() == 1 { s[0] } else { s[i] };
                let reduce = |len: usize, f: &dyn Fn(usize) -> T| -> Vec<T> {
                    if len == n {
                        (0..n).map(f).collect()
                    } else {
                        vec![(0..n).fold(T::zero(), |acc, i| acc + f(i))]
                    }
                };
                if rg(a) {
                    let da = match bop {
                        BinaryOp::Add | BinaryOp::Sub => reduce(va.len(), &|i| g[i]),
                        BinaryOp::Mul => reduce(va.len(), &|i| g[i] * at(vb, i)),
                        BinaryOp::Div => reduce(va.len(), &|i| g[i] / at(vb, i)),
                    };
                    out.push((a, da));
                }
                if rg(b) {
                    let db = match bop {
                        BinaryOp::Add => reduce(vb.len(), &|i| g[i]),
                        BinaryOp::Sub => reduce(vb.len(), &|i| -g[i]),
                        BinaryOp::Mul => reduce(vb.len(), &|i| g[i] * at(va, i)),
                        BinaryOp::Div => reduce(vb.len(), &|i| {
                            let y = at(vb, i);
                            -g[i] * at(va, i) / (y * y)
                        }),
                    };
                    out.push((b, db));
                }
            }
            Op::Unary(uop, a) => {
                let x = val(a).data();
                let y = self.nodes[idx].value.data();
                let two = T::from_f64(2.0);
                let da: Vec<T> = match uop {
                    UnaryOp::Sqrt => g.iter().zip(y).map(|(&g, &y)| g / (two * y)).collect(),
                    UnaryOp::Square => g.iter().zip(x).map(|(&g, &x)| g * two * x).collect(),
                    UnaryOp::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                    UnaryOp::LeakyRelu(slope) => {
                        let s = T::from_f64(slope);
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > T::zero() { g } else { g * s })
                            .collect()
                    }
                };
                out.push((a, da));
            }
            Op::AddScalar(a) => out.push((a, g.to_vec())),
            Op::MulScalar(a, s) => out.push((a, g.iter().map(|&v| v * s).collect())),
            Op::Sum(a) => out.push((a, vec![g[0]; val(a).numel()])),
            Op::Conv2d {
                x,
                kernel,
                bias,
                ref geometry,
                ref saved,
            } => {
                if rg(x) {
                    out.push((x, conv::conv2d_grad_input(g, val(kernel).data(), geometry)));
                }
                if let (true, Some(saved)) = (rg(kernel), saved) {
                    out.push((kernel, conv::conv2d_grad_kernel(g, saved, geometry)));
                }
                if let Some(b) = bias {
                    if rg(b) {
                        out.push((b, conv::conv2d_grad_bias(g, geometry)));
                    }
                }
            }
            Op::UpsampleNearest2(x) => {
                let (c, h, w) = val(x).chw().expect("rank 3");
                let w2 = 2 * w;
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..2 * h {
                        let src = &g[(ch * 2 * h + i) * w2..(ch * 2 * h + i + 1) * w2];
                        let dst = &mut dx[(ch * h + i / 2) * w..(ch * h + i / 2 + 1) * w];
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = *d + src[2 * j] + src[2 * j + 1];
                        }
                    }
                }
                out.push((x, dx));
            }
            Op::Concat(a, b) => {
                let na = val(a).numel();
                if rg(a) {
                    out.push((a, g[..na].to_vec()));
                }
                if rg(b) {
                    out.push((b, g[na..].to_vec()));
                }
            }
            Op::SliceChannels(x, start) => {
                let mut dx = vec![T::zero(); val(x).numel()];
                let offset = start * self.nodes[idx].value.shape()[1] * self.nodes[idx].value.shape()[2];
                dx[offset..offset + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            Op::Crop(x) => {
                let (c, h, w) = val(x).chw().expect("rank 3");
                let (_, ch_out, cw_out) = self.nodes[idx].value.chw().expect("rank 3");
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for i in 0..ch_out {
                        let src = &g[(ch * ch_out + i) * cw_out..(ch * ch_out + i + 1) * cw_out];
                        dx[(ch * h + i) * w..(ch * h + i) * w + cw_out].copy_from_slice(src);
                    }
                }
                out.push((x, dx));
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn broadcast_shape<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<usize>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    };
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(name, a.shape(), b.shape()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sqrt_of_exact_square() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1], vec![4.0]));
        let y = tape.sqrt(x);
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn adding_zero_is_bitwise_identity() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).sin() * 1e-3).collect();
        let x = tape.constant(Tensor::new(vec![4, 4], data.clone()).unwrap());
        let zero = tape.constant(Tensor::scalar(0.0));
        let y = tape.add(x, zero).unwrap();
        let bits: Vec<u32> = tape.value(y).data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0f64));
        let y = tape.sigmoid(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let err = tape.mul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn grad_of_sum_is_ones_and_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![3], vec![1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(vec![3], vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0f64));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_losses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros(vec![2]));
        assert!(tape.backward(x).is_err());

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0f64));
        let y = tape.square(c);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unused_params_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let unused = tape.param(Tensor::<f64>::zeros(vec![3]));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn scalar_broadcast_gradient_is_reduced() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, s).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap().data(), &[10.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0; 4]);
    }

    #[test]
    fn identity_kernel_is_identity_map() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64).sqrt()).collect();
        let x = tape.constant(t(vec![2, 5, 4], data.clone()));
        let k = tape.constant(t(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn averaging_kernel_preserves_constants_at_borders() {
        let v = 0.3f64;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 6, 5], v));
        let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        for &o in tape.value(y).data() {
            assert!((o - v).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 4, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, k, None, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn upsample_replicates_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 1, 1], vec![1.0]));
        let y = tape.upsample_nearest2(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn resample_round_trip_keeps_constants_and_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(vec![1, 8, 6], 0.7f64));
        let avg = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0 / 9.0));
        let down = tape.resample(x, Resample::Down2, avg, None).unwrap();
        assert_eq!(tape.shape(down), &[1, 4, 3]);
        let up = tape.resample(down, Resample::Up2, avg, None).unwrap();
        assert_eq!(tape.shape(up), &[1, 8, 6]);
        for &o in tape.value(up).data() {
            assert!((o - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn down2_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(vec![1, 1, 4]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(tape.resample(x, Resample::Down2, k, None).is_err());
    }

    #[test]
    fn concat_shapes_gradients_and_slices() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_fn(vec![2, 4, 4], |i| i as f64));
        let b = tape.param(Tensor::from_fn(vec![3, 4, 4], |i| -(i as f64)));
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.shape(c), &[5, 4, 4]);
        let a2 = tape.slice_channels(c, 0, 2).unwrap();
        let b2 = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));

        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(vec![1, 3, 3], |i| i as f64));
        let c = tape.concat(x, x).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 3]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        // one from each copy
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0; 9]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![1, 4, 4]));
        let b = tape.constant(Tensor::zeros(vec![1, 4, 5]));
        assert!(tape.concat(a, b).is_err());
    }
}
