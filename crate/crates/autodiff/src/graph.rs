//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and a backward sweep is a single reverse pass.

use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::ops::conv::{self, ConvShape};
use crate::ops::pool;
use crate::tensor::{factors3, spatial3, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// `backward` returns one gradient per input (or `None` when an input does
/// not receive one), each shaped like that input.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv { input: Var, kernel: Var, bias: Var, shape: ConvShape },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, dims: [usize; 3], factors: [usize; 3] },
    Concat { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Dice { p: Var, target: Tensor<T>, weight: Option<Tensor<T>>, delta: f64 },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv",
            Op::MaxPool { .. } => "maxpool",
            Op::Upsample { .. } => "upsample",
            Op::Concat { .. } => "concat",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Dice { .. } => "dice",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_visits: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ops: Vec<&str> = self.nodes.iter().map(|n| n.op.name()).collect();
        f.debug_struct("Graph").field("ops", &ops).finish()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(AutodiffError::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_visits: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of op records processed by the last backward pass.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    /// Same-padded stride-1 convolution. `kernel` is `[kh, kw, Cin, Cout]` for
    /// `[H, W, Cin]` inputs or `[kd, kh, kw, Cin, Cout]` for `[D, H, W, Cin]`.
    pub fn conv(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (dims, cin) = spatial3(self.shape(input))?;
        let rank = self.shape(input).len() - 1;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != rank + 2 {
            return shape_err(format!("kernel {ks:?} does not match a {rank}-d input"));
        }
        let taps = &ks[..rank];
        if taps.iter().any(|&k| k % 2 == 0) {
            return Err(AutodiffError::Config(format!("kernel extents {taps:?} must be odd")));
        }
        if ks[rank] != cin {
            return Err(AutodiffError::Config(format!(
                "kernel expects {} input channels, input has {cin}",
                ks[rank]
            )));
        }
        let cout = ks[rank + 1];
        if self.shape(bias) != [cout] {
            return shape_err(format!("bias {:?} does not match {cout} outputs", self.shape(bias)));
        }
        let kernel3 = if rank == 2 { [1, ks[0], ks[1]] } else { [ks[0], ks[1], ks[2]] };
        let shape = ConvShape { dims, kernel: kernel3, cin, cout };
        let mut out_shape = self.shape(input).to_vec();
        *out_shape.last_mut().unwrap() = cout;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        conv::conv_forward(
            self.value(input).data(),
            &shape,
            self.value(kernel).data(),
            Some(self.value(bias).data()),
            &mut out,
        );
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(value, Op::Conv { input, kernel, bias, shape }, &[input, kernel, bias]))
    }

    /// Max pooling with per-spatial-axis window factors. Gradient goes to the
    /// first (lowest index) maximum of each window.
    pub fn maxpool(&mut self, input: Var, factors: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (dims, c) = spatial3(&shape)?;
        let f = factors3(shape.len() - 1, factors)?;
        for axis in 0..3 {
            if dims[axis] % f[axis] != 0 {
                let name = ["D", "H", "W"][axis];
                return Err(AutodiffError::Config(format!(
                    "axis {name}: extent {} not divisible by pool factor {}",
                    dims[axis], f[axis]
                )));
            }
        }
        let (out, argmax) = pool::maxpool_forward(self.value(input).data(), dims, c, f);
        let mut out_shape = shape.clone();
        let rank = shape.len() - 1;
        for (i, &fac) in factors.iter().enumerate() {
            out_shape[i] /= fac;
        }
        debug_assert_eq!(rank, factors.len());
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Nearest-neighbour upsampling by integer per-axis factors.
    pub fn upsample_nearest(&mut self, input: Var, factors: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (dims, c) = spatial3(&shape)?;
        let f = factors3(shape.len() - 1, factors)?;
        let out = pool::upsample_forward(self.value(input).data(), dims, c, f);
        let mut out_shape = shape.clone();
        for (i, &fac) in factors.iter().enumerate() {
            out_shape[i] *= fac;
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        Ok(self.push(value, Op::Upsample { input, dims, factors: f }, &[input]))
    }

    /// Concatenates along the last (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(format!("cannot concatenate {sa:?} with {sb:?}"));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let c = ca + cb;
        let n: usize = sa[..sa.len() - 1].iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = c;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("cannot add {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale(input, factor), &[input])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(T::from_f64_lossy(self.value(input).sum_f64()));
        self.push(value, Op::Sum(input), &[input])
    }

    /// Smoothed soft Dice loss `-(2 sum(w p g) + delta) / (sum(w p) + sum(w g) + delta)`.
    ///
    /// `weight`, when given, is a 0/1 selection with the shape of `p` that
    /// excludes elements from every sum.
    pub fn dice_loss(
        &mut self,
        p: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        delta: f64,
    ) -> Result<Var> {
        if target.shape() != self.shape(p) {
            return shape_err(format!(
                "dice target {:?} does not match prediction {:?}",
                target.shape(),
                self.shape(p)
            ));
        }
        if let Some(w) = &weight {
            if w.shape() != target.shape() {
                return shape_err(format!("dice weight {:?} has the wrong shape", w.shape()));
            }
        }
        let sums = dice_sums(self.value(p).data(), target.data(), weight.as_ref().map(|w| w.data()));
        let loss = -(2.0 * sums.inter + delta) / (sums.pred + sums.target + delta);
        let value = Tensor::scalar(T::from_f64_lossy(loss));
        Ok(self.push(value, Op::Dice { p, target, weight, delta }, &[p]))
    }

    /// Applies an externally defined differentiable operation.
    pub fn apply(&mut self, op: impl CustomOp<T> + 'static, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), op: Box::new(op) }, inputs))
    }

    /// Backward pass from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_with_seed(root, T::one())
    }

    /// Backward pass from a scalar root with an explicit seed gradient.
    pub fn backward_with_seed(&mut self, root: Var, seed: T) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::NonScalarRoot(self.shape(root).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_visits = 0;
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::full(self.shape(root), seed));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                self.backward_visits += 1;
            }
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (input, grad) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let like = |v: Var, data: Vec<T>| {
            Tensor::from_vec(self.shape(v), data).expect("gradient matches input shape")
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { input, kernel, bias, shape } => {
                let mut out = Vec::new();
                if wants(input) {
                    let dx = conv::conv_backward_input(g.data(), shape, self.value(*kernel).data());
                    out.push((*input, like(*input, dx)));
                }
                if wants(kernel) {
                    let dw = conv::conv_backward_kernel(self.value(*input).data(), shape, g.data());
                    out.push((*kernel, like(*kernel, dw)));
                }
                if wants(bias) {
                    out.push((*bias, like(*bias, conv::conv_backward_bias(g.data(), shape.cout))));
                }
                out
            }
            Op::MaxPool { input, argmax } => {
                let dx = pool::maxpool_backward(g.data(), argmax, self.value(*input).len());
                vec![(*input, like(*input, dx))]
            }
            Op::Upsample { input, dims, factors } => {
                let c = self.value(*input).channels();
                let dx = pool::upsample_backward(g.data(), *dims, c, *factors);
                vec![(*input, like(*input, dx))]
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).channels();
                let cb = self.value(*b).channels();
                let c = ca + cb;
                let n = if c == 0 { 0 } else { g.len() / c };
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for row in g.data().chunks_exact(c.max(1)).take(n) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx = x
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*input, like(*input, dx))]
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = y.iter().zip(g.data()).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                vec![(*input, like(*input, dx))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(input, factor) => vec![(*input, g.map(|v| v * *factor))],
            Op::Sum(input) => {
                let seed = g.item();
                vec![(*input, Tensor::full(self.shape(*input), seed))]
            }
            Op::Dice { p, target, weight, delta } => {
                let pv = self.value(*p).data();
                let wd = weight.as_ref().map(|w| w.data());
                let s = dice_sums(pv, target.data(), wd);
                let num = 2.0 * s.inter + delta;
                let den = s.pred + s.target + delta;
                let seed = g.item().as_f64();
                let dp = (0..pv.len())
                    .map(|j| {
                        let w = wd.map_or(1.0, |w| w[j].as_f64());
                        let gj = target.data()[j].as_f64();
                        T::from_f64_lossy(-seed * w * (2.0 * gj * den - num) / (den * den))
                    })
                    .collect();
                vec![(*p, like(*p, dp))]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&vals, &node.value, g);
                assert_eq!(grads.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, grad)| {
                        let grad = grad?;
                        assert_eq!(grad.shape(), self.shape(*v), "{} gradient shape", op.name());
                        Some((*v, grad))
                    })
                    .collect()
            }
        }
    }
}

struct DiceSums {
    inter: f64,
    pred: f64,
    target: f64,
}

fn dice_sums<T: Real>(p: &[T], g: &[T], w: Option<&[T]>) -> DiceSums {
    let mut s = DiceSums { inter: 0.0, pred: 0.0, target: 0.0 };
    for j in 0..p.len() {
        let wj = w.map_or(1.0, |w| w[j].as_f64());
        if wj == 0.0 {
            continue;
        }
        let (pj, gj) = (p[j].as_f64(), g[j].as_f64());
        s.inter += wj * pj * gj;
        s.pred += wj * pj;
        s.target += wj * gj;
    }
    s
}
