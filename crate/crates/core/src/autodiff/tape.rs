//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. [`Tape::backward`]
//! walks the nodes in exact reverse recording order and adds each
//! contribution into its inputs' gradient slots, so a value consumed `k`
//! times receives the sum of `k` contributions.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::activations::{self, Pointwise, ZcSwishParams};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for [`Tape::custom`]: `(input, upstream) -> grad_input`.
pub type CustomVjp<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Pointwise {
        input: Var,
        kind: Pointwise,
    },
    ZcSwish {
        input: Var,
        c: Var,
        beta_raw: Var,
        g: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Custom {
        name: &'static str,
        input: Var,
        vjp: CustomVjp<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Linear { .. } => "linear",
            Op::Dropout { .. } => "dropout",
            Op::Pointwise { kind, .. } => kind.name(),
            Op::ZcSwish { .. } => "zcswish",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("ops", &self.nodes.iter().map(|n| n.op.name()).collect::<Vec<_>>())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Op names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// How many times each op kind was recorded.
    pub fn op_histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut h = BTreeMap::new();
        for n in &self.nodes {
            *h.entry(n.op.name()).or_insert(0) += 1;
        }
        h
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, "operand shape", format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let vb = self.value(b).data();
        let mut out = self.value(a).clone();
        for (x, &y) in out.data_mut().iter_mut().zip(vb) {
            *x = *x * y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale(a, k))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let n = *shape
            .first()
            .ok_or_else(|| Error::invalid("flatten", "rank-0 input"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, [n, rest])
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Conv2d { input, weight, bias }))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::MaxPool2 { input, argmax }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`. Outside training, or with
    /// `p = 0`, the input handle is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p must lie in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = T::cast(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut out = self.value(input).clone();
        for (x, &m) in out.data_mut().iter_mut().zip(&mask) {
            *x = *x * m;
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Dropout { input, mask }))
    }

    pub fn pointwise(&mut self, input: Var, kind: Pointwise) -> Var {
        let out = self.value(input).map(|x| kind.forward(x));
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Pointwise { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.pointwise(input, Pointwise::Relu)
    }

    /// ZC-Swish with per-channel parameter vectors `c`, `beta_raw`, `g`, each `[C]`.
    pub fn zc_swish(&mut self, input: Var, c: Var, beta_raw: Var, g: Var) -> Result<Var> {
        let params = self.zc_params(c, beta_raw, g)?;
        let out = activations::zc_swish_forward(self.value(input), &params)?;
        let rg = self.any_grad(&[input, c, beta_raw, g]);
        Ok(self.push(out, rg, Op::ZcSwish { input, c, beta_raw, g }))
    }

    fn zc_params(&self, c: Var, beta_raw: Var, g: Var) -> Result<ZcSwishParams<T>> {
        ZcSwishParams::new(
            self.value(c).data().to_vec(),
            self.value(beta_raw).data().to_vec(),
            self.value(g).data().to_vec(),
        )
    }

    /// Mean softmax cross-entropy of `[N, K]` logits; the result is rank-0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Record an externally computed unary op with a caller-supplied backward.
    pub fn custom(&mut self, name: &'static str, input: Var, output: Tensor<T>, vjp: CustomVjp<T>) -> Var {
        let rg = self.any_grad(&[input]);
        self.push(output, rg, Op::Custom { name, input, vjp })
    }

    /// Gradients of a scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        self.backward_with(loss, Tensor::full(shape.to_vec(), T::one()))
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                "seed gradient",
                format!("{:?}", self.value(output).shape()),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, contrib: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                )?;
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect(),
                )?;
                acc(*a, ga)?;
                acc(*b, gb)?;
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * *k))?,
            Op::Sum(a) => {
                let up = g.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape().to_vec(), up))?;
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.value(*a).shape().to_vec())?)?,
            Op::Conv2d { input, weight, bias } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    g,
                )?;
                acc(*input, cg.input)?;
                acc(*weight, cg.weight)?;
                acc(*bias, cg.bias)?;
            }
            Op::MaxPool2 { input, argmax } => {
                acc(
                    *input,
                    kernels::maxpool2_backward(self.value(*input).shape(), argmax, g)?,
                )?;
            }
            Op::Linear { input, weight, bias } => {
                let lg = kernels::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    g,
                )?;
                acc(*input, lg.input)?;
                acc(*weight, lg.weight)?;
                acc(*bias, lg.bias)?;
            }
            Op::Dropout { input, mask } => {
                let gi = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect(),
                )?;
                acc(*input, gi)?;
            }
            Op::Pointwise { input, kind } => {
                let x = self.value(*input);
                let gi = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(&u, &xv)| u * kind.derivative(xv))
                        .collect(),
                )?;
                acc(*input, gi)?;
            }
            Op::ZcSwish { input, c, beta_raw, g: gain } => {
                let params = self.zc_params(*c, *beta_raw, *gain)?;
                let zg = activations::zc_swish_backward(self.value(*input), &params, g)?;
                let ch = params.channels();
                acc(*input, zg.x)?;
                acc(*c, Tensor::new([ch], zg.c)?)?;
                acc(*beta_raw, Tensor::new([ch], zg.beta_raw)?)?;
                acc(*gain, Tensor::new([ch], zg.g)?)?;
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gi = kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                acc(*logits, gi)?;
            }
            Op::Custom { input, vjp, .. } => {
                let gi = vjp(self.value(*input), g);
                if gi.shape() != self.value(*input).shape() {
                    return Err(Error::shape(
                        "custom backward",
                        "input gradient",
                        format!("{:?}", self.value(*input).shape()),
                        format!("{:?}", gi.shape()),
                    ));
                }
                acc(*input, gi)?;
            }
        }
        Ok(())
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, if anything flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; zeros when `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
