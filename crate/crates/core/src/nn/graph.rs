//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward pass needs. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that contributed to the loss.

use crate::error::{Error, Result};
use crate::nn::kernels::{self, BatchNormCache, BatchStats, BnMode};
use crate::nn::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvArgs {
    stride: usize,
    padding: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        args: ConvArgs,
    },
    Depthwise {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        args: ConvArgs,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        args: ConvArgs,
        output_padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    Relu6(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Dice {
        pred: Var,
        target: Tensor<T>,
        smooth: T,
    },
    BceWithLogits {
        logits: Var,
        target: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A tape of tensor operations.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that only evaluates; [`Graph::backward`] on it is a state error.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| {
            Error::State(format!(
                "variable {} is not recorded on this graph ({} nodes)",
                v.0,
                self.nodes.len()
            ))
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            self.try_value(input)?,
            self.try_value(weight)?,
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                args: ConvArgs { stride, padding },
            },
        ))
    }

    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = kernels::depthwise_conv2d(
            self.try_value(input)?,
            self.try_value(weight)?,
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Depthwise {
                input,
                weight,
                bias,
                args: ConvArgs { stride, padding },
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d(
            self.try_value(input)?,
            self.try_value(weight)?,
            bias.map(|b| self.value(b)),
            stride,
            padding,
            output_padding,
        )?;
        Ok(self.push(
            out,
            Op::ConvTranspose {
                input,
                weight,
                bias,
                args: ConvArgs { stride, padding },
                output_padding,
            },
        ))
    }

    /// Batch normalization. Running statistics are read in infer mode; in
    /// train mode the batch statistics are returned so the owner of the
    /// running buffers can fold them in.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (out, cache, stats) = kernels::batchnorm_forward(
            self.try_value(input)?,
            self.try_value(gamma)?.data(),
            self.try_value(beta)?.data(),
            running_mean,
            running_var,
            mode,
        )?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        );
        Ok((v, stats))
    }

    pub fn relu6(&mut self, x: Var) -> Result<Var> {
        let out = kernels::relu6(self.try_value(x)?);
        Ok(self.push(out, Op::Relu6(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = kernels::sigmoid(self.try_value(x)?);
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.try_value(a)?.add(self.try_value(b)?)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.try_value(a)?, self.try_value(b)?);
        va.ensure_same_shape(vb, "mul")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.try_value(x)?.sum());
        Ok(self.push(out, Op::Sum(x)))
    }

    /// Mean over channels (and images, when batched) of
    /// `1 - (2 Σ p·g + ε) / (Σ p + Σ g + ε)`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, smooth: T) -> Result<Var> {
        let p = self.try_value(pred)?;
        p.ensure_same_shape(target, "dice loss")?;
        let loss = dice_loss_value(p, target, smooth);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                pred,
                target: target.clone(),
                smooth,
            },
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`,
    /// evaluated on the logits so it stays finite and keeps its gradient
    /// `(sigmoid(x) - t) / n` at any magnitude.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.try_value(logits)?;
        x.ensure_same_shape(target, "cross-entropy loss")?;
        if x.is_empty() {
            return Err(Error::EmptyInput("cross-entropy of an empty tensor".into()));
        }
        let mut acc = T::zero();
        for (&v, &t) in x.data().iter().zip(target.data()) {
            acc += v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln();
        }
        let n = T::from_f64_lossy(x.len() as f64);
        Ok(self.push(
            Tensor::scalar(acc / n),
            Op::BceWithLogits {
                logits,
                target: target.clone(),
            },
        ))
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::State(
                "backward called on an inference graph with no recorded operations".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    args,
                } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        args.stride,
                        args.padding,
                        bias.is_some(),
                    )?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Depthwise {
                    input,
                    weight,
                    bias,
                    args,
                } => {
                    let cg = kernels::depthwise_conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        args.stride,
                        args.padding,
                        bias.is_some(),
                    )?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ConvTranspose {
                    input,
                    weight,
                    bias,
                    args,
                    output_padding,
                } => {
                    let cg = kernels::conv_transpose2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        args.stride,
                        args.padding,
                        *output_padding,
                        bias.is_some(),
                    )?;
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *weight, cg.weight);
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    cache,
                } => {
                    let gamma_val = self.value(*gamma);
                    let (gi, gg, gb) = kernels::batchnorm_backward(cache, gamma_val.data(), &g)?;
                    accumulate(&mut grads, *input, gi);
                    let shape = gamma_val.shape().to_vec();
                    accumulate(&mut grads, *gamma, Tensor::from_parts(shape.clone(), gg));
                    accumulate(&mut grads, *beta, Tensor::from_parts(shape, gb));
                }
                Op::Relu6(x) => {
                    let gi = kernels::relu6_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gi);
                }
                Op::Sigmoid(x) => {
                    let gi = kernels::sigmoid_backward(self.value(*x), &g);
                    accumulate(&mut grads, *x, gi);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                    let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sum(x) => {
                    let gi = Tensor::full(self.value(*x).shape().to_vec(), g.data()[0]);
                    accumulate(&mut grads, *x, gi);
                }
                Op::Dice {
                    pred,
                    target,
                    smooth,
                } => {
                    let mut gi = dice_loss_grad(self.value(*pred), target, *smooth);
                    let scale = g.data()[0];
                    gi.data_mut().iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *pred, gi);
                }
                Op::BceWithLogits { logits, target } => {
                    let x = self.value(*logits);
                    let scale = g.data()[0] / T::from_f64_lossy(x.len() as f64);
                    let data = x
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&v, &t)| (kernels::sigmoid_scalar(v) - t) * scale)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::from_parts(x.shape().to_vec(), data));
                }
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sums `(Σ p·g, Σ p + Σ g)` per channel, or per channel and image for a
/// batched `[C, N, H, W]` tensor.
fn dice_terms<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Vec<(T, T)> {
    let plane = match pred.shape() {
        [_, _, h, w] => h * w,
        shape => pred.len() / shape[0],
    };
    pred.data()
        .chunks(plane)
        .zip(target.data().chunks(plane))
        .map(|(p, g)| {
            let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let total: T = p.iter().copied().sum::<T>() + g.iter().copied().sum::<T>();
            (inter, total)
        })
        .collect()
}

pub(crate) fn dice_loss_value<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: T) -> T {
    let two = T::from_f64_lossy(2.0);
    let terms = dice_terms(pred, target);
    let k = T::from_f64_lossy(terms.len() as f64);
    terms
        .iter()
        .map(|&(inter, total)| T::one() - (two * inter + smooth) / (total + smooth))
        .sum::<T>()
        / k
}

fn dice_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: T) -> Tensor<T> {
    let two = T::from_f64_lossy(2.0);
    let terms = dice_terms(pred, target);
    let k = T::from_f64_lossy(terms.len() as f64);
    let plane = pred.len() / terms.len();
    let mut out = Tensor::zeros_like(pred);
    for (c, &(inter, total)) in terms.iter().enumerate() {
        let num = two * inter + smooth;
        let den = total + smooth;
        let den2 = den * den;
        let range = c * plane..(c + 1) * plane;
        for (o, &g) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&target.data()[range])
        {
            // d/dp of -(num/den) = -(2 g den - num) / den²
            *o = -(two * g * den - num) / den2 / k;
        }
    }
    out
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zero when `v` did not
    /// contribute to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }

    /// Moves the gradient out, leaving zero behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn contributed(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
