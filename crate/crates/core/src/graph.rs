//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass in
//! construction order. Because an operation can only reference nodes that
//! already exist, construction order is a topological order, and
//! [`Graph::backward`] simply walks it in reverse.
//!
//! ```
//! use rdunet::graph::Graph;
//! use rdunet::tensor::{Shape, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.variable(Tensor::scalar(3.0));
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq);
//! let grads = g.backward_scalar(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    SumSquares(Var),
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        /// Batch statistics: the normalizer depends on the input.
        batch_stats: bool,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Upsample2x(Var),
    Softmax(Var),
    Nll {
        probs: Var,
        labels: Vec<usize>,
        floor: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

/// Batch statistics observed by a training-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked and reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a registered parameter. Binding the same parameter more
    /// than once sums the contributions in [`Gradients::param`].
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// Sum of all elements, as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    /// Channel concatenation in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::shape("concat", format!("{s} does not align with {s0}")));
            }
            channels += s.c;
        }
        let out_shape = s0.with_channels(channels);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        let v = Tensor::from_vec(out_shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
        let v = kernels::conv2d_forward(self.value(input), self.value(weight), self.value(bias), &geometry)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            rg,
        ))
    }

    fn check_channel_param(&self, op: &'static str, input: Var, p: Var) -> Result<()> {
        let c = self.shape(input).c;
        let ps = self.shape(p);
        if ps != Shape::channels(c) {
            return Err(Error::shape(op, format!("per-channel parameter {ps} for {c} channels")));
        }
        Ok(())
    }

    /// Normalization with the current batch's per-channel statistics.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        self.check_channel_param("batch_norm", input, gamma)?;
        self.check_channel_param("batch_norm", input, beta)?;
        let s = self.shape(input);
        if s.n * s.plane() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("training statistics need at least 2 values per channel, input is {s}"),
            ));
        }
        let (mean, var) = kernels::channel_moments(self.value(input));
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let xhat = kernels::normalize(self.value(input), &mean, &inv_std);
        let out = kernels::scale_shift(&xhat, self.value(gamma).data(), self.value(beta).data());
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// Normalization with fixed statistics (inference mode).
    pub fn batch_norm_frozen(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        self.check_channel_param("batch_norm", input, gamma)?;
        self.check_channel_param("batch_norm", input, beta)?;
        let c = self.shape(input).c;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let xhat = kernels::normalize(self.value(input), mean, &inv_std);
        let out = kernels::scale_shift(&xhat, self.value(gamma).data(), self.value(beta).data());
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        self.check_channel_param("prelu", input, slope)?;
        let v = kernels::prelu_forward(self.value(input), self.value(slope).data());
        let rg = self.any_grad(&[input, slope]);
        Ok(self.push(v, Op::Prelu { input, slope }, rg))
    }

    pub fn upsample2x(&mut self, input: Var) -> Var {
        let v = kernels::upsample2x(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(v, Op::Upsample2x(input), rg)
    }

    /// Per-pixel softmax across channels.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let v = kernels::softmax_channels(self.value(logits));
        let rg = self.any_grad(&[logits]);
        self.push(v, Op::Softmax(logits), rg)
    }

    /// Mean negative log-probability of the labelled class over all pixels
    /// of the batch. Probabilities below `floor` are clamped before the log;
    /// the number of clamped pixels is returned alongside.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: T) -> Result<(Var, usize)> {
        let s = self.shape(probs);
        if labels.len() != s.n * s.plane() {
            return Err(Error::shape(
                "nll",
                format!("{} labels for probabilities {s}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
            return Err(Error::invalid(format!("label {bad} outside [0, {})", s.c)));
        }
        let p = self.value(probs);
        let plane = s.plane();
        let mut total = T::zero();
        let mut clamped = 0;
        for (i, &label) in labels.iter().enumerate() {
            let (n, px) = (i / plane, i % plane);
            let pt = p.data()[(n * s.c + label) * plane + px];
            if pt < floor {
                clamped += 1;
            }
            total += pt.max(floor).ln();
        }
        let count = T::lit(labels.len() as f64);
        let rg = self.any_grad(&[probs]);
        let v = self.push(
            Tensor::scalar(-total / count),
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            rg,
        );
        Ok((v, clamped))
    }

    /// Backward pass seeded with ones; `output` must be a scalar node.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let shape = self.shape(output);
        self.backward(output, Tensor::ones(shape))
    }

    /// Propagates `seed` (the gradient of some objective with respect to
    /// `output`) back through every node that precedes `output`.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node {} not in graph", output.0)));
        }
        seed.expect_shape(self.shape(output), "backward seed")?;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed);
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    match params.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            params.insert(*id, g.clone());
                        }
                    }
                    grads[idx] = Some(g);
                    continue;
                }
                _ => {}
            }
            let mut send = |v: Var, t: Tensor<T>| {
                if self.nodes[v.0].requires_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&t),
                        slot => *slot = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(vb.data()).map(|(&d, &y)| d * y).collect(),
                    )?;
                    let gb = Tensor::from_vec(
                        g.shape(),
                        g.data().iter().zip(va.data()).map(|(&d, &x)| d * x).collect(),
                    )?;
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Scale(a, k) => send(*a, g.map(|d| d * *k)),
                Op::Sum(a) => {
                    let d = g.item();
                    send(*a, Tensor::full(self.shape(*a), d));
                }
                Op::SumSquares(a) => {
                    let d = g.item() * T::lit(2.0);
                    send(*a, self.value(*a).map(|x| x * d));
                }
                Op::Concat(parts) => {
                    let s = g.shape();
                    let plane = s.plane();
                    let mut offset = 0;
                    for &p in parts {
                        let ps = self.shape(p);
                        let mut part = Vec::with_capacity(ps.numel());
                        for n in 0..s.n {
                            let start = (n * s.c + offset) * plane;
                            part.extend_from_slice(&g.data()[start..start + ps.c * plane]);
                        }
                        offset += ps.c;
                        send(p, Tensor::from_vec(ps, part)?);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geometry,
                } => {
                    let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), geometry, &g);
                    send(*input, cg.input);
                    send(*weight, cg.weight);
                    send(*bias, cg.bias);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let gam = self.value(*gamma).data();
                    let (sum_dy, sum_dy_xhat) = kernels::channel_sums(&g, xhat);
                    let dx = if *batch_stats {
                        kernels::batch_norm_input_grad(xhat, inv_std, gam, &g)
                    } else {
                        let k: Vec<T> = gam.iter().zip(inv_std).map(|(&a, &b)| a * b).collect();
                        kernels::scale_shift(&g, &k, &vec![T::zero(); k.len()])
                    };
                    let c = sum_dy.len();
                    send(*gamma, Tensor::from_vec(Shape::channels(c), sum_dy_xhat)?);
                    send(*beta, Tensor::from_vec(Shape::channels(c), sum_dy)?);
                    send(*input, dx);
                }
                Op::Prelu { input, slope } => {
                    let (dx, da) = kernels::prelu_backward(self.value(*input), self.value(*slope).data(), &g);
                    let c = da.len();
                    send(*slope, Tensor::from_vec(Shape::channels(c), da)?);
                    send(*input, dx);
                }
                Op::Upsample2x(a) => send(*a, kernels::upsample2x_backward(&g)),
                Op::Softmax(a) => send(*a, kernels::softmax_channels_backward(&node.value, &g)),
                Op::Nll { probs, labels, floor } => {
                    let p = self.value(*probs);
                    let s = p.shape();
                    let plane = s.plane();
                    let k = -g.item() / T::lit(labels.len() as f64);
                    let mut dp = Tensor::zeros(s);
                    for (i, &label) in labels.iter().enumerate() {
                        let at = ((i / plane) * s.c + label) * plane + i % plane;
                        let pt = p.data()[at];
                        if pt >= *floor {
                            dp.data_mut()[at] = k / pt;
                        }
                    }
                    send(*probs, dp);
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }
}

/// Result of [`Graph::backward`]. Gradients are retained for leaves
/// (inputs, variables and parameters); intermediate ones are released as
/// soon as they have been propagated.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulated gradient of a parameter over all of its bindings.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}
