//! Layer vocabulary of the network: convolution, batch normalization,
//! PReLU, the unpooling upsampler and the BN -> PReLU -> Conv
//! pre-activation unit.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound into the graph on every forward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Inference,
}

/// Mutable state threaded through a forward pass.
pub struct Forward<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a mut ParamStore<T>,
    pub mode: Mode,
    trace: Option<Vec<(String, Shape)>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Forward {
            graph,
            params,
            mode,
            trace: None,
        }
    }

    /// Records `(label, shape)` for every traced tensor.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn take_trace(&mut self) -> Vec<(String, Shape)> {
        self.trace.take().unwrap_or_default()
    }

    pub(crate) fn record(&mut self, label: impl FnOnce() -> String, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push((label(), self.graph.shape(v)));
        }
    }

    pub fn bind(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.graph.param(id, value)
    }
}

/// Deterministic parameter initialization into a store.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn uniform(&mut self, name: String, kind: ParamKind, shape: Shape, bound: f64) -> ParamId {
        let value = Tensor::from_fn(shape, |_| T::lit(self.rng.gen_range(-bound..=bound)));
        self.store.register(name, kind, value)
    }

    fn constant(&mut self, name: String, kind: ParamKind, shape: Shape, v: f64) -> ParamId {
        self.store.register(name, kind, Tensor::full(shape, T::lit(v)))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

/// Shape-level description of a convolution, usable without weights.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::Same,
        }
    }

    /// 2x2, stride-2 downsampling convolution keeping the channel count.
    pub fn downsample(channels: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: 2,
            stride: 2,
            padding: Padding::Valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.kernel) {
            return Err(Error::invalid(format!(
                "kernel size {0}x{0} not supported (1x1, 2x2, 3x3 only)",
                self.kernel
            )));
        }
        if self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution needs positive stride and channel counts"));
        }
        if self.padding == Padding::Same && self.stride != 1 {
            return Err(Error::invalid("same padding is defined for stride 1 only"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> ConvGeometry {
        match self.padding {
            Padding::Same => ConvGeometry::same(self.kernel),
            Padding::Valid => ConvGeometry::valid(self.kernel, self.stride),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, layer expects {}", input.c, self.in_channels),
            ));
        }
        let (h, w) = self.geometry().output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, h, w))
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels
    }

    /// Multiply-adds for one sample producing an `out_h x out_w` map.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w) as u64 * (self.kernel * self.kernel * self.in_channels * self.out_channels) as u64
    }
}

impl Conv2d {
    /// He-style fan-in uniform weights, zero bias.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = init.uniform(
            format!("{name}/weight"),
            ParamKind::ConvWeight,
            Shape::new(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel),
            bound,
        );
        let bias = init.constant(
            format!("{name}/bias"),
            ParamKind::ConvBias,
            Shape::channels(spec.out_channels),
            0.0,
        );
        Ok(Conv2d {
            weight,
            bias,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.spec().output_shape(cx.graph.shape(x))?;
        let w = cx.bind(self.weight);
        let b = cx.bind(self.bias);
        cx.graph.conv2d(x, w, b, self.spec().geometry())
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        let s = Shape::channels(channels);
        BatchNorm {
            gamma: init.constant(format!("{name}/gamma"), ParamKind::BnScale, s, 1.0),
            beta: init.constant(format!("{name}/beta"), ParamKind::BnShift, s, 0.0),
            running_mean: init.constant(format!("{name}/running_mean"), ParamKind::RunningMean, s, 0.0),
            running_var: init.constant(format!("{name}/running_var"), ParamKind::RunningVar, s, 1.0),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates; inference mode uses the running estimates only.
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = cx.graph.shape(x).c;
        if c != self.channels {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels, layer expects {}", self.channels),
            ));
        }
        let g = cx.bind(self.gamma);
        let b = cx.bind(self.beta);
        let eps = T::lit(self.eps);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.graph.batch_norm_train(x, g, b, eps)?;
                let m = T::lit(self.momentum);
                let one_m = T::one() - m;
                for (id, batch) in [(self.running_mean, &stats.mean), (self.running_var, &stats.var)] {
                    let r = cx.params.value_mut(id);
                    for (rv, &bv) in r.data_mut().iter_mut().zip(batch) {
                        *rv = m * *rv + one_m * bv;
                    }
                }
                Ok(y)
            }
            Mode::Inference => {
                let mean = cx.params.value(self.running_mean).data().to_vec();
                let var = cx.params.value(self.running_var).data().to_vec();
                cx.graph.batch_norm_frozen(x, g, b, &mean, &var, eps)
            }
        }
    }
}

pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl Prelu {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, channels: usize) -> Self {
        Prelu {
            slope: init.constant(
                format!("{name}/slope"),
                ParamKind::PreluSlope,
                Shape::channels(channels),
                PRELU_INIT,
            ),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let a = cx.bind(self.slope);
        cx.graph.prelu(x, a)
    }
}

/// 2x nearest-neighbour upsampling followed by a 1x1 projection that halves
/// the channel count, so the result can be added to the contracting-path
/// feature of the next level up.
#[derive(Clone, Debug)]
pub struct Unpool {
    pub projection: Conv2d,
}

impl Unpool {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, in_channels: usize) -> Result<Self> {
        if !in_channels.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "unpool needs an even channel count, got {in_channels}"
            )));
        }
        Ok(Unpool {
            projection: Conv2d::new(
                init,
                &format!("{name}/proj"),
                ConvSpec::same(in_channels, in_channels / 2, 1),
            )?,
        })
    }

    pub fn output_shape(in_shape: Shape) -> Result<Shape> {
        if !in_shape.c.is_multiple_of(2) {
            return Err(Error::shape("unpool", format!("odd channel count {}", in_shape.c)));
        }
        Ok(Shape::new(in_shape.n, in_shape.c / 2, 2 * in_shape.h, 2 * in_shape.w))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        Self::output_shape(cx.graph.shape(x))?;
        let up = cx.graph.upsample2x(x);
        self.projection.forward(cx, up)
    }
}

/// Full pre-activation unit: BN -> PReLU -> Conv.
#[derive(Clone, Debug)]
pub struct PreActivation {
    pub bn: BatchNorm,
    pub act: Prelu,
    pub conv: Conv2d,
}

impl PreActivation {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, spec: ConvSpec) -> Result<Self> {
        Ok(PreActivation {
            bn: BatchNorm::new(init, &format!("{name}/bn"), spec.in_channels),
            act: Prelu::new(init, &format!("{name}/prelu"), spec.in_channels),
            conv: Conv2d::new(init, &format!("{name}/conv"), spec)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.bn.forward(cx, x)?;
        let y = self.act.forward(cx, y)?;
        self.conv.forward(cx, y)
    }

    pub fn param_count(&self) -> usize {
        self.bn.param_count() + self.act.channels + self.conv.spec().param_count()
    }
}
