//! The full U-shaped network: four contracting levels, a bridge, four
//! expansive levels and a classifier head.
//!
//! ```text
//! down1: conv3x3 -> dense -> preact2x2                      => skip1 (H,    W0)
//! downL: conv2x2/2 -> preact3x3 -> dense -> preact2x2       => skipL (H/2^(L-1), W0*2^(L-1))
//! bridge: conv2x2/2 -> preact2x2 (doubling width)
//! upL:   dense -> preact2x2 -> unpool -> (+ skipL) -> preact3x3
//! head:  dense -> preact2x2 -> conv1x1 to class logits
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense_block::{DenseBlock, DenseBlockConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvSpec, Forward, Init, Mode, PreActivation, Unpool};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Number of stride-2 levels; inputs must be divisible by `2^LEVELS`.
pub const LEVELS: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Width `W0` of the first level; doubles per level.
    pub base_width: usize,
    pub growth_base: usize,
    pub growth_cap: Option<usize>,
    pub classes: usize,
}

impl NetworkConfig {
    /// 320x320 single-channel input, 64 base maps, growth base 8.
    pub fn full_size() -> Self {
        NetworkConfig {
            height: 320,
            width: 320,
            in_channels: 1,
            base_width: 64,
            growth_base: 8,
            growth_cap: None,
            classes: 2,
        }
    }

    /// 64x64 input, 16 base maps, growth base 4.
    pub fn desk() -> Self {
        NetworkConfig {
            height: 64,
            width: 64,
            in_channels: 1,
            base_width: 16,
            growth_base: 4,
            growth_cap: None,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = 1 << LEVELS;
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(d) || !self.width.is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "input size {}x{} must be positive and divisible by {d} (one halving per level)",
                self.height, self.width
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.growth_base == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.growth_cap == Some(0) {
            return Err(Error::invalid("growth cap must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }

    /// Feature width of contracting level `level` (1-based); `LEVELS + 1` is the bridge.
    pub fn level_width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    /// Spatial size of level `level` (1-based).
    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        (self.height >> (level - 1), self.width >> (level - 1))
    }

    fn dense(&self, channels: usize) -> DenseBlockConfig {
        DenseBlockConfig {
            channels,
            growth_base: self.growth_base,
            growth_cap: self.growth_cap,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Ingredient {
    Conv,
    StridedConv,
    PreActConv,
    Dense,
    Unpool,
    Addition,
}

/// One row of the layer plan, in execution order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PlanRow {
    pub block: String,
    pub ingredient: Ingredient,
    pub kernel: Option<usize>,
    /// `(height, width, channels)` after the row.
    pub size: (usize, usize, usize),
}

/// Shape inference for a configuration; no weights are created.
pub fn layer_plan(config: &NetworkConfig) -> Result<Vec<PlanRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut push = |block: &str, ingredient, kernel, size| {
        rows.push(PlanRow {
            block: block.to_string(),
            ingredient,
            kernel,
            size,
        })
    };
    use Ingredient::*;
    for level in 1..=LEVELS {
        let name = format!("down{level}");
        let (h, w) = config.level_hw(level);
        let c = config.level_width(level);
        if level == 1 {
            push(&name, Conv, Some(3), (h, w, c));
        } else {
            let prev = config.level_width(level - 1);
            push(&name, StridedConv, Some(2), (h, w, prev));
            push(&name, PreActConv, Some(3), (h, w, c));
        }
        push(&name, Dense, Some(3), (h, w, c));
        push(&name, PreActConv, Some(2), (h, w, c));
    }
    let (bh, bw) = config.level_hw(LEVELS + 1);
    push("bridge", StridedConv, Some(2), (bh, bw, config.level_width(LEVELS)));
    push("bridge", PreActConv, Some(2), (bh, bw, config.level_width(LEVELS + 1)));
    for level in (1..=LEVELS).rev() {
        let name = format!("up{level}");
        let (h, w) = config.level_hw(level + 1);
        let c = config.level_width(level + 1);
        let (uh, uw) = config.level_hw(level);
        let uc = config.level_width(level);
        push(&name, Dense, Some(3), (h, w, c));
        push(&name, PreActConv, Some(2), (h, w, c));
        push(&name, Unpool, None, (uh, uw, uc));
        push(&name, Addition, None, (uh, uw, uc));
        push(&name, PreActConv, Some(3), (uh, uw, uc));
    }
    let c = config.base_width;
    push("head", Dense, Some(3), (config.height, config.width, c));
    push("head", PreActConv, Some(2), (config.height, config.width, c));
    push("head", Conv, Some(1), (config.height, config.width, config.classes));
    Ok(rows)
}

#[derive(Clone, Debug)]
pub enum Entry {
    Conv(Conv2d),
    PreAct(PreActivation),
}

#[derive(Clone, Debug)]
pub struct DownLevel {
    pub level: usize,
    pub downsample: Option<Conv2d>,
    pub entry: Entry,
    pub dense: DenseBlock,
    pub exit: PreActivation,
}

#[derive(Clone, Debug)]
pub struct Bridge {
    pub downsample: Conv2d,
    pub widen: PreActivation,
}

#[derive(Clone, Debug)]
pub struct UpLevel {
    pub level: usize,
    pub dense: DenseBlock,
    pub exit: PreActivation,
    pub unpool: Unpool,
    pub merge: PreActivation,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub dense: DenseBlock,
    pub exit: PreActivation,
    pub classifier: Conv2d,
}

/// How long skips are merged into the expansive path.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum SkipMode {
    #[default]
    Add,
    /// Add an all-zero tensor in place of the contracting feature.
    Zero,
    /// Leave the addition out entirely.
    Omit,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub down: Vec<DownLevel>,
    pub bridge: Bridge,
    /// Expansive levels in execution order (deepest first).
    pub up: Vec<UpLevel>,
    pub head: Head,
}

/// Builds the network with deterministic initialization from `seed`.
pub fn build_network<T: Scalar>(config: NetworkConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };

    let mut down = Vec::with_capacity(LEVELS);
    for level in 1..=LEVELS {
        let name = format!("down{level}");
        let c = config.level_width(level);
        let (downsample, entry) = if level == 1 {
            let conv = Conv2d::new(
                &mut init,
                &format!("{name}/entry"),
                ConvSpec::same(config.in_channels, c, 3),
            )?;
            (None, Entry::Conv(conv))
        } else {
            let prev = config.level_width(level - 1);
            let ds = Conv2d::new(&mut init, &format!("{name}/downsample"), ConvSpec::downsample(prev))?;
            let unit = PreActivation::new(&mut init, &format!("{name}/entry"), ConvSpec::same(prev, c, 3))?;
            (Some(ds), Entry::PreAct(unit))
        };
        let dense = DenseBlock::new(&mut init, &format!("{name}/dense"), config.dense(c))?;
        let exit = PreActivation::new(&mut init, &format!("{name}/exit"), ConvSpec::same(c, c, 2))?;
        down.push(DownLevel {
            level,
            downsample,
            entry,
            dense,
            exit,
        });
    }

    let deepest = config.level_width(LEVELS);
    let bridge = Bridge {
        downsample: Conv2d::new(&mut init, "bridge/downsample", ConvSpec::downsample(deepest))?,
        widen: PreActivation::new(&mut init, "bridge/widen", ConvSpec::same(deepest, 2 * deepest, 2))?,
    };

    let mut up = Vec::with_capacity(LEVELS);
    for level in (1..=LEVELS).rev() {
        let name = format!("up{level}");
        let c = config.level_width(level + 1);
        let uc = config.level_width(level);
        up.push(UpLevel {
            level,
            dense: DenseBlock::new(&mut init, &format!("{name}/dense"), config.dense(c))?,
            exit: PreActivation::new(&mut init, &format!("{name}/exit"), ConvSpec::same(c, c, 2))?,
            unpool: Unpool::new(&mut init, &format!("{name}/unpool"), c)?,
            merge: PreActivation::new(&mut init, &format!("{name}/merge"), ConvSpec::same(uc, uc, 3))?,
        });
    }

    let c = config.base_width;
    let head = Head {
        dense: DenseBlock::new(&mut init, "head/dense", config.dense(c))?,
        exit: PreActivation::new(&mut init, "head/exit", ConvSpec::same(c, c, 2))?,
        classifier: Conv2d::new(&mut init, "head/classifier", ConvSpec::same(c, config.classes, 1))?,
    };

    Ok(Model {
        config,
        params: store,
        down,
        bridge,
        up,
        head,
    })
}

impl<T: Scalar> Model<T> {
    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.config.in_channels, self.config.height, self.config.width)
    }

    /// All dense blocks in execution order.
    pub fn dense_blocks(&self) -> Vec<(String, &DenseBlock)> {
        let mut out: Vec<(String, &DenseBlock)> = self
            .down
            .iter()
            .map(|l| (format!("down{}", l.level), &l.dense))
            .collect();
        out.extend(self.up.iter().map(|l| (format!("up{}", l.level), &l.dense)));
        out.push(("head".into(), &self.head.dense));
        out
    }

    /// Class logits `(n, classes, h, w)`.
    pub fn forward(&mut self, graph: &mut Graph<T>, input: Var, mode: Mode) -> Result<Var> {
        let mut cx = Forward::new(graph, &mut self.params, mode);
        forward_impl(
            &self.down,
            &self.bridge,
            &self.up,
            &self.head,
            &self.config,
            &mut cx,
            input,
            SkipMode::Add,
        )
    }

    /// Forward pass that also returns the `(label, shape)` trace of every
    /// layer-plan row, with explicit control of the long skips.
    pub fn forward_traced(
        &mut self,
        graph: &mut Graph<T>,
        input: Var,
        mode: Mode,
        skips: SkipMode,
    ) -> Result<(Var, Vec<(String, Shape)>)> {
        let mut cx = Forward::new(graph, &mut self.params, mode).with_trace();
        let out = forward_impl(
            &self.down,
            &self.bridge,
            &self.up,
            &self.head,
            &self.config,
            &mut cx,
            input,
            skips,
        )?;
        Ok((out, cx.take_trace()))
    }

    /// Builds a graph for `batch`, runs inference and returns per-pixel argmax classes.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let logits = self.forward(&mut g, x, Mode::Inference)?;
        Ok(argmax_channels(g.value(logits)))
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_impl<T: Scalar>(
    down: &[DownLevel],
    bridge: &Bridge,
    up: &[UpLevel],
    head: &Head,
    config: &NetworkConfig,
    cx: &mut Forward<'_, T>,
    input: Var,
    skips: SkipMode,
) -> Result<Var> {
    let s = cx.graph.shape(input);
    if s.c != config.in_channels || s.h != config.height || s.w != config.width {
        return Err(Error::shape(
            "forward",
            format!(
                "level down1 expects input (n,{},{},{}), got {s}",
                config.in_channels, config.height, config.width
            ),
        ));
    }
    let mut skip_features = Vec::with_capacity(LEVELS);
    let mut x = input;
    for lvl in down {
        let tag = format!("down{}", lvl.level);
        let ctx = |e: Error| match e {
            Error::Shape { op, detail } => Error::Shape {
                op,
                detail: format!("{detail} (level {})", lvl.level),
            },
            other => other,
        };
        if let Some(ds) = &lvl.downsample {
            x = ds.forward(cx, x).map_err(ctx)?;
            cx.record(|| format!("{tag}/downsample"), x);
        }
        x = match &lvl.entry {
            Entry::Conv(c) => c.forward(cx, x),
            Entry::PreAct(u) => u.forward(cx, x),
        }
        .map_err(ctx)?;
        cx.record(|| format!("{tag}/entry"), x);
        x = lvl.dense.forward(cx, x).map_err(ctx)?;
        cx.record(|| format!("{tag}/dense"), x);
        x = lvl.exit.forward(cx, x).map_err(ctx)?;
        cx.record(|| format!("{tag}/exit"), x);
        skip_features.push(x);
    }

    x = bridge.downsample.forward(cx, x)?;
    cx.record(|| "bridge/downsample".into(), x);
    x = bridge.widen.forward(cx, x)?;
    cx.record(|| "bridge/widen".into(), x);

    for lvl in up {
        let tag = format!("up{}", lvl.level);
        x = lvl.dense.forward(cx, x)?;
        cx.record(|| format!("{tag}/dense"), x);
        x = lvl.exit.forward(cx, x)?;
        cx.record(|| format!("{tag}/exit"), x);
        x = lvl.unpool.forward(cx, x)?;
        cx.record(|| format!("{tag}/unpool"), x);
        let skip = skip_features[lvl.level - 1];
        x = match skips {
            SkipMode::Add => cx.graph.add(x, skip)?,
            SkipMode::Zero => {
                let zero = cx.graph.input(Tensor::zeros(cx.graph.shape(skip)));
                cx.graph.add(x, zero)?
            }
            SkipMode::Omit => x,
        };
        cx.record(|| format!("{tag}/add"), x);
        x = lvl.merge.forward(cx, x)?;
        cx.record(|| format!("{tag}/merge"), x);
    }

    x = head.dense.forward(cx, x)?;
    cx.record(|| "head/dense".into(), x);
    x = head.exit.forward(cx, x)?;
    cx.record(|| "head/exit".into(), x);
    x = head.classifier.forward(cx, x)?;
    cx.record(|| "head/classifier".into(), x);
    Ok(x)
}

/// Per-pixel index of the largest channel, `n * h * w` entries in NHW order.
/// Ties resolve to the lowest class id.
pub fn argmax_channels<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let s = t.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = t.data()[n * s.c * plane + p];
            for c in 1..s.c {
                let v = t.data()[(n * s.c + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Parameter and multiply-add count of one block of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    /// The nine dense blocks in execution order.
    pub dense_blocks: Vec<BlockCost>,
    /// Whole levels (down1..4, bridge, up4..1, head), dense blocks included.
    pub levels: Vec<BlockCost>,
    pub total_params: usize,
    pub total_macs: u64,
}

fn preact_cost(spec: ConvSpec, h: usize, w: usize) -> (usize, u64) {
    (3 * spec.in_channels + spec.param_count(), spec.macs(h, w))
}

/// Trainable parameters and forward multiply-adds (one sample) per block.
/// Depends only on the configuration.
pub fn count_params_and_flops(config: &NetworkConfig) -> Result<CostReport> {
    config.validate()?;
    let mut dense_blocks = Vec::new();
    let mut levels = Vec::new();
    let mut dense_cost = |name: String, c: usize, h: usize, w: usize| {
        let cfg = config.dense(c);
        let cost = BlockCost {
            name,
            params: cfg.param_count(),
            macs: cfg.macs(h, w),
        };
        dense_blocks.push(cost.clone());
        (cost.params, cost.macs)
    };
    let add = |acc: &mut (usize, u64), x: (usize, u64)| {
        acc.0 += x.0;
        acc.1 += x.1;
    };

    for level in 1..=LEVELS {
        let (h, w) = config.level_hw(level);
        let c = config.level_width(level);
        let mut acc = (0, 0);
        if level == 1 {
            let spec = ConvSpec::same(config.in_channels, c, 3);
            add(&mut acc, (spec.param_count(), spec.macs(h, w)));
        } else {
            let prev = config.level_width(level - 1);
            let ds = ConvSpec::downsample(prev);
            add(&mut acc, (ds.param_count(), ds.macs(h, w)));
            add(&mut acc, preact_cost(ConvSpec::same(prev, c, 3), h, w));
        }
        add(&mut acc, dense_cost(format!("down{level}/dense"), c, h, w));
        add(&mut acc, preact_cost(ConvSpec::same(c, c, 2), h, w));
        levels.push(BlockCost {
            name: format!("down{level}"),
            params: acc.0,
            macs: acc.1,
        });
    }

    let (bh, bw) = config.level_hw(LEVELS + 1);
    let deepest = config.level_width(LEVELS);
    let mut acc = (0, 0);
    let ds = ConvSpec::downsample(deepest);
    add(&mut acc, (ds.param_count(), ds.macs(bh, bw)));
    add(&mut acc, preact_cost(ConvSpec::same(deepest, 2 * deepest, 2), bh, bw));
    levels.push(BlockCost {
        name: "bridge".into(),
        params: acc.0,
        macs: acc.1,
    });

    for level in (1..=LEVELS).rev() {
        let (h, w) = config.level_hw(level + 1);
        let (uh, uw) = config.level_hw(level);
        let c = config.level_width(level + 1);
        let uc = config.level_width(level);
        let mut acc = (0, 0);
        add(&mut acc, dense_cost(format!("up{level}/dense"), c, h, w));
        add(&mut acc, preact_cost(ConvSpec::same(c, c, 2), h, w));
        let proj = ConvSpec::same(c, c / 2, 1);
        add(&mut acc, (proj.param_count(), proj.macs(uh, uw)));
        add(&mut acc, preact_cost(ConvSpec::same(uc, uc, 3), uh, uw));
        levels.push(BlockCost {
            name: format!("up{level}"),
            params: acc.0,
            macs: acc.1,
        });
    }

    let (h, w, c) = (config.height, config.width, config.base_width);
    let mut acc = (0, 0);
    add(&mut acc, dense_cost("head/dense".into(), c, h, w));
    add(&mut acc, preact_cost(ConvSpec::same(c, c, 2), h, w));
    let cls = ConvSpec::same(c, config.classes, 1);
    add(&mut acc, (cls.param_count(), cls.macs(h, w)));
    levels.push(BlockCost {
        name: "head".into(),
        params: acc.0,
        macs: acc.1,
    });

    let total_params = levels.iter().map(|l| l.params).sum();
    let total_macs = levels.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        dense_blocks,
        levels,
        total_params,
        total_macs,
    })
}
