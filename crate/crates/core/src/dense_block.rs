//! Residual log-dense block.
//!
//! Six pre-activation stages (1x1, 3x3, 3x3, 3x3, 3x3, 1x1). Stage `i`
//! reads the channel concatenation of the outputs of stages `i - 2^k`
//! (stage 0 is the block input), so it has at most `floor(log2 i) + 1`
//! direct inputs. Stages 1..5 emit `2^(m-1) * p0` maps; stage 6 compresses
//! back to the block width `C`. After a trailing batch norm the result is
//! added to the block input and passed through PReLU:
//!
//! ```text
//! out = PReLU(BN(stage6(...)) + x)
//! ```

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNorm, ConvSpec, Forward, Init, PreActivation, Prelu};
use crate::scalar::Scalar;
use crate::tensor::Shape;

pub const STAGES: usize = 6;

/// Direct predecessors of stage `i`: `{ i - 2^k : k = 0..=floor(log2 i) }`,
/// nearest first.
pub fn log_dense_inputs(i: usize) -> Result<Vec<usize>> {
    if i < 1 {
        return Err(Error::invalid("log-dense stage index must be >= 1"));
    }
    let mut out = Vec::new();
    let mut step = 1;
    while step <= i {
        out.push(i - step);
        step <<= 1;
    }
    Ok(out)
}

/// Maps emitted by growth stage `m` (1..=5): `2^(m-1) * p0`, optionally capped.
pub fn growth_rate(m: usize, p0: usize, cap: Option<usize>) -> Result<usize> {
    if !(1..STAGES).contains(&m) {
        return Err(Error::invalid(format!("growth stage {m} outside 1..=5")));
    }
    let p = p0 << (m - 1);
    Ok(cap.map_or(p, |c| p.min(c)))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DenseBlockConfig {
    /// Block input and output width `C`.
    pub channels: usize,
    /// Growth base `p0`.
    pub growth_base: usize,
    pub growth_cap: Option<usize>,
}

impl DenseBlockConfig {
    pub fn new(channels: usize, growth_base: usize) -> Self {
        DenseBlockConfig {
            channels,
            growth_base,
            growth_cap: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.growth_base == 0 || self.growth_cap == Some(0) {
            return Err(Error::invalid("dense block widths must be positive"));
        }
        Ok(())
    }

    pub fn kernel(stage: usize) -> usize {
        if stage == 1 || stage == STAGES {
            1
        } else {
            3
        }
    }

    /// Channels emitted by `stage` (0 is the block input).
    pub fn emitted(&self, stage: usize) -> usize {
        match stage {
            0 | STAGES => self.channels,
            m => growth_rate(m, self.growth_base, self.growth_cap).expect("stage in range"),
        }
    }

    /// Input width of `stage`: summed emission over its log-dense predecessors.
    pub fn input_width(&self, stage: usize) -> usize {
        log_dense_inputs(stage)
            .expect("stage >= 1")
            .into_iter()
            .map(|j| self.emitted(j))
            .sum()
    }

    pub fn stage_spec(&self, stage: usize) -> ConvSpec {
        ConvSpec::same(self.input_width(stage), self.emitted(stage), Self::kernel(stage))
    }

    pub fn param_count(&self) -> usize {
        let stages: usize = (1..=STAGES)
            .map(|m| {
                let s = self.stage_spec(m);
                2 * s.in_channels + s.in_channels + s.param_count()
            })
            .sum();
        stages + 2 * self.channels + self.channels
    }

    /// Multiply-adds for one sample at `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (1..=STAGES).map(|m| self.stage_spec(m).macs(h, w)).sum()
    }
}

/// Construction-time audit of the block wiring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WiringAudit {
    /// `(stage, predecessors, expected input width, realized conv input width)`
    pub stages: Vec<(usize, Vec<usize>, usize, usize)>,
    pub log_dense_edges: usize,
    pub full_dense_edges: usize,
}

impl WiringAudit {
    pub fn consistent(&self) -> bool {
        self.stages.iter().all(|(_, _, want, got)| want == got)
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub config: DenseBlockConfig,
    pub stages: Vec<PreActivation>,
    pub trailing_bn: BatchNorm,
    pub out_act: Prelu,
}

impl DenseBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, config: DenseBlockConfig) -> Result<Self> {
        config.validate()?;
        let stages = (1..=STAGES)
            .map(|m| PreActivation::new(init, &format!("{name}/stage{m}"), config.stage_spec(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DenseBlock {
            config,
            stages,
            trailing_bn: BatchNorm::new(init, &format!("{name}/out_bn"), config.channels),
            out_act: Prelu::new(init, &format!("{name}/out_prelu"), config.channels),
        })
    }

    pub fn audit(&self) -> WiringAudit {
        let stages = (1..=STAGES)
            .map(|m| {
                let preds = log_dense_inputs(m).expect("stage >= 1");
                let want = preds.iter().map(|&j| self.config.emitted(j)).sum();
                (m, preds, want, self.stages[m - 1].conv.in_channels)
            })
            .collect();
        WiringAudit {
            stages,
            log_dense_edges: (1..=STAGES).map(|m| log_dense_inputs(m).unwrap().len()).sum(),
            full_dense_edges: STAGES * (STAGES + 1) / 2,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.config.channels {
            return Err(Error::shape(
                "dense_block",
                format!(
                    "input has {} channels, block width is {}",
                    input.c, self.config.channels
                ),
            ));
        }
        Ok(input)
    }

    /// Residual part `F(x)`: the stage pipeline followed by the trailing BN.
    pub fn residual<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.output_shape(cx.graph.shape(x))?;
        let mut outputs = Vec::with_capacity(STAGES + 1);
        outputs.push(x);
        for (m, unit) in (1..=STAGES).zip(&self.stages) {
            let preds: Vec<Var> = log_dense_inputs(m)?.into_iter().map(|j| outputs[j]).collect();
            let gathered = cx.graph.concat(&preds)?;
            outputs.push(unit.forward(cx, gathered)?);
        }
        self.trailing_bn.forward(cx, outputs[STAGES])
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let f = self.residual(cx, x)?;
        let sum = cx.graph.add(f, x)?;
        self.out_act.forward(cx, sum)
    }
}
