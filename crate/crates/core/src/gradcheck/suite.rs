//! Finite-difference suite over every graph primitive and layer type.
//!
//! Each case is reduced to the scalar `sum(out * r)` with a fixed random
//! `r`, so every output element contributes a distinct weight.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_at, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::dense_block::{DenseBlock, DenseBlockConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Conv2d, ConvSpec, Forward, Init, Mode, PreActivation, Prelu, Unpool};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Bound on the analytic gradient of a structurally zero parameter.
pub const STRUCTURAL_ZERO: f64 = 1e-12;

type Build = Box<dyn Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>>;

/// One differentiable function of some input tensors and a parameter store.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub params: ParamStore<f64>,
    pub mode: Mode,
    /// Parameters whose gradient vanishes identically in this mode (a conv
    /// bias followed by a train-mode batch norm). Finite differences only
    /// see rounding noise there, so they are asserted to be zero instead.
    pub structural_zeros: Vec<String>,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        params: ParamStore<f64>,
        mode: Mode,
        build: impl Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            inputs,
            params,
            mode,
            structural_zeros: Vec::new(),
            build: Box::new(build),
        }
    }

    pub fn with_structural_zeros(mut self, names: Vec<String>) -> Self {
        self.structural_zeros = names;
        self
    }

    /// Builds the graph; returns it with the input vars and the output.
    fn graph(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let mut store = params.clone();
        let out = {
            let mut cx = Forward::new(&mut g, &mut store, self.mode);
            (self.build)(&mut cx, &vars)?
        };
        Ok((g, vars, out))
    }

    fn objective(
        &self,
        inputs: &[Tensor<f64>],
        params: &ParamStore<f64>,
        weights: &Tensor<f64>,
    ) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let (mut g, vars, out) = self.graph(inputs, params)?;
        let r = g.input(weights.clone());
        let prod = g.mul(out, r)?;
        let total = g.sum(prod);
        Ok((g, vars, total))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Probe at most this many elements per tensor (sampled deterministically).
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            max_probes: None,
            seed: 0,
        }
    }
}

/// Result for one tensor (an input or a parameter) of one case.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub case: String,
    pub tensor: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.report.passed)
    }

    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,tensor,checked,max_rel_error,worst_index,passed\n");
        for e in &self.entries {
            s += &format!(
                "{},{},{},{:e},{},{}\n",
                e.case, e.tensor, e.report.checked, e.report.max_rel_error, e.report.worst_index, e.report.passed
            );
        }
        s
    }
}

fn probes(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut v = sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Checks every input and every bound trainable parameter of each case.
pub fn run_suite(cases: &[Case], options: &SuiteOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut entries = Vec::new();
    for case in cases {
        let (g, _, out) = case.graph(&case.inputs, &case.params)?;
        let weights = random_tensor(&mut rng, g.shape(out), 1.0);
        drop(g);
        let (g, vars, total) = case.objective(&case.inputs, &case.params, &weights)?;
        let grads = g.backward_scalar(total)?;

        for (i, var) in vars.iter().enumerate() {
            let analytic = grads
                .wrt(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
            let idx = probes(analytic.len(), options.max_probes, &mut rng);
            let f = |t: &Tensor<f64>| {
                let mut inputs = case.inputs.clone();
                inputs[i] = t.clone();
                let (g, _, total) = case.objective(&inputs, &case.params, &weights)?;
                Ok(g.value(total).item())
            };
            let report = grad_check_at(f, &case.inputs[i], &analytic, &idx, options.step, options.tolerance)?;
            entries.push(SuiteEntry {
                case: case.name.clone(),
                tensor: format!("input{i}"),
                report,
            });
        }

        for id in case.params.trainable() {
            let Some(analytic) = grads.param(id) else { continue };
            let name = &case.params.get(id).name;
            if case.structural_zeros.contains(name) {
                let max_abs = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                entries.push(SuiteEntry {
                    case: case.name.clone(),
                    tensor: format!("{name} (zero)"),
                    report: GradCheckReport {
                        max_rel_error: max_abs,
                        worst_index: 0,
                        checked: analytic.len(),
                        tolerance: STRUCTURAL_ZERO,
                        passed: max_abs <= STRUCTURAL_ZERO,
                    },
                });
                continue;
            }
            let idx = probes(analytic.len(), options.max_probes, &mut rng);
            let f = |t: &Tensor<f64>| {
                let mut store = case.params.clone();
                store.assign(id, t.clone())?;
                let (g, _, total) = case.objective(&case.inputs, &store, &weights)?;
                Ok(g.value(total).item())
            };
            let report = grad_check_at(
                f,
                case.params.value(id),
                analytic,
                &idx,
                options.step,
                options.tolerance,
            )?;
            entries.push(SuiteEntry {
                case: case.name.clone(),
                tensor: case.params.get(id).name.clone(),
                report,
            });
        }
    }
    Ok(SuiteReport { entries })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Perturbs every registered value so checks do not sit on the
/// symmetric initial point (unit gamma, zero bias, equal slopes).
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn layer_store<L>(seed: u64, make: impl FnOnce(&mut Init<'_, f64>) -> Result<L>) -> Result<(ParamStore<f64>, L)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = make(&mut Init {
        store: &mut store,
        rng: &mut rng,
    })?;
    jitter(&mut store, &mut rng);
    Ok((store, layer))
}

/// Every primitive op and layer type, plus the dense block with width 4
/// and growth base 2 on a `(1, 4, 8, 8)` input.
pub fn standard_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: Shape| random_tensor(&mut rng, s, 1.0);
    let s = Shape::new(2, 3, 4, 4);
    let none = ParamStore::new;
    let mut cases = vec![
        Case::new("add", vec![r(s), r(s)], none(), Mode::Train, |cx, v| {
            cx.graph.add(v[0], v[1])
        }),
        Case::new("sub", vec![r(s), r(s)], none(), Mode::Train, |cx, v| {
            cx.graph.sub(v[0], v[1])
        }),
        Case::new("mul", vec![r(s), r(s)], none(), Mode::Train, |cx, v| {
            cx.graph.mul(v[0], v[1])
        }),
        Case::new("scale", vec![r(s)], none(), Mode::Train, |cx, v| {
            Ok(cx.graph.scale(v[0], 1.7))
        }),
        Case::new("sum", vec![r(s)], none(), Mode::Train, |cx, v| Ok(cx.graph.sum(v[0]))),
        Case::new("sum_squares", vec![r(s)], none(), Mode::Train, |cx, v| {
            Ok(cx.graph.sum_squares(v[0]))
        }),
        Case::new(
            "concat",
            vec![r(Shape::new(2, 1, 4, 4)), r(Shape::new(2, 2, 4, 4))],
            none(),
            Mode::Train,
            |cx, v| cx.graph.concat(&[v[0], v[1], v[0]]),
        ),
        Case::new("upsample2x", vec![r(s)], none(), Mode::Train, |cx, v| {
            Ok(cx.graph.upsample2x(v[0]))
        }),
        Case::new("softmax", vec![r(s)], none(), Mode::Train, |cx, v| {
            Ok(cx.graph.softmax(v[0]))
        }),
        Case::new("softmax_nll", vec![r(s)], none(), Mode::Train, |cx, v| {
            let labels: Vec<usize> = (0..2 * 16).map(|i| (i * 7) % 3).collect();
            let p = cx.graph.softmax(v[0]);
            Ok(cx.graph.nll(p, &labels, 1e-12)?.0)
        }),
    ];

    let convs = [
        ("conv3x3", ConvSpec::same(3, 4, 3)),
        ("conv2x2", ConvSpec::same(3, 4, 2)),
        ("conv1x1", ConvSpec::same(3, 4, 1)),
        ("conv2x2_stride2", ConvSpec::downsample(3)),
    ];
    for (i, (name, spec)) in convs.into_iter().enumerate() {
        let (store, conv) = layer_store(seed + 10 + i as u64, |init| Conv2d::new(init, name, spec))?;
        cases.push(Case::new(name, vec![r(s)], store, Mode::Train, move |cx, v| {
            conv.forward(cx, v[0])
        }));
    }

    for (mode, name) in [
        (Mode::Train, "batch_norm_train"),
        (Mode::Inference, "batch_norm_inference"),
    ] {
        let (mut store, bn) = layer_store(seed + 20, |init| Ok(BatchNorm::new(init, "bn", 3)))?;
        store
            .value_mut(bn.running_var)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.5);
        cases.push(Case::new(name, vec![r(s)], store, mode, move |cx, v| {
            bn.forward(cx, v[0])
        }));
    }

    let (store, act) = layer_store(seed + 30, |init| Ok(Prelu::new(init, "prelu", 3)))?;
    cases.push(Case::new("prelu", vec![r(s)], store, Mode::Train, move |cx, v| {
        act.forward(cx, v[0])
    }));

    let (store, unpool) = layer_store(seed + 40, |init| Unpool::new(init, "unpool", 4))?;
    cases.push(Case::new(
        "unpool",
        vec![r(Shape::new(2, 4, 3, 3))],
        store,
        Mode::Train,
        move |cx, v| unpool.forward(cx, v[0]),
    ));

    for (k, name) in [(3, "preact3x3"), (2, "preact2x2")] {
        let (store, unit) = layer_store(seed + 50 + k as u64, |init| {
            PreActivation::new(init, name, ConvSpec::same(3, 3, k))
        })?;
        cases.push(Case::new(name, vec![r(s)], store, Mode::Train, move |cx, v| {
            unit.forward(cx, v[0])
        }));
    }

    let x = r(Shape::new(1, 4, 8, 8));
    for mode in [Mode::Train, Mode::Inference] {
        cases.push(block_case(
            seed + 60,
            "dense_block",
            x.clone(),
            DenseBlockConfig::new(4, 2),
            mode,
        )?);
    }
    Ok(cases)
}

fn block_case(seed: u64, name: &str, x: Tensor<f64>, config: DenseBlockConfig, mode: Mode) -> Result<Case> {
    let (store, block) = layer_store(seed, |init| DenseBlock::new(init, "dense", config))?;
    let zeros = match mode {
        // every stage output is normalized again before it is used
        Mode::Train => block
            .stages
            .iter()
            .map(|s| store.get(s.conv.bias).name.clone())
            .collect(),
        Mode::Inference => Vec::new(),
    };
    let tag = match mode {
        Mode::Train => "train",
        Mode::Inference => "inference",
    };
    Ok(Case::new(format!("{name}_{tag}"), vec![x], store, mode, move |cx, v| {
        block.forward(cx, v[0])
    })
    .with_structural_zeros(zeros))
}

/// Dense block at the given width and growth base on `(2, channels, 8, 8)`
/// in both modes; pair with [`SuiteOptions::max_probes`] for wide blocks.
pub fn dense_block_cases(seed: u64, channels: usize, growth_base: usize) -> Result<Vec<Case>> {
    if channels == 0 {
        return Err(Error::invalid("dense block needs at least one channel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, Shape::new(2, channels, 8, 8), 1.0);
    let name = format!("dense_block_c{channels}_p{growth_base}");
    let config = DenseBlockConfig::new(channels, growth_base);
    [Mode::Train, Mode::Inference]
        .into_iter()
        .map(|mode| block_case(seed + 1, &name, x.clone(), config, mode))
        .collect()
}
