mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdunet::dense_block::{growth_rate, log_dense_inputs};
use rdunet::layers::{Forward, Init};
use rdunet::network::SkipMode;
use rdunet::training::loss_graph;
use rdunet::{
    build_network, checkpoint, count_params_and_flops, layer_plan, DenseBlock, DenseBlockConfig, Graph, Mode, Model,
    NetworkConfig, ParamKind, ParamStore, Shape, Tensor,
};

fn tiny() -> NetworkConfig {
    NetworkConfig {
        height: 16,
        width: 16,
        in_channels: 1,
        base_width: 4,
        growth_base: 2,
        growth_cap: None,
        classes: 2,
    }
}

fn random_input(model: &Model<f64>, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(model.input_shape(batch), |_| rng.gen_range(0.0..1.0))
}

#[test]
fn full_size_plan_matches_table() {
    let plan = layer_plan(&NetworkConfig::full_size()).unwrap();
    let sized = common::compare_plan(&plan).unwrap();
    assert!(sized >= 27, "{sized}");
}

#[test]
fn desk_trace_follows_its_plan() {
    let config = NetworkConfig::desk();
    let plan = layer_plan(&config).unwrap();
    let mut model = build_network::<f64>(config, 0).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_input(&model, 1, 0));
    let (out, trace) = model.forward_traced(&mut g, x, Mode::Inference, SkipMode::Add).unwrap();
    assert_eq!(g.shape(out), Shape::new(1, 2, 64, 64));
    assert_eq!(trace.len(), plan.len());
    let last = plan.len() - 1;
    for (i, ((label, shape), row)) in trace.iter().zip(&plan).enumerate() {
        let (h, w, c) = row.size;
        if i == last {
            // the plan lists the 1-channel mask; the tensor holds one logit map per class
            assert_eq!((shape.h, shape.w), (h, w), "{label}");
        } else {
            assert_eq!((shape.h, shape.w, shape.c), (h, w, c), "{label}");
        }
    }
}

#[test]
fn indivisible_input_size_is_rejected() {
    let config = NetworkConfig {
        height: 100,
        ..NetworkConfig::desk()
    };
    let err = build_network::<f64>(config, 0).unwrap_err().to_string();
    assert!(err.contains("divisible by 16"), "{err}");
    assert!(layer_plan(&config).is_err());
    assert!(count_params_and_flops(&config).is_err());
}

#[test]
fn desk_forward_shape() {
    let mut model = build_network::<f64>(NetworkConfig::desk(), 3).unwrap();
    let mut g = Graph::new();
    let x = g.input(random_input(&model, 2, 1));
    let y = model.forward(&mut g, x, Mode::Train).unwrap();
    assert_eq!(g.shape(y), Shape::new(2, 2, 64, 64));
    assert!(g.value(y).data().iter().all(|v| v.is_finite()));
}

#[test]
fn wrong_input_shape_fails() {
    let mut model = build_network::<f64>(tiny(), 0).unwrap();
    let bad = Tensor::zeros(Shape::new(1, 1, 32, 32));
    assert!(model.predict(&bad).is_err());
    let bad = Tensor::zeros(Shape::new(1, 3, 16, 16));
    assert!(model.predict(&bad).is_err());
}

#[test]
fn same_seed_gives_identical_registry() {
    let a = build_network::<f64>(tiny(), 9).unwrap();
    let b = build_network::<f64>(tiny(), 9).unwrap();
    let c = build_network::<f64>(tiny(), 10).unwrap();
    let bits = |m: &Model<f64>| -> Vec<(String, Vec<u64>)> {
        m.params
            .entries()
            .map(|(_, e)| (e.name.clone(), e.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn zero_skip_equals_omitted_skip() {
    let mut model = build_network::<f64>(tiny(), 1).unwrap();
    let input = random_input(&model, 2, 5);
    let mut run = |skips| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let (y, _) = model.forward_traced(&mut g, x, Mode::Inference, skips).unwrap();
        g.value(y).clone()
    };
    let (zero, omit, with) = (run(SkipMode::Zero), run(SkipMode::Omit), run(SkipMode::Add));
    assert_eq!(zero, omit);
    assert_ne!(zero, with);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let mut model = build_network::<f64>(tiny(), 2).unwrap();
    let input = random_input(&model, 2, 6);
    let labels: Vec<usize> = (0..2 * 16 * 16).map(|i| (i / 7) % 2).collect();
    let mut g = Graph::new();
    let x = g.input(input);
    let logits = model.forward(&mut g, x, Mode::Train).unwrap();
    let (loss, _) = loss_graph(&mut g, logits, &labels, &model.params, 1e-4).unwrap();
    let grads = g.backward_scalar(loss).unwrap();
    for (id, e) in model.params.entries() {
        let grad = grads.param(id);
        if !e.kind.trainable() {
            assert!(grad.is_none(), "{}", e.name);
            continue;
        }
        let grad = grad.unwrap_or_else(|| panic!("no gradient for {}", e.name));
        assert_eq!(grad.shape(), e.value.shape(), "{}", e.name);
        assert!(grad.data().iter().all(|v| v.is_finite()), "{}", e.name);
        // biases feeding a batch-normalized layer are invariant under shifts
        if e.kind != ParamKind::ConvBias || e.name.starts_with("head/classifier") {
            assert!(grad.data().iter().any(|&v| v != 0.0), "dead gradient for {}", e.name);
        }
    }
}

#[test]
fn zeroed_expansive_blocks_still_pass_gradient_to_input() {
    let mut model = build_network::<f64>(tiny(), 4).unwrap();
    let ids: Vec<_> = model
        .params
        .entries()
        .filter(|(_, e)| e.name.starts_with("up") && e.name.contains("/dense/") && e.kind == ParamKind::ConvWeight)
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        model.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let x = g.variable(random_input(&model, 2, 8));
    let y = model.forward(&mut g, x, Mode::Train).unwrap();
    let out = g.sum_squares(y);
    let grads = g.backward_scalar(out).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn cost_report_matches_built_registry() {
    for config in [tiny(), NetworkConfig::desk()] {
        let report = count_params_and_flops(&config).unwrap();
        let model = build_network::<f64>(config, 0).unwrap();
        let registered: usize = model
            .params
            .entries()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(_, e)| e.value.len())
            .sum();
        assert_eq!(report.total_params, registered);
        assert_eq!(report.dense_blocks.len(), 9);
        assert_eq!(report.levels.len(), 10);
        assert_eq!(report.total_macs, report.levels.iter().map(|l| l.macs).sum::<u64>());
        let dense_total: usize = model.dense_blocks().iter().map(|(_, b)| b.config.param_count()).sum();
        assert_eq!(dense_total, report.dense_blocks.iter().map(|b| b.params).sum::<usize>());
    }
}

#[test]
fn checkpoint_round_trip_of_full_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.rdun");
    let mut a = build_network::<f64>(tiny(), 11).unwrap();
    // populate running statistics so they are part of the round trip
    let mut g = Graph::new();
    let x = g.input(random_input(&a, 2, 1));
    a.forward(&mut g, x, Mode::Train).unwrap();
    checkpoint::save(&a.params, &path).unwrap();

    let mut b = build_network::<f64>(tiny(), 12).unwrap();
    checkpoint::load(&mut b.params, &path).unwrap();
    for ((_, ea), (_, eb)) in a.params.entries().zip(b.params.entries()) {
        assert_eq!(ea.name, eb.name);
        assert_eq!(ea.value, eb.value, "{}", ea.name);
    }
    let input = random_input(&a, 1, 3);
    assert_eq!(a.predict(&input).unwrap(), b.predict(&input).unwrap());

    let wide = NetworkConfig {
        base_width: 8,
        ..tiny()
    };
    let mut c = build_network::<f64>(wide, 0).unwrap();
    let err = checkpoint::load(&mut c.params, &path).unwrap_err().to_string();
    assert!(err.contains("down1"), "{err}");
}

#[test]
fn log_dense_predecessors() {
    assert_eq!(log_dense_inputs(1).unwrap(), vec![0]);
    assert_eq!(log_dense_inputs(3).unwrap(), vec![2, 1]);
    assert_eq!(log_dense_inputs(4).unwrap(), vec![3, 2, 0]);
    assert_eq!(log_dense_inputs(6).unwrap(), vec![5, 4, 2]);
    assert!(log_dense_inputs(0).is_err());
    let edges: usize = (1..=6).map(|i| log_dense_inputs(i).unwrap().len()).sum();
    assert_eq!(edges, 14);
}

#[test]
fn growth_rates() {
    let rates: Vec<usize> = (1..=5).map(|m| growth_rate(m, 8, None).unwrap()).collect();
    assert_eq!(rates, vec![8, 16, 32, 64, 128]);
    assert_eq!(growth_rate(5, 8, Some(32)).unwrap(), 32);
    assert!(growth_rate(6, 8, None).is_err());
}

#[test]
fn dense_block_widths_and_audit() {
    let cfg = DenseBlockConfig::new(64, 8);
    let widths: Vec<usize> = (1..=6).map(|m| cfg.input_width(m)).collect();
    // stage m reads the summed emission of its predecessors
    let emitted = [64, 8, 16, 32, 64, 128];
    let oracle: Vec<usize> = (1..=6usize)
        .map(|m| {
            (0..)
                .map(|k| 1usize << k)
                .take_while(|&s| s <= m)
                .map(|s| emitted[m - s])
                .sum()
        })
        .collect();
    assert_eq!(widths, oracle);
    let kernels: Vec<usize> = (1..=6).map(DenseBlockConfig::kernel).collect();
    assert_eq!(kernels, vec![1, 3, 3, 3, 3, 1]);

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = DenseBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "b",
        cfg,
    )
    .unwrap();
    let audit = block.audit();
    assert!(audit.consistent());
    assert_eq!((audit.log_dense_edges, audit.full_dense_edges), (14, 21));

    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(Shape::new(2, 64, 4, 4)));
    let y = block
        .forward(&mut Forward::new(&mut g, &mut store, Mode::Train), x)
        .unwrap();
    assert_eq!(g.shape(y), Shape::new(2, 64, 4, 4));
    let bad = g.input(Tensor::zeros(Shape::new(2, 32, 4, 4)));
    assert!(block
        .forward(&mut Forward::new(&mut g, &mut store, Mode::Train), bad)
        .is_err());
}
