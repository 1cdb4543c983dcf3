//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdunet::connectivity::{connection_count, max_backprop_distance, shortcut_gain, ConnectivityGraph, Scheme};
use rdunet::data::{
    decode_pgm, encode_pgm, generate_synthetic, mask_from_bytes, mask_to_bytes, AugmentParams, GeneratorParams,
    MAX_SCALE, MAX_SHIFT,
};
use rdunet::dense_block::{DenseBlock, DenseBlockConfig};
use rdunet::gradcheck::{dense_block_cases, run_suite, standard_cases, SuiteOptions};
use rdunet::layers::{Forward, Init};
use rdunet::metrics::ConfusionMatrix;
use rdunet::network::{build_network, layer_plan, NetworkConfig, SkipMode};
use rdunet::training::{
    loss_graph, loss_value, train, AdamaxConfig, AdamaxState, LrSchedule, ScheduleUnit, Trainer, TrainingConfig,
};
use rdunet::{parallel, Graph, Mode, ParamKind, ParamStore, Shape, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    check(elapsed < limit, format!("{what} took {elapsed:?}, limit {limit:?}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut cases = standard_cases(3).map_err(|e| e.to_string())?;
    cases.extend(dense_block_cases(5, 16, 4).map_err(|e| e.to_string())?);
    let full = run_suite(&cases[..cases.len() - 2], &SuiteOptions::default()).map_err(|e| e.to_string())?;
    let sampled = SuiteOptions {
        max_probes: Some(24),
        ..SuiteOptions::default()
    };
    let wide = run_suite(&cases[cases.len() - 2..], &sampled).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    for report in [&full, &wide] {
        if let Some(bad) = report.entries.iter().find(|e| !e.report.passed) {
            return Err(format!(
                "{} / {}: error {:e}",
                bad.case, bad.tensor, bad.report.max_rel_error
            ));
        }
    }
    within(elapsed, Duration::from_secs(60), "gradient suite")?;
    let worst = full
        .entries
        .iter()
        .chain(&wide.entries)
        .filter(|e| !e.tensor.ends_with("(zero)"))
        .map(|e| e.report.max_rel_error)
        .fold(0.0, f64::max);
    Ok(format!(
        "{} tensors over {} cases, worst relative error {worst:.2e}, {elapsed:.1?}",
        full.entries.len() + wide.entries.len(),
        cases.len()
    ))
}

fn layer_table() -> Outcome {
    let start = Instant::now();
    let plan = layer_plan(&NetworkConfig::full_size()).map_err(|e| e.to_string())?;
    let sized = common::compare_plan(&plan)?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10), "shape inference")?;

    // the built network's traced shapes agree with shape inference
    let desk = NetworkConfig::desk();
    let mut model = build_network::<f64>(desk, 1).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(model.input_shape(2)));
    let (_, trace) = model
        .forward_traced(&mut g, x, Mode::Inference, SkipMode::Add)
        .map_err(|e| e.to_string())?;
    let desk_plan = layer_plan(&desk).map_err(|e| e.to_string())?;
    check(
        trace.len() == desk_plan.len(),
        format!("trace {} rows vs plan {}", trace.len(), desk_plan.len()),
    )?;
    for ((label, shape), row) in trace.iter().zip(&desk_plan) {
        check(
            (shape.h, shape.w, shape.c) == row.size,
            format!("{label}: traced {shape} vs planned {:?}", row.size),
        )?;
    }
    Ok(format!("{} rows, {sized} sized rows match, {elapsed:.1?}", plan.len()))
}

fn connectivity() -> Outcome {
    let start = Instant::now();
    for l in 1..=256usize {
        let oracle_edges = common::log_dense_edges(l);
        let sum: usize = (1..=l).map(|i| (i as f64).log2().floor() as usize + 1).sum();
        let g = ConnectivityGraph::new(l, Scheme::LogDense).map_err(|e| e.to_string())?;
        check(
            g.edge_count() == sum && oracle_edges.len() == sum && connection_count(l, Scheme::LogDense) == sum as u64,
            format!("L={l}: edge count {} vs {sum}", g.edge_count()),
        )?;
        let lf = l as f64;
        check(
            sum as f64 <= lf + lf * lf.log2(),
            format!("L={l}: {sum} edges exceed L + L log2 L"),
        )?;

        let mut mbd = 0;
        for i in 1..=l {
            let d = common::bfs(&oracle_edges, l + 1, i);
            for j in 0..i {
                mbd = mbd.max(d[j].ok_or(format!("L={l}: {j} unreachable from {i}"))?);
            }
        }
        let bound = 1 + (lf.log2().ceil() as usize);
        check(mbd <= bound, format!("L={l}: MBD {mbd} above {bound}"))?;
        let lib = max_backprop_distance(&g).map_err(|e| e.to_string())?;
        check(lib == mbd, format!("L={l}: library MBD {lib} vs oracle {mbd}"))?;
        let full = ConnectivityGraph::new(l, Scheme::FullDense).map_err(|e| e.to_string())?;
        check(
            max_backprop_distance(&full).map_err(|e| e.to_string())? == 1,
            format!("L={l}: full-dense MBD != 1"),
        )?;
    }
    let six = ConnectivityGraph::new(6, Scheme::LogDense)
        .map_err(|e| e.to_string())?
        .edge_count();
    let six_full = ConnectivityGraph::new(6, Scheme::FullDense)
        .map_err(|e| e.to_string())?
        .edge_count();
    check((six, six_full) == (14, 21), format!("L=6 edges {six} vs {six_full}"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5), "connectivity sweep")?;
    Ok(format!(
        "L in [1, 256] verified, L=6 gives 14 vs 21 edges, {elapsed:.1?}"
    ))
}

fn identity_split() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let block = DenseBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "unit",
        DenseBlockConfig::new(4, 2),
    )
    .map_err(|e| e.to_string())?;
    let x: Tensor<f64> = Tensor::from_fn(Shape::new(2, 4, 6, 6), |_| rng.gen_range(-1.0..1.0));
    let seed = Tensor::from_fn(Shape::new(2, 4, 6, 6), |_| rng.gen_range(-1.0..1.0));

    // residual unit x + F(x)
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let f = block
        .residual(&mut Forward::new(&mut g, &mut store.clone(), Mode::Train), xv)
        .map_err(|e| e.to_string())?;
    let y = g.add(f, xv).map_err(|e| e.to_string())?;
    let total = g.backward(y, seed.clone()).map_err(|e| e.to_string())?;
    let total = total.wrt(xv).unwrap();

    // function path alone
    let mut g = Graph::new();
    let xv = g.variable(x);
    let f = block
        .residual(&mut Forward::new(&mut g, &mut store.clone(), Mode::Train), xv)
        .map_err(|e| e.to_string())?;
    let branch = g.backward(f, seed.clone()).map_err(|e| e.to_string())?;
    let branch = branch.wrt(xv).unwrap();

    let split_err = total
        .data()
        .iter()
        .zip(branch.data())
        .zip(seed.data())
        .map(|((t, b), s): ((&f64, &f64), &f64)| (t - b - s).abs())
        .fold(0.0, f64::max);
    check(split_err <= 1e-12, format!("identity split off by {split_err:e}"))?;

    let vanishing = shortcut_gain(0.9, 0, 30).map_err(|e| e.to_string())?;
    let exploding = shortcut_gain(1.1, 0, 30).map_err(|e| e.to_string())?;
    check((vanishing - 0.04239).abs() < 1e-5, format!("0.9^30 gave {vanishing}"))?;
    check(
        (vanishing - 0.9f64.powi(30)).abs() < 1e-15,
        "gain differs from lambda^(L-l)",
    )?;
    check(
        exploding > 17.0 && (exploding - 1.1f64.powi(30)).abs() < 1e-12,
        format!("1.1^30 gave {exploding}"),
    )?;
    Ok(format!(
        "split error {split_err:.1e}, gain 0.9^30 = {vanishing:.5}, 1.1^30 = {exploding:.2}"
    ))
}

fn desk_overfit() -> Outcome {
    let start = Instant::now();
    let samples = generate_synthetic(2024, 8, 64, &GeneratorParams::default()).map_err(|e| e.to_string())?;
    let config = TrainingConfig {
        batch_size: 8,
        epochs: 500,
        max_steps: Some(500),
        target_accuracy: Some(0.99),
        augment: false,
        shuffle: false,
        seed: 1,
        schedule_unit: ScheduleUnit::Step,
        ..TrainingConfig::default()
    };

    // ten steps on the fixed batch
    let mut model = build_network::<f64>(NetworkConfig::desk(), 1).map_err(|e| e.to_string())?;
    let refs: Vec<_> = samples.iter().collect();
    let (batch, labels) = rdunet::data::to_batch::<f64>(&refs).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    for step in 0..10 {
        let lr = config.schedule.at(step);
        losses.push(
            trainer
                .step(&mut model, &batch, &labels, lr)
                .map_err(|e| e.to_string())?
                .loss,
        );
    }
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    check(decreasing, format!("loss not strictly decreasing: {losses:?}"))?;

    let mut model = build_network::<f64>(NetworkConfig::desk(), 1).map_err(|e| e.to_string())?;
    let report = train(&mut model, &samples, &config, None).map_err(|e| e.to_string())?;
    let acc = report.final_accuracy().unwrap_or(0.0);
    check(
        report.reached_target && acc >= 0.99,
        format!("accuracy {acc:.4} after {} steps", report.steps),
    )?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(600), "desk overfit")?;
    let predicted = model.predict(&batch).map_err(|e| e.to_string())?;
    let inference = predicted.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    Ok(format!(
        "loss {:.4} -> {:.4} over 10 steps; train accuracy {acc:.4} at step {}; inference-mode {inference:.4}; {elapsed:.0?}",
        losses[0], losses[9], report.steps
    ))
}

fn protocol() -> Outcome {
    let s = LrSchedule::default();
    for (epoch, want) in [(0, 1e-3), (15, 1e-4), (45, 1e-6)] {
        let got = s.at(epoch);
        check((got - want).abs() <= want * 1e-12, format!("lr({epoch}) = {got:e}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let shape = Shape::new(3, 2, 3, 3);
    let id = store.register(
        "w",
        ParamKind::ConvWeight,
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)),
    );
    let before = store.value(id).clone();
    let g = Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0));
    let lr = 1e-3;
    let eps = AdamaxConfig::default().eps;
    let mut state = AdamaxState::new(AdamaxConfig::default());
    state
        .step(&mut store, &[(id, g.clone())].into_iter().collect(), lr)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for ((a, b), gi) in store.value(id).data().iter().zip(before.data()).zip(g.data()) {
        let want = -lr * gi / (gi.abs() + eps);
        worst = worst.max(((a - b) - want).abs());
    }
    check(worst <= 1e-12, format!("first Adamax step off by {worst:e}"))?;

    let uniform = Tensor::full(Shape::new(2, 2, 8, 8), 0.5);
    let labels: Vec<usize> = (0..128).map(|i| (i / 3) % 2).collect();
    let direct = loss_value(&uniform, &labels, &ParamStore::new(), 0.0)
        .map_err(|e| e.to_string())?
        .total;
    let mut graph = Graph::<f64>::new();
    let logits = graph.input(Tensor::zeros(Shape::new(2, 2, 8, 8)));
    let (l, _) = loss_graph(&mut graph, logits, &labels, &ParamStore::new(), 0.0).map_err(|e| e.to_string())?;
    let via_logits = graph.value(l).item();
    let ln2 = 2f64.ln();
    check(
        (direct - ln2).abs() < 1e-9 && (via_logits - ln2).abs() < 1e-9,
        format!("uniform loss {direct} / {via_logits}"),
    )?;
    Ok(format!(
        "schedule exact, first-step error {worst:.1e}, uniform loss {direct:.9}"
    ))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut merged = ConfusionMatrix::new(2);
    let (mut all_pred, mut all_truth) = (Vec::new(), Vec::new());
    for pair in 0..100 {
        let bias = rng.gen_range(0.05..0.95);
        let truth: Vec<u8> = (0..32 * 32).map(|_| u8::from(rng.gen_bool(bias))).collect();
        let pred: Vec<u8> = truth
            .iter()
            .map(|&t| if rng.gen_bool(0.2) { 1 - t } else { t })
            .collect();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &truth).map_err(|e| e.to_string())?;
        compare_with_oracle(&cm, &pred, &truth).map_err(|e| format!("pair {pair}: {e}"))?;
        merged.merge(&cm).map_err(|e| e.to_string())?;
        all_pred.extend(pred);
        all_truth.extend(truth);
    }
    compare_with_oracle(&merged, &all_pred, &all_truth).map_err(|e| format!("merged: {e}"))?;

    let mut hand = ConfusionMatrix::new(2);
    // TP=8, FP=2, FN=0 for class 1, plus 5 true negatives
    let truth: Vec<u8> = [vec![1; 8], vec![0; 2], vec![0; 5]].concat();
    let pred: Vec<u8> = [vec![1; 8], vec![1; 2], vec![0; 5]].concat();
    hand.accumulate(&pred, &truth).map_err(|e| e.to_string())?;
    let f1 = hand.precision_recall_f1(1).f1;
    check((f1 - 8.0 / 9.0).abs() < 1e-15, format!("hand case F1 {f1}"))?;
    Ok(format!(
        "100 mask pairs and their merge match the counting oracle; hand F1 = {f1:.4}"
    ))
}

fn compare_with_oracle(cm: &ConfusionMatrix, pred: &[u8], truth: &[u8]) -> Result<(), String> {
    for class in 0..2u8 {
        let (tp, fp, fneg, hits, total) = common::count_oracle(pred, truth, class);
        let p = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let r = if tp + fneg == 0 {
            0.0
        } else {
            tp as f64 / (tp + fneg) as f64
        };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let s = cm.precision_recall_f1(class as usize);
        check(
            (s.precision, s.recall, s.f1) == (p, r, f1),
            format!("class {class}: {:?} vs ({p}, {r}, {f1})", (s.precision, s.recall, s.f1)),
        )?;
        let acc = cm.overall_accuracy().map_err(|e| e.to_string())?;
        check(acc == hits as f64 / total as f64, format!("accuracy {acc}"))?;
    }
    Ok(())
}

fn data_pipeline() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut min_shift, mut max_shift, mut min_scale, mut max_scale) = (0, 0, f64::MAX, 0.0f64);
    for _ in 0..10_000 {
        let p = AugmentParams::sample(&mut rng);
        for d in [p.shift.0, p.shift.1] {
            min_shift = min_shift.min(d);
            max_shift = max_shift.max(d);
        }
        min_scale = min_scale.min(p.scale);
        max_scale = max_scale.max(p.scale);
    }
    check(
        min_shift >= -MAX_SHIFT && max_shift <= MAX_SHIFT && MAX_SHIFT == 8,
        format!("translation range [{min_shift}, {max_shift}]"),
    )?;
    check(
        min_scale >= 1.0 && max_scale <= MAX_SCALE && MAX_SCALE == 1.5,
        format!("scale range [{min_scale}, {max_scale}]"),
    )?;

    let params = GeneratorParams::default();
    let a = generate_synthetic(77, 6, 64, &params).map_err(|e| e.to_string())?;
    let b = generate_synthetic(77, 6, 64, &params).map_err(|e| e.to_string())?;
    let bits = |s: &[rdunet::data::Sample]| -> Vec<u64> {
        s.iter().flat_map(|x| x.image.iter().map(|v| v.to_bits())).collect()
    };
    check(
        bits(&a) == bits(&b) && a == b,
        "generation differs between identical seeds",
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, s) in a.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.pgm"));
        std::fs::write(&path, encode_pgm(s.width, s.height, &mask_to_bytes(&s.mask))).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let (w, h, px) = decode_pgm(&bytes).map_err(|e| e.to_string())?;
        let mask = mask_from_bytes(&px, bytes.len() - px.len()).map_err(|e| e.to_string())?;
        check(
            (w, h) == (s.width, s.height) && mask == s.mask,
            format!("mask {i} changed in round trip"),
        )?;
    }
    Ok(format!(
        "shifts in [{min_shift}, {max_shift}], scales in [{min_scale:.4}, {max_scale:.4}]; masks round-trip; generation bit-identical"
    ))
}

fn batch_norm_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let shape = Shape::new(
            rng.gen_range(1..5),
            rng.gen_range(1..6),
            rng.gen_range(2..9),
            rng.gen_range(2..9),
        );
        let scales: Vec<f64> = (0..shape.c).map(|_| 10f64.powf(rng.gen_range(-0.5..1.5))).collect();
        let offsets: Vec<f64> = (0..shape.c).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let x = Tensor::from_fn(shape, |[_, c, _, _]| offsets[c] + scales[c] * rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let xv = g.input(x);
        let gamma = g.input(Tensor::ones(Shape::channels(shape.c)));
        let beta = g.input(Tensor::zeros(Shape::channels(shape.c)));
        let (y, _) = g.batch_norm_train(xv, gamma, beta, 1e-5).map_err(|e| e.to_string())?;
        let y = g.value(y);
        for c in 0..shape.c {
            let vals: Vec<f64> = (0..shape.n).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            worst_mean = worst_mean.max(mean.abs());
            worst_std = worst_std.max((std - 1.0).abs());
        }
    }
    check(worst_mean < 1e-10, format!("channel mean {worst_mean:e}"))?;
    check(worst_std < 1e-3, format!("channel std off by {worst_std:e}"))?;
    Ok(format!(
        "50 batches: max |mean| {worst_mean:.1e}, max |std - 1| {worst_std:.1e}"
    ))
}

fn main() {
    parallel::set_threads(0);
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("layer table conformance", layer_table),
        ("connectivity theory", connectivity),
        ("identity-mapping gradient split", identity_split),
        ("desk overfit", desk_overfit),
        ("protocol exactness", protocol),
        ("metrics oracle", metrics_oracle),
        ("data pipeline", data_pipeline),
        ("batch-norm contract", batch_norm_contract),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
