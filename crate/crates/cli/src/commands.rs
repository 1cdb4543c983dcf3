use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use rdunet::connectivity::{analyze as analyze_schemes, rows_to_csv};
use rdunet::data::{
    generate_synthetic, read_image, to_batch, write_dataset, write_mask, Manifest, Sample, Split, SplitCounts,
};
use rdunet::gradcheck::{dense_block_cases, run_suite, standard_cases, SuiteOptions};
use rdunet::metrics::ConfusionMatrix;
use rdunet::training::{FINAL_CHECKPOINT, LOG_FILE};
use rdunet::{build_network, checkpoint, Model, Scheme};

use crate::config::{Invocation, RunConfig, SNAPSHOT_FILE};
use crate::{CliError, Common};

const MANIFEST: &str = "manifest.tsv";
const PREDICT_BATCH: usize = 8;

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)
}

fn invocation(subcommand: &str, args: impl IntoIterator<Item = (&'static str, Value)>) -> Invocation {
    Invocation {
        subcommand: subcommand.into(),
        args: args
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<BTreeMap<_, _>>(),
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.display().to_string())
}

/// Library errors touching `path`; I/O failures get the path attached.
fn at(path: &Path) -> impl Fn(rdunet::Error) -> CliError + '_ {
    move |e| {
        let mut err = CliError::from(e);
        if err.code == CliError::IO {
            err.message = format!("{}: {}", path.display(), err.message);
        }
        err
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn load_manifest(data: &Path) -> Result<Manifest, CliError> {
    let path = data.join(MANIFEST);
    Manifest::load(&path).map_err(at(&path))
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    s.parse().map_err(|e: rdunet::Error| CliError::config(e.to_string()))
}

fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>, CliError> {
    manifest.load_split(split).map_err(at(&manifest.root))
}

pub fn gen_data(common: &Common, count: usize, size: Option<usize>, out_dir: &Path) -> Result<(), CliError> {
    let config = resolve(common)?;
    let size = size.unwrap_or(config.network.height);
    let samples = generate_synthetic(config.seed, count, size, &config.generator()).map_err(CliError::from)?;
    create_dir(out_dir)?;
    let manifest = write_dataset(&samples, out_dir, SplitCounts::for_count(count)).map_err(at(out_dir))?;
    config.write_snapshot(
        out_dir,
        invocation(
            "gen-data",
            [
                ("count", json!(count)),
                ("size", json!(size)),
                ("out_dir", path_value(out_dir)),
            ],
        ),
    )?;
    let n = |s| manifest.split(s).count();
    println!(
        "wrote {count} samples ({} train, {} val, {} test) to {}",
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        out_dir.display()
    );
    Ok(())
}

pub fn train(common: &Common, data: &Path, out_dir: &Path) -> Result<(), CliError> {
    let config = resolve(common)?;
    let manifest = load_manifest(data)?;
    let samples = load_split(&manifest, Split::Train)?;
    if samples.is_empty() {
        return Err(CliError::config(format!("{} has no train samples", data.display())));
    }
    create_dir(out_dir)?;
    config.write_snapshot(
        out_dir,
        invocation("train", [("data", path_value(data)), ("out_dir", path_value(out_dir))]),
    )?;
    let mut model = build_network::<f64>(config.network(), config.seed)?;
    let report = rdunet::train(&mut model, &samples, &config.training(), Some(out_dir)).map_err(at(out_dir))?;

    let val = load_split(&manifest, Split::Val)?;
    if !val.is_empty() {
        let matrix = score(&mut model, &val)?;
        write(&out_dir.join("val_metrics.csv"), &matrix.report_csv()?)?;
    }
    match report.rows.last() {
        Some(last) => println!(
            "trained {} steps over {} epochs: loss {:.6}, train accuracy {:.4}{}",
            report.steps,
            report.rows.len(),
            last.loss,
            last.accuracy,
            if report.reached_target { " (target reached)" } else { "" }
        ),
        None => println!("no training steps; initial parameters saved"),
    }
    println!(
        "wrote {} and {}",
        out_dir.join(FINAL_CHECKPOINT).display(),
        out_dir.join(LOG_FILE).display()
    );
    Ok(())
}

/// Builds the configured model and loads `path` into it.
fn load_model(config: &RunConfig, path: &Path) -> Result<Model<f64>, CliError> {
    let mut model = build_network::<f64>(config.network(), config.seed)?;
    checkpoint::load(&mut model.params, path).map_err(at(path))?;
    Ok(model)
}

fn predict_masks(model: &mut Model<f64>, samples: &[Sample]) -> Result<Vec<Vec<u8>>, CliError> {
    let (h, w) = (model.config.height, model.config.width);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        if let Some(s) = chunk.iter().find(|s| (s.height, s.width) != (h, w)) {
            return Err(CliError::config(format!(
                "{}x{} image for a {}x{} network",
                s.height, s.width, h, w
            )));
        }
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = to_batch::<f64>(&refs)?;
        let classes = model.predict(&x)?;
        out.extend(classes.chunks(h * w).map(|m| m.iter().map(|&c| c as u8).collect()));
    }
    Ok(out)
}

fn score(model: &mut Model<f64>, samples: &[Sample]) -> Result<ConfusionMatrix, CliError> {
    let mut matrix = ConfusionMatrix::new(model.config.classes);
    for (mask, s) in predict_masks(model, samples)?.iter().zip(samples) {
        matrix.accumulate(mask, &s.mask)?;
    }
    Ok(matrix)
}

/// The checkpoint's own snapshot supplies the network unless `--config` is given.
fn predict_config(common: &Common, checkpoint: &Path) -> Result<RunConfig, CliError> {
    if common.config.is_some() {
        return resolve(common);
    }
    let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(SNAPSHOT_FILE);
    if beside.exists() {
        let with_snapshot = Common {
            config: Some(beside),
            ..common.clone()
        };
        resolve(&with_snapshot)
    } else {
        resolve(common)
    }
}

pub fn predict(
    common: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
    split: &str,
    inputs: &[PathBuf],
    out_dir: &Path,
) -> Result<(), CliError> {
    let config = predict_config(common, checkpoint)?;
    let mut model = load_model(&config, checkpoint)?;
    // (output name, sample); masks keep the dataset's relative layout
    let mut jobs: Vec<(PathBuf, Sample)> = Vec::new();
    let mut args = vec![("checkpoint", path_value(checkpoint)), ("out_dir", path_value(out_dir))];
    if let Some(data) = data {
        let split_id = parse_split(split)?;
        let manifest = load_manifest(data)?;
        let samples = load_split(&manifest, split_id)?;
        jobs.extend(manifest.split(split_id).map(|e| e.mask.clone()).zip(samples));
        args.extend([("data", path_value(data)), ("split", json!(split))]);
    } else {
        if inputs.is_empty() {
            return Err(CliError::config("predict needs --data or at least one --input"));
        }
        for p in inputs {
            let (w, h, image) = read_image(p).map_err(at(p))?;
            let name = Path::new("masks").join(p.file_name().unwrap_or_default());
            jobs.push((name, Sample::new(h, w, image, vec![0; w * h])?));
        }
        args.push(("input", Value::Array(inputs.iter().map(|p| path_value(p)).collect())));
    }
    let samples: Vec<Sample> = jobs.iter().map(|(_, s)| s.clone()).collect();
    let masks = predict_masks(&mut model, &samples)?;
    for ((name, s), mask) in jobs.iter().zip(&masks) {
        let path = out_dir.join(name);
        create_dir(path.parent().unwrap_or(out_dir))?;
        write_mask(&path, s.width, s.height, mask).map_err(at(&path))?;
    }
    config.write_snapshot(out_dir, invocation("predict", args))?;
    println!("wrote {} masks under {}", masks.len(), out_dir.display());
    Ok(())
}

pub fn eval(common: &Common, data: &Path, split: &str, predictions: &Path, out_dir: &Path) -> Result<(), CliError> {
    let config = resolve(common)?;
    let split_id = parse_split(split)?;
    let manifest = load_manifest(data)?;
    let mut matrix = ConfusionMatrix::new(config.network.classes);
    for e in manifest.split(split_id) {
        let truth_path = manifest.resolve(&e.mask);
        let pred_path = predictions.join(&e.mask);
        let (tw, th, truth) = rdunet::data::read_mask(&truth_path).map_err(at(&truth_path))?;
        let (pw, ph, pred) = rdunet::data::read_mask(&pred_path).map_err(at(&pred_path))?;
        if (tw, th) != (pw, ph) {
            return Err(CliError::io(format!(
                "{}: {pw}x{ph} prediction for a {tw}x{th} mask",
                pred_path.display()
            )));
        }
        matrix.accumulate(&pred, &truth)?;
    }
    if matrix.total() == 0 {
        return Err(CliError::config(format!(
            "split {split} of {} is empty",
            data.display()
        )));
    }
    let csv = matrix.report_csv()?;
    create_dir(out_dir)?;
    write(&out_dir.join("metrics.csv"), &csv)?;
    config.write_snapshot(
        out_dir,
        invocation(
            "eval",
            [
                ("data", path_value(data)),
                ("split", json!(split)),
                ("predictions", path_value(predictions)),
                ("out_dir", path_value(out_dir)),
            ],
        ),
    )?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(
    common: &Common,
    tolerance: f64,
    step: f64,
    max_probes: usize,
    out_dir: Option<&Path>,
) -> Result<(), CliError> {
    let config = resolve(common)?;
    if !(tolerance > 0.0 && step > 0.0) {
        return Err(CliError::config("tolerance and step must be positive"));
    }
    let mut cases = standard_cases(config.seed)?;
    cases.extend(dense_block_cases(
        config.seed,
        config.network.base_width,
        config.network.growth_base,
    )?);
    let options = SuiteOptions {
        step,
        tolerance,
        max_probes: (max_probes > 0).then_some(max_probes),
        seed: config.seed,
    };
    let report = run_suite(&cases, &options)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write(&dir.join("gradcheck.csv"), &report.to_csv())?;
        config.write_snapshot(
            dir,
            invocation(
                "gradcheck",
                [
                    ("tolerance", json!(tolerance)),
                    ("step", json!(step)),
                    ("max_probes", json!(max_probes)),
                    ("out_dir", path_value(dir)),
                ],
            ),
        )?;
    }
    let worst = report
        .worst()
        .ok_or_else(|| CliError::verification("gradient suite is empty"))?;
    let summary = format!(
        "{} tensors, worst relative error {:.3e} at {}/{}",
        report.entries.len(),
        worst.report.max_rel_error,
        worst.case,
        worst.tensor
    );
    if report.passed() {
        println!("gradcheck passed: {summary}");
        Ok(())
    } else {
        let failed = report.entries.iter().filter(|e| !e.report.passed).count();
        Err(CliError::verification(format!(
            "gradcheck failed ({failed} tensors above {tolerance:e}): {summary}"
        )))
    }
}

fn parse_layers(spec: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::config(format!("--L expects N or A..B with 1 <= A <= B, got {spec:?}"));
    let (lo, hi) = match spec.split_once("..") {
        Some((a, b)) => (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        ),
        None => {
            let n = spec.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn analyze(common: &Common, schemes: &[String], layers: &str, out_dir: Option<&Path>) -> Result<(), CliError> {
    let config = resolve(common)?;
    let schemes: Vec<Scheme> = schemes
        .iter()
        .map(|s| s.parse().map_err(|e: rdunet::Error| CliError::config(e.to_string())))
        .collect::<Result<_, _>>()?;
    let (lo, hi) = parse_layers(layers)?;
    let rows = analyze_schemes(&schemes, lo..=hi)?;
    let csv = rows_to_csv(&rows);
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write(&dir.join("analysis.csv"), &csv)?;
        config.write_snapshot(
            dir,
            invocation(
                "analyze",
                [
                    ("scheme", json!(schemes.iter().map(|s| s.name()).collect::<Vec<_>>())),
                    ("L", json!(layers)),
                    ("out_dir", path_value(dir)),
                ],
            ),
        )?;
    }
    print!("{csv}");
    Ok(())
}
