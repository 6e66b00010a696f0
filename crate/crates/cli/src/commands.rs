use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::DType;
use introvac::data::{generate_synthetic, load_celeba_format, DatasetSpec, SyntheticSpec};
use introvac::distributions::LatentCode;
use introvac::eval::{evaluate_reconstruction_fid, EncoderEmbedder, Embedder, EvalReport, PixelEmbedder};
use introvac::imageio::{load_image, montage, save_png};
use introvac::latent_ops::{
    default_delta, generate_from_prior, langevin_sample, manipulate, manipulate_auto, AutoDeltaConfig,
    LangevinConfig, Manipulation, ManipulationRequest,
};
use introvac::model::{Checkpoint, ImageTensor, IntroVac};
use introvac::rng::{derive_seed, Stream};
use introvac::trainer::{fit, FitOptions, TrainState};
use serde_json::json;

use crate::config::{Overrides, RunConfig};
use crate::manifest::Manifest;
use crate::{Cli, Command, Common, EmbedderArg, UsageError};

const GRID_COLUMNS: usize = 8;
const GUTTER: usize = 2;

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Train => train(c),
        Command::Reconstruct { input } => reconstruct(c, input),
        Command::Manipulate { input, deltas, auto } => manipulate_cmd(c, input, deltas, auto.as_deref()),
        Command::Generate { count } => generate(c, *count),
        Command::LangevinSample {
            targets,
            alpha,
            steps,
            chains,
            no_reject,
        } => langevin(c, targets, *alpha, *steps, *chains, !*no_reject),
        Command::Evaluate { data_dir, embedder } => evaluate(c, data_dir.as_deref(), *embedder),
        Command::SynthData {
            count,
            image_size,
            attributes,
            correlation,
        } => synth_data(c, *count, *image_size, *attributes, *correlation),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn abs(p: &Path) -> String {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn output_dir(c: &Common, command: &str) -> PathBuf {
    c.output_dir.clone().unwrap_or_else(|| PathBuf::from("output").join(command))
}

fn load_model(c: &Common) -> anyhow::Result<(IntroVac, PathBuf)> {
    let path = c.checkpoint.clone().ok_or_else(|| usage("this command needs --checkpoint"))?;
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let model = IntroVac::from_checkpoint(&ckpt)?;
    if model.config().image_channels != 3 {
        return Err(usage("image commands need an RGB model"));
    }
    Ok((model, path))
}

fn attribute_index(model: &IntroVac, name: &str) -> anyhow::Result<usize> {
    model.config().attribute_index(name).ok_or_else(|| {
        let known: Vec<String> = (0..model.config().num_attributes)
            .map(|i| model.config().attribute_name(i))
            .collect();
        usage(format!("unknown attribute {name:?}; the checkpoint knows {known:?}"))
    })
}

/// Image files under `input` (or `input` itself), sorted by name.
fn input_images(input: &Path, size: usize) -> anyhow::Result<Vec<(String, ImageTensor)>> {
    let mut paths = Vec::new();
    if input.is_dir() {
        for entry in std::fs::read_dir(input)? {
            let p = entry?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                paths.push(p);
            }
        }
        paths.sort();
    } else if input.is_file() {
        paths.push(input.to_path_buf());
    } else {
        return Err(usage(format!("input {} does not exist", input.display())));
    }
    if paths.is_empty() {
        return Err(usage(format!("no images found in {}", input.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            let img = load_image(&p, size).with_context(|| format!("reading {}", p.display()))?;
            Ok((stem, img))
        })
        .collect()
}

fn grid(images: &[ImageTensor]) -> anyhow::Result<ImageTensor> {
    let rows: Vec<Vec<ImageTensor>> = images.chunks(GRID_COLUMNS).map(<[_]>::to_vec).collect();
    Ok(montage(&rows, GUTTER)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `sample_NNNN.png`, `grid.png` and `latents.json`.
fn write_samples(out: &Path, samples: &[(LatentCode, ImageTensor)], m: &mut Manifest) -> anyhow::Result<()> {
    for (i, (_, img)) in samples.iter().enumerate() {
        let name = format!("sample_{i:04}.png");
        save_png(img, &out.join(&name))?;
        m.output(name);
    }
    if !samples.is_empty() {
        let images: Vec<ImageTensor> = samples.iter().map(|(_, i)| i.clone()).collect();
        save_png(&grid(&images)?, &out.join("grid.png"))?;
        m.output("grid.png");
    }
    let latents: Vec<&Vec<f64>> = samples.iter().map(|(z, _)| &z.0).collect();
    write_json(&out.join("latents.json"), &latents)?;
    m.output("latents.json");
    Ok(())
}

fn train(c: &Common) -> anyhow::Result<()> {
    let path = c.config.as_ref().ok_or_else(|| usage("train needs --config"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&Overrides {
        seed: c.seed,
        mode: c.mode.map(Into::into),
        output_dir: c.output_dir.clone(),
    });
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    let snapshot = out.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml()?)?;

    let data = cfg.load_data()?;
    let model_config = cfg.resolved_model(&data.train.attribute_names)?;
    let (model, state) = match &c.checkpoint {
        Some(ck) => {
            let (model, state, saved) = TrainState::from_checkpoint(&Checkpoint::load(ck)?)?;
            if model.config() != &model_config {
                return Err(usage("checkpoint model differs from [model] in the config"));
            }
            let mut expected = saved.clone();
            expected.epochs = cfg.train.epochs;
            if expected != cfg.train {
                return Err(usage("checkpoint was trained with a different [train] section"));
            }
            (model, state)
        }
        None => {
            let model = IntroVac::new(model_config, cfg.train.seed, DType::F32)?;
            let state = TrainState::new(&model, &cfg.train)?;
            (model, state)
        }
    };
    let start_epoch = state.epoch;
    let validation = (!data.val.is_empty()).then_some(&data.val);
    let result = fit(
        &model,
        &data.train,
        &cfg.train,
        state,
        FitOptions {
            output_dir: Some(out.clone()),
            validation,
            ..Default::default()
        },
    )?;

    let mut argv = vec![
        "train".to_string(),
        "--config".into(),
        abs(&snapshot),
        "--seed".into(),
        cfg.train.seed.to_string(),
        "--mode".into(),
        cfg.train.mode.to_string(),
    ];
    if let Some(ck) = &c.checkpoint {
        argv.extend(["--checkpoint".into(), abs(ck)]);
    }
    let mut m = Manifest::new("train", argv);
    m.seed = Some(cfg.train.seed);
    m.checkpoint = c.checkpoint.as_deref().map(abs);
    m.config = serde_json::to_value(&cfg)?;
    m.output("config.toml");
    m.output("metrics.jsonl");
    for ck in &result.checkpoints {
        m.output(ck.strip_prefix(&out).unwrap_or(ck).display().to_string());
    }
    m.counts.insert("start_epoch".into(), start_epoch);
    m.counts.insert("epochs_completed".into(), result.state.epoch);
    m.counts.insert("steps".into(), result.steps.len() as u64);
    m.counts.insert("train_images".into(), data.train.len() as u64);
    m.counts.insert("val_images".into(), data.val.len() as u64);
    m.counts.insert("test_images".into(), data.test.len() as u64);
    if data.test.len() >= 2 {
        let shape = model.config().image_shape();
        let embedder = PixelEmbedder::new(shape, shape[1].min(8))?;
        let r = evaluate_reconstruction_fid(&model, &data.test, &embedder)?;
        let report = EvalReport {
            checkpoint: result
                .checkpoints
                .last()
                .map(|p| p.strip_prefix(&out).unwrap_or(p).display().to_string())
                .unwrap_or_default(),
            dataset: "test split".into(),
            embedder: embedder.name().to_string(),
            fid_reconstruction: r.fid_reconstruction,
            l1_error: r.l1_error,
            accuracy_per_attribute: r.accuracy_per_attribute,
            num_images: r.num_images,
            seed: cfg.train.seed,
        };
        write_json(&out.join("report.json"), &report)?;
        m.output("report.json");
    }
    m.write(&out)
}

fn reconstruct(c: &Common, input: &Path) -> anyhow::Result<()> {
    let (model, ck) = load_model(c)?;
    let out = output_dir(c, "reconstruct");
    let inputs = input_images(input, model.config().image_size)?;
    let images: Vec<ImageTensor> = inputs.iter().map(|(_, i)| i.clone()).collect();
    let recon = model.reconstruct(&images)?;
    let mut m = Manifest::new(
        "reconstruct",
        vec!["reconstruct".into(), "--checkpoint".into(), abs(&ck), "--input".into(), abs(input)],
    );
    m.checkpoint = Some(abs(&ck));
    m.config = json!({ "input": abs(input) });
    for ((stem, original), r) in inputs.iter().zip(&recon) {
        let name = format!("{stem}_reconstruction.png");
        save_png(r, &out.join(&name))?;
        m.output(name);
        let name = format!("{stem}_pair.png");
        save_png(&montage(&[vec![original.clone(), r.clone()]], GUTTER)?, &out.join(&name))?;
        m.output(name);
    }
    m.counts.insert("images".into(), inputs.len() as u64);
    m.write(&out)
}

/// `name` or `name=value`.
fn split_assignment(s: &str) -> (&str, Option<&str>) {
    match s.split_once('=') {
        Some((n, v)) => (n.trim(), Some(v.trim())),
        None => (s.trim(), None),
    }
}

fn manipulate_cmd(c: &Common, input: &Path, deltas: &[String], auto: Option<&str>) -> anyhow::Result<()> {
    let (model, ck) = load_model(c)?;
    let out = output_dir(c, "manipulate");
    let k = model.config().num_attributes;
    let head = model.head()?;
    let names: Vec<String> = (0..k).map(|i| model.config().attribute_name(i)).collect();

    enum Plan {
        Fixed(Vec<(usize, f64)>),
        Auto(usize, u8),
    }
    let mut argv = vec!["manipulate".into(), "--checkpoint".into(), abs(&ck), "--input".into(), abs(input)];
    let plan = match auto {
        Some(spec) => {
            let (name, label) = split_assignment(spec);
            let label: u8 = match label {
                Some("0") => 0,
                Some("1") => 1,
                _ => return Err(usage(format!("--auto expects name=0 or name=1, got {spec:?}"))),
            };
            let idx = attribute_index(&model, name)?;
            argv.extend(["--auto".into(), format!("{name}={label}")]);
            Plan::Auto(idx, label)
        }
        None => {
            if deltas.is_empty() {
                return Err(usage("give at least one --delta or --auto"));
            }
            let default = default_delta(k, deltas.len());
            let mut parsed = Vec::new();
            for d in deltas {
                let (name, value) = split_assignment(d);
                let idx = attribute_index(&model, name)?;
                let value = match value {
                    Some(v) => v.parse::<f64>().map_err(|_| usage(format!("bad shift in --delta {d:?}")))?,
                    None => default,
                };
                if !value.is_finite() {
                    return Err(usage(format!("bad shift in --delta {d:?}")));
                }
                argv.extend(["--delta".into(), format!("{name}={value}")]);
                parsed.push((idx, value));
            }
            Plan::Fixed(parsed)
        }
    };

    let mut m = Manifest::new("manipulate", argv);
    m.checkpoint = Some(abs(&ck));
    let norms: Vec<f64> = (0..k).map(|i| head.row_norm(i)).collect();
    for (stem, source) in input_images(input, model.config().image_size)? {
        let (man, extra): (Manipulation, serde_json::Value) = match &plan {
            Plan::Fixed(d) => {
                let man = manipulate(
                    &model,
                    &ManipulationRequest {
                        attribute_deltas: d.clone(),
                        source: source.clone(),
                    },
                )?;
                (man, json!({}))
            }
            Plan::Auto(idx, label) => {
                let a = manipulate_auto(&model, &source, *idx, *label, &AutoDeltaConfig::default())?;
                let extra = json!({ "auto_delta": a.delta, "iterations": a.iterations, "reached": a.reached });
                (a.manipulation, extra)
            }
        };
        let name = format!("{stem}_triptych.png");
        let panels = vec![source.clone(), man.reconstruction.clone(), man.x_aug.clone()];
        save_png(&montage(&[panels], GUTTER)?, &out.join(&name))?;
        m.output(name);
        let applied: BTreeMap<&str, f64> = match &plan {
            Plan::Fixed(d) => d.iter().map(|&(i, v)| (names[i].as_str(), v)).collect(),
            Plan::Auto(i, _) => [(names[*i].as_str(), extra["auto_delta"].as_f64().unwrap_or(0.0))].into(),
        };
        let sidecar = json!({
            "attribute_names": names,
            "deltas": applied,
            "direction_norms": norms,
            "logits_before": man.logits_before,
            "logits_after": man.logits_after,
            "auto": extra,
        });
        let name = format!("{stem}.json");
        write_json(&out.join(&name), &sidecar)?;
        m.output(name);
    }
    m.counts.insert("images".into(), (m.outputs.len() / 2) as u64);
    m.write(&out)
}

fn generate(c: &Common, count: usize) -> anyhow::Result<()> {
    if count == 0 {
        return Err(usage("--count must be positive"));
    }
    let (model, ck) = load_model(c)?;
    let out = output_dir(c, "generate");
    let seed = c.seed.unwrap_or(0);
    let samples = generate_from_prior(&model, count, seed)?;
    let mut m = Manifest::new(
        "generate",
        vec![
            "generate".into(),
            "--checkpoint".into(),
            abs(&ck),
            "--count".into(),
            count.to_string(),
            "--seed".into(),
            seed.to_string(),
        ],
    );
    m.seed = Some(seed);
    m.checkpoint = Some(abs(&ck));
    m.config = json!({ "count": count });
    std::fs::create_dir_all(&out)?;
    write_samples(&out, &samples, &mut m)?;
    m.counts.insert("samples".into(), samples.len() as u64);
    m.write(&out)
}

fn langevin(
    c: &Common,
    targets: &[String],
    alpha: f64,
    steps: usize,
    chains: usize,
    reject: bool,
) -> anyhow::Result<()> {
    let (model, ck) = load_model(c)?;
    let out = output_dir(c, "langevin-sample");
    let k = model.config().num_attributes;
    let mut labels: Vec<Option<u8>> = vec![None; k];
    for t in targets {
        let (name, value) = split_assignment(t);
        let idx = attribute_index(&model, name)?;
        labels[idx] = match value {
            Some("0") => Some(0),
            Some("1") => Some(1),
            _ => return Err(usage(format!("--target expects name=0 or name=1, got {t:?}"))),
        };
    }
    let target_labels: Vec<u8> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| usage(format!("no --target for attribute {}", model.config().attribute_name(i)))))
        .collect::<anyhow::Result<_>>()?;
    let seed = c.seed.unwrap_or(0);
    let cfg = LangevinConfig {
        step_size: alpha,
        steps,
        num_chains: chains,
        target_labels: target_labels.clone(),
        reject_misclassified: reject,
        seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let outcome = langevin_sample(&model, &cfg)?;

    let mut argv = vec!["langevin-sample".into(), "--checkpoint".into(), abs(&ck)];
    for (i, l) in target_labels.iter().enumerate() {
        argv.extend(["--target".into(), format!("{}={l}", model.config().attribute_name(i))]);
    }
    argv.extend([
        "--alpha".into(),
        alpha.to_string(),
        "--steps".into(),
        steps.to_string(),
        "--chains".into(),
        chains.to_string(),
        "--seed".into(),
        seed.to_string(),
    ]);
    if !reject {
        argv.push("--no-reject".into());
    }
    let mut m = Manifest::new("langevin-sample", argv);
    m.seed = Some(seed);
    m.checkpoint = Some(abs(&ck));
    m.config = serde_json::to_value(&cfg)?;
    m.counts.insert("chains".into(), chains as u64);
    m.counts.insert("accepted".into(), outcome.accepted() as u64);
    m.counts.insert("rejected".into(), outcome.rejected as u64);
    m.counts.insert("discarded_nonfinite".into(), outcome.discarded_nonfinite as u64);
    std::fs::create_dir_all(&out)?;
    if outcome.samples.is_empty() {
        let msg = "no chain ended on the target side of every attribute".to_string();
        log::warn!("{msg}");
        m.warnings.push(msg);
    }
    write_samples(&out, &outcome.samples, &mut m)?;
    m.write(&out)
}

fn evaluate(c: &Common, data_dir: Option<&Path>, embedder: EmbedderArg) -> anyhow::Result<()> {
    let (model, ck) = load_model(c)?;
    let out = output_dir(c, "evaluate");
    let mut argv = vec!["evaluate".into(), "--checkpoint".into(), abs(&ck)];
    let (dataset, description, seed) = match (data_dir, &c.config) {
        (Some(dir), _) => {
            let names: Vec<String> = (0..model.config().num_attributes)
                .map(|i| model.config().attribute_name(i))
                .collect();
            let spec = DatasetSpec {
                root_path: dir.to_path_buf(),
                attribute_file: dir.join("list_attr.txt"),
                selected_attributes: names,
                merge_groups: Vec::new(),
                image_size: model.config().image_size,
                split_seed: 0,
                split_fractions: vec![1.0, 0.0, 0.0],
            };
            argv.extend(["--data-dir".into(), abs(dir)]);
            (load_celeba_format(&spec)?.train, abs(dir), None)
        }
        (None, Some(path)) => {
            let mut cfg = RunConfig::load(path)?;
            cfg.apply(&Overrides {
                seed: c.seed,
                ..Default::default()
            });
            cfg.validate()?;
            argv.extend([
                "--config".into(),
                abs(path),
                "--seed".into(),
                cfg.train.seed.to_string(),
            ]);
            let test = cfg.load_data()?.test;
            (test, format!("test split of {}", abs(path)), Some(cfg.train.seed))
        }
        (None, None) => return Err(usage("evaluate needs --data-dir or --config")),
    };
    if dataset.len() < 2 {
        return Err(usage("evaluation needs at least two images"));
    }
    let shape = model.config().image_shape();
    let pixels = PixelEmbedder::new(shape, shape[1].min(8))?;
    let features = EncoderEmbedder { model: &model };
    let emb: &dyn Embedder = match embedder {
        EmbedderArg::Pixels => &pixels,
        EmbedderArg::ClassifierFeatures => &features,
    };
    argv.extend(["--embedder".into(), serde_json::to_value(embedder)?.as_str().unwrap_or("pixels").into()]);
    let r = evaluate_reconstruction_fid(&model, &dataset, emb)?;
    let report = EvalReport {
        checkpoint: abs(&ck),
        dataset: description,
        embedder: emb.name().to_string(),
        fid_reconstruction: r.fid_reconstruction,
        l1_error: r.l1_error,
        accuracy_per_attribute: r.accuracy_per_attribute,
        num_images: r.num_images,
        seed: seed.unwrap_or(0),
    };
    let mut m = Manifest::new("evaluate", argv);
    m.seed = seed;
    m.checkpoint = Some(abs(&ck));
    m.config = json!({ "embedder": embedder });
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("report.json"), &report)?;
    m.output("report.json");
    m.counts.insert("images".into(), r.num_images as u64);
    m.write(&out)
}

fn synth_data(c: &Common, count: usize, image_size: usize, attributes: usize, correlation: f64) -> anyhow::Result<()> {
    let out = output_dir(c, "synth-data");
    let seed = c.seed.unwrap_or(0);
    let spec = SyntheticSpec {
        count,
        image_size,
        num_attributes: attributes,
        seed: derive_seed(seed, Stream::Data, 0),
        correlation,
    };
    let data = generate_synthetic(&spec).map_err(|e| usage(e.to_string()))?;
    introvac::data::write_celeba_layout(&data, &out, image_size)?;
    let mut m = Manifest::new(
        "synth-data",
        vec![
            "synth-data".into(),
            "--count".into(),
            count.to_string(),
            "--image-size".into(),
            image_size.to_string(),
            "--attributes".into(),
            attributes.to_string(),
            "--correlation".into(),
            correlation.to_string(),
            "--seed".into(),
            seed.to_string(),
        ],
    );
    m.seed = Some(seed);
    m.config = serde_json::to_value(&spec)?;
    m.outputs = data.ids.clone();
    m.output("list_attr.txt");
    m.counts.insert("images".into(), count as u64);
    for (j, name) in data.attribute_names.iter().enumerate() {
        let positives = data.labels.iter().filter(|l| l[j] == 1).count();
        m.counts.insert(format!("positive_{name}"), positives as u64);
    }
    m.write(&out)
}
