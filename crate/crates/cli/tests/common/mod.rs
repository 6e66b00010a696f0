#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::{DType, Tensor};
use introvac::data::{write_celeba_layout, Dataset};
use introvac::model::{DecoderOutput, Group, ImageTensor, IntroVac, ModelConfig};
use introvac::trainer::{Mode, TrainConfig, TrainState};

pub fn introvac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_introvac"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn introvac")
}

/// Runs and asserts success.
pub fn ok(args: &[&str]) -> Output {
    let out = introvac(args);
    assert!(
        out.status.success(),
        "introvac {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap()
}

/// A small synthetic run: 16×16 images, two stages, 4-d latent.
pub fn tiny_config(dir: &Path, name: &str, epochs: u64, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"output_dir = "{out}"

[model]
image_size = 16
image_channels = 3
latent_dim = 4
channel_plan = [4, 8]
num_attributes = 2

[train]
epochs = {epochs}
batch_size = 16
learning_rate = 0.001
seed = 5
{extra_train}

[data.synthetic]
count = 80
"#,
        out = s(&dir.join(name)),
    );
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

/// Re-runs the manifest's invocation into `fresh` and checks that every
/// listed artifact comes out byte-identical.
pub fn assert_replays(original: &Path, fresh: &Path) {
    let manifest = read_json(&original.join("manifest.json"));
    let mut argv: Vec<String> = manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    argv.extend(["--output-dir".to_string(), s(fresh).to_string()]);
    let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
    ok(&refs);
    let replayed = read_json(&fresh.join("manifest.json"));
    assert_eq!(manifest["outputs"], replayed["outputs"]);
    assert_eq!(manifest["counts"], replayed["counts"]);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for rel in outputs {
        let rel = rel.as_str().unwrap();
        if rel == "config.toml" {
            // records the output directory it was written for
            continue;
        }
        let a = std::fs::read(original.join(rel)).unwrap();
        let b = std::fs::read(fresh.join(rel)).unwrap();
        assert!(a == b, "{rel} differs after replay");
    }
}

/// 1×1 RGB model whose encoder mean and decoder are the identity, so
/// reconstructions equal their inputs.
pub fn identity_model() -> IntroVac {
    let cfg = ModelConfig {
        image_size: 1,
        image_channels: 3,
        latent_dim: 3,
        channel_plan: vec![],
        num_attributes: 1,
        attribute_names: vec!["a".into()],
        normalization: Default::default(),
        decoder_output: DecoderOutput::Clamp,
    };
    let m = IntroVac::new(cfg, 0, DType::F32).unwrap();
    let params = m.params_of(&Group::ALL);
    let set = |name: &str, v: Vec<f32>| {
        let (_, var) = params.iter().find(|(n, _)| n == name).unwrap();
        var.set(&Tensor::from_vec(v, var.shape(), var.device()).unwrap()).unwrap();
    };
    let mut enc = vec![0f32; 18];
    for i in 0..3 {
        enc[i * 3 + i] = 1.0;
    }
    set("encoder.out.weight", enc);
    set("encoder.out.bias", vec![0.0; 6]);
    let mut dec = vec![0f32; 9];
    for i in 0..3 {
        dec[i * 3 + i] = 1.0;
    }
    set("decoder.input.weight", dec);
    set("decoder.input.bias", vec![0.0; 3]);
    m
}

pub fn save_model(model: &IntroVac, path: &Path) {
    let cfg = TrainConfig::full_scale(Mode::Vac);
    TrainState::new(model, &cfg)
        .unwrap()
        .to_checkpoint(model, &cfg)
        .unwrap()
        .save(path)
        .unwrap();
}

/// `n` single-pixel images with varied 8-bit colours, in CelebA layout.
pub fn write_pixel_dataset(dir: &Path, n: usize) {
    let mut d = Dataset {
        attribute_names: vec!["a".into()],
        ..Default::default()
    };
    for i in 0..n {
        let px = [(i * 37 % 256) as f32, (i * 91 % 256) as f32, (i * 53 % 256) as f32];
        d.images
            .push(ImageTensor::new(3, 1, 1, px.iter().map(|v| v / 255.0).collect()).unwrap());
        d.labels.push(vec![(i % 2) as u8]);
        d.ids.push(format!("{:06}.png", i + 1));
    }
    write_celeba_layout(&d, dir, 1).unwrap();
}
