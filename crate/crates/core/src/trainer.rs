//! Two-phase introspective training.
//!
//! One step:
//! 1. draw `Z_g` from the prior and decode `X_g = G(Z_g)`;
//! 2. encode the batch, sample `Z_r`, classify, decode `X_r = G(Z_r)` and
//!    `X_rr = G(dt(Z_r))`;
//! 3. backpropagate the phase-1 total; Adam-update encoder and classifier;
//! 4. backpropagate the phase-2 total (its frozen encoder/classifier already
//!    carry the phase-1 update); Adam-update the decoder with the sum of its
//!    phase-1 and phase-2 gradients;
//! 5. drop all gradients.
//!
//! In `vac` mode there is no adversarial term and one Adam state covers every
//! parameter.
//!
//! All randomness is derived from `(seed, global_step)` for noise and
//! `(seed, epoch)` for batch order, so a checkpoint holding parameters,
//! optimizer moments and counters resumes bit-exactly.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, Tensor, Var};
use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::{kl_to_standard_normal_batch, normal_tensor, reparameterize_batch};
use crate::error::{Error, Result};
use crate::eval::{evaluate_reconstruction_fid, PixelEmbedder};
use crate::losses::{
    classification_loss, encoder_adversarial_loss, decoder_generated_adversarial_loss,
    decoder_reconstruction_adversarial_loss, phase1_total, phase2_total, reconstruction_loss,
    softplus, vac_total, LossReport, LossWeights, ReconstructionKind,
};
use crate::model::{Checkpoint, CheckpointHeader, Group, IntroVac, Pass, FORMAT_VERSION};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::tensor::scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Variational classifier: ELBO plus classification, one optimizer.
    Vac,
    /// Adds the introspective adversarial game between decoder and encoder.
    #[default]
    Introvac,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vac => "vac",
            Mode::Introvac => "introvac",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vac" => Ok(Mode::Vac),
            "introvac" => Ok(Mode::Introvac),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected vac or introvac)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Epochs (0-based) at which the learning rate is divided by `lr_decay_factor`.
    #[serde(default)]
    pub lr_decay_epochs: Vec<u64>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub reconstruction: ReconstructionKind,
    /// Share of the training set held out for per-epoch validation.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_lr() -> f64 {
    0.0002
}
fn default_decay_factor() -> f64 {
    2.0
}
fn default_checkpoint_every() -> u64 {
    1
}
fn default_validation_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    /// Full-scale schedule: batch 64, lr 0.0002; introvac runs 150 epochs with
    /// halvings at 60, 90 and 120, vac runs 600 epochs without decay.
    pub fn full_scale(mode: Mode) -> Self {
        let (epochs, decays) = match mode {
            Mode::Introvac => (150, vec![60, 90, 120]),
            Mode::Vac => (600, vec![]),
        };
        Self {
            epochs,
            batch_size: 64,
            learning_rate: default_lr(),
            lr_decay_epochs: decays,
            lr_decay_factor: 2.0,
            loss_weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10,
            mode,
            reconstruction: ReconstructionKind::L1,
            validation_fraction: 0.1,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return fail(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_decay_epochs must be strictly increasing".into());
        }
        if self.lr_decay_epochs.iter().any(|&e| e >= self.epochs) {
            return fail("lr_decay_epochs must be < epochs".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail("validation_fraction must lie in [0, 1)".into());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return fail("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.loss_weights.validate()
    }
}

/// `learning_rate / factor^n` with `n` the number of decay epochs ≤ `epoch`.
pub fn apply_lr_schedule(epoch: u64, config: &TrainConfig) -> f64 {
    let n = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    config.learning_rate / config.lr_decay_factor.powi(n as i32)
}

/// Gradients by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Gradient of every listed parameter; parameters the loss does not reach
/// get zeros.
pub fn collect_gradients(store: &GradStore, params: &[(String, Var)]) -> Result<Gradients> {
    params
        .iter()
        .map(|(name, var)| {
            let g = match store.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            Ok((name.clone(), g))
        })
        .collect()
}

/// Adam moments for a fixed parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &[(String, Var)]) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { step: 0, m, v })
    }

    pub fn update(
        &mut self,
        params: &[(String, Var)],
        grads: &Gradients,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, var) in params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for {name}")))?;
            *m = (m.affine(cfg.beta1, 0.0)? + g.affine(1.0 - cfg.beta1, 0.0)?)?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::invalid(format!("no moment for {name}")))?;
            *v = (v.affine(cfg.beta2, 0.0)? + g.sqr()?.affine(1.0 - cfg.beta2, 0.0)?)?;
            let denom = v.sqrt()?.affine(1.0 / bc2.sqrt(), cfg.eps)?;
            let delta = m.div(&denom)?.affine(lr / bc1, 0.0)?;
            var.set(&var.as_tensor().sub(&delta)?)?;
        }
        Ok(())
    }

    fn write_tensors(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (name, t) in &self.m {
            out.insert(format!("{prefix}.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("{prefix}.v.{name}"), t.clone());
        }
    }

    fn read_tensors(
        prefix: &str,
        step: u64,
        params: &[(String, Var)],
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params {
            for (kind, map) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}.{kind}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has shape {:?}", t.dims())));
                }
                map.insert(name.clone(), t.clone());
            }
        }
        Ok(Self { step, m, v })
    }
}

/// Counters and optimizer moments. Randomness needs no state beyond `seed`.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub seed: u64,
    /// Encoder + classifier (introvac) or every parameter (vac).
    pub phase1: Adam,
    /// Decoder; absent in vac mode.
    pub phase2: Option<Adam>,
}

fn phase1_groups(mode: Mode) -> &'static [Group] {
    match mode {
        Mode::Vac => &Group::ALL,
        Mode::Introvac => &[Group::Encoder, Group::Classifier],
    }
}

const PHASE1_PREFIX: &str = "optim.phase1";
const PHASE2_PREFIX: &str = "optim.phase2";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerExtra {
    train_config: TrainConfig,
    phase1_step: u64,
    #[serde(default)]
    phase2_step: Option<u64>,
}

impl TrainState {
    pub fn new(model: &IntroVac, config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            epoch: 0,
            global_step: 0,
            seed: config.seed,
            phase1: Adam::new(&model.params_of(phase1_groups(config.mode)))?,
            phase2: match config.mode {
                Mode::Vac => None,
                Mode::Introvac => Some(Adam::new(&model.params_of(&[Group::Decoder]))?),
            },
        })
    }

    /// Snapshot of model, optimizer state, counters and config.
    pub fn to_checkpoint(&self, model: &IntroVac, config: &TrainConfig) -> Result<Checkpoint> {
        let mut tensors = model.named_tensors();
        self.phase1.write_tensors(PHASE1_PREFIX, &mut tensors);
        if let Some(p2) = &self.phase2 {
            p2.write_tensors(PHASE2_PREFIX, &mut tensors);
        }
        let extra = TrainerExtra {
            train_config: config.clone(),
            phase1_step: self.phase1.step,
            phase2_step: self.phase2.as_ref().map(|a| a.step),
        };
        Ok(Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                epoch: self.epoch,
                global_step: self.global_step,
                seed: self.seed,
                extra: serde_json::to_value(extra)?,
            },
            tensors,
        })
    }

    /// Rebuilds model, trainer state and the training config stored with it.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(IntroVac, TrainState, TrainConfig)> {
        let model = IntroVac::from_checkpoint(ckpt)?;
        let extra: TrainerExtra = serde_json::from_value(ckpt.header.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no trainer state: {e}")))?;
        let config = extra.train_config;
        let phase1 = Adam::read_tensors(
            PHASE1_PREFIX,
            extra.phase1_step,
            &model.params_of(phase1_groups(config.mode)),
            &ckpt.tensors,
        )?;
        let phase2 = match (config.mode, extra.phase2_step) {
            (Mode::Introvac, Some(step)) => Some(Adam::read_tensors(
                PHASE2_PREFIX,
                step,
                &model.params_of(&[Group::Decoder]),
                &ckpt.tensors,
            )?),
            (Mode::Vac, None) => None,
            _ => return Err(Error::Checkpoint("optimizer state does not match training mode".into())),
        };
        let state = TrainState {
            epoch: ckpt.header.epoch,
            global_step: ckpt.header.global_step,
            seed: ckpt.header.seed,
            phase1,
            phase2,
        };
        Ok((model, state, config))
    }
}

/// A batch as tensors: images `[B, C, H, W]`, labels `[B, k]` in {0, 1}.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Tensor,
}

impl Batch {
    pub fn from_dataset(model: &IntroVac, dataset: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let k = model.config().num_attributes;
        if dataset.num_attributes() != k {
            return Err(Error::invalid(format!(
                "dataset has {} attributes, model expects {k}",
                dataset.num_attributes()
            )));
        }
        let images: Vec<_> = indices.iter().map(|&i| dataset.images[i].clone()).collect();
        let labels = Tensor::from_vec(dataset.label_rows(indices), (indices.len(), k), model.device())?
            .to_dtype(model.dtype())?;
        Ok(Self {
            images: model.images_to_tensor(&images)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Internals of one step, for verifying the update order.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub before: BTreeMap<String, Tensor>,
    pub after_phase1: BTreeMap<String, Tensor>,
    pub after_phase2: BTreeMap<String, Tensor>,
    /// Decoder gradients of the phase-1 total, the phase-2 total and the sum
    /// handed to the decoder optimizer.
    pub decoder_grad_phase1: Gradients,
    pub decoder_grad_phase2: Gradients,
    pub decoder_grad_applied: Gradients,
}

fn snapshot(model: &IntroVac) -> Result<BTreeMap<String, Tensor>> {
    model
        .params_of(&Group::ALL)
        .into_iter()
        .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
        .collect()
}

fn divergence(step: u64, report: &LossReport) -> Error {
    Error::Divergence {
        step,
        detail: serde_json::to_string(report).unwrap_or_else(|_| format!("{report:?}")),
    }
}

/// One optimization step. On a non-finite loss nothing further is updated
/// and a divergence error carrying the loss report is returned.
pub fn train_step(model: &IntroVac, state: &mut TrainState, config: &TrainConfig, batch: &Batch) -> Result<LossReport> {
    step_impl(model, state, config, batch, None)
}

pub fn train_step_traced(
    model: &IntroVac,
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Batch,
) -> Result<(LossReport, StepTrace)> {
    let mut trace = StepTrace::default();
    let report = step_impl(model, state, config, batch, Some(&mut trace))?;
    Ok((report, trace))
}

fn step_impl(
    model: &IntroVac,
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &Batch,
    mut trace: Option<&mut StepTrace>,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let w = &config.loss_weights;
    let lr = apply_lr_schedule(state.epoch, config);
    let b = batch.len();
    let d = model.config().latent_dim;
    let k = model.config().num_attributes;
    let mut rng = stream_rng(state.seed, Stream::Train, state.global_step);
    let z_g = normal_tensor(&mut rng, &[b, d], model.dtype(), model.device())?;
    let eps = normal_tensor(&mut rng, &[b, d], model.dtype(), model.device())?;
    if let Some(t) = trace.as_deref_mut() {
        t.before = snapshot(model)?;
    }

    let x = &batch.images;
    let y = &batch.labels;
    let (mean, log_var) = model.encode(x, Pass::TRAIN)?;
    let z_r = reparameterize_batch(&mean, &log_var, &eps)?;
    let logits = model.classify(&z_r, Pass::TRAIN)?;
    let x_r = model.decode(&z_r, Pass::TRAIN)?;
    let l_ae = reconstruction_loss(x, &x_r, config.reconstruction)?;
    let l_reg = kl_to_standard_normal_batch(&mean, &log_var)?;
    let class_logits = logits.narrow(1, 0, k)?;
    let mut l_cl = classification_loss(y, &class_logits)?;

    if config.mode == Mode::Vac {
        let total = vac_total(&l_ae, &l_cl, &l_reg, w)?;
        let report = LossReport {
            l_ae: scalar(&l_ae)?,
            l_cl: scalar(&l_cl)?,
            l_reg: scalar(&l_reg)?,
            l_ec_rec: None,
            l_ec_gen: None,
            l_g_rec: None,
            l_g_gen: None,
            total_phase1: scalar(&total)?,
            total_phase2: None,
        };
        if !report.is_finite() {
            return Err(divergence(state.global_step, &report));
        }
        let params = model.params_of(&Group::ALL);
        let grads = collect_gradients(&total.backward()?, &params)?;
        state.phase1.update(&params, &grads, lr, &config.adam)?;
        if let Some(t) = trace {
            t.after_phase1 = snapshot(model)?;
            t.after_phase2 = t.after_phase1.clone();
        }
        state.global_step += 1;
        return Ok(report);
    }

    let phase2 = state
        .phase2
        .as_mut()
        .ok_or_else(|| Error::invalid("introvac step without decoder optimizer state"))?;
    // real images should read as real to the fake logit
    let fake_real = softplus(&logits.narrow(1, k, 1)?)?.mean_all()?;
    l_cl = (l_cl + fake_real)?;
    let x_g = model.decode(&z_g, Pass::TRAIN.untracked())?;
    let x_rr = model.decode(&z_r.detach(), Pass::TRAIN.untracked())?;
    let l_ec_rec = encoder_adversarial_loss(model, &x_rr, Pass::TRAIN.untracked())?;
    let l_ec_gen = encoder_adversarial_loss(model, &x_g, Pass::TRAIN.untracked())?;
    let total1 = phase1_total(&l_ae, &l_cl, &l_reg, &l_ec_rec, &l_ec_gen, w)?;
    let mut report = LossReport {
        l_ae: scalar(&l_ae)?,
        l_cl: scalar(&l_cl)?,
        l_reg: scalar(&l_reg)?,
        l_ec_rec: Some(scalar(&l_ec_rec)?),
        l_ec_gen: Some(scalar(&l_ec_gen)?),
        l_g_rec: None,
        l_g_gen: None,
        total_phase1: scalar(&total1)?,
        total_phase2: None,
    };
    if !report.is_finite() {
        return Err(divergence(state.global_step, &report));
    }
    let grads1 = total1.backward()?;
    let enc_cls = model.params_of(phase1_groups(Mode::Introvac));
    let dec = model.params_of(&[Group::Decoder]);
    state
        .phase1
        .update(&enc_cls, &collect_gradients(&grads1, &enc_cls)?, lr, &config.adam)?;
    let dec_grad1 = collect_gradients(&grads1, &dec)?;
    drop(grads1);
    if let Some(t) = trace.as_deref_mut() {
        t.after_phase1 = snapshot(model)?;
    }

    let l_g_rec = decoder_reconstruction_adversarial_loss(model, &x_rr, y, Pass::TRAIN.untracked())?;
    let l_g_gen = decoder_generated_adversarial_loss(model, &x_g, Pass::TRAIN.untracked())?;
    let total2 = phase2_total(&l_g_rec, &l_g_gen, w)?;
    report.l_g_rec = Some(scalar(&l_g_rec)?);
    report.l_g_gen = Some(scalar(&l_g_gen)?);
    report.total_phase2 = Some(scalar(&total2)?);
    if !report.is_finite() {
        return Err(divergence(state.global_step, &report));
    }
    let dec_grad2 = collect_gradients(&total2.backward()?, &dec)?;
    let applied: Gradients = dec_grad1
        .iter()
        .map(|(n, g1)| Ok((n.clone(), g1.add(&dec_grad2[n])?)))
        .collect::<Result<_>>()?;
    phase2.update(&dec, &applied, lr, &config.adam)?;
    if let Some(t) = trace {
        t.after_phase2 = snapshot(model)?;
        t.decoder_grad_phase1 = dec_grad1;
        t.decoder_grad_phase2 = dec_grad2;
        t.decoder_grad_applied = applied;
    }
    state.global_step += 1;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Completed epochs, counting this one.
    pub epoch: u64,
    pub steps: u64,
    pub lr: f64,
    pub mean_total_phase1: f64,
    pub mean_l_ae: f64,
    pub mean_l_cl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_accuracy: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_fid_pixels: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Checkpoints go to `<dir>/checkpoints`, metrics to `<dir>/metrics.jsonl`.
    pub output_dir: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after_epoch: Option<u64>,
    /// Held-out set evaluated after every epoch. When absent, a
    /// `validation_fraction` share of the training data is held out instead.
    pub validation: Option<&'a Dataset>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(output_dir: &Path, epoch: u64) -> PathBuf {
    output_dir.join("checkpoints").join(format!("epoch_{epoch:04}.safetensors"))
}

pub fn postmortem_path(output_dir: &Path) -> PathBuf {
    output_dir.join("checkpoints").join("postmortem.safetensors")
}

/// Training / validation partition used by `fit`; deterministic in the seed.
pub fn validation_split(dataset: &Dataset, config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    if config.validation_fraction == 0.0 {
        return Ok((dataset.clone(), Dataset {
            attribute_names: dataset.attribute_names.clone(),
            ..Default::default()
        }));
    }
    let f = config.validation_fraction;
    let mut parts = dataset
        .split(&[1.0 - f, f], derive_seed(config.seed, Stream::Split, 1))?
        .into_iter();
    let train = parts.next().unwrap_or_default();
    let val = parts.next().unwrap_or_default();
    Ok((train, val))
}

fn append_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

/// Runs the remaining epochs of `state` over `dataset`.
pub fn fit(
    model: &IntroVac,
    dataset: &Dataset,
    config: &TrainConfig,
    mut state: TrainState,
    mut options: FitOptions,
) -> Result<FitResult> {
    config.validate()?;
    let (train, val) = match options.validation {
        Some(val) => (dataset.clone(), val.clone()),
        None => validation_split(dataset, config)?,
    };
    if train.is_empty() {
        return Err(Error::InsufficientData("no training items after the validation split".into()));
    }
    train.check_invariants(model.config().image_shape())?;
    let metrics_path = match &options.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            Some(dir.join("metrics.jsonl"))
        }
        None => None,
    };
    let embedder = PixelEmbedder::new(model.config().image_shape(), model.config().image_size.min(8))?;
    let mut result = FitResult {
        state: state.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
    };
    let last_epoch = options.stop_after_epoch.unwrap_or(config.epochs).min(config.epochs);
    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let lr = apply_lr_schedule(epoch, config);
        let order = train.epoch_order(state.seed, epoch);
        let mut records = Vec::new();
        let mut sums = (0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let batch = Batch::from_dataset(model, &train, idx)?;
            let step = state.global_step;
            let losses = match train_step(model, &mut state, config, &batch) {
                Ok(r) => r,
                Err(e @ Error::Divergence { .. }) => {
                    if let Some(dir) = &options.output_dir {
                        state.to_checkpoint(model, config)?.save(&postmortem_path(dir))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sums.0 += losses.total_phase1;
            sums.1 += losses.l_ae;
            sums.2 += losses.l_cl;
            records.push(StepRecord { epoch, step, lr, losses });
        }
        state.epoch += 1;
        let n = records.len() as f64;
        let mut rec = EpochRecord {
            epoch: state.epoch,
            steps: records.len() as u64,
            lr,
            mean_total_phase1: sums.0 / n,
            mean_l_ae: sums.1 / n,
            mean_l_cl: sums.2 / n,
            val_accuracy: None,
            val_l1: None,
            val_fid_pixels: None,
        };
        if val.len() >= 2 {
            let m = evaluate_reconstruction_fid(model, &val, &embedder)?;
            rec.val_accuracy = Some(m.accuracy_per_attribute);
            rec.val_l1 = Some(m.l1_error);
            rec.val_fid_pixels = Some(m.fid_reconstruction);
        }
        info!(
            "epoch {}/{}: loss {:.4}, l_ae {:.4}, l_cl {:.4}, val acc {:?}",
            rec.epoch, config.epochs, rec.mean_total_phase1, rec.mean_l_ae, rec.mean_l_cl, rec.val_accuracy
        );
        if let Some(path) = &metrics_path {
            let mut lines: Vec<MetricRecord> = records.iter().cloned().map(MetricRecord::Step).collect();
            lines.push(MetricRecord::Epoch(rec.clone()));
            append_metrics(path, &lines)?;
        }
        if let Some(dir) = &options.output_dir {
            let due = state.epoch % config.checkpoint_every == 0 || state.epoch == last_epoch;
            if due {
                let path = checkpoint_path(dir, state.epoch);
                state.to_checkpoint(model, config)?.save(&path)?;
                result.checkpoints.push(path);
            }
        }
        if let Some(cb) = options.on_epoch.as_deref_mut() {
            cb(&rec);
        }
        result.steps.extend(records);
        result.epochs.push(rec);
    }
    result.state = state;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{DecoderOutput, ModelConfig};
    use crate::tensor::to_f64_vec;
    use candle_core::DType;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            image_channels: 3,
            latent_dim: 4,
            channel_plan: vec![4],
            num_attributes: 2,
            attribute_names: vec![],
            normalization: Default::default(),
            decoder_output: DecoderOutput::Sigmoid,
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        let d = generate_synthetic(&SyntheticSpec {
            count: n,
            image_size: 16,
            num_attributes: 2,
            seed: 1,
            correlation: 0.0,
        })
        .unwrap();
        // 16 → 8 by taking every other pixel
        let mut out = d.clone();
        for img in out.images.iter_mut() {
            let mut small = crate::model::ImageTensor::filled(3, 8, 8, 0.0);
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        small.set(c, y, x, img.get(c, 2 * y, 2 * x));
                    }
                }
            }
            *img = small;
        }
        out
    }

    fn train_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            lr_decay_epochs: vec![],
            lr_decay_factor: 2.0,
            loss_weights: LossWeights::default(),
            seed: 5,
            checkpoint_every: 1,
            mode,
            reconstruction: ReconstructionKind::L1,
            validation_fraction: 0.0,
            adam: AdamConfig::default(),
        }
    }

    fn same(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>, names: impl Fn(&str) -> bool) -> bool {
        a.iter()
            .filter(|(n, _)| names(n))
            .all(|(n, t)| to_f64_vec(t).unwrap() == to_f64_vec(&b[n]).unwrap())
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::full_scale(Mode::Introvac);
        assert_eq!(apply_lr_schedule(0, &cfg), 0.0002);
        assert_eq!(apply_lr_schedule(59, &cfg), 0.0002);
        assert_eq!(apply_lr_schedule(60, &cfg), 0.0001);
        assert_eq!(apply_lr_schedule(125, &cfg), 0.000025);
        cfg.validate().unwrap();
        let vac = TrainConfig::full_scale(Mode::Vac);
        assert_eq!(vac.epochs, 600);
        assert_eq!(apply_lr_schedule(599, &vac), 0.0002);
    }

    #[test]
    fn config_validation() {
        let mut c = train_config(Mode::Vac);
        c.lr_decay_epochs = vec![1, 1];
        assert!(c.validate().is_err());
        c.lr_decay_epochs = vec![2];
        assert!(c.validate().is_err());
        c.lr_decay_epochs = vec![1];
        c.validate().unwrap();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert_eq!("vac".parse::<Mode>().unwrap(), Mode::Vac);
        assert!("gan".parse::<Mode>().is_err());
    }

    #[test]
    fn adam_matches_hand_computation() {
        let var = Var::from_slice(&[1.0f64, -2.0], 2, &candle_core::Device::Cpu).unwrap();
        let params = vec![("p".to_string(), var.clone())];
        let mut adam = Adam::new(&params).unwrap();
        let cfg = AdamConfig::default();
        let g = Tensor::from_slice(&[0.5f64, -0.25], 2, &candle_core::Device::Cpu).unwrap();
        let grads: Gradients = [("p".to_string(), g)].into();
        adam.update(&params, &grads, 0.1, &cfg).unwrap();
        // first step: m̂ = g, v̂ = g², update = lr · g / (|g| + eps)
        let got = to_f64_vec(var.as_tensor()).unwrap();
        let expect = [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.25 / (0.25 + 1e-8)];
        for (a, b) in got.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        adam.update(&params, &grads, 0.1, &cfg).unwrap();
        // second step with the same gradient moves by the same amount
        let got2 = to_f64_vec(var.as_tensor()).unwrap();
        assert!((got2[0] - (expect[0] - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let model = IntroVac::new(tiny_config(), 3, DType::F32).unwrap();
        let data = tiny_data(8);
        for mode in [Mode::Vac, Mode::Introvac] {
            let mut cfg = train_config(mode);
            cfg.loss_weights = LossWeights::zero();
            let mut state = TrainState::new(&model, &cfg).unwrap();
            let batch = Batch::from_dataset(&model, &data, &[0, 1, 2, 3]).unwrap();
            let (_, t) = train_step_traced(&model, &mut state, &cfg, &batch).unwrap();
            assert!(same(&t.before, &t.after_phase2, |_| true), "{mode}");
            assert_eq!(state.global_step, 1);
        }
    }

    #[test]
    fn phases_touch_only_their_groups_and_accumulate() {
        let model = IntroVac::new(tiny_config(), 4, DType::F32).unwrap();
        let data = tiny_data(8);
        let cfg = train_config(Mode::Introvac);
        let mut state = TrainState::new(&model, &cfg).unwrap();
        let batch = Batch::from_dataset(&model, &data, &[0, 1, 2, 3]).unwrap();
        let (report, t) = train_step_traced(&model, &mut state, &cfg, &batch).unwrap();
        assert!(report.total_phase2.is_some() && report.l_ec_rec.is_some());
        let dec = |n: &str| n.starts_with("decoder.");
        let not_dec = |n: &str| !n.starts_with("decoder.");
        assert!(same(&t.before, &t.after_phase1, dec));
        assert!(!same(&t.before, &t.after_phase1, not_dec));
        assert!(same(&t.after_phase1, &t.after_phase2, not_dec));
        assert!(!same(&t.after_phase1, &t.after_phase2, dec));
        for (n, g) in &t.decoder_grad_applied {
            let sum = to_f64_vec(&t.decoder_grad_phase1[n].add(&t.decoder_grad_phase2[n]).unwrap()).unwrap();
            assert_eq!(to_f64_vec(g).unwrap(), sum);
        }
        assert_eq!(state.phase1.step, 1);
        assert_eq!(state.phase2.as_ref().unwrap().step, 1);
    }

    #[test]
    fn step_is_deterministic_from_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let model = IntroVac::new(tiny_config(), 6, DType::F32).unwrap();
        let data = tiny_data(8);
        let cfg = train_config(Mode::Introvac);
        let mut state = TrainState::new(&model, &cfg).unwrap();
        let batch = Batch::from_dataset(&model, &data, &[4, 5, 6, 7]).unwrap();
        train_step(&model, &mut state, &cfg, &batch).unwrap();
        let path = dir.path().join("c.safetensors");
        state.to_checkpoint(&model, &cfg).unwrap().save(&path).unwrap();

        let run = || {
            let ckpt = Checkpoint::load(&path).unwrap();
            let (m, mut s, c) = TrainState::from_checkpoint(&ckpt).unwrap();
            let r = train_step(&m, &mut s, &c, &batch).unwrap();
            (r, s.global_step, to_f64_vec(&m.named_tensors()["decoder.input.weight"]).unwrap())
        };
        let (r1, s1, w1) = run();
        let (r2, s2, w2) = run();
        assert_eq!(r1, r2);
        assert_eq!(s1, 2);
        assert_eq!(s1, s2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn checkpoint_mode_contract() {
        let model = IntroVac::new(tiny_config(), 1, DType::F32).unwrap();
        for (mode, has_phase2) in [(Mode::Vac, false), (Mode::Introvac, true)] {
            let cfg = train_config(mode);
            let state = TrainState::new(&model, &cfg).unwrap();
            let ckpt = state.to_checkpoint(&model, &cfg).unwrap();
            assert_eq!(ckpt.tensors.keys().any(|k| k.starts_with(PHASE2_PREFIX)), has_phase2);
            let (_, back, c) = TrainState::from_checkpoint(&ckpt).unwrap();
            assert_eq!(back.phase2.is_some(), has_phase2);
            assert_eq!(c, cfg);
        }
    }

    #[test]
    fn fit_step_count_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let model = IntroVac::new(tiny_config(), 2, DType::F32).unwrap();
        let data = tiny_data(10);
        let mut cfg = train_config(Mode::Vac);
        cfg.epochs = 1;
        let state = TrainState::new(&model, &cfg).unwrap();
        let res = fit(
            &model,
            &data,
            &cfg,
            state,
            FitOptions {
                output_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(res.steps.len(), 3);
        assert_eq!(res.state.global_step, 3);
        assert_eq!(res.checkpoints, vec![checkpoint_path(dir.path(), 1)]);
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let records: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 4);
        assert!(!text.contains("l_g_rec"));
        assert!(matches!(records[3], MetricRecord::Epoch(_)));
    }

    #[test]
    fn divergence_writes_postmortem() {
        let dir = tempfile::tempdir().unwrap();
        let model = IntroVac::new(tiny_config(), 2, DType::F32).unwrap();
        let (_, w) = model
            .params_of(&[Group::Encoder])
            .into_iter()
            .find(|(n, _)| n == "encoder.out.weight")
            .unwrap();
        crate::tensor::set_element(&w, 0, f64::NAN).unwrap();
        let cfg = train_config(Mode::Introvac);
        let state = TrainState::new(&model, &cfg).unwrap();
        let err = fit(
            &model,
            &tiny_data(8),
            &cfg,
            state,
            FitOptions {
                output_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }));
        assert!(postmortem_path(dir.path()).exists());
    }
}
