//! Latent-space procedures on a trained model: attribute manipulation along
//! classifier normals, prior sampling and conditional Langevin sampling.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_prior, LatentCode};
use crate::error::{Error, Result};
use crate::eval::EVAL_CHUNK;
use crate::losses::softplus_f64;
use crate::model::{ClassifierHead, ImageTensor, IntroVac};
use crate::rng::{stream_rng, Stream};

/// Step size for one edited attribute of a single-attribute model.
pub const DELTA_SINGLE: f64 = 3.0;
/// Step size for one edited attribute of a multi-attribute model.
pub const DELTA_ONE_OF_MANY: f64 = 4.0;
/// Step size when several attributes are edited together.
pub const DELTA_COMBINED: f64 = 5.0;

/// Default magnitude of δ for editing `edited` of the model's `num_attributes`.
pub fn default_delta(num_attributes: usize, edited: usize) -> f64 {
    match (num_attributes, edited) {
        (1, _) => DELTA_SINGLE,
        (_, 0 | 1) => DELTA_ONE_OF_MANY,
        _ => DELTA_COMBINED,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManipulationRequest {
    /// `(attribute index, signed δ)`; + adds the attribute, − removes it.
    pub attribute_deltas: Vec<(usize, f64)>,
    pub source: ImageTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manipulation {
    /// Posterior mean of the source.
    pub z: LatentCode,
    pub z_aug: LatentCode,
    pub reconstruction: ImageTensor,
    pub x_aug: ImageTensor,
    pub logits_before: Vec<f64>,
    pub logits_after: Vec<f64>,
}

/// `z + Σ_j δ_j · w_j / ‖w_j‖`.
pub fn shift_latent(head: &ClassifierHead, z: &LatentCode, deltas: &[(usize, f64)]) -> Result<LatentCode> {
    if z.dim() != head.latent_dim() {
        return Err(Error::invalid(format!(
            "latent has dimension {}, head expects {}",
            z.dim(),
            head.latent_dim()
        )));
    }
    let mut out = z.0.clone();
    for &(attribute, delta) in deltas {
        if !delta.is_finite() {
            return Err(Error::invalid(format!("δ for attribute {attribute} is not finite")));
        }
        let dir = head.attribute_direction(attribute)?;
        for (o, w) in out.iter_mut().zip(dir) {
            *o += delta * w;
        }
    }
    LatentCode::new(out)
}

pub fn manipulate(model: &IntroVac, request: &ManipulationRequest) -> Result<Manipulation> {
    let head = model.head()?;
    let q = model.encode_image(&request.source)?;
    let z = LatentCode(q.mean().to_vec());
    let z_aug = shift_latent(&head, &z, &request.attribute_deltas)?;
    let mut images = model.decode_latents(&[z.clone(), z_aug.clone()])?;
    let x_aug = images.pop().expect("two decoded images");
    let reconstruction = images.pop().expect("two decoded images");
    Ok(Manipulation {
        logits_before: head.attribute_logits(&z)?,
        logits_after: head.attribute_logits(&z_aug)?,
        z,
        z_aug,
        reconstruction,
        x_aug,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoDeltaConfig {
    pub start: f64,
    pub growth: f64,
    pub max_iterations: usize,
    /// Required probability of the target label for the re-encoded edit.
    pub confidence: f64,
}

impl Default for AutoDeltaConfig {
    fn default() -> Self {
        Self {
            start: 0.5,
            growth: 1.5,
            max_iterations: 20,
            confidence: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoManipulation {
    pub manipulation: Manipulation,
    /// Signed δ of the last attempt.
    pub delta: f64,
    pub iterations: usize,
    /// Whether the re-encoded edit reached the confidence threshold.
    pub reached: bool,
}

/// Probability of the target label for the re-encoded image.
fn reencoded_target_probability(model: &IntroVac, head: &ClassifierHead, image: &ImageTensor, attribute: usize, target: u8) -> Result<f64> {
    let q = model.encode_image(image)?;
    let logit = head.attribute_logits(&LatentCode(q.mean().to_vec()))?[attribute];
    let p_one = 1.0 / (1.0 + (-logit).exp());
    Ok(if target == 1 { p_one } else { 1.0 - p_one })
}

/// Grows |δ| geometrically until the decoded edit, encoded again, is
/// assigned `target` with the configured confidence.
pub fn manipulate_auto(
    model: &IntroVac,
    source: &ImageTensor,
    attribute: usize,
    target: u8,
    cfg: &AutoDeltaConfig,
) -> Result<AutoManipulation> {
    if target > 1 {
        return Err(Error::invalid("target label must be 0 or 1"));
    }
    if !(cfg.start > 0.0 && cfg.growth > 1.0 && cfg.max_iterations > 0 && (0.5..1.0).contains(&cfg.confidence)) {
        return Err(Error::invalid("auto δ needs start > 0, growth > 1, iterations > 0, confidence in [0.5, 1)"));
    }
    let head = model.head()?;
    head.attribute_direction(attribute)?;
    let sign = if target == 1 { 1.0 } else { -1.0 };
    let mut magnitude = cfg.start;
    let mut last = None;
    for i in 1..=cfg.max_iterations {
        let delta = sign * magnitude;
        let m = manipulate(
            model,
            &ManipulationRequest {
                attribute_deltas: vec![(attribute, delta)],
                source: source.clone(),
            },
        )?;
        let p = reencoded_target_probability(model, &head, &m.x_aug, attribute, target)?;
        let reached = p >= cfg.confidence;
        last = Some(AutoManipulation {
            manipulation: m,
            delta,
            iterations: i,
            reached,
        });
        if reached {
            break;
        }
        magnitude *= cfg.growth;
    }
    Ok(last.expect("at least one iteration"))
}

/// Decodes `count` prior draws; deterministic in `seed`.
pub fn generate_from_prior(model: &IntroVac, count: usize, seed: u64) -> Result<Vec<(LatentCode, ImageTensor)>> {
    let codes = sample_prior(model.config().latent_dim, count, seed)?;
    let mut out = Vec::with_capacity(count);
    for chunk in codes.chunks(EVAL_CHUNK) {
        let images = model.decode_latents(chunk)?;
        out.extend(chunk.iter().cloned().zip(images));
    }
    Ok(out)
}

/// A differentiable potential `U` on latent space.
pub trait Energy {
    fn dim(&self) -> usize;
    fn energy(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &[f64]) -> Vec<f64>;
}

/// `U(z) = ½‖z‖² + Σ_j BCE(y_j, w_j·z + b_j)`, the negative log of prior
/// times classifier likelihood (up to a constant).
#[derive(Debug, Clone)]
pub struct ClassifierPosteriorEnergy {
    pub head: ClassifierHead,
    pub target: Vec<u8>,
}

impl ClassifierPosteriorEnergy {
    pub fn new(head: ClassifierHead, target: Vec<u8>) -> Result<Self> {
        if target.len() != head.num_attributes() {
            return Err(Error::invalid(format!(
                "{} target labels for a head with {} attributes",
                target.len(),
                head.num_attributes()
            )));
        }
        if target.iter().any(|&t| t > 1) {
            return Err(Error::invalid("target labels must be 0 or 1"));
        }
        Ok(Self { head, target })
    }

    /// Whether every attribute logit sits strictly on the target side.
    pub fn accepts(&self, z: &[f64]) -> bool {
        self.target.iter().enumerate().all(|(j, &y)| {
            let l = self.head.logit(j, z);
            if y == 1 {
                l > 0.0
            } else {
                l < 0.0
            }
        })
    }
}

impl Energy for ClassifierPosteriorEnergy {
    fn dim(&self) -> usize {
        self.head.latent_dim()
    }

    fn energy(&self, z: &[f64]) -> f64 {
        let prior: f64 = 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        let likelihood: f64 = self
            .target
            .iter()
            .enumerate()
            .map(|(j, &y)| {
                let l = self.head.logit(j, z);
                softplus_f64(l) - y as f64 * l
            })
            .sum();
        prior + likelihood
    }

    /// `z − Σ_j (y_j − σ(w_j·z + b_j)) w_j`.
    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = z.to_vec();
        for (j, &y) in self.target.iter().enumerate() {
            let s = 1.0 / (1.0 + (-self.head.logit(j, z)).exp());
            let coef = y as f64 - s;
            for (gi, wi) in g.iter_mut().zip(&self.head.weights()[j]) {
                *gi -= coef * wi;
            }
        }
        g
    }
}

/// `U(z) = ½‖z − μ‖²`; its Gibbs distribution is `N(μ, I)`.
#[derive(Debug, Clone)]
pub struct QuadraticEnergy {
    pub mean: Vec<f64>,
}

impl Energy for QuadraticEnergy {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy(&self, z: &[f64]) -> f64 {
        0.5 * z.iter().zip(&self.mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>()
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).map(|(a, m)| a - m).collect()
    }
}

/// `z − α ∇U(z) + √(2α) ε`.
pub fn langevin_step(energy: &dyn Energy, z: &[f64], noise: &[f64], alpha: f64) -> Vec<f64> {
    let g = energy.gradient(z);
    let scale = (2.0 * alpha).sqrt();
    z.iter()
        .zip(g)
        .zip(noise)
        .map(|((zi, gi), ei)| zi - alpha * gi + scale * ei)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    #[serde(default = "default_alpha")]
    pub step_size: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub num_chains: usize,
    pub target_labels: Vec<u8>,
    #[serde(default = "default_true")]
    pub reject_misclassified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.0002
}
fn default_steps() -> usize {
    5000
}
fn default_true() -> bool {
    true
}

impl LangevinConfig {
    pub fn new(target_labels: Vec<u8>, num_chains: usize, seed: u64) -> Self {
        Self {
            step_size: default_alpha(),
            steps: default_steps(),
            num_chains,
            target_labels,
            reject_misclassified: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.steps == 0 || self.num_chains == 0 {
            return Err(Error::invalid("steps and num_chains must be positive"));
        }
        Ok(())
    }
}

/// Final state of one chain started from a prior draw; `None` if the chain
/// left the finite reals. Depends only on `(seed, chain)`.
pub fn run_chain(energy: &dyn Energy, alpha: f64, steps: usize, seed: u64, chain: u64) -> Option<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::Langevin, chain);
    let d = energy.dim();
    let mut z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut noise = vec![0.0; d];
    for _ in 0..steps {
        for e in noise.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        z = langevin_step(energy, &z, &noise, alpha);
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    Some(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinOutcome {
    /// Retained chain end points with their decoded images.
    pub samples: Vec<(LatentCode, ImageTensor)>,
    pub num_chains: usize,
    pub rejected: usize,
    pub discarded_nonfinite: usize,
}

impl LangevinOutcome {
    pub fn accepted(&self) -> usize {
        self.samples.len()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.samples.len() as f64 / self.num_chains as f64
    }
}

/// Samples `p(z | y) ∝ p(y | z) p(z)` by unadjusted Langevin dynamics.
/// An empty `samples` list is a valid outcome.
pub fn langevin_sample(model: &IntroVac, config: &LangevinConfig) -> Result<LangevinOutcome> {
    config.validate()?;
    let energy = ClassifierPosteriorEnergy::new(model.head()?, config.target_labels.clone())?;
    let mut kept = Vec::new();
    let mut rejected = 0;
    let mut discarded = 0;
    for chain in 0..config.num_chains {
        match run_chain(&energy, config.step_size, config.steps, config.seed, chain as u64) {
            None => discarded += 1,
            Some(z) if config.reject_misclassified && !energy.accepts(&z) => rejected += 1,
            Some(z) => kept.push(LatentCode(z)),
        }
    }
    if discarded > 0 {
        warn!("{discarded} Langevin chains diverged and were discarded");
    }
    let mut samples = Vec::with_capacity(kept.len());
    for chunk in kept.chunks(EVAL_CHUNK) {
        let images = model.decode_latents(chunk)?;
        samples.extend(chunk.iter().cloned().zip(images));
    }
    Ok(LangevinOutcome {
        samples,
        num_chains: config.num_chains,
        rejected,
        discarded_nonfinite: discarded,
    })
}
