//! Scalar objectives: the ELBO terms and the introspective adversarial losses.
//!
//! Everything that is a −log σ(·) or a binary cross-entropy is evaluated in
//! logit space through `softplus`, never by composing sigmoid and log.
//!
//! Stop-gradient rules:
//! - the encoder/classifier losses `l_ec` see decoder outputs through
//!   `detach`, so they never reach decoder parameters;
//! - the decoder losses `l_g` evaluate the encoder and classifier with
//!   frozen (detached) parameters: gradients flow through their activations
//!   into the decoder output and nowhere else.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::distributions::{expect_under, kl_to_standard_normal, GaussianLatent};
use crate::error::{Error, Result};
use crate::model::{IntroVac, Pass};
use crate::tensor::to_f64_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionKind {
    /// Mean absolute error (Laplace likelihood).
    #[default]
    L1,
    /// Mean squared error (fixed-variance Gaussian likelihood).
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta_ae: f64,
    pub beta_cl: f64,
    pub beta_reg: f64,
    pub beta_g: f64,
    pub beta_ec: f64,
}

impl Default for LossWeights {
    /// β_AE = 100, β_CL = 10, β_reg = 3, β_G = 5, β_EC = 0.01.
    fn default() -> Self {
        Self {
            beta_ae: 100.0,
            beta_cl: 10.0,
            beta_reg: 3.0,
            beta_g: 5.0,
            beta_ec: 0.01,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            beta_ae: 0.0,
            beta_cl: 0.0,
            beta_reg: 0.0,
            beta_g: 0.0,
            beta_ec: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_ae", self.beta_ae),
            ("beta_cl", self.beta_cl),
            ("beta_reg", self.beta_reg),
            ("beta_g", self.beta_g),
            ("beta_ec", self.beta_ec),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Something a weighted loss sum can be formed over: plain numbers for
/// reporting, tensors for differentiation.
pub trait LossValue: Sized {
    fn scaled(&self, factor: f64) -> Result<Self>;
    fn plus(&self, other: &Self) -> Result<Self>;
}

impl LossValue for f64 {
    fn scaled(&self, factor: f64) -> Result<Self> {
        Ok(self * factor)
    }
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self + other)
    }
}

impl LossValue for Tensor {
    fn scaled(&self, factor: f64) -> Result<Self> {
        Ok(self.affine(factor, 0.0)?)
    }
    fn plus(&self, other: &Self) -> Result<Self> {
        Ok(self.add(other)?)
    }
}

/// β_AE L_AE + β_CL L_CL + β_reg L_reg + β_EC (L^r_EC + L^g_EC).
pub fn phase1_total<T: LossValue>(
    l_ae: &T,
    l_cl: &T,
    l_reg: &T,
    l_ec_rec: &T,
    l_ec_gen: &T,
    w: &LossWeights,
) -> Result<T> {
    let ec = l_ec_rec.plus(l_ec_gen)?.scaled(w.beta_ec)?;
    vac_total(l_ae, l_cl, l_reg, w)?.plus(&ec)
}

/// β_G (L^r_G + L^g_G).
pub fn phase2_total<T: LossValue>(l_g_rec: &T, l_g_gen: &T, w: &LossWeights) -> Result<T> {
    l_g_rec.plus(l_g_gen)?.scaled(w.beta_g)
}

/// β_AE L_AE + β_CL L_CL + β_reg L_reg: the plain variational classifier.
pub fn vac_total<T: LossValue>(l_ae: &T, l_cl: &T, l_reg: &T, w: &LossWeights) -> Result<T> {
    l_ae.scaled(w.beta_ae)?
        .plus(&l_cl.scaled(w.beta_cl)?)?
        .plus(&l_reg.scaled(w.beta_reg)?)
}

/// Per-step diagnostics. Adversarial fields are absent for the plain
/// variational classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ae: f64,
    pub l_cl: f64,
    pub l_reg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ec_rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_ec_gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_g_rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_g_gen: Option<f64>,
    pub total_phase1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total_phase2: Option<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_ae, self.l_cl, self.l_reg, self.total_phase1]
            .into_iter()
            .chain(self.l_ec_rec)
            .chain(self.l_ec_gen)
            .chain(self.l_g_rec)
            .chain(self.l_g_gen)
            .chain(self.total_phase2)
            .all(f64::is_finite)
    }
}

/// log(1 + eˣ), stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// −log σ(x) = softplus(−x).
pub fn neg_log_sigmoid(x: &Tensor) -> Result<Tensor> {
    softplus(&x.neg()?)
}

/// −log(1 − σ(x)) = softplus(x).
pub fn neg_log_one_minus_sigmoid(x: &Tensor) -> Result<Tensor> {
    softplus(x)
}

/// Scalar softplus for the plain-array code paths.
pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean pixel error over all pixels and the batch.
pub fn reconstruction_loss(x: &Tensor, x_r: &Tensor, kind: ReconstructionKind) -> Result<Tensor> {
    if x.dims() != x_r.dims() {
        return Err(Error::invalid(format!(
            "reconstruction shape mismatch: {:?} vs {:?}",
            x.dims(),
            x_r.dims()
        )));
    }
    let diff = (x - x_r)?;
    let per_pixel = match kind {
        ReconstructionKind::L1 => diff.abs()?,
        ReconstructionKind::Mse => diff.sqr()?,
    };
    Ok(per_pixel.mean_all()?)
}

fn check_labels(y: &Tensor) -> Result<()> {
    if to_f64_vec(y)?.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Binary cross-entropy with logits, summed over the `k` label columns and
/// averaged over the batch. `y` and `logits` are `[B, k]`.
pub fn classification_loss(y: &Tensor, logits: &Tensor) -> Result<Tensor> {
    if y.dims() != logits.dims() {
        return Err(Error::invalid(format!(
            "label shape {:?} does not match logits {:?}",
            y.dims(),
            logits.dims()
        )));
    }
    check_labels(y)?;
    let y = y.to_dtype(logits.dtype())?;
    // softplus(ℓ) − yℓ = −y log σ(ℓ) − (1 − y) log(1 − σ(ℓ))
    let per = (softplus(logits)? - y.mul(logits)?)?;
    Ok(per.sum(D::Minus1)?.mean_all()?)
}

/// Plain-array BCE for one sample: Σ_i softplus(ℓ_i) − y_i ℓ_i.
pub fn classification_loss_f64(y: &[u8], logits: &[f64]) -> Result<f64> {
    if y.len() != logits.len() {
        return Err(Error::invalid("label/logit length mismatch"));
    }
    if y.iter().any(|v| *v > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(y.iter()
        .zip(logits)
        .map(|(&yi, &l)| softplus_f64(l) - yi as f64 * l)
        .sum())
}

fn attribute_columns(logits: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    Ok((logits.narrow(D::Minus1, 0, k)?, logits.narrow(D::Minus1, k, 1)?))
}

/// Logits of the posterior mean of `x`.
fn logits_of(model: &IntroVac, x: &Tensor, pass: Pass) -> Result<Tensor> {
    let (mean, _) = model.encode(x, pass)?;
    model.classify(&mean, pass)
}

/// L_EC on a decoder output: −log σ(fake(E(dt(x)))), batch mean.
pub fn encoder_adversarial_loss(model: &IntroVac, x_fake: &Tensor, pass: Pass) -> Result<Tensor> {
    let k = model.config().num_attributes;
    let logits = logits_of(model, &x_fake.detach(), pass)?;
    let (_, fake) = attribute_columns(&logits, k)?;
    Ok(neg_log_sigmoid(&fake)?.mean_all()?)
}

/// L^r_G: BCE(y, class(E(x_rr))) − log(1 − σ(fake(E(x_rr)))), with the
/// encoder and classifier frozen.
pub fn decoder_reconstruction_adversarial_loss(
    model: &IntroVac,
    x_rr: &Tensor,
    y: &Tensor,
    pass: Pass,
) -> Result<Tensor> {
    let k = model.config().num_attributes;
    let logits = logits_of(model, x_rr, pass.frozen())?;
    let (class, fake) = attribute_columns(&logits, k)?;
    let class_term = classification_loss(y, &class)?;
    let fake_term = neg_log_one_minus_sigmoid(&fake)?.mean_all()?;
    Ok((class_term + fake_term)?)
}

/// L^g_G: −log(1 − σ(fake(E(x_g)))), with the encoder and classifier frozen.
pub fn decoder_generated_adversarial_loss(model: &IntroVac, x_g: &Tensor, pass: Pass) -> Result<Tensor> {
    let k = model.config().num_attributes;
    let logits = logits_of(model, x_g, pass.frozen())?;
    let (_, fake) = attribute_columns(&logits, k)?;
    Ok(neg_log_one_minus_sigmoid(&fake)?.mean_all()?)
}

/// Both adversarial losses of a reconstructed batch `x_rr = G(dt(z_r))`.
#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    pub l_ec: Tensor,
    pub l_g: Tensor,
}

pub fn adversarial_losses_reconstruction(
    model: &IntroVac,
    x_rr: &Tensor,
    y: &Tensor,
    pass: Pass,
) -> Result<AdversarialLosses> {
    Ok(AdversarialLosses {
        l_ec: encoder_adversarial_loss(model, x_rr, pass.untracked())?,
        l_g: decoder_reconstruction_adversarial_loss(model, x_rr, y, pass)?,
    })
}

pub fn adversarial_losses_generated(model: &IntroVac, x_g: &Tensor, pass: Pass) -> Result<AdversarialLosses> {
    Ok(AdversarialLosses {
        l_ec: encoder_adversarial_loss(model, x_g, pass.untracked())?,
        l_g: decoder_generated_adversarial_loss(model, x_g, pass)?,
    })
}

/// Variational-classifier ELBO of one observation under a Gaussian posterior:
///
/// E_q[log p(x|z)] + E_q[log p(y|z)] − KL(q ‖ N(0, I)),
///
/// with the expectations taken by Gauss–Hermite quadrature of the given order
/// and log p(y|z) the negative binary cross-entropy of the attribute logits
/// `attribute_logits(z)`.
pub fn vac_elbo<Fx, Fy>(
    q: &GaussianLatent,
    log_px_given_z: Fx,
    labels: &[u8],
    attribute_logits: Fy,
    order: usize,
) -> Result<f64>
where
    Fx: Fn(&[f64]) -> f64,
    Fy: Fn(&[f64]) -> Vec<f64>,
{
    let mut label_err = None;
    let expected = expect_under(q, order, |z| {
        let log_py = match classification_loss_f64(labels, &attribute_logits(z)) {
            Ok(bce) => -bce,
            Err(e) => {
                label_err.get_or_insert(e);
                0.0
            }
        };
        log_px_given_z(z) + log_py
    })?;
    if let Some(e) = label_err {
        return Err(e);
    }
    Ok(expected - kl_to_standard_normal(q))
}
