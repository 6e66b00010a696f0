//! Diagonal Gaussian machinery for the posterior q(z|x) and the N(0, I) prior.
//!
//! Scalar (`Vec<f64>`) versions serve the latent-space procedures and tests;
//! the `*_batch` versions operate on `[batch, d]` tensors inside the training
//! graph and stay differentiable.

use candle_core::{DType, Tensor, D};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Log-variance entries are clamped to this range on construction and inside
/// the encoder.
pub const LOG_VAR_CLAMP: f64 = 30.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Posterior parameters of one sample: mean and log of the diagonal variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        if mean.len() != log_var.len() {
            return Err(Error::invalid(format!(
                "mean has dimension {} but log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite posterior parameter"));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    /// Log-density of this Gaussian at `z`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::invalid("dimension mismatch in log_density"));
        }
        let mut acc = -0.5 * self.dim() as f64 * LN_2PI;
        for ((zi, m), lv) in z.iter().zip(&self.mean).zip(&self.log_var) {
            let diff = zi - m;
            acc -= 0.5 * (lv + diff * diff * (-lv).exp());
        }
        Ok(acc)
    }
}

/// A point in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite latent code"));
        }
        Ok(Self(z))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// KL(q || N(0, I)) = ½ Σ (μ² + σ² − log σ² − 1).
pub fn kl_to_standard_normal(q: &GaussianLatent) -> f64 {
    let kl: f64 = q
        .mean
        .iter()
        .zip(&q.log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum();
    // exp(lv) - lv - 1 >= 0 analytically; rounding can dip below by an ulp
    (0.5 * kl).max(0.0)
}

/// z = μ + exp(½ log σ²) ⊙ ε.
pub fn reparameterize(q: &GaussianLatent, noise: &[f64]) -> Result<LatentCode> {
    if noise.len() != q.dim() {
        return Err(Error::invalid(format!(
            "noise has dimension {} but posterior has {}",
            noise.len(),
            q.dim()
        )));
    }
    let z = q
        .mean
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    LatentCode::new(z)
}

/// `count` i.i.d. draws from N(0, I_d), determined entirely by `seed`.
pub fn sample_prior(dim: usize, count: usize, seed: u64) -> Result<Vec<LatentCode>> {
    if dim == 0 || count == 0 {
        return Err(Error::invalid("sample_prior needs dim >= 1 and count >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::Prior, 0);
    Ok((0..count)
        .map(|_| LatentCode((0..dim).map(|_| rng.sample(StandardNormal)).collect()))
        .collect())
}

/// log N(z; 0, I) = −½‖z‖² − (d/2) log 2π.
pub fn standard_normal_log_density(z: &LatentCode) -> Result<f64> {
    if z.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite latent code"));
    }
    let sq: f64 = z.0.iter().map(|v| v * v).sum();
    Ok(-0.5 * sq - 0.5 * z.dim() as f64 * LN_2PI)
}

/// ∇_z log N(z; 0, I) = −z.
pub fn standard_normal_log_density_grad(z: &LatentCode) -> Vec<f64> {
    z.0.iter().map(|v| -v).collect()
}

/// Batch KL against the prior, averaged over the leading (batch) axis.
pub fn kl_to_standard_normal_batch(mean: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let per_dim = ((mean.sqr()? + log_var.exp()?)? - log_var)?.affine(1.0, -1.0)?;
    let per_sample = (per_dim.sum(D::Minus1)? * 0.5)?;
    Ok(per_sample.mean_all()?)
}

/// Batch reparameterization; differentiable in `mean` and `log_var`.
pub fn reparameterize_batch(mean: &Tensor, log_var: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if mean.dims() != noise.dims() || log_var.dims() != noise.dims() {
        return Err(Error::invalid(format!(
            "reparameterize shape mismatch: mean {:?}, log_var {:?}, noise {:?}",
            mean.dims(),
            log_var.dims(),
            noise.dims()
        )));
    }
    let std = (log_var * 0.5)?.exp()?;
    Ok((mean + std.mul(noise)?)?)
}

/// Standard-normal noise tensor of the given shape drawn from `rng`.
pub fn normal_tensor<R: Rng>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

/// Nodes and weights of the `order`-point Gauss–Hermite rule for the
/// standard normal weight (weights sum to one), by Golub–Welsch.
pub fn gauss_hermite_normal(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::invalid("quadrature order must be positive"));
    }
    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for i in 1..order {
        let b = (i as f64).sqrt();
        jacobi[(i - 1, i)] = b;
        jacobi[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.into_iter().map(|(x, w)| (x, w / total)).unzip())
}

/// E_q[f(z)] by a tensor-product Gauss–Hermite rule.
pub fn expect_under<F>(q: &GaussianLatent, order: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let d = q.dim();
    let points = (order as f64).powi(d as i32);
    if points > 1e7 {
        return Err(Error::invalid(format!(
            "quadrature grid of {points} points is too large"
        )));
    }
    let (nodes, weights) = gauss_hermite_normal(order)?;
    let std = q.std_dev();
    let mut idx = vec![0usize; d];
    let mut z = vec![0.0; d];
    let mut acc = 0.0;
    loop {
        let mut w = 1.0;
        for k in 0..d {
            z[k] = q.mean[k] + std[k] * nodes[idx[k]];
            w *= weights[idx[k]];
        }
        acc += w * f(&z);
        let mut k = 0;
        loop {
            if k == d {
                return Ok(acc);
            }
            idx[k] += 1;
            if idx[k] < order {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
