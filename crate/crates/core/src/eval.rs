//! Fréchet distance between feature distributions, pluggable embedders,
//! classifier accuracy and reconstruction reports.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::LatentCode;
use crate::error::{Error, Result};
use crate::model::{ImageTensor, IntroVac};

/// Images are pushed through the network in chunks of this size.
pub const EVAL_CHUNK: usize = 64;

/// Gaussian summary of a feature cloud. Covariance uses the unbiased
/// `count − 1` normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stats of an exact Gaussian, for tests and analytic comparisons.
    pub fn from_moments(mean: Vec<f64>, covariance: DMatrix<f64>, count: usize) -> Result<Self> {
        let m = mean.len();
        if covariance.shape() != (m, m) {
            return Err(Error::invalid("covariance shape does not match mean"));
        }
        if count < 2 {
            return Err(Error::InsufficientData("feature stats need count >= 2".into()));
        }
        if (&covariance - covariance.transpose()).amax() > 1e-8 {
            return Err(Error::invalid("covariance is not symmetric"));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            count,
        })
    }
}

/// Single-pass mean / covariance (Welford's update).
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "feature of length {} pushed into {}-dimensional stats",
                x.len(),
                self.mean.len()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta = DVector::from_column_slice(x) - &self.mean;
        self.mean += &delta / n;
        self.scatter.ger((n - 1.0) / n, &delta, &delta, 1.0);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<FeatureStats> {
        if self.count < 2 {
            return Err(Error::InsufficientData(format!(
                "feature stats need at least 2 items, got {}",
                self.count
            )));
        }
        // the rank-one updates are symmetric only up to rounding
        let scatter = (&self.scatter + self.scatter.transpose()) * 0.5;
        Ok(FeatureStats {
            covariance: scatter / (self.count as f64 - 1.0),
            mean: self.mean,
            count: self.count,
        })
    }
}

/// Eigen-decomposes a symmetric PSD matrix, clipping tiny negative
/// eigenvalues. Fails if an eigenvalue is clearly negative.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let clip = 1e-10 * max;
    let reject = 1e-6 * max.max(1.0);
    for l in eig.eigenvalues.iter_mut() {
        if !l.is_finite() || *l < -reject {
            return Err(Error::Numerical(format!(
                "{what} has eigenvalue {l} (largest {max}); not positive semidefinite"
            )));
        }
        if *l < clip {
            *l = 0.0;
        }
    }
    Ok(eig)
}

/// Squared Fréchet distance between the Gaussians described by `a` and `b`:
/// ‖μa − μb‖² + tr Σa + tr Σb − 2 tr (Σa^½ Σb Σa^½)^½.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let ea = psd_eigen(&a.covariance, "first covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &sqrt_a * &b.covariance * &sqrt_a;
    let tr_sqrt: f64 = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let d = mean_term + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// A deterministic image → feature map with a fixed output dimension.
pub trait Embedder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;
}

/// Block-averaged pixels on a `grid × grid` raster per channel.
#[derive(Debug, Clone)]
pub struct PixelEmbedder {
    pub shape: [usize; 3],
    pub grid: usize,
}

impl PixelEmbedder {
    pub fn new(shape: [usize; 3], grid: usize) -> Result<Self> {
        if grid == 0 || grid > shape[1] || grid > shape[2] {
            return Err(Error::invalid(format!("grid {grid} does not fit image shape {shape:?}")));
        }
        Ok(Self { shape, grid })
    }
}

impl Embedder for PixelEmbedder {
    fn name(&self) -> &str {
        "pixels"
    }

    fn dim(&self) -> usize {
        self.shape[0] * self.grid * self.grid
    }

    fn embed(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let [c, h, w] = self.shape;
        let g = self.grid;
        images
            .iter()
            .map(|img| {
                if img.shape() != self.shape {
                    return Err(Error::invalid(format!(
                        "image shape {:?} does not match embedder shape {:?}",
                        img.shape(),
                        self.shape
                    )));
                }
                let mut out = Vec::with_capacity(self.dim());
                for ch in 0..c {
                    for by in 0..g {
                        for bx in 0..g {
                            let (y0, y1) = (by * h / g, (by + 1) * h / g);
                            let (x0, x1) = (bx * w / g, (bx + 1) * w / g);
                            let mut sum = 0.0f64;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    sum += img.get(ch, y, x) as f64;
                                }
                            }
                            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
                        }
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// The model's own posterior mean as a feature vector.
pub struct EncoderEmbedder<'a> {
    pub model: &'a IntroVac,
}

impl Embedder for EncoderEmbedder<'_> {
    fn name(&self) -> &str {
        "classifier-features"
    }

    fn dim(&self) -> usize {
        self.model.config().latent_dim
    }

    fn embed(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let shape = self.model.config().image_shape();
        if let Some(bad) = images.iter().find(|i| i.shape() != shape) {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match model shape {shape:?}",
                bad.shape()
            )));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            out.extend(self.model.encode_images(chunk)?.into_iter().map(|q| q.mean().to_vec()));
        }
        Ok(out)
    }
}

pub fn accumulate_stats(images: &[ImageTensor], embedder: &dyn Embedder) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "feature stats need at least 2 images, got {}",
            images.len()
        )));
    }
    let mut acc = StatsAccumulator::new(embedder.dim());
    for chunk in images.chunks(EVAL_CHUNK) {
        for f in embedder.embed(chunk)? {
            acc.push(&f)?;
        }
    }
    acc.finish()
}

/// Posterior means of all images, computed in chunks.
pub fn posterior_means(model: &IntroVac, images: &[ImageTensor]) -> Result<Vec<LatentCode>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(
            model
                .encode_images(chunk)?
                .into_iter()
                .map(|q| LatentCode(q.mean().to_vec())),
        );
    }
    Ok(out)
}

/// Fraction of items whose thresholded attribute logit (σ ≥ ½) matches the
/// label, per attribute.
pub fn accuracy_from_logits(logits: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InsufficientData("accuracy needs a nonempty labelled set".into()));
    }
    let k = labels[0].len();
    let mut hits = vec![0usize; k];
    for (l, y) in logits.iter().zip(labels) {
        if l.len() < k || y.len() != k {
            return Err(Error::invalid("logit and label widths differ"));
        }
        for j in 0..k {
            hits[j] += ((l[j] >= 0.0) == (y[j] == 1)) as usize;
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / logits.len() as f64).collect())
}

pub fn classifier_accuracy(model: &IntroVac, dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("accuracy on an empty dataset".into()));
    }
    let head = model.head()?;
    let logits = posterior_means(model, &dataset.images)?
        .iter()
        .map(|z| head.attribute_logits(z))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_logits(&logits, &dataset.labels)
}

/// Reconstruction quality of a model on a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub fid_reconstruction: f64,
    pub l1_error: f64,
    pub accuracy_per_attribute: Vec<f64>,
    pub num_images: usize,
}

/// Report document written by the `evaluate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub embedder: String,
    pub fid_reconstruction: f64,
    pub l1_error: f64,
    pub accuracy_per_attribute: Vec<f64>,
    pub num_images: usize,
    pub seed: u64,
}

/// Decodes posterior means of every image and compares real against
/// reconstructed feature statistics.
pub fn evaluate_reconstruction_fid(
    model: &IntroVac,
    dataset: &Dataset,
    embedder: &dyn Embedder,
) -> Result<ReconstructionMetrics> {
    if dataset.len() < 2 {
        return Err(Error::InsufficientData("evaluation needs at least 2 images".into()));
    }
    let shape = model.config().image_shape();
    if let Some(bad) = dataset.images.iter().find(|i| i.shape() != shape) {
        return Err(Error::invalid(format!(
            "dataset image shape {:?} does not match model shape {shape:?}",
            bad.shape()
        )));
    }
    let head = model.head()?;
    let mut real = StatsAccumulator::new(embedder.dim());
    let mut recon = StatsAccumulator::new(embedder.dim());
    let mut abs_sum = 0.0f64;
    let mut logits = Vec::with_capacity(dataset.len());
    for chunk in dataset.images.chunks(EVAL_CHUNK) {
        let means: Vec<LatentCode> = model
            .encode_images(chunk)?
            .into_iter()
            .map(|q| LatentCode(q.mean().to_vec()))
            .collect();
        for z in &means {
            logits.push(head.attribute_logits(z)?);
        }
        let rec = model.decode_latents(&means)?;
        for (a, b) in chunk.iter().zip(&rec) {
            abs_sum += a
                .pixels()
                .iter()
                .zip(b.pixels())
                .map(|(p, q)| (p - q).abs() as f64)
                .sum::<f64>();
        }
        for f in embedder.embed(chunk)? {
            real.push(&f)?;
        }
        for f in embedder.embed(&rec)? {
            recon.push(&f)?;
        }
    }
    let pixels = dataset.len() * shape.iter().product::<usize>();
    Ok(ReconstructionMetrics {
        fid_reconstruction: frechet_distance(&real.finish()?, &recon.finish()?)?,
        l1_error: abs_sum / pixels as f64,
        accuracy_per_attribute: accuracy_from_logits(&logits, &dataset.labels)?,
        num_images: dataset.len(),
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            r[t] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equally long series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("spearman of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Normalized histogram of all pixel values over `bins` equal bins of [0, 1].
pub fn pixel_histogram(images: &[ImageTensor], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins.max(1)];
    let mut n = 0usize;
    for p in images.iter().flat_map(|i| i.pixels()) {
        let b = ((p.clamp(0.0, 1.0) * bins as f32) as usize).min(bins - 1);
        h[b] += 1.0;
        n += 1;
    }
    if n > 0 {
        h.iter_mut().for_each(|v| *v /= n as f64);
    }
    h
}

/// Jensen–Shannon divergence (natural log) between two distributions.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("histograms have different lengths"));
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).ln())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl(p, &m) + 0.5 * kl(q, &m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderOutput, ModelConfig};
    use candle_core::DType;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats_of(rows: &[Vec<f64>]) -> FeatureStats {
        let mut acc = StatsAccumulator::new(rows[0].len());
        for r in rows {
            acc.push(r).unwrap();
        }
        acc.finish().unwrap()
    }

    fn diag_stats(mean: Vec<f64>, var: &[f64]) -> FeatureStats {
        FeatureStats::from_moments(mean, DMatrix::from_diagonal(&DVector::from_column_slice(var)), 100).unwrap()
    }

    /// Two-pass mean and unbiased covariance.
    fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = rows.len() as f64;
        let m = rows[0].len();
        let mean: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let cov = (0..m)
            .map(|a| {
                (0..m)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    #[test]
    fn stats_examples() {
        let s = stats_of(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let same = stats_of(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
        assert_eq!(same.covariance, DMatrix::zeros(2, 2));
        let mut one = StatsAccumulator::new(2);
        one.push(&[1.0, 1.0]).unwrap();
        assert!(matches!(one.finish(), Err(Error::InsufficientData(_))));
        assert!(StatsAccumulator::new(2).push(&[1.0]).is_err());
    }

    #[test]
    fn streaming_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..5).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + 3.0).collect())
            .collect();
        let s = stats_of(&rows);
        let (mean, cov) = two_pass(&rows);
        for a in 0..5 {
            assert!((s.mean[a] - mean[a]).abs() < 1e-10);
            for b in 0..5 {
                assert!((s.covariance[(a, b)] - cov[a][b]).abs() < 1e-10);
            }
        }
        let mut reversed = rows.clone();
        reversed.reverse();
        let r = stats_of(&reversed);
        assert!((&r.mean - &s.mean).amax() < 1e-10);
        assert!((&r.covariance - &s.covariance).amax() < 1e-10);
        assert_eq!(s.covariance, s.covariance.transpose());
    }

    #[test]
    fn frechet_examples() {
        let a = diag_stats(vec![0.0], &[1.0]);
        let b = diag_stats(vec![1.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-9);
        let a = diag_stats(vec![0.0, 0.0], &[1.0, 1.0]);
        let b = diag_stats(vec![0.0, 0.0], &[4.0, 9.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        assert!(frechet_distance(&a, &diag_stats(vec![0.0], &[1.0])).is_err());
        let bad = FeatureStats::from_moments(vec![0.0, 0.0], DMatrix::from_diagonal_element(2, 2, -1.0), 3).unwrap();
        assert!(matches!(frechet_distance(&bad, &a), Err(Error::Numerical(_))));
    }

    #[test]
    fn frechet_diagonal_closed_form_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let m = rng.random_range(1..6);
            let va: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..5.0)).collect();
            let vb: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..5.0)).collect();
            let ma: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mb: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let oracle: f64 = (0..m)
                .map(|i| (va[i].sqrt() - vb[i].sqrt()).powi(2) + (ma[i] - mb[i]).powi(2))
                .sum();
            let got = frechet_distance(&diag_stats(ma, &va), &diag_stats(mb, &vb)).unwrap();
            assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        }
    }

    fn random_cov(rng: &mut ChaCha8Rng, m: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m + 2, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() / (m as f64)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn frechet_symmetric_and_nonnegative(seed in 0u64..10_000, m in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = FeatureStats::from_moments((0..m).map(|_| rng.random()).collect(), random_cov(&mut rng, m), 10).unwrap();
            let b = FeatureStats::from_moments((0..m).map(|_| rng.random()).collect(), random_cov(&mut rng, m), 10).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pixel_embedder_blocks() {
        let mut img = ImageTensor::filled(1, 4, 4, 0.0);
        img.set(0, 0, 0, 1.0);
        let e = PixelEmbedder::new([1, 4, 4], 2).unwrap();
        assert_eq!(e.dim(), 4);
        assert_eq!(e.embed(&[img]).unwrap(), vec![vec![0.25, 0.0, 0.0, 0.0]]);
        assert!(e.embed(&[ImageTensor::filled(3, 4, 4, 0.0)]).is_err());
        assert!(PixelEmbedder::new([1, 4, 4], 5).is_err());
    }

    fn toy_dataset(n: usize, labels: impl Fn(usize) -> u8) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Dataset {
            images: (0..n)
                .map(|_| ImageTensor::new(1, 1, 1, vec![rng.random()]).unwrap())
                .collect(),
            labels: (0..n).map(|i| vec![labels(i)]).collect(),
            attribute_names: vec!["a".into()],
            ids: (0..n).map(|i| i.to_string()).collect(),
        }
    }

    /// 1×1×1 images, latent 1, no stages, clamp output: encoder mean and
    /// decoder can be set to exact identities.
    fn identity_model() -> IntroVac {
        let cfg = ModelConfig {
            image_size: 1,
            image_channels: 1,
            latent_dim: 1,
            channel_plan: vec![],
            num_attributes: 1,
            attribute_names: vec![],
            normalization: Default::default(),
            decoder_output: DecoderOutput::Clamp,
        };
        let m = IntroVac::new(cfg, 0, DType::F64).unwrap();
        let set = |name: &str, v: &[f64]| {
            let (_, var) = m
                .params_of(&crate::model::Group::ALL)
                .into_iter()
                .find(|(n, _)| n == name)
                .unwrap();
            let t = candle_core::Tensor::from_slice(v, var.shape(), var.device()).unwrap();
            var.set(&t).unwrap();
        };
        set("encoder.out.weight", &[1.0, 0.0]);
        set("encoder.out.bias", &[0.0, 0.0]);
        set("decoder.input.weight", &[1.0]);
        set("decoder.input.bias", &[0.0]);
        m
    }

    #[test]
    fn identity_autoencoder_scores_zero() {
        let m = identity_model();
        let d = toy_dataset(50, |i| (i % 2) as u8);
        let e = PixelEmbedder::new([1, 1, 1], 1).unwrap();
        let r = evaluate_reconstruction_fid(&m, &d, &e).unwrap();
        assert!(r.fid_reconstruction < 1e-9, "{}", r.fid_reconstruction);
        assert!(r.l1_error < 1e-12);
        assert_eq!(r.num_images, 50);
    }

    #[test]
    fn accuracy_examples() {
        let m = identity_model();
        let d = toy_dataset(20, |_| 1);
        m.set_head(&crate::model::ClassifierHead::new(vec![vec![0.0], vec![0.0]], vec![30.0, 0.0]).unwrap())
            .unwrap();
        assert_eq!(classifier_accuracy(&m, &d).unwrap(), vec![1.0]);
        assert!(classifier_accuracy(&m, &toy_dataset(0, |_| 0)).is_err());

        // threshold at z = 0.5 through a weight-2 logit: 2z − 1
        m.set_head(&crate::model::ClassifierHead::new(vec![vec![2.0], vec![0.0]], vec![-1.0, 0.0]).unwrap())
            .unwrap();
        let d = toy_dataset(300, |i| (i % 3 == 0) as u8);
        let batched = classifier_accuracy(&m, &d).unwrap()[0];
        let mut hits = 0;
        for (img, y) in d.images.iter().zip(&d.labels) {
            let q = m.encode_image(img).unwrap();
            let logit = m.head().unwrap().attribute_logits(&LatentCode(q.mean().to_vec())).unwrap()[0];
            hits += ((logit >= 0.0) == (y[0] == 1)) as usize;
        }
        assert_eq!(batched, hits as f64 / 300.0);
    }

    #[test]
    fn random_head_is_a_coin_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let labels: Vec<Vec<u8>> = (0..10_000).map(|i| vec![(i % 2) as u8]).collect();
        let acc = accuracy_from_logits(&logits, &labels).unwrap()[0];
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]).unwrap() - 1.0).abs() < 1e-12);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn histogram_and_js() {
        let a = ImageTensor::new(1, 1, 2, vec![0.1, 0.9]).unwrap();
        assert_eq!(pixel_histogram(&[a], 2), vec![0.5, 0.5]);
        assert_eq!(jensen_shannon(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((jensen_shannon(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }
}
