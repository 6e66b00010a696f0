//! Encoder E, decoder G and linear classifier head C.
//!
//! Parameters live in three groups (`encoder`, `decoder`, `classifier`) so the
//! trainer can hand them to separate optimizers.

mod checkpoint;
mod head;
mod ops;
mod image;
pub mod layers;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, FORMAT_VERSION};
pub use head::ClassifierHead;
pub use image::ImageTensor;
use layers::{leaky_relu, sigmoid, split_halves, Init, Linear, ParamGroup, ResBlock};
pub use layers::Pass;

use crate::distributions::{GaussianLatent, LatentCode, LOG_VAR_CLAMP};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::to_f64_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    Batch,
}

/// Output nonlinearity of the decoder. Both map into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderOutput {
    #[default]
    Sigmoid,
    /// Hard clip; mostly useful for hand-built toy models.
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub latent_dim: usize,
    pub channel_plan: Vec<usize>,
    pub num_attributes: usize,
    #[serde(default)]
    pub attribute_names: Vec<String>,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub decoder_output: DecoderOutput,
}

impl ModelConfig {
    /// Desk-scale default: 32×32 RGB, three stages, 32-dimensional latent.
    pub fn desk(num_attributes: usize) -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            latent_dim: 32,
            channel_plan: vec![32, 64, 128],
            num_attributes,
            attribute_names: Vec::new(),
            normalization: Normalization::None,
            decoder_output: DecoderOutput::Sigmoid,
        }
    }

    /// The 128×128 configuration with five stages and a 256-dimensional latent.
    pub fn full_scale(num_attributes: usize) -> Self {
        Self {
            image_size: 128,
            image_channels: 3,
            latent_dim: 256,
            channel_plan: vec![32, 64, 128, 256, 512],
            num_attributes,
            attribute_names: Vec::new(),
            normalization: Normalization::Batch,
            decoder_output: DecoderOutput::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_channels == 0 {
            return Err(Error::invalid("image_size and image_channels must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be at least 1"));
        }
        if self.num_attributes == 0 {
            return Err(Error::invalid("num_attributes must be at least 1"));
        }
        if self.channel_plan.iter().any(|&c| c == 0) {
            return Err(Error::invalid("channel_plan entries must be positive"));
        }
        if self.channel_plan.len() >= usize::BITS as usize
            || self.image_size % (1usize << self.channel_plan.len()) != 0
        {
            return Err(Error::invalid(format!(
                "image_size {} is not divisible by 2^{}",
                self.image_size,
                self.channel_plan.len()
            )));
        }
        if !self.attribute_names.is_empty() && self.attribute_names.len() != self.num_attributes {
            return Err(Error::invalid(format!(
                "{} attribute names for {} attributes",
                self.attribute_names.len(),
                self.num_attributes
            )));
        }
        Ok(())
    }

    /// Spatial size after the last downsampling stage.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.channel_plan.len()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    pub fn attribute_name(&self, index: usize) -> String {
        self.attribute_names
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("attr{index}"))
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        (0..self.num_attributes).find(|&i| self.attribute_name(i) == name)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<ResBlock>,
    out: Linear,
}

impl Encoder {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.channel_plan.len());
        let mut channels = cfg.image_channels;
        for (i, &c) in cfg.channel_plan.iter().enumerate() {
            let bn = cfg.normalization == Normalization::Batch;
            stages.push(ResBlock::new(init, &format!("encoder.stage{i}"), channels, c, bn)?);
            channels = c;
        }
        let flat = channels * cfg.bottleneck_size().pow(2);
        let out = Linear::new(init, "encoder.out", flat, 2 * cfg.latent_dim)?;
        Ok(Self { stages, out })
    }

    fn forward(&self, x: &Tensor, pass: Pass) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = ops::avg_pool2(&stage.forward(&h, pass)?)?;
        }
        let mut h = h.flatten_from(1)?;
        if !self.stages.is_empty() {
            h = leaky_relu(&h)?;
        }
        let (mean, log_var) = split_halves(&self.out.forward(&h, pass)?)?;
        let log_var = log_var.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        Ok((mean, log_var))
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Linear,
    stages: Vec<ResBlock>,
    out: Option<layers::Conv2d>,
    start_channels: usize,
    start_size: usize,
    output: DecoderOutput,
}

impl Decoder {
    fn new(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let start_channels = *cfg.channel_plan.last().unwrap_or(&cfg.image_channels);
        let start_size = cfg.bottleneck_size();
        let input = Linear::new(
            init,
            "decoder.input",
            cfg.latent_dim,
            start_channels * start_size * start_size,
        )?;
        let mut stages = Vec::with_capacity(cfg.channel_plan.len());
        let mut channels = start_channels;
        for (i, &c) in cfg.channel_plan.iter().rev().enumerate() {
            let bn = cfg.normalization == Normalization::Batch;
            stages.push(ResBlock::new(init, &format!("decoder.stage{i}"), channels, c, bn)?);
            channels = c;
        }
        let out = if stages.is_empty() {
            None
        } else {
            Some(layers::Conv2d::new(init, "decoder.out", channels, cfg.image_channels, 3)?)
        };
        Ok(Self {
            input,
            stages,
            out,
            start_channels,
            start_size,
            output: cfg.decoder_output,
        })
    }

    fn forward(&self, z: &Tensor, pass: Pass) -> Result<Tensor> {
        let b = z.dim(0)?;
        let mut h = self.input.forward(z, pass)?.reshape((
            b,
            self.start_channels,
            self.start_size,
            self.start_size,
        ))?;
        for stage in &self.stages {
            h = ops::upsample2(&stage.forward(&h, pass)?)?;
        }
        if let Some(out) = &self.out {
            h = out.forward(&leaky_relu(&h)?, pass)?;
        }
        match self.output {
            DecoderOutput::Sigmoid => sigmoid(&h),
            DecoderOutput::Clamp => Ok(h.clamp(0.0, 1.0)?),
        }
    }
}

/// Which parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Decoder,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Decoder, Group::Classifier];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::Classifier => "classifier",
        }
    }
}

/// The full model: residual encoder, mirrored decoder and linear head with
/// `num_attributes` attribute logits plus one fake logit.
#[derive(Debug, Clone)]
pub struct IntroVac {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    encoder: Encoder,
    decoder: Decoder,
    head: Linear,
    groups: BTreeMap<Group, ParamGroup>,
}

impl IntroVac {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut groups = BTreeMap::new();

        let mut g = ParamGroup::default();
        let encoder = Encoder::new(
            &mut Init { rng: &mut rng, dtype, device: &device, group: &mut g },
            &config,
        )?;
        groups.insert(Group::Encoder, g);

        let mut g = ParamGroup::default();
        let decoder = Decoder::new(
            &mut Init { rng: &mut rng, dtype, device: &device, group: &mut g },
            &config,
        )?;
        groups.insert(Group::Decoder, g);

        let mut g = ParamGroup::default();
        let head = Linear::new(
            &mut Init { rng: &mut rng, dtype, device: &device, group: &mut g },
            "classifier.head",
            config.latent_dim,
            config.num_attributes + 1,
        )?;
        groups.insert(Group::Classifier, g);

        Ok(Self {
            config,
            dtype,
            device,
            encoder,
            decoder,
            head,
            groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn group(&self, group: Group) -> &ParamGroup {
        &self.groups[&group]
    }

    /// Trainable parameters of the given groups, in stable name order.
    pub fn params_of(&self, groups: &[Group]) -> Vec<(String, Var)> {
        groups
            .iter()
            .flat_map(|g| self.groups[g].params.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.groups.values().map(ParamGroup::param_count).sum()
    }

    /// `[B, C, H, W]` images → posterior `(mean, log_var)`, each `[B, d]`.
    pub fn encode(&self, x: &Tensor, pass: Pass) -> Result<(Tensor, Tensor)> {
        let dims = x.dims();
        let [c, h, w] = self.config.image_shape();
        if dims.len() != 4 || dims[1..] != [c, h, w] {
            return Err(Error::invalid(format!(
                "encoder expects [B, {c}, {h}, {w}], got {dims:?}"
            )));
        }
        self.encoder.forward(x, pass)
    }

    /// `[B, d]` latent codes → `[B, C, H, W]` images in [0, 1].
    pub fn decode(&self, z: &Tensor, pass: Pass) -> Result<Tensor> {
        let dims = z.dims();
        if dims.len() != 2 || dims[1] != self.config.latent_dim {
            return Err(Error::invalid(format!(
                "decoder expects [B, {}], got {dims:?}",
                self.config.latent_dim
            )));
        }
        self.decoder.forward(z, pass)
    }

    /// `[B, d]` → `[B, k + 1]` logits; the last column is the fake logit.
    pub fn classify(&self, z: &Tensor, pass: Pass) -> Result<Tensor> {
        let dims = z.dims();
        if dims.len() != 2 || dims[1] != self.config.latent_dim {
            return Err(Error::invalid(format!(
                "classifier expects [B, {}], got {dims:?}",
                self.config.latent_dim
            )));
        }
        self.head.forward(z, pass)
    }

    /// Detached copy of the classifier head as plain f64 arrays.
    pub fn head(&self) -> Result<ClassifierHead> {
        let w = crate::tensor::to_f64_rows(self.head.weight().as_tensor())?;
        let b = to_f64_vec(self.head.bias().as_tensor())?;
        ClassifierHead::new(w, b)
    }

    /// Overwrites the classifier head parameters.
    pub fn set_head(&self, head: &ClassifierHead) -> Result<()> {
        if head.latent_dim() != self.config.latent_dim
            || head.num_attributes() != self.config.num_attributes
        {
            return Err(Error::invalid("head shape does not match the model"));
        }
        let rows: Vec<f64> = head.weights().iter().flatten().copied().collect();
        let w = Tensor::from_vec(rows, self.head.weight().shape(), &self.device)?.to_dtype(self.dtype)?;
        let b = Tensor::from_vec(head.bias().to_vec(), self.head.bias().shape(), &self.device)?
            .to_dtype(self.dtype)?;
        self.head.weight().set(&w)?;
        self.head.bias().set(&b)?;
        Ok(())
    }

    pub fn images_to_tensor(&self, images: &[ImageTensor]) -> Result<Tensor> {
        images_to_tensor(images, self.config.image_shape(), self.dtype, &self.device)
    }

    pub fn latents_to_tensor(&self, codes: &[LatentCode]) -> Result<Tensor> {
        let d = self.config.latent_dim;
        if codes.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid(format!("latent codes must have dimension {d}")));
        }
        let flat: Vec<f64> = codes.iter().flat_map(|c| c.0.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (codes.len(), d), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Posterior of each image, evaluated with running statistics.
    pub fn encode_images(&self, images: &[ImageTensor]) -> Result<Vec<GaussianLatent>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.images_to_tensor(images)?;
        let (mean, log_var) = self.encode(&x, Pass::EVAL)?;
        let mean = crate::tensor::to_f64_rows(&mean)?;
        let log_var = crate::tensor::to_f64_rows(&log_var)?;
        mean.into_iter()
            .zip(log_var)
            .map(|(m, lv)| GaussianLatent::new(m, lv))
            .collect()
    }

    pub fn encode_image(&self, image: &ImageTensor) -> Result<GaussianLatent> {
        Ok(self.encode_images(std::slice::from_ref(image))?.remove(0))
    }

    pub fn decode_latents(&self, codes: &[LatentCode]) -> Result<Vec<ImageTensor>> {
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.latents_to_tensor(codes)?;
        tensor_to_images(&self.decode(&z, Pass::EVAL)?)
    }

    pub fn decode_latent(&self, code: &LatentCode) -> Result<ImageTensor> {
        Ok(self.decode_latents(std::slice::from_ref(code))?.remove(0))
    }

    /// Decodes the posterior mean of each image.
    pub fn reconstruct(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        let codes: Vec<LatentCode> = self
            .encode_images(images)?
            .into_iter()
            .map(|q| LatentCode(q.mean().to_vec()))
            .collect();
        self.decode_latents(&codes)
    }

    /// All parameters and buffers by stable name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.groups
            .values()
            .flat_map(|g| g.params.iter().chain(g.buffers.iter()))
            .map(|(k, v)| (k.clone(), v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Loads parameters and buffers by name; every model tensor must be present.
    pub fn load_named(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for g in self.groups.values() {
            for (name, var) in g.params.iter().chain(g.buffers.iter()) {
                let t = tensors
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    /// Rebuilds a model from a checkpoint, keeping the stored dtype.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dtype = ckpt
            .tensors
            .get("classifier.head.weight")
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Checkpoint("no classifier weights".into()))?;
        let model = Self::new(ckpt.header.model.clone(), 0, dtype)?;
        model.load_named(&ckpt.tensors)?;
        Ok(model)
    }
}

pub fn images_to_tensor(
    images: &[ImageTensor],
    shape: [usize; 3],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let mut flat = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
    for img in images {
        if img.shape() != shape {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match model shape {shape:?}",
                img.shape()
            )));
        }
        flat.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(flat, (images.len(), shape[0], shape[1], shape[2]), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let n = c * h * w;
    (0..b)
        .map(|i| ImageTensor::new(c, h, w, flat[i * n..(i + 1) * n].to_vec()))
        .collect()
}
