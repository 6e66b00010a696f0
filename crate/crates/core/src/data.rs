//! Labelled image datasets.
//!
//! Two sources: directories in the CelebA attribute layout (an attribute text
//! file next to image files) and a procedural synthetic "face" generator for
//! desk-scale runs. The synthetic set can be written to disk in the CelebA
//! layout so every downstream path goes through the real parser.

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::model::ImageTensor;
use crate::rng::{stream_rng, Stream};

/// Binary labels of one image together with their attribute names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub labels: Vec<u8>,
    pub attribute_names: Vec<String>,
}

impl AttributeVector {
    pub fn new(labels: Vec<u8>, attribute_names: Vec<String>) -> Result<Self> {
        if labels.len() != attribute_names.len() {
            return Err(Error::invalid("label and name counts differ"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(Self {
            labels,
            attribute_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parsed attribute text file.
///
/// Layout: line 1 is the image count, line 2 the whitespace-separated
/// attribute names, then one line per image: file name followed by ±1 per
/// attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTable {
    pub names: Vec<String>,
    pub rows: Vec<(String, Vec<i8>)>,
}

impl AttributeTable {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, count_line) = lines.next().ok_or_else(|| err(1, "empty attribute file".into()))?;
        let count: usize = count_line
            .trim()
            .parse()
            .map_err(|_| err(1, format!("expected an image count, found {count_line:?}")))?;
        let (_, names_line) = lines.next().ok_or_else(|| err(2, "missing attribute names".into()))?;
        let names: Vec<String> = names_line.split_whitespace().map(str::to_string).collect();
        if names.is_empty() {
            return Err(err(2, "no attribute names".into()));
        }
        let mut rows = Vec::with_capacity(count);
        for (line_no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let file = fields.next().unwrap_or_default().to_string();
            let values: Vec<i8> = fields
                .map(|f| match f {
                    "1" | "+1" => Ok(1),
                    "-1" | "\u{2212}1" => Ok(-1),
                    other => Err(err(line_no, format!("attribute value {other:?} is not ±1"))),
                })
                .collect::<Result<_>>()?;
            if values.len() != names.len() {
                return Err(err(
                    line_no,
                    format!("expected {} attribute values, found {}", names.len(), values.len()),
                ));
            }
            rows.push((file, values));
        }
        if rows.len() != count {
            return Err(err(1, format!("header announces {count} images, found {}", rows.len())));
        }
        Ok(Self { names, rows })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n{}\n", self.rows.len(), self.names.join(" "));
        for (file, values) in &self.rows {
            out.push_str(file);
            for v in values {
                out.push_str(if *v > 0 { "  1" } else { " -1" });
            }
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A derived attribute: the logical OR of source columns. A source written
/// as `!Name` contributes the negation of `Name` (CelebA stores `No_Beard`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeGroup {
    pub name: String,
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub attribute_file: PathBuf,
    /// Output attributes, each a column of the attribute file or a merge group.
    pub selected_attributes: Vec<String>,
    #[serde(default)]
    pub merge_groups: Vec<MergeGroup>,
    pub image_size: usize,
    #[serde(default)]
    pub split_seed: u64,
    /// Train / validation / test fractions.
    #[serde(default = "default_fractions")]
    pub split_fractions: Vec<f64>,
}

fn default_fractions() -> Vec<f64> {
    vec![0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<Vec<u8>>,
    pub attribute_names: Vec<String>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    pub fn attribute_vector(&self, i: usize) -> AttributeVector {
        AttributeVector {
            labels: self.labels[i].clone(),
            attribute_names: self.attribute_names.clone(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            attribute_names: self.attribute_names.clone(),
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Seed-deterministic partition into consecutive shares of a shuffled
    /// index list. Parts are disjoint and cover the dataset.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0 || !f.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        let mut acc = 0.0;
        for (i, f) in fractions.iter().enumerate() {
            acc += f;
            let end = if i + 1 == fractions.len() {
                self.len()
            } else {
                ((acc * self.len() as f64).round() as usize).min(self.len())
            };
            let mut idx = order[start..end.max(start)].to_vec();
            idx.sort_unstable();
            parts.push(self.subset(&idx));
            start = end.max(start);
        }
        Ok(parts)
    }

    /// Iteration order for one epoch, a function of `(seed, epoch)` only.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
        order
    }

    /// Label matrix `[B, k]` as f64 rows for the given indices.
    pub fn label_rows(&self, indices: &[usize]) -> Vec<f64> {
        indices
            .iter()
            .flat_map(|&i| self.labels[i].iter().map(|&l| l as f64))
            .collect()
    }

    pub fn check_invariants(&self, shape: [usize; 3]) -> Result<()> {
        if self.labels.len() != self.images.len() || self.ids.len() != self.images.len() {
            return Err(Error::invalid("dataset columns have different lengths"));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.shape() != shape {
                return Err(Error::invalid(format!("image {i} has shape {:?}", img.shape())));
            }
            if !img.in_unit_range() {
                return Err(Error::invalid(format!("image {i} leaves [0, 1]")));
            }
            if self.labels[i].len() != self.num_attributes() || self.labels[i].iter().any(|&l| l > 1) {
                return Err(Error::invalid(format!("image {i} has malformed labels")));
            }
        }
        Ok(())
    }
}

/// Result of loading a CelebA-layout directory.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Rows whose image file could not be read.
    pub missing_images: usize,
}

/// Resolves `selected_attributes` into 0/1 label vectors for every row.
pub fn select_labels(
    table: &AttributeTable,
    selected: &[String],
    merge_groups: &[MergeGroup],
) -> Result<Vec<Vec<u8>>> {
    let column = |name: &str| -> Result<(usize, bool)> {
        let (negate, name) = match name.strip_prefix('!') {
            Some(rest) => (true, rest),
            None => (false, name),
        };
        table
            .column(name)
            .map(|c| (c, negate))
            .ok_or_else(|| Error::invalid(format!("attribute {name:?} not in attribute file")))
    };
    let mut plans: Vec<Vec<(usize, bool)>> = Vec::with_capacity(selected.len());
    for name in selected {
        if let Some(group) = merge_groups.iter().find(|g| &g.name == name) {
            if group.sources.is_empty() {
                return Err(Error::invalid(format!("merge group {name:?} has no sources")));
            }
            plans.push(group.sources.iter().map(|s| column(s)).collect::<Result<_>>()?);
        } else {
            plans.push(vec![column(name)?]);
        }
    }
    Ok(table
        .rows
        .iter()
        .map(|(_, values)| {
            plans
                .iter()
                .map(|plan| {
                    plan.iter().any(|&(c, negate)| (values[c] > 0) != negate) as u8
                })
                .collect()
        })
        .collect())
}

pub fn load_celeba_format(spec: &DatasetSpec) -> Result<LoadedDataset> {
    if spec.selected_attributes.is_empty() {
        return Err(Error::invalid("no attributes selected"));
    }
    if spec.split_fractions.len() != 3 {
        return Err(Error::invalid("split_fractions needs train, validation and test shares"));
    }
    let text = std::fs::read_to_string(&spec.attribute_file)?;
    let table = AttributeTable::parse(&text, &spec.attribute_file)?;
    let labels = select_labels(&table, &spec.selected_attributes, &spec.merge_groups)?;

    let mut data = Dataset {
        attribute_names: spec.selected_attributes.clone(),
        ..Default::default()
    };
    let mut missing = 0usize;
    for ((file, _), y) in table.rows.iter().zip(labels) {
        match imageio::load_image(&spec.root_path.join(file), spec.image_size) {
            Ok(img) => {
                data.images.push(img);
                data.labels.push(y);
                data.ids.push(file.clone());
            }
            Err(e) => {
                warn!("skipping {file}: {e}");
                missing += 1;
            }
        }
    }
    let mut parts = data.split(&spec.split_fractions, spec.split_seed)?.into_iter();
    Ok(LoadedDataset {
        train: parts.next().unwrap_or_default(),
        val: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
        missing_images: missing,
    })
}

/// Projects the dataset onto `attributes` and optionally balances items
/// carrying any of them against items carrying none, by downsampling the
/// larger side.
pub fn build_attribute_subset(
    dataset: &Dataset,
    attributes: &[&str],
    balance: bool,
    seed: u64,
) -> Result<Dataset> {
    if attributes.is_empty() {
        return Err(Error::invalid("no attributes requested"));
    }
    let cols: Vec<usize> = attributes
        .iter()
        .map(|a| {
            dataset
                .attribute_names
                .iter()
                .position(|n| n == a)
                .ok_or_else(|| Error::invalid(format!("attribute {a:?} not in dataset")))
        })
        .collect::<Result<_>>()?;
    let mut projected = dataset.clone();
    projected.attribute_names = attributes.iter().map(|s| s.to_string()).collect();
    projected.labels = dataset
        .labels
        .iter()
        .map(|l| cols.iter().map(|&c| l[c]).collect())
        .collect();

    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..projected.len()).partition(|&i| projected.labels[i].iter().any(|&v| v == 1));
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} positive and {} negative items for {attributes:?}",
            pos.len(),
            neg.len()
        )));
    }
    if !balance {
        return Ok(projected);
    }
    let mut rng = stream_rng(seed, Stream::Data, 1);
    let n = pos.len().min(neg.len());
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut keep: Vec<usize> = pos[..n].iter().chain(&neg[..n]).copied().collect();
    keep.sort_unstable();
    Ok(projected.subset(&keep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub image_size: usize,
    pub num_attributes: usize,
    pub seed: u64,
    /// Correlation between the two attributes (0 = independent).
    #[serde(default)]
    pub correlation: f64,
}

pub const SYNTHETIC_ATTRIBUTES: [&str; 2] = ["glasses", "beard"];

/// Fixed marker rectangles `(y0, y1, x0, x1)`; always inside the face.
pub fn marker_region(attribute: usize, size: usize) -> (usize, usize, usize, usize) {
    let s = size as f64;
    let px = |f: f64| (f * s).round() as usize;
    match attribute {
        0 => (px(0.34), px(0.42), px(0.30), px(0.70)),
        _ => (px(0.64), px(0.76), px(0.36), px(0.64)),
    }
}

/// A face region that no marker ever covers.
pub fn reference_region(size: usize) -> (usize, usize, usize, usize) {
    let s = size as f64;
    let px = |f: f64| (f * s).round() as usize;
    (px(0.48), px(0.56), px(0.38), px(0.62))
}

fn sample_labels<R: Rng>(rng: &mut R, k: usize, rho: f64) -> Vec<u8> {
    if k == 1 {
        return vec![rng.random_bool(0.5) as u8];
    }
    // joint Bernoulli(½, ½) with correlation ρ
    let p_same = 0.25 * (1.0 + rho);
    let u: f64 = rng.random();
    if u < p_same {
        vec![1, 1]
    } else if u < 2.0 * p_same {
        vec![0, 0]
    } else if u < 2.0 * p_same + 0.25 * (1.0 - rho) {
        vec![1, 0]
    } else {
        vec![0, 1]
    }
}

fn render_face<R: Rng>(rng: &mut R, size: usize, labels: &[u8]) -> ImageTensor {
    let s = size as f32;
    let mut img = ImageTensor::filled(3, size, size, 0.0);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.35));
    let skin: [f32; 3] = [
        rng.random_range(0.70..0.95),
        rng.random_range(0.55..0.80),
        rng.random_range(0.45..0.70),
    ];
    let cy = s * (0.5 + rng.random_range(-0.03..0.03));
    let cx = s * (0.5 + rng.random_range(-0.03..0.03));
    let ry = s * rng.random_range(0.40..0.46);
    let rx = s * rng.random_range(0.30..0.36);
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f32 + 0.5 - cy) / ry;
            let dx = (x as f32 + 0.5 - cx) / rx;
            let inside = dx * dx + dy * dy <= 1.0;
            for c in 0..3 {
                let base = if inside { skin[c] } else { bg[c] };
                let noise = rng.random_range(-0.05..0.05);
                img.set(c, y, x, (base + noise).clamp(0.0, 1.0));
            }
        }
    }
    if labels.first() == Some(&1) {
        let (y0, y1, x0, x1) = marker_region(0, size);
        let tint = rng.random_range(0.02..0.12);
        for y in y0..y1 {
            for x in x0..x1 {
                for c in 0..3 {
                    img.set(c, y, x, tint);
                }
            }
        }
    }
    if labels.get(1) == Some(&1) {
        let (y0, y1, x0, x1) = marker_region(1, size);
        let hair: [f32; 3] = [0.25, 0.15, 0.08];
        for y in y0..y1 {
            for x in x0..x1 {
                let stripe = if (x + y) % 2 == 0 { 0.0 } else { 0.1 };
                for c in 0..3 {
                    let v = hair[c] * 0.6 + stripe + rng.random_range(0.0..0.05);
                    img.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    img
}

/// Procedural faces: a skin-toned ellipse on a noisy background, a dark
/// "glasses" bar in the upper third for attribute 0 and a striped "beard"
/// patch in the lower third for attribute 1.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if !(1..=2).contains(&spec.num_attributes) {
        return Err(Error::invalid("synthetic data supports 1 or 2 attributes"));
    }
    if spec.image_size < 16 {
        return Err(Error::invalid("synthetic images need image_size >= 16"));
    }
    if !(-1.0..=1.0).contains(&spec.correlation) {
        return Err(Error::invalid("correlation must lie in [-1, 1]"));
    }
    let mut rng = stream_rng(spec.seed, Stream::Data, 0);
    let mut data = Dataset {
        attribute_names: SYNTHETIC_ATTRIBUTES[..spec.num_attributes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ..Default::default()
    };
    for i in 0..spec.count {
        let labels = sample_labels(&mut rng, spec.num_attributes, spec.correlation);
        data.images.push(render_face(&mut rng, spec.image_size, &labels));
        data.labels.push(labels);
        data.ids.push(format!("{:06}.png", i + 1));
    }
    Ok(data)
}

/// Writes images as PNG plus `list_attr.txt` in the attribute layout and
/// returns a `DatasetSpec` that loads it back.
pub fn write_celeba_layout(dataset: &Dataset, dir: &Path, image_size: usize) -> Result<DatasetSpec> {
    std::fs::create_dir_all(dir)?;
    let mut table = AttributeTable {
        names: dataset.attribute_names.clone(),
        rows: Vec::with_capacity(dataset.len()),
    };
    for i in 0..dataset.len() {
        imageio::save_png(&dataset.images[i], &dir.join(&dataset.ids[i]))?;
        table.rows.push((
            dataset.ids[i].clone(),
            dataset.labels[i].iter().map(|&l| if l == 1 { 1 } else { -1 }).collect(),
        ));
    }
    let attribute_file = dir.join("list_attr.txt");
    std::fs::write(&attribute_file, table.to_text())?;
    Ok(DatasetSpec {
        root_path: dir.to_path_buf(),
        attribute_file,
        selected_attributes: dataset.attribute_names.clone(),
        merge_groups: Vec::new(),
        image_size,
        split_seed: 0,
        split_fractions: default_fractions(),
    })
}
