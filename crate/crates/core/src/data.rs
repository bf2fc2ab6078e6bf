//! Datasets, loaders, a synthetic blob generator and a small SGD trainer.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AffineLayer, MlpNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some(i) = features.iter().position(|f| f.len() != d) {
                return Err(Error::shape(format!("row {i} has dimension {}, expected {d}", features[i].len())));
            }
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {} at row {i} is outside 0..{num_classes}",
                labels[i]
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Per-feature (min, max).
    pub fn feature_bounds(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim()];
        for f in &self.features {
            for (b, &v) in out.iter_mut().zip(f) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        out
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// All rows except `indices`.
    pub fn without(&self, indices: &[usize]) -> Dataset {
        let mut drop = vec![false; self.len()];
        for &i in indices {
            drop[i] = true;
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !drop[i]).collect();
        self.subset(&keep)
    }

    /// Write as CSV: feature columns then the label, no header.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        for (f, y) in self.features.iter().zip(&self.labels) {
            let mut row: Vec<String> = f.iter().map(|v| format!("{v:?}")).collect();
            row.push(y.to_string());
            w.write_record(&row)
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::parse(what, format!("file ends at byte {} while reading header at byte {offset}", bytes.len())))
}

/// Load an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let img_ctx = images.display().to_string();
    let lab_ctx = labels.display().to_string();

    let magic = read_u32(&img, 0, &img_ctx)?;
    if magic != 0x0000_0803 {
        return Err(Error::parse(img_ctx, format!("bad magic 0x{magic:08x} at byte 0, expected 0x00000803")));
    }
    let n = read_u32(&img, 4, &img_ctx)? as usize;
    let rows = read_u32(&img, 8, &img_ctx)? as usize;
    let cols = read_u32(&img, 12, &img_ctx)? as usize;
    let dim = rows * cols;
    let need = 16 + n * dim;
    if img.len() < need {
        return Err(Error::parse(
            img_ctx,
            format!("pixel data ends at byte {}, expected {need} bytes", img.len()),
        ));
    }

    let magic = read_u32(&lab, 0, &lab_ctx)?;
    if magic != 0x0000_0801 {
        return Err(Error::parse(lab_ctx, format!("bad magic 0x{magic:08x} at byte 0, expected 0x00000801")));
    }
    let m = read_u32(&lab, 4, &lab_ctx)? as usize;
    if lab.len() < 8 + m {
        return Err(Error::parse(
            lab_ctx,
            format!("label data ends at byte {}, expected {} bytes", lab.len(), 8 + m),
        ));
    }
    if m != n {
        return Err(Error::InvalidParameter(format!("{n} images but {m} labels")));
    }
    let features = (0..n)
        .map(|i| img[16 + i * dim..16 + (i + 1) * dim].iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lab[8..8 + m].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, labels, classes, split)
}

/// Per-column mean and standard deviation used to standardize features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n == 0 {
            return Err(Error::InvalidParameter("cannot standardize an empty dataset".into()));
        }
        let d = features[0].len();
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // Constant columns keep unit scale.
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::shape("standardization dimension mismatch"));
        }
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }
}

/// Options for [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub label_column: usize,
    pub has_header: bool,
    /// Statistics to standardize with; fitted on this file when `None`.
    pub standardization: Option<Standardization>,
    /// Number of classes; inferred as `max label + 1` when `None`.
    pub num_classes: Option<usize>,
}

/// Load a numeric CSV; one column holds integer labels, the rest are features.
pub fn load_csv(path: &Path, opts: &CsvOptions, split: Split) -> Result<(Dataset, Standardization)> {
    let ctx = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(&ctx, e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(&ctx, format!("row {row}: {e}")))?;
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::parse(&ctx, format!("row {row} has {} cells, expected {w}", rec.len())));
            }
            _ => {}
        }
        if opts.label_column >= rec.len() {
            return Err(Error::InvalidParameter(format!(
                "label column {} out of range for {} columns",
                opts.label_column,
                rec.len()
            )));
        }
        let mut f = Vec::with_capacity(rec.len() - 1);
        for (col, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if col == opts.label_column {
                let y: usize = cell
                    .parse()
                    .map_err(|_| Error::parse(&ctx, format!("row {row}, column {col}: bad label {cell:?}")))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::parse(&ctx, format!("row {row}, column {col}: not a number {cell:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(&ctx, format!("row {row}, column {col}: non-finite value")));
                }
                f.push(v);
            }
        }
        features.push(f);
    }
    let stats = match &opts.standardization {
        Some(s) => s.clone(),
        None => Standardization::fit(&features)?,
    };
    let features = features.iter().map(|f| stats.apply(f)).collect::<Result<Vec<_>>>()?;
    let classes = opts
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Ok((Dataset::new(features, labels, classes, split)?, stats))
}

/// Synthetic Gaussian blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Distance of each class mean from the origin.
    pub radius: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 250,
            dim: 16,
            spread: 0.5,
            radius: 2.0,
            seed: 7,
        }
    }
}

/// Class means at the vertices of a regular polygon in the first two
/// coordinates (a simplex for three classes); other coordinates centred at 0.
/// The shuffled samples are split 80/20 into train and test.
pub fn gen_blobs(cfg: &BlobConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidParameter("need at least two classes".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::InvalidParameter("blobs need at least two dimensions".into()));
    }
    if !(cfg.spread >= 0.0 && cfg.spread.is_finite()) {
        return Err(Error::InvalidParameter("spread must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for k in 0..cfg.classes {
        let angle = std::f64::consts::TAU * k as f64 / cfg.classes as f64;
        let mut mean = vec![0.0; cfg.dim];
        mean[0] = cfg.radius * angle.cos();
        mean[1] = cfg.radius * angle.sin();
        for _ in 0..cfg.per_class {
            let x: Vec<f64> = mean.iter().map(|m| m + cfg.spread * normal.sample(&mut rng)).collect();
            samples.push((x, k));
        }
    }
    samples.shuffle(&mut rng);
    let n_train = samples.len() * 4 / 5;
    let test = samples.split_off(n_train);
    let (f, l): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let train = Dataset::new(f, l, cfg.classes, Split::Train)?;
    let (f, l): (Vec<_>, Vec<_>) = test.into_iter().unzip();
    let test = Dataset::new(f, l, cfg.classes, Split::Test)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<AffineLayer> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
    AffineLayer::new(w, Array1::zeros(fan_out))
}

/// Mean softmax cross-entropy of `logits` rows against `labels`, and the
/// gradient with respect to the logits (already divided by the batch size).
fn softmax_xent(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, mut row) in grad.axis_iter_mut(Axis(0)).enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let target = row[labels[r]];
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
        loss += m + s.ln() - target;
        row[labels[r]] -= 1.0;
    }
    grad /= b as f64;
    (loss / b as f64, grad)
}

/// Train a ReLU MLP with minibatch SGD (momentum) on softmax cross-entropy.
/// Single-threaded and deterministic for a given seed.
pub fn train_mlp(data: &Dataset, cfg: &TrainConfig) -> Result<MlpNetwork> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidParameter("invalid training hyper-parameters".into()));
    }
    if cfg.hidden.contains(&0) {
        return Err(Error::InvalidParameter("hidden widths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![data.dim()];
    dims.extend(&cfg.hidden);
    dims.push(data.num_classes);
    let mut layers = dims
        .windows(2)
        .map(|w| he_uniform(&mut rng, w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    let mut vel: Vec<(Array2<f64>, Array1<f64>)> = layers
        .iter()
        .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
        .collect();
    let x_all = Array2::from_shape_fn((data.len(), data.dim()), |(i, j)| data.features[i][j]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = x_all.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            // Forward, keeping post-activation inputs of each layer.
            let mut inputs = Vec::with_capacity(layers.len());
            let mut a = x;
            for (k, layer) in layers.iter().enumerate() {
                let z = a.dot(&layer.weight.t()) + &layer.bias;
                inputs.push(a);
                a = if k + 1 < layers.len() { z.mapv(|v| v.max(0.0)) } else { z };
            }
            let (loss, mut delta) = softmax_xent(&a, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            for k in (0..layers.len()).rev() {
                let gw = delta.t().dot(&inputs[k]);
                let gb = delta.sum_axis(Axis(0));
                if k > 0 {
                    let mask = inputs[k].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    delta = delta.dot(&layers[k].weight) * mask;
                }
                let (vw, vb) = &mut vel[k];
                vw.zip_mut_with(&gw, |v, g| *v = cfg.momentum * *v - cfg.learning_rate * g);
                vb.zip_mut_with(&gb, |v, g| *v = cfg.momentum * *v - cfg.learning_rate * g);
                layers[k].weight += &*vw;
                layers[k].bias += &*vb;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || layers.iter().any(|l| l.weight.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.5}");
    }
    MlpNetwork::new(layers)
}
