//! Labeled datasets, their sources, and the persistent synthetic set.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use crate::util::sha256_hex;

/// Images (or feature vectors) with integer labels and optional per-sample
/// difficulty scores. Higher score means harder.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    /// `[n, ...sample_shape]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub scores: Option<Vec<f64>>,
    pub num_classes: usize,
    pub origin: String,
}

impl LabeledSet {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        origin: impl Into<String>,
    ) -> Result<Self> {
        let set = LabeledSet {
            images,
            labels,
            scores: None,
            num_classes,
            origin: origin.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.shape().first().copied().unwrap_or(0);
        if n != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                n,
                self.labels.len()
            )));
        }
        if let Some(s) = &self.scores {
            if s.len() != n {
                return Err(Error::Shape(format!("{n} samples but {} scores", s.len())));
            }
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Invalid(format!(
                "label {y} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Rows `idx` in the given order; scores follow along.
    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            scores: self.scores.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            num_classes: self.num_classes,
            origin: self.origin.clone(),
        }
    }

    pub fn with_scores(mut self, scores: Vec<f64>) -> Result<Self> {
        self.scores = Some(scores);
        self.validate()?;
        Ok(self)
    }

    /// Hash of labels and pixel bits.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.images.numel() * 8 + self.labels.len() * 8);
        for v in self.images.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &y in &self.labels {
            bytes.extend_from_slice(&(y as u64).to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = DatasetHeader {
            shape: self.images.shape().to_vec(),
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            scores: self.scores.clone(),
            origin: self.origin.clone(),
        };
        container::write_file(path, DATASET_MAGIC, &header, self.images.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (DatasetHeader, _) =
            container::read_file(path, DATASET_MAGIC, |h: &DatasetHeader| numel(&h.shape))?;
        let set = LabeledSet {
            images: Tensor::new(h.shape, payload)?,
            labels: h.labels,
            scores: h.scores,
            num_classes: h.num_classes,
            origin: h.origin,
        };
        set.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(set)
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"SMDS";
pub const SYNTH_MAGIC: &[u8; 4] = b"SMSY";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    shape: Vec<usize>,
    num_classes: usize,
    labels: Vec<usize>,
    scores: Option<Vec<f64>>,
    origin: String,
}

// ── Gaussian blobs ──────────────────────────────────────────────────

/// Class-conditional Gaussian source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub classes: usize,
    /// `[d]` for vectors or `[c, h, w]` for images.
    pub shape: Vec<usize>,
    /// Global noise multiplier; zero places every sample on its class mean.
    pub spread: f64,
    /// RMS magnitude of each class mean.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Log-scale standard deviation of the per-sample noise multiplier.
    #[serde(default = "default_heterogeneity")]
    pub heterogeneity: f64,
    /// Fraction of samples, taken from the noisiest, whose label is replaced
    /// by a different class.
    #[serde(default)]
    pub label_noise: f64,
    /// Sub-clusters per class; mode `k` is drawn with weight `mode_decay^k`,
    /// so later modes are rare.
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_mode_decay")]
    pub mode_decay: f64,
    /// Seed for the class means.
    #[serde(default)]
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.0
}

fn default_heterogeneity() -> f64 {
    0.5
}

fn default_modes() -> usize {
    1
}

fn default_mode_decay() -> f64 {
    0.5
}

impl BlobConfig {
    pub fn new(classes: usize, shape: Vec<usize>, spread: f64, seed: u64) -> Self {
        BlobConfig {
            classes,
            shape,
            spread,
            separation: default_separation(),
            heterogeneity: default_heterogeneity(),
            label_noise: 0.0,
            modes: default_modes(),
            mode_decay: default_mode_decay(),
            seed,
        }
    }
}

/// Fixed class means from which independent splits are drawn.
#[derive(Clone, Debug)]
pub struct BlobSource {
    pub config: BlobConfig,
    /// `means[class][mode]`
    pub means: Vec<Vec<Vec<f64>>>,
}

impl BlobSource {
    pub fn new(config: BlobConfig) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::Invalid("blobs need at least 2 classes".into()));
        }
        if config.shape.is_empty() || config.shape.contains(&0) {
            return Err(Error::Invalid(format!("bad blob shape {:?}", config.shape)));
        }
        if !(0.0..=1.0).contains(&config.label_noise) {
            return Err(Error::Invalid("label_noise must lie in [0, 1]".into()));
        }
        if config.modes == 0 || !(config.mode_decay > 0.0 && config.mode_decay <= 1.0) {
            return Err(Error::Invalid("modes must be positive and mode_decay in (0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let means = (0..config.classes)
            .map(|_| (0..config.modes).map(|_| {
                let mut m = match config.shape[..] {
                    [c, h, w] => smooth_symmetric_pattern(c, h, w, &mut rng),
                    _ => (0..numel(&config.shape))
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                };
                let rms = (m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64).sqrt();
                for v in &mut m {
                    *v *= config.separation / rms;
                }
                m
            }).collect())
            .collect();
        Ok(BlobSource { config, means })
    }

    /// `n_per_class` samples per class, class-major order. The generator's
    /// per-sample noise multiplier is stored as the difficulty score.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<LabeledSet> {
        let cfg = &self.config;
        let d = numel(&cfg.shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_B10B);
        let scale = LogNormal::new(0.0, cfg.heterogeneity.max(0.0))
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let n = cfg.classes * n_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        let weights: Vec<f64> = (0..cfg.modes).map(|k| cfg.mode_decay.powi(k as i32)).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Invalid(e.to_string()))?;
        for (c, modes) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                let mean = &modes[if cfg.modes > 1 { pick.sample(&mut rng) } else { 0 }];
                let s = cfg.spread * scale.sample(&mut rng);
                for &m in mean {
                    data.push(m + s * rng.sample::<f64, _>(StandardNormal));
                }
                labels.push(c);
                noise.push(s);
            }
        }
        let flips = (cfg.label_noise * n as f64).round() as usize;
        if flips > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| noise[b].total_cmp(&noise[a]).then(a.cmp(&b)));
            for &i in &order[..flips] {
                let shift = rng.random_range(1..cfg.classes);
                labels[i] = (labels[i] + shift) % cfg.classes;
            }
        }
        let mut shape = vec![n];
        shape.extend(&cfg.shape);
        LabeledSet::new(Tensor::new(shape, data)?, labels, cfg.classes, "blobs")?.with_scores(noise)
    }
}

/// Sum of a few Gaussian bumps per channel, mirrored left-right so that a
/// horizontal flip maps every class mean onto itself.
fn smooth_symmetric_pattern(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let amp: f64 = rng.sample(StandardNormal);
            let width = rng.random_range(0.15..0.35) * h.max(w) as f64;
            for y in 0..h {
                for x in 0..w {
                    let mirror = (w - 1 - x) as f64;
                    let g = |px: f64| {
                        let d2 = (y as f64 - cy).powi(2) + (px - cx).powi(2);
                        (-d2 / (2.0 * width * width)).exp()
                    };
                    out[(ch * h + y) * w + x] += amp * (g(x as f64) + g(mirror));
                }
            }
        }
    }
    out
}

/// Convenience: one set from a fresh source.
pub fn gen_blobs(classes: usize, n_per_class: usize, shape: Vec<usize>, spread: f64, seed: u64) -> Result<LabeledSet> {
    BlobSource::new(BlobConfig::new(classes, shape, spread, seed))?.sample(n_per_class, seed)
}

// ── IDX files ───────────────────────────────────────────────────────

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, format!("truncated at offset {offset}")))
}

/// Raw IDX image file: `([n, h, w], bytes)`.
pub fn read_idx_images(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(path, &bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, format!("bad magic {magic:#010x} at offset 0")));
    }
    let n = be_u32(path, &bytes, 4)? as usize;
    let h = be_u32(path, &bytes, 8)? as usize;
    let w = be_u32(path, &bytes, 12)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated at offset {}: {n} images of {h}x{w} need {need} bytes", bytes.len()),
        ));
    }
    Ok((vec![n, h, w], bytes[16..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(path, &bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, format!("bad magic {magic:#010x} at offset 0")));
    }
    let n = be_u32(path, &bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(
            path,
            format!("truncated at offset {}: {n} labels need {} bytes", bytes.len(), 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Per-channel standardization fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Channels are axis 1 of `[n, c, ...]`; 3-D `[n, h, w]` is one channel.
    fn channels(images: &Tensor) -> (usize, usize, usize) {
        let s = images.shape();
        match s.len() {
            4 => (s[0], s[1], s[2] * s[3]),
            _ => (s[0], 1, numel(&s[1..])),
        }
    }

    pub fn fit(images: &Tensor) -> Self {
        let (n, c, inner) = Self::channels(images);
        let d = images.data();
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let it = || (0..n).flat_map(move |i| d[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter());
            let m = it().sum::<f64>() / count;
            let v = it().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[ch] = m;
            std[ch] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, images: &mut Tensor) {
        let (n, c, inner) = Self::channels(images);
        let d = images.data_mut();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut d[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }
}

/// IDX pair scaled to `[0, 1]`, without standardization.
pub fn load_idx_raw(images: &Path, labels: &Path) -> Result<LabeledSet> {
    let (shape, pixels) = read_idx_images(images)?;
    let ys = read_idx_labels(labels)?;
    if ys.len() != shape[0] {
        return Err(Error::format(
            labels,
            format!("{} labels but {} images in {}", ys.len(), shape[0], images.display()),
        ));
    }
    if shape[0] == 0 {
        return Err(Error::format(images, "no images"));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    LabeledSet::new(Tensor::new(shape, data)?, labels, classes, "idx")
}

/// Loads an IDX pair and standardizes it with its own per-channel statistics.
/// Returns the fitted standardizer so a test split can reuse it.
pub fn load_idx(images: &Path, labels: &Path) -> Result<(LabeledSet, Standardizer)> {
    let mut set = load_idx_raw(images, labels)?;
    let st = Standardizer::fit(&set.images);
    st.apply(&mut set.images);
    Ok((set, st))
}

// ── synthetic state ─────────────────────────────────────────────────

/// The learnable synthetic set: `D_select` rows (frozen) plus `D_distill`
/// rows (learnable), a learnable student step size, and where each row came
/// from in the real set.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticState {
    /// `[ipc * classes, ...sample_shape]`
    pub pixels: Tensor,
    pub labels: Vec<usize>,
    pub frozen: Vec<bool>,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub ipc: usize,
    pub num_classes: usize,
    /// Index into the real set each row was initialized from.
    pub provenance: Vec<Option<usize>>,
    /// Distillation iteration this state was taken after (0 = initialization).
    pub iteration: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthHeader {
    shape: Vec<usize>,
    num_classes: usize,
    ipc: usize,
    alpha: f64,
    beta: f64,
    frozen_mask: Vec<bool>,
    labels: Vec<usize>,
    provenance: Vec<Option<usize>>,
    eta: f64,
    iteration: u64,
    config_hash: String,
}

impl SyntheticState {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.pixels.shape().first() != Some(&n)
            || self.frozen.len() != n
            || self.provenance.len() != n
        {
            return Err(Error::Shape(format!(
                "synthetic state: pixels {:?}, {} labels, {} mask bits, {} provenance",
                self.pixels.shape(),
                n,
                self.frozen.len(),
                self.provenance.len()
            )));
        }
        if n != self.ipc * self.num_classes {
            return Err(Error::Invalid(format!(
                "{n} rows but ipc {} x {} classes",
                self.ipc, self.num_classes
            )));
        }
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            *counts.get_mut(y).ok_or_else(|| Error::Invalid(format!("label {y} out of range")))? += 1;
        }
        if counts.iter().any(|&c| c != self.ipc) {
            return Err(Error::Invalid(format!("labels not class-balanced: {counts:?}")));
        }
        if self.eta.is_nan() || self.eta <= 0.0 {
            return Err(Error::Invalid(format!("step size must be positive, got {}", self.eta)));
        }
        Ok(())
    }

    pub fn select_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.frozen[i]).collect()
    }

    pub fn distill_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.frozen[i]).collect()
    }

    /// Hash over the pixel bits of the frozen rows.
    pub fn frozen_hash(&self) -> String {
        let mut bytes = Vec::new();
        for i in self.select_indices() {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
            for v in self.pixels.row(i) {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn as_labeled_set(&self) -> LabeledSet {
        LabeledSet {
            images: self.pixels.clone(),
            labels: self.labels.clone(),
            scores: None,
            num_classes: self.num_classes,
            origin: "synthetic".into(),
        }
    }

    fn header(&self) -> SynthHeader {
        SynthHeader {
            shape: self.pixels.shape().to_vec(),
            num_classes: self.num_classes,
            ipc: self.ipc,
            alpha: self.alpha,
            beta: self.beta,
            frozen_mask: self.frozen.clone(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
            eta: self.eta,
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        container::encode(SYNTH_MAGIC, &self.header(), self.pixels.data())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (h, payload): (SynthHeader, _) =
            container::decode(path, SYNTH_MAGIC, bytes, |h: &SynthHeader| numel(&h.shape))?;
        let state = SyntheticState {
            pixels: Tensor::new(h.shape, payload)?,
            labels: h.labels,
            frozen: h.frozen_mask,
            eta: h.eta,
            alpha: h.alpha,
            beta: h.beta,
            ipc: h.ipc,
            num_classes: h.num_classes,
            provenance: h.provenance,
            iteration: h.iteration,
            config_hash: h.config_hash,
        };
        state.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        container::write_file(path, SYNTH_MAGIC, &self.header(), self.pixels.data())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

/// `count` distinct indices per class drawn uniformly, class-interleaved.
pub fn random_per_class(labels: &[usize], classes: usize, count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        per[y].push(i);
    }
    for (c, idx) in per.iter_mut().enumerate() {
        if idx.len() < count {
            return Err(Error::Invalid(format!(
                "class {c} has {} samples, {count} requested",
                idx.len()
            )));
        }
        idx.shuffle(rng);
        idx.truncate(count);
    }
    Ok((0..count).flat_map(|k| per.iter().map(move |p| p[k])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> SyntheticState {
        let pixels = Tensor::new(vec![4, 1, 2, 2], (0..16).map(|v| v as f64 * 0.1).collect()).unwrap();
        SyntheticState {
            pixels,
            labels: vec![0, 1, 0, 1],
            frozen: vec![true, true, false, false],
            eta: 0.01,
            alpha: 0.5,
            beta: 0.25,
            ipc: 2,
            num_classes: 2,
            provenance: vec![Some(3), Some(7), Some(1), None],
            iteration: 0,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn blob_counts_and_determinism() {
        let a = gen_blobs(2, 50, vec![3], 1.0, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_counts(), vec![50, 50]);
        let b = gen_blobs(2, 50, vec![3], 1.0, 7).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn zero_spread_puts_samples_on_means() {
        let src = BlobSource::new(BlobConfig::new(3, vec![1, 4, 4], 0.0, 2)).unwrap();
        let s = src.sample(5, 1).unwrap();
        for i in 0..s.len() {
            assert!(src.means[s.labels[i]].iter().any(|m| s.images.row(i) == m.as_slice()));
        }
    }

    #[test]
    fn image_means_are_mirror_symmetric() {
        let src = BlobSource::new(BlobConfig::new(2, vec![2, 6, 6], 1.0, 4)).unwrap();
        for m in src.means.iter().flatten() {
            for ch in 0..2 {
                for y in 0..6 {
                    for x in 0..6 {
                        let a = m[(ch * 6 + y) * 6 + x];
                        let b = m[(ch * 6 + y) * 6 + 5 - x];
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn label_noise_hits_the_noisiest_samples() {
        let mut cfg = BlobConfig::new(3, vec![4], 1.0, 1);
        cfg.label_noise = 0.1;
        let src = BlobSource::new(cfg).unwrap();
        let s = src.sample(20, 3).unwrap();
        let clean = BlobSource::new(BlobConfig { label_noise: 0.0, ..src.config.clone() })
            .unwrap()
            .sample(20, 3)
            .unwrap();
        let noise = s.scores.clone().unwrap();
        let flipped: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] != clean.labels[i]).collect();
        assert_eq!(flipped.len(), 6);
        let threshold = flipped.iter().map(|&i| noise[i]).fold(f64::INFINITY, f64::min);
        let above = noise.iter().filter(|&&v| v >= threshold).count();
        assert_eq!(above, 6);
    }

    #[test]
    fn synthetic_round_trip_is_bit_identical() {
        let s = state();
        let bytes = s.to_bytes().unwrap();
        let back = SyntheticState::from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.eta.to_bits(), s.eta.to_bits());
    }

    #[test]
    fn tampered_payload_length_rejected() {
        let mut bytes = state().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = SyntheticState::from_bytes(Path::new("mem"), &bytes).unwrap_err();
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn version_two_refused() {
        let mut bytes = state().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = SyntheticState::from_bytes(Path::new("mem"), &bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");
    }

    #[test]
    fn unbalanced_state_rejected() {
        let mut s = state();
        s.labels = vec![0, 0, 0, 1];
        assert!(s.validate().is_err());
    }

    #[test]
    fn standardizer_zeroes_mean_and_unit_std() {
        let mut set = gen_blobs(2, 30, vec![3, 4, 4], 2.0, 5).unwrap();
        for v in set.images.data_mut() {
            *v = *v * 3.0 + 1.5;
        }
        let st = Standardizer::fit(&set.images);
        st.apply(&mut set.images);
        let again = Standardizer::fit(&set.images);
        for (m, s) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() <= 1e-9, "{m}");
            assert!((s - 1.0).abs() <= 1e-6, "{s}");
        }
    }

    #[test]
    fn random_per_class_is_balanced() {
        let set = gen_blobs(3, 10, vec![2], 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = random_per_class(&set.labels, 3, 4, &mut rng).unwrap();
        let sub = set.subset(&idx);
        assert_eq!(sub.class_counts(), vec![4, 4, 4]);
        assert_eq!(sub.labels[..3], [0, 1, 2]);
    }
}
