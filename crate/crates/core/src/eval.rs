//! Evaluation under an equalized training budget, feature-space coverage and
//! per-partition gradient norms.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugMode, AugPolicy};
use crate::data::{LabeledSet, SyntheticState};
use crate::error::{Error, Result};
use crate::nets::{self, init_params, NetSpec, NormStats};
use crate::table::Table;
use crate::tensor::{sq_dist, Tensor};
use crate::train::{self, batch_gradient, LrSchedule, TrainConfig, TrainState};
use crate::util::{mean, std_dev};

/// Full-data epochs whose step count the reduced-set training matches.
pub const REFERENCE_EPOCHS: f64 = 200.0;
pub const BUDGET_FRACTION: f64 = 0.25;

/// Epochs on a reduced set so that it receives the same number of sample
/// visits as a quarter of a 200-epoch full-data run.
pub fn budget_epochs(n_real: usize, n_reduced: usize) -> usize {
    (BUDGET_FRACTION * REFERENCE_EPOCHS * n_real as f64 / n_reduced as f64).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Budget {
    /// The equalized budget.
    Full,
    /// A fraction of the equalized budget, for cheap searches.
    Few { fraction: f64 },
    Epochs { epochs: usize },
}

impl Budget {
    pub fn epochs(self, n_real: usize, n_reduced: usize) -> usize {
        match self {
            Budget::Full => budget_epochs(n_real, n_reduced),
            Budget::Few { fraction } => ((budget_epochs(n_real, n_reduced) as f64 * fraction).round() as usize).max(1),
            Budget::Epochs { epochs } => epochs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub budget: Budget,
    /// Augmentation for the reduced set; combined routes frozen rows to the
    /// simple path and learnable rows to the differentiable one.
    pub aug: AugMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            budget: Budget::Full,
            aug: AugMode::Combined,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub test_acc: f64,
    pub easy_acc: Option<f64>,
    pub hard_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub epochs: usize,
    pub per_seed: Vec<SeedResult>,
}

impl EvalResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.test_acc).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.accuracies())
    }

    pub fn std(&self) -> f64 {
        std_dev(&self.accuracies())
    }

    fn group_mean(&self, f: impl Fn(&SeedResult) -> Option<f64>) -> Option<f64> {
        let v: Option<Vec<f64>> = self.per_seed.iter().map(f).collect();
        v.map(|v| mean(&v))
    }

    pub fn easy_mean(&self) -> Option<f64> {
        self.group_mean(|s| s.easy_acc)
    }

    pub fn hard_mean(&self) -> Option<f64> {
        self.group_mean(|s| s.hard_acc)
    }

    pub fn to_table(&self) -> Table {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut t = Table::new(&["seed", "test_acc", "easy_acc", "hard_acc", "epochs"]);
        for s in &self.per_seed {
            t.push(vec![
                s.seed.to_string(),
                s.test_acc.to_string(),
                opt(s.easy_acc),
                opt(s.hard_acc),
                self.epochs.to_string(),
            ]);
        }
        t
    }
}

/// A reduced training set and the rows that count as real (frozen) for
/// augmentation routing.
pub struct Reduced {
    pub set: LabeledSet,
    pub frozen: Vec<bool>,
}

impl Reduced {
    /// A subset of real samples: every row takes the simple path.
    pub fn real(set: LabeledSet) -> Self {
        let frozen = vec![true; set.len()];
        Reduced { set, frozen }
    }

    pub fn synthetic(state: &SyntheticState) -> Self {
        Reduced {
            set: state.as_labeled_set(),
            frozen: state.frozen.clone(),
        }
    }
}

/// Trains a fresh network per seed on `reduced` and scores it on `test`.
/// `hard` marks test samples of the hard group for the easy/hard breakdown.
pub fn evaluate(
    spec: &NetSpec,
    reduced: &Reduced,
    test: &LabeledSet,
    n_real: usize,
    cfg: &EvalConfig,
    seeds: &[u64],
    hard: Option<&[bool]>,
) -> Result<EvalResult> {
    if reduced.set.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty reduced set".into()));
    }
    if let Some(h) = hard {
        if h.len() != test.len() {
            return Err(Error::Shape(format!("{} group flags for {} test samples", h.len(), test.len())));
        }
    }
    let epochs = cfg.budget.epochs(n_real, reduced.set.len());
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let tc = TrainConfig {
                epochs,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                schedule: LrSchedule::Cosine,
                aug: AugPolicy::new(cfg.aug),
                seed,
            };
            let init = init_params(spec, seed)?.flat;
            let s = train::train(spec, &reduced.set, Some(&reduced.frozen), &tc, TrainState::fresh(init), |_, _| Ok(()))?;
            let stats = nets::calibrate_norm_stats(spec, &s.params, &reduced.set.images)?;
            let (logits, _) = nets::infer(spec, &s.params, &stats, &test.images, 256)?;
            let correct = train::correctness(&logits, &test.labels);
            let frac = |keep: &dyn Fn(usize) -> bool| {
                let (mut k, mut c) = (0usize, 0usize);
                for (i, &ok) in correct.iter().enumerate() {
                    if keep(i) {
                        k += 1;
                        c += usize::from(ok);
                    }
                }
                (k > 0).then(|| c as f64 / k as f64)
            };
            Ok(SeedResult {
                seed,
                test_acc: frac(&|_| true).unwrap_or(0.0),
                easy_acc: hard.and_then(|h| frac(&|i| !h[i])),
                hard_acc: hard.and_then(|h| frac(&|i| h[i])),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult { epochs, per_seed })
}

// ── coverage ────────────────────────────────────────────────────────

/// Marks samples whose score is above the median as hard; ties go to easy.
pub fn median_split(scores: &[f64]) -> Vec<bool> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    scores.iter().map(|&v| v > median).collect()
}

fn rows(features: &Tensor) -> Vec<&[f64]> {
    (0..features.shape()[0]).map(|i| features.row(i)).collect()
}

/// Mean Euclidean distance from each sample to its nearest other sample.
pub fn nn_radius(train_features: &Tensor) -> Result<f64> {
    let f = rows(train_features);
    if f.len() < 2 {
        return Err(Error::Invalid("radius needs at least two training samples".into()));
    }
    let nearest: Vec<f64> = (0..f.len())
        .into_par_iter()
        .map(|i| {
            (0..f.len())
                .filter(|&j| j != i)
                .map(|j| sq_dist(f[i], f[j]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    Ok(nearest.iter().sum::<f64>() / f.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub radius: f64,
    pub overall: f64,
    pub easy: Option<f64>,
    pub hard: Option<f64>,
    pub n_easy: usize,
    pub n_hard: usize,
    pub extractor: String,
}

/// Fraction of reference samples within `radius` of some synthetic feature.
pub fn coverage(
    reference: &Tensor,
    synthetic: &Tensor,
    radius: f64,
    hard: Option<&[bool]>,
    extractor: &str,
) -> Result<CoverageReport> {
    let r = rows(reference);
    let s = rows(synthetic);
    if s.is_empty() {
        return Err(Error::Invalid("coverage of an empty synthetic set".into()));
    }
    if r.is_empty() {
        return Err(Error::Invalid("coverage needs reference samples".into()));
    }
    if let Some(h) = hard {
        if h.len() != r.len() {
            return Err(Error::Shape(format!("{} group flags for {} reference samples", h.len(), r.len())));
        }
    }
    let covered: Vec<bool> = r
        .par_iter()
        .map(|x| s.iter().any(|y| sq_dist(x, y).sqrt() <= radius))
        .collect();
    let frac = |keep: &dyn Fn(usize) -> bool| {
        let (mut k, mut c) = (0usize, 0usize);
        for (i, &ok) in covered.iter().enumerate() {
            if keep(i) {
                k += 1;
                c += usize::from(ok);
            }
        }
        (k, (k > 0).then(|| c as f64 / k as f64))
    };
    let (_, overall) = frac(&|_| true);
    let (n_easy, easy) = hard.map_or((0, None), |h| frac(&|i| !h[i]));
    let (n_hard, hard_cov) = hard.map_or((0, None), |h| frac(&|i| h[i]));
    Ok(CoverageReport {
        radius,
        overall: overall.unwrap_or(0.0),
        easy,
        hard: hard_cov,
        n_easy,
        n_hard,
        extractor: extractor.to_string(),
    })
}

/// Penultimate-layer features under a fixed network.
pub struct FeatureNet {
    pub spec: NetSpec,
    pub params: Tensor,
    pub stats: NormStats,
    pub id: String,
}

impl FeatureNet {
    /// Uses `params` with normalization statistics calibrated on `calib`.
    pub fn new(spec: NetSpec, params: Tensor, calib: &Tensor, id: String) -> Result<Self> {
        let stats = nets::calibrate_norm_stats(&spec, &params, calib)?;
        Ok(FeatureNet { spec, params, stats, id })
    }

    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(nets::infer(&self.spec, &self.params, &self.stats, images, 256)?.1)
    }
}

pub fn feature_table(features: &Tensor, labels: &[usize]) -> Table {
    let d = features.shape()[1];
    let mut header = vec!["index".to_string(), "label".to_string()];
    header.extend((0..d).map(|k| format!("f{k}")));
    let mut t = Table {
        header,
        ..Default::default()
    };
    for (i, &y) in labels.iter().enumerate() {
        let mut row = vec![i.to_string(), y.to_string()];
        row.extend(features.row(i).iter().map(|v| v.to_string()));
        t.push(row);
    }
    t
}

/// Coverage of every SMSY checkpoint in `dir`, ordered by iteration.
pub fn coverage_timeline(
    dir: &Path,
    net: &FeatureNet,
    reference: &Tensor,
    radius: f64,
    hard: Option<&[bool]>,
) -> Result<Vec<(u64, CoverageReport)>> {
    let ref_features = net.features(reference)?;
    let mut out = Vec::new();
    for path in checkpoint_files(dir)? {
        let state = SyntheticState::load(&path)?;
        let feats = net.features(&state.pixels)?;
        out.push((state.iteration, coverage(&ref_features, &feats, radius, hard, &net.id)?));
    }
    out.sort_by_key(|(it, _)| *it);
    Ok(out)
}

pub fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "smsy"))
        .collect();
    files.sort();
    Ok(files)
}

// ── gradient norms ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct GradNormRow {
    pub seed: u64,
    pub epoch: usize,
    pub select: Option<f64>,
    pub distill: Option<f64>,
}

pub fn partition_grad_norm(spec: &NetSpec, params: &Tensor, set: &LabeledSet, idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
    let (_, g, _) = batch_gradient(spec, params, &set.images.select_rows(idx), &labels)?;
    Ok(Some(g.norm_sq().sqrt()))
}

/// Trains on the whole synthetic set and records, after every epoch, the
/// parameter-gradient norm of each partition.
pub fn grad_norm_profile(
    state: &SyntheticState,
    spec: &NetSpec,
    cfg: &EvalConfig,
    epochs: usize,
    seeds: &[u64],
) -> Result<Vec<GradNormRow>> {
    let set = state.as_labeled_set();
    let (sel, dis) = (state.select_indices(), state.distill_indices());
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let tc = TrainConfig {
                epochs,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
                schedule: LrSchedule::Cosine,
                aug: AugPolicy::new(cfg.aug),
                seed,
            };
            let init = init_params(spec, seed)?.flat;
            let mut rows = vec![GradNormRow {
                seed,
                epoch: 0,
                select: partition_grad_norm(spec, &init, &set, &sel)?,
                distill: partition_grad_norm(spec, &init, &set, &dis)?,
            }];
            train::train(spec, &set, Some(&state.frozen), &tc, TrainState::fresh(init), |s, _| {
                rows.push(GradNormRow {
                    seed,
                    epoch: s.epoch,
                    select: partition_grad_norm(spec, &s.params, &set, &sel)?,
                    distill: partition_grad_norm(spec, &s.params, &set, &dis)?,
                });
                Ok(())
            })?;
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn grad_norm_table(rows: &[GradNormRow]) -> Table {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut t = Table::new(&["seed", "epoch", "grad_norm_select", "grad_norm_distill"]);
    for r in rows {
        t.push(vec![r.seed.to_string(), r.epoch.to_string(), opt(r.select), opt(r.distill)]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use crate::nets::NormMode;

    #[test]
    fn paper_epoch_counts() {
        assert_eq!(budget_epochs(1000, 50), 1000);
        assert_eq!(budget_epochs(1000, 100), 500);
        assert_eq!(budget_epochs(1000, 200), 250);
        assert_eq!(budget_epochs(1000, 300), 167);
        assert_eq!(budget_epochs(1000, 1000), 50);
    }

    #[test]
    fn median_ties_go_easy() {
        assert_eq!(median_split(&[1.0, 2.0, 2.0, 3.0]), vec![false, false, false, true]);
        assert_eq!(median_split(&[5.0, 5.0, 5.0]), vec![false; 3]);
        assert_eq!(median_split(&[1.0, 4.0, 2.0, 3.0]), vec![false, true, false, true]);
    }

    #[test]
    fn coverage_anchor_cases() {
        let real = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = nn_radius(&real).unwrap();
        assert_eq!(r, 1.0);
        let same = coverage(&real, &real, r, None, "x").unwrap();
        assert_eq!(same.overall, 1.0);
        let far = Tensor::new(vec![1, 2], vec![1e9, 1e9]).unwrap();
        assert_eq!(coverage(&real, &far, r, None, "x").unwrap().overall, 0.0);
        let hard = [false, true, false, true];
        let half = Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap();
        let c = coverage(&real, &half, r, Some(&hard), "x").unwrap();
        assert_eq!(c.overall, 0.25);
        assert_eq!((c.easy, c.hard), (Some(0.5), Some(0.0)));
        assert_eq!(c.overall, (c.easy.unwrap() + c.hard.unwrap()) / 2.0);
    }

    #[test]
    fn copied_partitions_have_equal_norms() {
        let set = gen_blobs(2, 2, vec![1, 4, 4], 0.5, 0).unwrap();
        let mut pixels = set.images.clone();
        let row = pixels.row_len();
        let d = pixels.data_mut();
        d.copy_within(0..2 * row, 2 * row);
        let state = SyntheticState {
            pixels,
            labels: vec![0, 1, 0, 1],
            frozen: vec![true, true, false, false],
            eta: 0.01,
            alpha: 0.5,
            beta: 0.0,
            ipc: 2,
            num_classes: 2,
            provenance: vec![None; 4],
            iteration: 0,
            config_hash: String::new(),
        };
        let spec = NetSpec::mlp(vec![5], NormMode::None, 2, vec![1, 4, 4]);
        let cfg = EvalConfig {
            aug: AugMode::None,
            ..Default::default()
        };
        for r in grad_norm_profile(&state, &spec, &cfg, 3, &[0]).unwrap() {
            let (a, b) = (r.select.unwrap(), r.distill.unwrap());
            assert!(a > 0.0 && (a - b).abs() <= 1e-9 * a.max(1.0), "{r:?}");
        }
    }
}
