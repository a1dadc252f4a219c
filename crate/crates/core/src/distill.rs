//! Trajectory matching with partial updates.
//!
//! Each iteration samples an expert segment `(θ*_t, θ*_{t+M})`, unrolls `N`
//! plain-SGD student steps from `θ*_t` on minibatches of the synthetic set,
//! and descends the normalized endpoint distance with respect to the
//! learnable rows and the student step size `η`. `N` counts student steps,
//! `M` expert epochs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::augment::{self, AugMode, AugPolicy};
use crate::data::{random_per_class, LabeledSet, SyntheticState};
use crate::error::{Error, Result};
use crate::expert::{sample_segment, Segment, TrajectoryBank};
use crate::nets::{self, Mode, NetSpec};
use crate::select::{difficulty_order, window_subset, WindowSpec};
use crate::table::Table;
use crate::tensor::Tensor;
use crate::util::rng_for;

pub const ETA_FLOOR: f64 = 1e-8;
/// Smallest admissible `‖θ*_t − θ*_{t+M}‖²`.
pub const DEGENERATE_DENOM: f64 = 1e-24;
/// Consecutive non-finite iterations tolerated before the run fails.
pub const MAX_NONFINITE_STREAK: usize = 10;

const ITER_STREAM: u64 = 11;
const INIT_STREAM: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Window initialization, frozen hard front, whole set in the unroll.
    Selmatch,
    /// Every row learnable.
    MttFull,
    /// Only the learnable rows enter the unroll; frozen rows are appended.
    Merge,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Window,
    Random,
}

fn default_aug() -> AugPolicy {
    AugPolicy::new(AugMode::Combined)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub baseline: Baseline,
    /// Defaults to random for `mtt_full`, window otherwise.
    #[serde(default)]
    pub init: Option<InitKind>,
    pub iterations: usize,
    /// `N`, student steps per iteration.
    pub syn_steps: usize,
    /// `M`, expert epochs spanned by a segment.
    pub expert_epochs: usize,
    /// `T⁺`, largest sampled start epoch.
    pub max_start_epoch: usize,
    pub batch_syn: usize,
    pub pixel_lr: f64,
    pub eta_init: f64,
    /// Defaults to `pixel_lr × 1e-4`.
    #[serde(default)]
    pub eta_lr: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub ipc: usize,
    #[serde(default = "default_aug")]
    pub aug: AugPolicy,
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Record wall-clock time per iteration; off keeps metrics byte-stable.
    #[serde(default)]
    pub timing: bool,
}

impl DistillConfig {
    pub fn eta_lr(&self) -> f64 {
        self.eta_lr.unwrap_or(self.pixel_lr * 1e-4)
    }

    pub fn init_kind(&self) -> InitKind {
        self.init.unwrap_or(match self.baseline {
            Baseline::MttFull => InitKind::Random,
            _ => InitKind::Window,
        })
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.syn_steps == 0 {
            return bad("syn_steps must be at least 1".into());
        }
        if self.expert_epochs == 0 || self.ipc == 0 || self.batch_syn == 0 || self.checkpoint_every == 0 {
            return bad("expert_epochs, ipc, batch_syn and checkpoint_every must be positive".into());
        }
        if self.batch_syn > self.ipc * classes {
            return bad(format!("batch_syn {} exceeds the {} synthetic rows", self.batch_syn, self.ipc * classes));
        }
        if !(self.pixel_lr >= 0.0 && self.eta_lr() >= 0.0 && self.eta_init > 0.0) {
            return bad("learning rates must be non-negative and eta_init positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad("alpha and beta must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// `‖θ̂ − θ*_{t+M}‖² / ‖θ*_t − θ*_{t+M}‖²`.
pub fn matching_loss(theta_hat: &[f64], start: &[f64], target: &[f64]) -> Result<f64> {
    if theta_hat.len() != start.len() || start.len() != target.len() {
        return Err(Error::Shape(format!(
            "matching loss over {}, {} and {} parameters",
            theta_hat.len(),
            start.len(),
            target.len()
        )));
    }
    let denom = crate::tensor::sq_dist(start, target);
    if denom < DEGENERATE_DENOM {
        return Err(Error::DegenerateSegment);
    }
    Ok(crate::tensor::sq_dist(theta_hat, target) / denom)
}

/// The same ratio on the tape, differentiable in `theta_hat`.
pub fn matching_loss_on_tape(tape: &Tape, theta_hat: &Var, start: &Tensor, target: &Tensor) -> Result<Var> {
    let denom = crate::tensor::sq_dist(start.data(), target.data());
    if denom < DEGENERATE_DENOM {
        return Err(Error::DegenerateSegment);
    }
    let diff = tape.sub(theta_hat, &Var::constant(target.clone()))?;
    let num = tape.l2_norm_sq(&diff)?;
    tape.scale(&num, 1.0 / denom)
}

/// Draws batches of `size` from `pool` without replacement, reshuffling when
/// fewer than `size` remain.
pub struct BatchSampler {
    pool: Vec<usize>,
    queue: Vec<usize>,
    size: usize,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, size: usize) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Invalid("no rows to sample student batches from".into()));
        }
        let size = size.min(pool.len());
        Ok(BatchSampler {
            pool,
            queue: Vec::new(),
            size,
        })
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> Vec<usize> {
        if self.queue.len() < self.size {
            self.queue = self.pool.clone();
            self.queue.shuffle(rng);
        }
        self.queue.split_off(self.queue.len() - self.size)
    }
}

/// What the student sees: network, labels, routing and the unroll pool.
pub struct Student<'a> {
    pub spec: &'a NetSpec,
    pub labels: &'a [usize],
    pub frozen: &'a [bool],
    pub pool: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub aug: AugPolicy,
}

impl Student<'_> {
    /// `N` SGD steps from `theta_start` (a fresh leaf), all on the tape so
    /// that the end point is differentiable in `pixels` and `eta`.
    pub fn unroll(&self, tape: &Tape, theta_start: &Tensor, pixels: &Var, eta: &Var, rng: &mut impl Rng) -> Result<Var> {
        let mut sampler = BatchSampler::new(self.pool.clone(), self.batch)?;
        let mut theta = tape.leaf(theta_start.clone());
        for _ in 0..self.steps {
            let idx = sampler.next(rng);
            let x = tape.select_rows(pixels, &idx)?;
            let flags: Vec<bool> = idx.iter().map(|&i| self.frozen[i]).collect();
            let (x, _) = augment::apply(tape, &self.aug, &x, Some(&flags), rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
            let loss = nets::loss_on_tape(tape, self.spec, &theta, &x, &labels, Mode::Train)?;
            let g = tape.backward(&loss, &[&theta], true)?.remove(0);
            let step = tape.mul_scalar(&g, eta)?;
            theta = tape.sub(&theta, &step)?;
        }
        Ok(theta)
    }

    /// Matching loss of iteration `iteration`: the segment, batch order and
    /// augmentation all come from the iteration's own stream.
    pub fn objective(
        &self,
        tape: &Tape,
        bank: &TrajectoryBank,
        cfg: &DistillConfig,
        pixels: &Var,
        eta: &Var,
        iteration: u64,
    ) -> Result<(Var, Segment)> {
        let mut rng = rng_for(cfg.seed, ITER_STREAM, iteration);
        let seg = sample_segment(bank, cfg.max_start_epoch, cfg.expert_epochs, &mut rng)?;
        let traj = &bank.trajectories[seg.trajectory];
        let (start, target) = (&traj[seg.t], &traj[seg.t + cfg.expert_epochs]);
        let end = self.unroll(tape, start, pixels, eta, &mut rng)?;
        Ok((matching_loss_on_tape(tape, &end, start, target)?, seg))
    }
}

/// Initial synthetic set. `scores` order the real set for window
/// initialization (higher is harder).
pub fn initialize(cfg: &DistillConfig, real: &LabeledSet, scores: &[f64], config_hash: &str) -> Result<SyntheticState> {
    let classes = real.num_classes;
    cfg.validate(classes)?;
    let alpha = if cfg.baseline == Baseline::MttFull { 1.0 } else { cfg.alpha };
    let (rows, frozen_count) = match cfg.init_kind() {
        InitKind::Window => {
            let order = difficulty_order(&real.labels, scores, classes)?;
            let w = window_subset(
                &order,
                &WindowSpec {
                    beta: cfg.beta,
                    ipc: cfg.ipc,
                    alpha,
                },
                classes,
            )?;
            (w.initial, w.select.len())
        }
        InitKind::Random => {
            let mut rng = rng_for(cfg.seed, INIT_STREAM, 0);
            let rows = random_per_class(&real.labels, classes, cfg.ipc, &mut rng)?;
            let s = crate::select::select_count(alpha, cfg.ipc, classes);
            (rows, s)
        }
    };
    let n = rows.len();
    let state = SyntheticState {
        pixels: real.images.select_rows(&rows),
        labels: rows.iter().map(|&i| real.labels[i]).collect(),
        frozen: (0..n).map(|i| i < frozen_count).collect(),
        eta: cfg.eta_init,
        alpha,
        beta: cfg.beta,
        ipc: cfg.ipc,
        num_classes: classes,
        provenance: rows.iter().map(|&i| Some(i)).collect(),
        iteration: 0,
        config_hash: config_hash.to_string(),
    };
    state.validate()?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub sampled_t: usize,
    pub matching_loss: f64,
    pub eta: f64,
    pub grad_norm_pixels: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: [&str; 6] = ["iteration", "sampled_t", "matching_loss", "eta", "grad_norm_pixels", "wall_ms"];

impl MetricsRow {
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            self.sampled_t.to_string(),
            self.matching_loss.to_string(),
            self.eta.to_string(),
            self.grad_norm_pixels.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

pub struct Distiller<'a> {
    pub cfg: &'a DistillConfig,
    pub bank: &'a TrajectoryBank,
    pub state: SyntheticState,
    nonfinite_streak: usize,
}

impl<'a> Distiller<'a> {
    pub fn new(cfg: &'a DistillConfig, bank: &'a TrajectoryBank, state: SyntheticState) -> Result<Self> {
        state.validate()?;
        let spec = &bank.spec;
        if state.pixels.row_len() != spec.input_len() {
            return Err(Error::Shape(format!(
                "synthetic rows have {} values, network expects {}",
                state.pixels.row_len(),
                spec.input_len()
            )));
        }
        if cfg.max_start_epoch + cfg.expert_epochs > bank.epochs() {
            return Err(Error::Invalid(format!(
                "max_start_epoch {} + expert_epochs {} exceeds the stored {} epochs",
                cfg.max_start_epoch,
                cfg.expert_epochs,
                bank.epochs()
            )));
        }
        Ok(Distiller {
            cfg,
            bank,
            state,
            nonfinite_streak: 0,
        })
    }

    pub fn pool(&self) -> Vec<usize> {
        match self.cfg.baseline {
            Baseline::Merge => self.state.distill_indices(),
            Baseline::Selmatch | Baseline::MttFull => (0..self.state.len()).collect(),
        }
    }

    pub fn student(&self) -> Student<'_> {
        Student {
            spec: &self.bank.spec,
            labels: &self.state.labels,
            frozen: &self.state.frozen,
            pool: self.pool(),
            steps: self.cfg.syn_steps,
            batch: self.cfg.batch_syn,
            aug: self.cfg.aug,
        }
    }

    /// Matching loss and its gradients with respect to all pixels and `η`
    /// for `iteration`, without updating anything.
    pub fn hypergradient(&self, iteration: u64) -> Result<(f64, Segment, Tensor, f64)> {
        let tape = Tape::new();
        let pixels = tape.leaf(self.state.pixels.clone());
        let eta = tape.leaf(Tensor::scalar(self.state.eta));
        let (loss, seg) = self.student().objective(&tape, self.bank, self.cfg, &pixels, &eta, iteration)?;
        let mut g = tape.grad(&loss, &[&pixels, &eta])?;
        let g_eta = g.pop().unwrap().item();
        Ok((loss.item(), seg, g.pop().unwrap(), g_eta))
    }

    /// One iteration: `state.iteration + 1`. A non-finite iteration leaves
    /// the state untouched and reports a `NaN` loss.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let started = Instant::now();
        let iteration = self.state.iteration + 1;
        let result = self.hypergradient(iteration);
        let (loss, seg, g_pix, g_eta) = match result {
            Ok(r) if r.2.is_finite() && r.3.is_finite() => r,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                self.nonfinite_streak += 1;
                log::warn!("iteration {iteration}: non-finite values, update skipped");
                if self.nonfinite_streak >= MAX_NONFINITE_STREAK {
                    return Err(Error::NonFinite { op: "distillation iteration" });
                }
                self.state.iteration = iteration;
                return Ok(MetricsRow {
                    iteration,
                    sampled_t: 0,
                    matching_loss: f64::NAN,
                    eta: self.state.eta,
                    grad_norm_pixels: f64::NAN,
                    wall_ms: self.wall(started),
                });
            }
            Err(e) => return Err(e),
        };
        self.nonfinite_streak = 0;
        let row = self.state.pixels.row_len();
        let lr = self.cfg.pixel_lr;
        let mut norm_sq = 0.0;
        let gd = g_pix.data();
        let pd = self.state.pixels.data_mut();
        for (i, &frozen) in self.state.frozen.iter().enumerate() {
            if frozen {
                continue;
            }
            for k in i * row..(i + 1) * row {
                norm_sq += gd[k] * gd[k];
                pd[k] -= lr * gd[k];
            }
        }
        self.state.eta = (self.state.eta - self.cfg.eta_lr() * g_eta).max(ETA_FLOOR);
        self.state.iteration = iteration;
        Ok(MetricsRow {
            iteration,
            sampled_t: seg.t,
            matching_loss: loss,
            eta: self.state.eta,
            grad_norm_pixels: norm_sq.sqrt(),
            wall_ms: self.wall(started),
        })
    }

    fn wall(&self, started: Instant) -> u64 {
        if self.cfg.timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

/// Runs until `cfg.iterations`, handing every row and the updated state to
/// `on_iter`.
pub fn run(
    cfg: &DistillConfig,
    bank: &TrajectoryBank,
    state: SyntheticState,
    mut on_iter: impl FnMut(&MetricsRow, &SyntheticState) -> Result<()>,
) -> Result<SyntheticState> {
    let mut d = Distiller::new(cfg, bank, state)?;
    while (d.state.iteration as usize) < cfg.iterations {
        let row = d.step()?;
        if row.iteration % 50 == 0 {
            log::info!("iteration {} loss {:.5} eta {:.3e}", row.iteration, row.matching_loss, row.eta);
        }
        on_iter(&row, &d.state)?;
    }
    Ok(d.state)
}

// ── run directory ───────────────────────────────────────────────────

/// `<root>/{config.json, metrics.csv, checkpoints/iter_NNNNNN.smsy, synthetic.smsy}`
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(format!("iter_{iteration:06}.smsy"))
    }

    pub fn final_state(&self) -> PathBuf {
        self.root.join("synthetic.smsy")
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        if !self.checkpoints().is_dir() {
            return Ok(None);
        }
        Ok(crate::eval::checkpoint_files(&self.checkpoints())?.pop())
    }
}

fn metrics_head(config_hash: &str) -> Result<Vec<u8>> {
    Table::new(&METRICS_HEADER).with_meta("config_hash", config_hash).to_bytes()
}

fn append_row(f: &mut fs::File, path: &Path, row: &MetricsRow) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(row.fields())?;
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Distills into `dir`, writing metrics every iteration and a checkpoint at
/// iteration 0, every `checkpoint_every` iterations and at the end. With
/// `resume` the latest checkpoint is loaded and metrics past it discarded.
pub fn run_in_dir(
    dir: &RunDir,
    cfg: &DistillConfig,
    bank: &TrajectoryBank,
    init: impl FnOnce() -> Result<SyntheticState>,
    resume: bool,
    config_hash: &str,
) -> Result<SyntheticState> {
    fs::create_dir_all(dir.checkpoints()).map_err(|e| Error::io(dir.checkpoints(), e))?;
    let metrics = dir.metrics();
    let state = match (resume, dir.latest_checkpoint()?) {
        (true, Some(path)) => {
            let state = SyntheticState::load(&path)?;
            if state.config_hash != config_hash {
                return Err(Error::Invalid(format!(
                    "{} was produced by config {}, not {config_hash}",
                    path.display(),
                    state.config_hash
                )));
            }
            let kept = Table::read(&metrics)?;
            let it = kept.column("iteration")?;
            let mut t = Table::new(&METRICS_HEADER).with_meta("config_hash", config_hash);
            t.rows = kept
                .rows
                .into_iter()
                .filter(|r| r[it].parse::<u64>().is_ok_and(|k| k <= state.iteration))
                .collect();
            t.write(&metrics)?;
            log::info!("resuming at iteration {}", state.iteration + 1);
            state
        }
        _ => {
            let state = init()?;
            state.save(&dir.checkpoint(0))?;
            fs::write(&metrics, metrics_head(config_hash)?).map_err(|e| Error::io(&metrics, e))?;
            state
        }
    };
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let every = cfg.checkpoint_every as u64;
    let last = cfg.iterations as u64;
    let out = run(cfg, bank, state, |row, s| {
        append_row(&mut f, &metrics, row)?;
        if row.iteration % every == 0 || row.iteration == last {
            s.save(&dir.checkpoint(row.iteration))?;
        }
        Ok(())
    })?;
    out.save(&dir.final_state())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::finite_diff_check;
    use crate::data::gen_blobs;
    use crate::expert::Manifest;
    use crate::nets::{init_params, NormMode};
    use crate::train::{self, LrSchedule, TrainConfig, TrainState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_anchors() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.5, -1.0, 4.0];
        assert_eq!(matching_loss(&b, &a, &b).unwrap(), 0.0);
        assert_eq!(matching_loss(&a, &a, &b).unwrap(), 1.0);
        let h = [0.0, 0.0, 0.0];
        // (0.25 + 1 + 16) / (0.25 + 9 + 1)
        assert!((matching_loss(&h, &a, &b).unwrap() - 17.25 / 10.25).abs() < 1e-15);
        assert!(matches!(matching_loss(&a, &a, &a), Err(Error::DegenerateSegment)));
    }

    #[test]
    fn two_half_batches_partition() {
        let mut s = BatchSampler::new((0..8).collect(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = s.next(&mut rng);
        seen.extend(s.next(&mut rng));
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    /// A short real expert run on the tiny set.
    fn toy_bank(spec: &NetSpec) -> TrajectoryBank {
        let (real, _) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            aug: AugPolicy::new(AugMode::None),
            seed: 0,
        };
        let mut traj = vec![init_params(spec, 0).unwrap().flat];
        train::train(spec, &real, None, &cfg, TrainState::fresh(traj[0].clone()), |s, _| {
            traj.push(s.params.clone());
            Ok(())
        })
        .unwrap();
        TrajectoryBank {
            spec: spec.clone(),
            manifests: Vec::<Manifest>::new(),
            trajectories: vec![traj],
        }
    }

    fn tiny_cfg() -> DistillConfig {
        DistillConfig {
            baseline: Baseline::Selmatch,
            init: None,
            iterations: 3,
            syn_steps: 2,
            expert_epochs: 1,
            max_start_epoch: 1,
            batch_syn: 4,
            pixel_lr: 1.0,
            eta_init: 0.05,
            eta_lr: Some(1e-3),
            alpha: 0.5,
            beta: 0.0,
            ipc: 2,
            aug: AugPolicy::new(AugMode::Combined),
            checkpoint_every: 2,
            seed: 4,
            timing: false,
        }
    }

    fn tiny() -> (LabeledSet, NetSpec) {
        let real = gen_blobs(2, 6, vec![1, 4, 4], 0.5, 1).unwrap();
        let spec = NetSpec::mlp(vec![4], NormMode::Batch, 2, vec![1, 4, 4]);
        (real, spec)
    }

    #[test]
    fn pixel_and_eta_hypergradients_match_differences() {
        let (real, spec) = tiny();
        let bank = toy_bank(&spec);
        let cfg = tiny_cfg();
        let state = initialize(&cfg, &real, real.scores.as_ref().unwrap(), "h").unwrap();
        let d = Distiller::new(&cfg, &bank, state.clone()).unwrap();
        let student = d.student();
        let eta = Tensor::scalar(state.eta);
        let f = |t: &Tape, px: &Var| {
            let e = Var::constant(eta.clone());
            Ok(student.objective(t, &bank, &cfg, px, &e, 1)?.0)
        };
        let coords: Vec<usize> = (0..state.pixels.numel()).step_by(5).collect();
        let r = finite_diff_check(f, &state.pixels, 1e-4, 1e-4, Some(&coords)).unwrap();
        assert!(r.pass, "{r:?}");
        let px = Var::constant(state.pixels.clone());
        let g = |t: &Tape, e: &Var| Ok(student.objective(t, &bank, &cfg, &px, e, 1)?.0);
        let r = finite_diff_check(g, &eta, 1e-6, 1e-4, None).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn zero_step_size_gives_unit_loss() {
        let (real, spec) = tiny();
        let bank = toy_bank(&spec);
        let cfg = tiny_cfg();
        let state = initialize(&cfg, &real, real.scores.as_ref().unwrap(), "h").unwrap();
        let d = Distiller::new(&cfg, &bank, state.clone()).unwrap();
        let tape = Tape::new();
        let (loss, _) = d
            .student()
            .objective(&tape, &bank, &cfg, &Var::constant(state.pixels.clone()), &Var::constant(Tensor::scalar(0.0)), 1)
            .unwrap();
        assert_eq!(loss.item(), 1.0);
    }

    #[test]
    fn frozen_rows_and_zero_iterations() {
        let (real, spec) = tiny();
        let bank = toy_bank(&spec);
        let mut cfg = tiny_cfg();
        let state = initialize(&cfg, &real, real.scores.as_ref().unwrap(), "h").unwrap();
        cfg.iterations = 0;
        assert_eq!(run(&cfg, &bank, state.clone(), |_, _| Ok(())).unwrap(), state);
        cfg.iterations = 5;
        let out = run(&cfg, &bank, state.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(out.frozen_hash(), state.frozen_hash());
        assert_ne!(out.pixels, state.pixels);
    }

    #[test]
    fn eta_clamp_and_zero_lr() {
        let (real, spec) = tiny();
        let bank = toy_bank(&spec);
        let mut cfg = tiny_cfg();
        cfg.eta_lr = Some(0.0);
        let state = initialize(&cfg, &real, real.scores.as_ref().unwrap(), "h").unwrap();
        let out = run(&cfg, &bank, state.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(out.eta, state.eta);
        cfg.eta_lr = Some(1e12);
        let mut d = Distiller::new(&cfg, &bank, state).unwrap();
        let (_, _, _, g) = d.hypergradient(1).unwrap();
        let row = d.step().unwrap();
        if g > 0.0 {
            assert_eq!(row.eta, ETA_FLOOR);
        }
    }

    #[test]
    fn resume_continues_the_stream() {
        let (real, spec) = tiny();
        let bank = toy_bank(&spec);
        let mut cfg = tiny_cfg();
        cfg.iterations = 5;
        let scores = real.scores.clone().unwrap();
        let a = tempfile::tempdir().unwrap();
        let full = RunDir::new(a.path());
        run_in_dir(&full, &cfg, &bank, || initialize(&cfg, &real, &scores, "h"), false, "h").unwrap();

        let b = tempfile::tempdir().unwrap();
        let part = RunDir::new(b.path());
        let mut short = cfg.clone();
        short.iterations = 3;
        run_in_dir(&part, &short, &bank, || initialize(&cfg, &real, &scores, "h"), false, "h").unwrap();
        // Simulate a crash after the iteration-2 checkpoint.
        fs::remove_file(part.checkpoint(3)).unwrap();
        run_in_dir(&part, &cfg, &bank, || unreachable!(), true, "h").unwrap();
        assert_eq!(fs::read(full.metrics()).unwrap(), fs::read(part.metrics()).unwrap());
        assert_eq!(fs::read(full.final_state()).unwrap(), fs::read(part.final_state()).unwrap());
    }
}
