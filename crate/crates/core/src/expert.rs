//! Expert trajectories: per-epoch parameter checkpoints from training on the
//! real set, stored as one directory per seed.
//!
//! ```text
//! <store>/traj_<seed>/manifest.json
//! <store>/traj_<seed>/epoch_0000.smck   (epoch 0 = initialization)
//! ```
//!
//! `M` is counted in expert epochs throughout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nets::{init_params, NetSpec};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    epoch: usize,
    spec_hash: String,
    seed: u64,
    n_params: usize,
}

/// Parameters after `epoch` plus the momentum buffer needed to continue.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub spec_hash: String,
    pub seed: u64,
    pub params: Tensor,
    pub momentum: Tensor,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(CHECKPOINT_MAGIC, &self.header(), &self.payload())
    }

    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            epoch: self.epoch,
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            n_params: self.params.numel(),
        }
    }

    fn payload(&self) -> Vec<f64> {
        let mut p = self.params.data().to_vec();
        p.extend_from_slice(self.momentum.data());
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, CHECKPOINT_MAGIC, &self.header(), &self.payload())
    }

    pub fn from_bytes(path: &Path, bytes: &[u8], spec: &NetSpec) -> Result<Self> {
        let (h, mut payload): (CheckpointHeader, _) =
            container::decode(path, CHECKPOINT_MAGIC, bytes, |h: &CheckpointHeader| 2 * h.n_params)?;
        let want = spec.hash();
        if h.spec_hash != want {
            return Err(Error::format(
                path,
                format!("network spec hash {} does not match {want}", h.spec_hash),
            ));
        }
        if h.n_params != spec.param_count() {
            return Err(Error::format(
                path,
                format!("{} parameters, spec needs {}", h.n_params, spec.param_count()),
            ));
        }
        let momentum = payload.split_off(h.n_params);
        Ok(Checkpoint {
            epoch: h.epoch,
            spec_hash: h.spec_hash,
            seed: h.seed,
            params: Tensor::new(vec![h.n_params], payload)?,
            momentum: Tensor::new(vec![h.n_params], momentum)?,
        })
    }

    pub fn load(path: &Path, spec: &NetSpec) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes, spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: NetSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub train: TrainConfig,
    pub dataset_hash: String,
    pub config_hash: String,
}

pub fn trajectory_dir(store: &Path, seed: u64) -> PathBuf {
    store.join(format!("traj_{seed}"))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.smck"))
}

/// Trains one expert and writes a checkpoint after every epoch. `cfg.seed`
/// is replaced by `seed`.
pub fn train_expert(
    set: &LabeledSet,
    spec: &NetSpec,
    cfg: &TrainConfig,
    seed: u64,
    store: &Path,
    config_hash: &str,
) -> Result<PathBuf> {
    let cfg = TrainConfig { seed, ..*cfg };
    let dir = trajectory_dir(store, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let spec_hash = spec.hash();
    let init = init_params(spec, seed)?.flat;
    let save = |s: &TrainState| {
        Checkpoint {
            epoch: s.epoch,
            spec_hash: spec_hash.clone(),
            seed,
            params: s.params.clone(),
            momentum: s.momentum.clone(),
        }
        .save(&checkpoint_path(&dir, s.epoch))
    };
    let start = TrainState::fresh(init);
    save(&start)?;
    train::train(spec, set, None, &cfg, start, |s, loss| {
        log::debug!("expert {seed} epoch {} loss {loss:.4}", s.epoch);
        save(s)
    })
    .map_err(|e| match e {
        Error::NonFinite { op } => Error::Invalid(format!("expert {seed} diverged ({op})")),
        other => other,
    })?;
    let manifest = Manifest {
        spec: spec.clone(),
        spec_hash,
        seed,
        epochs: cfg.epochs,
        train: cfg,
        dataset_hash: set.content_hash(),
        config_hash: config_hash.to_string(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

/// Trains experts for all seeds in parallel.
pub fn train_experts(
    set: &LabeledSet,
    spec: &NetSpec,
    cfg: &TrainConfig,
    seeds: &[u64],
    store: &Path,
    config_hash: &str,
) -> Result<Vec<PathBuf>> {
    seeds
        .par_iter()
        .map(|&s| train_expert(set, spec, cfg, s, store, config_hash))
        .collect()
}

/// All trajectories of a store held in memory; read-only during distillation.
#[derive(Clone, Debug)]
pub struct TrajectoryBank {
    pub spec: NetSpec,
    pub manifests: Vec<Manifest>,
    /// `trajectories[k][t]` = parameters after epoch `t` of trajectory `k`.
    pub trajectories: Vec<Vec<Tensor>>,
}

impl TrajectoryBank {
    pub fn load(store: &Path) -> Result<Self> {
        let entries = fs::read_dir(store).map_err(|e| Error::io(store, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Missing(store.join("traj_*/manifest.json")));
        }
        let mut spec: Option<NetSpec> = None;
        let (mut manifests, mut trajectories) = (Vec::new(), Vec::new());
        for dir in dirs {
            let mpath = dir.join("manifest.json");
            let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let m: Manifest =
                serde_json::from_slice(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
            if m.spec.hash() != m.spec_hash {
                return Err(Error::format(&mpath, "manifest spec does not match its hash"));
            }
            match &spec {
                Some(s) if s.hash() != m.spec_hash => {
                    return Err(Error::format(&mpath, "trajectories in one store use different networks"))
                }
                _ => spec = Some(m.spec.clone()),
            }
            let cks = (0..=m.epochs)
                .map(|t| {
                    let ck = Checkpoint::load(&checkpoint_path(&dir, t), &m.spec)?;
                    if ck.epoch != t {
                        return Err(Error::format(checkpoint_path(&dir, t), format!("holds epoch {}", ck.epoch)));
                    }
                    Ok(ck.params)
                })
                .collect::<Result<Vec<_>>>()?;
            manifests.push(m);
            trajectories.push(cks);
        }
        Ok(TrajectoryBank {
            spec: spec.unwrap(),
            manifests,
            trajectories,
        })
    }

    /// Shortest trajectory length in epochs.
    pub fn epochs(&self) -> usize {
        self.trajectories.iter().map(|t| t.len() - 1).min().unwrap_or(0)
    }

    /// Final checkpoint of the first trajectory.
    pub fn final_params(&self) -> &Tensor {
        self.trajectories[0].last().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub trajectory: usize,
    pub t: usize,
}

/// Uniform trajectory and uniform start epoch `t ∈ [0, T⁺]`.
pub fn sample_segment(bank: &TrajectoryBank, t_plus: usize, m: usize, rng: &mut impl Rng) -> Result<Segment> {
    if bank.trajectories.is_empty() {
        return Err(Error::Invalid("trajectory store is empty".into()));
    }
    if t_plus + m > bank.epochs() {
        return Err(Error::Invalid(format!(
            "segment up to epoch {} exceeds stored {} epochs",
            t_plus + m,
            bank.epochs()
        )));
    }
    let trajectory = rng.random_range(0..bank.trajectories.len());
    let t = rng.random_range(0..=t_plus);
    Ok(Segment { trajectory, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugMode, AugPolicy};
    use crate::data::gen_blobs;
    use crate::nets::NormMode;
    use crate::train::LrSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (LabeledSet, NetSpec, TrainConfig) {
        let set = gen_blobs(2, 12, vec![1, 4, 4], 0.3, 0).unwrap();
        let spec = NetSpec::mlp(vec![6], NormMode::Batch, 2, vec![1, 4, 4]);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::StepHalf,
            aug: AugPolicy::new(AugMode::Simple),
            seed: 0,
        };
        (set, spec, cfg)
    }

    #[test]
    fn fencepost_and_determinism() {
        let (set, spec, cfg) = setup();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let da = train_expert(&set, &spec, &cfg, 7, a.path(), "h").unwrap();
        let db = train_expert(&set, &spec, &cfg, 7, b.path(), "h").unwrap();
        for t in 0..=3 {
            let x = fs::read(checkpoint_path(&da, t)).unwrap();
            assert_eq!(x, fs::read(checkpoint_path(&db, t)).unwrap());
        }
        assert!(!checkpoint_path(&da, 4).exists());
        let bank = TrajectoryBank::load(a.path()).unwrap();
        assert_eq!(bank.trajectories[0].len(), 4);
    }

    #[test]
    fn resuming_from_a_checkpoint_reproduces_later_ones() {
        let (set, spec, cfg) = setup();
        let dir = tempfile::tempdir().unwrap();
        let traj = train_expert(&set, &spec, &cfg, 2, dir.path(), "h").unwrap();
        let ck = Checkpoint::load(&checkpoint_path(&traj, 1), &spec).unwrap();
        let state = TrainState {
            epoch: 1,
            params: ck.params,
            momentum: ck.momentum,
        };
        let cfg = TrainConfig { seed: 2, ..cfg };
        let end = train::train(&spec, &set, None, &cfg, state, |_, _| Ok(())).unwrap();
        let want = Checkpoint::load(&checkpoint_path(&traj, 3), &spec).unwrap();
        assert_eq!(end.params, want.params);
    }

    #[test]
    fn spec_mismatch_is_refused() {
        let (_, spec, _) = setup();
        let ck = Checkpoint {
            epoch: 0,
            spec_hash: spec.hash(),
            seed: 0,
            params: init_params(&spec, 0).unwrap().flat,
            momentum: Tensor::zeros(&[spec.param_count()]),
        };
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("x.smck");
        assert_eq!(Checkpoint::from_bytes(p, &bytes, &spec).unwrap(), ck);
        let other = NetSpec::mlp(vec![6], NormMode::None, 2, vec![1, 4, 4]);
        assert!(Checkpoint::from_bytes(p, &bytes, &other).is_err());
    }

    #[test]
    fn segments_respect_bounds() {
        let (_, spec, cfg) = setup();
        let p = init_params(&spec, 0).unwrap().flat;
        let bank = TrajectoryBank {
            spec,
            manifests: Vec::new(),
            trajectories: vec![vec![p; 6]],
        };
        let _ = cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_segment(&bank, 0, 2, &mut rng).unwrap().t, 0);
        }
        assert!(sample_segment(&bank, 4, 2, &mut rng).is_err());
        assert!(sample_segment(&bank, 3, 2, &mut rng).is_ok());
    }
}
