//! Run directories: resolved config, artifact paths and loaders.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use distillkit::data::{LabeledSet, SyntheticState};
use distillkit::eval::median_split;
use distillkit::expert::TrajectoryBank;
use distillkit::scores::import_scores;
use distillkit::table::Table;

use crate::config::{self, RunConfig};
use crate::fail::Fail;

pub const RUNS_ENV: &str = "DISTILLKIT_RUNS";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub dir: PathBuf,
}

impl Run {
    /// Binds a resolved config to its directory under `root`. A directory
    /// that already holds a different config is refused.
    pub fn open(cfg: RunConfig, root: &Path) -> anyhow::Result<Run> {
        cfg.validate()?;
        let dir = root.join(&cfg.name);
        let hash = cfg.hash();
        let stored = dir.join("config.json");
        if stored.exists() {
            let old = config::load(&stored)?;
            if old != cfg {
                bail!(Fail::config(format!(
                    "{} holds config {} but this invocation resolves to {hash}; use another name",
                    dir.display(),
                    old.hash()
                )));
            }
        } else {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(&stored, cfg.to_pretty()).with_context(|| format!("writing {}", stored.display()))?;
        }
        Ok(Run { cfg, hash, dir })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn train_path(&self) -> PathBuf {
        self.path("data/train.smds")
    }

    pub fn test_path(&self) -> PathBuf {
        self.path("data/test.smds")
    }

    pub fn scores_path(&self) -> PathBuf {
        self.path("scores.csv")
    }

    pub fn experts_path(&self) -> PathBuf {
        self.path("experts")
    }

    pub fn select_path(&self) -> PathBuf {
        self.path("select.smsy")
    }

    pub fn synthetic_path(&self) -> PathBuf {
        self.path("synthetic.smsy")
    }

    fn need(&self, path: &Path, hint: &str) -> anyhow::Result<()> {
        if !path.exists() {
            bail!(Fail::missing(format!("missing {} (run `{hint}` first)", path.display())));
        }
        Ok(())
    }

    pub fn train_set(&self) -> anyhow::Result<LabeledSet> {
        self.need(&self.train_path(), "gen-data")?;
        Ok(LabeledSet::load(&self.train_path())?)
    }

    pub fn test_set(&self) -> anyhow::Result<LabeledSet> {
        self.need(&self.test_path(), "gen-data")?;
        Ok(LabeledSet::load(&self.test_path())?)
    }

    pub fn scores(&self, n: usize) -> anyhow::Result<Vec<f64>> {
        self.need(&self.scores_path(), "score")?;
        Ok(import_scores(&self.scores_path(), n)?.values)
    }

    pub fn bank(&self) -> anyhow::Result<TrajectoryBank> {
        let store = self.experts_path();
        self.need(&store, "expert")?;
        let bank = TrajectoryBank::load(&store)?;
        if bank.spec != self.cfg.net {
            bail!(Fail::config(format!("{} was trained for a different net", store.display())));
        }
        Ok(bank)
    }

    pub fn state(&self, path: &Path) -> anyhow::Result<SyntheticState> {
        self.need(path, "distill")?;
        Ok(SyntheticState::load(path)?)
    }

    /// Hard flags for the test set when the source records per-sample
    /// difficulty.
    pub fn test_hard(&self, test: &LabeledSet) -> Option<Vec<bool>> {
        test.scores.as_ref().map(|s| median_split(s))
    }

    /// Stamps a table with this run's config hash and writes it.
    pub fn write_table(&self, rel: &str, t: Table) -> anyhow::Result<PathBuf> {
        let path = self.path(rel);
        t.with_meta("config_hash", &self.hash).write(&path)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}
