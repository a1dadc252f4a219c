//! Per-sample difficulty: forgetting events, EL2N, and imported tables.
//! Higher is harder everywhere.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nets::{init_params, NetSpec};
use crate::table::Table;
use crate::tensor::{softmax_rows, Tensor};
use crate::train::{self, correctness, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Forgetting,
    El2n,
    External,
}

impl ScoreKind {
    fn name(self) -> &'static str {
        match self {
            ScoreKind::Forgetting => "forgetting",
            ScoreKind::El2n => "el2n",
            ScoreKind::External => "external",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub kind: ScoreKind,
    pub values: Vec<f64>,
    pub epochs: usize,
    pub seeds: Vec<u64>,
}

impl ScoreTable {
    pub fn to_table(&self) -> Table {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let mut t = Table::new(&["index", "score"])
            .with_meta("higher_is_harder", true)
            .with_meta("kind", self.kind.name())
            .with_meta("epochs", self.epochs)
            .with_meta("seeds", seeds.join(" "));
        for (i, v) in self.values.iter().enumerate() {
            t.push(vec![i.to_string(), v.to_string()]);
        }
        t
    }
}

/// `log[epoch][sample]`: whether the sample was classified correctly at the
/// end of that epoch.
pub type CorrectnessLog = Vec<Vec<bool>>;

/// Correct-to-incorrect transitions; a sample never classified correctly
/// counts as `epochs`.
pub fn forgetting_events(history: &[bool]) -> f64 {
    if !history.iter().any(|&c| c) {
        return history.len() as f64;
    }
    history.windows(2).filter(|w| w[0] && !w[1]).count() as f64
}

pub fn forgetting_from_log(log: &CorrectnessLog, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| forgetting_events(&log.iter().map(|e| e[i]).collect::<Vec<_>>()))
        .collect()
}

pub fn correctness_table(log: &CorrectnessLog) -> Table {
    let mut t = Table::new(&["sample_index", "epoch", "correct"]);
    let n = log.first().map_or(0, Vec::len);
    for i in 0..n {
        for (e, row) in log.iter().enumerate() {
            t.push(vec![i.to_string(), e.to_string(), u8::from(row[i]).to_string()]);
        }
    }
    t
}

pub fn read_correctness_log(path: &Path) -> Result<CorrectnessLog> {
    let t = Table::read(path)?;
    let (si, ei, ci) = (t.column("sample_index")?, t.column("epoch")?, t.column("correct")?);
    let mut cells = Vec::with_capacity(t.rows.len());
    for r in &t.rows {
        let p = |s: &str| s.parse::<usize>().map_err(|e| Error::format(path, format!("{s:?}: {e}")));
        cells.push((p(&r[si])?, p(&r[ei])?, p(&r[ci])? == 1));
    }
    let n = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let epochs = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.len() != n * epochs {
        return Err(Error::format(path, format!("{} cells for {n} samples x {epochs} epochs", cells.len())));
    }
    let mut log = vec![vec![false; n]; epochs];
    for (i, e, c) in cells {
        log[e][i] = c;
    }
    Ok(log)
}

/// Trains one network on `set` and counts forgetting events over the
/// epoch-end correctness of every sample.
pub fn forgetting_score(set: &LabeledSet, spec: &NetSpec, cfg: &TrainConfig) -> Result<(ScoreTable, CorrectnessLog)> {
    if cfg.epochs < 2 {
        return Err(Error::Invalid("forgetting needs at least 2 epochs".into()));
    }
    let init = init_params(spec, cfg.seed)?.flat;
    let mut log = Vec::with_capacity(cfg.epochs);
    train::train(spec, set, None, cfg, TrainState::fresh(init), |s, _| {
        log.push(correctness(&train::predict(spec, &s.params, set)?, &set.labels));
        Ok(())
    })?;
    let values = forgetting_from_log(&log, set.len());
    Ok((
        ScoreTable {
            kind: ScoreKind::Forgetting,
            values,
            epochs: cfg.epochs,
            seeds: vec![cfg.seed],
        },
        log,
    ))
}

/// `‖softmax(logits) − onehot(label)‖₂` per row.
pub fn el2n_values(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    let p = softmax_rows(logits.data(), labels.len(), c);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            p[i * c..(i + 1) * c]
                .iter()
                .enumerate()
                .map(|(c, &q)| {
                    let d = q - f64::from(u8::from(c == y));
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// EL2N averaged over independent trainings, one per seed, each stopped
/// after `cfg.epochs`.
pub fn el2n_score(set: &LabeledSet, spec: &NetSpec, cfg: &TrainConfig, seeds: &[u64]) -> Result<ScoreTable> {
    if seeds.is_empty() {
        return Err(Error::Invalid("EL2N needs at least one seed".into()));
    }
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..*cfg };
            let init = init_params(spec, seed)?.flat;
            let s = train::train(spec, set, None, &cfg, TrainState::fresh(init), |_, _| Ok(()))?;
            Ok(el2n_values(&train::predict(spec, &s.params, set)?, &set.labels))
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let values = (0..set.len())
        .map(|i| per_seed.iter().map(|v| v[i]).sum::<f64>() / seeds.len() as f64)
        .collect();
    Ok(ScoreTable {
        kind: ScoreKind::El2n,
        values,
        epochs: cfg.epochs,
        seeds: seeds.to_vec(),
    })
}

/// Reads `index,score` rows. A `# higher_is_harder=false` line negates the
/// values so that the table is always higher-is-harder.
pub fn import_scores(path: &Path, expected: usize) -> Result<ScoreTable> {
    let t = Table::read(path)?;
    let flip = match t.meta.get("higher_is_harder").map(String::as_str) {
        None | Some("true") => false,
        Some("false") => true,
        Some(other) => return Err(Error::format(path, format!("higher_is_harder={other}"))),
    };
    let mut rows = t.rows.clone();
    // Files without a header row put the first data row in the header slot.
    if t.header.first().map(String::as_str) != Some("index") {
        rows.insert(0, t.header.clone());
    }
    let mut values: Vec<Option<f64>> = vec![None; expected];
    for r in &rows {
        if r.len() != 2 {
            return Err(Error::format(path, format!("expected index,score but got {r:?}")));
        }
        let i: usize = r[0]
            .parse()
            .map_err(|e| Error::format(path, format!("index {:?}: {e}", r[0])))?;
        let v: f64 = r[1]
            .parse()
            .map_err(|e| Error::format(path, format!("score {:?}: {e}", r[1])))?;
        if !v.is_finite() {
            return Err(Error::format(path, format!("score for index {i} is not finite")));
        }
        let slot = values
            .get_mut(i)
            .ok_or_else(|| Error::format(path, format!("index {i} out of range for {expected} samples")))?;
        if slot.is_some() {
            return Err(Error::format(path, format!("duplicate index {i}")));
        }
        *slot = Some(if flip { -v } else { v });
    }
    if let Some(missing) = values.iter().position(Option::is_none) {
        return Err(Error::format(
            path,
            format!("{} rows for {expected} samples; index {missing} missing", rows.len()),
        ));
    }
    Ok(ScoreTable {
        kind: ScoreKind::External,
        values: values.into_iter().flatten().collect(),
        epochs: 0,
        seeds: Vec::new(),
    })
}

/// Training accuracy of the network used for forgetting, handy as a sanity
/// signal in logs.
pub fn final_accuracy(log: &CorrectnessLog) -> f64 {
    log.last()
        .map_or(0.0, |e| e.iter().filter(|&&c| c).count() as f64 / e.len().max(1) as f64)
}

pub fn argsort_hardest_first(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugMode, AugPolicy};
    use crate::data::gen_blobs;
    use crate::nets::NormMode;
    use crate::train::LrSchedule;

    #[test]
    fn event_counts() {
        assert_eq!(forgetting_events(&[true, false, true, false]), 2.0);
        assert_eq!(forgetting_events(&[true, true, true]), 0.0);
        assert_eq!(forgetting_events(&[false, false, false, false]), 4.0);
        assert_eq!(forgetting_events(&[false, true, true]), 0.0);
    }

    #[test]
    fn el2n_anchors() {
        let perfect = Tensor::new(vec![1, 2], vec![800.0, -800.0]).unwrap();
        assert!(el2n_values(&perfect, &[0])[0] < 1e-12);
        let uniform = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!((el2n_values(&uniform, &[0])[0] - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            aug: AugPolicy::new(AugMode::None),
            seed: 0,
        }
    }

    #[test]
    fn el2n_flat_on_identical_samples() {
        let set = gen_blobs(2, 10, vec![1, 4, 4], 0.0, 3).unwrap();
        let spec = NetSpec::mlp(vec![6], NormMode::None, 2, vec![1, 4, 4]);
        let t = el2n_score(&set, &spec, &cfg(20), &[0, 1]).unwrap();
        for c in 0..2 {
            let v: Vec<f64> = (0..set.len()).filter(|&i| set.labels[i] == c).map(|i| t.values[i]).collect();
            let m = crate::util::mean(&v);
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(var <= 1e-6, "{var}");
        }
        assert_eq!(t, el2n_score(&set, &spec, &cfg(20), &[0, 1]).unwrap());
    }

    #[test]
    fn forgetting_matches_log() {
        let set = gen_blobs(3, 10, vec![1, 4, 4], 1.5, 4).unwrap();
        let spec = NetSpec::mlp(vec![6], NormMode::None, 3, vec![1, 4, 4]);
        let (t, log) = forgetting_score(&set, &spec, &cfg(6)).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(t.values, forgetting_from_log(&log, set.len()));
    }

    #[test]
    fn hardest_first_ties_by_index() {
        assert_eq!(argsort_hardest_first(&[1.0, 3.0, 3.0, 0.0]), vec![1, 2, 0, 3]);
    }
}
