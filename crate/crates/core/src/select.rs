//! Class-balanced difficulty ordering, sliding-window subsets and the search
//! over window position.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::eval::{self, Budget, EvalConfig, Reduced};
use crate::nets::NetSpec;
use crate::table::Table;
use crate::util::{mean, std_dev};

/// Slack for products like `0.1 * 30` that land a hair above an integer.
const CEIL_SLACK: f64 = 1e-9;

fn ceil(x: f64) -> usize {
    (x - CEIL_SLACK).ceil().max(0.0) as usize
}

/// Hardest-first order with position `i` holding class `i mod C`. Classes
/// with more samples than the smallest one are truncated to its size.
pub fn difficulty_order(labels: &[usize], scores: &[f64], classes: usize) -> Result<Vec<usize>> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!("{} labels but {} scores", labels.len(), scores.len())));
    }
    if classes == 0 {
        return Err(Error::Invalid("no classes".into()));
    }
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        per.get_mut(y)
            .ok_or_else(|| Error::Invalid(format!("label {y} out of range for {classes} classes")))?
            .push(i);
    }
    for (c, idx) in per.iter_mut().enumerate() {
        if idx.is_empty() {
            return Err(Error::Invalid(format!("class {c} has no samples")));
        }
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    }
    let k = per.iter().map(Vec::len).min().unwrap_or(0);
    Ok((0..k).flat_map(|r| per.iter().map(move |p| p[r])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub beta: f64,
    pub ipc: usize,
    pub alpha: f64,
}

/// Dataset indices taken from the difficulty order; `initial` is the whole
/// window, split into `select` and `distill`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub initial: Vec<usize>,
    pub select: Vec<usize>,
    pub distill: Vec<usize>,
}

/// `⌈β·n⌉` rounded up to a multiple of `classes`.
pub fn window_start(beta: f64, n: usize, classes: usize) -> usize {
    ceil(beta * n as f64).div_ceil(classes) * classes
}

/// `⌈(1−α)·IPC·C⌉` rounded half-up to the nearest multiple of `classes`.
pub fn select_count(alpha: f64, ipc: usize, classes: usize) -> usize {
    let raw = ceil((1.0 - alpha) * (ipc * classes) as f64);
    ((2 * raw + classes) / (2 * classes) * classes).min(ipc * classes)
}

/// Cuts the window out of a class-interleaved order and splits it into the
/// frozen (harder) front and the learnable remainder.
pub fn window_subset(ordered: &[usize], spec: &WindowSpec, classes: usize) -> Result<Window> {
    if !(0.0..=1.0).contains(&spec.beta) || !(0.0..=1.0).contains(&spec.alpha) {
        return Err(Error::Invalid(format!(
            "beta {} and alpha {} must lie in [0, 1]",
            spec.beta, spec.alpha
        )));
    }
    if spec.ipc == 0 {
        return Err(Error::Invalid("ipc must be positive".into()));
    }
    let n = ordered.len();
    let start = window_start(spec.beta, n, classes);
    let len = spec.ipc * classes;
    if start + len > n {
        return Err(Error::WindowOverrun(format!(
            "window [{start}, {}) exceeds {n} ordered samples (beta {}, ipc {})",
            start + len,
            spec.beta,
            spec.ipc
        )));
    }
    let initial = ordered[start..start + len].to_vec();
    let s = select_count(spec.alpha, spec.ipc, classes);
    Ok(Window {
        start,
        select: initial[..s].to_vec(),
        distill: initial[s..].to_vec(),
        initial,
    })
}

/// Largest β in `[0, 1]` whose window still fits.
pub fn max_beta(n: usize, ipc: usize, classes: usize) -> f64 {
    n.saturating_sub(ipc * classes) as f64 / n as f64
}

// ── sweep ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub seed: u64,
    pub test_acc: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    /// `(beta, mean, std)` per grid point, ascending in β.
    pub fn summary(&self) -> Vec<(f64, f64, f64)> {
        let mut betas: Vec<f64> = self.points.iter().map(|p| p.beta).collect();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        betas
            .into_iter()
            .map(|b| {
                let acc: Vec<f64> = self.points.iter().filter(|p| p.beta == b).map(|p| p.test_acc).collect();
                (b, mean(&acc), std_dev(&acc))
            })
            .collect()
    }

    /// β with the highest mean accuracy; ties go to the smaller β.
    pub fn best_beta(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (b, m, _) in self.summary() {
            if best.is_none_or(|(_, bm)| m > bm) {
                best = Some((b, m));
            }
        }
        best.map(|(b, _)| b)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["beta", "seed", "test_acc", "epochs_used"]);
        for p in &self.points {
            t.push(vec![p.beta.to_string(), p.seed.to_string(), p.test_acc.to_string(), p.epochs.to_string()]);
        }
        t
    }
}

pub struct SweepInputs<'a> {
    pub spec: &'a NetSpec,
    pub train: &'a LabeledSet,
    pub test: &'a LabeledSet,
    pub ordered: &'a [usize],
    pub ipc: usize,
    pub eval: EvalConfig,
}

/// Evaluates the window subset at every β and seed. Points run in parallel;
/// the result is sorted by (β, seed).
pub fn window_sweep(inp: &SweepInputs<'_>, betas: &[f64], budget: Budget, seeds: &[u64]) -> Result<SweepCurve> {
    let classes = inp.train.num_classes;
    let jobs: Vec<(f64, u64)> = betas.iter().flat_map(|&b| seeds.iter().map(move |&s| (b, s))).collect();
    let mut points = jobs
        .par_iter()
        .map(|&(beta, seed)| {
            let w = window_subset(inp.ordered, &WindowSpec { beta, ipc: inp.ipc, alpha: 0.0 }, classes)?;
            let cfg = EvalConfig { budget, ..inp.eval };
            let r = eval::evaluate(inp.spec, &Reduced::real(inp.train.subset(&w.initial)), inp.test, inp.train.len(), &cfg, &[seed], None)?;
            Ok(SweepPoint {
                beta,
                seed,
                test_acc: r.per_seed[0].test_acc,
                epochs: r.epochs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| a.beta.total_cmp(&b.beta).then(a.seed.cmp(&b.seed)));
    Ok(SweepCurve { points })
}

/// Maximizes a unimodal function on the grid by ternary search, evaluating
/// each grid point at most once. Returns the argmax (ties toward the lower
/// index) and every evaluated `(index, value)`.
pub fn concave_search(len: usize, mut f: impl FnMut(usize) -> Result<f64>) -> Result<(usize, Vec<(usize, f64)>)> {
    if len == 0 {
        return Err(Error::Invalid("empty search grid".into()));
    }
    let mut seen: Vec<Option<f64>> = vec![None; len];
    let mut eval = |i: usize, seen: &mut Vec<Option<f64>>| -> Result<f64> {
        if let Some(v) = seen[i] {
            return Ok(v);
        }
        let v = f(i)?;
        seen[i] = Some(v);
        Ok(v)
    };
    let (mut lo, mut hi) = (0, len - 1);
    while hi - lo > 2 {
        let m1 = lo + (hi - lo) / 3;
        let m2 = hi - (hi - lo) / 3;
        if eval(m1, &mut seen)? >= eval(m2, &mut seen)? {
            hi = m2 - 1;
        } else {
            lo = m1 + 1;
        }
    }
    for i in lo..=hi {
        eval(i, &mut seen)?;
    }
    let evaluated: Vec<(usize, f64)> = seen.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    let mut best = lo;
    for i in lo..=hi {
        if seen[i].unwrap() > seen[best].unwrap() {
            best = i;
        }
    }
    Ok((best, evaluated))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_style_example() {
        // a:9 b:8 (class 0), c:7 d:1 (class 1)
        let order = difficulty_order(&[0, 0, 1, 1], &[9.0, 8.0, 7.0, 1.0], 2).unwrap();
        assert_eq!(order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn equal_scores_interleave_by_index() {
        let order = difficulty_order(&[1, 0, 1, 0, 0, 1], &[0.0; 6], 2).unwrap();
        assert_eq!(order, vec![1, 0, 3, 2, 4, 5]);
    }

    #[test]
    fn single_class_is_plain_sort() {
        assert_eq!(difficulty_order(&[0, 0, 0], &[1.0, 3.0, 2.0], 1).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn empty_class_is_error() {
        assert!(difficulty_order(&[0, 0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn index_arithmetic() {
        let ordered: Vec<usize> = (0..20).collect();
        let w = window_subset(&ordered, &WindowSpec { beta: 0.25, ipc: 4, alpha: 0.5 }, 2).unwrap();
        assert_eq!(w.start, 6);
        assert_eq!(w.initial, (6..14).collect::<Vec<_>>());
        assert_eq!(w.select, vec![6, 7, 8, 9]);
        assert_eq!(w.distill, vec![10, 11, 12, 13]);

        let w0 = window_subset(&ordered, &WindowSpec { beta: 0.0, ipc: 4, alpha: 1.0 }, 2).unwrap();
        assert_eq!(w0.initial, (0..8).collect::<Vec<_>>());
        assert!(w0.select.is_empty());
        assert!(window_subset(&ordered, &WindowSpec { beta: 0.7, ipc: 4, alpha: 0.5 }, 2).is_err());
    }

    #[test]
    fn select_count_rounding() {
        assert_eq!(select_count(0.5, 4, 2), 4);
        assert_eq!(select_count(0.0, 10, 4), 40);
        assert_eq!(select_count(1.0, 10, 4), 0);
        // ⌈0.7·30⌉ = 21 → nearest multiple of 3 is 21; ⌈0.75·40⌉ = 30 → 32 (half up from 30/4 = 7.5)
        assert_eq!(select_count(0.3, 10, 3), 21);
        assert_eq!(select_count(0.25, 10, 4), 32);
    }

    #[test]
    fn ceiling_ignores_float_dust() {
        assert_eq!(window_start(0.1, 30, 3), 3);
    }

    #[test]
    fn concave_search_finds_peak() {
        let vals = [1.0, 3.0, 5.0, 6.0, 4.0, 2.0, 0.0];
        let (best, seen) = concave_search(vals.len(), |i| Ok(vals[i])).unwrap();
        assert_eq!(best, 3);
        assert!(seen.len() < vals.len());
        let flat = [2.0; 5];
        assert_eq!(concave_search(5, |i| Ok(flat[i])).unwrap().0, 0);
    }

    #[test]
    fn best_beta_ties_to_smaller() {
        let c = SweepCurve {
            points: vec![
                SweepPoint { beta: 0.2, seed: 0, test_acc: 0.5, epochs: 1 },
                SweepPoint { beta: 0.1, seed: 0, test_acc: 0.5, epochs: 1 },
                SweepPoint { beta: 0.0, seed: 0, test_acc: 0.4, epochs: 1 },
            ],
        };
        assert_eq!(c.best_beta(), Some(0.1));
    }
}
