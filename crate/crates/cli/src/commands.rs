use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use distillkit::augment::{AugMode, AugPolicy};
use distillkit::data::{load_idx, load_idx_raw, BlobSource, LabeledSet, SyntheticState};
use distillkit::distill::{self, RunDir};
use distillkit::eval::{self, Budget, CoverageReport, EvalResult, FeatureNet, Reduced};
use distillkit::expert::{train_experts, TrajectoryBank};
use distillkit::nets::{self, NormMode};
use distillkit::scores::{correctness_table, el2n_score, forgetting_score, import_scores};
use distillkit::select::{difficulty_order, max_beta, window_sweep, SweepInputs};
use distillkit::table::Table;
use distillkit::util::mean;
use rayon::prelude::*;

use crate::config::{DatasetConfig, Reference, RunConfig, ScoreMethod};
use crate::fail::Fail;
use crate::plot::{Chart, Series};
use crate::run::Run;

pub fn gen_data(run: &Run) -> anyhow::Result<()> {
    let (train, test) = match &run.cfg.dataset {
        DatasetConfig::Blobs {
            blobs,
            train_per_class,
            test_per_class,
        } => {
            let train = BlobSource::new(blobs.clone())?.sample(*train_per_class, run.cfg.train_split_seed())?;
            let mut clean = blobs.clone();
            clean.label_noise = 0.0;
            let test = BlobSource::new(clean)?.sample(*test_per_class, run.cfg.test_split_seed())?;
            (train, test)
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (train, st) = load_idx(train_images, train_labels)?;
            let mut test = load_idx_raw(test_images, test_labels)?;
            st.apply(&mut test.images);
            (train, test)
        }
    };
    if train.num_classes != run.cfg.net.num_classes || train.sample_shape() != run.cfg.net.input_shape.as_slice() {
        bail!(Fail::config(format!(
            "dataset has {} classes of shape {:?}, net expects {} of {:?}",
            train.num_classes,
            train.sample_shape(),
            run.cfg.net.num_classes,
            run.cfg.net.input_shape
        )));
    }
    train.save(&run.train_path())?;
    test.save(&run.test_path())?;
    println!("train {} samples, test {} samples", train.len(), test.len());
    Ok(())
}

pub fn score(run: &Run) -> anyhow::Result<()> {
    let train = run.train_set()?;
    let sc = &run.cfg.scores;
    let table = match sc.method {
        ScoreMethod::Forgetting => {
            let (t, log) = forgetting_score(&train, &run.cfg.net, &sc.train)?;
            run.write_table("correctness.csv", correctness_table(&log))?;
            t
        }
        ScoreMethod::El2n => el2n_score(&train, &run.cfg.net, &sc.train, &run.cfg.el2n_seeds())?,
        ScoreMethod::Import => {
            let path = sc.import_path.as_ref().expect("validated");
            if !path.exists() {
                bail!(Fail::missing(format!("missing score file {}", path.display())));
            }
            import_scores(path, train.len())?
        }
    };
    run.write_table("scores.csv", table.to_table())?;
    Ok(())
}

pub fn expert(run: &Run) -> anyhow::Result<()> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let seeds = run.cfg.expert_seeds();
    train_experts(&train, &run.cfg.net, &run.cfg.experts.train, &seeds, &run.experts_path(), &run.hash)?;
    let bank = TrajectoryBank::load(&run.experts_path())?;
    let mut t = Table::new(&["seed", "epochs", "train_acc", "test_acc"]);
    for (m, traj) in bank.manifests.iter().zip(&bank.trajectories) {
        let last = traj.last().expect("trajectory has checkpoints");
        let stats = nets::calibrate_norm_stats(&run.cfg.net, last, &train.images)?;
        let acc = |set: &LabeledSet| -> anyhow::Result<f64> {
            let (logits, _) = nets::infer(&run.cfg.net, last, &stats, &set.images, 256)?;
            Ok(nets::accuracy(&logits, &set.labels))
        };
        t.push(vec![
            m.seed.to_string(),
            m.epochs.to_string(),
            acc(&train)?.to_string(),
            acc(&test)?.to_string(),
        ]);
    }
    run.write_table("experts.csv", t)?;
    Ok(())
}

pub fn sweep_window(run: &Run, betas: Option<Vec<f64>>, few: bool) -> anyhow::Result<()> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let scores = run.scores(train.len())?;
    let classes = run.cfg.net.num_classes;
    let ordered = difficulty_order(&train.labels, &scores, classes)?;
    let ipc = run.cfg.distill.ipc;
    let limit = max_beta(ordered.len(), ipc, classes);
    let (betas, skipped): (Vec<f64>, Vec<f64>) = betas
        .unwrap_or_else(|| run.cfg.sweep.betas.clone())
        .into_iter()
        .partition(|&b| b <= limit + 1e-12);
    if !skipped.is_empty() {
        log::warn!("skipping betas {skipped:?}: the window would run past the end (max {limit:.4})");
    }
    if betas.is_empty() {
        bail!(Fail::config("sweep: no feasible beta"));
    }
    let budget = if few {
        Budget::Few {
            fraction: run.cfg.sweep.few_fraction,
        }
    } else {
        Budget::Full
    };
    let inp = SweepInputs {
        spec: &run.cfg.net,
        train: &train,
        test: &test,
        ordered: &ordered,
        ipc,
        eval: run.cfg.eval.protocol,
    };
    let curve = window_sweep(&inp, &betas, budget, &run.cfg.eval_seeds(run.cfg.sweep.seeds))?;
    let best = curve.best_beta().expect("non-empty sweep");
    let name = if few { "sweep_few.csv" } else { "sweep_full.csv" };
    run.write_table(name, curve.to_table().with_meta("best_beta", best))?;
    for (b, m, s) in curve.summary() {
        println!("beta {b:.4}  acc {m:.4} ± {s:.4}");
    }
    println!("best beta {best}");
    Ok(())
}

pub fn select(run: &Run, beta: Option<f64>, ipc: Option<usize>, alpha: Option<f64>) -> anyhow::Result<()> {
    let train = run.train_set()?;
    let scores = run.scores(train.len())?;
    let mut cfg = run.cfg.distill.clone();
    cfg.beta = beta.unwrap_or(cfg.beta);
    cfg.ipc = ipc.unwrap_or(cfg.ipc);
    cfg.alpha = alpha.unwrap_or(cfg.alpha);
    cfg.validate(run.cfg.net.num_classes).map_err(|e| Fail::config(e.to_string()))?;
    let state = distill::initialize(&cfg, &train, &scores, &run.hash)?;
    state.save(&run.select_path())?;
    println!(
        "{} rows ({} frozen) written to {}",
        state.len(),
        state.select_indices().len(),
        run.select_path().display()
    );
    Ok(())
}

pub fn distill(run: &Run, resume: bool, init: Option<PathBuf>) -> anyhow::Result<()> {
    let bank = run.bank()?;
    let train = run.train_set()?;
    let cfg = &run.cfg.distill;
    let needs_scores = cfg.init_kind() == distill::InitKind::Window;
    let scores = if needs_scores || init.is_none() {
        run.scores(train.len()).or_else(|e| if needs_scores { Err(e) } else { Ok(vec![0.0; train.len()]) })?
    } else {
        Vec::new()
    };
    let dir = RunDir::new(&run.dir);
    let out = distill::run_in_dir(
        &dir,
        cfg,
        &bank,
        || match &init {
            Some(p) => {
                let mut s = SyntheticState::load(p)?;
                s.config_hash = run.hash.clone();
                Ok(s)
            }
            None => distill::initialize(cfg, &train, &scores, &run.hash),
        },
        resume,
        &run.hash,
    )?;
    println!("finished at iteration {} with eta {}", out.iteration, out.eta);
    Ok(())
}

/// What `eval --input` names: a file, or one of the real-data baselines.
pub enum EvalInput {
    State(PathBuf),
    Full,
    Random,
    Window,
}

impl EvalInput {
    pub fn parse(s: &str, run_dir: &Path) -> Self {
        match s {
            "full" => EvalInput::Full,
            "random" => EvalInput::Random,
            "window" => EvalInput::Window,
            "synthetic" => EvalInput::State(run_dir.join("synthetic.smsy")),
            other => EvalInput::State(PathBuf::from(other)),
        }
    }
}

pub fn eval_label(input: &EvalInput) -> String {
    match input {
        EvalInput::Full => "full".into(),
        EvalInput::Random => "random".into(),
        EvalInput::Window => "window".into(),
        EvalInput::State(p) => p.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned()),
    }
}

pub fn evaluate_input(run: &Run, input: &EvalInput, seeds: usize) -> anyhow::Result<EvalResult> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let ipc = run.cfg.distill.ipc;
    let reduced = match input {
        EvalInput::Full => Reduced::real(train.clone()),
        EvalInput::Random => {
            let mut rng = distillkit::util::rng_for(run.cfg.seed, 0x5EED, 0);
            let idx = distillkit::data::random_per_class(&train.labels, train.num_classes, ipc, &mut rng)?;
            Reduced::real(train.subset(&idx))
        }
        EvalInput::Window => {
            let scores = run.scores(train.len())?;
            let mut cfg = run.cfg.distill.clone();
            cfg.alpha = 0.0;
            cfg.init = Some(distill::InitKind::Window);
            Reduced::real(distill::initialize(&cfg, &train, &scores, &run.hash)?.as_labeled_set())
        }
        EvalInput::State(p) => Reduced::synthetic(&run.state(p)?),
    };
    let hard = run.test_hard(&test);
    Ok(eval::evaluate(
        &run.cfg.net,
        &reduced,
        &test,
        train.len(),
        &run.cfg.eval.protocol,
        &run.cfg.eval_seeds(seeds),
        hard.as_deref(),
    )?)
}

pub fn eval(run: &Run, input: &str, seeds: Option<usize>) -> anyhow::Result<()> {
    let input = EvalInput::parse(input, &run.dir);
    let res = evaluate_input(run, &input, seeds.unwrap_or(run.cfg.eval.seeds))?;
    let label = eval_label(&input);
    run.write_table(&format!("eval_{label}.csv"), res.to_table().with_meta("input", &label))?;
    println!("{label}: test accuracy {:.4} ± {:.4} over {} seeds ({} epochs)", res.mean(), res.std(), res.per_seed.len(), res.epochs);
    Ok(())
}

/// The final-expert feature extractor, its radius and the reference set.
pub struct CoverageSetup {
    pub net: FeatureNet,
    pub radius: f64,
    pub reference: LabeledSet,
    pub hard: Option<Vec<bool>>,
}

pub fn coverage_setup(run: &Run, reference: Reference) -> anyhow::Result<CoverageSetup> {
    let bank = run.bank()?;
    let train = run.train_set()?;
    let id = format!(
        "expert seed {} epoch {} penultimate",
        bank.manifests[0].seed,
        bank.epochs()
    );
    let net = FeatureNet::new(run.cfg.net.clone(), bank.final_params().clone(), &train.images, id)?;
    let radius = eval::nn_radius(&net.features(&train.images)?)?;
    let reference = match reference {
        Reference::Test => run.test_set()?,
        Reference::Train => train,
    };
    let hard = run.test_hard(&reference);
    Ok(CoverageSetup {
        net,
        radius,
        reference,
        hard,
    })
}

const COVERAGE_HEADER: [&str; 10] = [
    "label", "ipc", "iteration", "radius", "overall", "easy", "hard", "n_easy", "n_hard", "extractor",
];

fn coverage_row(label: &str, ipc: usize, iteration: u64, r: &CoverageReport) -> Vec<String> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    vec![
        label.to_string(),
        ipc.to_string(),
        iteration.to_string(),
        r.radius.to_string(),
        r.overall.to_string(),
        opt(r.easy),
        opt(r.hard),
        r.n_easy.to_string(),
        r.n_hard.to_string(),
        r.extractor.clone(),
    ]
}

pub fn coverage(
    run: &Run,
    input: Option<PathBuf>,
    timeline: Option<Option<PathBuf>>,
    reference: Option<Reference>,
    features: bool,
) -> anyhow::Result<()> {
    let reference = reference.unwrap_or(run.cfg.coverage.reference);
    let setup = coverage_setup(run, reference)?;
    let ref_name = match reference {
        Reference::Test => "test",
        Reference::Train => "train",
    };
    if let Some(dir) = timeline {
        let dir = dir.unwrap_or_else(|| RunDir::new(&run.dir).checkpoints());
        if !dir.is_dir() {
            bail!(Fail::missing(format!("missing checkpoint directory {}", dir.display())));
        }
        let rows = eval::coverage_timeline(&dir, &setup.net, &setup.reference.images, setup.radius, setup.hard.as_deref())?;
        let mut t = Table::new(&COVERAGE_HEADER).with_meta("reference", ref_name);
        for (it, r) in &rows {
            t.push(coverage_row(&run.cfg.name, run.cfg.distill.ipc, *it, r));
        }
        run.write_table("coverage_timeline.csv", t)?;
        if let (Some((a, first)), Some((b, last))) = (rows.first(), rows.last()) {
            println!("coverage {:.4} at iteration {a} -> {:.4} at iteration {b}", first.overall, last.overall);
        }
        return Ok(());
    }
    let path = input.unwrap_or_else(|| run.synthetic_path());
    let state = run.state(&path)?;
    let ref_f = setup.net.features(&setup.reference.images)?;
    let syn_f = setup.net.features(&state.pixels)?;
    let r = eval::coverage(&ref_f, &syn_f, setup.radius, setup.hard.as_deref(), &setup.net.id)?;
    let label = path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
    let mut t = Table::new(&COVERAGE_HEADER).with_meta("reference", ref_name);
    t.push(coverage_row(&run.cfg.name, state.ipc, state.iteration, &r));
    run.write_table(&format!("coverage_{label}.csv"), t)?;
    if features {
        run.write_table(
            &format!("features_{label}.csv"),
            eval::feature_table(&syn_f, &state.labels).with_meta("extractor", &setup.net.id),
        )?;
        run.write_table(
            &format!("features_{ref_name}.csv"),
            eval::feature_table(&ref_f, &setup.reference.labels).with_meta("extractor", &setup.net.id),
        )?;
    }
    println!("coverage {:.4} (radius {:.4})", r.overall, r.radius);
    Ok(())
}

pub fn grad_norms(run: &Run, input: Option<PathBuf>, epochs: usize, seeds: usize) -> anyhow::Result<()> {
    let path = input.unwrap_or_else(|| run.synthetic_path());
    let state = run.state(&path)?;
    let rows = eval::grad_norm_profile(&state, &run.cfg.net, &run.cfg.eval.protocol, epochs, &run.cfg.eval_seeds(seeds))?;
    run.write_table("grad_norms.csv", eval::grad_norm_table(&rows))?;
    Ok(())
}

// ── ablation ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateParam {
    Alpha,
    Aug,
    Norm,
    MaxStartEpoch,
}

impl AblateParam {
    fn name(self) -> &'static str {
        match self {
            AblateParam::Alpha => "alpha",
            AblateParam::Aug => "aug",
            AblateParam::Norm => "norm",
            AblateParam::MaxStartEpoch => "max_start_epoch",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: &str) -> anyhow::Result<()> {
        let bad = |what: &str| Fail::config(format!("ablate {}: {value:?} is not {what}", self.name()));
        match self {
            AblateParam::Alpha => cfg.distill.alpha = value.parse().map_err(|_| bad("a number"))?,
            AblateParam::MaxStartEpoch => cfg.distill.max_start_epoch = value.parse().map_err(|_| bad("an integer"))?,
            AblateParam::Aug => {
                let mode: AugMode = serde_json::from_value(serde_json::Value::String(value.into()))
                    .map_err(|_| bad("one of none, simple, dsa, combined"))?;
                cfg.distill.aug = AugPolicy::new(mode);
            }
            AblateParam::Norm => {
                cfg.net.norm = serde_json::from_value::<NormMode>(serde_json::Value::String(value.into()))
                    .map_err(|_| bad("one of none, batch, instance"))?;
            }
        }
        Ok(())
    }
}

/// Distills and evaluates one configuration per value, each in its own run
/// directory under `<run>/ablate`, reusing the parent's data and scores.
pub fn ablate(run: &Run, param: AblateParam, values: &[String]) -> anyhow::Result<()> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let scores = run.scores(train.len())?;
    let parent_bank = run.bank()?;
    let root = run.path("ablate");
    let mut subs = Vec::new();
    for v in values {
        let mut cfg = run.cfg.clone();
        param.apply(&mut cfg, v)?;
        cfg.name = format!("{}_{v}", param.name());
        subs.push((v.clone(), Run::open(cfg, &root)?));
    }
    let hard = run.test_hard(&test);
    let results = subs
        .par_iter()
        .map(|(v, sub)| -> anyhow::Result<(String, EvalResult)> {
            let own;
            let bank = if sub.cfg.net == run.cfg.net {
                &parent_bank
            } else {
                let seeds = sub.cfg.expert_seeds();
                train_experts(&train, &sub.cfg.net, &sub.cfg.experts.train, &seeds, &sub.experts_path(), &sub.hash)?;
                own = TrajectoryBank::load(&sub.experts_path())?;
                &own
            };
            let cfg = &sub.cfg.distill;
            let state = distill::run_in_dir(
                &RunDir::new(&sub.dir),
                cfg,
                bank,
                || distill::initialize(cfg, &train, &scores, &sub.hash),
                false,
                &sub.hash,
            )
            .with_context(|| format!("ablation {}={v}", param.name()))?;
            let res = eval::evaluate(
                &sub.cfg.net,
                &Reduced::synthetic(&state),
                &test,
                train.len(),
                &sub.cfg.eval.protocol,
                &sub.cfg.eval_seeds(sub.cfg.eval.seeds),
                hard.as_deref(),
            )?;
            sub.write_table("eval_synthetic.csv", res.to_table())?;
            Ok((v.clone(), res))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut t = Table::new(&["param", "value", "seed", "test_acc"]);
    for (v, res) in &results {
        for s in &res.per_seed {
            t.push(vec![param.name().into(), v.clone(), s.seed.to_string(), s.test_acc.to_string()]);
        }
        println!("{}={v}: {:.4} ± {:.4}", param.name(), res.mean(), res.std());
    }
    run.write_table(&format!("ablation_{}.csv", param.name()), t)?;
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────

fn csv_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn source_label(path: &Path, t: &Table) -> String {
    let stem = path.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned());
    let run = path.parent().and_then(|p| p.file_name()).map(|s| s.to_string_lossy().into_owned());
    match (run, t.meta.get("input")) {
        (Some(r), Some(i)) => format!("{r}/{i}"),
        (Some(r), None) => format!("{r}/{stem}"),
        _ => stem,
    }
}

/// Mean of `y` per distinct `x`, in order of `x`.
fn mean_by(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for (&x, &y) in xs.iter().zip(ys) {
        groups.entry(ordered_key(x)).or_insert((x, Vec::new())).1.push(y);
    }
    groups.into_values().map(|(x, v)| (x, mean(&v))).collect()
}

fn ordered_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 { !b } else { b | (1 << 63) }
}

pub fn report(run: &Run, inputs: Vec<PathBuf>, force: bool) -> anyhow::Result<()> {
    let inputs = if inputs.is_empty() { csv_files(&run.dir)? } else { inputs };
    let mut tables = Vec::new();
    for p in &inputs {
        if !p.exists() {
            bail!(Fail::missing(format!("missing report input {}", p.display())));
        }
        tables.push((p.clone(), Table::read(p)?));
    }
    let hashes: std::collections::BTreeSet<&str> = tables
        .iter()
        .map(|(_, t)| t.meta.get("config_hash").map_or("(none)", String::as_str))
        .collect();
    if hashes.len() > 1 && !force {
        bail!(Fail::config(format!(
            "report inputs come from different configs ({}); pass --force to combine them",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let out = run.path("report");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let has = |t: &Table, cols: &[&str]| cols.iter().all(|c| t.header.iter().any(|h| h == c));
    let mut charts: BTreeMap<String, Chart> = BTreeMap::new();
    let mut bundles: BTreeMap<(&str, String), Table> = BTreeMap::new();
    let chart = |charts: &mut BTreeMap<String, Chart>, key: &str, title: &str, x: &str, y: &str| {
        charts.entry(key.to_string()).or_insert_with(|| Chart {
            title: title.into(),
            x_label: x.into(),
            y_label: y.into(),
            series: Vec::new(),
        });
    };
    for (path, t) in &tables {
        let label = source_label(path, t);
        let kind = if has(t, &["iteration", "matching_loss"]) {
            chart(&mut charts, "matching_loss", "Matching loss", "iteration", "matching loss");
            let pts = t.f64_column("iteration")?.into_iter().zip(t.f64_column("matching_loss")?).collect();
            charts.get_mut("matching_loss").expect("inserted").series.push(Series { label, points: pts });
            "matching_loss"
        } else if has(t, &["iteration", "overall", "ipc"]) && t.rows.len() > 1 {
            chart(&mut charts, "coverage_timeline", "Coverage over distillation", "iteration", "coverage");
            let pts = t.f64_column("iteration")?.into_iter().zip(t.f64_column("overall")?).collect();
            charts.get_mut("coverage_timeline").expect("inserted").series.push(Series { label, points: pts });
            "coverage_timeline"
        } else if has(t, &["overall", "ipc"]) {
            "coverage"
        } else if has(t, &["beta", "test_acc"]) {
            chart(&mut charts, "window_sweep", "Window start sweep", "beta", "test accuracy");
            let pts = mean_by(&t.f64_column("beta")?, &t.f64_column("test_acc")?);
            charts.get_mut("window_sweep").expect("inserted").series.push(Series { label, points: pts });
            "window_sweep"
        } else if has(t, &["param", "value", "test_acc"]) {
            let param = t.rows.first().map_or("param".to_string(), |r| r[0].clone());
            let key = format!("ablation_{param}");
            chart(&mut charts, &key, &format!("Ablation over {param}"), &param, "test accuracy");
            let vals: Option<Vec<f64>> = t.rows.iter().map(|r| r[1].parse().ok()).collect();
            let accs = t.f64_column("test_acc")?;
            let pts = match vals {
                Some(v) => mean_by(&v, &accs),
                None => {
                    let mut order: Vec<String> = Vec::new();
                    for r in &t.rows {
                        if !order.contains(&r[1]) {
                            order.push(r[1].clone());
                        }
                    }
                    let idx: Vec<f64> = t.rows.iter().map(|r| order.iter().position(|o| *o == r[1]).unwrap() as f64).collect();
                    mean_by(&idx, &accs)
                }
            };
            charts.get_mut(&key).expect("inserted").series.push(Series { label, points: pts });
            "ablation"
        } else if has(t, &["seed", "test_acc", "easy_acc"]) {
            "eval"
        } else {
            log::info!("report: no chart for {}", path.display());
            continue;
        };
        let mut header = vec!["source".to_string()];
        header.extend(t.header.iter().cloned());
        let bundle = bundles.entry((kind, t.header.join(","))).or_insert_with(|| Table {
            header,
            ..Default::default()
        });
        for r in &t.rows {
            let mut row = vec![source_label(path, t)];
            row.extend(r.iter().cloned());
            bundle.push(row);
        }
    }
    // Coverage versus IPC for each label, overall and per group.
    let covs: Vec<&Table> = bundles.iter().filter(|(k, _)| k.0 == "coverage").map(|(_, t)| t).collect();
    for t in covs {
        let li = t.column("label")?;
        let mut by_label: BTreeMap<String, Vec<&Vec<String>>> = BTreeMap::new();
        for r in &t.rows {
            by_label.entry(r[li].clone()).or_default().push(r);
        }
        chart(&mut charts, "coverage_ipc", "Coverage by IPC", "ipc", "coverage");
        for (label, rows) in by_label {
            for group in ["overall", "easy", "hard"] {
                let gi = t.column(group)?;
                let ii = t.column("ipc")?;
                let mut pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter_map(|r| Some((r[ii].parse().ok()?, r[gi].parse().ok()?)))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                if !pts.is_empty() {
                    charts.get_mut("coverage_ipc").expect("inserted").series.push(Series {
                        label: format!("{label} {group}"),
                        points: pts,
                    });
                }
            }
        }
    }
    let hash_meta = hashes.into_iter().collect::<Vec<_>>().join(" ");
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for ((kind, _), t) in bundles {
        let n = seen.entry(kind.to_string()).or_insert(0);
        let name = if *n == 0 { format!("{kind}.csv") } else { format!("{kind}_{n}.csv") };
        *n += 1;
        t.with_meta("config_hash", &hash_meta).write(&out.join(&name))?;
    }
    for (key, c) in &charts {
        let path = out.join(format!("{key}.svg"));
        std::fs::write(&path, c.to_svg()).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_by_groups_and_orders() {
        let pts = mean_by(&[0.5, -1.0, 0.5, 0.0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pts, vec![(-1.0, 2.0), (0.0, 4.0), (0.5, 2.0)]);
    }
}
