//! Student and expert network definitions over a flat parameter vector.
//!
//! Parameters live in one 1-D tensor so that a whole network state is a
//! single point θ; layers slice their weights out of it on the tape. Two
//! architectures are provided: an MLP and a small ConvNet made of
//! `conv3x3 → norm → relu → avgpool2x2` blocks followed by a linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{ChannelView, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use crate::util::sha256_hex;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const INSTANCENORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    None,
    Batch,
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Arch {
    /// Fully connected layers of the given widths, then a linear head.
    Mlp { hidden: Vec<usize> },
    /// One conv block per entry, each halving the spatial size.
    Convnet { channels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub arch: Arch,
    pub norm: NormMode,
    pub num_classes: usize,
    /// Per-sample shape: `[d]` or `[c, h, w]`.
    pub input_shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Ordered `(name, shape, offset)` manifest of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        let n = numel(&shape);
        self.entries.push(ParamEntry {
            name,
            shape,
            offset: self.total,
        });
        self.total += n;
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl NetSpec {
    pub fn mlp(hidden: Vec<usize>, norm: NormMode, num_classes: usize, input_shape: Vec<usize>) -> Self {
        NetSpec {
            arch: Arch::Mlp { hidden },
            norm,
            num_classes,
            input_shape,
        }
    }

    pub fn convnet(channels: Vec<usize>, norm: NormMode, num_classes: usize, input_shape: Vec<usize>) -> Self {
        NetSpec {
            arch: Arch::Convnet { channels },
            norm,
            num_classes,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Invalid("a network needs at least 2 classes".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Invalid(format!("bad input shape {:?}", self.input_shape)));
        }
        if let Arch::Convnet { channels } = &self.arch {
            let [_, h, w] = self.input_shape[..] else {
                return Err(Error::Invalid("convnet needs [c, h, w] input".into()));
            };
            let div = 1usize << channels.len();
            if channels.is_empty() || h % div != 0 || w % div != 0 {
                return Err(Error::Invalid(format!(
                    "convnet with {} blocks needs h, w divisible by {div}",
                    channels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        numel(&self.input_shape)
    }

    /// Width of the penultimate layer.
    pub fn feature_len(&self) -> usize {
        match &self.arch {
            Arch::Mlp { hidden } => hidden.last().copied().unwrap_or_else(|| self.input_len()),
            Arch::Convnet { channels } => {
                let div = 1usize << channels.len();
                channels.last().unwrap() * (self.input_shape[1] / div) * (self.input_shape[2] / div)
            }
        }
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout {
            entries: Vec::new(),
            total: 0,
        };
        let norm_params = |l: &mut Layout, i: usize, width: usize| {
            if self.norm != NormMode::None {
                l.push(format!("norm{i}.gamma"), vec![width]);
                l.push(format!("norm{i}.beta"), vec![width]);
            }
        };
        match &self.arch {
            Arch::Mlp { hidden } => {
                let mut fan_in = self.input_len();
                for (i, &w) in hidden.iter().enumerate() {
                    l.push(format!("fc{i}.weight"), vec![fan_in, w]);
                    l.push(format!("fc{i}.bias"), vec![w]);
                    norm_params(&mut l, i, w);
                    fan_in = w;
                }
            }
            Arch::Convnet { channels } => {
                let mut cin = self.input_shape[0];
                for (i, &c) in channels.iter().enumerate() {
                    l.push(format!("conv{i}.weight"), vec![c, cin, 3, 3]);
                    l.push(format!("conv{i}.bias"), vec![c]);
                    norm_params(&mut l, i, c);
                    cin = c;
                }
            }
        }
        l.push("head.weight".into(), vec![self.feature_len(), self.num_classes]);
        l.push("head.bias".into(), vec![self.num_classes]);
        l
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Short content hash identifying this architecture in stored artifacts.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("NetSpec serializes");
        sha256_hex(&json)[..16].to_string()
    }
}

/// A flat parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub flat: Tensor,
    pub layout: Layout,
}

impl ParamVector {
    pub fn new(layout: Layout, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != layout.total {
            return Err(Error::Shape(format!(
                "layout needs {} parameters, got {}",
                layout.total,
                flat.len()
            )));
        }
        Ok(ParamVector {
            flat: Tensor::vector(flat),
            layout,
        })
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let e = self.layout.get(name)?;
        let n = numel(&e.shape);
        Some(Tensor::new(e.shape.clone(), self.flat.data()[e.offset..e.offset + n].to_vec()).unwrap())
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .entries
            .iter()
            .map(|e| (e.name.clone(), self.get(&e.name).unwrap()))
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`]. Parts must follow layout order.
    pub fn flatten(layout: Layout, parts: &[(String, Tensor)]) -> Result<Self> {
        if parts.len() != layout.entries.len() {
            return Err(Error::Shape("part count does not match layout".into()));
        }
        let mut flat = Vec::with_capacity(layout.total);
        for (e, (name, t)) in layout.entries.iter().zip(parts) {
            if &e.name != name || e.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "{name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    e.name,
                    e.shape
                )));
            }
            flat.extend_from_slice(t.data());
        }
        ParamVector::new(layout, flat)
    }
}

/// Kaiming fan-in initialization, deterministic per seed.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let layout = spec.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = vec![0.0; layout.total];
    for e in &layout.entries {
        let dst = &mut flat[e.offset..e.offset + numel(&e.shape)];
        if e.name.ends_with(".gamma") {
            dst.fill(1.0);
        } else if e.name.ends_with(".weight") {
            let fan_in = if e.shape.len() == 4 {
                e.shape[1] * 9
            } else {
                e.shape[0]
            };
            let gain = if e.name.starts_with("head") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
            for v in dst.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    ParamVector::new(layout, flat)
}

/// Per-layer normalization statistics `(mean, biased variance)` for inference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    /// Statistics of the current batch, differentiated through.
    Train,
    /// Fixed statistics, e.g. from [`calibrate_norm_stats`].
    Infer(&'a NormStats),
}

pub struct Forward {
    pub logits: Var,
    /// Penultimate activations, `[B, feature_len]`.
    pub features: Var,
    /// Batch statistics observed by each batch-norm layer (train mode only).
    pub batch_stats: NormStats,
}

/// Normalizes `x` viewed as `[outer, ch, inner]` over `outer` and `inner`,
/// separately per channel. With `fixed` the given statistics are used as
/// constants instead of the batch's own.
pub fn normalize(
    tape: &Tape,
    x: &Var,
    view: ChannelView,
    eps: f64,
    fixed: Option<(&[f64], &[f64])>,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let shape = x.shape().to_vec();
    let count = (view.outer * view.inner) as f64;
    let (mean_v, var_v, inv) = match fixed {
        Some((mean, var)) => {
            let inv: Vec<f64> = var.iter().map(|v| (v + eps).powf(-0.5)).collect();
            (
                Var::constant(Tensor::vector(mean.to_vec())),
                var.to_vec(),
                Var::constant(Tensor::vector(inv)),
            )
        }
        None => {
            let s = tape.channel_sum(x, view)?;
            let mean = tape.scale(&s, 1.0 / count)?;
            let mb = tape.channel_bcast(&mean, view, &shape)?;
            let xc = tape.sub(x, &mb)?;
            let sq = tape.mul(&xc, &xc)?;
            let ss = tape.channel_sum(&sq, view)?;
            let var = tape.scale(&ss, 1.0 / count)?;
            let var_v = var.value().data().to_vec();
            let eps_t = Var::constant(Tensor::full(&[view.ch], eps));
            let inv = tape.pow(&tape.add(&var, &eps_t)?, -0.5)?;
            (mean, var_v, inv)
        }
    };
    let mean_out = mean_v.value().data().to_vec();
    let mb = tape.channel_bcast(&mean_v, view, &shape)?;
    let xc = tape.sub(x, &mb)?;
    let ib = tape.channel_bcast(&inv, view, &shape)?;
    Ok((tape.mul(&xc, &ib)?, mean_out, var_v))
}

struct Ctx<'a> {
    tape: &'a Tape,
    spec: &'a NetSpec,
    theta: &'a Var,
    layout: Layout,
    mode: Mode<'a>,
    stats: NormStats,
    norm_index: usize,
}

impl Ctx<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        let e = self
            .layout
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter {name}")))?;
        self.tape.slice(self.theta, e.offset, &e.shape)
    }

    /// `x: [n, ch, inner...]`; affine parameters are per channel.
    fn norm(&mut self, x: &Var, layer: usize, n: usize, ch: usize, inner: usize) -> Result<Var> {
        let affine = ChannelView { outer: n, ch, inner };
        let shape = x.shape().to_vec();
        let y = match self.spec.norm {
            NormMode::None => return Ok(x.clone()),
            NormMode::Batch => {
                let fixed = match self.mode {
                    Mode::Train => None,
                    Mode::Infer(stats) => {
                        let (m, v) = stats.layers.get(self.norm_index).ok_or_else(|| {
                            Error::Invalid("normalization statistics missing a layer".into())
                        })?;
                        Some((m.as_slice(), v.as_slice()))
                    }
                };
                let (y, m, v) = normalize(self.tape, x, affine, BATCHNORM_EPS, fixed)?;
                if matches!(self.mode, Mode::Train) {
                    self.stats.layers.push((m, v));
                }
                self.norm_index += 1;
                y
            }
            NormMode::Instance => {
                // Per sample and channel over space; a fully connected layer
                // has no spatial extent, so each sample is normalized over
                // its features instead.
                let view = if inner == 1 {
                    ChannelView { outer: 1, ch: n, inner: ch }
                } else {
                    ChannelView { outer: 1, ch: n * ch, inner }
                };
                normalize(self.tape, x, view, INSTANCENORM_EPS, None)?.0
            }
        };
        let gamma = self.param(&format!("norm{layer}.gamma"))?;
        let beta = self.param(&format!("norm{layer}.beta"))?;
        let g = self.tape.channel_bcast(&gamma, affine, &shape)?;
        let b = self.tape.channel_bcast(&beta, affine, &shape)?;
        self.tape.add(&self.tape.mul(&y, &g)?, &b)
    }

    fn linear(&self, x: &Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, &w)?;
        let (n, out) = (y.shape()[0], y.shape()[1]);
        let view = ChannelView { outer: n, ch: out, inner: 1 };
        let bb = self.tape.channel_bcast(&b, view, &[n, out])?;
        self.tape.add(&y, &bb)
    }
}

/// Runs the network on `x: [B, ...input_shape]` with parameters `theta`.
pub fn forward(tape: &Tape, spec: &NetSpec, theta: &Var, x: &Var, mode: Mode<'_>) -> Result<Forward> {
    let layout = spec.layout();
    if theta.shape() != [layout.total] {
        return Err(Error::Shape(format!(
            "parameters {:?} vs layout of {}",
            theta.shape(),
            layout.total
        )));
    }
    let b = x.shape()[0];
    if x.shape()[1..] != spec.input_shape[..] && numel(&x.shape()[1..]) != spec.input_len() {
        return Err(Error::Shape(format!(
            "input {:?} vs network input {:?}",
            x.shape(),
            spec.input_shape
        )));
    }
    let mut ctx = Ctx {
        tape,
        spec,
        theta,
        layout,
        mode,
        stats: NormStats::default(),
        norm_index: 0,
    };
    let features = match &spec.arch {
        Arch::Mlp { hidden } => {
            let mut h = tape.reshape(x, &[b, spec.input_len()])?;
            for (i, &w) in hidden.iter().enumerate() {
                h = ctx.linear(&h, &format!("fc{i}"))?;
                h = ctx.norm(&h, i, b, w, 1)?;
                h = tape.relu(&h)?;
            }
            h
        }
        Arch::Convnet { channels } => {
            let (mut hh, mut ww) = (spec.input_shape[1], spec.input_shape[2]);
            let mut h = tape.reshape(x, &[b, spec.input_shape[0], hh, ww])?;
            for (i, &c) in channels.iter().enumerate() {
                let w = ctx.param(&format!("conv{i}.weight"))?;
                let bias = ctx.param(&format!("conv{i}.bias"))?;
                h = tape.conv2d(&h, &w)?;
                let view = ChannelView { outer: b, ch: c, inner: hh * ww };
                let bb = tape.channel_bcast(&bias, view, h.shape())?;
                h = tape.add(&h, &bb)?;
                h = ctx.norm(&h, i, b, c, hh * ww)?;
                h = tape.relu(&h)?;
                h = tape.avgpool2x2(&h)?;
                hh /= 2;
                ww /= 2;
            }
            tape.reshape(&h, &[b, spec.feature_len()])?
        }
    };
    let logits = ctx.linear(&features, "head")?;
    Ok(Forward {
        logits,
        features,
        batch_stats: ctx.stats,
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn check_labels(spec: &NetSpec, labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&y| y >= spec.num_classes) {
        Some(y) => Err(Error::Invalid(format!(
            "label {y} out of range for {} classes",
            spec.num_classes
        ))),
        None => Ok(()),
    }
}

/// Mean cross-entropy and accuracy of `params` on one batch, using the
/// batch's own normalization statistics.
pub fn forward_loss(
    spec: &NetSpec,
    params: &ParamVector,
    images: &Tensor,
    labels: &[usize],
) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    check_labels(spec, labels)?;
    let tape = Tape::new();
    let theta = Var::constant(params.flat.clone());
    let x = Var::constant(images.clone());
    let out = forward(&tape, spec, &theta, &x, Mode::Train)?;
    let loss = tape.softmax_cross_entropy(&out.logits, labels)?;
    Ok((loss.item(), accuracy(out.logits.value(), labels)))
}

/// Loss on the tape, differentiable in `theta` and `x`.
pub fn loss_on_tape(
    tape: &Tape,
    spec: &NetSpec,
    theta: &Var,
    x: &Var,
    labels: &[usize],
    mode: Mode<'_>,
) -> Result<Var> {
    check_labels(spec, labels)?;
    let out = forward(tape, spec, theta, x, mode)?;
    tape.softmax_cross_entropy(&out.logits, labels)
}

/// Population normalization statistics: one train-mode pass over `images`.
pub fn calibrate_norm_stats(spec: &NetSpec, params: &Tensor, images: &Tensor) -> Result<NormStats> {
    if spec.norm != NormMode::Batch {
        return Ok(NormStats::default());
    }
    let tape = Tape::new();
    let out = forward(
        &tape,
        spec,
        &Var::constant(params.clone()),
        &Var::constant(images.clone()),
        Mode::Train,
    )?;
    Ok(out.batch_stats)
}

/// Inference-mode logits and penultimate features, in chunks of `chunk` rows.
pub fn infer(
    spec: &NetSpec,
    params: &Tensor,
    stats: &NormStats,
    images: &Tensor,
    chunk: usize,
) -> Result<(Tensor, Tensor)> {
    let n = images.shape()[0];
    let theta = Var::constant(params.clone());
    let (mut logits, mut feats) = (Vec::new(), Vec::new());
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let tape = Tape::new();
        let x = Var::constant(images.rows(start, count));
        let out = forward(&tape, spec, &theta, &x, Mode::Infer(stats))?;
        logits.push(out.logits.value().clone());
        feats.push(out.features.value().clone());
        start += count;
    }
    if n == 0 {
        return Ok((
            Tensor::zeros(&[0, spec.num_classes]),
            Tensor::zeros(&[0, spec.feature_len()]),
        ));
    }
    let l: Vec<&Tensor> = logits.iter().collect();
    let f: Vec<&Tensor> = feats.iter().collect();
    Ok((Tensor::concat_rows(&l)?, Tensor::concat_rows(&f)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::finite_diff_check;
    use rand::Rng;

    fn tiny_mlp(norm: NormMode) -> NetSpec {
        NetSpec::mlp(vec![5], norm, 3, vec![4])
    }

    fn tiny_conv(norm: NormMode) -> NetSpec {
        NetSpec::convnet(vec![2, 3], norm, 3, vec![1, 4, 4])
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let s = tiny_conv(NormMode::Batch);
        assert_eq!(init_params(&s, 3).unwrap(), init_params(&s, 3).unwrap());
        assert_ne!(init_params(&s, 3).unwrap(), init_params(&s, 4).unwrap());
    }

    #[test]
    fn mlp_manifest_layout() {
        let s = NetSpec::mlp(vec![4], NormMode::None, 2, vec![2]);
        let l = s.layout();
        assert_eq!(l.entries.len(), 4);
        assert_eq!(l.total, 2 * 4 + 4 + 4 * 2 + 2);
        let mut off = 0;
        for e in &l.entries {
            assert_eq!(e.offset, off);
            off += numel(&e.shape);
        }
        assert_eq!(off, l.total);
    }

    #[test]
    fn fewer_than_two_classes_rejected() {
        assert!(NetSpec::mlp(vec![4], NormMode::None, 1, vec![2]).validate().is_err());
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let p = init_params(&tiny_conv(NormMode::Instance), 9).unwrap();
        let parts = p.unflatten();
        assert_eq!(ParamVector::flatten(p.layout.clone(), &parts).unwrap(), p);
    }

    #[test]
    fn zero_weights_give_ln2_and_lowest_index_ties() {
        let s = NetSpec::mlp(vec![], NormMode::None, 2, vec![3]);
        let p = ParamVector::new(s.layout(), vec![0.0; s.param_count()]).unwrap();
        let x = random(&[4, 3], 1);
        let (loss, acc) = forward_loss(&s, &p, &x, &[0, 1, 1, 0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // Every row ties, argmax picks class 0.
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn one_sample_batch_is_per_sample_loss() {
        let s = tiny_mlp(NormMode::None);
        let p = init_params(&s, 2).unwrap();
        let x = random(&[3, 4], 5);
        let labels = [2, 0, 1];
        let tape = Tape::new();
        let out = forward(&tape, &s, &Var::constant(p.flat.clone()), &Var::constant(x.clone()), Mode::Train)
            .unwrap();
        let logp = crate::tensor::log_softmax_rows(out.logits.value().data(), 3, 3);
        for (i, &y) in labels.iter().enumerate() {
            let (l, _) = forward_loss(&s, &p, &x.rows(i, 1), &[y]).unwrap();
            assert!((l + logp[i * 3 + y]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_label_is_error() {
        let s = tiny_mlp(NormMode::None);
        let p = init_params(&s, 0).unwrap();
        assert!(forward_loss(&s, &p, &random(&[1, 4], 0), &[3]).is_err());
    }

    #[test]
    fn loss_gradient_passes_finite_differences_for_every_norm_mode() {
        for norm in [NormMode::None, NormMode::Batch, NormMode::Instance] {
            for spec in [tiny_mlp(norm), tiny_conv(norm)] {
                let p = init_params(&spec, 7).unwrap();
                let mut shape = vec![4];
                shape.extend(&spec.input_shape);
                let x = random(&shape, 8);
                let labels = [0, 1, 2, 1];
                let f = |t: &Tape, th: &Var| {
                    loss_on_tape(t, &spec, th, &Var::constant(x.clone()), &labels, Mode::Train)
                };
                let r = finite_diff_check(f, &p.flat, 1e-5, 1e-3, None).unwrap();
                assert!(r.pass, "{norm:?} {:?}: {r:?}", spec.arch);
            }
        }
    }

    #[test]
    fn instance_norm_ignores_per_sample_scale() {
        let x = random(&[3, 2, 4], 4);
        let mut scaled = x.clone();
        let factors = [0.5, 3.0, 17.0];
        for (i, c) in factors.iter().enumerate() {
            for v in &mut scaled.data_mut()[i * 8..(i + 1) * 8] {
                *v *= c;
            }
        }
        let view = ChannelView { outer: 1, ch: 6, inner: 4 };
        let tape = Tape::new();
        let (a, ..) = normalize(&tape, &Var::constant(x), view, 0.0, None).unwrap();
        let (b, ..) = normalize(&tape, &Var::constant(scaled), view, 0.0, None).unwrap();
        for (u, v) in a.value().data().iter().zip(b.value().data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn calibrated_stats_reproduce_train_mode_on_same_batch() {
        let s = tiny_conv(NormMode::Batch);
        let p = init_params(&s, 1).unwrap();
        let x = random(&[5, 1, 4, 4], 2);
        let stats = calibrate_norm_stats(&s, &p.flat, &x).unwrap();
        let (logits, _) = infer(&s, &p.flat, &stats, &x, 2).unwrap();
        let tape = Tape::new();
        let out = forward(&tape, &s, &Var::constant(p.flat.clone()), &Var::constant(x), Mode::Train).unwrap();
        for (a, b) in logits.data().iter().zip(out.logits.value().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
