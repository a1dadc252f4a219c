//! Differentiable siamese augmentation for learnable rows and the usual
//! crop-and-flip for real samples, routed per row by the frozen mask.
//!
//! Spatial transforms are index maps executed as a single gather, so their
//! gradient is the matching scatter; cutout is a constant multiplicative mask
//! and brightness an additive constant. Zero-filled regions receive zero
//! gradient.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{IndexMap, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding of the simple random crop, and the translate range of the
/// differentiable ops, in pixels.
pub const SHIFT: i64 = 2;
pub const BRIGHTNESS: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    None,
    Simple,
    Dsa,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsaOps {
    pub flip: bool,
    pub translate: bool,
    pub cutout: bool,
    pub brightness: bool,
}

impl Default for DsaOps {
    fn default() -> Self {
        DsaOps {
            flip: true,
            translate: true,
            cutout: true,
            brightness: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPolicy {
    pub mode: AugMode,
    #[serde(default)]
    pub ops: DsaOps,
}

impl AugPolicy {
    pub fn new(mode: AugMode) -> Self {
        AugPolicy {
            mode,
            ops: DsaOps::default(),
        }
    }

    /// DSA restricted to a single op, mostly for tests and ablations.
    pub fn dsa_only(ops: DsaOps) -> Self {
        AugPolicy {
            mode: AugMode::Dsa,
            ops,
        }
    }
}

/// Parameters drawn for the differentiable ops, shared by every routed row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DsaParams {
    pub brightness: Option<f64>,
    pub translate: Option<(i64, i64)>,
    /// Top-left corner and side of the zeroed square.
    pub cutout: Option<(usize, usize, usize)>,
    pub flip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimpleParams {
    pub shift: (i64, i64),
    pub flip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowAug {
    Identity,
    Simple(SimpleParams),
    Dsa(DsaParams),
}

/// What each row of one call received.
#[derive(Clone, Debug, PartialEq)]
pub struct AugRecord {
    pub rows: Vec<RowAug>,
}

impl AugRecord {
    pub fn dsa_params(&self) -> Vec<DsaParams> {
        self.rows
            .iter()
            .filter_map(|r| match r {
                RowAug::Dsa(p) => Some(*p),
                _ => None,
            })
            .collect()
    }
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        [n, h, w] => Ok((n, 1, h, w)),
        _ => Err(Error::Shape(format!("augmentation needs image batches, got {shape:?}"))),
    }
}

fn sample_dsa(ops: &DsaOps, h: usize, w: usize, rng: &mut impl Rng) -> DsaParams {
    let brightness = ops.brightness.then(|| rng.random_range(-BRIGHTNESS..=BRIGHTNESS));
    let translate = ops
        .translate
        .then(|| (rng.random_range(-SHIFT..=SHIFT), rng.random_range(-SHIFT..=SHIFT)));
    let cutout = ops.cutout.then(|| {
        let side = (h.min(w) / 2).max(1);
        (rng.random_range(0..=h - side), rng.random_range(0..=w - side), side)
    });
    let flip = ops.flip && rng.random_bool(0.5);
    DsaParams {
        brightness,
        translate,
        cutout,
        flip,
    }
}

fn sample_simple(rng: &mut impl Rng) -> SimpleParams {
    SimpleParams {
        shift: (rng.random_range(-SHIFT..=SHIFT), rng.random_range(-SHIFT..=SHIFT)),
        flip: rng.random_bool(0.5),
    }
}

/// Source pixel for output `(i, j)` after shifting by `(dy, dx)` and then
/// optionally mirroring.
fn source(i: usize, j: usize, h: usize, w: usize, shift: (i64, i64), flip: bool) -> Option<(usize, usize)> {
    let j = if flip { w - 1 - j } else { j };
    let si = i as i64 - shift.0;
    let sj = j as i64 - shift.1;
    (si >= 0 && sj >= 0 && si < h as i64 && sj < w as i64).then_some((si as usize, sj as usize))
}

/// Augments `batch` (`[N, C, H, W]` or `[N, H, W]`). `frozen` routes rows in
/// combined mode: frozen rows get the simple augmentation, the rest the
/// differentiable one.
pub fn apply(
    tape: &Tape,
    policy: &AugPolicy,
    batch: &Var,
    frozen: Option<&[bool]>,
    rng: &mut impl Rng,
) -> Result<(Var, AugRecord)> {
    let shape = batch.shape().to_vec();
    if policy.mode == AugMode::None {
        return Ok((
            batch.clone(),
            AugRecord {
                rows: vec![RowAug::Identity; shape.first().copied().unwrap_or(0)],
            },
        ));
    }
    let (n, c, h, w) = image_dims(&shape)?;
    let routes_simple: Vec<bool> = match policy.mode {
        AugMode::Simple => vec![true; n],
        AugMode::Dsa => vec![false; n],
        AugMode::Combined => {
            let f = frozen.ok_or_else(|| {
                Error::Invalid("combined augmentation needs a frozen mask to route rows".into())
            })?;
            if f.len() != n {
                return Err(Error::Shape(format!("{n} rows but {} frozen flags", f.len())));
            }
            f.to_vec()
        }
        AugMode::None => unreachable!(),
    };

    let dsa = routes_simple
        .iter()
        .any(|s| !s)
        .then(|| sample_dsa(&policy.ops, h, w, rng));
    let rows: Vec<RowAug> = routes_simple
        .iter()
        .map(|&s| if s { RowAug::Simple(sample_simple(rng)) } else { RowAug::Dsa(dsa.unwrap()) })
        .collect();

    let plane = h * w;
    let row_len = c * plane;
    let mut x = batch.clone();

    if let Some(b) = dsa.and_then(|p| p.brightness) {
        let mut add = vec![0.0; n * row_len];
        for (r, aug) in rows.iter().enumerate() {
            if matches!(aug, RowAug::Dsa(_)) {
                add[r * row_len..(r + 1) * row_len].fill(b);
            }
        }
        x = tape.add(&x, &Var::constant(Tensor::new(shape.clone(), add)?))?;
    }

    let spatial = |aug: &RowAug| match aug {
        RowAug::Simple(p) => Some((p.shift, p.flip)),
        RowAug::Dsa(p) => {
            let shift = p.translate.unwrap_or((0, 0));
            (shift != (0, 0) || p.flip).then_some((shift, p.flip))
        }
        RowAug::Identity => None,
    };
    if rows.iter().any(|a| spatial(a).is_some_and(|s| s != ((0, 0), false))) {
        let mut src = Vec::with_capacity(n * row_len);
        for (r, aug) in rows.iter().enumerate() {
            let (shift, flip) = spatial(aug).unwrap_or(((0, 0), false));
            for ch in 0..c {
                let base = r * row_len + ch * plane;
                for i in 0..h {
                    for j in 0..w {
                        src.push(source(i, j, h, w, shift, flip).map(|(si, sj)| base + si * w + sj));
                    }
                }
            }
        }
        let map = Rc::new(IndexMap {
            src,
            in_shape: shape.clone(),
            out_shape: shape.clone(),
        });
        x = tape.gather(&x, &map)?;
    }

    if let Some((y0, x0, side)) = dsa.and_then(|p| p.cutout) {
        let mut mask = vec![1.0; n * row_len];
        for (r, aug) in rows.iter().enumerate() {
            if !matches!(aug, RowAug::Dsa(_)) {
                continue;
            }
            for ch in 0..c {
                for i in y0..y0 + side {
                    let start = r * row_len + ch * plane + i * w + x0;
                    mask[start..start + side].fill(0.0);
                }
            }
        }
        x = tape.mul(&x, &Var::constant(Tensor::new(shape.clone(), mask)?))?;
    }

    Ok((x, AugRecord { rows }))
}

/// Non-differentiable convenience for training loops.
pub fn apply_tensor(
    policy: &AugPolicy,
    batch: &Tensor,
    frozen: Option<&[bool]>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if policy.mode == AugMode::None {
        return Ok(batch.clone());
    }
    let tape = Tape::new();
    let (y, _) = apply(&tape, policy, &Var::constant(batch.clone()), frozen, rng)?;
    Ok(y.value().clone())
}
