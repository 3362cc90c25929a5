//! Sparse regional attention.
//!
//! One attention module computes, per region of tokens `F` with cells `I`,
//!
//! ```text
//! F' = MSA(LN(F), PE(I)) + F
//! F~ = MLP(LN(F')) + F'
//! ```
//!
//! with the positional encoding added to queries and keys only. Regions are
//! executed in padded buckets (see [`crate::grouping`]); [`reference`] holds
//! an unpadded per-region loop used as an oracle.

mod block;
mod mha;
pub mod reference;
mod trace;

use std::f64::consts::TAU;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};

use crate::error::{arg_err, config_err, Result};
use crate::grouping::RegionAssignment;
use crate::real::Real;
use crate::rng::XorShift64Star;
use crate::voxelizer::Cell;

pub use block::{sra_block, sra_block_backward, sra_block_forward, SraCache, SraOutput};
pub use mha::{masked_mha, masked_mha_backward, masked_mha_forward, MhaCache};
pub use trace::{export_attention, write_attention_csv, AttentionRecord, AttentionTrace, TraceRegion};

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Logit written into masked key slots before the softmax max-subtraction.
pub const MASKED_LOGIT: f64 = -1e30;

/// How token cells are mapped to encoding phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeMode {
    /// Offset from the region's lower-left cell, scaled by `2π / region cells`.
    #[default]
    RegionLocal,
    /// Grid cell index, scaled by `2π / grid cells`.
    Global,
}

/// Inputs the positional encoding needs beyond the cells themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeContext {
    pub mode: PeMode,
    pub grid_nx: usize,
    pub grid_ny: usize,
}

/// Sinusoidal encoding of phases already scaled to `[0, 2π]`.
///
/// x uses channels `[0, C/2)`, y uses `[C/2, C)`; within each half, pair
/// `t` holds `(sin(p·f_t), cos(p·f_t))` with `f_t = 10000^(-2t / (C/2))`.
pub fn sinusoidal_encoding<T: Real>(phases: &[(f64, f64)], channels: usize) -> Result<Array2<T>> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(config_err!("positional encoding needs channels divisible by 4, got {channels}"));
    }
    let half = channels / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|t| 10000f64.powf(-(2.0 * t as f64) / half as f64)).collect();
    let mut out = Array2::<T>::zeros((phases.len(), channels));
    for (mut row, &(px, py)) in out.outer_iter_mut().zip(phases) {
        for (t, f) in freqs.iter().enumerate() {
            let (sx, cx) = (px * f).sin_cos();
            let (sy, cy) = (py * f).sin_cos();
            row[2 * t] = T::of(sx);
            row[2 * t + 1] = T::of(cx);
            row[half + 2 * t] = T::of(sy);
            row[half + 2 * t + 1] = T::of(cy);
        }
    }
    Ok(out)
}

/// Integer phase numerators and their denominators `(nx, ny)`: the phase
/// of a token is `2π·(px / nx, py / ny)`.
fn phase_indices(coords: &[Cell], assignment: &RegionAssignment, ctx: PeContext) -> (Vec<(u32, u32)>, (u32, u32)) {
    match ctx.mode {
        PeMode::RegionLocal => {
            let idx = coords
                .iter()
                .enumerate()
                .map(|(t, c)| {
                    let (ox, oy) = assignment.region_origin(assignment.regions[assignment.region_of[t]].key);
                    ((c.ix as i64 - ox) as u32, (c.iy as i64 - oy) as u32)
                })
                .collect();
            (idx, (assignment.cells.nx, assignment.cells.ny))
        }
        PeMode::Global => (coords.iter().map(|c| (c.ix, c.iy)).collect(), (ctx.grid_nx as u32, ctx.grid_ny as u32)),
    }
}

/// Encoding phases for every token under `ctx`.
pub fn pe_phases(coords: &[Cell], assignment: &RegionAssignment, ctx: PeContext) -> Vec<(f64, f64)> {
    let (idx, (nx, ny)) = phase_indices(coords, assignment, ctx);
    idx.iter().map(|&(px, py)| (TAU * px as f64 / nx as f64, TAU * py as f64 / ny as f64)).collect()
}

/// Positional encoding rows for the tokens of one grouping.
///
/// Phases take few distinct values, so each axis is encoded once per value
/// and rows are assembled from the two tables. Values are identical to
/// [`sinusoidal_encoding`] of [`pe_phases`].
pub fn positional_encoding<T: Real>(
    coords: &[Cell],
    assignment: &RegionAssignment,
    channels: usize,
    ctx: PeContext,
) -> Result<Array2<T>> {
    if coords.len() != assignment.num_tokens() {
        return Err(arg_err!("{} coords for an assignment of {} tokens", coords.len(), assignment.num_tokens()));
    }
    let (idx, (nx, ny)) = phase_indices(coords, assignment, ctx);
    let table = |n: u32| -> Result<Array2<T>> {
        let phases: Vec<(f64, f64)> = (0..n).map(|p| (TAU * p as f64 / n as f64, 0.0)).collect();
        sinusoidal_encoding(&phases, channels)
    };
    let (tx, ty) = (table(nx)?, table(ny)?);
    let half = channels / 2;
    let mut out = Array2::<T>::zeros((coords.len(), channels));
    for (mut row, &(px, py)) in out.outer_iter_mut().zip(&idx) {
        if px >= nx || py >= ny {
            return Err(arg_err!("phase index ({px}, {py}) outside ({nx}, {ny})"));
        }
        row.slice_mut(s![..half]).assign(&tx.slice(s![px as usize, ..half]));
        row.slice_mut(s![half..]).assign(&ty.slice(s![py as usize, ..half]));
    }
    Ok(out)
}

/// Saved normalization state for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LnCache<T> {
    pub xhat: Array2<T>,
    pub inv_std: Array1<T>,
}

/// Row-wise layer normalization with `ε = 1e-5`.
pub fn layer_norm<T: Real>(x: ArrayView2<'_, T>, gain: ArrayView1<'_, T>, bias: ArrayView1<'_, T>) -> Array2<T> {
    layer_norm_forward(x, gain, bias).0
}

pub fn layer_norm_forward<T: Real>(
    x: ArrayView2<'_, T>,
    gain: ArrayView1<'_, T>,
    bias: ArrayView1<'_, T>,
) -> (Array2<T>, LnCache<T>) {
    let c = T::of(x.ncols() as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::<T>::zeros(x.nrows());
    for (mut row, s) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / c;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / c;
        *s = T::one() / (var + eps).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let mut y = &xhat * &gain;
    y += &bias;
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Real>(
    dy: ArrayView2<'_, T>,
    cache: &LnCache<T>,
    gain: ArrayView1<'_, T>,
) -> (Array2<T>, Array1<T>, Array1<T>) {
    let c = T::of(dy.ncols() as f64);
    let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let mut dx = &dy * &gain;
    for ((mut row, xh), &s) in dx.outer_iter_mut().zip(cache.xhat.outer_iter()).zip(cache.inv_std.iter()) {
        let mean_d = row.sum() / c;
        let mean_dx = row.iter().zip(xh.iter()).fold(T::zero(), |acc, (&d, &h)| acc + d * h) / c;
        row.zip_mut_with(&xh, |d, &h| *d = s * (*d - mean_d - h * mean_dx));
    }
    (dx, dgain, dbias)
}

/// Weights of one attention module. Linear maps are stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SraBlockParams<T> {
    pub heads: usize,
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

macro_rules! for_each_tensor {
    ($mac:ident) => {
        $mac!(ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2)
    };
}

/// Tensor names in serialization order.
pub const SRA_TENSOR_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2",
    "b2",
];

impl<T: Real> SraBlockParams<T> {
    /// All-zero projections and MLP; unit layer-norm gains.
    pub fn zeros(channels: usize, hidden: usize, heads: usize) -> Self {
        let v = |n| Array1::<T>::zeros(n);
        let m = |r, c| Array2::<T>::zeros((r, c));
        Self {
            heads,
            ln1_gain: Array1::ones(channels),
            ln1_bias: v(channels),
            wq: m(channels, channels),
            bq: v(channels),
            wk: m(channels, channels),
            bk: v(channels),
            wv: m(channels, channels),
            bv: v(channels),
            wo: m(channels, channels),
            bo: v(channels),
            ln2_gain: Array1::ones(channels),
            ln2_bias: v(channels),
            w1: m(channels, hidden),
            b1: v(hidden),
            w2: m(hidden, channels),
            b2: v(channels),
        }
    }

    /// Glorot-uniform weights; small random biases and gains near one.
    pub fn random(channels: usize, hidden: usize, heads: usize, rng: &mut XorShift64Star) -> Self {
        let mut p = Self::zeros(channels, hidden, heads);
        for (name, mut t) in p.tensors_mut() {
            let shape = t.shape().to_vec();
            let (lo, hi) = match (name, shape.len()) {
                (_, 2) => {
                    let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (-a, a)
                }
                ("ln1_gain" | "ln2_gain", _) => (0.9, 1.1),
                _ => (-0.1, 0.1),
            };
            t.mapv_inplace(|_| T::of(rng.uniform(lo, hi)));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.wq.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let h = self.hidden();
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(config_err!("channels {c} not divisible by {} heads", self.heads));
        }
        let expect: [(&str, &[usize]); 16] = [
            ("ln1_gain", &[c]),
            ("ln1_bias", &[c]),
            ("wq", &[c, c]),
            ("bq", &[c]),
            ("wk", &[c, c]),
            ("bk", &[c]),
            ("wv", &[c, c]),
            ("bv", &[c]),
            ("wo", &[c, c]),
            ("bo", &[c]),
            ("ln2_gain", &[c]),
            ("ln2_bias", &[c]),
            ("w1", &[c, h]),
            ("b1", &[h]),
            ("w2", &[h, c]),
            ("b2", &[c]),
        ];
        for ((name, t), (ename, shape)) in self.tensors().into_iter().zip(expect) {
            debug_assert_eq!(name, ename);
            if t.shape() != shape {
                return Err(arg_err!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        macro_rules! collect {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.view().into_dyn())),*] };
        }
        for_each_tensor!(collect)
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        macro_rules! collect {
            ($($f:ident),*) => { vec![$((stringify!($f), self.$f.view_mut().into_dyn())),*] };
        }
        for_each_tensor!(collect)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.channels(), self.hidden(), self.heads);
        z.ln1_gain.fill(T::zero());
        z.ln2_gain.fill(T::zero());
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn cast<U: Real>(&self) -> SraBlockParams<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.f64()));
        SraBlockParams {
            heads: self.heads,
            ln1_gain: c1(&self.ln1_gain),
            ln1_bias: c1(&self.ln1_bias),
            wq: c2(&self.wq),
            bq: c1(&self.bq),
            wk: c2(&self.wk),
            bk: c1(&self.bk),
            wv: c2(&self.wv),
            bv: c1(&self.bv),
            wo: c2(&self.wo),
            bo: c1(&self.bo),
            ln2_gain: c1(&self.ln2_gain),
            ln2_bias: c1(&self.ln2_bias),
            w1: c2(&self.w1),
            b1: c1(&self.b1),
            w2: c2(&self.w2),
            b2: c1(&self.b2),
        }
    }

    /// Zeroes every projection and MLP weight and bias, leaving layer norms.
    pub fn zero_maps(&mut self) {
        for (name, mut t) in self.tensors_mut() {
            if !name.starts_with("ln") {
                t.fill(T::zero());
            }
        }
    }
}
