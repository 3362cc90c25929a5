//! Masked multi-head self-attention over one padded bucket.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use super::{layer_norm_backward, layer_norm_forward, LnCache, SraBlockParams, MASKED_LOGIT};
use crate::complexity::FlopLedger;
use crate::error::{arg_err, integrity_err, Result};
use crate::linalg::{self, column_sums, gather_rows, linear, matmul_nt, matmul_tn};
use crate::real::Real;

/// Forward state of one bucket, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    pub capacity: usize,
    /// Slot index of every valid row, ascending.
    pub valid_slots: Vec<usize>,
    /// Compact valid-row range `[start, end)` per region.
    pub ranges: Vec<(usize, usize)>,
    pub ln: LnCache<T>,
    pub x: Array2<T>,
    pub u: Array2<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Concatenated head outputs before the output projection.
    pub o: Array2<T>,
    /// Softmax weights over valid keys, `heads x n x n` per region.
    pub probs: Vec<Vec<T>>,
}

/// Valid slot indices, and per region the `[start, end)` span into them.
type RegionRanges = (Vec<usize>, Vec<(usize, usize)>);

fn region_ranges(mask: &[bool], capacity: usize) -> Result<RegionRanges> {
    if capacity == 0 || !mask.len().is_multiple_of(capacity) {
        return Err(arg_err!("{} slots do not split into regions of {capacity}", mask.len()));
    }
    let mut valid = Vec::new();
    let mut ranges = Vec::with_capacity(mask.len() / capacity);
    for (r, chunk) in mask.chunks(capacity).enumerate() {
        let start = valid.len();
        valid.extend(chunk.iter().enumerate().filter(|(_, m)| **m).map(|(j, _)| r * capacity + j));
        if valid.len() == start {
            return Err(integrity_err!("region {r} of the bucket has no valid token"));
        }
        ranges.push((start, valid.len()));
    }
    Ok((valid, ranges))
}

/// Dot product with eight independent partial sums (vectorizes), combined
/// in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

struct RegionResult<T> {
    o: Vec<T>,
    probs: Vec<T>,
}

/// Attention for one region over its padded key slots.
#[allow(clippy::too_many_arguments)]
fn attend_region<T: Real>(
    q: &[T],
    k_pad: &[T],
    v_pad: &[T],
    key_mask: &[bool],
    heads: usize,
    channels: usize,
    scale: T,
    masked: T,
) -> RegionResult<T> {
    let hd = channels / heads;
    let nq = q.len() / channels;
    let cap = key_mask.len();
    let n_valid = key_mask.iter().filter(|m| **m).count();
    let mut o = vec![T::zero(); nq * channels];
    let mut probs = vec![T::zero(); heads * nq * n_valid];
    let mut logits = vec![T::zero(); cap];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..nq {
            let qi = &q[i * channels..][cols.clone()];
            let mut max = T::neg_infinity();
            for (j, l) in logits.iter_mut().enumerate() {
                let s = dot(qi, &k_pad[j * channels..][cols.clone()]) * scale;
                *l = if key_mask[j] { s } else { masked };
                if *l > max {
                    max = *l;
                }
            }
            // exp(-1e30 - max) underflows to exactly zero; skip the call.
            let mut sum = T::zero();
            for (l, &valid) in logits.iter_mut().zip(key_mask) {
                *l = if valid { (*l - max).exp() } else { T::zero() };
                sum += *l;
            }
            let inv = T::one() / sum;
            let oi = &mut o[i * channels..][cols.clone()];
            let mut jv = 0;
            for (j, l) in logits.iter().enumerate() {
                let p = *l * inv;
                for (acc, &vv) in oi.iter_mut().zip(&v_pad[j * channels..][cols.clone()]) {
                    *acc += p * vv;
                }
                if key_mask[j] {
                    probs[(h * nq + i) * n_valid + jv] = p;
                    jv += 1;
                }
            }
        }
    }
    RegionResult { o, probs }
}

/// Convenience wrapper returning only the padded output.
pub fn masked_mha<T: Real>(
    block: ArrayView2<'_, T>,
    pe: ArrayView2<'_, T>,
    mask: &[bool],
    capacity: usize,
    params: &SraBlockParams<T>,
) -> Result<Array2<T>> {
    Ok(masked_mha_forward(block, pe, mask, capacity, params, None)?.0)
}

/// Attention over a padded bucket of `slots = regions * capacity` rows.
///
/// Queries and keys see `LN(F) + PE`, values see `LN(F)`. Masked key slots
/// get logit `-1e30`; masked query rows come back as zeros. The residual is
/// not added here.
pub fn masked_mha_forward<T: Real>(
    block: ArrayView2<'_, T>,
    pe: ArrayView2<'_, T>,
    mask: &[bool],
    capacity: usize,
    params: &SraBlockParams<T>,
    ledger: Option<&mut FlopLedger>,
) -> Result<(Array2<T>, MhaCache<T>)> {
    let channels = params.channels();
    if block.dim() != pe.dim() || block.nrows() != mask.len() || block.ncols() != channels {
        return Err(arg_err!(
            "bucket shapes disagree: block {:?}, pe {:?}, mask {}, channels {channels}",
            block.dim(),
            pe.dim(),
            mask.len()
        ));
    }
    let (valid_slots, ranges) = region_ranges(mask, capacity)?;
    let n = valid_slots.len();
    let f = gather_rows(block, &valid_slots);
    let (x, ln) = layer_norm_forward(f.view(), params.ln1_gain.view(), params.ln1_bias.view());
    let u = &x + &gather_rows(pe, &valid_slots);
    let q = linear(u.view(), params.wq.view(), params.bq.view());
    let k = linear(u.view(), params.wk.view(), params.bk.view());
    let v = linear(x.view(), params.wv.view(), params.bv.view());

    let slots = mask.len();
    let mut k_pad = Array2::<T>::zeros((slots, channels));
    let mut v_pad = Array2::<T>::zeros((slots, channels));
    for (c, &s) in valid_slots.iter().enumerate() {
        k_pad.row_mut(s).assign(&k.row(c));
        v_pad.row_mut(s).assign(&v.row(c));
    }
    let scale = T::of(1.0 / (params.head_dim() as f64).sqrt());
    let masked = T::of(MASKED_LOGIT);
    let (qs, ks, vs) =
        (q.as_slice().expect("standard"), k_pad.as_slice().expect("standard"), v_pad.as_slice().expect("standard"));
    let results: Vec<RegionResult<T>> = ranges
        .par_iter()
        .enumerate()
        .map(|(r, &(s, e))| {
            let keys = r * capacity * channels..(r + 1) * capacity * channels;
            attend_region(
                &qs[s * channels..e * channels],
                &ks[keys.clone()],
                &vs[keys],
                &mask[r * capacity..(r + 1) * capacity],
                params.heads,
                channels,
                scale,
                masked,
            )
        })
        .collect();

    let mut o = Array2::<T>::zeros((n, channels));
    let mut probs = Vec::with_capacity(results.len());
    {
        let os = o.as_slice_mut().expect("standard");
        for (res, &(s, e)) in results.into_iter().zip(&ranges) {
            os[s * channels..e * channels].copy_from_slice(&res.o);
            probs.push(res.probs);
        }
    }
    let out_c = linear(o.view(), params.wo.view(), params.bo.view());
    let mut out = Array2::<T>::zeros((slots, channels));
    for (c, &s) in valid_slots.iter().enumerate() {
        out.row_mut(s).assign(&out_c.row(c));
    }

    if let Some(ledger) = ledger {
        let c = channels as u64;
        ledger.qkv_proj += 3 * n as u64 * c * c;
        ledger.out_proj += n as u64 * c * c;
        for &(s, e) in &ranges {
            let nr = (e - s) as u64;
            ledger.attn_logits += nr * nr * c;
            ledger.attn_apply += nr * nr * c;
            ledger.padded_attn += 2 * nr * (capacity as u64 - nr) * c;
            ledger.region_sq_sum += nr * nr;
        }
    }
    let cache = MhaCache { capacity, valid_slots, ranges, ln, x, u, q, k, v, o, probs };
    Ok((out, cache))
}

/// Backward of [`masked_mha_forward`].
///
/// `d_out` is the gradient on the padded output; masked rows are ignored.
/// Returns the gradient on the padded input block (zero on masked rows)
/// and accumulates parameter gradients into `grads`.
pub fn masked_mha_backward<T: Real>(
    d_out: ArrayView2<'_, T>,
    cache: &MhaCache<T>,
    params: &SraBlockParams<T>,
    grads: &mut SraBlockParams<T>,
) -> Result<Array2<T>> {
    let channels = params.channels();
    let slots = cache.ranges.len() * cache.capacity;
    if d_out.dim() != (slots, channels) {
        return Err(integrity_err!("upstream gradient {:?} does not match bucket ({slots}, {channels})", d_out.dim()));
    }
    let heads = params.heads;
    let hd = params.head_dim();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let n = cache.valid_slots.len();

    let dy = gather_rows(d_out, &cache.valid_slots);
    grads.wo += &matmul_tn(cache.o.view(), dy.view());
    grads.bo += &column_sums(dy.view());
    let d_o = matmul_nt(dy.view(), params.wo.view());

    let mut dq = Array2::<T>::zeros((n, channels));
    let mut dk = Array2::<T>::zeros((n, channels));
    let mut dv = Array2::<T>::zeros((n, channels));
    {
        let (qs, ks, vs, dos) = (
            cache.q.as_slice().expect("standard"),
            cache.k.as_slice().expect("standard"),
            cache.v.as_slice().expect("standard"),
            d_o.as_slice().expect("standard"),
        );
        let parts: Vec<(Vec<T>, Vec<T>, Vec<T>)> = cache
            .ranges
            .par_iter()
            .zip(cache.probs.par_iter())
            .map(|(&(s, e), probs)| {
                let nr = e - s;
                let span = s * channels..e * channels;
                let (q, k, v, d_o) = (&qs[span.clone()], &ks[span.clone()], &vs[span.clone()], &dos[span]);
                let mut dq = vec![T::zero(); nr * channels];
                let mut dk = vec![T::zero(); nr * channels];
                let mut dv = vec![T::zero(); nr * channels];
                let mut dp = vec![T::zero(); nr];
                for h in 0..heads {
                    let cols = h * hd..(h + 1) * hd;
                    for i in 0..nr {
                        let p = &probs[(h * nr + i) * nr..(h * nr + i + 1) * nr];
                        let doi = &d_o[i * channels..][cols.clone()];
                        let mut weighted = T::zero();
                        for j in 0..nr {
                            dp[j] = dot(doi, &v[j * channels..][cols.clone()]);
                            weighted += p[j] * dp[j];
                            for (g, &d) in dv[j * channels..][cols.clone()].iter_mut().zip(doi) {
                                *g += p[j] * d;
                            }
                        }
                        for j in 0..nr {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            for c in cols.clone() {
                                dq[i * channels + c] += ds * k[j * channels + c];
                                dk[j * channels + c] += ds * q[i * channels + c];
                            }
                        }
                    }
                }
                (dq, dk, dv)
            })
            .collect();
        let (dqs, dks, dvs) = (
            dq.as_slice_mut().expect("standard"),
            dk.as_slice_mut().expect("standard"),
            dv.as_slice_mut().expect("standard"),
        );
        for ((a, b, c), &(s, e)) in parts.into_iter().zip(&cache.ranges) {
            let span = s * channels..e * channels;
            dqs[span.clone()].copy_from_slice(&a);
            dks[span.clone()].copy_from_slice(&b);
            dvs[span].copy_from_slice(&c);
        }
    }

    grads.wq += &matmul_tn(cache.u.view(), dq.view());
    grads.bq += &column_sums(dq.view());
    grads.wk += &matmul_tn(cache.u.view(), dk.view());
    grads.bk += &column_sums(dk.view());
    grads.wv += &matmul_tn(cache.x.view(), dv.view());
    grads.bv += &column_sums(dv.view());

    let mut dx = matmul_nt(dq.view(), params.wq.view());
    dx += &matmul_nt(dk.view(), params.wk.view());
    dx += &matmul_nt(dv.view(), params.wv.view());
    let (df, dgain, dbias): (Array2<T>, Array1<T>, Array1<T>) =
        layer_norm_backward(dx.view(), &cache.ln, params.ln1_gain.view());
    grads.ln1_gain += &dgain;
    grads.ln1_bias += &dbias;

    let mut d_block = Array2::<T>::zeros((slots, channels));
    linalg::scatter_add_rows(&mut d_block, &cache.valid_slots, df.view());
    Ok(d_block)
}
