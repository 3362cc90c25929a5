//! Unpadded per-region loop implementation of one attention module.
//!
//! Plain nested loops over each region's tokens, with no buckets, masks or
//! blocked matrix products. It exists to cross-check the batched path.

use ndarray::{Array2, ArrayView1, ArrayView2};

use super::{positional_encoding, PeContext, SraBlockParams, LN_EPS};
use crate::error::Result;
use crate::grouping::RegionAssignment;
use crate::real::Real;
use crate::voxelizer::Cell;

fn ln_row<T: Real>(x: &[T], gain: ArrayView1<'_, T>, bias: ArrayView1<'_, T>) -> Vec<T> {
    let c = T::of(x.len() as f64);
    let mean = x.iter().fold(T::zero(), |a, &v| a + v) / c;
    let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / c;
    let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
    x.iter().enumerate().map(|(i, &v)| (v - mean) * inv * gain[i] + bias[i]).collect()
}

fn affine<T: Real>(x: &[T], w: ArrayView2<'_, T>, b: ArrayView1<'_, T>) -> Vec<T> {
    (0..w.ncols())
        .map(|j| {
            let mut acc = T::zero();
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * w[[i, j]];
            }
            acc + b[j]
        })
        .collect()
}

/// One attention module evaluated region by region without padding.
pub fn reference_sra_block<T: Real>(
    features: ArrayView2<'_, T>,
    coords: &[Cell],
    assignment: &RegionAssignment,
    params: &SraBlockParams<T>,
    pe: PeContext,
) -> Result<Array2<T>> {
    params.validate()?;
    let c = params.channels();
    let heads = params.heads;
    let hd = c / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let pe_rows = positional_encoding::<T>(coords, assignment, c, pe)?;
    let n = features.nrows();
    let mut attn = Array2::<T>::zeros((n, c));

    for region in &assignment.regions {
        let m = &region.members;
        let x: Vec<Vec<T>> = m
            .iter()
            .map(|&t| ln_row(&features.row(t).to_vec(), params.ln1_gain.view(), params.ln1_bias.view()))
            .collect();
        let u: Vec<Vec<T>> = m
            .iter()
            .zip(&x)
            .map(|(&t, xr)| xr.iter().zip(pe_rows.row(t).iter()).map(|(&a, &b)| a + b).collect())
            .collect();
        let q: Vec<Vec<T>> = u.iter().map(|r| affine(r, params.wq.view(), params.bq.view())).collect();
        let k: Vec<Vec<T>> = u.iter().map(|r| affine(r, params.wk.view(), params.bk.view())).collect();
        let v: Vec<Vec<T>> = x.iter().map(|r| affine(r, params.wv.view(), params.bv.view())).collect();
        for (i, &t) in m.iter().enumerate() {
            let mut concat = vec![T::zero(); c];
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let logits: Vec<T> =
                    k.iter().map(|kj| cols.clone().fold(T::zero(), |a, d| a + q[i][d] * kj[d]) * scale).collect();
                let max = logits.iter().fold(T::neg_infinity(), |a, &l| a.max(l));
                let e: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
                let sum = e.iter().fold(T::zero(), |a, &v| a + v);
                for (j, vj) in v.iter().enumerate() {
                    let p = e[j] / sum;
                    for d in cols.clone() {
                        concat[d] += p * vj[d];
                    }
                }
            }
            let o = affine(&concat, params.wo.view(), params.bo.view());
            for (d, val) in o.into_iter().enumerate() {
                attn[[t, d]] = val;
            }
        }
    }

    let mut out = Array2::<T>::zeros((n, c));
    for t in 0..n {
        let res: Vec<T> = features.row(t).iter().zip(attn.row(t).iter()).map(|(&a, &b)| a + b).collect();
        let y = ln_row(&res, params.ln2_gain.view(), params.ln2_bias.view());
        let h: Vec<T> = affine(&y, params.w1.view(), params.b1.view())
            .into_iter()
            .map(|v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let mlp = affine(&h, params.w2.view(), params.b2.view());
        for d in 0..c {
            out[[t, d]] = res[d] + mlp[d];
        }
    }
    Ok(out)
}
