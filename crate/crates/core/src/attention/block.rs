//! One full attention module: pre-norm MSA with residual, then pre-norm MLP with residual.

use ndarray::{Array2, ArrayView2};

use super::mha::{masked_mha_backward, masked_mha_forward, MhaCache};
use super::trace::{AttentionTrace, TraceRegion};
use super::{layer_norm_backward, layer_norm_forward, positional_encoding, LnCache, PeContext, SraBlockParams};
use crate::complexity::FlopLedger;
use crate::error::{arg_err, integrity_err, Result};
use crate::grouping::{BatchLayout, RegionAssignment};
use crate::linalg::{column_sums, linear, matmul_nt, matmul_tn, relu_backward_inplace};
use crate::real::Real;
use crate::voxelizer::{Cell, TokenSet};

/// Forward state of one attention module.
#[derive(Debug, Clone)]
pub struct SraCache<T> {
    pub layout: BatchLayout,
    pub mha: Vec<MhaCache<T>>,
    pub ln2: LnCache<T>,
    pub y: Array2<T>,
    pub h_pre: Array2<T>,
    pub h: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct SraOutput<T> {
    pub features: Array2<T>,
    pub cache: Option<SraCache<T>>,
    pub trace: Option<AttentionTrace>,
}

/// Applies one module to `features` (canonical token order).
///
/// `retain` keeps the state [`sra_block_backward`] needs; `trace` records
/// the attention weights of every region.
#[allow(clippy::too_many_arguments)]
pub fn sra_block_forward<T: Real>(
    features: ArrayView2<'_, T>,
    coords: &[Cell],
    assignment: &RegionAssignment,
    params: &SraBlockParams<T>,
    pe: PeContext,
    retain: bool,
    trace: bool,
    ledger: Option<&mut FlopLedger>,
) -> Result<SraOutput<T>> {
    params.validate()?;
    let channels = params.channels();
    let n = features.nrows();
    if features.ncols() != channels {
        return Err(arg_err!("features have {} channels, module expects {channels}", features.ncols()));
    }
    if coords.len() != n || assignment.num_tokens() != n {
        return Err(integrity_err!(
            "{n} feature rows, {} coords, assignment over {} tokens",
            coords.len(),
            assignment.num_tokens()
        ));
    }
    let layout = BatchLayout::new(assignment);
    let pe_rows = positional_encoding::<T>(coords, assignment, channels, pe)?;
    let blocks = layout.pad(features);
    let pe_blocks = layout.pad(pe_rows.view());

    let mut local = FlopLedger::default();
    let mut outs = Vec::with_capacity(layout.buckets.len());
    let mut caches = Vec::with_capacity(layout.buckets.len());
    for ((bucket, block), pe_block) in layout.buckets.iter().zip(&blocks).zip(&pe_blocks) {
        let (out, cache) = masked_mha_forward(
            block.view(),
            pe_block.view(),
            &bucket.mask(),
            bucket.capacity,
            params,
            Some(&mut local),
        )?;
        outs.push(out);
        caches.push(cache);
    }
    let attn = layout.unpad(&outs, channels);
    let residual = &features + &attn;

    let (y, ln2) = layer_norm_forward(residual.view(), params.ln2_gain.view(), params.ln2_bias.view());
    let h_pre = linear(y.view(), params.w1.view(), params.b1.view());
    let h = h_pre.mapv(|v| if v > T::zero() { v } else { T::zero() });
    let mut out = linear(h.view(), params.w2.view(), params.b2.view());
    out += &residual;

    local.mlp += 2 * (n * channels * params.hidden()) as u64;
    local.token_rows += n as u64;
    local.attention_modules += 1;
    if let Some(ledger) = ledger {
        *ledger += local;
    }

    let trace = trace.then(|| build_trace(&layout, &caches, coords, params.heads, local));
    let cache = retain.then(|| SraCache { layout, mha: caches, ln2, y, h_pre, h });
    Ok(SraOutput { features: out, cache, trace })
}

fn build_trace<T: Real>(
    layout: &BatchLayout,
    caches: &[MhaCache<T>],
    coords: &[Cell],
    heads: usize,
    ledger: FlopLedger,
) -> AttentionTrace {
    let mut regions = Vec::new();
    for (bucket, cache) in layout.buckets.iter().zip(caches) {
        for (&(s, e), probs) in cache.ranges.iter().zip(&cache.probs) {
            let tokens: Vec<usize> =
                cache.valid_slots[s..e].iter().map(|&slot| bucket.slots[slot].expect("valid slot")).collect();
            regions.push(TraceRegion {
                cells: tokens.iter().map(|&t| coords[t]).collect(),
                tokens,
                weights: probs.iter().map(|p| p.f64()).collect(),
            });
        }
    }
    AttentionTrace::new(heads, regions, ledger)
}

/// Forward pass returning only the new token set.
pub fn sra_block<T: Real>(
    tokens: &TokenSet<T>,
    assignment: &RegionAssignment,
    params: &SraBlockParams<T>,
    pe: PeContext,
) -> Result<TokenSet<T>> {
    let out = sra_block_forward(tokens.features.view(), &tokens.coords, assignment, params, pe, false, false, None)?;
    Ok(tokens.with_features(out.features))
}

/// Gradients of `sum(upstream ⊙ output)` with respect to the module input
/// and every parameter.
pub fn sra_block_backward<T: Real>(
    cache: Option<&SraCache<T>>,
    params: &SraBlockParams<T>,
    upstream: ArrayView2<'_, T>,
) -> Result<(Array2<T>, SraBlockParams<T>)> {
    let cache = cache.ok_or_else(|| integrity_err!("backward called without a retained forward trace"))?;
    let channels = params.channels();
    if upstream.dim() != (cache.layout.num_tokens, channels) {
        return Err(integrity_err!(
            "upstream gradient {:?} does not match the traced pass ({}, {channels})",
            upstream.dim(),
            cache.layout.num_tokens
        ));
    }
    let mut grads = params.zeros_like();

    // MLP branch.
    grads.w2 += &matmul_tn(cache.h.view(), upstream);
    grads.b2 += &column_sums(upstream);
    let mut dh = matmul_nt(upstream, params.w2.view());
    relu_backward_inplace(&mut dh, cache.h_pre.view());
    grads.w1 += &matmul_tn(cache.y.view(), dh.view());
    grads.b1 += &column_sums(dh.view());
    let dy = matmul_nt(dh.view(), params.w1.view());
    let (d_res, dgain, dbias) = layer_norm_backward(dy.view(), &cache.ln2, params.ln2_gain.view());
    grads.ln2_gain += &dgain;
    grads.ln2_bias += &dbias;
    let d_residual = &d_res + &upstream;

    // Attention branch, bucket by bucket in a fixed order.
    let d_blocks = cache.layout.pad(d_residual.view());
    let mut d_attn_in = Vec::with_capacity(d_blocks.len());
    for (d_block, mha) in d_blocks.iter().zip(&cache.mha) {
        d_attn_in.push(masked_mha_backward(d_block.view(), mha, params, &mut grads)?);
    }
    let mut d_input = cache.layout.unpad(&d_attn_in, channels);
    d_input += &d_residual;
    Ok((d_input, grads))
}
