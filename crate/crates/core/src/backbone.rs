//! Stack of SST blocks. Each block runs one attention module on the plain
//! regional grouping and one on the half-shifted grouping; token cells never
//! change, so every block boundary preserves the token layout exactly.

use ndarray::{Array2, ArrayView2};

use crate::attention::{sra_block_backward, sra_block_forward, AttentionTrace, PeContext, SraBlockParams, SraCache};
use crate::complexity::FlopLedger;
use crate::error::{config_err, integrity_err, Result};
use crate::grouping::{group_regions, RegionAssignment, RegionCells};
use crate::real::Real;
use crate::voxelizer::TokenSet;

/// Plain then shifted.
pub const ATTENTIONS_PER_BLOCK: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SstConfig {
    /// Number of blocks T. Zero is allowed and makes the backbone the identity.
    pub num_blocks: usize,
    pub region: RegionCells,
    pub pe: PeContext,
    /// Reuse the two groupings across blocks instead of recomputing them.
    pub cache_grouping: bool,
}

impl SstConfig {
    pub fn num_modules(&self) -> usize {
        self.num_blocks * ATTENTIONS_PER_BLOCK
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Keep per-module state for [`sst_backward`].
    pub retain: bool,
    /// Record attention weights of this module index (block * 2 + {0 plain, 1 shifted}).
    pub trace_module: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct SstOutput<T> {
    pub tokens: TokenSet<T>,
    pub caches: Vec<SraCache<T>>,
    pub trace: Option<AttentionTrace>,
    pub ledger: FlopLedger,
}

fn grouping_for(tokens_coords: &[crate::voxelizer::Cell], cfg: &SstConfig) -> [RegionAssignment; 2] {
    [group_regions(tokens_coords, cfg.region, false), group_regions(tokens_coords, cfg.region, true)]
}

pub fn sst_forward<T: Real>(
    tokens: &TokenSet<T>,
    cfg: &SstConfig,
    modules: &[SraBlockParams<T>],
    opts: ForwardOptions,
) -> Result<SstOutput<T>> {
    if modules.len() != cfg.num_modules() {
        return Err(config_err!(
            "{} blocks need {} attention modules, got {}",
            cfg.num_blocks,
            cfg.num_modules(),
            modules.len()
        ));
    }
    let mut features = tokens.features.clone();
    let mut caches = Vec::new();
    let mut trace = None;
    let mut ledger = FlopLedger::default();
    let cached = cfg.cache_grouping.then(|| grouping_for(&tokens.coords, cfg));
    for block in 0..cfg.num_blocks {
        let fresh;
        let groups = match &cached {
            Some(g) => g,
            None => {
                fresh = grouping_for(&tokens.coords, cfg);
                &fresh
            }
        };
        for (half, assignment) in groups.iter().enumerate() {
            let index = block * ATTENTIONS_PER_BLOCK + half;
            let out = sra_block_forward(
                features.view(),
                &tokens.coords,
                assignment,
                &modules[index],
                cfg.pe,
                opts.retain,
                opts.trace_module == Some(index),
                Some(&mut ledger),
            )?;
            features = out.features;
            if let Some(c) = out.cache {
                caches.push(c);
            }
            if out.trace.is_some() {
                trace = out.trace;
            }
        }
    }
    Ok(SstOutput { tokens: tokens.with_features(features), caches, trace, ledger })
}

/// Gradients of `sum(upstream ⊙ output)` with respect to the backbone input
/// and each module's parameters (same order as `modules`).
pub fn sst_backward<T: Real>(
    output: &SstOutput<T>,
    modules: &[SraBlockParams<T>],
    upstream: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Vec<SraBlockParams<T>>)> {
    if output.caches.len() != modules.len() {
        return Err(integrity_err!(
            "forward retained {} module states for {} modules",
            output.caches.len(),
            modules.len()
        ));
    }
    let mut grad = upstream.to_owned();
    let mut grads = Vec::with_capacity(modules.len());
    for (cache, params) in output.caches.iter().zip(modules).rev() {
        let (g_in, g_params) = sra_block_backward(Some(cache), params, grad.view())?;
        grad = g_in;
        grads.push(g_params);
    }
    grads.reverse();
    Ok((grad, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PeMode;
    use crate::fixtures::{random_matrix, random_tokens};
    use crate::gradcheck::{central_difference, relative_error};
    use crate::rng::XorShift64Star;
    use crate::voxelizer::Cell;

    fn cfg(blocks: usize, cells: u32) -> SstConfig {
        SstConfig {
            num_blocks: blocks,
            region: RegionCells::new(cells, cells).unwrap(),
            pe: PeContext { mode: PeMode::RegionLocal, grid_nx: 64, grid_ny: 64 },
            cache_grouping: false,
        }
    }

    fn modules(n: usize, c: usize, hidden: usize, heads: usize, seed: u64) -> Vec<SraBlockParams<f64>> {
        let mut rng = XorShift64Star::new(seed);
        (0..n).map(|_| SraBlockParams::random(c, hidden, heads, &mut rng)).collect()
    }

    #[test]
    fn zero_blocks_is_identity() {
        let mut rng = XorShift64Star::new(1);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 50, 20, 20, 8);
        let out = sst_forward(&tokens, &cfg(0, 6), &[], ForwardOptions::default()).unwrap();
        assert_eq!(out.tokens, tokens);
        assert_eq!(out.ledger, FlopLedger::default());
    }

    #[test]
    fn coords_survive_and_zero_maps_are_identity() {
        let mut rng = XorShift64Star::new(2);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 150, 30, 30, 8);
        let c = cfg(3, 6);
        let mods = modules(6, 8, 16, 2, 3);
        let out = sst_forward(&tokens, &c, &mods, ForwardOptions::default()).unwrap();
        assert_eq!(out.tokens.coords, tokens.coords);
        assert_eq!(out.tokens.features.dim(), tokens.features.dim());
        let mut zeroed = mods.clone();
        zeroed.iter_mut().for_each(SraBlockParams::zero_maps);
        let same = sst_forward(&tokens, &c, &zeroed, ForwardOptions::default()).unwrap();
        assert_eq!(same.tokens, tokens);
        assert!(sst_forward(&tokens, &c, &mods[..5], ForwardOptions::default()).is_err());
    }

    #[test]
    fn cached_grouping_matches_recomputed() {
        let mut rng = XorShift64Star::new(4);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 200, 40, 40, 8);
        let mods = modules(4, 8, 16, 2, 5);
        let a = sst_forward(&tokens, &cfg(2, 8), &mods, ForwardOptions::default()).unwrap();
        let b =
            sst_forward(&tokens, &SstConfig { cache_grouping: true, ..cfg(2, 8) }, &mods, ForwardOptions::default())
                .unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = XorShift64Star::new(6);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 30, 12, 12, 8);
        let mods = modules(4, 8, 16, 2, 7);
        let out = sst_forward(&tokens, &cfg(2, 6), &mods, ForwardOptions { retain: true, trace_module: None }).unwrap();
        let (dx, grads) = sst_backward(&out, &mods, Array2::zeros((30, 8)).view()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(grads.iter().all(|g| g.tensors().iter().all(|(_, t)| t.iter().all(|v| *v == 0.0))));
        let no_cache = sst_forward(&tokens, &cfg(2, 6), &mods, ForwardOptions::default()).unwrap();
        assert!(sst_backward(&no_cache, &mods, Array2::zeros((30, 8)).view()).is_err());
    }

    #[test]
    fn two_block_gradcheck_on_inputs_and_first_module() {
        let mut rng = XorShift64Star::new(8);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 36, 12, 12, 8);
        let c = cfg(2, 6);
        let mods = modules(4, 8, 12, 2, 9);
        let up: Array2<f64> = random_matrix(&mut rng, 36, 8);
        let loss = |f: &Array2<f64>, m: &[SraBlockParams<f64>]| {
            let out = sst_forward(&tokens.with_features(f.clone()), &c, m, ForwardOptions::default()).unwrap();
            (&out.tokens.features * &up).sum()
        };
        let out = sst_forward(&tokens, &c, &mods, ForwardOptions { retain: true, trace_module: None }).unwrap();
        let (dx, grads) = sst_backward(&out, &mods, up.view()).unwrap();
        let mut f = tokens.features.clone();
        let num = central_difference(&mut f, |f| f.as_slice_mut().unwrap(), |f| loss(f, &mods), 1e-6);
        assert!(relative_error(dx.as_slice().unwrap(), &num) < 1e-5);
        let mut m = mods.clone();
        let num = central_difference(&mut m, |m| m[0].wq.as_slice_mut().unwrap(), |m| loss(&tokens.features, m), 1e-6);
        assert!(relative_error(grads[0].wq.as_slice().unwrap(), &num) < 1e-5);
    }

    #[test]
    fn shift_carries_information_across_region_boundaries() {
        // Cells (5, 0) and (6, 0) sit in different plain regions of 6 cells
        // but share a shifted region.
        let coords = vec![Cell::new(5, 0), Cell::new(6, 0)];
        let mut rng = XorShift64Star::new(10);
        let feats: Array2<f64> = random_matrix(&mut rng, 2, 8);
        let tokens = TokenSet::new(coords, feats).unwrap();
        let mods = modules(2, 8, 16, 2, 11);
        let c = cfg(1, 6);
        let base = sst_forward(&tokens, &c, &mods, ForwardOptions::default()).unwrap();
        let mut bumped = tokens.clone();
        bumped.features[[0, 0]] += 1e-3;
        let moved = sst_forward(&bumped, &c, &mods, ForwardOptions::default()).unwrap();
        assert!(moved.tokens.features.row(1) != base.tokens.features.row(1));
        let mut plain_only = mods.clone();
        plain_only[1].zero_maps();
        let base = sst_forward(&tokens, &c, &plain_only, ForwardOptions::default()).unwrap();
        let moved = sst_forward(&bumped, &c, &plain_only, ForwardOptions::default()).unwrap();
        assert_eq!(moved.tokens.features.row(1), base.tokens.features.row(1));
    }

    #[test]
    fn trace_selects_requested_module() {
        let mut rng = XorShift64Star::new(12);
        let tokens: TokenSet<f64> = random_tokens(&mut rng, 60, 20, 20, 8);
        let mods = modules(4, 8, 16, 2, 13);
        let out =
            sst_forward(&tokens, &cfg(2, 6), &mods, ForwardOptions { retain: false, trace_module: Some(3) }).unwrap();
        let trace = out.trace.unwrap();
        assert_eq!(trace.regions.iter().map(|r| r.tokens.len()).sum::<usize>(), 60);
        assert_eq!(trace.ledger.attention_modules, 1);
        assert_eq!(out.ledger.attention_modules, 4);
    }
}
