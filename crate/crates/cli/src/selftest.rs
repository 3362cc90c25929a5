//! Property suites run by `sst selftest`. Sizes are kept small so the whole
//! run takes a few seconds.

use ndarray::Array2;
use sst_core::attention::reference::reference_sra_block;
use sst_core::attention::{sra_block, PeContext, PeMode, SraBlockParams};
use sst_core::backbone::{sst_forward, ForwardOptions, SstConfig};
use sst_core::densify::{gather_from_dense, scatter_to_dense};
use sst_core::fixtures::random_tokens;
use sst_core::geometry::{rotated_iou_bev, rotated_iou_oracle, BevBox};
use sst_core::gradcheck::{check_backbone, check_sra_block};
use sst_core::grouping::{bucket_and_pad, bucket_capacity, group_regions, unbatch, RegionCells};
use sst_core::head::{focal_loss, smooth_l1};
use sst_core::rng::XorShift64Star;
use sst_core::voxelizer::GridConfig;
use sst_core::Result;

use crate::commands::GRADCHECK_TOLERANCE;
use crate::config::RunConfig;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn(u64) -> Result<(bool, String)>;

const SUITES: [(&str, Suite); 9] = [
    ("config_defaults", config_defaults),
    ("bucketing", bucketing),
    ("batch_round_trip", batch_round_trip),
    ("masking_invariance", masking_invariance),
    ("single_stride", single_stride),
    ("gradients", gradients),
    ("rotated_iou", rotated_iou),
    ("scatter_gather", scatter_gather),
    ("losses", losses),
];

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|&(name, suite)| match suite(seed) {
            Ok((passed, detail)) => SuiteResult { name, passed, detail },
            Err(e) => SuiteResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = a.iter().chain(b.iter()).fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn config_defaults(_: u64) -> Result<(bool, String)> {
    let c = RunConfig::parse("")?;
    let ok = c.region == RegionCells::new(12, 12)?
        && (c.dims.num_blocks, c.dims.channels, c.dims.heads, c.dims.hidden) == (6, 128, 8, 256)
        && RunConfig::parse("[region]\nsize = 3.83").is_err()
        && RunConfig::parse("[model]\nchannels = 130").is_err();
    Ok((ok, "defaults and invariant rejection".into()))
}

fn bucketing(_: u64) -> Result<(bool, String)> {
    let max = 144;
    let bad = (1..=max).find(|&n| {
        let expect = if n >= 128 { max } else { (1..=7).map(|i| 1usize << i).find(|&cap| cap > n).unwrap_or(max) };
        bucket_capacity(n, max) != expect
    });
    Ok((bad.is_none(), format!("N = 1..{max}, first mismatch {bad:?}")))
}

fn batch_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = XorShift64Star::new(seed ^ 0x11);
    let mut ok = true;
    for _ in 0..10 {
        let tokens = random_tokens::<f64>(&mut rng, 300, 48, 48, 4);
        for shifted in [false, true] {
            let a = group_regions(&tokens.coords, RegionCells::new(12, 12)?, shifted);
            ok &= unbatch(&bucket_and_pad(&a, &tokens)?, &a)? == tokens.features;
        }
    }
    Ok((ok, "10 scenes, both groupings, bitwise".into()))
}

fn context(n: usize) -> PeContext {
    PeContext { mode: PeMode::RegionLocal, grid_nx: n, grid_ny: n }
}

fn masking_invariance(seed: u64) -> Result<(bool, String)> {
    let mut rng = XorShift64Star::new(seed ^ 0x22);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = 1 + rng.below(400) as usize;
        let tokens = random_tokens::<f64>(&mut rng, n, 48, 48, 16);
        let params = SraBlockParams::<f64>::random(16, 32, 4, &mut rng);
        let a = group_regions(&tokens.coords, RegionCells::new(12, 12)?, rng.below(2) == 1);
        let out = sra_block(&tokens, &a, &params, context(48))?;
        let oracle = reference_sra_block(tokens.features.view(), &tokens.coords, &a, &params, context(48))?;
        worst = worst.max(max_rel(&out.features, &oracle));
    }
    Ok((worst <= 1e-12, format!("max rel {worst:.2e} over 10 scenes")))
}

fn single_stride(seed: u64) -> Result<(bool, String)> {
    let mut rng = XorShift64Star::new(seed ^ 0x33);
    let mut ok = true;
    for _ in 0..5 {
        let tokens = random_tokens::<f64>(&mut rng, 200, 36, 36, 8);
        let cfg = SstConfig { num_blocks: 6, region: RegionCells::new(6, 6)?, pe: context(36), cache_grouping: false };
        let modules: Vec<_> = (0..cfg.num_modules()).map(|_| SraBlockParams::random(8, 16, 2, &mut rng)).collect();
        let out = sst_forward(&tokens, &cfg, &modules, ForwardOptions::default())?;
        ok &= out.tokens.coords == tokens.coords;
    }
    Ok((ok, "5 scenes through 6 blocks".into()))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let worst = check_sra_block(seed)?.max_rel_error().max(check_backbone(seed)?.max_rel_error());
    Ok((worst < GRADCHECK_TOLERANCE, format!("max rel {worst:.2e}")))
}

fn rotated_iou(seed: u64) -> Result<(bool, String)> {
    let mut rng = XorShift64Star::new(seed ^ 0x44);
    let mut worst = 0.0f64;
    let mut symmetric = true;
    for _ in 0..20 {
        let mut bx = |off: f64| {
            BevBox::new(
                rng.uniform(-1.0, 1.0) + off,
                rng.uniform(-1.0, 1.0),
                rng.uniform(0.5, 3.0),
                rng.uniform(0.5, 2.0),
                rng.uniform(-3.0, 3.0),
            )
        };
        let (a, b) = (bx(0.0)?, bx(0.5)?);
        let iou = rotated_iou_bev(&a, &b);
        symmetric &= iou.to_bits() == rotated_iou_bev(&b, &a).to_bits();
        worst = worst.max((iou - rotated_iou_oracle(&a, &b, 100)).abs());
    }
    Ok((symmetric && worst < 5e-3, format!("max deviation {worst:.2e} from raster oracle")))
}

fn scatter_gather(seed: u64) -> Result<(bool, String)> {
    let mut rng = XorShift64Star::new(seed ^ 0x55);
    let grid = GridConfig::square(40, 0.32);
    let tokens = random_tokens::<f64>(&mut rng, 500, 40, 40, 6);
    let map = scatter_to_dense(&tokens, &grid)?;
    let back = gather_from_dense(&map, &tokens.coords)?;
    let empty = map.data.sum_axis(ndarray::Axis(0)).iter().filter(|v| **v == 0.0).count();
    Ok((back == tokens.features && empty >= 1600 - 500, "500 tokens on 40x40".into()))
}

fn losses(_: u64) -> Result<(bool, String)> {
    let focal = focal_loss(&[0.0], &[Some(true)], Some(0.25), 2.0)?;
    let beta = 1.0 / 9.0;
    let below = smooth_l1(&[beta - 1e-12], &[0.0], beta)?;
    let above = smooth_l1(&[beta + 1e-12], &[0.0], beta)?;
    let ok = (focal - 0.0433).abs() < 1e-4 && (below - above).abs() < 1e-11;
    Ok((ok, format!("focal {focal:.6}")))
}
