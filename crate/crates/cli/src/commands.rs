//! Subcommand implementations. Each one is a short composition of core
//! operations; text goes to `--out` when given and to stdout otherwise.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use sst_core::attention::{export_attention, write_attention_csv};
use sst_core::complexity::{measured_macs, ModelShape};
use sst_core::gradcheck::{check_backbone, check_sra_block, GradCheckReport};
use sst_core::grouping::{group_regions, BatchLayout, BucketClass};
use sst_core::head::{decode_detections, generate_anchors, write_detections_csv};
use sst_core::io::{load_tensors, read_points, save_tensors, TensorMap};
use sst_core::model::{run_scene, SceneOutput, SstParams};
use sst_core::synth::{synth_scene, SceneSpec};
use sst_core::voxelizer::{assign_pillars, Cell, PointCloud};
use sst_core::{NumericMode, Real, Result, SstError};

use crate::config::RunConfig;

/// Finite-difference agreement required by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Inputs shared by every subcommand.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub points: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

impl Context {
    /// The points file, or a synthetic scene from `[scene]` when none is given.
    pub fn cloud(&self) -> Result<PointCloud> {
        match &self.points {
            Some(path) => read_points(path),
            None => synth_scene(&self.config.scene, &self.config.grid),
        }
    }

    /// Weights from `--weights`, or seeded random weights.
    pub fn params<T: Real>(&self) -> Result<SstParams<T>> {
        match &self.weights {
            Some(path) => SstParams::from_tensors(&load_tensors(path)?, &self.config.dims),
            None => SstParams::random(&self.config.dims, self.config.seed),
        }
    }

    fn run<T: Real>(&self, cloud: &PointCloud, trace_module: Option<usize>) -> Result<SceneOutput<T>> {
        let params = self.params::<T>()?;
        run_scene(cloud, &self.config.grid, &self.config.backbone, &params, trace_module)
    }
}

pub fn voxelize(ctx: &Context) -> Result<()> {
    let cloud = ctx.cloud()?;
    let grid = &ctx.config.grid;
    let pillars = assign_pillars(&cloud, grid)?;
    let coords: Vec<Cell> = pillars.groups.keys().copied().collect();
    let mut text = String::new();
    let _ = writeln!(text, "points = {}", cloud.len());
    let _ = writeln!(text, "kept_points = {}", pillars.total_points());
    let _ = writeln!(text, "dropped_points = {}", pillars.dropped);
    let _ = writeln!(text, "grid = {} x {}", grid.nx(), grid.ny());
    let _ = writeln!(text, "tokens = {}", coords.len());
    let _ = writeln!(text, "sparsity = {:.6}", coords.len() as f64 / grid.num_cells() as f64);
    let region = ctx.config.region;
    let _ = writeln!(text, "region_cells = {} x {}", region.nx, region.ny);
    for shifted in [false, true] {
        let name = if shifted { "shifted" } else { "plain" };
        let assignment = group_regions(&coords, region, shifted);
        let layout = BatchLayout::new(&assignment);
        let slots: usize = layout.buckets.iter().map(|b| b.num_slots()).sum();
        let largest = assignment.regions.iter().map(|r| r.members.len()).max().unwrap_or(0);
        let waste = if slots == 0 { 0.0 } else { 1.0 - coords.len() as f64 / slots as f64 };
        let _ = writeln!(text, "{name}.regions = {}", assignment.regions.len());
        let _ = writeln!(text, "{name}.largest_region = {largest}");
        let _ = writeln!(text, "{name}.slots = {slots}");
        let _ = writeln!(text, "{name}.padding_waste = {waste:.6}");
        for b in &layout.buckets {
            let label = match b.class {
                BucketClass::Pow2(_) => format!("{}", b.capacity),
                BucketClass::Overflow => format!("overflow{}", b.capacity),
            };
            let tokens = b.slots.iter().flatten().count();
            let _ = writeln!(
                text,
                "{name}.bucket.{label} = regions {} tokens {tokens} slots {}",
                b.regions.len(),
                b.num_slots()
            );
        }
    }
    emit(ctx.out.as_deref(), text.as_bytes())
}

fn to_f32<T: Real>(a: &Array2<T>) -> ArrayD<f32> {
    a.mapv(|v| v.f64() as f32).into_dyn()
}

fn forward_typed<T: Real>(ctx: &Context, dense_out: Option<&Path>) -> Result<()> {
    let cfg = &ctx.config;
    let cloud = ctx.cloud()?;
    let out = ctx.run::<T>(&cloud, None)?;
    if out.tokens.coords != out.input_tokens.coords {
        return Err(SstError::Integrity("backbone moved token coordinates".into()));
    }
    let anchors = generate_anchors(&cfg.grid, &cfg.anchors)?;
    let head = out.head.mapv(|v| v.f64());
    let detections = decode_detections(head.view(), &anchors, &cfg.detect)?;
    let mut csv = Vec::new();
    write_detections_csv(&detections, &cfg.anchors.class_names(), &mut csv)?;
    emit(ctx.out.as_deref(), &csv)?;
    if let Some(path) = dense_out {
        let mut map = TensorMap::new();
        let d = &out.dense.data;
        map.insert("dense".into(), d.mapv(|v| v.f64() as f32).into_dyn());
        map.insert("head".into(), to_f32(&out.head));
        map.insert("tokens.features".into(), to_f32(&out.tokens.features));
        let coords: Vec<f32> = out.tokens.coords.iter().flat_map(|c| [c.ix as f32, c.iy as f32]).collect();
        let coords = ArrayD::from_shape_vec(IxDyn(&[out.tokens.len(), 2]), coords).expect("two per token");
        map.insert("tokens.coords".into(), coords);
        save_tensors(&map, path)?;
    }
    eprintln!(
        "{} points ({} dropped), {} tokens, {} detections, {} MACs",
        cloud.len(),
        out.dropped_points,
        out.tokens.len(),
        detections.len(),
        out.ledger.total()
    );
    Ok(())
}

pub fn forward(ctx: &Context, dense_out: Option<&Path>) -> Result<()> {
    match ctx.config.numeric {
        NumericMode::F32 => forward_typed::<f32>(ctx, dense_out),
        NumericMode::F64 => forward_typed::<f64>(ctx, dense_out),
    }
}

fn report_lines(title: &str, report: &GradCheckReport, text: &mut String) {
    for t in &report.tensors {
        let _ = writeln!(text, "{title}.{} = {:.3e} ({} elements)", t.name, t.rel_error, t.elements);
    }
    let _ = writeln!(text, "{title}.max_rel_error = {:.3e}", report.max_rel_error());
}

pub fn gradcheck(ctx: &Context) -> Result<()> {
    let seed = ctx.config.seed;
    let block = check_sra_block(seed)?;
    let backbone = check_backbone(seed)?;
    let mut text = String::new();
    report_lines("sra_block", &block, &mut text);
    report_lines("backbone", &backbone, &mut text);
    let worst = block.max_rel_error().max(backbone.max_rel_error());
    let _ = writeln!(text, "max_rel_error = {worst:.3e}");
    emit(ctx.out.as_deref(), text.as_bytes())?;
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(SstError::Integrity(format!("gradient check error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

fn flops_typed<T: Real>(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let cloud = ctx.cloud()?;
    let out = ctx.run::<T>(&cloud, None)?;
    let shape = ModelShape {
        h: cfg.grid.ny(),
        w: cfg.grid.nx(),
        channels: cfg.dims.channels,
        heads: cfg.dims.heads,
        hidden: cfg.dims.hidden,
        region_cells: cfg.region.max_tokens(),
    };
    let report = measured_macs(&out.ledger, shape);
    match &ctx.out {
        Some(path) => {
            std::fs::write(path, report.to_csv())?;
            emit(None, report.to_text().as_bytes())
        }
        None => emit(None, report.to_text().as_bytes()),
    }
}

pub fn flops(ctx: &Context) -> Result<()> {
    match ctx.config.numeric {
        NumericMode::F32 => flops_typed::<f32>(ctx),
        NumericMode::F64 => flops_typed::<f64>(ctx),
    }
}

fn attn_dump_typed<T: Real>(ctx: &Context, query: Cell, module: usize) -> Result<()> {
    let cloud = ctx.cloud()?;
    let out = ctx.run::<T>(&cloud, Some(module))?;
    let trace = out.trace.ok_or_else(|| SstError::Integrity(format!("module {module} recorded no trace")))?;
    let token = trace
        .token_at(query)
        .ok_or_else(|| SstError::Argument(format!("no token at cell ({}, {})", query.ix, query.iy)))?;
    let records = export_attention(&trace, token)?;
    let mut csv = Vec::new();
    write_attention_csv(&records, trace.heads, &mut csv)?;
    emit(ctx.out.as_deref(), &csv)
}

pub fn attn_dump(ctx: &Context, query: Cell, module: usize) -> Result<()> {
    let modules = ctx.config.backbone.num_modules();
    if module >= modules {
        return Err(SstError::Argument(format!("module {module} out of range (model has {modules})")));
    }
    match ctx.config.numeric {
        NumericMode::F32 => attn_dump_typed::<f32>(ctx, query, module),
        NumericMode::F64 => attn_dump_typed::<f64>(ctx, query, module),
    }
}

fn bench_typed<T: Real>(ctx: &Context, sparsities: &[f64]) -> Result<()> {
    let cfg = &ctx.config;
    let params = ctx.params::<T>()?;
    let mut csv = String::from("target_sparsity,tokens,sparsity,seconds,total_macs\n");
    for &s in sparsities {
        let spec = SceneSpec { target_sparsity: s, ..cfg.scene };
        let cloud = synth_scene(&spec, &cfg.grid)?;
        let start = Instant::now();
        let out = run_scene(&cloud, &cfg.grid, &cfg.backbone, &params, None)?;
        let seconds = start.elapsed().as_secs_f64();
        let tokens = out.tokens.len();
        let _ = writeln!(
            csv,
            "{s},{tokens},{:.6},{seconds:.6},{}",
            tokens as f64 / cfg.grid.num_cells() as f64,
            out.ledger.total()
        );
        eprintln!("sparsity {s}: {tokens} tokens in {seconds:.3} s");
    }
    emit(ctx.out.as_deref(), csv.as_bytes())
}

pub fn bench(ctx: &Context, sparsities: &[f64]) -> Result<()> {
    if let Some(s) = sparsities.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Err(SstError::Argument(format!("sparsity {s} must lie in (0, 1]")));
    }
    match ctx.config.numeric {
        NumericMode::F32 => bench_typed::<f32>(ctx, sparsities),
        NumericMode::F64 => bench_typed::<f64>(ctx, sparsities),
    }
}

pub fn init_weights(ctx: &Context) -> Result<()> {
    let path = ctx.out.as_deref().ok_or_else(|| SstError::Argument("init-weights needs --out".into()))?;
    let params = SstParams::<f32>::random(&ctx.config.dims, ctx.config.seed)?;
    save_tensors(&params.to_tensors(), path)
}

pub fn selftest(ctx: &Context) -> Result<()> {
    let results = crate::selftest::run_all(ctx.config.seed);
    let mut text = String::new();
    for r in &results {
        let _ = writeln!(text, "{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    emit(ctx.out.as_deref(), text.as_bytes())?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SstError::Integrity(format!("selftest failed: {}", failed.join(", "))))
    }
}
