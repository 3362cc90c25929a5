//! Run configuration: a TOML file with `[grid]`, `[region]`, `[model]`,
//! `[head]`, `[scene]` and `[run]` sections. Every key is optional; unknown
//! keys are rejected.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::Deserialize;
use sst_core::attention::{PeContext, PeMode};
use sst_core::backbone::SstConfig;
use sst_core::grouping::{RegionCells, RegionConfig};
use sst_core::head::{AnchorClass, AnchorConfig, DetectConfig, LossConfig, LossWeights};
use sst_core::model::ModelDims;
use sst_core::synth::{Profile, SceneSpec};
use sst_core::voxelizer::GridConfig;
use sst_core::{NumericMode, Result, SstError};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pillar: f64,
    pub max_points_per_pillar: Option<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridConfig::default();
        Self {
            x_min: g.x_min,
            x_max: g.x_max,
            y_min: g.y_min,
            y_max: g.y_max,
            z_min: g.z_min,
            z_max: g.z_max,
            pillar: g.pillar_dx,
            max_points_per_pillar: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSection {
    /// Region side in meters; must be an even multiple of the pillar size.
    pub size: f64,
    /// Encode absolute grid coordinates instead of region-local offsets.
    pub global_pe: bool,
    /// Compute the two groupings once per pass instead of once per block.
    pub cache_grouping: bool,
}

impl Default for RegionSection {
    fn default() -> Self {
        Self { size: RegionConfig::default().size_x, global_pe: false, cache_grouping: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelDims::default();
        Self { blocks: d.num_blocks, channels: d.channels, heads: d.heads, hidden: d.hidden }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSection {
    pub name: String,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub z: f64,
    pub match_iou: f64,
    pub unmatch_iou: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub classes: Vec<ClassSection>,
    pub yaws: Vec<f64>,
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub beta_loc: f64,
    pub beta_cls: f64,
    pub beta_dir: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for HeadSection {
    fn default() -> Self {
        let classes = AnchorConfig::default()
            .classes
            .into_iter()
            .map(|c| ClassSection {
                name: c.name,
                length: c.length,
                width: c.width,
                height: c.height,
                z: c.z_center,
                match_iou: c.match_iou,
                unmatch_iou: c.unmatch_iou,
            })
            .collect();
        let detect = DetectConfig::default();
        let loss = LossConfig::default();
        Self {
            classes,
            yaws: vec![0.0, FRAC_PI_2],
            score_threshold: detect.score_threshold,
            pre_nms_top_k: detect.pre_nms_top_k,
            nms_iou: detect.nms_iou,
            beta_loc: loss.weights.loc,
            beta_cls: loss.weights.cls,
            beta_dir: loss.weights.dir,
            focal_alpha: loss.focal_alpha,
            focal_gamma: loss.focal_gamma,
            smooth_l1_beta: loss.smooth_l1_beta,
        }
    }
}

/// Synthetic scene used when no points file is given.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub sparsity: f64,
    pub extent: f64,
    pub profile: String,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self { sparsity: 0.09, extent: 150.0, profile: "uniform".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub workers: usize,
    pub numeric: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, workers: 1, numeric: NumericMode::default().name().into() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub grid: GridSection,
    pub region: RegionSection,
    pub model: ModelSection,
    pub head: HeadSection,
    pub scene: SceneSection,
    pub run: RunSection,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub region: RegionCells,
    pub backbone: SstConfig,
    pub dims: ModelDims,
    pub anchors: AnchorConfig,
    pub detect: DetectConfig,
    pub loss: LossConfig,
    pub scene: SceneSpec,
    pub seed: u64,
    pub workers: usize,
    pub numeric: NumericMode,
}

impl RunConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let g = &raw.grid;
        let grid = GridConfig {
            x_min: g.x_min,
            x_max: g.x_max,
            y_min: g.y_min,
            y_max: g.y_max,
            z_min: g.z_min,
            z_max: g.z_max,
            pillar_dx: g.pillar,
            pillar_dy: g.pillar,
            max_points_per_pillar: g.max_points_per_pillar,
        };
        grid.validate()?;
        let region = RegionConfig { size_x: raw.region.size, size_y: raw.region.size }.resolve(&grid)?;
        let anchors = AnchorConfig {
            classes: raw
                .head
                .classes
                .iter()
                .map(|c| AnchorClass {
                    name: c.name.clone(),
                    length: c.length,
                    width: c.width,
                    height: c.height,
                    z_center: c.z,
                    match_iou: c.match_iou,
                    unmatch_iou: c.unmatch_iou,
                })
                .collect(),
            yaws: raw.head.yaws.clone(),
        };
        anchors.validate()?;
        let m = &raw.model;
        let dims = ModelDims {
            num_blocks: m.blocks,
            channels: m.channels,
            heads: m.heads,
            hidden: m.hidden,
            anchors_per_cell: anchors.anchors_per_cell(),
        };
        dims.validate()?;
        let h = &raw.head;
        let detect =
            DetectConfig { score_threshold: h.score_threshold, pre_nms_top_k: h.pre_nms_top_k, nms_iou: h.nms_iou };
        if !(0.0..=1.0).contains(&detect.score_threshold) || !(detect.nms_iou > 0.0 && detect.nms_iou < 1.0) {
            return Err(SstError::Config("head.score_threshold must lie in [0, 1] and head.nms_iou in (0, 1)".into()));
        }
        let loss = LossConfig {
            weights: LossWeights { loc: h.beta_loc, cls: h.beta_cls, dir: h.beta_dir },
            focal_alpha: h.focal_alpha,
            focal_gamma: h.focal_gamma,
            smooth_l1_beta: h.smooth_l1_beta,
        };
        loss.weights.validate()?;
        if !(0.0..=1.0).contains(&loss.focal_alpha) || !(loss.focal_gamma >= 0.0) || !(loss.smooth_l1_beta > 0.0) {
            return Err(SstError::Config(
                "focal_alpha must lie in [0, 1], focal_gamma >= 0, smooth_l1_beta > 0".into(),
            ));
        }
        let s = &raw.scene;
        if !(s.sparsity > 0.0 && s.sparsity <= 1.0) || !(s.extent > 0.0) {
            return Err(SstError::Config("scene.sparsity must lie in (0, 1] and scene.extent be positive".into()));
        }
        let profile: Profile = s.profile.parse().map_err(|e: SstError| SstError::Config(e.to_string()))?;
        if raw.run.workers == 0 {
            return Err(SstError::Config("run.workers must be at least 1".into()));
        }
        let numeric: NumericMode = raw.run.numeric.parse().map_err(SstError::Config)?;
        let pe_mode = if raw.region.global_pe { PeMode::Global } else { PeMode::RegionLocal };
        let backbone = SstConfig {
            num_blocks: m.blocks,
            region,
            pe: PeContext { mode: pe_mode, grid_nx: grid.nx(), grid_ny: grid.ny() },
            cache_grouping: raw.region.cache_grouping,
        };
        Ok(Self {
            grid,
            region,
            backbone,
            dims,
            anchors,
            detect,
            loss,
            scene: SceneSpec::new(raw.run.seed, s.sparsity, s.extent, profile),
            seed: raw.run.seed,
            workers: raw.run.workers,
            numeric,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| SstError::Config(e.to_string()))?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            SstError::Config(msg) => SstError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scene.seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!((c.grid.nx(), c.grid.ny()), (468, 468));
        assert_eq!(c.region, RegionCells::new(12, 12).unwrap());
        assert_eq!(c.dims, ModelDims::default());
        assert_eq!(c.backbone.num_blocks, 6);
        assert_eq!(c.anchors, AnchorConfig::default());
        assert_eq!(c.numeric, NumericMode::F32);
        assert_eq!(c.workers, 1);
    }

    #[test]
    fn invariant_violations_are_config_errors() {
        for text in [
            "[region]\nsize = 3.83",
            "[model]\nchannels = 130",
            "[region]\nsize = 0.32",
            "[model]\nheads = 0",
            "[grid]\npillar = -1.0",
            "[run]\nworkers = 0",
            "[run]\nnumeric = \"f16\"",
            "[head]\nnms_iou = 1.0",
            "[scene]\nprofile = \"dense\"",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(SstError::Config(_))), "{text}");
        }
    }

    #[test]
    fn parse_errors_name_the_problem() {
        let err = RunConfig::parse("[model]\nchanels = 64\n").unwrap_err().to_string();
        assert!(err.contains("chanels"), "{err}");
        let err = RunConfig::parse("[model]\nchannels = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(RunConfig::parse("[extra]\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let text = "[grid]\nx_min = 0.0\nx_max = 16.0\ny_min = 0.0\ny_max = 16.0\npillar = 0.5\n\
                    [region]\nsize = 2.0\nglobal_pe = true\n[model]\nblocks = 2\nchannels = 16\nheads = 4\nhidden = 32\n\
                    [head]\nclasses = [{ name = \"car\", length = 4.0, width = 2.0, height = 1.5, match_iou = 0.6, unmatch_iou = 0.45 }]\n\
                    [run]\nseed = 7\nnumeric = \"f64\"\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!((c.grid.nx(), c.region.nx), (32, 4));
        assert_eq!(c.backbone.pe.mode, PeMode::Global);
        assert_eq!(c.dims.anchors_per_cell, 2);
        assert_eq!(c.anchors.class_names(), vec!["car"]);
        assert_eq!((c.seed, c.scene.seed, c.numeric), (7, 7, NumericMode::F64));
    }
}
