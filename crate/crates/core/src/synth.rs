//! Seeded synthetic LiDAR-like scenes with a target pillar occupancy.
//!
//! The generator picks exactly `round(target * cells)` occupied pillars
//! (or every reachable one if fewer exist) and drops a few points inside
//! each, away from cell borders so float32 storage cannot move them.

use std::collections::HashSet;
use std::str::FromStr;

use crate::error::{arg_err, Result};
use crate::rng::XorShift64Star;
use crate::voxelizer::{Cell, GridConfig, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Uniform,
    /// Pillars concentrate around object-like blobs.
    Clustered,
}

impl FromStr for Profile {
    type Err = crate::SstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Profile::Uniform),
            "clustered" => Ok(Profile::Clustered),
            other => Err(arg_err!("unknown scene profile {other:?} (uniform, clustered)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub target_sparsity: f64,
    /// Side of the square, centred on the grid centre, that receives points (m).
    pub extent: f64,
    pub profile: Profile,
    pub max_points_per_pillar: u32,
}

impl SceneSpec {
    pub fn new(seed: u64, target_sparsity: f64, extent: f64, profile: Profile) -> Self {
        Self { seed, target_sparsity, extent, profile, max_points_per_pillar: 8 }
    }
}

const CLUSTER_SIGMA_M: f64 = 3.0;
const CELLS_PER_CLUSTER: usize = 60;
const BORDER: f64 = 0.05;

fn cells_in_extent(grid: &GridConfig, extent: f64) -> Vec<Cell> {
    let cx = 0.5 * (grid.x_min + grid.x_max);
    let cy = 0.5 * (grid.y_min + grid.y_max);
    let half = 0.5 * extent;
    let mut cells = Vec::new();
    for iy in 0..grid.ny() as u32 {
        for ix in 0..grid.nx() as u32 {
            let (x, y) = grid.cell_center(Cell::new(ix, iy));
            if (x - cx).abs() <= half && (y - cy).abs() <= half {
                cells.push(Cell::new(ix, iy));
            }
        }
    }
    cells
}

fn pick_uniform(rng: &mut XorShift64Star, mut cells: Vec<Cell>, count: usize) -> Vec<Cell> {
    for i in 0..count {
        let j = i + rng.below((cells.len() - i) as u64) as usize;
        cells.swap(i, j);
    }
    cells.truncate(count);
    cells
}

fn pick_clustered(rng: &mut XorShift64Star, grid: &GridConfig, cells: Vec<Cell>, count: usize) -> Vec<Cell> {
    let allowed: HashSet<Cell> = cells.iter().copied().collect();
    let centres: Vec<Cell> = pick_uniform(rng, cells.clone(), (count / CELLS_PER_CLUSTER).clamp(1, cells.len()));
    let sigma_x = CLUSTER_SIGMA_M / grid.pillar_dx;
    let sigma_y = CLUSTER_SIGMA_M / grid.pillar_dy;
    let mut chosen = Vec::with_capacity(count);
    let mut taken = HashSet::with_capacity(count);
    let mut attempts = 0usize;
    while chosen.len() < count && attempts < 50 * count {
        attempts += 1;
        let c = centres[rng.below(centres.len() as u64) as usize];
        let ix = (c.ix as f64 + sigma_x * rng.normal()).round();
        let iy = (c.iy as f64 + sigma_y * rng.normal()).round();
        if ix < 0.0 || iy < 0.0 {
            continue;
        }
        let cell = Cell::new(ix as u32, iy as u32);
        if allowed.contains(&cell) && taken.insert(cell) {
            chosen.push(cell);
        }
    }
    // Top up uniformly if the blobs saturate.
    if chosen.len() < count {
        let rest: Vec<Cell> = cells.into_iter().filter(|c| !taken.contains(c)).collect();
        let need = count - chosen.len();
        chosen.extend(pick_uniform(rng, rest, need));
    }
    chosen
}

pub fn synth_scene(spec: &SceneSpec, grid: &GridConfig) -> Result<PointCloud> {
    grid.validate()?;
    if !(spec.target_sparsity > 0.0 && spec.target_sparsity <= 1.0) {
        return Err(arg_err!("target sparsity must lie in (0, 1], got {}", spec.target_sparsity));
    }
    if !(spec.extent > 0.0 && spec.extent.is_finite()) {
        return Err(arg_err!("scene extent must be positive, got {}", spec.extent));
    }
    if spec.max_points_per_pillar == 0 {
        return Err(arg_err!("need at least one point per pillar"));
    }
    let mut rng = XorShift64Star::new(spec.seed);
    let cells = cells_in_extent(grid, spec.extent);
    let count = ((spec.target_sparsity * grid.num_cells() as f64).round() as usize).min(cells.len());
    let mut chosen = match spec.profile {
        Profile::Uniform => pick_uniform(&mut rng, cells, count),
        Profile::Clustered => pick_clustered(&mut rng, grid, cells, count),
    };
    chosen.sort();
    let mut points = Vec::new();
    for cell in chosen {
        let x0 = grid.x_min + cell.ix as f64 * grid.pillar_dx;
        let y0 = grid.y_min + cell.iy as f64 * grid.pillar_dy;
        let n = 1 + rng.below(spec.max_points_per_pillar as u64);
        for _ in 0..n {
            let x = x0 + grid.pillar_dx * rng.uniform(BORDER, 1.0 - BORDER);
            let y = y0 + grid.pillar_dy * rng.uniform(BORDER, 1.0 - BORDER);
            let z = grid.z_min + (grid.z_max - grid.z_min) * rng.uniform(BORDER, 1.0 - BORDER);
            points.push(Point::new(x, y, z, rng.next_f64()));
        }
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelizer::assign_pillars;

    fn occupancy(cloud: &PointCloud, grid: &GridConfig) -> f64 {
        assign_pillars(cloud, grid).unwrap().groups.len() as f64 / grid.num_cells() as f64
    }

    #[test]
    fn seeded_scenes_repeat() {
        let grid = GridConfig::square(40, 0.32);
        let spec = SceneSpec::new(9, 0.2, 20.0, Profile::Clustered);
        assert_eq!(synth_scene(&spec, &grid).unwrap(), synth_scene(&spec, &grid).unwrap());
        let other = SceneSpec { seed: 10, ..spec };
        assert_ne!(synth_scene(&spec, &grid).unwrap(), synth_scene(&other, &grid).unwrap());
    }

    #[test]
    fn full_occupancy_on_tiny_extent() {
        let grid = GridConfig::square(5, 0.32);
        let cloud = synth_scene(&SceneSpec::new(1, 1.0, 1.6, Profile::Uniform), &grid).unwrap();
        assert_eq!(occupancy(&cloud, &grid), 1.0);
    }

    #[test]
    fn default_grid_hits_target() {
        let grid = GridConfig::default();
        for profile in [Profile::Uniform, Profile::Clustered] {
            let cloud = synth_scene(&SceneSpec::new(3, 0.09, 150.0, profile), &grid).unwrap();
            let s = occupancy(&cloud, &grid);
            assert!((0.072..=0.108).contains(&s), "{profile:?}: {s}");
        }
    }

    #[test]
    fn bad_specs() {
        let grid = GridConfig::square(5, 0.32);
        assert!(synth_scene(&SceneSpec::new(1, 0.0, 1.0, Profile::Uniform), &grid).is_err());
        assert!(synth_scene(&SceneSpec::new(1, 1.5, 1.0, Profile::Uniform), &grid).is_err());
        assert!("dense".parse::<Profile>().is_err());
    }
}
