//! Point cloud to pillar tokens.
//!
//! Points are bucketed into vertical pillars on a regular BEV grid, each
//! point is lifted to a 9-dim feature (xyz, intensity, offset to the pillar
//! center in x/y, offset to the pillar's point mean in xyz), passed through
//! one linear layer with a rectifier, and max-pooled per pillar.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::complexity::FlopLedger;
use crate::error::{arg_err, config_err, integrity_err, Result};
use crate::linalg;
use crate::real::Real;

/// Per-point input width of the pillar encoder.
pub const POINT_FEATURES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.z.total_cmp(&other.z))
            .then(self.intensity.total_cmp(&other.intensity))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()))
        {
            return Err(arg_err!("point {i} has a non-finite coordinate"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// BEV pillar grid. x/y cells are half-open `[lo, hi)`; the z range is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub pillar_dx: f64,
    pub pillar_dy: f64,
    /// Points kept per pillar; `None` keeps all of them.
    pub max_points_per_pillar: Option<usize>,
}

impl Default for GridConfig {
    /// 468 x 468 pillars of 0.32 m over a 149.76 m square, 6 m tall.
    fn default() -> Self {
        Self {
            x_min: -74.88,
            x_max: 74.88,
            y_min: -74.88,
            y_max: 74.88,
            z_min: -2.0,
            z_max: 4.0,
            pillar_dx: 0.32,
            pillar_dy: 0.32,
            max_points_per_pillar: None,
        }
    }
}

impl GridConfig {
    /// Square grid of `cells` x `cells` pillars anchored at the origin.
    pub fn square(cells: usize, pillar: f64) -> Self {
        let extent = cells as f64 * pillar;
        Self {
            x_min: 0.0,
            x_max: extent,
            y_min: 0.0,
            y_max: extent,
            pillar_dx: pillar,
            pillar_dy: pillar,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite =
            [self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max, self.pillar_dx, self.pillar_dy]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return Err(config_err!("grid bounds must be finite"));
        }
        if !(self.x_max > self.x_min && self.y_max > self.y_min && self.z_max >= self.z_min) {
            return Err(config_err!("grid maxima must exceed minima"));
        }
        if !(self.pillar_dx > 0.0 && self.pillar_dy > 0.0) {
            return Err(config_err!("pillar size must be positive"));
        }
        if self.nx() < 1 || self.ny() < 1 {
            return Err(config_err!("grid must span at least one pillar per axis"));
        }
        if self.max_points_per_pillar == Some(0) {
            return Err(config_err!("max points per pillar must be at least 1"));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        ((self.x_max - self.x_min) / self.pillar_dx).round() as usize
    }

    pub fn ny(&self) -> usize {
        ((self.y_max - self.y_min) / self.pillar_dy).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.nx() * self.ny()
    }

    /// Center of cell `(ix, iy)` in meters.
    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        (self.x_min + (cell.ix as f64 + 0.5) * self.pillar_dx, self.y_min + (cell.iy as f64 + 0.5) * self.pillar_dy)
    }

    /// Cell owning a point, or `None` when the point lies outside the grid.
    pub fn locate(&self, p: &Point) -> Option<Cell> {
        let inside = p.x >= self.x_min
            && p.x < self.x_max
            && p.y >= self.y_min
            && p.y < self.y_max
            && p.z >= self.z_min
            && p.z <= self.z_max;
        if !inside {
            return None;
        }
        let ix = (((p.x - self.x_min) / self.pillar_dx).floor() as usize).min(self.nx() - 1);
        let iy = (((p.y - self.y_min) / self.pillar_dy).floor() as usize).min(self.ny() - 1);
        Some(Cell::new(ix as u32, iy as u32))
    }
}

/// Integer pillar coordinate. Ordered by `(iy, ix)`, the canonical token order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub ix: u32,
    pub iy: u32,
}

impl Cell {
    pub const fn new(ix: u32, iy: u32) -> Self {
        Self { ix, iy }
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.iy, self.ix).cmp(&(other.iy, other.ix))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Points grouped by pillar, in canonical cell order.
#[derive(Debug, Clone)]
pub struct PillarMap {
    pub grid: GridConfig,
    pub groups: BTreeMap<Cell, Vec<Point>>,
    /// Points outside the grid or beyond the per-pillar cap.
    pub dropped: usize,
}

impl PillarMap {
    pub fn total_points(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }
}

pub fn assign_pillars(cloud: &PointCloud, grid: &GridConfig) -> Result<PillarMap> {
    grid.validate()?;
    let mut groups: BTreeMap<Cell, Vec<Point>> = BTreeMap::new();
    let mut dropped = 0;
    for p in &cloud.points {
        match grid.locate(p) {
            Some(cell) => {
                let members = groups.entry(cell).or_default();
                if grid.max_points_per_pillar.is_some_and(|cap| members.len() >= cap) {
                    dropped += 1;
                } else {
                    members.push(*p);
                }
            }
            None => dropped += 1,
        }
    }
    Ok(PillarMap { grid: grid.clone(), groups, dropped })
}

/// Sparse tokens: one feature row per occupied cell, coords unique and sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub coords: Vec<Cell>,
    pub features: Array2<T>,
}

impl<T: Real> TokenSet<T> {
    /// Validates canonical ordering (which implies uniqueness).
    pub fn new(coords: Vec<Cell>, features: Array2<T>) -> Result<Self> {
        if coords.len() != features.nrows() {
            return Err(arg_err!("{} coords but {} feature rows", coords.len(), features.nrows()));
        }
        if let Some(w) = coords.windows(2).position(|w| w[0] >= w[1]) {
            return Err(integrity_err!(
                "coords not strictly increasing in (iy, ix) at {}: {:?} then {:?}",
                w,
                coords[w],
                coords[w + 1]
            ));
        }
        Ok(Self { coords, features })
    }

    /// Sorts rows into canonical order; rejects duplicate cells.
    pub fn from_unsorted(coords: Vec<Cell>, features: Array2<T>) -> Result<Self> {
        if coords.len() != features.nrows() {
            return Err(arg_err!("{} coords but {} feature rows", coords.len(), features.nrows()));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        let sorted: Vec<Cell> = order.iter().map(|&i| coords[i]).collect();
        let feats = linalg::gather_rows(features.view(), &order);
        Self::new(sorted, feats)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    pub fn with_features(&self, features: Array2<T>) -> Self {
        Self { coords: self.coords.clone(), features }
    }

    /// Checks every coordinate lies inside `grid`.
    pub fn check_bounds(&self, grid: &GridConfig) -> Result<()> {
        let (nx, ny) = (grid.nx() as u32, grid.ny() as u32);
        match self.coords.iter().find(|c| c.ix >= nx || c.iy >= ny) {
            Some(c) => Err(arg_err!("token at {c:?} lies outside the {nx} x {ny} grid")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarEncoderParams<T> {
    /// (9, C_enc)
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> PillarEncoderParams<T> {
    pub fn channels(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight.nrows() != POINT_FEATURES || self.bias.len() != self.weight.ncols() {
            return Err(arg_err!(
                "pillar encoder expects ({POINT_FEATURES}, C) weight and C bias, got {:?} and {}",
                self.weight.dim(),
                self.bias.len()
            ));
        }
        if self.weight.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(arg_err!("pillar encoder weights must be finite"));
        }
        Ok(())
    }
}

/// Builds the 9-dim augmented feature rows for one pillar.
///
/// The mean is summed over the points in a value-sorted order so the result
/// does not depend on the order points arrived in.
pub fn augment_pillar(points: &[Point], cell: Cell, grid: &GridConfig) -> Vec<[f64; POINT_FEATURES]> {
    let mut sorted = points.to_vec();
    sorted.sort_by(Point::total_cmp);
    let n = sorted.len() as f64;
    let (sx, sy, sz) = sorted.iter().fold((0.0, 0.0, 0.0), |acc, p| (acc.0 + p.x, acc.1 + p.y, acc.2 + p.z));
    let (mx, my, mz) = (sx / n, sy / n, sz / n);
    let (cx, cy) = grid.cell_center(cell);
    points.iter().map(|p| [p.x, p.y, p.z, p.intensity, p.x - cx, p.y - cy, p.x - mx, p.y - my, p.z - mz]).collect()
}

pub fn encode_pillars<T: Real>(
    pillars: &PillarMap,
    params: &PillarEncoderParams<T>,
    ledger: Option<&mut FlopLedger>,
) -> Result<TokenSet<T>> {
    params.validate()?;
    let channels = params.channels();
    let total = pillars.total_points();
    let mut rows = Array2::<T>::zeros((total, POINT_FEATURES));
    let mut spans = Vec::with_capacity(pillars.groups.len());
    let mut cursor = 0;
    for (&cell, points) in &pillars.groups {
        if points.is_empty() {
            return Err(arg_err!("pillar {cell:?} has no points"));
        }
        for feat in augment_pillar(points, cell, &pillars.grid) {
            for (k, v) in feat.iter().enumerate() {
                rows[[cursor, k]] = T::of(*v);
            }
            cursor += 1;
        }
        spans.push((cell, cursor - points.len(), cursor));
    }
    let mut hidden = linalg::linear(rows.view(), params.weight.view(), params.bias.view());
    linalg::relu_inplace(&mut hidden);
    if let Some(ledger) = ledger {
        ledger.pillar_encoder += (total * POINT_FEATURES * channels) as u64;
    }
    let coords: Vec<Cell> = spans.iter().map(|s| s.0).collect();
    let features = max_pool_spans(hidden.view(), &spans, channels);
    TokenSet::new(coords, features)
}

fn max_pool_spans<T: Real>(hidden: ArrayView2<'_, T>, spans: &[(Cell, usize, usize)], channels: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((spans.len(), channels));
    for (row, &(_, start, end)) in out.outer_iter_mut().zip(spans) {
        let mut row = row;
        row.assign(&hidden.row(start));
        for r in start + 1..end {
            row.zip_mut_with(&hidden.row(r), |a, &b| {
                if b > *a {
                    *a = b;
                }
            });
        }
    }
    out
}

/// Fraction of grid cells holding a token.
pub fn sparsity<T: Real>(tokens: &TokenSet<T>, grid: &GridConfig) -> f64 {
    tokens.len() as f64 / grid.num_cells() as f64
}
