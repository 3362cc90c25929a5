//! Regional grouping, region shift, and region batching.
//!
//! Tokens are partitioned into non-overlapping rectangular regions of the
//! pillar grid. The shifted partition moves region boundaries by half a
//! region on each axis. Regions are then batched by token count: a region
//! with `2^i <= N < 2^(i+1)` (i in 0..=6) is padded to `2^(i+1)` slots, and
//! regions with `N >= 128` share one overflow bucket padded to the region
//! cell count.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{config_err, integrity_err, Result};
use crate::real::Real;
use crate::voxelizer::{Cell, GridConfig, TokenSet};

/// Largest bucket exponent covered by the power-of-two rule.
pub const MAX_BUCKET_EXPONENT: u32 = 6;
/// Token counts at or above this go to the overflow bucket.
pub const OVERFLOW_THRESHOLD: usize = 1 << (MAX_BUCKET_EXPONENT + 1);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionConfig {
    /// Region extent in meters.
    pub size_x: f64,
    pub size_y: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self { size_x: 3.84, size_y: 3.84 }
    }
}

/// Region extent in whole pillars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionCells {
    pub nx: u32,
    pub ny: u32,
}

impl RegionCells {
    pub fn new(nx: u32, ny: u32) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(config_err!("region must span at least one cell per axis"));
        }
        if !nx.is_multiple_of(2) || !ny.is_multiple_of(2) {
            return Err(config_err!("region cell counts must be even for the half-region shift, got {nx} x {ny}"));
        }
        Ok(Self { nx, ny })
    }

    pub fn max_tokens(&self) -> usize {
        self.nx as usize * self.ny as usize
    }

    /// Cell offset applied to coordinates before the shifted partition.
    pub fn shift(&self) -> (u32, u32) {
        (self.nx / 2, self.ny / 2)
    }
}

fn whole_cells(size: f64, pillar: f64, axis: &str) -> Result<u32> {
    if !(size > 0.0) || !size.is_finite() {
        return Err(config_err!("region size along {axis} must be positive, got {size}"));
    }
    let ratio = size / pillar;
    let cells = ratio.round();
    if cells < 1.0 || ((ratio - cells) / ratio).abs() > 1e-9 {
        return Err(config_err!("region size {size} m along {axis} is not a multiple of the pillar size {pillar} m"));
    }
    Ok(cells as u32)
}

impl RegionConfig {
    /// Converts metric region sizes into cell counts on `grid`.
    pub fn resolve(&self, grid: &GridConfig) -> Result<RegionCells> {
        let nx = whole_cells(self.size_x, grid.pillar_dx, "x")?;
        let ny = whole_cells(self.size_y, grid.pillar_dy, "y")?;
        RegionCells::new(nx, ny)
    }
}

/// Region index along both axes; ordered by `(ry, rx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionKey {
    pub ry: u32,
    pub rx: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub key: RegionKey,
    /// Token indices in canonical order.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAssignment {
    pub cells: RegionCells,
    pub shifted: bool,
    /// Region id of each token.
    pub region_of: Vec<usize>,
    /// Non-empty regions in ascending key order; the position is the region id.
    pub regions: Vec<Region>,
}

impl RegionAssignment {
    pub fn num_tokens(&self) -> usize {
        self.region_of.len()
    }

    /// Coordinate offset (cells) applied before the integer division.
    pub fn offset(&self) -> (u32, u32) {
        if self.shifted {
            self.cells.shift()
        } else {
            (0, 0)
        }
    }

    /// Lower-left cell of a region in grid coordinates (may be negative when shifted).
    pub fn region_origin(&self, key: RegionKey) -> (i64, i64) {
        let (ox, oy) = self.offset();
        (key.rx as i64 * self.cells.nx as i64 - ox as i64, key.ry as i64 * self.cells.ny as i64 - oy as i64)
    }

    pub fn key_of(&self, cell: Cell) -> RegionKey {
        let (ox, oy) = self.offset();
        RegionKey { rx: (cell.ix + ox) / self.cells.nx, ry: (cell.iy + oy) / self.cells.ny }
    }
}

/// Partitions tokens into regions, optionally on the half-shifted grid.
pub fn group_regions(coords: &[Cell], cells: RegionCells, shifted: bool) -> RegionAssignment {
    let mut probe = RegionAssignment { cells, shifted, region_of: Vec::new(), regions: Vec::new() };
    let keys: Vec<RegionKey> = coords.iter().map(|&c| probe.key_of(c)).collect();
    let mut order: Vec<usize> = (0..coords.len()).collect();
    // Stable: members keep canonical token order within a region.
    order.sort_by_key(|&i| keys[i]);
    let mut region_of = vec![0; coords.len()];
    let mut regions: Vec<Region> = Vec::new();
    for i in order {
        if regions.last().map(|r| r.key) != Some(keys[i]) {
            regions.push(Region { key: keys[i], members: Vec::new() });
        }
        region_of[i] = regions.len() - 1;
        regions.last_mut().expect("pushed").members.push(i);
    }
    probe.region_of = region_of;
    probe.regions = regions;
    probe
}

/// Bucket a region with `n` tokens falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BucketClass {
    /// `2^i <= n < 2^(i+1)`, padded to `2^(i+1)`.
    Pow2(u32),
    /// `n >= 128`, padded to the region cell count.
    Overflow,
}

impl BucketClass {
    pub fn for_count(n: usize) -> Self {
        assert!(n > 0, "empty regions are never batched");
        if n >= OVERFLOW_THRESHOLD {
            BucketClass::Overflow
        } else {
            BucketClass::Pow2(usize::BITS - 1 - n.leading_zeros())
        }
    }

    pub fn capacity(&self, max_tokens: usize) -> usize {
        match *self {
            BucketClass::Pow2(i) => 1 << (i + 1),
            BucketClass::Overflow => max_tokens,
        }
    }
}

/// Slot capacity for a region of `n` tokens.
pub fn bucket_capacity(n: usize, max_tokens: usize) -> usize {
    BucketClass::for_count(n).capacity(max_tokens)
}

/// Bookkeeping for one bucket; slots are laid out region-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketLayout {
    pub class: BucketClass,
    pub capacity: usize,
    /// Region ids in ascending order.
    pub regions: Vec<usize>,
    /// Token index per slot, `None` for padding. Length `regions.len() * capacity`.
    pub slots: Vec<Option<usize>>,
}

impl BucketLayout {
    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// Valid slots of region `r` (position within this bucket) are `0..count`.
    pub fn region_count(&self, r: usize) -> usize {
        self.slots[r * self.capacity..(r + 1) * self.capacity].iter().take_while(|s| s.is_some()).count()
    }

    /// Copies per-token rows into padded slot rows; padding stays zero.
    pub fn pad<T: Real>(&self, rows: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros((self.num_slots(), rows.ncols()));
        for (slot, t) in self.slots.iter().enumerate() {
            if let Some(t) = *t {
                out.row_mut(slot).assign(&rows.row(t));
            }
        }
        out
    }

    /// Writes valid slot rows back into per-token rows.
    pub fn unpad_into<T: Real>(&self, padded: ArrayView2<'_, T>, out: &mut Array2<T>) {
        for (slot, t) in self.slots.iter().enumerate() {
            if let Some(t) = *t {
                out.row_mut(t).assign(&padded.row(slot));
            }
        }
    }
}

/// Padding layout of every bucket, independent of the element type.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLayout {
    pub buckets: Vec<BucketLayout>,
    pub num_tokens: usize,
}

impl BatchLayout {
    pub fn new(assignment: &RegionAssignment) -> Self {
        let max_tokens = assignment.cells.max_tokens();
        let mut classes: Vec<(BucketClass, usize)> = assignment
            .regions
            .iter()
            .enumerate()
            .map(|(id, r)| (BucketClass::for_count(r.members.len()), id))
            .collect();
        classes.sort();
        let mut buckets: Vec<BucketLayout> = Vec::new();
        for (class, id) in classes {
            if buckets.last().map(|b| b.class) != Some(class) {
                buckets.push(BucketLayout {
                    class,
                    capacity: class.capacity(max_tokens),
                    regions: Vec::new(),
                    slots: Vec::new(),
                });
            }
            let b = buckets.last_mut().expect("pushed");
            let members = &assignment.regions[id].members;
            b.regions.push(id);
            b.slots.extend(members.iter().map(|&t| Some(t)));
            b.slots.extend(std::iter::repeat_n(None, b.capacity - members.len()));
        }
        Self { buckets, num_tokens: assignment.num_tokens() }
    }

    /// Slots allocated over all buckets.
    pub fn total_slots(&self) -> usize {
        self.buckets.iter().map(BucketLayout::num_slots).sum()
    }

    /// Fraction of allocated slots that are padding.
    pub fn padding_ratio(&self) -> f64 {
        let total = self.total_slots();
        if total == 0 {
            0.0
        } else {
            1.0 - self.num_tokens as f64 / total as f64
        }
    }

    /// Checks the layout places every token of `assignment` exactly once.
    pub fn verify(&self, assignment: &RegionAssignment) -> Result<()> {
        if self.num_tokens != assignment.num_tokens() {
            return Err(integrity_err!(
                "layout holds {} tokens, assignment {}",
                self.num_tokens,
                assignment.num_tokens()
            ));
        }
        let mut seen = vec![false; self.num_tokens];
        for b in &self.buckets {
            if b.slots.len() != b.regions.len() * b.capacity {
                return Err(integrity_err!("bucket of capacity {} has {} slots", b.capacity, b.slots.len()));
            }
            for (r, &id) in b.regions.iter().enumerate() {
                let region = assignment
                    .regions
                    .get(id)
                    .ok_or_else(|| integrity_err!("layout references missing region {id}"))?;
                let slots = &b.slots[r * b.capacity..(r + 1) * b.capacity];
                let valid: Vec<usize> = slots.iter().flatten().copied().collect();
                if valid != region.members {
                    return Err(integrity_err!("region {id} members disagree with its slots"));
                }
                for t in valid {
                    if std::mem::replace(&mut seen[t], true) {
                        return Err(integrity_err!("token {t} placed twice"));
                    }
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(t) => Err(integrity_err!("token {t} missing from layout")),
            None => Ok(()),
        }
    }

    /// Pads per-token rows into every bucket.
    pub fn pad<T: Real>(&self, rows: ArrayView2<'_, T>) -> Vec<Array2<T>> {
        self.buckets.par_iter().map(|b| b.pad(rows)).collect()
    }

    /// Inverse of [`BatchLayout::pad`]: valid slots back to canonical order.
    pub fn unpad<T: Real>(&self, blocks: &[Array2<T>], channels: usize) -> Array2<T> {
        let mut out = Array2::<T>::zeros((self.num_tokens, channels));
        for (b, block) in self.buckets.iter().zip(blocks) {
            b.unpad_into(block.view(), &mut out);
        }
        out
    }
}

/// Padded token features per bucket plus the layout that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBatch<T> {
    pub layout: BatchLayout,
    /// One `(regions * capacity, C)` block per bucket; padded rows are zero.
    pub features: Vec<Array2<T>>,
    /// Cell per slot, `None` on padding.
    pub coords: Vec<Vec<Option<Cell>>>,
}

impl<T: Real> RegionBatch<T> {
    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.layout.buckets.iter().map(BucketLayout::mask).collect()
    }
}

pub fn bucket_and_pad<T: Real>(assignment: &RegionAssignment, tokens: &TokenSet<T>) -> Result<RegionBatch<T>> {
    if assignment.num_tokens() != tokens.len() {
        return Err(integrity_err!(
            "assignment covers {} tokens, token set has {}",
            assignment.num_tokens(),
            tokens.len()
        ));
    }
    let layout = BatchLayout::new(assignment);
    let features = layout.pad(tokens.features.view());
    let coords = layout.buckets.iter().map(|b| b.slots.iter().map(|s| s.map(|t| tokens.coords[t])).collect()).collect();
    Ok(RegionBatch { layout, features, coords })
}

/// Restores canonical token order; padded slots are discarded.
pub fn unbatch<T: Real>(batch: &RegionBatch<T>, assignment: &RegionAssignment) -> Result<Array2<T>> {
    batch.layout.verify(assignment)?;
    if batch.features.len() != batch.layout.buckets.len() {
        return Err(integrity_err!(
            "{} feature blocks for {} buckets",
            batch.features.len(),
            batch.layout.buckets.len()
        ));
    }
    let channels = batch.features.first().map_or(0, |f| f.ncols());
    for (b, f) in batch.layout.buckets.iter().zip(&batch.features) {
        if f.nrows() != b.num_slots() || f.ncols() != channels {
            return Err(integrity_err!(
                "feature block shape {:?} does not match bucket of {} slots",
                f.dim(),
                b.num_slots()
            ));
        }
    }
    Ok(batch.layout.unpad(&batch.features, channels))
}

/// Occupancy statistics for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// `(capacity, regions, valid tokens)` per bucket.
    pub buckets: Vec<(usize, usize, usize)>,
    pub padding_ratio: f64,
}

pub fn batch_stats(layout: &BatchLayout) -> BatchStats {
    BatchStats {
        buckets: layout
            .buckets
            .iter()
            .map(|b| (b.capacity, b.regions.len(), b.slots.iter().filter(|s| s.is_some()).count()))
            .collect(),
        padding_ratio: layout.padding_ratio(),
    }
}
