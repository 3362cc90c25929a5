//! Random instances for property checks, shared by tests and the selftest command.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::real::Real;
use crate::rng::XorShift64Star;
use crate::voxelizer::{Cell, TokenSet};

/// `n` distinct cells drawn uniformly from an `nx` x `ny` grid.
pub fn random_cells(rng: &mut XorShift64Star, n: usize, nx: u32, ny: u32) -> Vec<Cell> {
    assert!(n <= nx as usize * ny as usize, "more tokens than cells");
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert(Cell::new(rng.below(nx as u64) as u32, rng.below(ny as u64) as u32));
    }
    set.into_iter().collect()
}

/// Token set with uniform features in [-1, 1].
pub fn random_tokens<T: Real>(rng: &mut XorShift64Star, n: usize, nx: u32, ny: u32, channels: usize) -> TokenSet<T> {
    let coords = random_cells(rng, n, nx, ny);
    let features = Array2::from_shape_fn((n, channels), |_| T::of(rng.uniform(-1.0, 1.0)));
    TokenSet::new(coords, features).expect("sorted distinct cells")
}

/// Uniform matrix in [-1, 1], e.g. upstream gradients.
pub fn random_matrix<T: Real>(rng: &mut XorShift64Star, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::of(rng.uniform(-1.0, 1.0)))
}
