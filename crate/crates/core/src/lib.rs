//! Single-stride sparse transformer engine for LiDAR pillar tokens.
//!
//! Pipeline: [`voxelizer`] turns points into pillar tokens, [`grouping`]
//! partitions them into (shifted) regions and pads regions into buckets,
//! [`attention`] runs the regional attention blocks that [`backbone`]
//! stacks, [`densify`] scatters tokens back to a BEV map, and [`head`]
//! holds the anchor head and its losses. [`complexity`] counts MACs
//! against the analytic cost model. [`model`] wires the stages into one
//! scene pass, [`io`] reads and writes point and tensor files, and
//! [`synth`] generates seeded test scenes.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod complexity;
pub mod densify;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod gradcheck;
pub mod grouping;
pub mod head;
pub mod io;
pub mod linalg;
pub mod model;
pub mod real;
pub mod rng;
pub mod synth;
pub mod voxelizer;

pub use error::{Result, SstError};
pub use real::{NumericMode, Real};
