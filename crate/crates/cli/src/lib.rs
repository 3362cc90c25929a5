//! Command-line front end for the sparse single-stride transformer engine:
//! configuration loading, subcommands and the selftest suites.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod selftest;
