// Validation writes `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod control;
pub mod dataset;
pub mod estimator;
pub mod mechanics;
pub mod rng;
pub mod scene;
pub mod sensing;
