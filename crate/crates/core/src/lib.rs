#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod invariance;
pub mod plot;
pub mod probes;
pub mod quality;
pub mod stats;
pub mod synth;
pub mod tsne;
pub mod verification;
