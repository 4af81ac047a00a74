//! Capture IO, analyses, rendering and the command line for routing-geometry studies.

pub mod analysis;
pub mod capture;
pub mod cli;
pub mod corpus;
pub mod labels;
pub mod layers;
pub mod rater;
pub mod report;
pub mod svg;
pub mod synth_io;
pub mod validate;
