//! Files and the command line: config text, checkpoints, CSV and SVG.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csv;
pub mod svg;
