//! Configuration, file formats, the toy task and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod psnr;
pub mod schema;
pub mod toy;
