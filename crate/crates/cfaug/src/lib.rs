//! File formats, service clients, worker pools and the command-line
//! pipeline around `cfaug-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod runner;
pub mod service;
