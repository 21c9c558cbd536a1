//! File formats, subcommands and the HTTP service behind the `rwprop`
//! binary.

pub mod commands;
pub mod formats;
pub mod outputs;
pub mod service;
