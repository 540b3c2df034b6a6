//! File formats, configuration, and the end-to-end pipeline behind the
//! `advof` command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
