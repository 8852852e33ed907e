//! Pieces of the `climprobe` binary that are useful on their own.

pub mod error;
pub mod render;
