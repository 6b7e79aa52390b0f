//! Pipeline stages behind the `gausstr` binary, usable as a library.

pub mod artifacts;
pub mod commands;
