//! File formats and error mapping shared by the `evcharge` binary and its
//! tests.

pub mod error;
pub mod formats;
