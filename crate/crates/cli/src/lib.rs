//! Plumbing behind the `lmm` binary: on-disk schemas, CSV ingestion,
//! contrast resolution, and the command drivers. Exposed as a library so
//! integration tests can read the same artifacts the binary writes.

pub mod artifact;
pub mod commands;
pub mod contrast;
pub mod table;
