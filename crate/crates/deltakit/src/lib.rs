//! File formats, the training loop, benchmarks and the command-line surface
//! built on `deltakit-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod gradcheck;
pub mod train;
pub mod verify;
