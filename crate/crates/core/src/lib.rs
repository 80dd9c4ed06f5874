//! Fault-injection and recovery laboratory for a small SSA IR.

pub mod analysis;
pub mod campaign;
pub mod injector;
pub mod kernels;
pub mod mir;
pub mod recovery;
pub mod runtime;
pub mod transforms;
pub mod vm;
