//! Control-flow, liveness, loop and induction-variable analyses.

pub mod cfg;
pub mod dominators;
pub mod liveness;
pub mod loops;
pub mod scev;

pub use liveness::{compute_liveness, LivenessMap};
pub use loops::{find_loops, LoopInfo};
pub use scev::{is_used_in_addr_compute, scev_analyze, AddRecInfo, ScevExpr};
