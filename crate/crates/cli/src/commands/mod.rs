pub mod distill;
pub mod eval;
pub mod pipeline;
pub mod reason;
pub mod segment;
