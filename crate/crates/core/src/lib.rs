pub mod par;
pub mod tensor;
pub mod graph;
pub mod losses;
pub mod models;
pub mod metrics;
pub mod pipeline;
