pub mod annotator;
pub mod data;
pub mod explain;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod trainer;
