pub mod model;
pub mod objective;
pub mod sequence;
pub mod synthworld;
pub mod tensor;
pub mod trainer;
pub mod eval;
pub mod service;
