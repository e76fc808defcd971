pub mod linalg;
pub mod model;
pub mod metrics;
pub mod align;
pub mod detector;
pub mod zoo;
pub mod eval;
