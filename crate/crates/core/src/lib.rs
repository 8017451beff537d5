pub mod autodiff;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod nn;
