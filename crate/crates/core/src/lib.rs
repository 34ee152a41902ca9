pub mod estimators;
pub mod experiment;
pub mod linalg;
pub mod realdata;
pub mod sem;
pub mod simulate;
pub mod stats;
