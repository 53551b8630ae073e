pub mod adapters;
pub mod backbone;
pub mod error;
pub mod hypernet;
pub mod lab;
pub mod metrics;
pub mod numerics;
pub mod personalize;
pub mod synthbench;

pub use error::{Error, FormatError, Result};

pub type Real = f64;
pub type Matrix = numerics::Matrix<Real>;
pub type Graph<'a> = numerics::Graph<'a, Real>;
