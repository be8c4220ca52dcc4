//! Link prediction over knowledge graphs by fusing a structural relation graph
//! with a text-similarity relation graph, plus the evaluation and benchmark
//! hygiene tooling around it.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod hygiene;
pub mod kg;
pub mod model;
pub mod relgraph;
pub mod seed;
pub mod synthetic;
pub mod text;

pub use error::{Error, Result};
