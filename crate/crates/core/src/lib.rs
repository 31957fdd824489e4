//! Active Testing: sequential search for targets in a (position x scale) pose
//! space. A quadtree posterior over poses is refined by cheap edge-density
//! queries chosen to maximize a Gini-index information gain, and a budgeted
//! perfect classifier confirms or rules out individual poses.

pub mod bench;
pub mod beta;
pub mod engine;
pub mod error;
pub mod features;
pub mod image;
pub mod lattice;
pub mod models;
pub mod oracle;
pub mod posterior;
pub mod rng;
pub mod scene;
pub mod scales;
pub mod training;

mod fenwick;

pub use error::{Error, Result};
