pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod explain;
mod hashing;
pub mod ingest;
pub mod model;
pub mod relgraphs;
pub mod training;

pub use error::{Error, Result};
pub use hashing::{hash_f64s, hash_ids, sha256_hex};
