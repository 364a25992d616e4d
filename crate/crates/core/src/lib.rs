//! Joinable table discovery over column repositories.
//!
//! Two families of search live side by side:
//!
//! * exact top-k joinability search ([`oracle`]) for equi-joins (cell equality)
//!   and semantic joins (cell embeddings within a distance threshold), plus a
//!   MinHash approximation of the equi-join case ([`sketch`]);
//! * embedding-based retrieval: a column is rendered to text
//!   ([`contextualize`]), embedded to a fixed-length vector ([`embed`]) and
//!   looked up in an HNSW graph ([`ann`]).
//!
//! [`trainprep`] produces contrastive training pairs for an external column
//! encoder, [`evalkit`] scores approximate results against the exact ones and
//! [`bench`] generates synthetic lakes and times the search methods.

pub mod ann;
mod binio;
pub mod hashing;
pub mod bench;
pub mod contextualize;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod oracle;
pub mod par;
pub mod sketch;
pub mod trainprep;

pub use error::{Error, Result};
