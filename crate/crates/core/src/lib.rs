//! Numerical home for a family of elliptic algebras: theta-function spaces on
//! powers of an elliptic curve, the graded Poisson brackets living on them,
//! their star-product quantization, and the site-generator algebras whose
//! normal ordering realizes that quantization.
//!
//! Everything here is verification-first: each structure ships with seeded
//! randomized identity checks (see [`verify`]) rather than symbolic proofs.

// index-heavy kernel code reads better with explicit indices than zipped
// enumerations; every such loop couples several offset arrays
#![allow(clippy::needless_range_loop)]

pub mod boson;
pub mod error;
pub mod graded;
pub mod lattice;
pub mod seqcomb;
pub mod snf;
pub mod tensor;
pub mod theta;
pub mod verify;

pub use error::Error;

/// Crate-wide complex scalar.
pub type C64 = num_complex::Complex64;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
