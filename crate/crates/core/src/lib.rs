//! Metastability analysis of finite reversible Markov chains.
//!
//! The crate solves the Dirichlet problems behind hitting probabilities,
//! Laplace transforms and mean times, certifies metastable sets and their
//! hierarchy, computes low-lying Dirichlet spectra two independent ways and
//! evaluates exit-time distributions exactly and by simulation.

pub mod chain;
pub mod config;
pub mod error;
pub mod exit_law;
pub mod hitting;
pub mod identities;
pub mod io;
pub mod landscape;
pub mod linalg;
pub mod metastability;
pub mod report;
pub mod spectral;
pub mod subset;
pub mod verify;

pub use chain::{ChainModel, DirichletOperator, ValidationReport};
pub use config::Tolerances;
pub use error::{Error, Result};
pub use subset::SubsetMask;
