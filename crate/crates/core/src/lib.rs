//! Sparse domination of Calderón–Zygmund operators on dyadic lattices.

pub mod cli;
pub mod domination;
pub mod error;
pub mod function;
pub mod grid;
pub mod operator;
pub mod sparse;
pub mod weights;

pub use error::{Error, Result};
