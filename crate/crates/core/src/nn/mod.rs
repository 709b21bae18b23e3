//! Parameters, forward sessions and the composite network blocks.

mod blocks;
pub mod check;
mod params;

pub use blocks::*;
pub use params::*;

#[cfg(test)]
mod tests;
