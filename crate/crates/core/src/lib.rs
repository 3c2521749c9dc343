//! Safety-focused, risk-aware cooperative perception over BEV grids.

pub mod bev;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grid;
pub mod harness;
pub mod payload;
pub mod protocol;
pub mod risk;
pub mod rle;
pub mod scenario;
pub mod selection;

pub use error::{Error, Result};
pub use grid::{CellIndex, GridSpec, Pose2D, Vec2};
