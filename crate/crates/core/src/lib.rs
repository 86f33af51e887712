//! Construction of refracting surfaces that send the radiation of a point
//! source, given on a cone of directions, onto a prescribed distribution of
//! energy on a target screen or set of far-field directions.
//!
//! The surfaces are envelopes of one-parameter families of building blocks
//! (Cartesian ovals in the near field, ellipsoids and hyperboloids in the far
//! field, affine functions for the planar second boundary value problem).
//! A coordinate descent fixes one parameter and adjusts the others until every
//! target receives its prescribed energy. Results are checked by Monte-Carlo
//! ray tracing through Snell's law.

pub mod error;
pub mod geometry;
pub mod blocks;
pub mod ovals;
pub mod polygon;
pub mod refractor;
pub mod snell;
pub mod solver;
pub mod verify;
pub mod scene;
pub mod cli;

pub use error::ConfigError;
pub use geometry::{QuadratureRule, SourceDomain, UnitVec, Vec3};
pub use ovals::CartesianOval;
pub use snell::RefractionRatio;
