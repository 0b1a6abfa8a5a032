//! Darcy flow and tracer transport in 2D fractured porous media.
//!
//! Conductive fractures are 1D interfaces fitted by the mesh; blocking
//! fractures enter as line-integral resistances and may cut cells
//! arbitrarily. Flow uses a hybrid-mixed lowest-order Raviart-Thomas scheme
//! condensed to skeleton pressures; transport uses hybridized implicit
//! upwinding driven by the resulting fluxes.

pub mod bench;
pub mod cli;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod linsolve;
pub mod mesh;
pub mod transport;

pub use error::{Error, Result};
