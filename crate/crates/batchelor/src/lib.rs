//! Passive-scalar turbulence in the Batchelor regime, simulated by exact
//! Lagrangian evolution of Gaussian scalar blobs under a white-in-time,
//! spatially linear incompressible flow, plus the analysis chain for the
//! resulting nodal lines: isoline extraction, box-counting dimensions,
//! perimeter/size statistics and Löwner driving-function diffusivity.
//!
//! Lengths are measured in units of the pumping scale `L` (so `L = 1`
//! internally) and rates are reported relative to the measured Lyapunov
//! exponent of the flow.

pub mod contour;
pub mod error;
pub mod flow;
pub mod fractal;
pub mod geom;
pub mod io;
pub mod loewner;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use geom::{Mat2, Rect, Vec2};
