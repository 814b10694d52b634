//! Non-learned machinery of pillar-based LiDAR 3D object detection.
//!
//! The crate covers multi-view pillarization ([`views`], [`pillars`]),
//! target assignment and box codecs for anchor-, point- and pillar-based
//! heads ([`targets`]), detection losses with analytic gradients
//! ([`losses`]), decoding plus oriented NMS ([`detect`]), distance-binned
//! AP evaluation ([`eval`]) and a deterministic synthetic scene generator
//! ([`synth`]) used to close the loop end to end.

pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geom;
pub mod losses;
pub mod pillars;
pub mod synth;
pub mod targets;
pub mod views;

pub use error::{Error, Result};
pub use geom::{Box7, Point3};
