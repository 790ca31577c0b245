//! Joint-constrained dynamic SLAM estimation.
//!
//! Tracks a stereo camera from static scene structure, tracks moving rigid
//! objects through twists restricted to the freedom space of a mechanical
//! joint (planar, revolute, ...), and refines everything in a dynamic bundle
//! adjustment. A deterministic synthetic stereo simulator supplies ground
//! truth and data association for verification.

pub mod dynba;
pub mod error;
pub mod evalcli;
pub mod joints;
pub mod liegroup;
pub mod scenegeom;
pub mod simkit;
pub mod tracking;
pub mod worldmodel;

pub use error::{Error, Result};
