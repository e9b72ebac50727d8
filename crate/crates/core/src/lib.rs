//! Discovery-driven object detection on single RGB-D frames.
//!
//! Repeated objects in a scene are found by matching local features
//! against the same image and verifying the matches with rigid 3D motions.
//! Each discovered instance becomes one region proposal; the proposals are
//! classified and the class vectors of instances of the same object are
//! fused. The crate also ships a synthetic scene generator, a window
//! baseline and precision/recall evaluation.

pub mod baseline;
pub mod classify;
pub mod dataset;
pub mod discovery;
pub mod eval;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod pipeline;
pub mod proposals;
pub mod scenegen;
