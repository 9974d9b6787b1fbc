//! Depth-image neural collision prediction embedded in a trajectory-tracking
//! NMPC for a non-holonomic aerial robot, validated in a self-contained
//! synthetic 3D world.
//!
//! The pipeline: [`world`] renders depth images of procedurally generated
//! scenes, [`dataset`] turns them into labeled point corpora, [`neural`]
//! trains a variational-encoder + coordinate-MLP collision classifier,
//! [`nmpc`] embeds the classifier as a differentiable constraint inside a
//! real-time-iteration SQP controller over the [`dynamics`] model, and
//! [`runner`] closes the loop in simulation.

pub mod dataset;
pub mod dynamics;
pub mod geom;
pub mod neural;
pub mod nmpc;
pub mod runner;
pub mod world;
