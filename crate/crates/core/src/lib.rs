//! Process-driven interleaved generation over a symbolic grid world.
//!
//! A prompt is a small scene graph written in a constrained DSL. The
//! [`planner`] decomposes it into incremental steps, the [`microworld`]
//! sketches each step onto a 6×6 raster (optionally with seeded faults), the
//! [`inspector`] checks plans and drafts exactly, and the [`orchestrator`]
//! runs the plan → sketch → inspect → refine cycle. [`seqcodec`] serializes
//! trajectories into interleaved token streams with loss masks and compiles
//! the three training subsets; [`flowmath`] verifies the training-objective
//! algebra and [`evalharness`] compares process-driven and single-pass
//! generation on category suites.

pub mod cli;
pub mod evalharness;
pub mod flowmath;
pub mod inspector;
pub mod microworld;
pub mod orchestrator;
pub mod planner;
pub mod rng;
pub mod scene_graph;
pub mod seqcodec;

pub use inspector::{Critique, Verdict, VerdictStatus};
pub use microworld::{Cell, FaultKind, FaultLabel, FaultModel, Placement, RasterImage};
pub use orchestrator::{RunConfig, Segment, Trajectory};
pub use planner::{EditOp, EditProgram, Step, SubgraphChain};
pub use scene_graph::{Color, ObjKey, Relation, RelationEdge, SceneGraph, Shape};
