//! Hierarchical 3D scene graphs built from posed RGB-D sequences.
//!
//! The build runs bottom-up: [`ingest`] fuses the scene cloud, [`hierseg`]
//! splits it into floors and rooms, [`keyframes`] picks a sparse set of
//! representative views per room, [`objects`] lifts detections into merged
//! 3D objects, [`summaries`] produces grounded descriptions, and [`graph`]
//! freezes everything into a five-level tree. [`ragindex`] answers queries
//! against the frozen graph and [`evalharness`] scores the results.
//!
//! Perception models live behind the [`providers::Provider`] trait; the
//! deterministic [`providers::MockProvider`] lets every stage run offline.

pub mod config;
pub mod evalharness;
pub mod graph;
pub mod hierseg;
pub mod ingest;
pub mod keyframes;
pub mod objects;
pub mod pipeline;
pub mod providers;
pub mod ragindex;
pub mod summaries;
pub mod synth;

mod util;

pub use config::Config;
pub use graph::SceneGraph;
pub use ingest::{Intrinsics, PointCloud, Pose, PosedFrame, Sequence, VoxelSet};
pub use providers::Provider;
