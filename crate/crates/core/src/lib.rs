//! Semantic SLAM over planes, rooms and keyframes, with operator-created
//! rooms as weighted constraints.

pub mod factors;
pub mod geometry;
pub mod optimizer;
pub mod room_detect;
pub mod scene_graph;
pub mod metrics;
pub mod simulator;
