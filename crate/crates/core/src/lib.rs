//! Loop-closure detection and pose-graph SLAM for directional 4D imaging
//! radar, with a synthetic radar simulator for desk-scale verification.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod sim;
pub mod spatial;
pub mod keyframing;
pub mod odometry;
pub mod registration;
pub mod logistic;
pub mod alignment;
pub mod place_recognition;
pub mod evaluation;
pub mod pose_graph;
pub mod loop_verification;
