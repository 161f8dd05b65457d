//! Scene coordinate regression for RGB camera relocalization.
//!
//! The crate trains a regression forest on pixel-difference features, maps
//! each tree onto an equivalent two-hidden-layer network (a *ForestNet*),
//! fine-tunes those networks, averages ensemble predictions with a
//! differentiable geometric median, and recovers camera poses with a
//! preemptive RANSAC.

pub mod features;
pub mod forest;
pub mod forestnet;
pub mod metrics;
pub mod netsplit;
pub mod pipeline;
pub mod pose;
pub mod robust;
pub mod scene;
