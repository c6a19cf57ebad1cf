//! Tightly coupled LiDAR-inertial odometry with frame-to-frame plane
//! association, online extrinsic and time-delay calibration.

pub mod association;
pub mod config;
pub mod estimator;
pub mod eval;
pub mod ins;
pub mod io;
pub mod pipeline;
pub mod pointcloud;
pub mod se3;
pub mod sim;
pub mod solver;
