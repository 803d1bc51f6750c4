//! Trajectory estimation for sensorless freehand 3D ultrasound, fusing image
//! pairs with IMU acceleration and orientation.
//!
//! The modules follow the data: [`geometry`] and [`imu`] hold the math,
//! [`simulator`] and [`scandata`] produce and store scans, [`estimator`] is
//! the network, [`learn`] trains and adapts it, and [`eval`] scores the
//! result.

pub mod error;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod imu;
pub mod learn;
pub mod scandata;
pub mod simulator;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/imu.md")]
    struct Imu;
    #[doc = include_str!("../../../book/src/simulation.md")]
    struct Simulation;
    #[doc = include_str!("../../../book/src/estimator.md")]
    struct Estimator;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
