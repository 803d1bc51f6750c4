//! IMU preprocessing and a parametric IMU synthesizer.
//!
//! Orientations are absolute Euler angles of the sensor in the world
//! (east-north-up) frame. Accelerations are in mm/s², expressed in the sensor
//! frame, with gravity included as measured.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, matrix_to_euler, EulerAngles, Pose, Vec3};

/// Standard gravity in the world frame, mm/s².
pub const GRAVITY_WORLD: Vec3 = Vec3::new(0.0, 0.0, -9806.65);

/// One IMU sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuRecord {
    pub orientation: EulerAngles,
    pub acceleration: Vec3,
}

/// IMU signals ready to feed the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedImu {
    /// `N - 1` relative rotations between consecutive frames.
    pub relative_euler: Vec<EulerAngles>,
    /// `N` gravity-free, per-axis zero-mean accelerations.
    pub acceleration: Vec<Vec3>,
}

impl ProcessedImu {
    pub fn from_records(records: &[ImuRecord]) -> Result<Self> {
        let orientations: Vec<EulerAngles> = records.iter().map(|r| r.orientation).collect();
        Ok(ProcessedImu {
            relative_euler: relative_euler(&orientations)?,
            acceleration: preprocess_acceleration(records),
        })
    }

    /// Accelerations of the interior frames `1..N-1`, the range the
    /// estimator consumes.
    pub fn interior_acceleration(&self) -> &[Vec3] {
        let n = self.acceleration.len();
        if n < 3 {
            &[]
        } else {
            &self.acceleration[1..n - 1]
        }
    }
}

/// Relative rotation between consecutive orientations,
/// `Φ_i = M⁻¹(M(O_i)⁻¹ M(O_{i+1}))`.
pub fn relative_euler(orientations: &[EulerAngles]) -> Result<Vec<EulerAngles>> {
    if orientations.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: orientations.len(),
        });
    }
    let mats: Vec<_> = orientations.iter().map(euler_to_matrix).collect();
    mats.windows(2)
        .map(|w| Ok(matrix_to_euler(&(w[0].transpose() * w[1]))?.angles))
        .collect()
}

/// Gravity as seen in the sensor frame of a given orientation.
pub fn gravity_in_sensor(orientation: &EulerAngles) -> Vec3 {
    euler_to_matrix(orientation).transpose() * GRAVITY_WORLD
}

/// Removes gravity from each sample and then the per-axis mean over the scan.
pub fn preprocess_acceleration(records: &[ImuRecord]) -> Vec<Vec3> {
    if records.is_empty() {
        return Vec::new();
    }
    let free: Vec<Vec3> = records
        .iter()
        .map(|r| r.acceleration - gravity_in_sensor(&r.orientation))
        .collect();
    let mean = free.iter().sum::<Vec3>() / free.len() as f64;
    free.into_iter().map(|a| a - mean).collect()
}

/// Noise model of the synthetic sensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-axis white noise on acceleration, mm/s².
    pub accel_sigma: f64,
    /// Per-scan constant bias bound, mm/s². Each axis draws uniformly from
    /// `[-accel_bias, accel_bias]`.
    pub accel_bias: f64,
    /// Per-axis white noise on orientation, degrees.
    pub orientation_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            accel_sigma: 50.0,
            accel_bias: 20.0,
            orientation_sigma: 0.5,
        }
    }
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        accel_sigma: 0.0,
        accel_bias: 0.0,
        orientation_sigma: 0.0,
    };
}

/// Proper acceleration of each frame centre in its own frame, mm/s².
///
/// Central second differences; the two end frames repeat their neighbour.
pub fn sensor_frame_acceleration(poses: &[Pose], dt: f64) -> Result<Vec<Vec3>> {
    let n = poses.len();
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let world: Vec<Vec3> = poses
        .windows(3)
        .map(|w| (w[2].translation - 2.0 * w[1].translation + w[0].translation) / (dt * dt))
        .collect();
    Ok((0..n)
        .map(|k| {
            let a = world[k.clamp(1, n - 2) - 1];
            poses[k].rotation.transpose() * a
        })
        .collect())
}

/// Simulates the IMU strapped to a probe that follows `poses`.
pub fn synthesize_imu(poses: &[Pose], dt: f64, noise: &NoiseSpec, seed: u64) -> Result<Vec<ImuRecord>> {
    if !(dt > 0.0) {
        return Err(Error::BadSpec(format!("sampling interval must be positive, got {dt}")));
    }
    let proper = sensor_frame_acceleration(poses, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias = if noise.accel_bias > 0.0 {
        let u = Uniform::new_inclusive(-noise.accel_bias, noise.accel_bias).expect("finite bias");
        Vec3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng))
    } else {
        Vec3::zeros()
    };
    let accel_noise = Normal::new(0.0, noise.accel_sigma).expect("finite sigma");
    let orient_noise = Normal::new(0.0, noise.orientation_sigma).expect("finite sigma");

    poses
        .iter()
        .zip(proper)
        .map(|(pose, a)| {
            let true_orientation = matrix_to_euler(&pose.rotation)?.angles;
            let mut acceleration = a + pose.rotation.transpose() * GRAVITY_WORLD + bias;
            let mut orientation = true_orientation;
            if noise.accel_sigma > 0.0 {
                acceleration += Vec3::from_fn(|_, _| accel_noise.sample(&mut rng));
            }
            if noise.orientation_sigma > 0.0 {
                orientation.0 += Vec3::from_fn(|_, _| orient_noise.sample(&mut rng));
                orientation = orientation.wrapped();
            }
            Ok(ImuRecord {
                orientation,
                acceleration,
            })
        })
        .collect()
}
