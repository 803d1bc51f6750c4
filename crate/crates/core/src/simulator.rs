//! Synthetic speckle phantoms, probe trajectories and image extraction.
//!
//! World coordinates are millimetres with the origin at the centre of voxel
//! `(0, 0, 0)`. Probe-to-image and IMU-to-probe calibrations are identity.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, EulerAngles, MotionParams, Pose, Trajectory, Vec3};
use crate::imu::{synthesize_imu, NoiseSpec};
use crate::scandata::{Image, ScanMeta, ScanSequence};

/// Smallest accepted phantom edge, voxels.
pub const MIN_PHANTOM_DIM: usize = 32;

/// An anatomical inclusion with its own echogenicity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Structure {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    },
    Tube {
        start: [f64; 3],
        end: [f64; 3],
        radius: f64,
        intensity: f64,
    },
}

impl Structure {
    pub fn intensity(&self) -> f64 {
        match self {
            Structure::Ellipsoid { intensity, .. } | Structure::Tube { intensity, .. } => *intensity,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Structure::Ellipsoid { center, radii, .. } => {
                let d = Vec3::new(
                    (p.x - center[0]) / radii[0],
                    (p.y - center[1]) / radii[1],
                    (p.z - center[2]) / radii[2],
                );
                d.norm_squared() <= 1.0
            }
            Structure::Tube { start, end, radius, .. } => {
                let a = Vec3::from(*start);
                let b = Vec3::from(*end);
                let ab = b - a;
                let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * t)).norm() <= *radius
            }
        }
    }
}

/// Everything needed to build a phantom deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub structures: Vec<Structure>,
    /// Echogenicity of tissue outside every structure.
    pub background: f64,
    /// Gaussian correlation length of the speckle along each axis, mm.
    pub speckle_sigma: [f64; 3],
    /// Relative standard deviation of the multiplicative speckle.
    pub speckle_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [128, 128, 192],
            spacing: [0.3, 0.3, 0.3],
            structures: Vec::new(),
            background: 0.5,
            speckle_sigma: [0.45, 0.45, 0.9],
            speckle_contrast: 0.3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Default-sized phantom with a few vessels and nodules placed from `seed`.
    pub fn random_tissue(seed: u64) -> Self {
        let mut spec = PhantomSpec {
            seed,
            ..Default::default()
        };
        let ext = spec.extent();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7155);
        for _ in 0..3 {
            let x0 = rng.random_range(0.2..0.8) * ext.x;
            let y0 = rng.random_range(0.2..0.8) * ext.y;
            spec.structures.push(Structure::Tube {
                start: [x0, y0, 0.0],
                end: [
                    x0 + rng.random_range(-6.0..6.0),
                    y0 + rng.random_range(-6.0..6.0),
                    ext.z,
                ],
                radius: rng.random_range(1.5..3.5),
                intensity: rng.random_range(0.1..0.25),
            });
        }
        for _ in 0..4 {
            spec.structures.push(Structure::Ellipsoid {
                center: [
                    rng.random_range(0.1..0.9) * ext.x,
                    rng.random_range(0.1..0.9) * ext.y,
                    rng.random_range(0.1..0.9) * ext.z,
                ],
                radii: [
                    rng.random_range(2.0..5.0),
                    rng.random_range(2.0..5.0),
                    rng.random_range(3.0..8.0),
                ],
                intensity: rng.random_range(0.65..0.85),
            });
        }
        spec
    }

    /// Physical size spanned by voxel centres, mm.
    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        )
    }
}

/// Scalar volume with values in [0, 1], x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub voxels: Vec<f32>,
    pub structures: Vec<Structure>,
}

impl PhantomVolume {
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            i as f64 * self.spacing[0],
            j as f64 * self.spacing[1],
            k as f64 * self.spacing[2],
        )
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        )
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let e = self.extent();
        (0.0..=e.x).contains(&p.x) && (0.0..=e.y).contains(&p.y) && (0.0..=e.z).contains(&p.z)
    }

    /// Trilinear sample at a world point, `None` outside the volume.
    pub fn sample(&self, p: &Vec3) -> Option<f64> {
        if !self.contains(p) {
            return None;
        }
        let q = [p.x / self.spacing[0], p.y / self.spacing[1], p.z / self.spacing[2]];
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let f = q[a].floor();
            let b = (f as usize).min(self.dims[a] - 2);
            base[a] = b;
            frac[a] = q[a] - b as f64;
        }
        let mut acc = 0.0;
        for dk in 0..2 {
            let wk = if dk == 0 { 1.0 - frac[2] } else { frac[2] };
            for dj in 0..2 {
                let wj = if dj == 0 { 1.0 - frac[1] } else { frac[1] };
                for di in 0..2 {
                    let wi = if di == 0 { 1.0 - frac[0] } else { frac[0] };
                    let v = self.voxels[self.index(base[0] + di, base[1] + dj, base[2] + dk)];
                    acc += wi * wj * wk * v as f64;
                }
            }
        }
        Some(acc)
    }
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_vox).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Convolves along one axis with clamped borders.
fn smooth_axis(data: &mut [f64], dims: [usize; 3], axis: usize, kernel: &[f64]) {
    if kernel.len() == 1 {
        return;
    }
    let r = (kernel.len() / 2) as isize;
    let n = dims[axis];
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut line = vec![0.0; n];
    let (o1, o2) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    for b in 0..o2 {
        for a in 0..o1 {
            let start = match axis {
                0 => b * dims[0] * dims[1] + a * dims[0],
                1 => b * dims[0] * dims[1] + a,
                _ => b * dims[0] + a,
            };
            for (t, v) in line.iter_mut().enumerate() {
                *v = data[start + t * stride];
            }
            for t in 0..n {
                let mut acc = 0.0;
                for (m, w) in kernel.iter().enumerate() {
                    let src = (t as isize + m as isize - r).clamp(0, n as isize - 1) as usize;
                    acc += w * line[src];
                }
                data[start + t * stride] = acc;
            }
        }
    }
}

/// Builds a phantom: structure echogenicity times smoothed multiplicative speckle.
pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomVolume> {
    if spec.dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::BadDims {
            dims: spec.dims,
            min: MIN_PHANTOM_DIM,
        });
    }
    if spec.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::BadSpec(format!("voxel spacing must be positive: {:?}", spec.spacing)));
    }
    let [nx, ny, nz] = spec.dims;
    let total = nx * ny * nz;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut speckle: Vec<f64> = (0..total).map(|_| StandardNormal.sample(&mut rng)).collect();
    for axis in 0..3 {
        let kernel = gaussian_kernel(spec.speckle_sigma[axis] / spec.spacing[axis]);
        smooth_axis(&mut speckle, spec.dims, axis, &kernel);
    }
    let mean = speckle.iter().sum::<f64>() / total as f64;
    let sd = (speckle.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total as f64).sqrt();

    let mut volume = PhantomVolume {
        dims: spec.dims,
        spacing: spec.spacing,
        voxels: vec![0.0; total],
        structures: spec.structures.clone(),
    };
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = volume.index(i, j, k);
                let p = volume.voxel_position(i, j, k);
                // Later structures overwrite earlier ones.
                let base = spec
                    .structures
                    .iter()
                    .rev()
                    .find(|s| s.contains(&p))
                    .map_or(spec.background, Structure::intensity);
                let n = (speckle[idx] - mean) / sd;
                volume.voxels[idx] = (base * (1.0 + spec.speckle_contrast * n)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(volume)
}

/// Freehand sweep patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStyle {
    Linear,
    Curved,
    FastAndSlow,
    Loop,
}

impl ScanStyle {
    pub const ALL: [ScanStyle; 4] = [
        ScanStyle::Linear,
        ScanStyle::Curved,
        ScanStyle::FastAndSlow,
        ScanStyle::Loop,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScanStyle::Linear => "linear",
            ScanStyle::Curved => "curved",
            ScanStyle::FastAndSlow => "fast_and_slow",
            ScanStyle::Loop => "loop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Parameters of one probe sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub style: ScanStyle,
    /// Total centroid path length, mm.
    pub length: f64,
    pub frame_count: usize,
    /// Seconds between frames.
    pub dt: f64,
    /// Pose of the first frame.
    pub start: Pose,
    /// Curved: total turn about the frame's axial axis, degrees (signed).
    pub turn: f64,
    /// Curved: total in-plane rotation about the elevational axis, degrees.
    pub in_plane_tilt: f64,
    /// Fast-and-slow: relative speed modulation depth, below 1.
    pub modulation: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn new(style: ScanStyle, length: f64, frame_count: usize) -> Self {
        TrajectorySpec {
            style,
            length,
            frame_count,
            dt: 0.05,
            start: Pose::identity(),
            turn: 20.0,
            in_plane_tilt: 5.0,
            modulation: 0.6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 4 {
            return Err(Error::BadSpec(format!("frame_count {} < 4", self.frame_count)));
        }
        if !(self.length > 0.0) {
            return Err(Error::BadSpec(format!("length {} must be positive", self.length)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::BadSpec(format!("dt {} must be positive", self.dt)));
        }
        if !(self.modulation.abs() < 1.0) {
            return Err(Error::BadSpec(format!("modulation {} must be below 1", self.modulation)));
        }
        if self.style == ScanStyle::Curved && !(self.turn.abs() > 0.0 && self.turn.abs() < 180.0) {
            return Err(Error::BadSpec(format!("turn {} must be in (0, 180) degrees", self.turn)));
        }
        Ok(())
    }
}

/// Absolute frame poses of a simulated sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub trajectory: Trajectory,
}

impl GroundTruth {
    pub fn new(trajectory: Trajectory) -> Self {
        GroundTruth { trajectory }
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn poses(&self) -> &[Pose] {
        &self.trajectory.poses
    }

    /// Relative motion θ between consecutive frames.
    pub fn params(&self) -> Vec<MotionParams> {
        self.trajectory.relative_params()
    }
}

/// Arc length travelled at each frame time under
/// `speed(s) = v̄ (1 + m sin(2πs/L))`, with v̄ chosen to cover `length`.
fn modulated_arc_lengths(length: f64, frames: usize, dt: f64, m: f64) -> Vec<f64> {
    let total_time = (frames - 1) as f64 * dt;
    let mean_speed = length / (total_time * (1.0 - m * m).sqrt());
    let speed = |s: f64| mean_speed * (1.0 + m * (2.0 * PI * s / length).sin());
    let substeps = 64;
    let h = dt / substeps as f64;
    let mut s = 0.0;
    let mut out = Vec::with_capacity(frames);
    out.push(0.0);
    for _ in 1..frames {
        for _ in 0..substeps {
            let k1 = speed(s);
            let k2 = speed(s + 0.5 * h * k1);
            let k3 = speed(s + 0.5 * h * k2);
            let k4 = speed(s + h * k3);
            s += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        out.push(s);
    }
    out
}

/// Generates the ground-truth poses of a sweep.
pub fn make_trajectory(spec: &TrajectorySpec) -> Result<GroundTruth> {
    spec.validate()?;
    let n = spec.frame_count;
    let l = spec.length;
    let uniform: Vec<f64> = (0..n).map(|k| l * k as f64 / (n - 1) as f64).collect();
    let local: Vec<Pose> = match spec.style {
        ScanStyle::Linear => uniform.iter().map(|&s| Pose::from_translation(0.0, 0.0, s)).collect(),
        ScanStyle::FastAndSlow => modulated_arc_lengths(l, n, spec.dt, spec.modulation)
            .into_iter()
            .map(|s| Pose::from_translation(0.0, 0.0, s))
            .collect(),
        ScanStyle::Loop => (0..n)
            .map(|k| {
                let tau = k as f64 / (n - 1) as f64;
                Pose::from_translation(0.0, 0.0, 0.25 * l * (1.0 - (2.0 * PI * tau).cos()))
            })
            .collect(),
        ScanStyle::Curved => {
            let turn = spec.turn.to_radians();
            let radius = l / turn.abs();
            uniform
                .iter()
                .map(|&s| {
                    let beta = turn * s / l;
                    let p = Vec3::new(
                        turn.signum() * radius * (1.0 - beta.abs().cos()),
                        0.0,
                        radius * beta.abs().sin(),
                    );
                    let phi = EulerAngles::new(0.0, beta.to_degrees(), spec.in_plane_tilt * s / l);
                    Pose::new(euler_to_matrix(&phi), p)
                })
                .collect()
        }
    };
    Ok(GroundTruth::new(Trajectory::new(
        local.iter().map(|p| spec.start.compose(p)).collect(),
    )))
}

/// Corners of a frame, in the frame's own coordinates.
pub fn frame_corners(width: usize, height: usize, pixel_spacing: f64) -> [Vec3; 4] {
    let hx = (width - 1) as f64 * pixel_spacing / 2.0;
    let hy = (height - 1) as f64 * pixel_spacing / 2.0;
    [
        Vec3::new(-hx, -hy, 0.0),
        Vec3::new(hx, -hy, 0.0),
        Vec3::new(hx, hy, 0.0),
        Vec3::new(-hx, hy, 0.0),
    ]
}

/// Resamples the phantom on every frame plane.
pub fn extract_slices(
    volume: &PhantomVolume,
    gt: &GroundTruth,
    width: usize,
    height: usize,
    pixel_spacing: f64,
) -> Result<Vec<Image>> {
    let cx = (width - 1) as f64 / 2.0;
    let cy = (height - 1) as f64 / 2.0;
    gt.poses()
        .iter()
        .enumerate()
        .map(|(frame, pose)| {
            let mut data = Vec::with_capacity(width * height);
            for v in 0..height {
                for u in 0..width {
                    let local = Vec3::new((u as f64 - cx) * pixel_spacing, (v as f64 - cy) * pixel_spacing, 0.0);
                    let value = volume
                        .sample(&pose.transform_point(&local))
                        .ok_or(Error::OutOfVolume { frame })?;
                    data.push(value.clamp(0.0, 1.0) as f32);
                }
            }
            Ok(Image::new(width, height, data))
        })
        .collect()
}

/// Acquisition settings for one simulated scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSpec {
    pub trajectory: TrajectorySpec,
    pub image_width: usize,
    pub image_height: usize,
    pub pixel_spacing: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl ScanSpec {
    pub fn new(trajectory: TrajectorySpec) -> Self {
        let seed = trajectory.seed;
        ScanSpec {
            trajectory,
            image_width: 64,
            image_height: 64,
            pixel_spacing: 0.3,
            noise: NoiseSpec::default(),
            seed,
        }
    }
}

/// Images, synthesized IMU and ground truth of one sweep.
pub fn generate_scan(phantom: &PhantomVolume, spec: &ScanSpec) -> Result<ScanSequence> {
    let gt = make_trajectory(&spec.trajectory)?;
    let images = extract_slices(phantom, &gt, spec.image_width, spec.image_height, spec.pixel_spacing)?;
    let imu = synthesize_imu(gt.poses(), spec.trajectory.dt, &spec.noise, spec.seed)?;
    let meta = ScanMeta::new(spec.trajectory.dt, spec.pixel_spacing, spec.seed, spec.noise);
    Ok(ScanSequence {
        images,
        imu,
        gt: Some(gt),
        meta,
    })
}

/// Batch simulation settings; every scan is derived from `(seed, index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Styles drawn uniformly per scan.
    pub styles: Vec<ScanStyle>,
    pub frames: usize,
    pub dt: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub turn_max: f64,
    pub tilt_max: f64,
    pub modulation: f64,
    /// Random initial orientation bound, degrees.
    pub start_jitter: f64,
    pub image_size: usize,
    pub pixel_spacing: f64,
    pub noise: NoiseSpec,
    /// Distinct phantoms in the batch; scans cycle through them.
    pub phantoms: usize,
    pub phantom_dims: [usize; 3],
    pub voxel_spacing: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            styles: ScanStyle::ALL.to_vec(),
            frames: 32,
            dt: 0.05,
            length_min: 20.0,
            length_max: 45.0,
            turn_max: 20.0,
            tilt_max: 8.0,
            modulation: 0.6,
            start_jitter: 4.0,
            image_size: 64,
            pixel_spacing: 0.3,
            noise: NoiseSpec::default(),
            phantoms: 1,
            phantom_dims: [128, 128, 192],
            voxel_spacing: 0.3,
            seed: 0,
        }
    }
}

pub(crate) fn mix_seed(seed: u64, index: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(salt);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimConfig {
    pub fn phantom_spec(&self, index: usize) -> PhantomSpec {
        let mut spec = PhantomSpec::random_tissue(mix_seed(self.seed, index as u64, 1));
        spec.dims = self.phantom_dims;
        spec.spacing = [self.voxel_spacing; 3];
        let ext = spec.extent();
        let reference = PhantomSpec::default().extent();
        let scale = Vec3::new(ext.x / reference.x, ext.y / reference.y, ext.z / reference.z);
        for s in &mut spec.structures {
            match s {
                Structure::Ellipsoid { center, .. } => {
                    for a in 0..3 {
                        center[a] *= scale[a];
                    }
                }
                Structure::Tube { start, end, .. } => {
                    for a in 0..3 {
                        start[a] *= scale[a];
                        end[a] *= scale[a];
                    }
                }
            }
        }
        spec
    }

    pub fn make_phantoms(&self) -> Result<Vec<PhantomVolume>> {
        (0..self.phantoms.max(1)).map(|i| make_phantom(&self.phantom_spec(i))).collect()
    }

    /// Scan spec for batch index `index`, placed so every frame stays inside
    /// a phantom of `extent`.
    pub fn scan_spec(&self, index: usize, extent: &Vec3) -> Result<ScanSpec> {
        if self.styles.is_empty() {
            return Err(Error::BadSpec("no scan styles selected".into()));
        }
        let seed = mix_seed(self.seed, index as u64, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let style = self.styles[rng.random_range(0..self.styles.len())];
        let length = if self.length_max > self.length_min {
            rng.random_range(self.length_min..self.length_max)
        } else {
            self.length_min
        };
        let mut spec = TrajectorySpec::new(style, length, self.frames);
        spec.dt = self.dt;
        spec.modulation = self.modulation;
        spec.seed = seed;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        spec.turn = sign * rng.random_range(0.5..1.0) * self.turn_max.max(1e-3);
        spec.in_plane_tilt = rng.random_range(-1.0..=1.0) * self.tilt_max;
        let j = self.start_jitter;
        let orientation = EulerAngles::new(
            rng.random_range(-1.0..=1.0) * j,
            rng.random_range(-1.0..=1.0) * j,
            rng.random_range(-1.0..=1.0) * 2.0 * j,
        );
        spec.start = Pose::new(euler_to_matrix(&orientation), Vec3::zeros());

        // Fit the bounding box of all frame corners inside the volume.
        let corners = frame_corners(self.image_size, self.image_size, self.pixel_spacing);
        let local = make_trajectory(&spec)?;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for pose in local.poses() {
            for c in &corners {
                let p = pose.transform_point(c);
                lo = lo.inf(&p);
                hi = hi.sup(&p);
            }
        }
        let margin = 0.5;
        let slack = extent - (hi - lo) - Vec3::repeat(2.0 * margin);
        if slack.iter().any(|&s| s < 0.0) {
            return Err(Error::BadSpec(format!(
                "scan {index} ({} mm {}) does not fit in a {:.1}x{:.1}x{:.1} mm phantom",
                length,
                style.name(),
                extent.x,
                extent.y,
                extent.z
            )));
        }
        let offset = Vec3::from_fn(|a, _| margin - lo[a] + rng.random_range(0.0..=1.0) * slack[a]);
        spec.start.translation = offset;

        let mut scan = ScanSpec::new(spec);
        scan.image_width = self.image_size;
        scan.image_height = self.image_size;
        scan.pixel_spacing = self.pixel_spacing;
        scan.noise = self.noise;
        scan.seed = seed;
        Ok(scan)
    }

    /// Generates `count` scans with indices `first..first + count`.
    pub fn generate(&self, phantoms: &[PhantomVolume], first: usize, count: usize) -> Result<Vec<ScanSequence>> {
        (first..first + count)
            .map(|index| {
                let phantom = &phantoms[index % phantoms.len()];
                let spec = self.scan_spec(index, &phantom.extent())?;
                generate_scan(phantom, &spec)
            })
            .collect()
    }
}
