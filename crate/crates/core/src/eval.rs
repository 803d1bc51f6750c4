//! Drift metrics and nearest-neighbour volume compounding.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{geodesic_angle_deg, Trajectory, Vec3};
use crate::scandata::Image;
use crate::simulator::frame_corners;

/// Below this reference length (mm) drift rates are undefined.
pub const MIN_SCAN_LENGTH: f64 = 1e-6;

/// In-plane size of a frame, for corner-based metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing: f64,
}

impl FrameGeometry {
    pub fn corners(&self) -> [Vec3; 4] {
        frame_corners(self.width, self.height, self.pixel_spacing)
    }
}

/// The six drift metrics of one scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Final drift rate, % of scan length.
    pub fdr: f64,
    /// Average drift rate, % of scan length.
    pub adr: f64,
    /// Maximum drift, mm.
    pub md: f64,
    /// Sum of drifts, mm.
    pub sd: f64,
    /// Hausdorff distance between frame corner sets, mm.
    pub hd: f64,
    /// Mean geodesic orientation error, degrees.
    pub ea: f64,
    /// Reference scan length, mm.
    pub length: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "fdr_percent,adr_percent,md_mm,sd_mm,hd_mm,ea_deg,length_mm";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{},{}", self.fdr, self.adr, self.md, self.sd, self.hd, self.ea, self.length)
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut m = MetricReport::default();
        for r in reports {
            m.fdr += r.fdr / n;
            m.adr += r.adr / n;
            m.md += r.md / n;
            m.sd += r.sd / n;
            m.hd += r.hd / n;
            m.ea += r.ea / n;
            m.length += r.length / n;
        }
        m
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scan length  {:>10.3} mm", self.length)?;
        writeln!(f, "FDR          {:>10.3} %", self.fdr)?;
        writeln!(f, "ADR          {:>10.3} %", self.adr)?;
        writeln!(f, "MD           {:>10.3} mm", self.md)?;
        writeln!(f, "SD           {:>10.3} mm", self.sd)?;
        writeln!(f, "HD           {:>10.3} mm", self.hd)?;
        write!(f, "EA           {:>10.3} deg", self.ea)
    }
}

fn check_lengths(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            est: est.len(),
            reference: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Ok(())
}

/// Distance between estimated and reference centroids of frame `i`.
pub fn frame_drift(est: &Trajectory, gt: &Trajectory, i: usize) -> Result<f64> {
    check_lengths(est, gt)?;
    let (Some(a), Some(b)) = (est.poses.get(i), gt.poses.get(i)) else {
        return Err(Error::ShapeMismatch(format!("frame {i} is outside a trajectory of {} frames", gt.len())));
    };
    Ok((a.translation - b.translation).norm())
}

/// Drift of every frame.
pub fn drifts(est: &Trajectory, gt: &Trajectory) -> Result<Vec<f64>> {
    check_lengths(est, gt)?;
    Ok(est.poses.iter().zip(&gt.poses).map(|(a, b)| (a.translation - b.translation).norm()).collect())
}

/// Frame corners in world coordinates, four per frame.
pub fn corner_points(trajectory: &Trajectory, frame: &FrameGeometry) -> Vec<Vec3> {
    let corners = frame.corners();
    trajectory.poses.iter().flat_map(|p| corners.iter().map(move |c| p.transform_point(c))).collect()
}

fn directed_hausdorff(from: &[Vec3], to: &[Vec3]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| (a - b).norm_squared()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { f64::INFINITY };
    }
    directed_hausdorff(a, b).max(directed_hausdorff(b, a))
}

/// All six metrics of `est` against the reference `gt`. Both must start
/// from the same first pose.
pub fn compute_metrics(est: &Trajectory, gt: &Trajectory, frame: &FrameGeometry) -> Result<MetricReport> {
    let d = drifts(est, gt)?;
    if gt.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: gt.len() });
    }
    let length = gt.path_length();
    if length < MIN_SCAN_LENGTH {
        return Err(Error::DegenerateLength { length });
    }
    let n = d.len() as f64;
    let ea = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(a, b)| geodesic_angle_deg(&a.rotation, &b.rotation))
        .sum::<f64>()
        / n;
    Ok(MetricReport {
        fdr: d[d.len() - 1] / length * 100.0,
        adr: d.iter().sum::<f64>() / n / length * 100.0,
        md: d.iter().copied().fold(0.0, f64::max),
        sd: d.iter().sum(),
        hd: hausdorff(&corner_points(est, frame), &corner_points(gt, frame)),
        ea,
        length,
    })
}

/// A compounded voxel grid. Voxel `(i, j, k)` sits at
/// `origin + spacing * (i, j, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompoundedVolume {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: f64,
    /// x fastest, then y, then z.
    pub voxels: Vec<f32>,
    /// Whether any pixel landed in the voxel.
    pub filled: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    origin: [f64; 3],
    spacing: f64,
    dtype: String,
    order: String,
}

impl CompoundedVolume {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Writes raw little-endian f32 voxels to `path` and the dimensions to
    /// `path` with a `.json` extension appended.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes).map_err(io_err(path))?;
        let header = VolumeHeader {
            dims: self.dims,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            spacing: self.spacing,
            dtype: "float32-le".into(),
            order: "x-fastest".into(),
        };
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".json");
        let sidecar = Path::new(&sidecar);
        fs::write(sidecar, serde_json::to_string_pretty(&header).expect("header serializes")).map_err(io_err(sidecar))
    }
}

/// Places every pixel of every frame in the nearest voxel of a grid fitted to
/// the swept region. Later frames overwrite earlier ones.
pub fn compound_volume(images: &[Image], trajectory: &Trajectory, pixel_spacing: f64, voxel_spacing: f64) -> Result<CompoundedVolume> {
    if trajectory.is_empty() || images.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    if images.len() != trajectory.len() {
        return Err(Error::LengthMismatch {
            est: trajectory.len(),
            reference: images.len(),
        });
    }
    if !(voxel_spacing > 0.0) {
        return Err(Error::BadSpec("voxel spacing must be positive".into()));
    }
    let (w, h) = (images[0].width, images[0].height);
    let corners = corner_points(
        trajectory,
        &FrameGeometry {
            width: w,
            height: h,
            pixel_spacing,
        },
    );
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for c in &corners {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    if !lo.iter().chain(hi.iter()).all(|v| v.is_finite()) {
        return Err(Error::BadSpec("trajectory has non-finite poses".into()));
    }
    let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / voxel_spacing).round() as usize + 1);
    let mut vol = CompoundedVolume {
        dims,
        origin: lo,
        spacing: voxel_spacing,
        voxels: vec![0.0; dims[0] * dims[1] * dims[2]],
        filled: vec![false; dims[0] * dims[1] * dims[2]],
    };
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    for (img, pose) in images.iter().zip(&trajectory.poses) {
        for v in 0..h {
            for u in 0..w {
                let local = Vec3::new((u as f64 - cx) * pixel_spacing, (v as f64 - cy) * pixel_spacing, 0.0);
                let q = (pose.transform_point(&local) - lo) / voxel_spacing;
                let idx = [q.x, q.y, q.z].map(|c| c.round().max(0.0) as usize);
                if idx.iter().zip(&dims).all(|(i, d)| i < d) {
                    let at = vol.index(idx[0], idx[1], idx[2]);
                    vol.voxels[at] = img.data[v * w + u];
                    vol.filled[at] = true;
                }
            }
        }
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{chain_trajectory, EulerAngles, MotionParams, Pose};
    use crate::simulator::{make_phantom, ScanStyle, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FRAME: FrameGeometry = FrameGeometry {
        width: 64,
        height: 64,
        pixel_spacing: 0.3,
    };

    fn line(n: usize, step: f64) -> Trajectory {
        Trajectory::new((0..n).map(|i| Pose::from_translation(0.0, 0.0, i as f64 * step)).collect())
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = line(10, 1.5);
        let m = compute_metrics(&t, &t, &FRAME).unwrap();
        assert_eq!((m.fdr, m.adr, m.md, m.sd, m.hd, m.ea), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!((m.length - 13.5).abs() < 1e-12);
    }

    #[test]
    fn displaced_final_frame() {
        // 30 mm line; the last frame is 3 mm off.
        let gt = line(31, 1.0);
        let mut est = gt.clone();
        est.poses[30].translation.x += 3.0;
        let m = compute_metrics(&est, &gt, &FRAME).unwrap();
        assert!((m.fdr - 10.0).abs() < 1e-12);
        assert!((m.md - 3.0).abs() < 1e-12);
        assert!((m.sd - 3.0).abs() < 1e-12);
        assert!((m.adr - 10.0 / 31.0).abs() < 1e-12);

        let mut est = gt.clone();
        est.poses[4].translation += Vec3::new(3.0, 4.0, 0.0);
        assert!((frame_drift(&est, &gt, 4).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(frame_drift(&est, &gt, 3).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let gt = line(5, 1.0);
        assert!(matches!(
            compute_metrics(&line(4, 1.0), &gt, &FRAME),
            Err(Error::LengthMismatch { est: 4, reference: 5 })
        ));
        let still = line(5, 0.0);
        assert!(matches!(compute_metrics(&still, &still, &FRAME), Err(Error::DegenerateLength { .. })));
    }

    #[test]
    fn orientation_error_is_geodesic() {
        let gt = line(3, 1.0);
        let mut est = gt.clone();
        est.poses[1].rotation = crate::geometry::euler_to_matrix(&EulerAngles::new(0.0, 0.0, 6.0));
        let m = compute_metrics(&est, &gt, &FRAME).unwrap();
        assert!((m.ea - 2.0).abs() < 1e-9);
    }

    #[test]
    fn hausdorff_is_symmetric_and_matches_definition() {
        let a = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let b = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(5.0, 0.0, 0.0)];
        assert_eq!(hausdorff(&a, &b), 4.0);
        assert_eq!(hausdorff(&a, &b), hausdorff(&b, &a));
    }

    #[test]
    fn metrics_survive_a_common_rigid_motion_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let steps = |rng: &mut ChaCha8Rng| -> Vec<MotionParams> {
            (0..12)
                .map(|_| {
                    MotionParams::from_array([
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(0.5..1.5),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(-2.0..2.0),
                    ])
                })
                .collect()
        };
        let gt = chain_trajectory(&Pose::identity(), &steps(&mut rng));
        let est = chain_trajectory(&Pose::identity(), &steps(&mut rng));
        let base = compute_metrics(&est, &gt, &FRAME).unwrap();
        let g = MotionParams::from_array([5.0, -3.0, 2.0, 20.0, -10.0, 33.0]).to_pose();
        let moved = compute_metrics(&est.transformed(&g), &gt.transformed(&g), &FRAME).unwrap();
        for (a, b) in [(base.fdr, moved.fdr), (base.adr, moved.adr), (base.hd, moved.hd), (base.ea, moved.ea)] {
            assert!((a - b).abs() < 1e-9);
        }
        let scale = |t: &Trajectory| Trajectory::new(t.poses.iter().map(|p| Pose::new(p.rotation, p.translation * 2.5)).collect());
        let scaled = compute_metrics(&scale(&est), &scale(&gt), &FRAME).unwrap();
        assert!((scaled.fdr - base.fdr).abs() < 1e-9);
        assert!((scaled.adr - base.adr).abs() < 1e-9);
    }

    #[test]
    fn single_frame_compounds_to_a_slab() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 / 12.0).collect();
        let img = Image::new(4, 3, data.clone());
        let vol = compound_volume(&[img], &Trajectory::new(vec![Pose::identity()]), 0.5, 0.5).unwrap();
        assert_eq!(vol.dims, [4, 3, 1]);
        assert_eq!(vol.voxels, data);
        assert!(vol.filled.iter().all(|&f| f));
        assert!(matches!(compound_volume(&[], &Trajectory::new(vec![]), 0.5, 0.5), Err(Error::EmptyTrajectory)));
    }

    #[test]
    fn perfect_trajectory_reproduces_the_phantom() {
        let cfg = SimConfig {
            styles: vec![ScanStyle::Linear],
            image_size: 32,
            ..Default::default()
        };
        let phantom = make_phantom(&cfg.phantom_spec(0)).unwrap();
        let scan = cfg.generate(std::slice::from_ref(&phantom), 0, 1).unwrap().remove(0);
        let gt = &scan.gt.as_ref().unwrap().trajectory;
        let vol = compound_volume(&scan.images, gt, scan.meta.pixel_spacing, 0.3).unwrap();
        let again = compound_volume(&scan.images, gt, scan.meta.pixel_spacing, 0.3).unwrap();
        assert_eq!(vol, again);

        let mean = phantom.voxels.iter().map(|&v| v as f64).sum::<f64>() / phantom.voxels.len() as f64;
        let speckle_sd = (phantom.voxels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / phantom.voxels.len() as f64).sqrt();
        let (mut err, mut count) = (0.0, 0);
        for k in 0..vol.dims[2] {
            for j in 0..vol.dims[1] {
                for i in 0..vol.dims[0] {
                    let at = vol.index(i, j, k);
                    if vol.filled[at] {
                        if let Some(truth) = phantom.sample(&vol.position(i, j, k)) {
                            err += (vol.voxels[at] as f64 - truth).abs();
                            count += 1;
                        }
                    }
                }
            }
        }
        let mad = err / count as f64;
        assert!(count > 1000);
        assert!(mad < speckle_sd, "mad {mad} speckle sd {speckle_sd}");
    }

    #[test]
    fn volume_file_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, vec![0.25, 0.5, 0.75, 1.0]);
        let vol = compound_volume(&[img], &Trajectory::new(vec![Pose::identity()]), 1.0, 1.0).unwrap();
        let path = dir.path().join("vol.raw");
        vol.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.0);
        let header: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("vol.raw.json")).unwrap()).unwrap();
        assert_eq!(header["dims"], serde_json::json!([2, 2, 1]));
    }
}
