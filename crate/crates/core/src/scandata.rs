//! Scan container, validation, on-disk format and training augmentations.
//!
//! A scan is stored as one directory:
//!
//! | file            | content                                                        |
//! |-----------------|----------------------------------------------------------------|
//! | `meta.json`     | versioned metadata (sampling interval, spacing, conventions)   |
//! | `frames.bin`    | `b"USFR"`, then `u32` N, H, W, then N·H·W `f32`, little-endian |
//! | `imu.csv`       | `frame_index,Ox,Oy,Oz,Ax,Ay,Az`                                |
//! | `gt.csv`        | optional, `frame_index,r00,…,r22,tx,ty,tz` absolute poses      |
//! | `checksums.txt` | `<crc32 hex>  <file name>` per payload file                    |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{orthonormality_residual, EulerAngles, Mat3, MotionParams, Pose, Trajectory, Vec3, EULER_CONVENTION};
use crate::imu::{synthesize_imu, ImuRecord, NoiseSpec};
use crate::simulator::GroundTruth;

pub const FORMAT_VERSION: u32 = 1;
pub const FRAMES_MAGIC: [u8; 4] = *b"USFR";
pub const UNITS: &str = "translation=mm;angle=deg;acceleration=mm/s^2;time=s";
pub const MIN_FRAMES: usize = 4;

const META_FILE: &str = "meta.json";
const FRAMES_FILE: &str = "frames.bin";
const IMU_FILE: &str = "imu.csv";
const GT_FILE: &str = "gt.csv";
const CHECKSUM_FILE: &str = "checksums.txt";

/// Row-major greyscale frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image::new(width, height, vec![value; width * height])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub format_version: u32,
    /// Seconds between frames.
    pub dt: f64,
    /// mm per pixel, both image axes.
    pub pixel_spacing: f64,
    pub euler_convention: String,
    pub units: String,
    pub seed: u64,
    /// Sensor noise the scan was simulated with; reused when augmentations
    /// re-synthesize IMU data.
    pub noise: NoiseSpec,
    pub calibration: String,
    /// Optional image rescale factor applied at ingestion.
    pub rescale: Option<f64>,
}

impl ScanMeta {
    pub fn new(dt: f64, pixel_spacing: f64, seed: u64, noise: NoiseSpec) -> Self {
        ScanMeta {
            format_version: FORMAT_VERSION,
            dt,
            pixel_spacing,
            euler_convention: EULER_CONVENTION.to_string(),
            units: UNITS.to_string(),
            seed,
            noise,
            calibration: "probe-to-image=identity;imu-to-probe=identity".to_string(),
            rescale: None,
        }
    }
}

/// One freehand sweep: frames, IMU samples and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence {
    pub images: Vec<Image>,
    pub imu: Vec<ImuRecord>,
    pub gt: Option<GroundTruth>,
    pub meta: ScanMeta,
}

impl ScanSequence {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn frame_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.width, i.height))
    }

    /// Ground-truth relative motion, if present.
    pub fn gt_params(&self) -> Option<Vec<MotionParams>> {
        self.gt.as_ref().map(GroundTruth::params)
    }
}

fn pose_is_valid(p: &Pose) -> bool {
    p.rotation.iter().chain(p.translation.iter()).all(|v| v.is_finite())
        && orthonormality_residual(&p.rotation) < 1e-6
        && p.rotation.determinant() > 0.0
}

/// Checks every scan invariant and reports all violations.
pub fn validate(scan: &ScanSequence) -> std::result::Result<(), Vec<String>> {
    let mut v = Vec::new();
    let n = scan.images.len();
    if n < MIN_FRAMES {
        v.push(format!("too few frames: {n} < {MIN_FRAMES}"));
    }
    if let Some(first) = scan.images.first() {
        if first.width == 0 || first.height == 0 {
            v.push("empty frame dimensions".to_string());
        }
        for (i, img) in scan.images.iter().enumerate() {
            if img.width != first.width || img.height != first.height {
                v.push(format!(
                    "frame {i} has dims {}x{}, expected {}x{}",
                    img.width, img.height, first.width, first.height
                ));
            } else if img.data.len() != img.width * img.height {
                v.push(format!("frame {i} holds {} values, expected {}", img.data.len(), img.width * img.height));
            }
            if let Some(px) = img.data.iter().position(|x| !x.is_finite()) {
                v.push(format!("frame {i} has a non-finite pixel at {px}"));
            } else if img.data.iter().any(|x| !(0.0..=1.0).contains(x)) {
                v.push(format!("frame {i} has pixels outside [0, 1]"));
            }
        }
    }
    if scan.imu.len() != n {
        v.push(format!("imu length mismatch: {} records for {n} frames", scan.imu.len()));
    }
    for (i, r) in scan.imu.iter().enumerate() {
        if !r.orientation.is_finite() || !r.acceleration.iter().all(|a| a.is_finite()) {
            v.push(format!("imu record {i} is not finite"));
        } else if r.orientation.0.iter().any(|a| !(*a > -180.0 && *a <= 180.0)) {
            v.push(format!("imu record {i} orientation outside (-180, 180]"));
        }
    }
    if let Some(gt) = &scan.gt {
        if gt.len() != n {
            v.push(format!("ground truth length mismatch: {} poses for {n} frames", gt.len()));
        }
        for (i, p) in gt.poses().iter().enumerate() {
            if !pose_is_valid(p) {
                v.push(format!("ground-truth pose {i} is not a rigid transform"));
            }
        }
    }
    if !(scan.meta.dt > 0.0) {
        v.push(format!("dt {} must be positive", scan.meta.dt));
    }
    if !(scan.meta.pixel_spacing > 0.0) {
        v.push(format!("pixel spacing {} must be positive", scan.meta.pixel_spacing));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Training-time sequence augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    /// Contiguous frames `start..end`.
    Subsequence { start: usize, end: usize },
    /// Every `step`-th frame starting at `offset`.
    Interval { step: usize, offset: usize },
    /// Time reversal.
    Inversion,
}

fn check_len(n: usize) -> Result<()> {
    if n < MIN_FRAMES {
        Err(Error::TooShortAfterAugment {
            needed: MIN_FRAMES,
            got: n,
        })
    } else {
        Ok(())
    }
}

/// Applies one augmentation. `seed` drives the noise of re-synthesized IMU data.
pub fn augment(scan: &ScanSequence, kind: Augmentation, seed: u64) -> Result<ScanSequence> {
    let n = scan.len();
    match kind {
        Augmentation::Subsequence { start, end } => {
            let end = end.min(n);
            check_len(end.saturating_sub(start))?;
            Ok(ScanSequence {
                images: scan.images[start..end].to_vec(),
                imu: scan.imu[start..end].to_vec(),
                gt: scan
                    .gt
                    .as_ref()
                    .map(|g| GroundTruth::new(Trajectory::new(g.poses()[start..end].to_vec()))),
                meta: scan.meta.clone(),
            })
        }
        Augmentation::Interval { step, offset } => {
            if step == 0 {
                return Err(Error::BadSpec("interval step must be at least 1".into()));
            }
            let idx: Vec<usize> = (offset..n).step_by(step).collect();
            check_len(idx.len())?;
            let mut meta = scan.meta.clone();
            meta.dt *= step as f64;
            let images = idx.iter().map(|&i| scan.images[i].clone()).collect();
            let (gt, imu) = match &scan.gt {
                Some(g) => {
                    let poses: Vec<Pose> = idx.iter().map(|&i| g.poses()[i]).collect();
                    let imu = synthesize_imu(&poses, meta.dt, &meta.noise, seed)?;
                    (Some(GroundTruth::new(Trajectory::new(poses))), imu)
                }
                None => (None, idx.iter().map(|&i| scan.imu[i]).collect()),
            };
            Ok(ScanSequence { images, imu, gt, meta })
        }
        Augmentation::Inversion => {
            let g = scan.gt.as_ref().ok_or_else(|| {
                Error::Unsupported("inversion needs ground truth to re-derive the acceleration".into())
            })?;
            check_len(n)?;
            let poses: Vec<Pose> = g.poses().iter().rev().copied().collect();
            let imu = synthesize_imu(&poses, scan.meta.dt, &scan.meta.noise, seed)?;
            Ok(ScanSequence {
                images: scan.images.iter().rev().cloned().collect(),
                imu,
                gt: Some(GroundTruth::new(Trajectory::new(poses))),
                meta: scan.meta.clone(),
            })
        }
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<u32> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(crc32fast::hash(bytes))
}

fn fmt_f64(out: &mut String, v: f64) {
    // `{}` prints the shortest string that parses back to the same bits.
    let _ = write!(out, ",{v}");
}

pub fn imu_to_csv(imu: &[ImuRecord]) -> String {
    let mut s = String::from("frame_index,Ox,Oy,Oz,Ax,Ay,Az\n");
    for (i, r) in imu.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in r.orientation.0.iter().chain(r.acceleration.iter()) {
            fmt_f64(&mut s, *v);
        }
        s.push('\n');
    }
    s
}

pub fn poses_to_csv(poses: &[Pose]) -> String {
    let mut s = String::from("frame_index,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n");
    for (i, p) in poses.iter().enumerate() {
        let _ = write!(s, "{i}");
        for r in 0..3 {
            for c in 0..3 {
                fmt_f64(&mut s, p.rotation[(r, c)]);
            }
        }
        for v in p.translation.iter() {
            fmt_f64(&mut s, *v);
        }
        s.push('\n');
    }
    s
}

pub fn params_to_csv(params: &[MotionParams]) -> String {
    let mut s = String::from("step,tx,ty,tz,phix,phiy,phiz\n");
    for (i, p) in params.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in p.to_array() {
            fmt_f64(&mut s, v);
        }
        s.push('\n');
    }
    s
}

fn parse_rows(text: &str, path: &Path, columns: usize) -> Result<Vec<Vec<f64>>> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns + 1 {
            return Err(malformed(format!("line {}: expected {} columns, got {}", line_no + 1, columns + 1, fields.len())));
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(format!("line {}: {e}", line_no + 1)))?;
        rows.push(values);
    }
    Ok(rows)
}

pub fn imu_from_csv(text: &str, path: &Path) -> Result<Vec<ImuRecord>> {
    Ok(parse_rows(text, path, 6)?
        .into_iter()
        .map(|r| ImuRecord {
            orientation: EulerAngles::new(r[0], r[1], r[2]),
            acceleration: Vec3::new(r[3], r[4], r[5]),
        })
        .collect())
}

pub fn poses_from_csv(text: &str, path: &Path) -> Result<Vec<Pose>> {
    Ok(parse_rows(text, path, 12)?
        .into_iter()
        .map(|r| Pose::new(Mat3::from_row_slice(&r[0..9]), Vec3::new(r[9], r[10], r[11])))
        .collect())
}

pub fn params_from_csv(text: &str, path: &Path) -> Result<Vec<MotionParams>> {
    Ok(parse_rows(text, path, 6)?
        .into_iter()
        .map(|r| MotionParams::from_array([r[0], r[1], r[2], r[3], r[4], r[5]]))
        .collect())
}

/// Reads a trajectory file written by [`poses_to_csv`].
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Trajectory::new(poses_from_csv(&text, path)?))
}

pub fn write_trajectory(path: &Path, trajectory: &Trajectory) -> Result<()> {
    fs::write(path, poses_to_csv(&trajectory.poses)).map_err(io_err(path))
}

fn frames_to_bytes(images: &[Image]) -> Vec<u8> {
    let (w, h) = images.first().map_or((0, 0), |i| (i.width, i.height));
    let mut bytes = Vec::with_capacity(16 + images.len() * w * h * 4);
    bytes.extend_from_slice(&FRAMES_MAGIC);
    for d in [images.len(), h, w] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for img in images {
        for v in &img.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn frames_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<Image>> {
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || bytes[0..4] != FRAMES_MAGIC {
        return Err(malformed("missing frame header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, h, w) = (word(0), word(1), word(2));
    let body = &bytes[16..];
    if body.len() != n * h * w * 4 {
        return Err(malformed("frame payload size does not match header"));
    }
    Ok(body
        .chunks_exact(h * w * 4)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Image::new(w, h, data)
        })
        .collect())
}

/// Writes a scan directory, creating it if needed.
pub fn save(scan: &ScanSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut sums = Vec::new();
    let meta = serde_json::to_string_pretty(&scan.meta).expect("metadata serializes");
    sums.push((write_file(dir, META_FILE, meta.as_bytes())?, META_FILE));
    sums.push((write_file(dir, FRAMES_FILE, &frames_to_bytes(&scan.images))?, FRAMES_FILE));
    sums.push((write_file(dir, IMU_FILE, imu_to_csv(&scan.imu).as_bytes())?, IMU_FILE));
    let gt_path = dir.join(GT_FILE);
    match &scan.gt {
        Some(gt) => sums.push((write_file(dir, GT_FILE, poses_to_csv(gt.poses()).as_bytes())?, GT_FILE)),
        None if gt_path.exists() => fs::remove_file(&gt_path).map_err(io_err(&gt_path))?,
        None => {}
    }
    let listing: String = sums.iter().map(|(c, f)| format!("{c:08x}  {f}\n")).collect();
    write_file(dir, CHECKSUM_FILE, listing.as_bytes())?;
    Ok(())
}

fn read_checked(dir: &Path, name: &str, expected: u32) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if crc32fast::hash(&bytes) != expected {
        return Err(Error::ChecksumMismatch(path));
    }
    Ok(bytes)
}

/// Reads a scan directory written by [`save`].
pub fn load(dir: &Path) -> Result<ScanSequence> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    // Version first, so a newer file is reported as such rather than as corrupt.
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&meta_text) {
        if let Some(found) = value.get("format_version").and_then(|v| v.as_u64()) {
            if found != FORMAT_VERSION as u64 {
                return Err(Error::FormatVersionMismatch {
                    path: meta_path,
                    found: found as u32,
                    expected: FORMAT_VERSION,
                });
            }
        }
    }

    let sums_path = dir.join(CHECKSUM_FILE);
    let sums_text = fs::read_to_string(&sums_path).map_err(io_err(&sums_path))?;
    let mut sums = std::collections::HashMap::new();
    for line in sums_text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(crc), Some(name)) = (parts.next(), parts.next()) else {
            return Err(Error::ChecksumMismatch(sums_path.clone()));
        };
        let crc = u32::from_str_radix(crc, 16).map_err(|_| Error::ChecksumMismatch(sums_path.clone()))?;
        sums.insert(name.to_string(), crc);
    }
    let expect = |name: &str| -> Result<u32> { sums.get(name).copied().ok_or_else(|| Error::ChecksumMismatch(dir.join(name))) };

    let meta_bytes = read_checked(dir, META_FILE, expect(META_FILE)?)?;
    let meta: ScanMeta = serde_json::from_slice(&meta_bytes).map_err(|e| Error::Malformed {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let frames_path = dir.join(FRAMES_FILE);
    let images = frames_from_bytes(&read_checked(dir, FRAMES_FILE, expect(FRAMES_FILE)?)?, &frames_path)?;
    let imu_path = dir.join(IMU_FILE);
    let imu_bytes = read_checked(dir, IMU_FILE, expect(IMU_FILE)?)?;
    let imu = imu_from_csv(&String::from_utf8_lossy(&imu_bytes), &imu_path)?;
    let gt = if sums.contains_key(GT_FILE) {
        let gt_path = dir.join(GT_FILE);
        let bytes = read_checked(dir, GT_FILE, expect(GT_FILE)?)?;
        Some(GroundTruth::new(Trajectory::new(poses_from_csv(&String::from_utf8_lossy(&bytes), &gt_path)?)))
    } else {
        None
    };
    Ok(ScanSequence { images, imu, gt, meta })
}

/// Scan directories directly under `root` (those holding a `meta.json`),
/// sorted by name. `root` itself counts if it is a scan directory.
pub fn find_scan_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(META_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
