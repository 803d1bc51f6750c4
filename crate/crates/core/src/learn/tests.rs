use super::*;
use crate::estimator::ModelConfig;
use crate::geometry::chain_trajectory;
use crate::imu::{sensor_frame_acceleration, NoiseSpec};
use crate::simulator::{ScanStyle, SimConfig};

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn random_params(rng: &mut ChaCha8Rng, n: usize) -> Vec<MotionParams> {
    (0..n)
        .map(|_| {
            MotionParams::from_array([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..2.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ])
        })
        .collect()
}

/// Textbook sample formulas, written independently of the loss.
fn oracle_pearson(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut total = 0.0;
    for c in 0..d {
        let mean_x = x.iter().map(|r| r[c]).sum::<f64>() / n;
        let mean_y = y.iter().map(|r| r[c]).sum::<f64>() / n;
        let cov = x.iter().zip(y).map(|(a, b)| (a[c] - mean_x) * (b[c] - mean_y)).sum::<f64>() / (n - 1.0);
        let sx = (x.iter().map(|a| (a[c] - mean_x).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (y.iter().map(|b| (b[c] - mean_y).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        total += 1.0 - cov / (sx * sy);
    }
    total / d as f64
}

#[test]
fn pearson_matches_textbook_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let x = rows(&mut rng, 10, 3);
        let y = rows(&mut rng, 10, 3);
        assert!((pearson_loss(&x, &y).unwrap() - oracle_pearson(&x, &y)).abs() < 1e-12);
    }
}

#[test]
fn pearson_identity_affine_and_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rows(&mut rng, 12, 4);
    assert!(pearson_loss(&x, &x).unwrap().abs() < 1e-12);
    let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().enumerate().map(|(c, v)| (c as f64 + 0.5) * v - 3.0).collect()).collect();
    assert!(pearson_loss(&y, &x).unwrap().abs() < 1e-12);
    let neg: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    assert!((pearson_loss(&neg, &x).unwrap() - 2.0).abs() < 1e-12);

    let constant = vec![vec![1.0, 2.0]; 5];
    let z = rows(&mut rng, 5, 2);
    assert_eq!(pearson_loss(&constant, &z).unwrap(), 1.0);
    // Round-off wiggle on one axis is judged against the whole signal.
    let wiggle: Vec<Vec<f64>> = (0..5).map(|i| vec![100.0 * i as f64, 1e-12 * (i % 2) as f64]).collect();
    let first = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v.iter().map(|r| vec![r[0]]).collect() };
    let expected = (oracle_pearson(&first(&wiggle), &first(&z)) + 1.0) / 2.0;
    assert!((pearson_loss(&wiggle, &z).unwrap() - expected).abs() < 1e-12);
    assert!(pearson_loss_grad(&constant, &z).unwrap().iter().flatten().all(|&g| g == 0.0));

    assert!(matches!(pearson_loss(&x[..2], &x[..2]), Err(Error::TooShort { .. })));
    assert!(matches!(pearson_loss(&x, &z), Err(Error::ShapeMismatch(_))));
}

fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], tol: f64) {
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6;
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
        assert!(err < tol, "entry {i}: analytic {} numeric {}", grad[i], numeric);
    }
}

#[test]
fn pearson_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rows(&mut rng, 9, 3);
    let y = rows(&mut rng, 9, 3);
    let g: Vec<f64> = pearson_loss_grad(&x, &y).unwrap().concat();
    let yf = y.concat();
    fd_check(|v| pearson_with_grad(v, &yf, 3).0, &x.concat(), &g, 1e-6);
}

#[test]
fn offline_loss_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gt = random_params(&mut rng, 8);
    let zero = offline_loss(&gt, &gt).unwrap();
    assert!(zero.total.abs() < 1e-12);

    let shifted: Vec<MotionParams> = gt.iter().map(|p| MotionParams::from_array(p.to_array().map(|v| v + 0.7))).collect();
    let r = offline_loss(&shifted, &gt).unwrap();
    assert!((r.mae - 0.7).abs() < 1e-12);
    assert!(r.pearson.abs() < 1e-12);

    let est = random_params(&mut rng, 8);
    let r = offline_loss(&est, &gt).unwrap();
    let mae = est.iter().zip(&gt).flat_map(|(a, b)| a.to_array().into_iter().zip(b.to_array()).map(|(x, y)| (x - y).abs())).sum::<f64>() / 48.0;
    let to_rows = |v: &[MotionParams]| -> Vec<Vec<f64>> { v.iter().map(|p| p.to_array().to_vec()).collect() };
    let expected = mae + oracle_pearson(&to_rows(&est), &to_rows(&gt));
    assert!((r.total - expected).abs() < 1e-12);
    assert!((r.total - r.mae - r.pearson).abs() < 1e-12);

    assert!(matches!(offline_loss(&est[..5], &gt), Err(Error::LengthMismatch { est: 5, reference: 8 })));
}

#[test]
fn offline_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let est = random_params(&mut rng, 7);
    let gt = random_params(&mut rng, 7);
    let (_, g) = offline_loss_grad(&est, &gt).unwrap();
    let gf = flatten(&gt);
    fd_check(|v| offline_flat(v, &gf).0.total, &flatten(&est), &g, 1e-5);
}

#[test]
fn estimated_acceleration_properties() {
    let step = MotionParams::from_array([0.2, -0.1, 1.2, 1.5, -2.0, 0.7]);
    let constant = vec![step; 9];
    assert!(estimated_acceleration(&constant).unwrap().iter().all(|a| a.norm() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let theta = random_params(&mut rng, 11);
    let a = estimated_acceleration(&theta).unwrap();
    assert_eq!(a.len(), 10);
    let mean = a.iter().fold(Vec3::zeros(), |s, v| s + v) / a.len() as f64;
    assert!(mean.norm() < 1e-12);
    assert!(matches!(estimated_acceleration(&theta[..2]), Err(Error::TooShort { .. })));

    // Positive rescaling leaves the loss unchanged.
    let imu = random_params(&mut rng, 10).iter().map(|p| p.t).collect::<Vec<_>>();
    let as_rows = |v: &[Vec3]| -> Vec<Vec<f64>> { v.iter().map(|x| vec![x.x, x.y, x.z]).collect() };
    let base = pearson_loss(&as_rows(&a), &as_rows(&imu)).unwrap();
    let scaled: Vec<Vec3> = a.iter().map(|v| v * 37.5).collect();
    assert!((pearson_loss(&as_rows(&scaled), &as_rows(&imu)).unwrap() - base).abs() < 1e-12);
    let normalized = estimated_acceleration_normalized(&theta).unwrap();
    assert!((pearson_loss(&as_rows(&normalized), &as_rows(&imu)).unwrap() - base).abs() < 1e-12);
}

fn noise_free_scan(style: ScanStyle, seed: u64) -> ScanSequence {
    let cfg = SimConfig {
        styles: vec![style],
        noise: NoiseSpec::NONE,
        image_size: 16,
        phantom_dims: [48, 48, 64],
        voxel_spacing: 1.0,
        seed,
        ..Default::default()
    };
    let phantoms = cfg.make_phantoms().unwrap();
    cfg.generate(&phantoms, 0, 1).unwrap().remove(0)
}

#[test]
fn estimated_acceleration_tracks_true_acceleration() {
    let scan = noise_free_scan(ScanStyle::FastAndSlow, 3);
    let gt = scan.gt.as_ref().unwrap();
    let est = estimated_acceleration(&gt.params()).unwrap();
    let mut truth = sensor_frame_acceleration(gt.poses(), scan.meta.dt).unwrap()[1..scan.len() - 1].to_vec();
    remove_mean(&mut truth);
    for axis in 0..3 {
        let x: Vec<Vec<f64>> = est.iter().map(|v| vec![v[axis]]).collect();
        let y: Vec<Vec<f64>> = truth.iter().map(|v| vec![v[axis]]).collect();
        let spread = y.iter().map(|r| r[0].abs()).fold(0.0, f64::max);
        if spread > 1e-3 {
            let r = 1.0 - pearson_loss(&x, &y).unwrap();
            assert!(r >= 0.99, "axis {axis}: r = {r}");
        }
    }
}

#[test]
fn online_loss_on_ground_truth_is_near_zero() {
    // Curved sweeps accelerate along all three sensor axes; straight ones
    // leave two axes with round-off only, which the loss scores as uncorrelated.
    let scan = noise_free_scan(ScanStyle::Curved, 4);
    let imu = ProcessedImu::from_records(&scan.imu).unwrap();
    let theta = scan.gt_params().unwrap();
    let r = online_loss(&theta, imu.interior_acceleration(), &imu.relative_euler).unwrap();
    assert!(r.accel < 0.01, "accel term {}", r.accel);
    assert!(r.euler < 1e-6, "euler term {}", r.euler);

    let offset: Vec<MotionParams> = theta.iter().map(|p| MotionParams::new(p.t, EulerAngles(p.phi.0.add_scalar(1.0)))).collect();
    let r1 = online_loss(&offset, imu.interior_acceleration(), &imu.relative_euler).unwrap();
    assert!((r1.euler - 1.0).abs() < 1e-6);

    let flipped: Vec<Vec3> = imu.interior_acceleration().iter().map(|a| -a).collect();
    let r2 = online_loss(&theta, &flipped, &imu.relative_euler).unwrap();
    assert!(r2.accel > 1.98);
    assert!(matches!(online_loss(&theta, &flipped[1..], &imu.relative_euler), Err(Error::ShapeMismatch(_))));
}

#[test]
fn online_angle_residual_wraps() {
    let theta = vec![MotionParams::from_array([0.0, 0.0, 1.0, 0.0, 0.0, 179.5]); 4];
    let phi = vec![EulerAngles::new(0.0, 0.0, -179.5); 4];
    let accel = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 1.0), Vec3::zeros()];
    let r = online_loss(&theta, &accel, &phi).unwrap();
    assert!((r.euler - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn online_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let theta = random_params(&mut rng, 8);
    let accel: Vec<Vec3> = random_params(&mut rng, 7).iter().map(|p| p.t * 100.0).collect();
    let phi: Vec<EulerAngles> = random_params(&mut rng, 8).iter().map(|p| p.phi).collect();
    let (_, g) = online_loss_grad(&theta, &accel, &phi).unwrap();
    fd_check(|v| online_flat(v, &accel, &phi).0.total, &flatten(&theta), &g, 1e-5);
}

#[test]
fn learning_rate_halves() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-4);
    assert_eq!(cfg.lr_at(29), 1e-4);
    assert_eq!(cfg.lr_at(30), 5e-5);
    assert_eq!(cfg.lr_at(60), 2.5e-5);
    assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate().is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut adam = Adam::new(3);
    let mut p = vec![1.0, 1.0, 1.0];
    adam.step(&mut p, &[0.5, -2.0, 0.0], 0.1);
    assert!((p[0] - 0.9).abs() < 1e-6);
    assert!((p[1] - 1.1).abs() < 1e-6);
    assert_eq!(p[2], 1.0);
}

#[test]
fn augment_policy_respects_minimum_length() {
    let policy = AugmentPolicy {
        max_interval: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        match policy.draw(20, true, &mut rng) {
            Some(Augmentation::Subsequence { start, end }) => assert!(end - start >= 8 && end <= 20),
            Some(Augmentation::Interval { step, offset }) => assert!((offset..20).step_by(step).count() >= 8),
            _ => {}
        }
    }
    assert!(!matches!(policy.draw(20, false, &mut rng), Some(Augmentation::Inversion)));
}

fn small_model() -> MotionEstimator {
    MotionEstimator::new(ModelConfig {
        image_width: 16,
        image_height: 16,
        encoder_channels: vec![4, 8, 8],
        feature_pool: 1,
        hidden: 16,
        accel_hidden: vec![8],
        euler_width: 4,
        ..Default::default()
    })
    .unwrap()
}

fn small_scans(count: usize, style: ScanStyle, seed: u64) -> Vec<ScanSequence> {
    let cfg = SimConfig {
        styles: vec![style],
        frames: 12,
        image_size: 16,
        phantom_dims: [48, 48, 64],
        voxel_spacing: 1.0,
        seed,
        ..Default::default()
    };
    let phantoms = cfg.make_phantoms().unwrap();
    cfg.generate(&phantoms, 0, count).unwrap()
}

#[test]
fn training_lowers_loss_and_is_deterministic() {
    let scans = small_scans(20, ScanStyle::Linear, 1);
    let cfg = TrainConfig {
        epochs: 30,
        augmentations: 1,
        learning_rate: 1e-3,
        augment: AugmentPolicy {
            min_frames: 6,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut a = small_model();
    let history = train(&mut a, &scans, &cfg).unwrap();
    assert_eq!(history.epochs.len(), 30);
    let first = history.epochs[0].loss.total;
    let last = history.epochs[29].loss.total;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(history.to_csv().lines().count(), 31);

    let short = TrainConfig { epochs: 2, ..cfg };
    let mut b = small_model();
    let mut c = small_model();
    train(&mut b, &scans[..3], &short).unwrap();
    train(&mut c, &scans[..3], &short).unwrap();
    assert!(b.params().iter().zip(c.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_needs_ground_truth() {
    let mut scans = small_scans(2, ScanStyle::Linear, 2);
    scans[1].gt = None;
    let mut m = small_model();
    assert!(matches!(train(&mut m, &scans, &TrainConfig { epochs: 1, ..Default::default() }), Err(Error::NoGroundTruth)));
}

#[test]
fn training_stops_on_divergence_with_last_good_params() {
    let scans = small_scans(2, ScanStyle::Linear, 3);
    let mut m = small_model();
    let head = m.layout().find("head.bias").unwrap().range();
    m.params_mut()[head.start] = f64::NAN;
    let before = m.params().to_vec();
    let cfg = TrainConfig {
        epochs: 1,
        augmentations: 1,
        ..Default::default()
    };
    assert!(matches!(train(&mut m, &scans, &cfg), Err(Error::Divergence { step: 0 })));
    assert!(m.params().iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn online_adaptation_contract() {
    let scans = small_scans(1, ScanStyle::FastAndSlow, 4);
    let model = small_model();
    let zero = OnlineConfig {
        iterations: 0,
        ..Default::default()
    };
    let (same, h) = adapt_online(&model, &scans[0], &zero).unwrap();
    assert_eq!(same.params(), model.params());
    assert_eq!(h.iterations.len(), 1);

    let cfg = OnlineConfig {
        iterations: 5,
        learning_rate: 1e-3,
        ..Default::default()
    };
    let (a, ha) = adapt_online(&model, &scans[0], &cfg).unwrap();
    assert_eq!(ha.iterations.len(), 6);
    assert!(ha.last().unwrap().total < ha.initial().unwrap().total);

    // Poisoned ground truth must not change anything.
    let mut poisoned = scans[0].clone();
    let gt = poisoned.gt.as_mut().unwrap();
    for p in &mut gt.trajectory.poses {
        p.translation.fill(f64::NAN);
    }
    let (b, hb) = adapt_online(&model, &poisoned, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));

    let frozen = OnlineConfig {
        policy: OnlinePolicy::FreezeEncoder,
        ..cfg
    };
    let (f, _) = adapt_online(&model, &scans[0], &frozen).unwrap();
    for r in model.layout().group_ranges(ParamGroup::Encoder) {
        assert_eq!(&f.params()[r.clone()], &model.params()[r]);
    }
}

#[test]
fn normalized_acceleration_flag_leaves_loss_unchanged() {
    let scans = small_scans(1, ScanStyle::Curved, 5);
    let model = small_model();
    let plain = adapt_online(&model, &scans[0], &OnlineConfig { iterations: 0, ..Default::default() }).unwrap().1;
    let normalized = adapt_online(
        &model,
        &scans[0],
        &OnlineConfig {
            iterations: 0,
            normalize_accel: true,
            ..Default::default()
        },
    )
    .unwrap()
    .1;
    assert!((plain.iterations[0].total - normalized.iterations[0].total).abs() < 1e-12);
}

#[test]
fn chained_ground_truth_round_trips_through_params() {
    let scan = noise_free_scan(ScanStyle::Loop, 6);
    let gt = scan.gt.as_ref().unwrap();
    let rebuilt = chain_trajectory(&gt.poses()[0], &gt.params());
    for (a, b) in rebuilt.poses.iter().zip(gt.poses()) {
        assert!(a.max_abs_diff(b) < 1e-9);
    }
}

