//! Losses, offline training and IMU-supervised online adaptation.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorInputs, ForwardOptions, MotionEstimator, ParamGroup, OUTPUTS};
use crate::geometry::{euler_to_matrix, euler_to_matrix_derivatives, wrap_degrees, EulerAngles, MotionParams, Vec3};
use crate::imu::ProcessedImu;
use crate::scandata::{augment, Augmentation, ScanSequence, MIN_FRAMES};
use crate::simulator::mix_seed;

/// Relative threshold under which a component counts as constant.
pub const PEARSON_EPS: f64 = 1e-8;

/// Loss terms. Offline runs fill `mae` and `pearson`, online runs fill
/// `accel` and `euler`; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mae: f64,
    pub pearson: f64,
    pub accel: f64,
    pub euler: f64,
}

impl LossReport {
    fn offline(mae: f64, pearson: f64) -> Self {
        LossReport {
            total: mae + pearson,
            mae,
            pearson,
            ..Default::default()
        }
    }

    fn online(accel: f64, euler: f64) -> Self {
        LossReport {
            total: accel + euler,
            accel,
            euler,
            ..Default::default()
        }
    }

    fn scaled_sum(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut r = LossReport::default();
        for x in reports {
            r.total += x.total / n;
            r.mae += x.mae / n;
            r.pearson += x.pearson / n;
            r.accel += x.accel / n;
            r.euler += x.euler / n;
        }
        r
    }
}

/// `mean_d (1 - r_d)` over `n` rows of `d` values, plus its gradient with
/// respect to `x`.
fn pearson_with_grad(x: &[f64], y: &[f64], d: usize) -> (f64, Vec<f64>) {
    let n = x.len() / d;
    let mut grad = vec![0.0; x.len()];
    let mut loss = 0.0;
    let magnitude = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let (eps_x, eps_y) = (PEARSON_EPS * magnitude(x), PEARSON_EPS * magnitude(y));
    for c in 0..d {
        let col = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| v[i * d + c]).collect() };
        let (xs, ys) = (col(x), col(y));
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let xc: Vec<f64> = xs.iter().map(|v| v - mx).collect();
        let yc: Vec<f64> = ys.iter().map(|v| v - my).collect();
        let sxx: f64 = xc.iter().map(|v| v * v).sum();
        let syy: f64 = yc.iter().map(|v| v * v).sum();
        let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
        let (sx, sy) = ((sxx / n as f64).sqrt(), (syy / n as f64).sqrt());
        if sx <= eps_x || sy <= eps_y {
            loss += 1.0;
            continue;
        }
        let denom = (sxx * syy).sqrt();
        let r = sxy / denom;
        loss += 1.0 - r;
        for i in 0..n {
            grad[i * d + c] = -(yc[i] / denom - r * xc[i] / sxx) / d as f64;
        }
    }
    (loss / d as f64, grad)
}

fn check_rows(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    if x.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: x.len() });
    }
    let d = x[0].len();
    if y.len() != x.len() || x.iter().chain(y).any(|r| r.len() != d) || d == 0 {
        return Err(Error::ShapeMismatch("pearson inputs must have equal, non-empty shapes".into()));
    }
    Ok(d)
}

/// Pearson correlation loss, per component across the sequence and averaged
/// over components. A component whose standard deviation falls below
/// [`PEARSON_EPS`] times the largest magnitude anywhere in its sequence
/// counts as uncorrelated.
pub fn pearson_loss(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let d = check_rows(x, y)?;
    Ok(pearson_with_grad(&x.concat(), &y.concat(), d).0)
}

/// Gradient of [`pearson_loss`] with respect to `x`.
pub fn pearson_loss_grad(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = check_rows(x, y)?;
    let (_, g) = pearson_with_grad(&x.concat(), &y.concat(), d);
    Ok(g.chunks_exact(d).map(<[f64]>::to_vec).collect())
}

fn flatten(params: &[MotionParams]) -> Vec<f64> {
    params.iter().flat_map(|p| p.to_array()).collect()
}

fn check_pair_len(est: usize, reference: usize) -> Result<()> {
    if est != reference {
        return Err(Error::LengthMismatch { est, reference });
    }
    if est < 3 {
        return Err(Error::TooShort { needed: 3, got: est });
    }
    Ok(())
}

fn offline_flat(est: &[f64], gt: &[f64]) -> (LossReport, Vec<f64>) {
    let m = est.len() as f64;
    let mut grad = vec![0.0; est.len()];
    let mut mae = 0.0;
    for (i, (a, b)) in est.iter().zip(gt).enumerate() {
        mae += (a - b).abs() / m;
        grad[i] = (a - b).signum() * f64::from(a != b) / m;
    }
    let (pearson, pg) = pearson_with_grad(est, gt, OUTPUTS);
    for (g, p) in grad.iter_mut().zip(&pg) {
        *g += p;
    }
    (LossReport::offline(mae, pearson), grad)
}

/// Mean absolute error over every entry plus the Pearson loss over the six
/// motion components.
pub fn offline_loss(est: &[MotionParams], gt: &[MotionParams]) -> Result<LossReport> {
    check_pair_len(est.len(), gt.len())?;
    Ok(offline_flat(&flatten(est), &flatten(gt)).0)
}

/// [`offline_loss`] and its gradient, flattened `steps × 6`.
pub fn offline_loss_grad(est: &[MotionParams], gt: &[MotionParams]) -> Result<(LossReport, Vec<f64>)> {
    check_pair_len(est.len(), gt.len())?;
    Ok(offline_flat(&flatten(est), &flatten(gt)))
}

/// Raw `−R(φ_{j−1})ᵀ t_{j−1} + t_j` for `j = 1..P`, before mean removal.
fn raw_accel(theta: &[f64]) -> Vec<Vec3> {
    let steps = theta.len() / OUTPUTS;
    (1..steps)
        .map(|j| {
            let prev = &theta[(j - 1) * OUTPUTS..j * OUTPUTS];
            let cur = &theta[j * OUTPUTS..(j + 1) * OUTPUTS];
            let r = euler_to_matrix(&EulerAngles::new(prev[3], prev[4], prev[5]));
            -(r.transpose() * Vec3::new(prev[0], prev[1], prev[2])) + Vec3::new(cur[0], cur[1], cur[2])
        })
        .collect()
}

fn remove_mean(v: &mut [Vec3]) {
    let mean = v.iter().fold(Vec3::zeros(), |a, b| a + b) / v.len() as f64;
    for x in v {
        *x -= mean;
    }
}

/// Back-propagates `d loss / d Â` to `d loss / d θ̂` (flattened).
fn accel_backward(theta: &[f64], d_accel: &[Vec3]) -> Vec<f64> {
    let mut d = d_accel.to_vec();
    // Mean removal is a projection, its own adjoint.
    remove_mean(&mut d);
    let mut grad = vec![0.0; theta.len()];
    for (k, g) in d.iter().enumerate() {
        let j = k + 1;
        for a in 0..3 {
            grad[j * OUTPUTS + a] += g[a];
        }
        let prev = &theta[(j - 1) * OUTPUTS..j * OUTPUTS];
        let phi = EulerAngles::new(prev[3], prev[4], prev[5]);
        let t = Vec3::new(prev[0], prev[1], prev[2]);
        let dt = -(euler_to_matrix(&phi) * g);
        for a in 0..3 {
            grad[(j - 1) * OUTPUTS + a] += dt[a];
        }
        for (a, dr) in euler_to_matrix_derivatives(&phi).iter().enumerate() {
            grad[(j - 1) * OUTPUTS + 3 + a] -= g.dot(&(dr.transpose() * t));
        }
    }
    grad
}

/// Acceleration implied by consecutive estimated motions at the centre of
/// frames `1..N-1`, per-axis zero-mean.
pub fn estimated_acceleration(theta: &[MotionParams]) -> Result<Vec<Vec3>> {
    if theta.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: theta.len() });
    }
    let mut a = raw_accel(&flatten(theta));
    remove_mean(&mut a);
    Ok(a)
}

/// [`estimated_acceleration`] rescaled to unit variance per axis. Pearson
/// invariance makes it interchangeable with the plain version in the loss.
pub fn estimated_acceleration_normalized(theta: &[MotionParams]) -> Result<Vec<Vec3>> {
    let mut a = estimated_acceleration(theta)?;
    let n = a.len() as f64;
    for axis in 0..3 {
        let sd = (a.iter().map(|v| v[axis] * v[axis]).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            for v in &mut a {
                v[axis] /= sd;
            }
        }
    }
    Ok(a)
}

fn vec3_rows(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|a| [a.x, a.y, a.z]).collect()
}

fn online_flat(theta: &[f64], accel_imu: &[Vec3], euler_imu: &[EulerAngles]) -> (LossReport, Vec<f64>) {
    let mut est = raw_accel(theta);
    remove_mean(&mut est);
    let (accel, ga) = pearson_with_grad(&vec3_rows(&est), &vec3_rows(accel_imu), 3);
    let ga: Vec<Vec3> = ga.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    let mut grad = accel_backward(theta, &ga);
    let m = (euler_imu.len() * 3) as f64;
    let mut euler = 0.0;
    for (j, phi) in euler_imu.iter().enumerate() {
        for a in 0..3 {
            let diff = wrap_degrees(theta[j * OUTPUTS + 3 + a] - phi.0[a]);
            euler += diff.abs() / m;
            grad[j * OUTPUTS + 3 + a] += diff.signum() * f64::from(diff != 0.0) / m;
        }
    }
    (LossReport::online(accel, euler), grad)
}

fn check_online(theta: usize, accel: usize, euler: usize) -> Result<()> {
    if theta < 3 {
        return Err(Error::TooShort { needed: 3, got: theta });
    }
    if accel + 1 != theta || euler != theta {
        return Err(Error::ShapeMismatch(format!(
            "{theta} motion estimates need {} IMU accelerations and {theta} rotations; got {accel} and {euler}",
            theta - 1
        )));
    }
    Ok(())
}

/// Self-supervised loss: Pearson between estimated and measured
/// acceleration plus the mean absolute wrapped difference between estimated
/// and measured relative rotations (degrees).
pub fn online_loss(theta: &[MotionParams], accel_imu: &[Vec3], euler_imu: &[EulerAngles]) -> Result<LossReport> {
    check_online(theta.len(), accel_imu.len(), euler_imu.len())?;
    Ok(online_flat(&flatten(theta), accel_imu, euler_imu).0)
}

/// [`online_loss`] and its gradient, flattened `steps × 6`.
pub fn online_loss_grad(theta: &[MotionParams], accel_imu: &[Vec3], euler_imu: &[EulerAngles]) -> Result<(LossReport, Vec<f64>)> {
    check_online(theta.len(), accel_imu.len(), euler_imu.len())?;
    Ok(online_flat(&flatten(theta), accel_imu, euler_imu))
}

/// Adaptive-moment optimizer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Which augmentations the training loop may draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Probability of training on the unmodified scan.
    pub identity_weight: f64,
    pub subsequence_weight: f64,
    pub interval_weight: f64,
    pub inversion_weight: f64,
    /// Largest frame step drawn for interval sampling.
    pub max_interval: usize,
    /// Shortest sequence a subsequence or interval may produce.
    pub min_frames: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            identity_weight: 1.0,
            subsequence_weight: 1.0,
            interval_weight: 1.0,
            inversion_weight: 1.0,
            max_interval: 2,
            min_frames: 8,
        }
    }
}

impl AugmentPolicy {
    /// Draws one augmentation for a scan of `n` frames, or `None` for the scan itself.
    pub fn draw(&self, n: usize, has_gt: bool, rng: &mut impl Rng) -> Option<Augmentation> {
        let min = self.min_frames.max(MIN_FRAMES);
        let interval_ok = self.max_interval >= 2 && n.div_ceil(2) >= min;
        let weights = [
            self.identity_weight.max(0.0),
            if n > min { self.subsequence_weight.max(0.0) } else { 0.0 },
            if interval_ok { self.interval_weight.max(0.0) } else { 0.0 },
            if has_gt { self.inversion_weight.max(0.0) } else { 0.0 },
        ];
        let kind = WeightedIndex::new(weights).ok()?.sample(rng);
        match kind {
            1 => {
                let len = rng.random_range(min..=n);
                let start = rng.random_range(0..=n - len);
                Some(Augmentation::Subsequence { start, end: start + len })
            }
            2 => {
                let max_step = (2..=self.max_interval).take_while(|s| n.div_ceil(*s) >= min).last().unwrap_or(2);
                let step = rng.random_range(2..=max_step);
                let offset = rng.random_range(0..step);
                let offset = if (n - offset).div_ceil(step) >= min { offset } else { 0 };
                Some(Augmentation::Interval { step, offset })
            }
            3 => Some(Augmentation::Inversion),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate halves after every this many epochs.
    pub lr_halving_period: usize,
    /// Augmented sequences drawn per scan and epoch.
    pub augmentations: usize,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 1e-4,
            lr_halving_period: 30,
            augmentations: 40,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_halving_period == 0 || self.augmentations == 0 {
            return Err(Error::BadSpec("epochs, batch size, halving period and augmentations must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::BadSpec("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

/// Mean training loss of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,learning_rate,total,mae,pearson\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.learning_rate, r.loss.total, r.loss.mae, r.loss.pearson);
        }
        s
    }
}

/// One supervised gradient: loss report and parameter gradient for a scan.
pub fn supervised_gradient(model: &MotionEstimator, scan: &ScanSequence) -> Result<(LossReport, Vec<f64>)> {
    let gt = scan.gt_params().ok_or(Error::NoGroundTruth)?;
    if gt.len() < 3 {
        return Err(Error::TooShort { needed: 3, got: gt.len() });
    }
    let inputs = EstimatorInputs::from_scan(scan)?;
    let trace = model.forward(&inputs, ForwardOptions::default())?;
    let (report, d_out) = offline_flat(&trace.output, &flatten(&gt));
    Ok((report, model.backward(&trace, &d_out)?))
}

/// Offline training. On divergence the model keeps the parameters of the
/// last finite step and `Divergence` is returned.
pub fn train(model: &mut MotionEstimator, scans: &[ScanSequence], cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_progress(model, scans, cfg, |_| {})
}

pub fn train_with_progress(
    model: &mut MotionEstimator,
    scans: &[ScanSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if scans.is_empty() || scans.iter().any(|s| s.gt.is_none()) {
        return Err(Error::NoGroundTruth);
    }
    let mut adam = Adam::new(model.num_params());
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64, 0x7EA1));
        let mut plan: Vec<(usize, Option<Augmentation>, u64)> = Vec::with_capacity(scans.len() * cfg.augmentations);
        for (i, scan) in scans.iter().enumerate() {
            for _ in 0..cfg.augmentations {
                plan.push((i, cfg.augment.draw(scan.len(), true, &mut rng), rng.random()));
            }
        }
        plan.shuffle(&mut rng);

        let mut reports = Vec::with_capacity(plan.len());
        for batch in plan.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; model.num_params()];
            for &(i, aug, seed) in batch {
                let seq = match aug {
                    Some(kind) => augment(&scans[i], kind, seed)?,
                    None => scans[i].clone(),
                };
                let (report, g) = supervised_gradient(model, &seq)?;
                if !report.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { step });
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / batch.len() as f64;
                }
                reports.push(report);
            }
            adam.step(model.params_mut(), &grad, lr);
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            loss: LossReport::scaled_sum(&reports),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

/// Which parameters online adaptation may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlinePolicy {
    #[default]
    All,
    FreezeEncoder,
}

impl OnlinePolicy {
    pub fn frozen(&self) -> &'static [ParamGroup] {
        match self {
            OnlinePolicy::All => &[],
            OnlinePolicy::FreezeEncoder => &[ParamGroup::Encoder],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub policy: OnlinePolicy,
    /// Rescale the estimated acceleration to unit variance before the loss.
    pub normalize_accel: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            iterations: 60,
            learning_rate: 2e-6,
            policy: OnlinePolicy::All,
            normalize_accel: false,
        }
    }
}

/// Online loss per iteration; entry `k` is the loss after `k` updates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineHistory {
    pub iterations: Vec<LossReport>,
}

impl OnlineHistory {
    pub fn initial(&self) -> Option<&LossReport> {
        self.iterations.first()
    }

    pub fn last(&self) -> Option<&LossReport> {
        self.iterations.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,total,accel_pearson,euler_mae\n");
        for (i, r) in self.iterations.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", r.total, r.accel, r.euler);
        }
        s
    }
}

/// IMU-only supervision targets of a scan.
#[derive(Clone, Debug, PartialEq)]
struct OnlineTargets {
    accel: Vec<Vec3>,
    euler: Vec<EulerAngles>,
}

fn online_step(model: &MotionEstimator, inputs: &EstimatorInputs, targets: &OnlineTargets, normalize: bool) -> Result<(LossReport, crate::estimator::ForwardTrace, Vec<f64>)> {
    let trace = model.forward(inputs, ForwardOptions::default())?;
    check_online(trace.output.len() / OUTPUTS, targets.accel.len(), targets.euler.len())?;
    let (mut report, d_out) = online_flat(&trace.output, &targets.accel, &targets.euler);
    if normalize {
        let est = estimated_acceleration_normalized(&trace.params())?;
        let accel = pearson_with_grad(&vec3_rows(&est), &vec3_rows(&targets.accel), 3).0;
        report = LossReport::online(accel, report.euler);
    }
    Ok((report, trace, d_out))
}

fn online_targets(scan: &ScanSequence) -> Result<OnlineTargets> {
    let imu = ProcessedImu::from_records(&scan.imu)?;
    Ok(OnlineTargets {
        accel: imu.interior_acceleration().to_vec(),
        euler: imu.relative_euler,
    })
}

/// Online loss and its parameter gradient for a scan; ground truth is ignored.
pub fn online_gradient(model: &MotionEstimator, scan: &ScanSequence) -> Result<(LossReport, Vec<f64>)> {
    let (report, trace, d_out) = online_step(model, &EstimatorInputs::from_scan(scan)?, &online_targets(scan)?, false)?;
    Ok((report, model.backward(&trace, &d_out)?))
}

/// Adapts a copy of `model` to one scan using only its images and IMU.
/// Returns the adapted model and the loss before each update plus the final
/// loss.
pub fn adapt_online(model: &MotionEstimator, scan: &ScanSequence, cfg: &OnlineConfig) -> Result<(MotionEstimator, OnlineHistory)> {
    adapt_online_with_progress(model, scan, cfg, |_, _, _| {})
}

/// [`adapt_online`] that also reports, for `k = 0..=iterations`, the loss and
/// the predicted motion after `k` updates.
pub fn adapt_online_with_progress(
    model: &MotionEstimator,
    scan: &ScanSequence,
    cfg: &OnlineConfig,
    mut progress: impl FnMut(usize, &LossReport, &[MotionParams]),
) -> Result<(MotionEstimator, OnlineHistory)> {
    let unlabelled = ScanSequence {
        images: scan.images.clone(),
        imu: scan.imu.clone(),
        gt: None,
        meta: scan.meta.clone(),
    };
    let inputs = EstimatorInputs::from_scan(&unlabelled)?;
    let targets = online_targets(&unlabelled)?;
    let mut adapted = model.clone();
    let mut adam = Adam::new(model.num_params());
    let mut history = OnlineHistory::default();
    for it in 0..=cfg.iterations {
        let (report, trace, d_out) = online_step(&adapted, &inputs, &targets, cfg.normalize_accel)?;
        if !report.total.is_finite() {
            return Err(Error::Divergence { step: it });
        }
        progress(it, &report, &trace.params());
        history.iterations.push(report);
        if it == cfg.iterations {
            break;
        }
        let grad = adapted.backward_frozen(&trace, &d_out, cfg.policy.frozen())?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: it });
        }
        adam.step(adapted.params_mut(), &grad, cfg.learning_rate);
    }
    Ok((adapted, history))
}

#[cfg(test)]
mod tests;
