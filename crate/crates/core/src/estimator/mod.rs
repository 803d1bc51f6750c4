//! Compact multi-branch motion estimator with exact reverse-mode gradients.
//!
//! Data flow for a scan of N frames (P = N - 1 adjacent pairs):
//!
//! ```text
//! (I_j, I_j+1) ── encoder ──► f_j ─────────────────────────────┐
//! A_j ── accel MLP ──► fa_j ──┐                                 │
//! f ──────────────────────────┴► fv ── velocity cell ── proj ──(+)─┐
//! Φ_j ── euler FC ─────────────────────────────────────────────────┴─ concat ── main cell ── head ──► θ̂_j
//! ```
//!
//! `fv_0 = f_0` and, for `j ≥ 1`, `fv_j = f_{j-1} + fa_j` (or `f_j + fa_j`
//! with `literal_eq3 = false`), where `fa_j` embeds the acceleration of frame
//! `j`, the frame shared by pairs `j - 1` and `j`.

mod checkpoint;
pub mod linalg;
mod lstm;
mod params;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use params::{Init, ParamEntry, ParamGroup, ParamLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EulerAngles, MotionParams, Vec3};
use crate::imu::ProcessedImu;
use crate::scandata::{validate, ScanSequence};

use linalg::{col2im, conv_backward, conv_forward, gemm, im2col, relu_inplace, relu_mask, ConvShape};
use lstm::{LstmTrace, LstmWeights};

/// Outputs per step: `tx, ty, tz` (mm) then `φx, φy, φz` (degrees).
pub const OUTPUTS: usize = 6;

/// Network shape and input normalisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Output channels of each stride-2 residual stage.
    pub encoder_channels: Vec<usize>,
    /// Average-pooling factor applied after the last stage.
    pub feature_pool: usize,
    /// Hidden size of both recurrent cells.
    pub hidden: usize,
    /// Hidden widths of the acceleration MLP; its output matches the feature size.
    pub accel_hidden: Vec<usize>,
    pub euler_width: usize,
    /// Pairs `fa_j` with `f_{j-1}` (true) or `f_j` (false).
    pub literal_eq3: bool,
    pub image_mean: f64,
    pub image_scale: f64,
    /// Multiplies accelerations (mm/s²) before the acceleration branch.
    pub accel_scale: f64,
    /// Multiplies relative Euler angles (degrees) before the Euler branch.
    pub euler_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_width: 64,
            image_height: 64,
            encoder_channels: vec![16, 32, 64],
            feature_pool: 2,
            hidden: 128,
            accel_hidden: vec![64],
            euler_width: 32,
            literal_eq3: true,
            image_mean: 0.5,
            image_scale: 5.0,
            accel_scale: 0.01,
            euler_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small network for 8×8 frames, used in gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_width: 8,
            image_height: 8,
            encoder_channels: vec![2, 3, 4],
            feature_pool: 1,
            hidden: 5,
            accel_hidden: vec![6],
            euler_width: 4,
            ..Default::default()
        }
    }

    /// `(channels, height, width)` of the encoder feature `f`.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let down = (1usize << self.encoder_channels.len()) * self.feature_pool.max(1);
        (
            *self.encoder_channels.last().unwrap_or(&2),
            self.image_height / down,
            self.image_width / down,
        )
    }

    pub fn feature_len(&self) -> usize {
        let (c, h, w) = self.feature_dims();
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ShapeMismatch(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder needs at least one stage with non-zero channels".into());
        }
        if self.feature_pool == 0 || self.hidden == 0 || self.euler_width == 0 {
            return bad("feature_pool, hidden and euler_width must be positive".into());
        }
        let down = (1usize << self.encoder_channels.len()) * self.feature_pool;
        if self.image_width % down != 0 || self.image_height % down != 0 {
            return bad(format!(
                "image {}x{} is not divisible by the encoder reduction {down}",
                self.image_width, self.image_height
            ));
        }
        if self.accel_hidden.contains(&0) {
            return bad("acceleration branch widths must be positive".into());
        }
        Ok(())
    }
}

/// Inference switches for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the acceleration-branch output by zeros.
    pub zero_accel_branch: bool,
    /// Feed zeros to the Euler branch.
    pub zero_euler_input: bool,
}

/// Network inputs extracted from a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorInputs {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Frame pixels, `frames × height × width`.
    pub pixels: Vec<f64>,
    /// Processed acceleration of interior frames `1..N-1`.
    pub accel: Vec<Vec3>,
    /// Relative IMU rotations, one per pair.
    pub euler: Vec<EulerAngles>,
}

impl EstimatorInputs {
    pub fn from_scan(scan: &ScanSequence) -> Result<Self> {
        validate(scan).map_err(Error::InvalidScan)?;
        let imu = ProcessedImu::from_records(&scan.imu)?;
        let (width, height) = scan.frame_dims().expect("validated scan has frames");
        Ok(EstimatorInputs {
            frames: scan.len(),
            width,
            height,
            pixels: scan.images.iter().flat_map(|i| i.data.iter().map(|&v| v as f64)).collect(),
            accel: imu.interior_acceleration().to_vec(),
            euler: imu.relative_euler,
        })
    }

    pub fn pairs(&self) -> usize {
        self.frames - 1
    }
}

/// Per-stage encoder activations.
#[derive(Clone, Debug, Default)]
struct StageTrace {
    down: ConvShape,
    res: ConvShape,
    cols_down: Vec<f64>,
    a: Vec<f64>,
    cols_res: Vec<f64>,
    y: Vec<f64>,
}

/// Encoder activations for a batch of pairs.
#[derive(Clone, Debug, Default)]
pub struct EncoderTrace {
    batch: usize,
    stages: Vec<StageTrace>,
}

/// Dense-MLP activations (post-activation outputs of each layer).
#[derive(Clone, Debug, Default)]
struct MlpTrace {
    rows: usize,
    input: Vec<f64>,
    outputs: Vec<Vec<f64>>,
}

/// Everything recorded by [`MotionEstimator::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    version: u64,
    options: ForwardOptions,
    pairs: usize,
    encoder: EncoderTrace,
    f: Vec<f64>,
    accel: MlpTrace,
    velocity: LstmTrace,
    projection: MlpTrace,
    euler: MlpTrace,
    main: LstmTrace,
    head: MlpTrace,
    /// `pairs × 6` raw outputs.
    pub output: Vec<f64>,
}

impl ForwardTrace {
    pub fn params(&self) -> Vec<MotionParams> {
        self.output
            .chunks_exact(OUTPUTS)
            .map(|c| MotionParams::from_array(c.try_into().unwrap()))
            .collect()
    }

    /// Encoder features `f`, one row per pair.
    pub fn features(&self) -> &[f64] {
        &self.f
    }
}

#[derive(Clone, Debug, PartialEq)]
struct StageIdx {
    down_w: usize,
    down_b: usize,
    res_w: usize,
    res_b: usize,
    cin: usize,
    cout: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct DenseIdx {
    w: usize,
    b: usize,
    input: usize,
    output: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LstmIdx {
    wx: usize,
    wh: usize,
    b: usize,
    input: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Index {
    stages: Vec<StageIdx>,
    accel: Vec<DenseIdx>,
    velocity: LstmIdx,
    projection: DenseIdx,
    euler: DenseIdx,
    main: LstmIdx,
    head: DenseIdx,
}

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, Index) {
    use ParamGroup::*;
    let relu_gain = 2.0;
    let mut l = ParamLayout::default();
    let mut stages = Vec::new();
    let mut cin = 2;
    for (s, &cout) in cfg.encoder_channels.iter().enumerate() {
        let down_w = l.push(format!("encoder.stage{s}.down.weight"), Encoder, &[cout, cin * 9], Init::KaimingUniform { fan_in: cin * 9, gain: relu_gain });
        let down_b = l.push(format!("encoder.stage{s}.down.bias"), Encoder, &[cout], Init::Zero);
        let res_w = l.push(format!("encoder.stage{s}.res.weight"), Encoder, &[cout, cout * 9], Init::KaimingUniform { fan_in: cout * 9, gain: relu_gain });
        let res_b = l.push(format!("encoder.stage{s}.res.bias"), Encoder, &[cout], Init::Zero);
        stages.push(StageIdx {
            down_w,
            down_b,
            res_w,
            res_b,
            cin,
            cout,
        });
        cin = cout;
    }
    let feat = cfg.feature_len();
    let h = cfg.hidden;
    let mut accel = Vec::new();
    let mut width = 3;
    for (i, &w) in cfg.accel_hidden.iter().enumerate() {
        accel.push(dense(&mut l, &format!("accel.fc{i}"), Accel, width, w, relu_gain));
        width = w;
    }
    accel.push(dense(&mut l, &format!("accel.fc{}", cfg.accel_hidden.len()), Accel, width, feat, 1.0));

    let velocity = lstm(&mut l, "velocity.cell", Velocity, feat, h);
    let projection = dense(&mut l, "velocity.proj", Velocity, h, feat, 1.0);
    let euler = dense(&mut l, "euler.fc", Euler, 3, cfg.euler_width, relu_gain);
    let main = lstm(&mut l, "main.cell", Main, feat + cfg.euler_width, h);
    let head = dense(&mut l, "head", Head, h, OUTPUTS, 1.0);
    (
        l,
        Index {
            stages,
            accel,
            velocity,
            projection,
            euler,
            main,
            head,
        },
    )
}

fn dense(l: &mut ParamLayout, name: &str, group: ParamGroup, input: usize, output: usize, gain: f64) -> DenseIdx {
    DenseIdx {
        w: l.push(format!("{name}.weight"), group, &[output, input], Init::KaimingUniform { fan_in: input, gain }),
        b: l.push(format!("{name}.bias"), group, &[output], Init::Zero),
        input,
        output,
    }
}

fn lstm(l: &mut ParamLayout, name: &str, group: ParamGroup, input: usize, h: usize) -> LstmIdx {
    let wx = l.push(format!("{name}.weight_input"), group, &[4 * h, input], Init::KaimingUniform { fan_in: input, gain: 1.0 });
    let wh = l.push(format!("{name}.weight_hidden"), group, &[4 * h, h], Init::Orthogonal);
    let b = l.push(format!("{name}.bias"), group, &[4 * h], Init::GateBias { forget: 1.0 });
    LstmIdx { wx, wh, b, input }
}

fn dense_forward(p: &[f64], layout: &ParamLayout, d: &DenseIdx, x: &[f64], rows: usize, relu: bool) -> Vec<f64> {
    let w = &p[layout.entry(d.w).range()];
    let b = &p[layout.entry(d.b).range()];
    let mut y = vec![0.0; rows * d.output];
    for row in y.chunks_exact_mut(d.output) {
        row.copy_from_slice(b);
    }
    gemm(false, true, rows, d.output, d.input, 1.0, x, w, 1.0, &mut y);
    if relu {
        relu_inplace(&mut y);
    }
    y
}

/// Accumulates weight gradients; returns the input gradient if asked.
#[allow(clippy::too_many_arguments)]
fn dense_backward(
    p: &[f64],
    layout: &ParamLayout,
    d: &DenseIdx,
    x: &[f64],
    dy: &[f64],
    rows: usize,
    grad: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let wr = layout.entry(d.w).range();
    let br = layout.entry(d.b).range();
    gemm(true, false, d.output, d.input, rows, 1.0, dy, x, 1.0, &mut grad[wr.clone()]);
    {
        let db = &mut grad[br];
        for row in dy.chunks_exact(d.output) {
            for (a, g) in db.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * d.input];
        gemm(false, false, rows, d.input, d.output, 1.0, dy, &p[wr], 0.0, &mut dx);
        dx
    })
}

/// `fv_0 = f_0`; `fv_j = f_{j-1} + fa_{j-1}` (literal) or `f_j + fa_{j-1}`,
/// with `fa` holding the `pairs - 1` acceleration features of frames `1..=P-1`.
fn fuse_flat(f: &[f64], fa: Option<&[f64]>, pairs: usize, feat: usize, literal: bool) -> Vec<f64> {
    let mut fv = vec![0.0; pairs * feat];
    fv[..feat].copy_from_slice(&f[..feat]);
    for j in 1..pairs {
        let src = if literal { j - 1 } else { j };
        let dst = &mut fv[j * feat..(j + 1) * feat];
        dst.copy_from_slice(&f[src * feat..(src + 1) * feat]);
        if let Some(fa) = fa {
            for (d, a) in dst.iter_mut().zip(&fa[(j - 1) * feat..j * feat]) {
                *d += a;
            }
        }
    }
    fv
}

/// Velocity-feature fusion over per-pair feature vectors.
///
/// `f` holds one feature per adjacent pair; `fa` one acceleration feature per
/// interior frame (one fewer than `f`).
pub fn fuse_velocity(f: &[Vec<f64>], fa: &[Vec<f64>], literal: bool) -> Result<Vec<Vec<f64>>> {
    if f.is_empty() || fa.len() + 1 != f.len() {
        return Err(Error::ShapeMismatch(format!(
            "need one acceleration feature per interior frame: {} pair features, {} acceleration features",
            f.len(),
            fa.len()
        )));
    }
    let feat = f[0].len();
    if f.iter().chain(fa).any(|v| v.len() != feat) {
        return Err(Error::ShapeMismatch("feature lengths differ".into()));
    }
    let flat_f: Vec<f64> = f.concat();
    let flat_a: Vec<f64> = fa.concat();
    let fv = fuse_flat(&flat_f, Some(&flat_a), f.len(), feat, literal);
    Ok(fv.chunks_exact(feat).map(<[f64]>::to_vec).collect())
}

/// The trainable motion estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionEstimator {
    config: ModelConfig,
    layout: ParamLayout,
    index: Index,
    params: Vec<f64>,
    version: u64,
}

impl MotionEstimator {
    /// Fresh, seed-initialised model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, index) = build_layout(&config);
        let params = layout.initialize(config.seed);
        Ok(MotionEstimator {
            config,
            layout,
            index,
            params,
            version: 0,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.len() != m.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} values, model needs {}",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Mutable access; invalidates outstanding forward traces.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.params[self.layout.entry(idx).range()]
    }

    fn check_frames(&self, width: usize, height: usize) -> Result<()> {
        if width != self.config.image_width || height != self.config.image_height {
            return Err(Error::ShapeMismatch(format!(
                "frames are {width}x{height}, model expects {}x{}",
                self.config.image_width, self.config.image_height
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `batch` pairs laid out `[2][batch][H][W]`.
    fn encode_batch(&self, x0: Vec<f64>, batch: usize) -> (Vec<f64>, EncoderTrace) {
        let cfg = &self.config;
        let (mut h, mut w) = (cfg.image_height, cfg.image_width);
        let mut x = x0;
        let mut stages = Vec::with_capacity(self.index.stages.len());
        for st in &self.index.stages {
            let down = ConvShape {
                cin: st.cin,
                cout: st.cout,
                batch,
                h,
                w,
                stride: 2,
            };
            let mut cols_down = Vec::new();
            im2col(&down, &x, &mut cols_down);
            let mut a = Vec::new();
            conv_forward(&down, self.slice(st.down_w), self.slice(st.down_b), &cols_down, &mut a);
            relu_inplace(&mut a);
            h = down.out_h();
            w = down.out_w();
            let res = ConvShape {
                cin: st.cout,
                cout: st.cout,
                batch,
                h,
                w,
                stride: 1,
            };
            let mut cols_res = Vec::new();
            im2col(&res, &a, &mut cols_res);
            let mut y = Vec::new();
            conv_forward(&res, self.slice(st.res_w), self.slice(st.res_b), &cols_res, &mut y);
            for (yv, av) in y.iter_mut().zip(&a) {
                *yv = (*yv + av).max(0.0);
            }
            x = y.clone();
            stages.push(StageTrace {
                down,
                res,
                cols_down,
                a,
                cols_res,
                y,
            });
        }
        // Average pool, then regroup [C][B][h][w] into one row per pair.
        let p = cfg.feature_pool;
        let (c, fh, fw) = cfg.feature_dims();
        let feat = c * fh * fw;
        let mut f = vec![0.0; batch * feat];
        let inv = 1.0 / (p * p) as f64;
        for ch in 0..c {
            for b in 0..batch {
                let plane = &x[(ch * batch + b) * h * w..][..h * w];
                for py in 0..fh {
                    for px in 0..fw {
                        let mut acc = 0.0;
                        for dy in 0..p {
                            for dx in 0..p {
                                acc += plane[(py * p + dy) * w + px * p + dx];
                            }
                        }
                        f[b * feat + (ch * fh + py) * fw + px] = acc * inv;
                    }
                }
            }
        }
        (f, EncoderTrace { batch, stages })
    }

    fn encoder_backward(&self, tr: &EncoderTrace, df: &[f64], grad: &mut [f64]) {
        let cfg = &self.config;
        let batch = tr.batch;
        let p = cfg.feature_pool;
        let (c, fh, fw) = cfg.feature_dims();
        let feat = c * fh * fw;
        let last = tr.stages.last().expect("at least one stage");
        let (h, w) = (last.res.h, last.res.w);
        let mut dy = vec![0.0; c * batch * h * w];
        let inv = 1.0 / (p * p) as f64;
        for ch in 0..c {
            for b in 0..batch {
                let plane = &mut dy[(ch * batch + b) * h * w..][..h * w];
                for py in 0..fh {
                    for px in 0..fw {
                        let g = df[b * feat + (ch * fh + py) * fw + px] * inv;
                        for ddy in 0..p {
                            for ddx in 0..p {
                                plane[(py * p + ddy) * w + px * p + ddx] = g;
                            }
                        }
                    }
                }
            }
        }
        let mut dcols = Vec::new();
        for (s, (st, idx)) in tr.stages.iter().zip(&self.index.stages).enumerate().rev() {
            relu_mask(&st.y, &mut dy);
            // Skip connection: the sum feeds both `a` and the residual conv.
            let mut da = dy.clone();
            {
                let (w_rng, b_rng) = (self.layout.entry(idx.res_w).range(), self.layout.entry(idx.res_b).range());
                let mut dw = vec![0.0; w_rng.len()];
                let mut db = vec![0.0; b_rng.len()];
                conv_backward(&st.res, &self.params[w_rng.clone()], &st.cols_res, &dy, &mut dw, &mut db, Some(&mut dcols));
                add_into(&mut grad[w_rng], &dw);
                add_into(&mut grad[b_rng], &db);
                col2im(&st.res, &dcols, &mut da);
            }
            relu_mask(&st.a, &mut da);
            let (w_rng, b_rng) = (self.layout.entry(idx.down_w).range(), self.layout.entry(idx.down_b).range());
            let mut dw = vec![0.0; w_rng.len()];
            let mut db = vec![0.0; b_rng.len()];
            let need_dx = s > 0;
            conv_backward(
                &st.down,
                &self.params[w_rng.clone()],
                &st.cols_down,
                &da,
                &mut dw,
                &mut db,
                need_dx.then_some(&mut dcols),
            );
            add_into(&mut grad[w_rng], &dw);
            add_into(&mut grad[b_rng], &db);
            if need_dx {
                let mut dx = vec![0.0; st.down.cin * batch * st.down.h * st.down.w];
                col2im(&st.down, &dcols, &mut dx);
                dy = dx;
            }
        }
    }

    fn normalize_pixels<'a>(&self, pixels: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        let (m, s) = (self.config.image_mean, self.config.image_scale);
        pixels.iter().map(move |v| (v - m) * s)
    }

    /// Implied-velocity feature of one frame pair.
    pub fn encode_pair(&self, first: &[f32], second: &[f32]) -> Result<Vec<f64>> {
        Ok(self.encode_pairs(&[(first, second)])?.remove(0))
    }

    /// Features of several pairs in one batch.
    pub fn encode_pairs(&self, pairs: &[(&[f32], &[f32])]) -> Result<Vec<Vec<f64>>> {
        let px = self.config.image_width * self.config.image_height;
        if pairs.iter().any(|(a, b)| a.len() != px || b.len() != px) {
            return Err(Error::ShapeMismatch(format!("every frame must hold {px} pixels")));
        }
        let mut raw = Vec::with_capacity(2 * pairs.len() * px);
        raw.extend(pairs.iter().flat_map(|(a, _)| a.iter().map(|&v| v as f64)));
        raw.extend(pairs.iter().flat_map(|(_, b)| b.iter().map(|&v| v as f64)));
        let x0: Vec<f64> = self.normalize_pixels(&raw).collect();
        let (f, _) = self.encode_batch(x0, pairs.len());
        Ok(f.chunks_exact(self.config.feature_len()).map(<[f64]>::to_vec).collect())
    }

    fn accel_inputs(&self, accel: &[Vec3]) -> Vec<f64> {
        accel.iter().flat_map(|a| a.iter().map(|v| v * self.config.accel_scale).collect::<Vec<_>>()).collect()
    }

    fn mlp_forward(&self, layers: &[DenseIdx], input: Vec<f64>, rows: usize) -> MlpTrace {
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        for (i, d) in layers.iter().enumerate() {
            let x = if i == 0 { &input } else { &outputs[i - 1] };
            let relu = i + 1 < layers.len();
            outputs.push(dense_forward(&self.params, &self.layout, d, x, rows, relu));
        }
        MlpTrace { rows, input, outputs }
    }

    /// Backward through an MLP whose hidden layers use ReLU. `last_relu`
    /// states whether the final layer did too.
    fn mlp_backward(&self, layers: &[DenseIdx], tr: &MlpTrace, dy: Vec<f64>, last_relu: bool, grad: &mut [f64], want_dx: bool) -> Option<Vec<f64>> {
        let mut dy = dy;
        for (i, d) in layers.iter().enumerate().rev() {
            if i + 1 < layers.len() || last_relu {
                relu_mask(&tr.outputs[i], &mut dy);
            }
            let x = if i == 0 { &tr.input } else { &tr.outputs[i - 1] };
            let need = i > 0 || want_dx;
            match dense_backward(&self.params, &self.layout, d, x, &dy, tr.rows, grad, need) {
                Some(dx) => dy = dx,
                None => return None,
            }
        }
        Some(dy)
    }

    /// Acceleration feature `fa` for one processed acceleration sample.
    pub fn accel_branch(&self, accel: &Vec3) -> Vec<f64> {
        let tr = self.mlp_forward(&self.index.accel, self.accel_inputs(std::slice::from_ref(accel)), 1);
        tr.outputs.last().cloned().unwrap_or_default()
    }

    fn lstm_weights(&self, idx: &LstmIdx) -> LstmWeights<'_> {
        LstmWeights {
            wx: self.slice(idx.wx),
            wh: self.slice(idx.wh),
            b: self.slice(idx.b),
            input: idx.input,
            hidden: self.config.hidden,
        }
    }

    /// Runs the full model and keeps the activations for [`Self::backward`].
    pub fn forward(&self, inputs: &EstimatorInputs, options: ForwardOptions) -> Result<ForwardTrace> {
        self.check_frames(inputs.width, inputs.height)?;
        let pairs = inputs.frames.saturating_sub(1);
        if inputs.frames < 2 || inputs.accel.len() + 1 != pairs || inputs.euler.len() != pairs {
            return Err(Error::ShapeMismatch(format!(
                "{} frames need {} relative rotations and {} accelerations; got {} and {}",
                inputs.frames,
                pairs,
                pairs.saturating_sub(1),
                inputs.euler.len(),
                inputs.accel.len()
            )));
        }
        let cfg = &self.config;
        let px = inputs.width * inputs.height;
        let feat = cfg.feature_len();
        let hidden = cfg.hidden;

        let mut x0 = Vec::with_capacity(2 * pairs * px);
        x0.extend(self.normalize_pixels(&inputs.pixels[..pairs * px]));
        x0.extend(self.normalize_pixels(&inputs.pixels[px..]));
        let (f, encoder) = self.encode_batch(x0, pairs);

        let accel = self.mlp_forward(&self.index.accel, self.accel_inputs(&inputs.accel), pairs - 1);
        let fa = (!options.zero_accel_branch).then(|| accel.outputs.last().expect("accel layers").as_slice());
        let fv = fuse_flat(&f, fa, pairs, feat, cfg.literal_eq3);

        let velocity = lstm::forward(&self.lstm_weights(&self.index.velocity), fv, pairs);
        let projection = self.mlp_forward(std::slice::from_ref(&self.index.projection), velocity.hs.clone(), pairs);

        let euler_in: Vec<f64> = if options.zero_euler_input {
            vec![0.0; pairs * 3]
        } else {
            inputs.euler.iter().flat_map(|e| e.0.iter().map(|v| v * cfg.euler_scale).collect::<Vec<_>>()).collect()
        };
        let mut euler = self.mlp_forward(std::slice::from_ref(&self.index.euler), euler_in, pairs);
        relu_inplace(&mut euler.outputs[0]);

        let e = cfg.euler_width;
        let mut main_in = vec![0.0; pairs * (feat + e)];
        for j in 0..pairs {
            let row = &mut main_in[j * (feat + e)..(j + 1) * (feat + e)];
            for k in 0..feat {
                row[k] = f[j * feat + k] + projection.outputs[0][j * feat + k];
            }
            row[feat..].copy_from_slice(&euler.outputs[0][j * e..(j + 1) * e]);
        }
        let main = lstm::forward(&self.lstm_weights(&self.index.main), main_in, pairs);
        let head = self.mlp_forward(std::slice::from_ref(&self.index.head), main.hs[..pairs * hidden].to_vec(), pairs);
        let output = head.outputs[0].clone();
        Ok(ForwardTrace {
            version: self.version,
            options,
            pairs,
            encoder,
            f,
            accel,
            velocity,
            projection,
            euler,
            main,
            head,
            output,
        })
    }

    /// Estimated motion for a scan.
    pub fn predict(&self, inputs: &EstimatorInputs, options: ForwardOptions) -> Result<Vec<MotionParams>> {
        Ok(self.forward(inputs, options)?.params())
    }

    /// Exact gradient of a scalar loss with respect to every parameter, given
    /// `d loss / d output` (`pairs × 6`).
    pub fn backward(&self, trace: &ForwardTrace, d_output: &[f64]) -> Result<Vec<f64>> {
        self.backward_frozen(trace, d_output, &[])
    }

    /// As [`Self::backward`], with the gradient of `frozen` groups forced to zero.
    pub fn backward_frozen(&self, trace: &ForwardTrace, d_output: &[f64], frozen: &[ParamGroup]) -> Result<Vec<f64>> {
        if trace.version != self.version {
            return Err(Error::StateMismatch);
        }
        if d_output.len() != trace.pairs * OUTPUTS {
            return Err(Error::ShapeMismatch(format!(
                "output gradient has {} values, expected {}",
                d_output.len(),
                trace.pairs * OUTPUTS
            )));
        }
        let cfg = &self.config;
        let pairs = trace.pairs;
        let feat = cfg.feature_len();
        let e = cfg.euler_width;
        let mut grad = vec![0.0; self.params.len()];

        let dhm = self
            .mlp_backward(std::slice::from_ref(&self.index.head), &trace.head, d_output.to_vec(), false, &mut grad, true)
            .expect("input gradient requested");
        let dmain = {
            let idx = &self.index.main;
            let (wx, wh, b) = (self.layout.entry(idx.wx).range(), self.layout.entry(idx.wh).range(), self.layout.entry(idx.b).range());
            let mut dwx = vec![0.0; wx.len()];
            let mut dwh = vec![0.0; wh.len()];
            let mut db = vec![0.0; b.len()];
            let d = lstm::backward(&self.lstm_weights(idx), &trace.main, &dhm, &mut dwx, &mut dwh, &mut db);
            add_into(&mut grad[wx], &dwx);
            add_into(&mut grad[wh], &dwh);
            add_into(&mut grad[b], &db);
            d
        };
        let mut df = vec![0.0; pairs * feat];
        let mut de = vec![0.0; pairs * e];
        for j in 0..pairs {
            let row = &dmain[j * (feat + e)..(j + 1) * (feat + e)];
            df[j * feat..(j + 1) * feat].copy_from_slice(&row[..feat]);
            de[j * e..(j + 1) * e].copy_from_slice(&row[feat..]);
        }
        self.mlp_backward(std::slice::from_ref(&self.index.euler), &trace.euler, de, true, &mut grad, false);

        let dhv = self
            .mlp_backward(std::slice::from_ref(&self.index.projection), &trace.projection, df.clone(), false, &mut grad, true)
            .expect("input gradient requested");
        let dfv = {
            let idx = &self.index.velocity;
            let (wx, wh, b) = (self.layout.entry(idx.wx).range(), self.layout.entry(idx.wh).range(), self.layout.entry(idx.b).range());
            let mut dwx = vec![0.0; wx.len()];
            let mut dwh = vec![0.0; wh.len()];
            let mut db = vec![0.0; b.len()];
            let d = lstm::backward(&self.lstm_weights(idx), &trace.velocity, &dhv, &mut dwx, &mut dwh, &mut db);
            add_into(&mut grad[wx], &dwx);
            add_into(&mut grad[wh], &dwh);
            add_into(&mut grad[b], &db);
            d
        };
        add_into(&mut df[..feat], &dfv[..feat]);
        let mut dfa = vec![0.0; (pairs - 1) * feat];
        for j in 1..pairs {
            let src = if cfg.literal_eq3 { j - 1 } else { j };
            let g = &dfv[j * feat..(j + 1) * feat];
            add_into(&mut df[src * feat..(src + 1) * feat], g);
            dfa[(j - 1) * feat..j * feat].copy_from_slice(g);
        }
        if !trace.options.zero_accel_branch && pairs > 1 {
            self.mlp_backward(&self.index.accel, &trace.accel, dfa, false, &mut grad, false);
        }
        if !frozen.contains(&ParamGroup::Encoder) {
            self.encoder_backward(&trace.encoder, &df, &mut grad);
        }
        self.layout.zero_groups(&mut grad, frozen);
        Ok(grad)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
