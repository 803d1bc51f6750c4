use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use freehand::error::Error;
use freehand::estimator::{load_checkpoint, save_checkpoint, EstimatorInputs, ForwardOptions, ModelConfig, MotionEstimator};
use freehand::eval::{compound_volume, compute_metrics, FrameGeometry, MetricReport};
use freehand::geometry::{chain_trajectory, Pose, Trajectory};
use freehand::learn::{adapt_online_with_progress, train_with_progress, OnlineConfig, TrainConfig, TrainHistory};
use freehand::scandata::{self, find_scan_dirs, params_to_csv, read_trajectory, write_trajectory, ScanSequence};
use freehand::simulator::SimConfig;
use serde::{Deserialize, Serialize};

use crate::config::{self, ConfigError};
use crate::manifest::RunManifest;
use crate::{AdaptArgs, Command, EvaluateArgs, InferArgs, PlotArgs, ReconstructArgs, SimulateArgs, TrainArgs};

pub const EXIT_INPUT: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_VERSION: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            Error::Divergence { .. } => EXIT_DIVERGED,
            Error::FormatVersionMismatch { .. } => EXIT_VERSION,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::input(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => train(&a),
        Command::Infer(a) => infer(&a),
        Command::Adapt(a) => adapt(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Reconstruct(a) => reconstruct(&a),
        Command::PlotScript(a) => plot_script(&a),
    }
}

/// Runs `body`, then writes the manifest whatever the outcome.
fn with_manifest(name: &str, path: PathBuf, body: impl FnOnce(&mut RunManifest) -> CliResult) -> CliResult {
    let mut manifest = RunManifest::new(name);
    let result = body(&mut manifest);
    match &result {
        Ok(()) => manifest.finish(&path, 0, None),
        Err(e) => manifest.finish(&path, e.code as i32, Some(e.message.clone())),
    }
    result
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn require(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::input(format!("missing input {}", path.display())))
    }
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_scan(path: &Path) -> CliResult<ScanSequence> {
    require(path)?;
    Ok(scandata::load(path)?)
}

fn load_model(path: &Path) -> CliResult<MotionEstimator> {
    require(path)?;
    Ok(load_checkpoint(path)?)
}

fn start_pose(scan: &ScanSequence) -> Pose {
    scan.gt.as_ref().map(|g| g.poses()[0]).unwrap_or_default()
}

fn frame_geometry(scan: &ScanSequence) -> FrameGeometry {
    let (width, height) = scan.frame_dims().expect("loaded scans have frames");
    FrameGeometry {
        width,
        height,
        pixel_spacing: scan.meta.pixel_spacing,
    }
}

fn simulate(a: &SimulateArgs) -> CliResult {
    with_manifest("simulate", a.out.join("manifest.json"), |m| {
        let mut cfg: SimConfig = config::load(&SimConfig::default(), a.config.as_deref())?;
        if let Some(seed) = a.seed {
            cfg.seed = seed;
        }
        m.config(&cfg);
        m.seed("seed", cfg.seed);
        m.inputs.extend(a.config.clone());
        fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
        let phantoms = cfg.make_phantoms()?;
        for index in a.first..a.first + a.count {
            let scan = cfg.generate(&phantoms, index, 1)?.remove(0);
            let dir = a.out.join(format!("scan_{index:04}"));
            scandata::save(&scan, &dir)?;
            m.outputs.push(dir);
        }
        println!("wrote {} scans to {}", a.count, a.out.display());
        Ok(())
    })
}

/// Training settings file: training fields at the top level, network shape
/// under `model.`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainSettings {
    #[serde(flatten)]
    train: TrainConfig,
    model: ModelConfig,
}

fn train(a: &TrainArgs) -> CliResult {
    let out = a.out.clone().unwrap_or_else(|| a.model.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = a.model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let manifest_path = out.join(format!("{stem}.manifest.json"));
    with_manifest("train", manifest_path, |m| {
        let defaults = TrainSettings {
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        };
        let mut settings: TrainSettings = config::load(&defaults, a.config.as_deref())?;
        if let Some(seed) = a.seed {
            settings.train.seed = seed;
            settings.model.seed = seed;
        }
        let mut scans = Vec::new();
        for root in &a.scan {
            require(root)?;
            for dir in find_scan_dirs(root)? {
                scans.push(scandata::load(&dir)?);
                m.inputs.push(dir);
            }
        }
        if scans.is_empty() {
            return Err(CliError::input("no scan directories found"));
        }
        if let Some(i) = scans.iter().position(|s| s.gt.is_none()) {
            return Err(CliError::input(format!("scan {} has no ground truth", m.inputs[i].display())));
        }
        let (w, h) = scans[0].frame_dims().expect("loaded scans have frames");
        settings.model.image_width = w;
        settings.model.image_height = h;
        m.config(&settings);
        m.seed("train", settings.train.seed);
        m.seed("model", settings.model.seed);

        let mut model = MotionEstimator::new(settings.model.clone())?;
        let mut history = TrainHistory::default();
        let result = train_with_progress(&mut model, &scans, &settings.train, |r| {
            eprintln!("epoch {:>4}  lr {:.2e}  loss {:.5}  (mae {:.5}, pearson {:.5})", r.epoch, r.learning_rate, r.loss.total, r.loss.mae, r.loss.pearson);
            history.epochs.push(*r);
        });
        // On divergence the model still holds the last finite parameters.
        save_checkpoint(&model, &a.model)?;
        let history_path = out.join(format!("{stem}.history.csv"));
        write(&history_path, &history.to_csv())?;
        m.outputs.extend([a.model.clone(), history_path]);
        result?;
        Ok(())
    })
}

fn infer(a: &InferArgs) -> CliResult {
    with_manifest("infer", a.out.join("manifest.json"), |m| {
        m.inputs.extend([a.model.clone(), a.scan.clone()]);
        let model = load_model(&a.model)?;
        let scan = load_scan(&a.scan)?;
        m.config(model.config());
        let opts = ForwardOptions {
            zero_accel_branch: a.zero_accel_branch,
            ..Default::default()
        };
        let params = model.predict(&EstimatorInputs::from_scan(&scan)?, opts)?;
        let trajectory = chain_trajectory(&start_pose(&scan), &params);
        let (pp, tp) = (a.out.join("params.csv"), a.out.join("trajectory.csv"));
        write(&pp, &params_to_csv(&params))?;
        write_trajectory(&tp, &trajectory)?;
        m.outputs.extend([pp, tp]);
        Ok(())
    })
}

fn adapt(a: &AdaptArgs) -> CliResult {
    with_manifest("adapt", a.out.join("manifest.json"), |m| {
        m.inputs.extend([a.model.clone(), a.scan.clone()]);
        let mut cfg: OnlineConfig = config::load(&OnlineConfig::default(), a.config.as_deref())?;
        if let Some(n) = a.iterations {
            cfg.iterations = n;
        }
        m.config(&cfg);
        let model = load_model(&a.model)?;
        let mut scan = load_scan(&a.scan)?;
        // Ground truth, when present, only scores the iterations afterwards.
        let gt = scan.gt.take();
        let frame = frame_geometry(&scan);
        let mut curve = format!("iteration,{}\n", MetricReport::CSV_HEADER);
        let mut curve_err = None;
        let (adapted, history) = adapt_online_with_progress(&model, &scan, &cfg, |k, _, params| {
            if let Some(gt) = &gt {
                match compute_metrics(&chain_trajectory(&gt.poses()[0], params), &gt.trajectory, &frame) {
                    Ok(r) => {
                        let _ = writeln!(curve, "{k},{}", r.csv_row());
                    }
                    Err(e) => curve_err = Some(e),
                }
            }
        })?;
        if let Some(e) = curve_err {
            return Err(e.into());
        }
        let params = adapted.predict(&EstimatorInputs::from_scan(&scan)?, ForwardOptions::default())?;
        let ckpt = a.out.join("adapted.ckpt");
        let hist = a.out.join("online_history.csv");
        let pp = a.out.join("params.csv");
        save_checkpoint(&adapted, &ckpt)?;
        write(&hist, &history.to_csv())?;
        write(&pp, &params_to_csv(&params))?;
        if let (Some(first), Some(last)) = (history.initial(), history.last()) {
            println!("online loss {:.5} -> {:.5} over {} iterations", first.total, last.total, cfg.iterations);
        }
        m.outputs.extend([ckpt, hist, pp]);
        if gt.is_some() {
            let cp = a.out.join("metric_curve.csv");
            write(&cp, &curve)?;
            m.outputs.push(cp);
        }
        Ok(())
    })
}

fn evaluate(a: &EvaluateArgs) -> CliResult {
    with_manifest("evaluate", sidecar(&a.out, ".manifest.json"), |m| {
        let scan = load_scan(&a.scan)?;
        m.inputs.push(a.scan.clone());
        let gt = scan.gt.as_ref().ok_or(Error::NoGroundTruth)?;
        let frame = frame_geometry(&scan);
        let mut rows: Vec<(String, MetricReport)> = Vec::new();
        for path in &a.trajectory {
            require(path)?;
            let est = read_trajectory(path)?;
            let report = compute_metrics(&est, &gt.trajectory, &frame).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            rows.push((path.display().to_string(), report));
            m.inputs.push(path.clone());
        }
        if let Some(model_path) = &a.model {
            let model = load_model(model_path)?;
            let opts = ForwardOptions {
                zero_accel_branch: a.zero_accel_branch,
                ..Default::default()
            };
            let params = model.predict(&EstimatorInputs::from_scan(&scan)?, opts)?;
            let est = chain_trajectory(&gt.poses()[0], &params);
            let label = if a.zero_accel_branch { "model (zero accel branch)" } else { "model" };
            rows.push((label.to_string(), compute_metrics(&est, &gt.trajectory, &frame)?));
            m.inputs.push(model_path.clone());
        }
        if rows.is_empty() {
            return Err(CliError::input("nothing to evaluate: pass --trajectory or --model"));
        }
        let mut csv = format!("source,{}\n", MetricReport::CSV_HEADER);
        for (name, r) in &rows {
            let _ = writeln!(csv, "{},{}", name.replace(',', ";"), r.csv_row());
            println!("{name}\n{r}\n");
        }
        write(&a.out, &csv)?;
        m.outputs.push(a.out.clone());
        Ok(())
    })
}

fn reconstruct(a: &ReconstructArgs) -> CliResult {
    with_manifest("reconstruct", sidecar(&a.out, ".manifest.json"), |m| {
        let scan = load_scan(&a.scan)?;
        m.inputs.push(a.scan.clone());
        let trajectory: Trajectory = match &a.trajectory {
            Some(p) => {
                require(p)?;
                m.inputs.push(p.clone());
                read_trajectory(p)?
            }
            None => scan.gt.as_ref().ok_or(Error::NoGroundTruth)?.trajectory.clone(),
        };
        let vol = compound_volume(&scan.images, &trajectory, scan.meta.pixel_spacing, a.spacing)?;
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        vol.write(&a.out)?;
        println!("volume {}x{}x{} at {} mm", vol.dims[0], vol.dims[1], vol.dims[2], vol.spacing);
        m.outputs.extend([a.out.clone(), sidecar(&a.out, ".json")]);
        Ok(())
    })
}

fn plot_script(a: &PlotArgs) -> CliResult {
    let mut script = String::from("set datafile separator ','\nset key outside\nset grid\n");
    let mut plots = Vec::new();
    for path in &a.csv {
        require(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let header: Vec<&str> = text.lines().next().unwrap_or("").split(',').collect();
        let column = match &a.column {
            Some(c) => header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| CliError::input(format!("{} has no column `{c}`", path.display())))?,
            None if header.len() >= 2 => 1,
            None => return Err(CliError::input(format!("{} needs at least two columns", path.display()))),
        };
        if plots.is_empty() {
            let _ = writeln!(script, "set xlabel '{}'\nset ylabel '{}'", header[0], header[column]);
        }
        plots.push(format!("'{}' using 1:{} every ::1 with lines title '{}'", path.display(), column + 1, path.display()));
    }
    let _ = writeln!(script, "plot {}", plots.join(", \\\n     "));
    write(&a.out, &script)
}
