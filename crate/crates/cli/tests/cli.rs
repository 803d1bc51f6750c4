use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn freehand(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freehand")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small, fast scans: 16×16 frames of a coarse phantom.
fn sim_config(dir: &Path) -> PathBuf {
    let path = dir.join("sim.cfg");
    fs::write(
        &path,
        "# small test batch\nframes = 10\nimage_size = 16\nphantom_dims = [48, 48, 64]\nvoxel_spacing = 1.0\nlength_min = 8\nlength_max = 14\n",
    )
    .unwrap();
    path
}

fn simulate(dir: &Path, out: &Path, count: usize, seed: u64) -> Output {
    let cfg = sim_config(dir);
    freehand(&["simulate", "--config", s(&cfg), "--out", s(out), "--count", &count.to_string(), "--seed", &seed.to_string()])
}

fn train_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        format!(
            "epochs = {epochs}\naugmentations = 1\nlearning_rate = 1e-3\naugment.min_frames = 5\nmodel.encoder_channels = 4, 8, 8\nmodel.feature_pool = 1\nmodel.hidden = 16\nmodel.accel_hidden = [8]\nmodel.euler_width = 4\n"
        ),
    )
    .unwrap();
    path
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn simulate_is_reproducible_and_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(simulate(tmp.path(), &a, 3, 7).status.success());
    assert!(simulate(tmp.path(), &b, 3, 7).status.success());
    let tree = read_tree(&a);
    assert_eq!(tree.iter().filter(|(p, _)| p.ends_with("meta.json")).count(), 3);
    assert_eq!(tree, read_tree(&b));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["exit_code"], 0);
    assert_eq!(manifest["config"]["frames"], 10);
    assert_eq!(manifest["config"]["dt"], 0.05);
}

#[test]
fn simulate_reports_unwritable_output() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("scans");
    let r = simulate(tmp.path(), &out, 1, 1);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains(s(&out)));
}

#[test]
fn bad_config_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let r = freehand(&["simulate", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no_such_key"));
}

#[test]
fn train_infer_adapt_evaluate_reconstruct() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let scans = t.join("scans");
    assert!(simulate(t, &scans, 5, 3).status.success());
    let model = t.join("run").join("model.ckpt");
    let r = freehand(&["train", "--scan", s(&scans), "--model", s(&model), "--config", s(&train_config(t, 10))]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let history = fs::read_to_string(t.join("run").join("model.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 11);
    assert!(t.join("run").join("model.manifest.json").exists());

    let scan = scans.join("scan_0002");
    let inferred = t.join("infer");
    assert!(freehand(&["infer", "--model", s(&model), "--scan", s(&scan), "--out", s(&inferred)]).status.success());
    assert_eq!(fs::read_to_string(inferred.join("params.csv")).unwrap().lines().count(), 10);

    // Ground truth scored against itself gives an all-zero row.
    let metrics = t.join("metrics.csv");
    let r = freehand(&[
        "evaluate",
        "--scan",
        s(&scan),
        "--trajectory",
        s(&scan.join("gt.csv")),
        s(&inferred.join("trajectory.csv")),
        "--model",
        s(&model),
        "--out",
        s(&metrics),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    let zero: Vec<f64> = lines[1].split(',').skip(1).take(6).map(|v| v.parse().unwrap()).collect();
    assert!(zero.iter().all(|&v| v == 0.0), "{}", lines[1]);
    assert_eq!(lines[2].split(',').nth(1), lines[3].split(',').nth(1));

    let r = freehand(&["evaluate", "--scan", s(&scan), "--model", s(&model), "--zero-accel-branch", "--out", s(&t.join("ablation.csv"))]);
    assert!(r.status.success());

    let adapted = t.join("adapt0");
    assert!(freehand(&["adapt", "--model", s(&model), "--scan", s(&scan), "--out", s(&adapted), "--iterations", "0"]).status.success());
    assert_eq!(fs::read(adapted.join("adapted.ckpt")).unwrap(), fs::read(&model).unwrap());
    let adapted = t.join("adapt3");
    assert!(freehand(&["adapt", "--model", s(&model), "--scan", s(&scan), "--out", s(&adapted), "--iterations", "3"]).status.success());
    assert_eq!(fs::read_to_string(adapted.join("online_history.csv")).unwrap().lines().count(), 5);
    let curve = fs::read_to_string(adapted.join("metric_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 5);
    assert!(curve.starts_with("iteration,fdr_percent"));

    let vol = t.join("vol.raw");
    assert!(freehand(&["reconstruct", "--scan", s(&scan), "--out", s(&vol), "--spacing", "0.5"]).status.success());
    let header: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("vol.raw.json")).unwrap()).unwrap();
    let dims: Vec<u64> = header["dims"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(fs::metadata(&vol).unwrap().len(), 4 * dims.iter().product::<u64>());

    let plot = t.join("loss.gp");
    assert!(freehand(&["plot-script", "--csv", s(&adapted.join("online_history.csv")), "--column", "total", "--out", s(&plot)]).status.success());
    assert!(fs::read_to_string(&plot).unwrap().contains("using 1:2"));
}

#[test]
fn evaluate_reports_both_lengths_on_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let scans = t.join("scans");
    assert!(simulate(t, &scans, 1, 4).status.success());
    let scan = scans.join("scan_0000");
    let gt = fs::read_to_string(scan.join("gt.csv")).unwrap();
    let short: Vec<&str> = gt.lines().take(gt.lines().count() - 2).collect();
    let traj = t.join("short.csv");
    fs::write(&traj, short.join("\n") + "\n").unwrap();
    let r = freehand(&["evaluate", "--scan", s(&scan), "--trajectory", s(&traj), "--out", s(&t.join("m.csv"))]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("8") && err.contains("10"), "{err}");
    assert!(t.join("m.csv.manifest.json").exists());
}

#[test]
fn train_without_ground_truth_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let scans = t.join("scans");
    assert!(simulate(t, &scans, 2, 5).status.success());
    // Dropping gt.csv from the checksum list makes the scan unlabelled.
    let dir = scans.join("scan_0001");
    fs::remove_file(dir.join("gt.csv")).unwrap();
    let sums = fs::read_to_string(dir.join("checksums.txt")).unwrap();
    let kept: String = sums.lines().filter(|l| !l.ends_with("gt.csv")).map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("checksums.txt"), kept).unwrap();
    let r = freehand(&["train", "--scan", s(&scans), "--model", s(&t.join("m.ckpt")), "--config", s(&train_config(t, 1))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn missing_inputs_and_checkpoint_versions() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let r = freehand(&["infer", "--model", s(&t.join("nope.ckpt")), "--scan", s(t), "--out", s(&t.join("o"))]);
    assert_eq!(r.status.code(), Some(1));

    let scans = t.join("scans");
    assert!(simulate(t, &scans, 3, 6).status.success());
    let model = t.join("m.ckpt");
    assert!(freehand(&["train", "--scan", s(&scans), "--model", s(&model), "--config", s(&train_config(t, 1))]).status.success());
    let mut bytes = fs::read(&model).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    fs::write(&model, bytes).unwrap();
    let r = freehand(&["infer", "--model", s(&model), "--scan", s(&scans.join("scan_0000")), "--out", s(&t.join("o"))]);
    assert_eq!(r.status.code(), Some(4));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.join("o").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["exit_code"], 4);
}
