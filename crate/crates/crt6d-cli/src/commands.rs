//! Subcommand implementations. Each returns the exact stdout text so the
//! binary stays a thin print-and-exit shell and tests can assert on bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crt6d::keypoints::{default_seed_index, farthest_point_sample, keypoints_to_json, ObjectModel};
use crt6d::metrics::{evaluate, load_models, parse_instance_jsonl, MetricError, ObjectMetrics};
use crt6d::synth::{run_demo, DemoConfig, SynthError};
use serde::Deserialize;
use thiserror::Error;

use crate::checks;

/// File the demo writes its trained checkpoint to, relative to the working
/// directory.
pub const DEMO_CHECKPOINT_FILE: &str = "crt6d-demo-checkpoint.bin";

/// User-facing failures, split by exit code: bad input exits 2, internal
/// failures exit 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    BadInput(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::BadInput(format!(
            "{}: not a readable file",
            path.display()
        )))
    }
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::BadInput(format!("{}: {e}", path.display())))
}

/// Metric errors all stem from the input files during evaluation.
fn eval_error(e: MetricError) -> CliError {
    CliError::BadInput(e.to_string())
}

fn synth_error(e: SynthError) -> CliError {
    match e {
        SynthError::BadConfig(_) => CliError::BadInput(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

/// Threads resolution: the OSKF_THREADS environment variable wins over the
/// flag, the flag over the config file, and the config file over the number
/// of available cores.
pub fn resolve_threads(flag: Option<usize>, file: Option<usize>) -> Result<usize, CliError> {
    if let Ok(raw) = std::env::var("OSKF_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| CliError::BadInput(format!("OSKF_THREADS: invalid thread count {raw:?}")))?;
        if n == 0 {
            return Err(CliError::BadInput(
                "OSKF_THREADS: thread count must be at least 1".into(),
            ));
        }
        return Ok(n);
    }
    if let Some(n) = flag.or(file) {
        if n == 0 {
            return Err(CliError::BadInput("thread count must be at least 1".into()));
        }
        return Ok(n);
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run the invariant suite; returns the table text and whether every check
/// passed.
pub fn run_selfcheck(checkpoint: Option<&Path>) -> (String, bool) {
    let results = checks::run_all(checkpoint);
    let mut out = String::new();
    let mut passed = 0;
    for r in &results {
        if r.passed {
            let _ = writeln!(out, "{:<18} PASS", r.name);
            passed += 1;
        } else {
            let _ = writeln!(out, "{:<18} FAIL  {}", r.name, r.detail);
        }
    }
    let _ = writeln!(out, "selfcheck: {passed}/{} passed", results.len());
    (out, passed == results.len())
}

fn metric_row(out: &mut String, label: &str, m: &ObjectMetrics) {
    let _ = writeln!(
        out,
        "{:<6} {:>6} {:>13.6} {:>10.6} {:>9.6} {:>9.6}",
        label, m.count, m.add_accuracy, m.auc_add_s, m.acc_2deg2cm, m.acc_5deg5cm
    );
}

/// Evaluate predictions against ground truth and print per-object rows in
/// object-id order plus the weighted aggregate.
pub fn run_eval(
    pred: &Path,
    gt: &Path,
    models: &Path,
    report: Option<&Path>,
) -> Result<String, CliError> {
    for p in [pred, gt, models] {
        require_file(p)?;
    }
    let predictions = parse_instance_jsonl(&read_input(pred)?)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", pred.display())))?;
    let ground_truth = parse_instance_jsonl(&read_input(gt)?)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", gt.display())))?;
    let models = load_models(models).map_err(eval_error)?;
    let rep = evaluate(&predictions, &ground_truth, &models).map_err(eval_error)?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:>6} {:>13} {:>10} {:>9} {:>9}",
        "obj", "count", "add(-s)_0.1d", "auc_add_s", "2deg2cm", "5deg5cm"
    );
    for (obj, m) in &rep.per_object {
        metric_row(&mut out, &obj.to_string(), m);
    }
    metric_row(&mut out, "ALL", &rep.aggregate);

    if let Some(path) = report {
        let json = serde_json::to_string_pretty(&rep)
            .map_err(|e| CliError::Internal(format!("report serialization: {e}")))?;
        fs::write(path, json)
            .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    }
    Ok(out)
}

/// Sample `k` keypoints from an ASCII PLY cloud and write them as JSON.
pub fn run_fps(ply: &Path, k: usize, out_path: &Path) -> Result<String, CliError> {
    require_file(ply)?;
    let text = read_input(ply)?;
    let points = crt6d::keypoints::parse_ascii_ply(&text)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", ply.display())))?;
    let model = ObjectModel::new(points, vec![])
        .map_err(|e| CliError::BadInput(format!("{}: {e}", ply.display())))?;
    let seed = default_seed_index(&model.points)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", ply.display())))?;
    let set = farthest_point_sample(&model, k, seed)
        .map_err(|e| CliError::BadInput(e.to_string()))?;
    let json = keypoints_to_json(&set);
    fs::write(out_path, &json)
        .map_err(|e| CliError::Internal(format!("{}: {e}", out_path.display())))?;
    Ok(format!("wrote {} keypoints to {}\n", set.k(), out_path.display()))
}

/// Flat config file for the demo: flag-name keys only, explicit flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoFileConfig {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub scenes: Option<usize>,
    pub threads: Option<usize>,
}

/// Train on synthetic scenes, print the per-iteration table, and write the
/// trained checkpoint next to the working directory.
pub fn run_demo_cmd(
    seed: Option<u64>,
    steps: Option<usize>,
    scenes: Option<usize>,
    config_path: Option<&Path>,
    threads_flag: Option<usize>,
) -> Result<String, CliError> {
    let file_cfg = match config_path {
        Some(p) => {
            require_file(p)?;
            serde_json::from_str::<DemoFileConfig>(&read_input(p)?)
                .map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))?
        }
        None => DemoFileConfig::default(),
    };
    let defaults = DemoConfig::default();
    let cfg = DemoConfig {
        seed: seed.or(file_cfg.seed).unwrap_or(defaults.seed),
        steps: steps.or(file_cfg.steps).unwrap_or(defaults.steps),
        train_scenes: scenes.or(file_cfg.scenes).unwrap_or(defaults.train_scenes),
        threads: resolve_threads(threads_flag, file_cfg.threads)?,
        ..defaults
    };
    let report = run_demo(&cfg).map_err(synth_error)?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "seed {}  scenes {}  steps {}",
        cfg.seed, cfg.train_scenes, cfg.steps
    );
    let _ = writeln!(out, "{:>4} {:>12} {:>18}", "iter", "mean_add_m", "mean_geodesic_deg");
    for (t, m) in report.iterations.iter().enumerate() {
        let _ = writeln!(out, "{:>4} {:>12.6} {:>18.6}", t, m.mean_add, m.mean_geodesic_deg);
    }
    if let (Some(first), Some(last)) = (report.loss_trace.first(), report.loss_trace.last()) {
        let _ = writeln!(out, "train loss {:.6} -> {:.6}", first, last);
    }
    fs::write(DEMO_CHECKPOINT_FILE, &report.checkpoint)
        .map_err(|e| CliError::Internal(format!("{DEMO_CHECKPOINT_FILE}: {e}")))?;
    let _ = writeln!(out, "checkpoint: {DEMO_CHECKPOINT_FILE}");
    Ok(out)
}
