//! Evaluation metrics: ADD, ADD-S, threshold accuracy, AUC of the
//! accuracy-threshold curve, and n°/n cm pose accuracy, plus the file formats
//! (JSONL instance records, models manifest) the evaluator consumes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Pose, Vec3};
use crate::keypoints::{parse_ascii_ply, ObjectModel, PlyError};

/// Point count up to which ADD-S uses the exact O(n²) scan; larger clouds go
/// through the spatial grid, which returns bit-identical results.
const ADDS_BRUTE_LIMIT: usize = 5000;

/// Default ADD(-S) accuracy threshold as a fraction of the model diameter.
pub const ADD_THRESHOLD_FRAC: f64 = 0.1;

/// Default AUC integration cap in meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty point set")]
    EmptyPoints,
    #[error("empty distance list")]
    EmptyList,
    #[error("empty symmetry set")]
    EmptySymmetries,
    #[error("bad threshold: {0}")]
    BadThreshold(String),
    #[error("non-finite distance at index {0}")]
    BadDistance(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("models manifest: {0}")]
    Manifest(String),
    #[error("duplicate instance key (scene={0}, im={1}, obj={2})")]
    DuplicateKey(u32, u32, u32),
    #[error("duplicate object id {0} in models manifest")]
    DuplicateObject(u32),
    #[error("prediction/ground-truth mismatch: {0}")]
    KeyMismatch(String),
    #[error("no model for object {0}")]
    UnknownObject(u32),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Ply {
        path: String,
        #[source]
        source: PlyError,
    },
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Mean distance between correspondingly transformed model points.
pub fn add_distance(
    pose_pred: &Pose,
    pose_gt: &Pose,
    points: &[Vec3],
) -> Result<f64, MetricError> {
    if points.is_empty() {
        return Err(MetricError::EmptyPoints);
    }
    let mut total = 0.0;
    for x in points {
        let a = pose_pred.transform_point(x);
        let b = pose_gt.transform_point(x);
        total += dist2(&a, &b).sqrt();
    }
    Ok(total / points.len() as f64)
}

/// Mean distance from each predicted-transformed point to its closest
/// ground-truth-transformed point (symmetry-agnostic).
pub fn adds_distance(
    pose_pred: &Pose,
    pose_gt: &Pose,
    points: &[Vec3],
) -> Result<f64, MetricError> {
    if points.is_empty() {
        return Err(MetricError::EmptyPoints);
    }
    let pred: Vec<Vec3> = points.iter().map(|x| pose_pred.transform_point(x)).collect();
    let gt: Vec<Vec3> = points.iter().map(|x| pose_gt.transform_point(x)).collect();
    let total = if points.len() <= ADDS_BRUTE_LIMIT {
        adds_total_brute(&pred, &gt)
    } else {
        adds_total_grid(&pred, &gt)
    };
    Ok(total / points.len() as f64)
}

fn adds_total_brute(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for a in pred {
        let mut best = f64::INFINITY;
        for b in gt {
            best = best.min(dist2(a, b));
        }
        total += best.sqrt();
    }
    total
}

/// Uniform-grid nearest neighbor. Scans Chebyshev rings of cells outward from
/// the query until no farther ring can improve the best squared distance.
/// Candidate distances use the same expression as the brute-force path, and
/// the minimum of a superset-of-the-argmin subset equals the full minimum, so
/// the result is bit-identical to brute force.
fn adds_total_grid(pred: &[Vec3], gt: &[Vec3]) -> f64 {
    let mut lo = gt[0];
    let mut hi = gt[0];
    for p in gt {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let extent = hi - lo;
    let diag = extent.norm();
    if diag == 0.0 {
        // All ground-truth points coincide; the scan is O(n) anyway.
        return adds_total_brute(pred, gt);
    }
    let cell = (diag / (gt.len() as f64).cbrt()).max(diag * 1e-9);

    let key = |p: &Vec3| -> (i64, i64, i64) {
        (
            ((p.x - lo.x) / cell).floor() as i64,
            ((p.y - lo.y) / cell).floor() as i64,
            ((p.z - lo.z) / cell).floor() as i64,
        )
    };
    let mut grid: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    let mut max_cell = (0i64, 0i64, 0i64);
    for (i, p) in gt.iter().enumerate() {
        let k = key(p);
        max_cell = (max_cell.0.max(k.0), max_cell.1.max(k.1), max_cell.2.max(k.2));
        grid.entry(k).or_default().push(i);
    }

    let mut total = 0.0;
    for a in pred {
        let (cx, cy, cz) = key(a);
        let mut best = f64::INFINITY;
        // Rings beyond the grid still shrink toward it, so the ring index is
        // bounded by the query-to-grid cell distance plus the grid extent.
        let span = max_cell.0.max(max_cell.1).max(max_cell.2)
            + cx.abs().max(cy.abs()).max(cz.abs())
            + 2;
        for r in 0..=span {
            if r >= 1 {
                let bound = (r - 1) as f64 * cell;
                if best <= bound * bound {
                    break;
                }
            }
            for (k, idxs) in grid.range((cx - r, cy - r, cz - r)..=(cx + r, cy + r, cz + r)) {
                let cheb = (k.0 - cx)
                    .abs()
                    .max((k.1 - cy).abs())
                    .max((k.2 - cz).abs());
                if cheb != r {
                    continue;
                }
                for &i in idxs {
                    best = best.min(dist2(a, &gt[i]));
                }
            }
        }
        total += best.sqrt();
    }
    total
}

/// Fraction of distances strictly below `threshold_frac · diameter`.
pub fn add_s_accuracy(
    distances: &[f64],
    diameter: f64,
    threshold_frac: f64,
) -> Result<f64, MetricError> {
    if distances.is_empty() {
        return Err(MetricError::EmptyList);
    }
    if !(diameter > 0.0) || !(threshold_frac > 0.0) {
        return Err(MetricError::BadThreshold(format!(
            "diameter {diameter} and threshold fraction {threshold_frac} must be positive"
        )));
    }
    let tau = threshold_frac * diameter;
    let hits = distances.iter().filter(|&&d| d < tau).count();
    Ok(hits as f64 / distances.len() as f64)
}

/// Exact area under the accuracy-vs-threshold step curve on
/// `[0, max_threshold]`, normalized to `[0,1]`. Each distance `d` contributes
/// `max(0, max − d)/max`, so distances at or past the cap contribute zero.
pub fn auc_add(distances: &[f64], max_threshold: f64) -> Result<f64, MetricError> {
    if distances.is_empty() {
        return Err(MetricError::EmptyList);
    }
    if !(max_threshold > 0.0) {
        return Err(MetricError::BadThreshold(format!(
            "AUC cap {max_threshold} must be positive"
        )));
    }
    let mut total = 0.0;
    for (i, &d) in distances.iter().enumerate() {
        if !d.is_finite() || d < 0.0 {
            return Err(MetricError::BadDistance(i));
        }
        total += ((max_threshold - d) / max_threshold).max(0.0);
    }
    Ok(total / distances.len() as f64)
}

/// True when the geodesic rotation angle (minimized over the symmetry set) is
/// within `n_deg` degrees and the translation within `n_cm` centimeters.
pub fn ndeg_ncm(
    pose_pred: &Pose,
    pose_gt: &Pose,
    symmetries: &[Mat3],
    n_deg: f64,
    n_cm: f64,
) -> Result<bool, MetricError> {
    if symmetries.is_empty() {
        return Err(MetricError::EmptySymmetries);
    }
    if (pose_pred.translation - pose_gt.translation).norm() > n_cm / 100.0 {
        return Ok(false);
    }
    let mut best = f64::INFINITY;
    for s in symmetries {
        let m = pose_pred.rotation.transpose() * (pose_gt.rotation * s);
        let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        best = best.min(c.acos());
    }
    Ok(best.to_degrees() <= n_deg)
}

// ---- instance records and evaluation ----

/// One pose instance: `{"scene":..,"im":..,"obj":..,"R":[9 row-major],"t":[3]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub scene: u32,
    pub im: u32,
    pub obj: u32,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

impl InstanceRecord {
    pub fn new(scene: u32, im: u32, obj: u32, pose: &Pose) -> Self {
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = pose.rotation[(i, j)];
            }
        }
        Self {
            scene,
            im,
            obj,
            rotation,
            t: [
                pose.translation.x,
                pose.translation.y,
                pose.translation.z,
            ],
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(
            Mat3::from_row_slice(&self.rotation),
            Vec3::new(self.t[0], self.t[1], self.t[2]),
        )
    }

    pub fn key(&self) -> (u32, u32, u32) {
        (self.scene, self.im, self.obj)
    }
}

/// Parse newline-delimited instance records; blank lines are ignored and
/// errors carry the 1-based line number.
pub fn parse_instance_jsonl(text: &str) -> Result<Vec<InstanceRecord>, MetricError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(line).map_err(|e| MetricError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.rotation.iter().chain(rec.t.iter()).any(|v| !v.is_finite()) {
            return Err(MetricError::Parse {
                line: i + 1,
                message: "non-finite pose value".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn instances_to_jsonl(records: &[InstanceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("instance record serialization"));
        out.push('\n');
    }
    out
}

/// Per-object metric block. Accuracies are fractions in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub count: usize,
    pub add_accuracy: f64,
    pub auc_add_s: f64,
    pub acc_2deg2cm: f64,
    pub acc_5deg5cm: f64,
}

/// Evaluation over a prediction set: per-object metrics plus the
/// instance-count-weighted aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_object: BTreeMap<u32, ObjectMetrics>,
    pub aggregate: ObjectMetrics,
}

struct Accumulator {
    distances: Vec<f64>,
    hits2: usize,
    hits5: usize,
}

/// Join predictions to ground truth by (scene, im, obj), dispatch ADD vs
/// ADD-S per object symmetry flag, and aggregate.
pub fn evaluate(
    predictions: &[InstanceRecord],
    ground_truth: &[InstanceRecord],
    models: &BTreeMap<u32, ObjectModel>,
) -> Result<MetricReport, MetricError> {
    let mut gt_map: BTreeMap<(u32, u32, u32), &InstanceRecord> = BTreeMap::new();
    for g in ground_truth {
        if gt_map.insert(g.key(), g).is_some() {
            return Err(MetricError::DuplicateKey(g.scene, g.im, g.obj));
        }
    }

    let mut accs: BTreeMap<u32, Accumulator> = BTreeMap::new();
    let mut missing_gt: Vec<(u32, u32, u32)> = Vec::new();
    let mut seen: BTreeMap<(u32, u32, u32), ()> = BTreeMap::new();
    for p in predictions {
        if seen.insert(p.key(), ()).is_some() {
            return Err(MetricError::DuplicateKey(p.scene, p.im, p.obj));
        }
        let Some(g) = gt_map.remove(&p.key()) else {
            missing_gt.push(p.key());
            continue;
        };
        let model = models
            .get(&p.obj)
            .ok_or(MetricError::UnknownObject(p.obj))?;
        let pose_p = p.pose();
        let pose_g = g.pose();
        let d = if model.is_symmetric() {
            adds_distance(&pose_p, &pose_g, &model.points)?
        } else {
            add_distance(&pose_p, &pose_g, &model.points)?
        };
        let acc = accs.entry(p.obj).or_insert_with(|| Accumulator {
            distances: Vec::new(),
            hits2: 0,
            hits5: 0,
        });
        acc.distances.push(d);
        acc.hits2 += ndeg_ncm(&pose_p, &pose_g, &model.symmetries, 2.0, 2.0)? as usize;
        acc.hits5 += ndeg_ncm(&pose_p, &pose_g, &model.symmetries, 5.0, 5.0)? as usize;
    }

    let missing_pred: Vec<(u32, u32, u32)> = gt_map.keys().cloned().collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        let mut parts = Vec::new();
        if !missing_gt.is_empty() {
            parts.push(format!(
                "{} prediction(s) without ground truth, first {:?}",
                missing_gt.len(),
                &missing_gt[..missing_gt.len().min(5)]
            ));
        }
        if !missing_pred.is_empty() {
            parts.push(format!(
                "{} ground-truth instance(s) without prediction, first {:?}",
                missing_pred.len(),
                &missing_pred[..missing_pred.len().min(5)]
            ));
        }
        return Err(MetricError::KeyMismatch(parts.join("; ")));
    }

    let mut per_object = BTreeMap::new();
    let mut total = 0usize;
    let mut w_add = 0.0;
    let mut w_auc = 0.0;
    let mut w2 = 0.0;
    let mut w5 = 0.0;
    for (obj, acc) in accs {
        let model = &models[&obj];
        let n = acc.distances.len();
        let m = ObjectMetrics {
            count: n,
            add_accuracy: add_s_accuracy(&acc.distances, model.diameter, ADD_THRESHOLD_FRAC)?,
            auc_add_s: auc_add(&acc.distances, AUC_MAX_THRESHOLD)?,
            acc_2deg2cm: acc.hits2 as f64 / n as f64,
            acc_5deg5cm: acc.hits5 as f64 / n as f64,
        };
        total += n;
        w_add += m.add_accuracy * n as f64;
        w_auc += m.auc_add_s * n as f64;
        w2 += m.acc_2deg2cm * n as f64;
        w5 += m.acc_5deg5cm * n as f64;
        per_object.insert(obj, m);
    }
    if total == 0 {
        return Err(MetricError::EmptyList);
    }
    let aggregate = ObjectMetrics {
        count: total,
        add_accuracy: w_add / total as f64,
        auc_add_s: w_auc / total as f64,
        acc_2deg2cm: w2 / total as f64,
        acc_5deg5cm: w5 / total as f64,
    };
    Ok(MetricReport {
        per_object,
        aggregate,
    })
}

// ---- models manifest ----

/// One entry of the models manifest JSON array:
/// `{"obj":1,"ply":"obj1.ply","diameter":0.2,"symmetric":false,"symmetries":[[9 row-major],..]}`.
/// `symmetric` and `symmetries` are optional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifestEntry {
    pub obj: u32,
    pub ply: String,
    pub diameter: f64,
    #[serde(default)]
    pub symmetric: bool,
    #[serde(default)]
    pub symmetries: Vec<[f64; 9]>,
}

/// Parse the manifest array; no file IO.
pub fn parse_models_manifest(text: &str) -> Result<Vec<ModelManifestEntry>, MetricError> {
    let entries: Vec<ModelManifestEntry> =
        serde_json::from_str(text).map_err(|e| MetricError::Manifest(e.to_string()))?;
    for e in &entries {
        if !(e.diameter > 0.0) || !e.diameter.is_finite() {
            return Err(MetricError::Manifest(format!(
                "object {}: diameter {} must be positive and finite",
                e.obj, e.diameter
            )));
        }
        if e.symmetries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricError::Manifest(format!(
                "object {}: non-finite symmetry entry",
                e.obj
            )));
        }
    }
    Ok(entries)
}

/// Load a manifest and its PLY clouds (paths resolved against the manifest's
/// directory). The identity is prepended to every symmetry list.
pub fn load_models(manifest_path: &Path) -> Result<BTreeMap<u32, ObjectModel>, MetricError> {
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|source| MetricError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let entries = parse_models_manifest(&read(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for e in entries {
        if out.contains_key(&e.obj) {
            return Err(MetricError::DuplicateObject(e.obj));
        }
        let ply_path = base.join(&e.ply);
        let points = parse_ascii_ply(&read(&ply_path)?).map_err(|source| MetricError::Ply {
            path: ply_path.display().to_string(),
            source,
        })?;
        if points.is_empty() {
            return Err(MetricError::EmptyPoints);
        }
        let mut symmetries = vec![Mat3::identity()];
        for s in &e.symmetries {
            symmetries.push(Mat3::from_row_slice(s));
        }
        out.insert(
            e.obj,
            ObjectModel {
                points,
                diameter: e.diameter,
                symmetric: e.symmetric || !e.symmetries.is_empty(),
                symmetries,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{recover_rotation, Rotation6D};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
        loop {
            let repr = Rotation6D::new(
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
            );
            if let Ok(r) = recover_rotation(&repr) {
                return r;
            }
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            random_rotation(rng),
            Vec3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.5..1.5),
            ),
        )
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                )
            })
            .collect()
    }

    fn rot_x(deg: f64) -> Mat3 {
        let (s, c) = deg.to_radians().sin_cos();
        Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }

    const FLIP_Z: [f64; 9] = [-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0];

    #[test]
    fn add_zero_for_identical_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = random_pose(&mut rng);
        let pts = random_points(&mut rng, 40, 0.05);
        assert_eq!(add_distance(&pose, &pose, &pts).unwrap(), 0.0);
        assert_eq!(adds_distance(&pose, &pose, &pts).unwrap(), 0.0);
    }

    #[test]
    fn add_pure_translation_is_offset_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_pose(&mut rng);
        let delta = Vec3::new(0.01, -0.02, 0.005);
        let pred = Pose::new(gt.rotation, gt.translation + delta);
        let pts = random_points(&mut rng, 64, 0.05);
        let d = add_distance(&pred, &gt, &pts).unwrap();
        assert!((d - delta.norm()).abs() < 1e-12);
    }

    #[test]
    fn add_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = random_pose(&mut rng);
        let gt = random_pose(&mut rng);
        let pts = random_points(&mut rng, 50, 0.05);
        let d = add_distance(&pred, &gt, &pts).unwrap();
        let mut want = 0.0;
        for x in &pts {
            let a = pred.rotation * x + pred.translation;
            let b = gt.rotation * x + gt.translation;
            want += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
        want /= pts.len() as f64;
        assert!((d - want).abs() < 1e-12);
    }

    #[test]
    fn add_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = random_pose(&mut rng);
        let gt = random_pose(&mut rng);
        let mut pts = random_points(&mut rng, 30, 0.05);
        let d1 = add_distance(&pred, &gt, &pts).unwrap();
        let ds1 = adds_distance(&pred, &gt, &pts).unwrap();
        pts.reverse();
        assert!((add_distance(&pred, &gt, &pts).unwrap() - d1).abs() < 1e-12);
        assert!((adds_distance(&pred, &gt, &pts).unwrap() - ds1).abs() < 1e-12);
    }

    #[test]
    fn adds_never_exceeds_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let pred = random_pose(&mut rng);
            let gt = random_pose(&mut rng);
            let pts = random_points(&mut rng, 32, 0.05);
            let add = add_distance(&pred, &gt, &pts).unwrap();
            let adds = adds_distance(&pred, &gt, &pts).unwrap();
            assert!(adds <= add + 1e-15, "adds {adds} > add {add}");
        }
    }

    #[test]
    fn adds_ring_rotation_is_absorbed() {
        // 8 points on a ring; rotating by one step permutes them, so the
        // closest-point distance vanishes while ADD stays large.
        let pts: Vec<Vec3> = (0..8)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / 8.0;
                Vec3::new(0.05 * a.cos(), 0.05 * a.sin(), 0.0)
            })
            .collect();
        let step = std::f64::consts::TAU / 8.0;
        let (s, c) = step.sin_cos();
        let rz = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let t = Vec3::new(0.0, 0.0, 1.0);
        let pred = Pose::new(rz, t);
        let gt = Pose::new(Mat3::identity(), t);
        let adds = adds_distance(&pred, &gt, &pts).unwrap();
        assert!(adds < 1e-12, "adds = {adds}");
        assert!(add_distance(&pred, &gt, &pts).unwrap() > 0.01);
    }

    #[test]
    fn adds_grid_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for case in 0..200 {
            let n = rng.random_range(1..=512);
            let pred_pose = random_pose(&mut rng);
            let gt_pose = random_pose(&mut rng);
            let pts = random_points(&mut rng, n, 0.05);
            let pred: Vec<Vec3> = pts.iter().map(|x| pred_pose.transform_point(x)).collect();
            let gt: Vec<Vec3> = pts.iter().map(|x| gt_pose.transform_point(x)).collect();
            let brute = adds_total_brute(&pred, &gt);
            let grid = adds_total_grid(&pred, &gt);
            assert_eq!(brute.to_bits(), grid.to_bits(), "case {case}, n {n}");
        }
        // Degenerate cloud: all ground-truth points identical.
        let gt = vec![Vec3::new(0.1, 0.2, 0.3); 16];
        let pred = random_points(&mut rng, 16, 0.2);
        assert_eq!(
            adds_total_brute(&pred, &gt).to_bits(),
            adds_total_grid(&pred, &gt).to_bits()
        );
    }

    #[test]
    fn accuracy_fixtures() {
        assert_eq!(add_s_accuracy(&[0.0, 0.0, 0.0], 0.2, 0.1).unwrap(), 1.0);
        assert_eq!(add_s_accuracy(&[0.01, 0.03], 0.2, 0.1).unwrap(), 0.5);
        // Strict '<': a distance exactly at the threshold does not count.
        assert_eq!(add_s_accuracy(&[0.25], 2.5, 0.1).unwrap(), 0.0);
        assert!(matches!(
            add_s_accuracy(&[], 0.2, 0.1),
            Err(MetricError::EmptyList)
        ));
        assert!(matches!(
            add_s_accuracy(&[0.1], 0.0, 0.1),
            Err(MetricError::BadThreshold(_))
        ));
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(auc_add(&[0.0, 0.0], 0.10).unwrap(), 1.0);
        assert_eq!(auc_add(&[0.10, 0.5, 12.0], 0.10).unwrap(), 0.0);
        assert_eq!(auc_add(&[0.05], 0.10).unwrap(), 0.5);
        assert!(matches!(auc_add(&[], 0.10), Err(MetricError::EmptyList)));
        assert!(matches!(
            auc_add(&[f64::NAN], 0.10),
            Err(MetricError::BadDistance(0))
        ));
    }

    #[test]
    fn auc_monotone_under_pointwise_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let d: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..0.15)).collect();
            let bumped: Vec<f64> = d.iter().map(|x| x + rng.random_range(0.0..0.05)).collect();
            let a = auc_add(&d, 0.10).unwrap();
            let b = auc_add(&bumped, 0.10).unwrap();
            assert!(b <= a + 1e-15);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn ndeg_ncm_fixtures() {
        let id = [Mat3::identity()];
        let t = Vec3::new(0.0, 0.0, 1.0);
        let gt = Pose::new(Mat3::identity(), t);
        assert!(ndeg_ncm(&gt, &gt, &id, 0.1, 0.1).unwrap());

        // Exactly 3° of rotation: fails 2°2cm, passes 5°5cm.
        let pred = Pose::new(rot_x(3.0), t);
        assert!(!ndeg_ncm(&pred, &gt, &id, 2.0, 2.0).unwrap());
        assert!(ndeg_ncm(&pred, &gt, &id, 5.0, 5.0).unwrap());

        // 3 cm of translation with identical rotations.
        let pred = Pose::new(Mat3::identity(), t + Vec3::new(0.03, 0.0, 0.0));
        assert!(!ndeg_ncm(&pred, &gt, &id, 2.0, 2.0).unwrap());
        assert!(ndeg_ncm(&pred, &gt, &id, 5.0, 5.0).unwrap());

        // Translation boundary is inclusive: exactly 2 cm passes at 2 cm.
        // (Offset along x, where the ground-truth component is 0, so the
        // difference is exactly 0.02.)
        let pred = Pose::new(Mat3::identity(), t + Vec3::new(0.02, 0.0, 0.0));
        assert!(ndeg_ncm(&pred, &gt, &id, 2.0, 2.0).unwrap());

        // A symmetry flip is absorbed by the symmetry set.
        let flip = Mat3::from_row_slice(&FLIP_Z);
        let pred = Pose::new(flip, t);
        let syms = [Mat3::identity(), flip];
        assert!(!ndeg_ncm(&pred, &gt, &syms[..1], 2.0, 2.0).unwrap());
        assert!(ndeg_ncm(&pred, &gt, &syms, 2.0, 2.0).unwrap());

        assert!(matches!(
            ndeg_ncm(&gt, &gt, &[], 2.0, 2.0),
            Err(MetricError::EmptySymmetries)
        ));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let pose = Pose::new(rot_x(10.0), Vec3::new(0.1, 0.2, 0.9));
        let recs = vec![
            InstanceRecord::new(1, 4, 7, &pose),
            InstanceRecord::new(1, 5, 7, &pose),
        ];
        let text = instances_to_jsonl(&recs);
        let back = parse_instance_jsonl(&text).unwrap();
        assert_eq!(recs, back);
        assert_eq!(recs[0].pose(), pose);

        let bad = format!("{}\nnot json\n", text.trim_end());
        match parse_instance_jsonl(&bad) {
            Err(MetricError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let nan = r#"{"scene":1,"im":1,"obj":1,"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,null]}"#;
        assert!(parse_instance_jsonl(nan).is_err());
    }

    // Genuinely symmetric under the z-flip: points map onto each other.
    fn tiny_model(symmetric: bool) -> ObjectModel {
        let pts = vec![
            Vec3::new(0.05, 0.0, 0.0),
            Vec3::new(-0.05, 0.0, 0.0),
            Vec3::new(0.0, 0.04, 0.01),
            Vec3::new(0.0, -0.04, 0.01),
        ];
        let extra = if symmetric {
            vec![Mat3::from_row_slice(&FLIP_Z)]
        } else {
            vec![]
        };
        ObjectModel::new(pts, extra).unwrap()
    }

    #[test]
    fn evaluate_joins_and_aggregates() {
        let mut models = BTreeMap::new();
        models.insert(1, tiny_model(false));
        models.insert(2, tiny_model(true));
        let t = Vec3::new(0.0, 0.0, 1.0);
        let gt_pose = Pose::new(Mat3::identity(), t);
        let gt = vec![
            InstanceRecord::new(0, 0, 1, &gt_pose),
            InstanceRecord::new(0, 1, 1, &gt_pose),
            InstanceRecord::new(0, 0, 2, &gt_pose),
        ];
        // Object 1: one exact hit, one gross miss. Object 2: a symmetry flip,
        // which ADD-S and the symmetry-aware rotation test both absorb.
        let preds = vec![
            InstanceRecord::new(0, 0, 1, &gt_pose),
            InstanceRecord::new(
                0,
                1,
                1,
                &Pose::new(Mat3::identity(), t + Vec3::new(0.5, 0.0, 0.0)),
            ),
            InstanceRecord::new(0, 0, 2, &Pose::new(Mat3::from_row_slice(&FLIP_Z), t)),
        ];
        let report = evaluate(&preds, &gt, &models).unwrap();
        let m1 = &report.per_object[&1];
        let m2 = &report.per_object[&2];
        assert_eq!(m1.count, 2);
        assert_eq!(m1.add_accuracy, 0.5);
        assert_eq!(m1.acc_2deg2cm, 0.5);
        assert_eq!(m2.count, 1);
        assert_eq!(m2.add_accuracy, 1.0);
        assert_eq!(m2.acc_2deg2cm, 1.0);
        assert_eq!(report.aggregate.count, 3);
        let want_add = (0.5 * 2.0 + 1.0) / 3.0;
        assert!((report.aggregate.add_accuracy - want_add).abs() < 1e-15);
    }

    #[test]
    fn evaluate_reports_mismatches_both_ways() {
        let mut models = BTreeMap::new();
        models.insert(1, tiny_model(false));
        let pose = Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 1.0));
        let gt = vec![
            InstanceRecord::new(0, 0, 1, &pose),
            InstanceRecord::new(0, 9, 1, &pose),
        ];
        let preds = vec![
            InstanceRecord::new(0, 0, 1, &pose),
            InstanceRecord::new(3, 3, 1, &pose),
        ];
        match evaluate(&preds, &gt, &models) {
            Err(MetricError::KeyMismatch(msg)) => {
                assert!(msg.contains("without ground truth"), "{msg}");
                assert!(msg.contains("without prediction"), "{msg}");
            }
            other => panic!("expected KeyMismatch, got {other:?}"),
        }

        let dup = vec![
            InstanceRecord::new(0, 0, 1, &pose),
            InstanceRecord::new(0, 0, 1, &pose),
        ];
        assert!(matches!(
            evaluate(&dup, &gt, &models),
            Err(MetricError::DuplicateKey(0, 0, 1))
        ));
        let missing_model = vec![InstanceRecord::new(0, 0, 9, &pose)];
        let gt9 = vec![InstanceRecord::new(0, 0, 9, &pose)];
        assert!(matches!(
            evaluate(&missing_model, &gt9, &models),
            Err(MetricError::UnknownObject(9))
        ));
    }

    #[test]
    fn manifest_parse_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let ply = "\
ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
end_header
0.05 0 0
-0.05 0 0
0 0.05 0
";
        std::fs::write(dir.path().join("box.ply"), ply).unwrap();
        let manifest = r#"[
            {"obj": 1, "ply": "box.ply", "diameter": 0.1},
            {"obj": 2, "ply": "box.ply", "diameter": 0.1, "symmetric": true,
             "symmetries": [[-1,0,0, 0,-1,0, 0,0,1]]}
        ]"#;
        let path = dir.path().join("models.json");
        std::fs::write(&path, manifest).unwrap();
        let models = load_models(&path).unwrap();
        assert_eq!(models.len(), 2);
        assert!(!models[&1].is_symmetric());
        assert_eq!(models[&1].points.len(), 3);
        assert_eq!(models[&1].symmetries.len(), 1);
        assert!(models[&2].is_symmetric());
        assert_eq!(models[&2].symmetries.len(), 2);
        assert_eq!(models[&2].symmetries[0], Mat3::identity());

        assert!(matches!(
            parse_models_manifest("not json"),
            Err(MetricError::Manifest(_))
        ));
        assert!(matches!(
            parse_models_manifest(r#"[{"obj":1,"ply":"x","diameter":-1.0}]"#),
            Err(MetricError::Manifest(_))
        ));
        let dup = r#"[{"obj":1,"ply":"box.ply","diameter":0.1},
                      {"obj":1,"ply":"box.ply","diameter":0.1}]"#;
        std::fs::write(&path, dup).unwrap();
        assert!(matches!(
            load_models(&path),
            Err(MetricError::DuplicateObject(1))
        ));
    }
}
