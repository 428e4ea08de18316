//! Object-surface keypoint selection by farthest point sampling, plus the
//! model-cloud bookkeeping (diameter, symmetries) the losses and metrics need.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Mat3, Vec3};

/// Default keypoint count; configurable between [`MIN_K`] and [`MAX_K`].
pub const DEFAULT_K: usize = 64;
pub const MIN_K: usize = 8;
pub const MAX_K: usize = 128;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("k = {k} out of range 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("seed index {seed} out of range for {n} points")]
    InvalidSeed { seed: usize, n: usize },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

/// A model point cloud in the object frame with its discrete symmetry group.
/// The identity is always part of `symmetries`. The `symmetric` flag controls
/// loss/metric dispatch and can be set without a finite symmetry list (e.g.
/// for continuous symmetries, which closest-point metrics absorb on their
/// own).
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub points: Vec<Vec3>,
    pub diameter: f64,
    pub symmetric: bool,
    pub symmetries: Vec<Mat3>,
}

impl ObjectModel {
    /// Build a model from points, computing the diameter exactly. Symmetries
    /// beyond the identity are appended to it and mark the model symmetric.
    pub fn new(points: Vec<Vec3>, extra_symmetries: Vec<Mat3>) -> Result<Self, KeypointError> {
        let diameter = model_diameter(&points)?;
        let symmetric = !extra_symmetries.is_empty();
        let mut symmetries = vec![Mat3::identity()];
        symmetries.extend(extra_symmetries);
        Ok(Self {
            points,
            diameter,
            symmetric,
            symmetries,
        })
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Selected surface keypoints; every entry is a member of the source cloud.
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub keypoints: Vec<Vec3>,
}

impl KeypointSet {
    pub fn k(&self) -> usize {
        self.keypoints.len()
    }
}

/// Maximum pairwise distance, brute force. O(n²) — fine for model clouds,
/// which stay well under 10k points.
pub fn model_diameter(points: &[Vec3]) -> Result<f64, KeypointError> {
    if points.len() < 2 {
        return Err(KeypointError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.max((points[i] - points[j]).norm());
        }
    }
    Ok(best)
}

/// Index of the point farthest from the centroid — the default FPS seed.
/// Ties resolve to the lowest index.
pub fn default_seed_index(points: &[Vec3]) -> Result<usize, KeypointError> {
    if points.is_empty() {
        return Err(KeypointError::TooFewPoints { need: 1, got: 0 });
    }
    let centroid: Vec3 = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p - centroid).norm_squared();
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Greedy farthest point sampling: starting from `seed_index`, repeatedly add
/// the point maximizing the minimum distance to the chosen set. Deterministic;
/// ties break to the lowest index.
pub fn farthest_point_sample(
    model: &ObjectModel,
    k: usize,
    seed_index: usize,
) -> Result<KeypointSet, KeypointError> {
    let points = &model.points;
    let n = points.len();
    if k < 1 || k > n {
        return Err(KeypointError::InvalidK { k, n });
    }
    if seed_index >= n {
        return Err(KeypointError::InvalidSeed {
            seed: seed_index,
            n,
        });
    }

    let mut chosen = Vec::with_capacity(k);
    chosen.push(seed_index);
    // Squared min-distance from each point to the chosen set; squared
    // distances order identically to distances and avoid sqrt noise.
    let mut min_d2: Vec<f64> = points
        .iter()
        .map(|p| (p - points[seed_index]).norm_squared())
        .collect();

    while chosen.len() < k {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let nd = (points[i] - points[best]).norm_squared();
            if nd < *d2 {
                *d2 = nd;
            }
        }
    }

    Ok(KeypointSet {
        keypoints: chosen.into_iter().map(|i| points[i]).collect(),
    })
}

/// Serialize keypoints as a JSON list of `[x, y, z]` triples.
pub fn keypoints_to_json(set: &KeypointSet) -> String {
    let rows: Vec<[f64; 3]> = set
        .keypoints
        .iter()
        .map(|p| [p.x, p.y, p.z])
        .collect();
    serde_json::to_string(&rows).expect("keypoint serialization cannot fail")
}

// ---- ASCII PLY reading ----

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("line {line}: not a PLY file (missing 'ply' magic)")]
    BadMagic { line: usize },
    #[error("line {line}: only 'format ascii 1.0' is supported")]
    UnsupportedFormat { line: usize },
    #[error("line {line}: malformed element declaration")]
    BadElement { line: usize },
    #[error("line {line}: list properties are not supported in the vertex element")]
    ListPropertyInVertex { line: usize },
    #[error("line {line}: malformed property declaration")]
    BadProperty { line: usize },
    #[error("header has no vertex element with x, y, z properties")]
    MissingVertexElement,
    #[error("header ended without 'end_header'")]
    TruncatedHeader,
    #[error("line {line}: expected {expected} values, got {got}")]
    WrongValueCount {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: cannot parse '{token}' as a number")]
    BadNumber { line: usize, token: String },
    #[error("body ends early: expected {expected} data lines for element '{element}'")]
    TruncatedBody { element: String, expected: usize },
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

/// Parse an ASCII PLY point cloud, returning the vertex positions.
///
/// Accepts any `element vertex N` whose properties include scalar `x`, `y`,
/// `z`; other vertex properties are parsed and ignored, and non-vertex
/// elements are skipped line by line (one line per element instance).
pub fn parse_ascii_ply(text: &str) -> Result<Vec<Vec3>, PlyError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (line, magic) = lines.next().ok_or(PlyError::BadMagic { line: 1 })?;
    if magic.trim() != "ply" {
        return Err(PlyError::BadMagic { line });
    }

    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_seen = false;
    let mut header_done = false;
    for (line, raw) in lines.by_ref() {
        let l = raw.trim();
        if l.is_empty() || l.starts_with("comment") || l.starts_with("obj_info") {
            continue;
        }
        if l == "end_header" {
            header_done = true;
            break;
        }
        let mut tokens = l.split_whitespace();
        match tokens.next() {
            Some("format") => {
                let rest: Vec<&str> = tokens.collect();
                if rest != ["ascii", "1.0"] {
                    return Err(PlyError::UnsupportedFormat { line });
                }
                format_seen = true;
            }
            Some("element") => {
                let name = tokens.next().ok_or(PlyError::BadElement { line })?;
                let count: usize = tokens
                    .next()
                    .ok_or(PlyError::BadElement { line })?
                    .parse()
                    .map_err(|_| PlyError::BadElement { line })?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or(PlyError::BadProperty { line })?;
                let kind = tokens.next().ok_or(PlyError::BadProperty { line })?;
                if kind == "list" {
                    if element.name == "vertex" {
                        return Err(PlyError::ListPropertyInVertex { line });
                    }
                    // Non-vertex list property: data lines are still skipped
                    // whole, so the inner types don't matter.
                    continue;
                }
                let name = tokens.next().ok_or(PlyError::BadProperty { line })?;
                element.properties.push(name.to_string());
            }
            _ => return Err(PlyError::BadProperty { line }),
        }
    }
    if !header_done {
        return Err(PlyError::TruncatedHeader);
    }
    if !format_seen {
        return Err(PlyError::UnsupportedFormat { line: 1 });
    }

    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or(PlyError::MissingVertexElement)?;
    let coord_idx: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|axis| {
            vertex
                .properties
                .iter()
                .position(|p| p == axis)
                .ok_or(PlyError::MissingVertexElement)
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::new();
    let mut data_lines = lines.filter(|(_, l)| !l.trim().is_empty());
    for element in &elements {
        for _ in 0..element.count {
            let (line, raw) = data_lines.next().ok_or_else(|| PlyError::TruncatedBody {
                element: element.name.clone(),
                expected: element.count,
            })?;
            if element.name != "vertex" {
                continue;
            }
            let tokens: Vec<&str> = raw.split_whitespace().collect();
            if tokens.len() < vertex.properties.len() {
                return Err(PlyError::WrongValueCount {
                    line,
                    expected: vertex.properties.len(),
                    got: tokens.len(),
                });
            }
            let mut xyz = [0.0f64; 3];
            for (axis, &idx) in coord_idx.iter().enumerate() {
                xyz[axis] = tokens[idx].parse().map_err(|_| PlyError::BadNumber {
                    line,
                    token: tokens[idx].to_string(),
                })?;
            }
            points.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
        }
    }
    Ok(points)
}
