//! Synthetic oracle scenes: ground-truth poses, analytically rendered feature
//! pyramids that encode the pose, and crop perturbations. Together these
//! replace the image backbone so the refiner can be trained and verified end
//! to end on a desk.
//!
//! A rendered pyramid stores each visible model point's object-frame
//! coordinates plus inverse depth, splatted at every level and smoothed — a
//! minimal sufficient statistic for the pose, not a claim about real
//! backbones.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    back_project, image_to_crop_px, project, project_keypoints, site_decode, site_encode,
    CameraIntrinsics, CropFrame, GeometryError, Mat3, Pose, Vec2, Vec3, NEAR_PLANE,
};
use crate::keypoints::{
    default_seed_index, farthest_point_sample, KeypointError, ObjectModel,
};
use crate::losses::{self, LossConfig, LossError};
use crate::metrics::{add_distance, MetricError};
use crate::pyramid::{pyramid_to_bytes, FeaturePyramid, PyramidError};
use crate::refiner::{
    cascade, checkpoint_to_bytes, graph, ParamStore, RefinerConfig, RefinerError, RefinerState,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Projected model points must stay within the crop rect inflated by this
/// factor about its center.
pub const CROP_BOUND_FACTOR: f64 = 1.5;

/// Pose draws per scene before the generator gives up.
const MAX_POSE_ATTEMPTS: usize = 64;

/// Crop-perturbation redraws per pose before drawing a fresh pose.
const MAX_DZI_ATTEMPTS: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad synth config: {0}")]
    BadConfig(String),
    #[error("scene generation failed: {0}")]
    SceneGeneration(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Keypoints(#[from] KeypointError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Refiner(#[from] RefinerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

// ---- pose sampling ----

/// Camera viewing volume the generator draws object centers from: the image
/// rect shrunk by `margin_frac` per side, lifted to a depth range.
#[derive(Debug, Clone, Copy)]
pub struct Frustum {
    pub intrinsics: CameraIntrinsics,
    pub image_size: [f64; 2],
    pub margin_frac: f64,
}

/// Rotation uniform on SO(3) via Shoemake's unit-quaternion construction.
pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let u3: f64 = rng.random();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (std::f64::consts::TAU * u2).sin_cos();
    let (s3, c3) = (std::f64::consts::TAU * u3).sin_cos();
    let q = Quaternion::new(b * c3, a * s2, a * c2, b * s3);
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Uniform rotation plus a translation uniform over (pixel, depth) inside the
/// frustum. Draw order: rotation, depth, pixel x, pixel y.
pub fn random_pose(rng: &mut impl Rng, depth_range: (f64, f64), frustum: &Frustum) -> Pose {
    let rotation = random_rotation(rng);
    let z = rng.random_range(depth_range.0..=depth_range.1);
    let mx = frustum.margin_frac * frustum.image_size[0];
    let my = frustum.margin_frac * frustum.image_size[1];
    let u = rng.random_range(mx..=frustum.image_size[0] - mx);
    let v = rng.random_range(my..=frustum.image_size[1] - my);
    let translation = back_project(&Vec2::new(u, v), z, &frustum.intrinsics);
    Pose::new(rotation, translation)
}

// ---- crop perturbations ----

/// Dynamic zoom-in ranges: detector noise applied to the crop during
/// training. Defaults follow the usual ±25% shift, 0.8–1.25 scale convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DziConfig {
    pub shift_frac: f64,
    pub scale_range: (f64, f64),
}

impl Default for DziConfig {
    fn default() -> Self {
        Self {
            shift_frac: 0.25,
            scale_range: (0.8, 1.25),
        }
    }
}

/// Shift the crop center by up to `shift_frac`·s_bbox per axis and rescale
/// s_bbox; the output crop is square. Draw order: dx, dy, scale.
pub fn dzi_perturb(crop: &CropFrame, rng: &mut impl Rng, cfg: &DziConfig) -> CropFrame {
    let s = crop.s_bbox();
    let dx = rng.random_range(-cfg.shift_frac..=cfg.shift_frac) * s;
    let dy = rng.random_range(-cfg.shift_frac..=cfg.shift_frac) * s;
    let scale = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    CropFrame::new(
        [crop.center[0] + dx, crop.center[1] + dy],
        s * scale,
        s * scale,
        crop.s_image,
    )
}

/// Scale both bbox sides about a fixed center.
pub fn enlarge_bbox(crop: &CropFrame, factor: f64) -> CropFrame {
    CropFrame::new(
        crop.center,
        crop.width * factor,
        crop.height * factor,
        crop.s_image,
    )
}

// ---- oracle pyramid rendering ----

/// Shape of a rendered pyramid. Level `l` is a square raster of
/// `base_resolution >> l` cells; `channels` ≥ 4 because the first four carry
/// object coordinates and inverse depth, and the rest are a fixed seeded
/// linear mix of those four (same coefficients for every scene and level).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidSpec {
    pub levels: usize,
    pub channels: usize,
    pub base_resolution: usize,
    pub mix_seed: u64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            channels: 16,
            base_resolution: 16,
            mix_seed: 17,
        }
    }
}

impl PyramidSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.levels == 0 {
            return Err(SynthError::BadConfig("pyramid needs at least one level".into()));
        }
        if self.channels < 4 {
            return Err(SynthError::BadConfig(format!(
                "pyramid needs >= 4 channels, got {}",
                self.channels
            )));
        }
        if self.base_resolution >> (self.levels - 1) == 0 {
            return Err(SynthError::BadConfig(format!(
                "base resolution {} vanishes before level {}",
                self.base_resolution,
                self.levels - 1
            )));
        }
        Ok(())
    }
}

/// Nearest-cell splat of `(crop position, 4-channel value)` sites into a
/// `res`×`res`×4 raster with cell size `stride`; colliding sites are
/// averaged, sites outside the raster are dropped.
pub(crate) fn splat_level(sites: &[(Vec2, [f64; 4])], res: usize, stride: f64) -> Vec<f64> {
    let mut sums = vec![0.0; res * res * 4];
    let mut counts = vec![0u32; res * res];
    for (q, v) in sites {
        let cx = (q.x / stride).floor();
        let cy = (q.y / stride).floor();
        if !(cx >= 0.0 && cy >= 0.0 && cx < res as f64 && cy < res as f64) {
            continue;
        }
        let cell = cy as usize * res + cx as usize;
        counts[cell] += 1;
        for (ch, value) in v.iter().enumerate() {
            sums[cell * 4 + ch] += value;
        }
    }
    for cell in 0..res * res {
        if counts[cell] > 1 {
            let inv = counts[cell] as f64;
            for ch in 0..4 {
                sums[cell * 4 + ch] /= inv;
            }
        }
    }
    sums
}

/// Separable 3-tap [0.25, 0.5, 0.25] pass (horizontal then vertical) with
/// zero padding, per channel.
pub(crate) fn smooth_raster(raster: &[f64], res: usize, channels: usize) -> Vec<f64> {
    let idx = |y: usize, x: usize, ch: usize| (y * res + x) * channels + ch;
    let mut horiz = vec![0.0; raster.len()];
    for y in 0..res {
        for x in 0..res {
            for ch in 0..channels {
                let mut acc = 0.5 * raster[idx(y, x, ch)];
                if x > 0 {
                    acc += 0.25 * raster[idx(y, x - 1, ch)];
                }
                if x + 1 < res {
                    acc += 0.25 * raster[idx(y, x + 1, ch)];
                }
                horiz[idx(y, x, ch)] = acc;
            }
        }
    }
    let mut out = vec![0.0; raster.len()];
    for y in 0..res {
        for x in 0..res {
            for ch in 0..channels {
                let mut acc = 0.5 * horiz[idx(y, x, ch)];
                if y > 0 {
                    acc += 0.25 * horiz[idx(y - 1, x, ch)];
                }
                if y + 1 < res {
                    acc += 0.25 * horiz[idx(y + 1, x, ch)];
                }
                out[idx(y, x, ch)] = acc;
            }
        }
    }
    out
}

/// Mixing coefficients for channels 4..C, uniform in (−1, 1), drawn row by
/// row from a dedicated generator so they never depend on the scene.
fn mix_matrix(spec: &PyramidSpec) -> Vec<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.mix_seed);
    (4..spec.channels)
        .map(|_| {
            let mut row = [0.0; 4];
            for v in &mut row {
                *v = rng.random_range(-1.0..1.0);
            }
            row
        })
        .collect()
}

fn expand_channels(base: &[f64], res: usize, channels: usize, mix: &[[f64; 4]]) -> Tensor {
    let mut data = vec![0.0; res * res * channels];
    for cell in 0..res * res {
        let b = &base[cell * 4..cell * 4 + 4];
        let out = &mut data[cell * channels..(cell + 1) * channels];
        out[..4].copy_from_slice(b);
        for (i, row) in mix.iter().enumerate() {
            out[4 + i] = row[0] * b[0] + row[1] * b[1] + row[2] * b[2] + row[3] * b[3];
        }
    }
    Tensor::new(&[res, res, channels], data)
}

/// Deterministic pure function of (model, pose, crop, spec): splat visible
/// points' object coordinates and inverse depth per level, smooth, mix.
/// Points behind the camera or beyond the crop rect are simply not splatted;
/// scene invariants keep generated scenes fully visible.
pub fn render_feature_pyramid(
    model: &ObjectModel,
    gt_pose: &Pose,
    crop: &CropFrame,
    k_cam: &CameraIntrinsics,
    spec: &PyramidSpec,
) -> Result<FeaturePyramid, SynthError> {
    spec.validate()?;
    crop.validate()?;
    let s = crop.s_bbox();
    let mut sites = Vec::with_capacity(model.points.len());
    for p_obj in &model.points {
        let p_cam = gt_pose.transform_point(p_obj);
        if p_cam.z <= NEAR_PLANE {
            continue;
        }
        let img = Vec2::new(
            k_cam.fx * p_cam.x / p_cam.z + k_cam.cx,
            k_cam.fy * p_cam.y / p_cam.z + k_cam.cy,
        );
        let q = image_to_crop_px(&img, crop);
        sites.push((q, [p_obj.x, p_obj.y, p_obj.z, 1.0 / p_cam.z]));
    }
    let mix = mix_matrix(spec);
    let mut levels = Vec::with_capacity(spec.levels);
    for l in 0..spec.levels {
        let res = spec.base_resolution >> l;
        let stride = s / res as f64;
        let splat = splat_level(&sites, res, stride);
        let smooth = smooth_raster(&splat, res, 4);
        levels.push(expand_channels(&smooth, res, spec.channels, &mix));
    }
    Ok(FeaturePyramid::new(levels, s)?)
}

// ---- scene generation ----

/// One synthetic observation: an object with known pose, the crop a detector
/// would have produced, and the oracle pyramid rendered for that crop.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub model: ObjectModel,
    pub gt_pose: Pose,
    pub crop: CropFrame,
    pub k_cam: CameraIntrinsics,
    pub pyramid: FeaturePyramid,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SceneConfig {
    pub intrinsics: CameraIntrinsics,
    pub image_size: [f64; 2],
    pub s_image: f64,
    pub depth_range: (f64, f64),
    pub margin_frac: f64,
    pub bbox_enlarge: f64,
    /// Crop perturbation; `None` yields the clean enlarged detector box.
    pub dzi: Option<DziConfig>,
    pub pyramid: PyramidSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 600.0,
                fy: 600.0,
                cx: 320.0,
                cy: 240.0,
            },
            image_size: [640.0, 480.0],
            s_image: 640.0,
            depth_range: (0.5, 1.2),
            margin_frac: 0.2,
            bbox_enlarge: 1.2,
            dzi: None,
            pyramid: PyramidSpec::default(),
        }
    }
}

/// True when every projected point lies within the crop rect inflated by
/// `factor` about its center.
pub fn within_inflated_crop(projected: &[Vec2], crop: &CropFrame, factor: f64) -> bool {
    let half = 0.5 * factor * crop.s_bbox();
    projected
        .iter()
        .all(|p| (p.x - crop.center[0]).abs() <= half && (p.y - crop.center[1]).abs() <= half)
}

impl SynthScene {
    /// Ground truth in the refiner's internal representation.
    pub fn gt_state(&self) -> Result<RefinerState, SynthError> {
        let center = project(&self.gt_pose.translation, &self.k_cam)?;
        let gamma = site_encode(&center, self.gt_pose.translation.z, &self.crop)?;
        Ok(RefinerState {
            rotation: self.gt_pose.rotation,
            gamma,
        })
    }

    /// Everything the generator promises: valid pose and crop, all points in
    /// front of the camera and within the inflated crop rect, site encoding
    /// round-trips, and the pyramid is registered to this crop.
    pub fn check_invariants(&self) -> Result<(), SynthError> {
        self.crop.validate()?;
        if !self.gt_pose.is_valid(1e-9) {
            return Err(SynthError::SceneGeneration(
                "ground-truth pose violates rotation invariants".into(),
            ));
        }
        let projected = project_keypoints(&self.model.points, &self.gt_pose, &self.k_cam)?;
        if !within_inflated_crop(&projected, &self.crop, CROP_BOUND_FACTOR) {
            return Err(SynthError::SceneGeneration(format!(
                "projected points escape {CROP_BOUND_FACTOR}x crop bounds"
            )));
        }
        let center = project(&self.gt_pose.translation, &self.k_cam)?;
        let site = site_encode(&center, self.gt_pose.translation.z, &self.crop)?;
        let (o, t_z) = site_decode(&site, &self.crop)?;
        let tol_px = 1e-9 * self.crop.s_bbox().max(1.0);
        if (o - center).norm() > tol_px
            || (t_z - self.gt_pose.translation.z).abs() > 1e-9 * self.gt_pose.translation.z.max(1.0)
        {
            return Err(SynthError::SceneGeneration(
                "site encoding does not round-trip".into(),
            ));
        }
        if self.pyramid.crop_size() != self.crop.s_bbox() {
            return Err(SynthError::SceneGeneration(
                "pyramid crop size disagrees with the crop".into(),
            ));
        }
        Ok(())
    }

    pub fn sidecar(&self) -> SceneSidecar {
        let r: Vec<f64> = self
            .gt_pose
            .rotation
            .row_iter()
            .flat_map(|row| row.iter().copied().collect::<Vec<_>>())
            .collect();
        SceneSidecar {
            r,
            t: vec![
                self.gt_pose.translation.x,
                self.gt_pose.translation.y,
                self.gt_pose.translation.z,
            ],
            crop: self.crop,
            intrinsics: self.k_cam,
            seed: self.rng_seed,
        }
    }
}

/// Draw poses (and crop perturbations) until every invariant holds, then
/// render the pyramid. Deterministic per `seed`.
pub fn generate_scene(
    model: &ObjectModel,
    seed: u64,
    config: &SceneConfig,
) -> Result<SynthScene, SynthError> {
    config.pyramid.validate()?;
    if !(config.bbox_enlarge > 0.0) {
        return Err(SynthError::BadConfig(format!(
            "bbox enlargement {} must be positive",
            config.bbox_enlarge
        )));
    }
    let frustum = Frustum {
        intrinsics: config.intrinsics,
        image_size: config.image_size,
        margin_frac: config.margin_frac,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_POSE_ATTEMPTS {
        let pose = random_pose(&mut rng, config.depth_range, &frustum);
        let Ok(projected) = project_keypoints(&model.points, &pose, &config.intrinsics) else {
            continue;
        };
        let (mut lo, mut hi) = (projected[0], projected[0]);
        for p in &projected[1..] {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !(hi.x - lo.x > 1e-9 || hi.y - lo.y > 1e-9) {
            continue;
        }
        let tight = CropFrame::new(
            [0.5 * (lo.x + hi.x), 0.5 * (lo.y + hi.y)],
            hi.x - lo.x,
            hi.y - lo.y,
            config.s_image,
        );
        let detector_box = enlarge_bbox(&tight, config.bbox_enlarge);
        let crop = match &config.dzi {
            None => detector_box,
            Some(dzi) => {
                let mut accepted = None;
                for _ in 0..MAX_DZI_ATTEMPTS {
                    let candidate = dzi_perturb(&detector_box, &mut rng, dzi);
                    if within_inflated_crop(&projected, &candidate, CROP_BOUND_FACTOR) {
                        accepted = Some(candidate);
                        break;
                    }
                }
                match accepted {
                    Some(c) => c,
                    None => continue,
                }
            }
        };
        if !within_inflated_crop(&projected, &crop, CROP_BOUND_FACTOR) {
            continue;
        }
        let pyramid =
            render_feature_pyramid(model, &pose, &crop, &config.intrinsics, &config.pyramid)?;
        let scene = SynthScene {
            model: model.clone(),
            gt_pose: pose,
            crop,
            k_cam: config.intrinsics,
            pyramid,
            rng_seed: seed,
        };
        scene.check_invariants()?;
        return Ok(scene);
    }
    Err(SynthError::SceneGeneration(format!(
        "no acceptable pose after {MAX_POSE_ATTEMPTS} draws (seed {seed})"
    )))
}

// ---- scene dump ----

/// JSON sidecar stored next to a dumped pyramid: ground-truth pose (row-major
/// rotation), crop, intrinsics, and the scene seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub crop: CropFrame,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

pub fn sidecar_from_json(text: &str) -> Result<SceneSidecar, serde_json::Error> {
    serde_json::from_str(text)
}

/// Write the pyramid in its binary file format plus the JSON sidecar.
pub fn dump_scene(
    scene: &SynthScene,
    pyramid_path: &Path,
    sidecar_path: &Path,
) -> Result<(), SynthError> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    fs::write(pyramid_path, pyramid_to_bytes(&scene.pyramid)).map_err(io_err(pyramid_path))?;
    let sidecar = serde_json::to_string_pretty(&scene.sidecar())
        .expect("sidecar serialization cannot fail");
    fs::write(sidecar_path, sidecar).map_err(io_err(sidecar_path))?;
    Ok(())
}

// ---- toy training ----

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub refiner: RefinerConfig,
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global-norm gradient clip; `f64::INFINITY` disables clipping.
    pub max_grad_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// 1 runs scene gradients sequentially; more uses a local thread pool
    /// with an ordered reduction, so results are identical either way.
    pub threads: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.refiner.validate()?;
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SynthError::BadConfig(format!(
                "alpha {} must be positive and finite",
                self.alpha
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SynthError::BadConfig(format!(
                "learning rate {} must be non-negative and finite",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SynthError::BadConfig(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(SynthError::BadConfig(format!(
                "gradient clip {} must be positive",
                self.max_grad_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(SynthError::BadConfig("batch size must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(SynthError::BadConfig("thread count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Batch-mean total loss per optimizer step.
    pub loss_trace: Vec<f64>,
}

/// Full-cascade loss and parameter gradient for one scene.
/// Total cascade loss for one scene, evaluated without recording a tape.
/// Serves as the independent forward path for finite-difference checks.
pub fn scene_loss(
    params: &ParamStore,
    scene: &SynthScene,
    keypoints: &[Vec3],
    config: &RefinerConfig,
    loss_cfg: &LossConfig,
) -> Result<f64, SynthError> {
    let gt = scene.gt_state()?;
    let trace = cascade(
        config,
        params,
        &scene.pyramid,
        keypoints,
        &scene.crop,
        &scene.k_cam,
    )?;
    Ok(losses::total_loss(
        &trace.states,
        &gt,
        &scene.model,
        loss_cfg,
    )?)
}

/// Total cascade loss for one scene together with its gradient with respect
/// to every entry of the parameter store, in `ParamStore::data` order.
pub fn scene_gradient(
    params: &ParamStore,
    scene: &SynthScene,
    keypoints: &[Vec3],
    config: &RefinerConfig,
    loss_cfg: &LossConfig,
) -> Result<(f64, Vec<f64>), SynthError> {
    let gt = scene.gt_state()?;
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let consts =
        graph::SceneConsts::build(&mut tape, &scene.pyramid, keypoints, &scene.crop, &scene.k_cam);
    let g = graph::cascade_t(&mut tape, &vars, config, &consts, &scene.pyramid)?;
    let loss = losses::total_loss_t(&mut tape, &g.states, &gt, &scene.model, loss_cfg)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss);
    Ok((value, params.gradient_vector(&grads, &vars)))
}

/// A cascade walking into a degenerate rotation mid-training means the
/// parameters blew up; report it as divergence rather than a geometry bug.
fn training_error(e: SynthError, step: usize) -> SynthError {
    use GeometryError::{DegenerateDirection, DegenerateRotation};
    match &e {
        SynthError::Refiner(RefinerError::Geometry(DegenerateRotation | DegenerateDirection))
        | SynthError::Geometry(DegenerateRotation | DegenerateDirection) => {
            SynthError::DivergenceDetected {
                step,
                loss: f64::NAN,
            }
        }
        _ => e,
    }
}

fn check_scene_shapes(
    config: &RefinerConfig,
    scenes: &[SynthScene],
    keypoints: &[Vec3],
) -> Result<(), SynthError> {
    if keypoints.len() != config.keypoints {
        return Err(SynthError::BadConfig(format!(
            "{} keypoints for a refiner expecting {}",
            keypoints.len(),
            config.keypoints
        )));
    }
    for scene in scenes {
        if scene.pyramid.num_levels() != config.levels
            || scene.pyramid.channels() != config.channels
        {
            return Err(SynthError::BadConfig(format!(
                "scene pyramid {}x{} does not match refiner {}x{} (levels x channels)",
                scene.pyramid.num_levels(),
                scene.pyramid.channels(),
                config.levels,
                config.channels
            )));
        }
    }
    Ok(())
}

/// Minibatch SGD with momentum over the cascade's total loss. Batches walk
/// the scene list round-robin; the λ schedule follows training progress
/// `step / steps`. Deterministic for any thread count: per-scene gradients
/// may be computed in parallel but are reduced in batch order.
pub fn toy_train(
    params: &mut ParamStore,
    scenes: &[SynthScene],
    keypoints: &[Vec3],
    cfg: &TrainConfig,
) -> Result<TrainReport, SynthError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(SynthError::BadConfig("no training scenes".into()));
    }
    check_scene_shapes(&cfg.refiner, scenes, keypoints)?;
    let pool = if cfg.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| SynthError::BadConfig(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };
    let n = scenes.len();
    let batch_size = cfg.batch_size.min(n);
    let mut velocity = vec![0.0; params.len()];
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if params.data().iter().any(|v| !v.is_finite()) {
            return Err(SynthError::DivergenceDetected {
                step,
                loss: f64::NAN,
            });
        }
        let progress = step as f64 / cfg.steps as f64;
        let loss_cfg = LossConfig::scheduled(cfg.alpha, cfg.refiner.steps, progress)?;
        let batch: Vec<usize> = (0..batch_size)
            .map(|j| (step * batch_size + j) % n)
            .collect();
        let results: Vec<Result<(f64, Vec<f64>), SynthError>> = match &pool {
            Some(pool) => pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| scene_gradient(params, &scenes[i], keypoints, &cfg.refiner, &loss_cfg))
                    .collect()
            }),
            None => batch
                .iter()
                .map(|&i| scene_gradient(params, &scenes[i], keypoints, &cfg.refiner, &loss_cfg))
                .collect(),
        };
        let mut usable = 0usize;
        let mut batch_loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for r in results {
            match r {
                Ok((value, g)) => {
                    usable += 1;
                    batch_loss += value;
                    for (acc, gi) in grad.iter_mut().zip(&g) {
                        *acc += gi;
                    }
                }
                // A scene whose current estimate left the viewing volume is
                // skipped for this step: no gradient, recoverable once the
                // shared parameters move. Everything else is fatal.
                Err(e) => match training_error(e, step) {
                    SynthError::Refiner(RefinerError::Geometry(
                        GeometryError::BehindCamera { .. },
                    )) => {}
                    fatal => return Err(fatal),
                },
            }
        }
        if usable == 0 {
            return Err(SynthError::DivergenceDetected {
                step,
                loss: f64::NAN,
            });
        }
        let inv = 1.0 / usable as f64;
        batch_loss *= inv;
        if !batch_loss.is_finite() {
            return Err(SynthError::DivergenceDetected {
                step,
                loss: batch_loss,
            });
        }
        trace.push(batch_loss);
        let norm = grad.iter().map(|g| (g * inv) * (g * inv)).sum::<f64>().sqrt();
        let clip = if norm > cfg.max_grad_norm {
            cfg.max_grad_norm / norm
        } else {
            1.0
        };
        let data = params.data_mut();
        for i in 0..data.len() {
            velocity[i] = cfg.momentum * velocity[i] + grad[i] * inv * clip;
            data[i] -= cfg.learning_rate * velocity[i];
        }
    }
    Ok(TrainReport { loss_trace: trace })
}

// ---- demo orchestration ----

/// Box dimensions (meters) of the demo object.
const DEMO_BOX_DIMS: [f64; 3] = [0.10, 0.07, 0.04];

/// Seed for the demo object's surface cloud; fixed so the object is the same
/// dataset regardless of the run seed.
const DEMO_MODEL_SEED: u64 = 11;

/// Deterministic area-weighted surface sample of a box. The cloud has no
/// exact symmetries, so plain ADD is a faithful error measure for it.
pub fn demo_object_model(n_points: usize, seed: u64) -> Result<ObjectModel, SynthError> {
    if n_points < 2 {
        return Err(SynthError::BadConfig(format!(
            "demo model needs >= 2 points, got {n_points}"
        )));
    }
    let half = [
        0.5 * DEMO_BOX_DIMS[0],
        0.5 * DEMO_BOX_DIMS[1],
        0.5 * DEMO_BOX_DIMS[2],
    ];
    // Face area per axis pair; each axis owns two opposite faces.
    let areas = [
        DEMO_BOX_DIMS[1] * DEMO_BOX_DIMS[2],
        DEMO_BOX_DIMS[0] * DEMO_BOX_DIMS[2],
        DEMO_BOX_DIMS[0] * DEMO_BOX_DIMS[1],
    ];
    let total: f64 = 2.0 * (areas[0] + areas[1] + areas[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 5;
        for i in 0..6 {
            let a = areas[i / 2];
            if pick < a {
                face = i;
                break;
            }
            pick -= a;
        }
        let axis = face / 2;
        let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut p = [0.0; 3];
        p[axis] = sign * half[axis];
        p[a1] = rng.random_range(-half[a1]..half[a1]);
        p[a2] = rng.random_range(-half[a2]..half[a2]);
        points.push(Vec3::new(p[0], p[1], p[2]));
    }
    Ok(ObjectModel::new(points, Vec::new())?)
}

/// Refiner sized for the demo: narrow model width, 16 keypoints, 16-channel
/// pyramids, 3 refinement steps.
pub fn demo_refiner_config() -> RefinerConfig {
    RefinerConfig {
        keypoints: 16,
        channels: 16,
        ..RefinerConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub holdout_scenes: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub threads: usize,
    pub model_points: usize,
    pub refiner: RefinerConfig,
    pub scene: SceneConfig,
}

impl Default for DemoConfig {
    /// Tuned so the trained cascade improves held-out ADD monotonically with
    /// the first refinement dominating, in minutes on one core. Fewer scenes
    /// overfit the later refiners; larger clipped steps oscillate.
    fn default() -> Self {
        Self {
            seed: 1,
            train_scenes: 512,
            holdout_scenes: 32,
            steps: 8000,
            learning_rate: 0.005,
            momentum: 0.9,
            max_grad_norm: 1.0,
            batch_size: 8,
            alpha: 3.0,
            threads: 1,
            model_points: 256,
            refiner: demo_refiner_config(),
            scene: SceneConfig {
                dzi: Some(DziConfig::default()),
                ..SceneConfig::default()
            },
        }
    }
}

/// Held-out error of one cascade iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    pub mean_add: f64,
    pub mean_geodesic_deg: f64,
}

fn geodesic_deg(r_pred: &Mat3, r_gt: &Mat3) -> f64 {
    let c = ((r_pred.transpose() * r_gt).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Mean ADD and rotation geodesic per cascade iteration over a scene set.
pub fn evaluate_cascade(
    config: &RefinerConfig,
    params: &ParamStore,
    scenes: &[SynthScene],
    keypoints: &[Vec3],
) -> Result<Vec<IterationMetrics>, SynthError> {
    if scenes.is_empty() {
        return Err(SynthError::BadConfig("no evaluation scenes".into()));
    }
    let iters = config.steps + 1;
    let mut add = vec![0.0; iters];
    let mut geo = vec![0.0; iters];
    for scene in scenes {
        let trace = cascade(
            config,
            params,
            &scene.pyramid,
            keypoints,
            &scene.crop,
            &scene.k_cam,
        )?;
        for (i, pose) in trace.poses.iter().enumerate() {
            add[i] += add_distance(pose, &scene.gt_pose, &scene.model.points)?;
            geo[i] += geodesic_deg(&pose.rotation, &scene.gt_pose.rotation);
        }
    }
    let inv = 1.0 / scenes.len() as f64;
    Ok((0..iters)
        .map(|i| IterationMetrics {
            mean_add: add[i] * inv,
            mean_geodesic_deg: geo[i] * inv,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct DemoReport {
    /// Held-out metrics per cascade iteration, coarse first.
    pub iterations: Vec<IterationMetrics>,
    pub loss_trace: Vec<f64>,
    /// Serialized trained checkpoint.
    pub checkpoint: Vec<u8>,
}

/// Generate train/holdout scenes, train the cascade, and measure per-iteration
/// held-out error. Deterministic in `cfg.seed` for any thread count.
pub fn run_demo(cfg: &DemoConfig) -> Result<DemoReport, SynthError> {
    if cfg.train_scenes == 0 || cfg.holdout_scenes == 0 {
        return Err(SynthError::BadConfig(
            "demo needs at least one train and one holdout scene".into(),
        ));
    }
    if cfg.scene.pyramid.levels != cfg.refiner.levels
        || cfg.scene.pyramid.channels != cfg.refiner.channels
    {
        return Err(SynthError::BadConfig(
            "scene pyramid shape must match the refiner config".into(),
        ));
    }
    let model = demo_object_model(cfg.model_points, DEMO_MODEL_SEED)?;
    let kps = farthest_point_sample(&model, cfg.refiner.keypoints, default_seed_index(&model.points)?)?;

    // One master stream fixes every downstream seed: params, train, holdout.
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let param_seed: u64 = master.random();
    let train_seeds: Vec<u64> = (0..cfg.train_scenes).map(|_| master.random()).collect();
    let holdout_seeds: Vec<u64> = (0..cfg.holdout_scenes).map(|_| master.random()).collect();

    let holdout_cfg = SceneConfig {
        dzi: None,
        ..cfg.scene
    };
    let train: Vec<SynthScene> = train_seeds
        .iter()
        .map(|&s| generate_scene(&model, s, &cfg.scene))
        .collect::<Result<_, _>>()?;
    let holdout: Vec<SynthScene> = holdout_seeds
        .iter()
        .map(|&s| generate_scene(&model, s, &holdout_cfg))
        .collect::<Result<_, _>>()?;

    let mut params = ParamStore::init(&cfg.refiner, param_seed);
    let train_cfg = TrainConfig {
        refiner: cfg.refiner.clone(),
        alpha: cfg.alpha,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        max_grad_norm: cfg.max_grad_norm,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        threads: cfg.threads,
    };
    let report = toy_train(&mut params, &train, &kps.keypoints, &train_cfg)?;
    let iterations = evaluate_cascade(&cfg.refiner, &params, &holdout, &kps.keypoints)?;
    Ok(DemoReport {
        iterations,
        loss_trace: report.loss_trace,
        checkpoint: checkpoint_to_bytes(&cfg.refiner, &params),
    })
}
