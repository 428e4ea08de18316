//! Cascaded pose refinement: a coarse pose head followed by N attention-based
//! refinement steps over surface-keypoint features.
//!
//! Each step decodes the current pose, projects the keypoints into the crop,
//! gathers pyramid features at those positions, and runs
//! self-attention → multi-scale deformable attention → self-attention → a
//! pooled pose head that emits a relative correction. The deformable-attention
//! output is recycled as the next step's query.
//!
//! The forward pass is implemented once, as tape graph builders (`graph`);
//! the public functions here run a tape and read values off it, so training
//! gradients and inference can never disagree.

pub(crate) mod graph;
pub mod params;

pub use params::{
    checkpoint_from_bytes, checkpoint_to_bytes, CheckpointError, ParamEntry, ParamStore,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    CameraIntrinsics, CropFrame, GeometryError, Mat3, Pose, PoseOffset, Rotation6D,
    SiteTranslation, Vec2, Vec3,
};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture of the cascade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Embedding width.
    pub d_model: usize,
    /// Attention heads.
    pub heads: usize,
    /// Deformable sampling points per level, per head.
    pub points: usize,
    /// Pyramid levels.
    pub levels: usize,
    /// Keypoints per object.
    pub keypoints: usize,
    /// Refinement steps in the cascade.
    pub steps: usize,
    /// Sine/cosine frequency pairs per axis; must equal `d_model / 4`.
    pub pos_embed_freqs: usize,
    /// Pyramid feature channels.
    pub channels: usize,
    /// Reuse one parameter set for every step instead of per-step sets.
    #[serde(default)]
    pub shared_steps: bool,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 8,
            points: 4,
            levels: 4,
            keypoints: 64,
            steps: 3,
            pos_embed_freqs: 8,
            channels: 32,
            shared_steps: false,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<(), RefinerError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(RefinerError::BadConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(RefinerError::BadWidth(self.d_model));
        }
        if self.pos_embed_freqs * 4 != self.d_model {
            return Err(RefinerError::BadConfig(format!(
                "pos_embed_freqs {} must equal d_model/4 = {}",
                self.pos_embed_freqs,
                self.d_model / 4
            )));
        }
        if self.points == 0 || self.levels == 0 || self.keypoints == 0 || self.channels == 0 {
            return Err(RefinerError::BadConfig(
                "points, levels, keypoints, and channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of distinct per-step parameter sets the store carries.
    pub fn step_param_sets(&self) -> usize {
        if self.shared_steps {
            self.steps.min(1)
        } else {
            self.steps
        }
    }
}

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error("invalid refiner config: {0}")]
    BadConfig(String),
    #[error("embedding width {0} is not divisible by 4")]
    BadWidth(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene does not match the refiner config: {0}")]
    SceneMismatch(String),
    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Internal pose representation the cascade iterates on: an egocentric
/// rotation plus the crop-normalized translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerState {
    pub rotation: Mat3,
    pub gamma: SiteTranslation,
}

impl RefinerState {
    pub fn to_pose(&self, crop: &CropFrame, k: &CameraIntrinsics) -> Result<Pose, GeometryError> {
        crate::geometry::assemble_pose(&self.rotation, &self.gamma, crop, k)
    }
}

/// A query matrix paired with the positional embedding that was added to it
/// inside the step's first attention.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub q: Tensor,
    pub embed: Tensor,
}

/// Every intermediate result of a cascade evaluation.
#[derive(Debug, Clone)]
pub struct CascadeTrace {
    /// Internal states, coarse first; length `steps + 1`.
    pub states: Vec<RefinerState>,
    /// Decoded metric poses, one per state.
    pub poses: Vec<Pose>,
    /// Query per iteration (the learnable initial query first).
    pub queries: Vec<Tensor>,
    /// Raw pose correction emitted by each refinement step.
    pub offsets: Vec<PoseOffset>,
}

// ---- weight bundles for the standalone blocks ----

#[derive(Debug, Clone)]
pub struct SelfAttnWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl SelfAttnWeights {
    /// Pull one attention block's tensors out of a store, e.g. prefix
    /// `"step0.attn1"`.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        Self {
            wq: store.tensor(&format!("{prefix}.wq")),
            wk: store.tensor(&format!("{prefix}.wk")),
            wv: store.tensor(&format!("{prefix}.wv")),
            wo: store.tensor(&format!("{prefix}.wo")),
            ln_gain: store.tensor(&format!("{prefix}.ln_gain")),
            ln_bias: store.tensor(&format!("{prefix}.ln_bias")),
        }
    }

    fn validate(&self, d: usize) -> Result<(), RefinerError> {
        expect_shape(&self.wq, &[d, d], "wq")?;
        expect_shape(&self.wk, &[d, d], "wk")?;
        expect_shape(&self.wv, &[d, d], "wv")?;
        expect_shape(&self.wo, &[d, d], "wo")?;
        expect_shape(&self.ln_gain, &[d], "ln_gain")?;
        expect_shape(&self.ln_bias, &[d], "ln_bias")
    }

    fn leaves(&self, tape: &mut Tape) -> graph::AttnVars {
        graph::AttnVars {
            wq: tape.leaf(self.wq.clone()),
            wk: tape.leaf(self.wk.clone()),
            wv: tape.leaf(self.wv.clone()),
            wo: tape.leaf(self.wo.clone()),
            ln_gain: tape.leaf(self.ln_gain.clone()),
            ln_bias: tape.leaf(self.ln_bias.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeformWeights {
    pub off_w: Tensor,
    pub off_b: Tensor,
    pub att_w: Tensor,
    pub att_b: Tensor,
    pub val_w: Tensor,
    pub out_w: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

impl DeformWeights {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        Self {
            off_w: store.tensor(&format!("{prefix}.off_w")),
            off_b: store.tensor(&format!("{prefix}.off_b")),
            att_w: store.tensor(&format!("{prefix}.att_w")),
            att_b: store.tensor(&format!("{prefix}.att_b")),
            val_w: store.tensor(&format!("{prefix}.val_w")),
            out_w: store.tensor(&format!("{prefix}.out_w")),
            ln_gain: store.tensor(&format!("{prefix}.ln_gain")),
            ln_bias: store.tensor(&format!("{prefix}.ln_bias")),
        }
    }

    fn validate(&self, config: &RefinerConfig) -> Result<(), RefinerError> {
        let (d, c) = (config.d_model, config.channels);
        let hlj = config.heads * config.levels * config.points;
        expect_shape(&self.off_w, &[d, hlj * 2], "off_w")?;
        expect_shape(&self.off_b, &[hlj * 2], "off_b")?;
        expect_shape(&self.att_w, &[d, hlj], "att_w")?;
        expect_shape(&self.att_b, &[hlj], "att_b")?;
        expect_shape(&self.val_w, &[c, d], "val_w")?;
        expect_shape(&self.out_w, &[d, d], "out_w")?;
        expect_shape(&self.ln_gain, &[d], "ln_gain")?;
        expect_shape(&self.ln_bias, &[d], "ln_bias")
    }

    fn leaves(&self, tape: &mut Tape) -> graph::DeformVars {
        graph::DeformVars {
            off_w: tape.leaf(self.off_w.clone()),
            off_b: tape.leaf(self.off_b.clone()),
            att_w: tape.leaf(self.att_w.clone()),
            att_b: tape.leaf(self.att_b.clone()),
            val_w: tape.leaf(self.val_w.clone()),
            out_w: tape.leaf(self.out_w.clone()),
            ln_gain: tape.leaf(self.ln_gain.clone()),
            ln_bias: tape.leaf(self.ln_bias.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseHeadWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PoseHeadWeights {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Self {
        Self {
            w1: store.tensor(&format!("{prefix}.w1")),
            b1: store.tensor(&format!("{prefix}.b1")),
            w2: store.tensor(&format!("{prefix}.w2")),
            b2: store.tensor(&format!("{prefix}.b2")),
        }
    }

    fn validate(&self, d: usize) -> Result<(), RefinerError> {
        if self.w1.rank() != 2 || self.w1.shape()[0] != d {
            return Err(RefinerError::ShapeMismatch(format!(
                "w1: expected ({d}, hidden), got {:?}",
                self.w1.shape()
            )));
        }
        let hidden = self.w1.shape()[1];
        expect_shape(&self.b1, &[hidden], "b1")?;
        expect_shape(&self.w2, &[hidden, 9], "w2")?;
        expect_shape(&self.b2, &[9], "b2")
    }

    fn leaves(&self, tape: &mut Tape) -> graph::HeadVars {
        graph::HeadVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<(), RefinerError> {
    if t.shape() != shape {
        return Err(RefinerError::ShapeMismatch(format!(
            "{what}: expected {:?}, got {:?}",
            shape,
            t.shape()
        )));
    }
    Ok(())
}

fn check_scene(
    config: &RefinerConfig,
    pyramid: &FeaturePyramid,
    n_keypoints: Option<usize>,
) -> Result<(), RefinerError> {
    if pyramid.num_levels() != config.levels {
        return Err(RefinerError::SceneMismatch(format!(
            "pyramid has {} levels, config expects {}",
            pyramid.num_levels(),
            config.levels
        )));
    }
    if pyramid.channels() != config.channels {
        return Err(RefinerError::SceneMismatch(format!(
            "pyramid has {} channels, config expects {}",
            pyramid.channels(),
            config.channels
        )));
    }
    if let Some(k) = n_keypoints {
        if k != config.keypoints {
            return Err(RefinerError::SceneMismatch(format!(
                "{} keypoints provided, config expects {}",
                k, config.keypoints
            )));
        }
    }
    Ok(())
}

fn positions_tensor(positions: &[Vec2]) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * 2);
    for p in positions {
        data.push(p.x);
        data.push(p.y);
    }
    Tensor::new(&[positions.len(), 2], data)
}

fn state_leaves(tape: &mut Tape, state: &RefinerState) -> (Var, Var) {
    let mut r = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            r.push(state.rotation[(i, j)]);
        }
    }
    let rotation = tape.leaf(Tensor::new(&[3, 3], r));
    let gamma = tape.leaf(Tensor::new(
        &[1, 3],
        vec![state.gamma.gamma_x, state.gamma.gamma_y, state.gamma.gamma_z],
    ));
    (rotation, gamma)
}

fn offset_from_raw(data: &[f64]) -> PoseOffset {
    PoseOffset {
        delta_rotation: Rotation6D::new(
            Vec3::new(data[0], data[1], data[2]),
            Vec3::new(data[3], data[4], data[5]),
        ),
        delta_gamma: Vec3::new(data[6], data[7], data[8]),
    }
}

fn state_value(tape: &Tape, r: Var, gamma: Var) -> RefinerState {
    RefinerState {
        rotation: graph::rotation_value(tape, r),
        gamma: graph::gamma_value(tape, gamma),
    }
}

// ---- public operations ----

/// Coarse pose from the pooled last pyramid level: a 2-layer MLP emits a 6D
/// allocentric rotation and a site translation (depth through softplus), which
/// are decoded and converted to the egocentric frame.
pub fn coarse_pose(
    config: &RefinerConfig,
    params: &ParamStore,
    pyramid: &FeaturePyramid,
    crop: &CropFrame,
    k_cam: &CameraIntrinsics,
) -> Result<(Pose, RefinerState), RefinerError> {
    config.validate()?;
    crop.validate()?;
    check_scene(config, pyramid, None)?;
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let scene = graph::SceneConsts::build(&mut tape, pyramid, &[], crop, k_cam);
    let pooled = graph::pooled_last_level(&mut tape, pyramid);
    let coarse = graph::coarse_vars(&vars);
    let (r, gamma) = graph::coarse_t(&mut tape, pooled, &coarse, &scene)?;
    let state = state_value(&tape, r, gamma);
    let pose = state.to_pose(crop, k_cam)?;
    Ok((pose, state))
}

/// Sine/cosine positional embedding of a crop-frame pixel, normalized to
/// `[0,1]` by the crop size: per axis, `d_model/4` (sin, cos) pairs at
/// geometric frequencies `2π·10000^(−4i/d_model)`, x-block then y-block.
pub fn positional_embed(
    position_px: &Vec2,
    crop: &CropFrame,
    d_model: usize,
) -> Result<Vec<f64>, RefinerError> {
    if d_model == 0 || d_model % 4 != 0 {
        return Err(RefinerError::BadWidth(d_model));
    }
    crop.validate()?;
    let inv = 1.0 / crop.s_bbox();
    let pairs = d_model / 4;
    let mut out = Vec::with_capacity(d_model);
    for coord in [position_px.x, position_px.y] {
        let u = coord * inv;
        for i in 0..pairs {
            let phase = u * graph::embed_frequency(i, d_model);
            out.push(phase.sin());
            out.push(phase.cos());
        }
    }
    Ok(out)
}

/// Multi-head self-attention with query = key = `q_in + embed` (or plain
/// `q_in` when no embedding is given), value = `q_in`, followed by output
/// projection, residual addition, and layer normalization.
pub fn self_attention(
    q_in: &Tensor,
    embed: Option<&Tensor>,
    weights: &SelfAttnWeights,
    heads: usize,
) -> Result<Tensor, RefinerError> {
    if q_in.rank() != 2 {
        return Err(RefinerError::ShapeMismatch(format!(
            "query must be rank 2, got {:?}",
            q_in.shape()
        )));
    }
    let (_, d) = q_in.dims2();
    if heads == 0 || d % heads != 0 {
        return Err(RefinerError::BadConfig(format!(
            "width {d} must be a positive multiple of heads {heads}"
        )));
    }
    if let Some(e) = embed {
        expect_shape(e, q_in.shape(), "positional embedding")?;
    }
    weights.validate(d)?;
    let mut tape = Tape::new();
    let q = tape.leaf(q_in.clone());
    let e = embed.map(|e| tape.leaf(e.clone()));
    let p = weights.leaves(&mut tape);
    let out = graph::self_attention_t(&mut tape, q, e, &p, heads);
    Ok(tape.value(out).clone())
}

/// Outputs of the deformable-attention block.
#[derive(Debug, Clone)]
pub struct DeformableOutput {
    /// Attended features per head (concatenated along channels), before the
    /// output projection.
    pub per_head: Tensor,
    /// Projected, residual-added, layer-normalized output.
    pub output: Tensor,
}

/// Multi-scale deformable attention: each head predicts, per keypoint,
/// sampling offsets (crop-normalized, scaled to pixels) and softmax weights
/// over its `levels·points` slots, then weights projected pyramid samples at
/// the offset positions.
pub fn deformable_attention(
    q_s: &Tensor,
    positions: &[Vec2],
    pyramid: &FeaturePyramid,
    weights: &DeformWeights,
    config: &RefinerConfig,
) -> Result<DeformableOutput, RefinerError> {
    config.validate()?;
    check_scene(config, pyramid, None)?;
    if q_s.rank() != 2 {
        return Err(RefinerError::ShapeMismatch(format!(
            "query must be rank 2, got {:?}",
            q_s.shape()
        )));
    }
    let (k, d) = q_s.dims2();
    if d != config.d_model {
        return Err(RefinerError::ShapeMismatch(format!(
            "query width {d} does not match d_model {}",
            config.d_model
        )));
    }
    if positions.len() != k {
        return Err(RefinerError::ShapeMismatch(format!(
            "{} positions for {k} queries",
            positions.len()
        )));
    }
    weights.validate(config)?;
    let mut tape = Tape::new();
    let q = tape.leaf(q_s.clone());
    let pos = tape.leaf(positions_tensor(positions));
    let scene = graph::SceneConsts::sampling_only(&mut tape, pyramid);
    let w = weights.leaves(&mut tape);
    let (pre, out) =
        graph::deformable_attention_t(&mut tape, q, pos, &scene, &w, config.heads, config.points);
    Ok(DeformableOutput {
        per_head: tape.value(pre).clone(),
        output: tape.value(out).clone(),
    })
}

/// Mean-pool the queries and run the 2-layer tanh MLP into a raw pose
/// correction.
pub fn pose_head(q_p: &Tensor, weights: &PoseHeadWeights) -> Result<PoseOffset, RefinerError> {
    if q_p.rank() != 2 || q_p.shape()[0] == 0 {
        return Err(RefinerError::ShapeMismatch(format!(
            "queries must be a non-empty rank-2 tensor, got {:?}",
            q_p.shape()
        )));
    }
    let d = q_p.dims2().1;
    weights.validate(d)?;
    let mut tape = Tape::new();
    let q = tape.leaf(q_p.clone());
    let w = weights.leaves(&mut tape);
    let out = graph::pose_head_t(&mut tape, q, &w);
    Ok(offset_from_raw(tape.value(out).data()))
}

/// One refinement step from `state` with recycled query `q_prev`. Returns the
/// new state, the next query state (query = the deformable-attention output,
/// bit-for-bit), and the raw correction.
#[allow(clippy::too_many_arguments)]
pub fn refine_step(
    config: &RefinerConfig,
    params: &ParamStore,
    step_index: usize,
    state: &RefinerState,
    q_prev: &Tensor,
    pyramid: &FeaturePyramid,
    keypoints: &[Vec3],
    crop: &CropFrame,
    k_cam: &CameraIntrinsics,
) -> Result<(RefinerState, QueryState, PoseOffset), RefinerError> {
    config.validate()?;
    crop.validate()?;
    check_scene(config, pyramid, Some(keypoints.len()))?;
    if step_index >= config.steps {
        return Err(RefinerError::BadConfig(format!(
            "step index {step_index} out of range for {} steps",
            config.steps
        )));
    }
    expect_shape(q_prev, &[config.keypoints, config.d_model], "q_prev")?;

    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let scene = graph::SceneConsts::build(&mut tape, pyramid, keypoints, crop, k_cam);
    let (r_prev, gamma_prev) = state_leaves(&mut tape, state);
    let q = tape.leaf(q_prev.clone());
    let set = if config.shared_steps { 0 } else { step_index };
    let step = graph::step_vars(&vars, set);
    let out = graph::refine_step_t(&mut tape, r_prev, gamma_prev, q, &step, &scene, config)?;
    Ok((
        state_value(&tape, out.rotation, out.gamma),
        QueryState {
            q: tape.value(out.q_next).clone(),
            embed: tape.value(out.embed).clone(),
        },
        offset_from_raw(tape.value(out.offset).data()),
    ))
}

/// Full cascade: the coarse pose followed by every refinement step, with all
/// intermediate poses, queries, and corrections.
pub fn cascade(
    config: &RefinerConfig,
    params: &ParamStore,
    pyramid: &FeaturePyramid,
    keypoints: &[Vec3],
    crop: &CropFrame,
    k_cam: &CameraIntrinsics,
) -> Result<CascadeTrace, RefinerError> {
    config.validate()?;
    crop.validate()?;
    check_scene(config, pyramid, Some(keypoints.len()))?;
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let scene = graph::SceneConsts::build(&mut tape, pyramid, keypoints, crop, k_cam);
    let g = graph::cascade_t(&mut tape, &vars, config, &scene, pyramid)?;

    let mut states = Vec::with_capacity(g.states.len());
    let mut poses = Vec::with_capacity(g.states.len());
    for &(r, gamma) in &g.states {
        let state = state_value(&tape, r, gamma);
        poses.push(state.to_pose(crop, k_cam)?);
        states.push(state);
    }
    Ok(CascadeTrace {
        states,
        poses,
        queries: g.queries.iter().map(|&q| tape.value(q).clone()).collect(),
        offsets: g
            .offsets
            .iter()
            .map(|&o| offset_from_raw(tape.value(o).data()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_pose_offset, image_to_crop_px, project_keypoints};
    use crate::pyramid::extract_oskf;
    use crate::tape::LAYER_NORM_EPS;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> RefinerConfig {
        RefinerConfig {
            d_model: 16,
            heads: 2,
            points: 2,
            levels: 2,
            keypoints: 6,
            steps: 2,
            pos_embed_freqs: 4,
            channels: 8,
            shared_steps: false,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
        )
    }

    fn toy_pyramid(seed: u64, levels: usize, channels: usize, crop_size: f64) -> FeaturePyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lv = Vec::new();
        let mut hw = 8usize;
        for _ in 0..levels {
            lv.push(rand_tensor(&mut rng, &[hw, hw, channels], 1.0));
            hw = (hw / 2).max(1);
        }
        FeaturePyramid::new(lv, crop_size).unwrap()
    }

    fn toy_crop() -> CropFrame {
        CropFrame::new([320.0, 240.0], 64.0, 64.0, 640.0)
    }

    fn toy_cam() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
        }
    }

    /// Deterministic points spread on a small sphere.
    fn toy_keypoints(k: usize, radius: f64) -> Vec<Vec3> {
        (0..k)
            .map(|i| {
                let t = (i as f64 + 0.5) / k as f64;
                let z = 1.0 - 2.0 * t;
                let r = (1.0 - z * z).sqrt();
                let phi = 2.4 * i as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
            })
            .collect()
    }

    /// Give the zero-initialized pose heads small random weights so steps
    /// actually move the pose.
    fn perturb_heads(params: &mut ParamStore, config: &RefinerConfig, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..config.step_param_sets() {
            let name = format!("step{t}.head.w2");
            let shape = params.tensor(&name).shape().to_vec();
            params.set_tensor(&name, &rand_tensor(&mut rng, &shape, scale));
        }
    }

    #[test]
    fn config_validation() {
        assert!(RefinerConfig::default().validate().is_ok());
        let mut c = RefinerConfig::default();
        c.heads = 5;
        assert!(matches!(c.validate(), Err(RefinerError::BadConfig(_))));
        let mut c = RefinerConfig::default();
        c.d_model = 30;
        c.heads = 5;
        c.pos_embed_freqs = 7;
        assert!(matches!(c.validate(), Err(RefinerError::BadWidth(30))));
        let mut c = RefinerConfig::default();
        c.pos_embed_freqs = 7;
        assert!(matches!(c.validate(), Err(RefinerError::BadConfig(_))));
        let mut c = RefinerConfig::default();
        c.steps = 0;
        assert!(c.validate().is_ok());
        assert_eq!(c.step_param_sets(), 0);
        c.shared_steps = true;
        assert_eq!(c.step_param_sets(), 0);
        c.steps = 3;
        assert_eq!(c.step_param_sets(), 1);
    }

    #[test]
    fn positional_embed_origin_and_bounds() {
        let crop = toy_crop();
        let e = positional_embed(&Vec2::new(0.0, 0.0), &crop, 16).unwrap();
        assert_eq!(e.len(), 16);
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0); // sin 0
            assert_eq!(pair[1], 1.0); // cos 0
        }
        // Per-axis block norm is bounded by sqrt(d/2).
        let e = positional_embed(&Vec2::new(37.2, 11.9), &crop, 16).unwrap();
        let half = e.len() / 2;
        for block in [&e[..half], &e[half..]] {
            let norm: f64 = block.iter().map(|v| v * v).sum::<f64>();
            assert!(norm.sqrt() <= (8.0f64).sqrt() + 1e-12);
        }
        assert!(matches!(
            positional_embed(&Vec2::new(0.0, 0.0), &crop, 10),
            Err(RefinerError::BadWidth(10))
        ));
    }

    #[test]
    fn positional_embed_distinct_on_grid() {
        let crop = toy_crop();
        let mut embeds = Vec::new();
        for i in 0..16 {
            for j in 0..16 {
                let p = Vec2::new(i as f64 * 4.0, j as f64 * 4.0);
                embeds.push(positional_embed(&p, &crop, 16).unwrap());
            }
        }
        for a in 0..embeds.len() {
            for b in a + 1..embeds.len() {
                assert_ne!(embeds[a], embeds[b], "grid cells {a} and {b} collide");
            }
        }
    }

    #[test]
    fn positional_embed_matches_tape_builder() {
        let crop = toy_crop();
        let positions = [Vec2::new(3.7, 41.0), Vec2::new(63.9, 0.1)];
        let mut tape = Tape::new();
        let pos = tape.leaf(positions_tensor(&positions));
        let e = graph::positional_embed_t(&mut tape, pos, crop.s_bbox(), 16);
        let batch = tape.value(e);
        for (i, p) in positions.iter().enumerate() {
            let single = positional_embed(p, &crop, 16).unwrap();
            assert_eq!(&batch.data()[i * 16..(i + 1) * 16], single.as_slice());
        }
    }

    fn naive_linear(x: &[f64], k: usize, n_in: usize, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
        let n_out = w.shape()[1];
        let mut out = vec![0.0; k * n_out];
        for i in 0..k {
            for j in 0..n_out {
                let mut s = 0.0;
                for m in 0..n_in {
                    s += x[i * n_in + m] * w.data()[m * n_out + j];
                }
                out[i * n_out + j] = s + b.map_or(0.0, |b| b.data()[j]);
            }
        }
        out
    }

    fn naive_ln_affine(rows: &[f64], k: usize, d: usize, gain: &Tensor, bias: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            let row = &rows[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
            }
        }
        out
    }

    fn naive_self_attention(
        q_in: &Tensor,
        e: Option<&Tensor>,
        w: &SelfAttnWeights,
        heads: usize,
    ) -> Tensor {
        let (k, d) = q_in.dims2();
        let dh = d / heads;
        let qk: Vec<f64> = (0..k * d)
            .map(|i| q_in.data()[i] + e.map_or(0.0, |e| e.data()[i]))
            .collect();
        let qp = naive_linear(&qk, k, d, &w.wq, None);
        let kp = naive_linear(&qk, k, d, &w.wk, None);
        let vp = naive_linear(q_in.data(), k, d, &w.wv, None);
        let mut concat = vec![0.0; k * d];
        for h in 0..heads {
            for i in 0..k {
                let mut scores = vec![0.0; k];
                for j in 0..k {
                    let mut s = 0.0;
                    for m in 0..dh {
                        s += qp[i * d + h * dh + m] * kp[j * d + h * dh + m];
                    }
                    scores[j] = s / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for m in 0..dh {
                    let mut o = 0.0;
                    for j in 0..k {
                        o += exps[j] / z * vp[j * d + h * dh + m];
                    }
                    concat[i * d + h * dh + m] = o;
                }
            }
        }
        let proj = naive_linear(&concat, k, d, &w.wo, None);
        let res: Vec<f64> = (0..k * d).map(|i| q_in.data()[i] + proj[i]).collect();
        Tensor::new(&[k, d], naive_ln_affine(&res, k, d, &w.ln_gain, &w.ln_bias))
    }

    fn rand_attn_weights(rng: &mut ChaCha8Rng, d: usize) -> SelfAttnWeights {
        SelfAttnWeights {
            wq: rand_tensor(rng, &[d, d], 0.5),
            wk: rand_tensor(rng, &[d, d], 0.5),
            wv: rand_tensor(rng, &[d, d], 0.5),
            wo: rand_tensor(rng, &[d, d], 0.5),
            ln_gain: rand_tensor(rng, &[d], 1.0),
            ln_bias: rand_tensor(rng, &[d], 1.0),
        }
    }

    #[test]
    fn self_attention_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for heads in [1, 2, 4] {
            let q = rand_tensor(&mut rng, &[4, 8], 1.0);
            let e = rand_tensor(&mut rng, &[4, 8], 1.0);
            let w = rand_attn_weights(&mut rng, 8);
            let got = self_attention(&q, Some(&e), &w, heads).unwrap();
            let want = naive_self_attention(&q, Some(&e), &w, heads);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn self_attention_single_token_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q = rand_tensor(&mut rng, &[1, 4], 1.0);
        let w = rand_attn_weights(&mut rng, 4);
        let got = self_attention(&q, None, &w, 2).unwrap();
        // Softmax over a single key is 1, so attention output = value.
        let v = naive_linear(q.data(), 1, 4, &w.wv, None);
        let proj = naive_linear(&v, 1, 4, &w.wo, None);
        let res: Vec<f64> = (0..4).map(|i| q.data()[i] + proj[i]).collect();
        let want = naive_ln_affine(&res, 1, 4, &w.ln_gain, &w.ln_bias);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn self_attention_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q = rand_tensor(&mut rng, &[5, 8], 1.0);
        let e = rand_tensor(&mut rng, &[5, 8], 1.0);
        let w = rand_attn_weights(&mut rng, 8);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let (k, d) = t.dims2();
            let mut data = vec![0.0; k * d];
            for (dst, &src) in perm.iter().enumerate() {
                data[dst * d..(dst + 1) * d].copy_from_slice(&t.data()[src * d..(src + 1) * d]);
            }
            Tensor::new(&[k, d], data)
        };
        let base = self_attention(&q, Some(&e), &w, 2).unwrap();
        let permuted = self_attention(&permute(&q), Some(&permute(&e)), &w, 2).unwrap();
        let expected = permute(&base);
        for (a, b) in permuted.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn rand_deform_weights(rng: &mut ChaCha8Rng, config: &RefinerConfig) -> DeformWeights {
        let (d, c) = (config.d_model, config.channels);
        let hlj = config.heads * config.levels * config.points;
        DeformWeights {
            off_w: rand_tensor(rng, &[d, hlj * 2], 0.05),
            off_b: rand_tensor(rng, &[hlj * 2], 0.05),
            att_w: rand_tensor(rng, &[d, hlj], 0.5),
            att_b: rand_tensor(rng, &[hlj], 0.5),
            val_w: rand_tensor(rng, &[c, d], 0.5),
            out_w: rand_tensor(rng, &[d, d], 0.5),
            ln_gain: rand_tensor(rng, &[d], 1.0),
            ln_bias: rand_tensor(rng, &[d], 1.0),
        }
    }

    fn naive_deformable(
        q_s: &Tensor,
        positions: &[Vec2],
        pyramid: &FeaturePyramid,
        w: &DeformWeights,
        heads: usize,
        points: usize,
    ) -> (Tensor, Tensor) {
        let (k, d) = q_s.dims2();
        let dh = d / heads;
        let levels = pyramid.num_levels();
        let lj = levels * points;
        let c = pyramid.channels();
        let off = naive_linear(q_s.data(), k, d, &w.off_w, Some(&w.off_b));
        let att = naive_linear(q_s.data(), k, d, &w.att_w, Some(&w.att_b));
        let mut pre = vec![0.0; k * d];
        for i in 0..k {
            for h in 0..heads {
                let slots: Vec<f64> = (0..lj).map(|s| att[i * (heads * lj) + h * lj + s]).collect();
                let max = slots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = slots.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for l in 0..levels {
                    for j in 0..points {
                        let slot = (h * levels + l) * points + j;
                        let a = exps[l * points + j] / z;
                        let p = Vec2::new(
                            positions[i].x + off[i * (heads * lj * 2) + slot * 2] * pyramid.crop_size(),
                            positions[i].y
                                + off[i * (heads * lj * 2) + slot * 2 + 1] * pyramid.crop_size(),
                        );
                        let f = crate::pyramid::bilinear_sample(
                            pyramid.level(l),
                            &p,
                            pyramid.strides(l),
                        );
                        for m in 0..dh {
                            let mut proj = 0.0;
                            for ci in 0..c {
                                proj += f[ci] * w.val_w.data()[ci * d + h * dh + m];
                            }
                            pre[i * d + h * dh + m] += a * proj;
                        }
                    }
                }
            }
        }
        let projd = naive_linear(&pre, k, d, &w.out_w, None);
        let res: Vec<f64> = (0..k * d).map(|i| q_s.data()[i] + projd[i]).collect();
        (
            Tensor::new(&[k, d], pre),
            Tensor::new(&[k, d], naive_ln_affine(&res, k, d, &w.ln_gain, &w.ln_bias)),
        )
    }

    #[test]
    fn deformable_matches_nested_loop_oracle() {
        let config = RefinerConfig {
            d_model: 16,
            heads: 2,
            points: 4,
            levels: 2,
            keypoints: 8,
            steps: 1,
            pos_embed_freqs: 4,
            channels: 8,
            shared_steps: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pyramid = toy_pyramid(32, 2, 8, 64.0);
        let q = rand_tensor(&mut rng, &[8, 16], 1.0);
        let w = rand_deform_weights(&mut rng, &config);
        let positions: Vec<Vec2> = (0..8)
            .map(|_| Vec2::new(rng.random_range(2.0..62.0), rng.random_range(2.0..62.0)))
            .collect();
        let got = deformable_attention(&q, &positions, &pyramid, &w, &config).unwrap();
        let (want_pre, want_out) =
            naive_deformable(&q, &positions, &pyramid, &w, config.heads, config.points);
        for (a, b) in got.per_head.data().iter().zip(want_pre.data()) {
            assert!((a - b).abs() < 1e-10, "pre: {a} vs {b}");
        }
        for (a, b) in got.output.data().iter().zip(want_out.data()) {
            assert!((a - b).abs() < 1e-10, "out: {a} vs {b}");
        }
    }

    #[test]
    fn deformable_degenerate_equals_direct_sampling() {
        // One head, one level, one point: the softmax weight is exactly 1,
        // zero offsets leave positions untouched, identity projections pass
        // features through — the pre-projection output must equal direct
        // pyramid sampling bit for bit.
        let config = RefinerConfig {
            d_model: 8,
            heads: 1,
            points: 1,
            levels: 1,
            keypoints: 5,
            steps: 1,
            pos_embed_freqs: 2,
            channels: 8,
            shared_steps: false,
        };
        let pyramid = toy_pyramid(33, 1, 8, 64.0);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let q = rand_tensor(&mut rng, &[5, 8], 1.0);
        let w = DeformWeights {
            off_w: Tensor::zeros(&[8, 2]),
            off_b: Tensor::zeros(&[2]),
            att_w: Tensor::zeros(&[8, 1]),
            att_b: Tensor::zeros(&[1]),
            val_w: Tensor::eye(8),
            out_w: Tensor::eye(8),
            ln_gain: Tensor::filled(&[8], 1.0),
            ln_bias: Tensor::zeros(&[8]),
        };
        let positions: Vec<Vec2> = (0..5)
            .map(|i| Vec2::new(7.0 + 9.0 * i as f64, 50.0 - 8.3 * i as f64))
            .collect();
        let got = deformable_attention(&q, &positions, &pyramid, &w, &config).unwrap();
        let oskf = extract_oskf(&pyramid, &positions);
        for k in 0..5 {
            assert_eq!(
                &got.per_head.data()[k * 8..(k + 1) * 8],
                oskf.flat_feature(k),
                "keypoint {k}"
            );
        }
    }

    #[test]
    fn deformable_constant_field_reduces_to_projection() {
        // Constant pyramid + in-bounds samples: weights sum to 1, so each
        // head's output is W_h applied to the constant feature vector.
        let config = RefinerConfig {
            d_model: 8,
            heads: 2,
            points: 2,
            levels: 1,
            keypoints: 4,
            steps: 1,
            pos_embed_freqs: 2,
            channels: 4,
            shared_steps: false,
        };
        let v = [0.3, -1.2, 0.85, 2.0];
        let mut level = Tensor::zeros(&[8, 8, 4]);
        for cell in 0..64 {
            for (ch, &value) in v.iter().enumerate() {
                level.data_mut()[cell * 4 + ch] = value;
            }
        }
        let pyramid = FeaturePyramid::new(vec![level], 64.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let q = rand_tensor(&mut rng, &[4, 8], 1.0);
        let mut w = rand_deform_weights(&mut rng, &config);
        w.off_w = Tensor::zeros(&[8, 8]);
        w.off_b = Tensor::zeros(&[8]);
        // Interior positions: at least half a cell from the border.
        let positions: Vec<Vec2> = (0..4)
            .map(|i| Vec2::new(10.0 + 11.0 * i as f64, 12.0 + 9.0 * i as f64))
            .collect();
        let got = deformable_attention(&q, &positions, &pyramid, &w, &config).unwrap();
        for h in 0..2 {
            let mut want = [0.0; 4];
            for (m, item) in want.iter_mut().enumerate() {
                *item = (0..4).map(|ci| v[ci] * w.val_w.data()[ci * 8 + h * 4 + m]).sum();
            }
            for k in 0..4 {
                for m in 0..4 {
                    let a = got.per_head.data()[k * 8 + h * 4 + m];
                    assert!((a - want[m]).abs() < 1e-12, "{a} vs {}", want[m]);
                }
            }
        }
    }

    #[test]
    fn pose_head_zero_weights_is_identity_offset() {
        let w = PoseHeadWeights {
            w1: Tensor::zeros(&[8, 16]),
            b1: Tensor::zeros(&[16]),
            w2: Tensor::zeros(&[16, 9]),
            b2: Tensor::new(&[9], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = rand_tensor(&mut rng, &[6, 8], 1.0);
        let offset = pose_head(&q, &w).unwrap();
        assert_eq!(offset.delta_rotation.r1, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(offset.delta_rotation.r2, Vec3::new(0.0, 1.0, 0.0));
        assert_eq!(offset.delta_gamma, Vec3::zeros());

        // Applying the identity offset is a no-op, bit for bit.
        let r = crate::geometry::recover_rotation(&Rotation6D::new(
            Vec3::new(0.2, 0.9, -0.1),
            Vec3::new(-0.8, 0.1, 0.4),
        ))
        .unwrap();
        let site = SiteTranslation::new(0.03, -0.12, 2.4);
        let (r2, site2) = apply_pose_offset(&r, &site, &offset).unwrap();
        assert_eq!(r, r2);
        assert_eq!(site, site2);
    }

    #[test]
    fn pose_head_matches_matmul_oracle_and_pooling_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 8;
        let w = PoseHeadWeights {
            w1: rand_tensor(&mut rng, &[d, 2 * d], 0.5),
            b1: rand_tensor(&mut rng, &[2 * d], 0.5),
            w2: rand_tensor(&mut rng, &[2 * d, 9], 0.5),
            b2: rand_tensor(&mut rng, &[9], 0.5),
        };
        let q = rand_tensor(&mut rng, &[5, d], 1.0);
        let offset = pose_head(&q, &w).unwrap();

        let (k, _) = q.dims2();
        let mut pooled = vec![0.0; d];
        for j in 0..d {
            for i in 0..k {
                pooled[j] += q.data()[i * d + j];
            }
            pooled[j] /= k as f64;
        }
        let hidden: Vec<f64> = naive_linear(&pooled, 1, d, &w.w1, Some(&w.b1))
            .iter()
            .map(|x| x.tanh())
            .collect();
        let out = naive_linear(&hidden, 1, 2 * d, &w.w2, Some(&w.b2));
        let want = offset_from_raw(&out);
        assert!((offset.delta_rotation.r1 - want.delta_rotation.r1).norm() < 1e-12);
        assert!((offset.delta_rotation.r2 - want.delta_rotation.r2).norm() < 1e-12);
        assert!((offset.delta_gamma - want.delta_gamma).norm() < 1e-12);

        // Pooling makes the offset invariant to keypoint order.
        let mut reversed = vec![0.0; 5 * d];
        for i in 0..5 {
            reversed[i * d..(i + 1) * d].copy_from_slice(&q.data()[(4 - i) * d..(5 - i) * d]);
        }
        let offset_rev = pose_head(&Tensor::new(&[5, d], reversed), &w).unwrap();
        assert!((offset.delta_gamma - offset_rev.delta_gamma).norm() < 1e-12);
        assert!((offset.delta_rotation.r1 - offset_rev.delta_rotation.r1).norm() < 1e-12);
    }

    #[test]
    fn coarse_pose_pooling_invariance_and_state_consistency() {
        let config = toy_config();
        let params = ParamStore::init(&config, 5);
        let crop = toy_crop();
        let cam = toy_cam();
        let pyramid = toy_pyramid(51, 2, 8, 64.0);
        let (pose, state) = coarse_pose(&config, &params, &pyramid, &crop, &cam).unwrap();
        assert!(pose.is_valid(1e-9));
        assert!(state.gamma.gamma_z > 0.0);
        assert_eq!(state.to_pose(&crop, &cam).unwrap(), pose);

        // Spatially permuting the pooled level leaves the pose unchanged up
        // to summation order.
        let last = pyramid.level(1).clone();
        let (h, w, c) = (last.shape()[0], last.shape()[1], last.shape()[2]);
        let mut shuffled = vec![0.0; h * w * c];
        let cells: Vec<usize> = (0..h * w).rev().collect();
        for (dst, &src) in cells.iter().enumerate() {
            shuffled[dst * c..(dst + 1) * c].copy_from_slice(&last.data()[src * c..(src + 1) * c]);
        }
        let permuted = FeaturePyramid::new(
            vec![pyramid.level(0).clone(), Tensor::new(&[h, w, c], shuffled)],
            64.0,
        )
        .unwrap();
        let (pose2, _) = coarse_pose(&config, &params, &permuted, &crop, &cam).unwrap();
        assert!((pose.translation - pose2.translation).norm() < 1e-9);
        assert!((pose.rotation - pose2.rotation).norm() < 1e-9);
    }

    #[test]
    fn cascade_identity_when_heads_zeroed() {
        let config = toy_config();
        let mut params = ParamStore::init(&config, 6);
        perturb_heads(&mut params, &config, 60, 0.01);
        params.zero_pose_heads(); // undo: back to exact identity heads
        let pyramid = toy_pyramid(61, 2, 8, 64.0);
        let kps = toy_keypoints(6, 0.03);
        let trace = cascade(&config, &params, &pyramid, &kps, &toy_crop(), &toy_cam()).unwrap();
        assert_eq!(trace.poses.len(), config.steps + 1);
        for i in 1..trace.poses.len() {
            assert_eq!(trace.states[0].rotation, trace.states[i].rotation);
            assert_eq!(trace.states[0].gamma, trace.states[i].gamma);
            assert_eq!(trace.poses[0], trace.poses[i]);
        }
    }

    #[test]
    fn cascade_zero_steps_returns_coarse_only() {
        let mut config = toy_config();
        config.steps = 0;
        let params = ParamStore::init(&config, 7);
        let pyramid = toy_pyramid(62, 2, 8, 64.0);
        let kps = toy_keypoints(6, 0.03);
        let crop = toy_crop();
        let cam = toy_cam();
        let trace = cascade(&config, &params, &pyramid, &kps, &crop, &cam).unwrap();
        assert_eq!(trace.poses.len(), 1);
        assert_eq!(trace.offsets.len(), 0);
        let (pose, state) = coarse_pose(&config, &params, &pyramid, &crop, &cam).unwrap();
        assert_eq!(trace.poses[0], pose);
        assert_eq!(trace.states[0].rotation, state.rotation);
    }

    #[test]
    fn cascade_invariants_over_random_draws() {
        let config = toy_config();
        let pyramid = toy_pyramid(63, 2, 8, 64.0);
        let kps = toy_keypoints(6, 0.03);
        let crop = toy_crop();
        let cam = toy_cam();
        for seed in 0..100 {
            let mut params = ParamStore::init(&config, seed);
            perturb_heads(&mut params, &config, seed ^ 0xbeef, 0.01);
            let trace = cascade(&config, &params, &pyramid, &kps, &crop, &cam).unwrap();
            assert_eq!(trace.poses.len(), config.steps + 1);
            for (pose, state) in trace.poses.iter().zip(&trace.states) {
                assert!(pose.is_valid(1e-9), "seed {seed}");
                assert!(state.gamma.gamma_z > 0.0, "seed {seed}");
            }
            // Perturbed heads actually move the pose.
            assert_ne!(trace.states[0].gamma, trace.states[1].gamma, "seed {seed}");
        }
    }

    #[test]
    fn refine_step_matches_cascade_and_recycles_deformable_output() {
        let config = toy_config();
        let mut params = ParamStore::init(&config, 8);
        perturb_heads(&mut params, &config, 80, 0.01);
        let pyramid = toy_pyramid(81, 2, 8, 64.0);
        let kps = toy_keypoints(6, 0.03);
        let crop = toy_crop();
        let cam = toy_cam();
        let trace = cascade(&config, &params, &pyramid, &kps, &crop, &cam).unwrap();

        let (pose0, state0) = coarse_pose(&config, &params, &pyramid, &crop, &cam).unwrap();
        assert_eq!(pose0, trace.poses[0]);
        assert_eq!(state0.rotation, trace.states[0].rotation);
        assert_eq!(state0.gamma, trace.states[0].gamma);

        let mut state = state0;
        let mut q = params.tensor("q0");
        assert_eq!(q.data(), trace.queries[0].data());
        for t in 0..config.steps {
            let (next, qs, offset) = refine_step(
                &config, &params, t, &state, &q, &pyramid, &kps, &crop, &cam,
            )
            .unwrap();
            assert_eq!(next.rotation, trace.states[t + 1].rotation, "step {t}");
            assert_eq!(next.gamma, trace.states[t + 1].gamma, "step {t}");
            assert_eq!(qs.q.data(), trace.queries[t + 1].data(), "step {t}");
            assert_eq!(offset, trace.offsets[t], "step {t}");
            state = next;
            q = qs.q;
        }

        // Reconstruct step 0 from the public pieces: the recycled query must
        // equal the deformable-attention output bit for bit.
        let pose = state0.to_pose(&crop, &cam).unwrap();
        let img = project_keypoints(&kps, &pose, &cam).unwrap();
        let crop_px: Vec<Vec2> = img.iter().map(|p| image_to_crop_px(p, &crop)).collect();
        let oskf = extract_oskf(&pyramid, &crop_px);
        let flat = oskf.features.reshaped(&[6, 16]);
        let w_in = params.tensor("step0.in_proj.w");
        let b_in = params.tensor("step0.in_proj.b");
        let proj = flat.matmul(&w_in);
        let q0 = params.tensor("q0");
        let mut q_in = vec![0.0; 6 * 16];
        for i in 0..6 {
            for j in 0..16 {
                let p = proj.data()[i * 16 + j] + b_in.data()[j];
                q_in[i * 16 + j] = q0.data()[i * 16 + j] + p;
            }
        }
        let q_in = Tensor::new(&[6, 16], q_in);
        let mut e = vec![0.0; 6 * 16];
        for (i, p) in crop_px.iter().enumerate() {
            e[i * 16..(i + 1) * 16]
                .copy_from_slice(&positional_embed(p, &crop, 16).unwrap());
        }
        let e = Tensor::new(&[6, 16], e);
        let q_s = self_attention(
            &q_in,
            Some(&e),
            &SelfAttnWeights::from_store(&params, "step0.attn1"),
            config.heads,
        )
        .unwrap();
        let deform = deformable_attention(
            &q_s,
            &crop_px,
            &pyramid,
            &DeformWeights::from_store(&params, "step0.deform"),
            &config,
        )
        .unwrap();
        assert_eq!(deform.output.data(), trace.queries[1].data());
    }

    #[test]
    fn scene_mismatch_is_rejected() {
        let config = toy_config();
        let params = ParamStore::init(&config, 9);
        let crop = toy_crop();
        let cam = toy_cam();
        let wrong_levels = toy_pyramid(91, 3, 8, 64.0);
        assert!(matches!(
            cascade(&config, &params, &wrong_levels, &toy_keypoints(6, 0.03), &crop, &cam),
            Err(RefinerError::SceneMismatch(_))
        ));
        let wrong_channels = toy_pyramid(92, 2, 4, 64.0);
        assert!(matches!(
            coarse_pose(&config, &params, &wrong_channels, &crop, &cam),
            Err(RefinerError::SceneMismatch(_))
        ));
        let pyramid = toy_pyramid(93, 2, 8, 64.0);
        assert!(matches!(
            cascade(&config, &params, &pyramid, &toy_keypoints(5, 0.03), &crop, &cam),
            Err(RefinerError::SceneMismatch(_))
        ));
    }
}
