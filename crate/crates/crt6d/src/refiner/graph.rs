//! Tape builders for the refiner forward pass.
//!
//! There is exactly one implementation of the forward computation — these
//! builders — used for training gradients and for plain evaluation alike
//! (the public wrappers run a tape and read values off it). Because the tape
//! is eager, preconditions (degenerate rotations, points behind the camera)
//! are checked on concrete values while the graph is being built.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::{RefinerConfig, RefinerError};
use crate::geometry::{
    CameraIntrinsics, CropFrame, GeometryError, Mat3, SiteTranslation, Vec3, DEGENERACY_EPS,
    NEAR_PLANE,
};
use crate::pyramid::FeaturePyramid;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

// ---- parameter handle bundles ----

pub(crate) struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

pub(crate) struct DeformVars {
    pub off_w: Var,
    pub off_b: Var,
    pub att_w: Var,
    pub att_b: Var,
    pub val_w: Var,
    pub out_w: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
}

pub(crate) struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) struct StepVars {
    pub in_proj_w: Var,
    pub in_proj_b: Var,
    pub attn1: AttnVars,
    pub deform: DeformVars,
    pub attn2: AttnVars,
    pub head: HeadVars,
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Var {
    *vars
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter tensor '{name}'"))
}

fn attn_vars(vars: &BTreeMap<String, Var>, prefix: &str) -> AttnVars {
    AttnVars {
        wq: var(vars, &format!("{prefix}.wq")),
        wk: var(vars, &format!("{prefix}.wk")),
        wv: var(vars, &format!("{prefix}.wv")),
        wo: var(vars, &format!("{prefix}.wo")),
        ln_gain: var(vars, &format!("{prefix}.ln_gain")),
        ln_bias: var(vars, &format!("{prefix}.ln_bias")),
    }
}

pub(crate) fn step_vars(vars: &BTreeMap<String, Var>, t: usize) -> StepVars {
    let p = |s: &str| format!("step{t}.{s}");
    StepVars {
        in_proj_w: var(vars, &p("in_proj.w")),
        in_proj_b: var(vars, &p("in_proj.b")),
        attn1: attn_vars(vars, &p("attn1")),
        deform: DeformVars {
            off_w: var(vars, &p("deform.off_w")),
            off_b: var(vars, &p("deform.off_b")),
            att_w: var(vars, &p("deform.att_w")),
            att_b: var(vars, &p("deform.att_b")),
            val_w: var(vars, &p("deform.val_w")),
            out_w: var(vars, &p("deform.out_w")),
            ln_gain: var(vars, &p("deform.ln_gain")),
            ln_bias: var(vars, &p("deform.ln_bias")),
        },
        attn2: attn_vars(vars, &p("attn2")),
        head: HeadVars {
            w1: var(vars, &p("head.w1")),
            b1: var(vars, &p("head.b1")),
            w2: var(vars, &p("head.w2")),
            b2: var(vars, &p("head.b2")),
        },
    }
}

pub(crate) fn coarse_vars(vars: &BTreeMap<String, Var>) -> HeadVars {
    HeadVars {
        w1: var(vars, "coarse.w1"),
        b1: var(vars, "coarse.b1"),
        w2: var(vars, "coarse.w2"),
        b2: var(vars, "coarse.b2"),
    }
}

// ---- scene constants ----

/// Immutable per-scene inputs shared by every step of a cascade build.
pub(crate) struct SceneConsts {
    /// Keypoints as a constant `(K, 3)` leaf.
    pub kps: Var,
    pub crop: CropFrame,
    pub k_cam: CameraIntrinsics,
    /// Pyramid levels, shared by reference with every sampling node.
    pub levels: Vec<Rc<Tensor>>,
    pub strides: Vec<[f64; 2]>,
    pub crop_size: f64,
}

impl SceneConsts {
    pub fn build(
        tape: &mut Tape,
        pyramid: &FeaturePyramid,
        keypoints: &[Vec3],
        crop: &CropFrame,
        k_cam: &CameraIntrinsics,
    ) -> Self {
        let mut data = Vec::with_capacity(keypoints.len() * 3);
        for p in keypoints {
            data.extend_from_slice(&[p.x, p.y, p.z]);
        }
        let kps = tape.leaf(Tensor::new(&[keypoints.len(), 3], data));
        SceneConsts {
            kps,
            crop: *crop,
            k_cam: *k_cam,
            levels: pyramid.levels().iter().map(|m| Rc::new(m.clone())).collect(),
            strides: (0..pyramid.num_levels()).map(|l| pyramid.strides(l)).collect(),
            crop_size: pyramid.crop_size(),
        }
    }

    /// For standalone attention blocks that only sample the pyramid: no
    /// keypoints, and a placeholder crop/camera that nothing reads.
    pub fn sampling_only(tape: &mut Tape, pyramid: &FeaturePyramid) -> Self {
        let s = pyramid.crop_size();
        Self::build(
            tape,
            pyramid,
            &[],
            &CropFrame::new([s / 2.0, s / 2.0], s, s, s),
            &CameraIntrinsics {
                fx: 1.0,
                fy: 1.0,
                cx: 0.0,
                cy: 0.0,
            },
        )
    }
}

// ---- small algebra helpers ----

/// Cross product of `(1,3)` row vectors.
fn cross_t(tape: &mut Tape, a: Var, b: Var) -> Var {
    let ax = tape.narrow(a, 1, 0, 1);
    let ay = tape.narrow(a, 1, 1, 1);
    let az = tape.narrow(a, 1, 2, 1);
    let bx = tape.narrow(b, 1, 0, 1);
    let by = tape.narrow(b, 1, 1, 1);
    let bz = tape.narrow(b, 1, 2, 1);
    let c0 = {
        let p = tape.mul(ay, bz);
        let q = tape.mul(az, by);
        tape.sub(p, q)
    };
    let c1 = {
        let p = tape.mul(az, bx);
        let q = tape.mul(ax, bz);
        tape.sub(p, q)
    };
    let c2 = {
        let p = tape.mul(ax, by);
        let q = tape.mul(ay, bx);
        tape.sub(p, q)
    };
    tape.concat(&[c0, c1, c2], 1)
}

/// Euclidean norm of a `(1,3)` row vector as a single-element tensor.
fn norm_t(tape: &mut Tape, v: Var) -> Var {
    let sq = tape.mul(v, v);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}

fn normalize_t(tape: &mut Tape, v: Var) -> Var {
    let n = norm_t(tape, v);
    let inv = tape.recip(n);
    tape.scale_by(v, inv)
}

/// Orthonormalize a `(1,6)` 6D representation into a `(3,3)` rotation.
/// Degeneracy is checked on the current values.
pub(crate) fn recover_rotation_t(tape: &mut Tape, r6: Var) -> Result<Var, GeometryError> {
    let r1 = tape.narrow(r6, 1, 0, 3);
    let r2 = tape.narrow(r6, 1, 3, 3);
    {
        let v = tape.value(r1).data();
        let w = tape.value(r2).data();
        let a = Vec3::new(v[0], v[1], v[2]);
        let b = Vec3::new(w[0], w[1], w[2]);
        if a.norm() <= DEGENERACY_EPS || a.cross(&b).norm() <= DEGENERACY_EPS {
            return Err(GeometryError::DegenerateRotation);
        }
    }
    let c1 = normalize_t(tape, r1);
    let raw3 = cross_t(tape, c1, r2);
    let c3 = normalize_t(tape, raw3);
    let c2 = cross_t(tape, c3, c1);
    // Rows are the columns of R; transpose to assemble.
    let rows = tape.concat(&[c1, c2, c3], 0);
    Ok(tape.transpose(rows))
}

/// Minimal rotation taking the optical axis onto the direction of `t` `(1,3)`,
/// in the smooth Rodrigues form.
pub(crate) fn view_rotation_t(tape: &mut Tape, t: Var) -> Result<Var, GeometryError> {
    {
        let v = tape.value(t).data();
        let tv = Vec3::new(v[0], v[1], v[2]);
        let n = tv.norm();
        if n <= DEGENERACY_EPS || 1.0 + tv.z / n <= DEGENERACY_EPS {
            return Err(GeometryError::DegenerateDirection);
        }
    }
    let dir = normalize_t(tape, t);
    let zhat = tape.leaf(Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]));
    let v = cross_t(tape, zhat, dir);
    let vx = tape.narrow(v, 1, 0, 1);
    let vy = tape.narrow(v, 1, 1, 1);
    let vz = tape.narrow(v, 1, 2, 1);
    let zero = tape.leaf(Tensor::new(&[1, 1], vec![0.0]));
    let nvx = tape.neg(vx);
    let nvy = tape.neg(vy);
    let nvz = tape.neg(vz);
    let row0 = tape.concat(&[zero, nvz, vy], 1);
    let row1 = tape.concat(&[vz, zero, nvx], 1);
    let row2 = tape.concat(&[nvy, vx, zero], 1);
    let skew = tape.concat(&[row0, row1, row2], 0);
    let skew2 = tape.matmul(skew, skew);
    let c = tape.narrow(dir, 1, 2, 1);
    let denom = tape.add_scalar(c, 1.0);
    let inv = tape.recip(denom);
    let skew2_scaled = tape.scale_by(skew2, inv);
    let eye = tape.leaf(Tensor::eye(3));
    let partial = tape.add(eye, skew);
    Ok(tape.add(partial, skew2_scaled))
}

/// Decode `(1,3)` gamma into the metric translation `(1,3)` for the given
/// crop and intrinsics. Operation order matches the eager decode exactly
/// (`t_x = (t_z · (O_x − c_x)) / f_x`) so tape and plain paths agree bitwise.
pub(crate) fn translation_t(tape: &mut Tape, gamma: Var, crop: &CropFrame, k: &CameraIntrinsics) -> Var {
    let s = crop.s_bbox();
    let gx = tape.narrow(gamma, 1, 0, 1);
    let gy = tape.narrow(gamma, 1, 1, 1);
    let gz = tape.narrow(gamma, 1, 2, 1);
    let ox_s = tape.mul_scalar(gx, s);
    let ox = tape.add_scalar(ox_s, crop.center[0]);
    let oy_s = tape.mul_scalar(gy, s);
    let oy = tape.add_scalar(oy_s, crop.center[1]);
    let t_z = tape.mul_scalar(gz, crop.r_bbox());
    let fx = tape.leaf(Tensor::new(&[1, 1], vec![k.fx]));
    let fy = tape.leaf(Tensor::new(&[1, 1], vec![k.fy]));
    let dx = tape.add_scalar(ox, -k.cx);
    let num_x = tape.mul(t_z, dx);
    let t_x = tape.div(num_x, fx);
    let dy = tape.add_scalar(oy, -k.cy);
    let num_y = tape.mul(t_z, dy);
    let t_y = tape.div(num_y, fy);
    tape.concat(&[t_x, t_y, t_z], 1)
}

/// Project keypoints through `(R, t)` into crop-frame pixels. Errors name the
/// first keypoint at or behind the near plane.
pub(crate) fn project_keypoints_t(
    tape: &mut Tape,
    scene: &SceneConsts,
    r: Var,
    t: Var,
) -> Result<Var, GeometryError> {
    let rt = tape.transpose(r);
    let rotated = tape.matmul(scene.kps, rt);
    let t_row = tape.reshape(t, &[3]);
    let cam = tape.add_row(rotated, t_row);
    {
        let k = tape.value(cam).dims2().0;
        let data = tape.value(cam).data();
        for i in 0..k {
            let z = data[i * 3 + 2];
            if z <= NEAR_PLANE {
                return Err(GeometryError::BehindCamera { index: i, z });
            }
        }
    }
    // Same order as the eager projection: (f·x)/z + c.
    let x = tape.narrow(cam, 1, 0, 1);
    let y = tape.narrow(cam, 1, 1, 1);
    let z = tape.narrow(cam, 1, 2, 1);
    let xf = tape.mul_scalar(x, scene.k_cam.fx);
    let xz = tape.div(xf, z);
    let px = tape.add_scalar(xz, scene.k_cam.cx);
    let yf = tape.mul_scalar(y, scene.k_cam.fy);
    let yz = tape.div(yf, z);
    let py = tape.add_scalar(yz, scene.k_cam.cy);
    let img = tape.concat(&[px, py], 1);
    // Image pixels → crop-frame pixels: the crop spans
    // [center − s/2, center + s/2] on each axis.
    let s = scene.crop.s_bbox();
    let shift = tape.leaf(Tensor::from_vec(vec![
        s / 2.0 - scene.crop.center[0],
        s / 2.0 - scene.crop.center[1],
    ]));
    Ok(tape.add_row(img, shift))
}

/// High-frequency sine/cosine embedding of `(K,2)` crop positions.
pub(crate) fn positional_embed_t(
    tape: &mut Tape,
    positions: Var,
    crop_size: f64,
    d_model: usize,
) -> Var {
    debug_assert_eq!(d_model % 4, 0);
    let pairs = d_model / 4;
    let inv = 1.0 / crop_size;
    let mut parts = Vec::with_capacity(d_model / 2 * 2);
    for axis in 0..2 {
        let coord = tape.narrow(positions, 1, axis, 1);
        let u = tape.mul_scalar(coord, inv);
        for i in 0..pairs {
            let omega = embed_frequency(i, d_model);
            let phase = tape.mul_scalar(u, omega);
            parts.push(tape.sin(phase));
            parts.push(tape.cos(phase));
        }
    }
    tape.concat(&parts, 1)
}

pub(crate) fn embed_frequency(i: usize, d_model: usize) -> f64 {
    2.0 * std::f64::consts::PI * 10000f64.powf(-4.0 * i as f64 / d_model as f64)
}

/// Multi-head self-attention with residual and layer norm. Query and key are
/// `q_in + e` (or plain `q_in` when `e` is `None`); value is `q_in`.
pub(crate) fn self_attention_t(
    tape: &mut Tape,
    q_in: Var,
    e: Option<Var>,
    p: &AttnVars,
    heads: usize,
) -> Var {
    let (k_rows, d) = tape.value(q_in).dims2();
    let _ = k_rows;
    let dh = d / heads;
    let qk = match e {
        Some(e) => tape.add(q_in, e),
        None => q_in,
    };
    let q = tape.matmul(qk, p.wq);
    let k = tape.matmul(qk, p.wk);
    let v = tape.matmul(q_in, p.wv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * dh, dh);
        let kh = tape.narrow(k, 1, h * dh, dh);
        let vh = tape.narrow(v, 1, h * dh, dh);
        let kht = tape.transpose(kh);
        let scores = tape.matmul(qh, kht);
        let scores = tape.mul_scalar(scores, scale);
        let att = tape.softmax_rows(scores);
        outs.push(tape.matmul(att, vh));
    }
    let concat = tape.concat(&outs, 1);
    let proj = tape.matmul(concat, p.wo);
    let res = tape.add(q_in, proj);
    let ln = tape.layer_norm_rows(res);
    let scaled = tape.mul_row(ln, p.ln_gain);
    tape.add_row(scaled, p.ln_bias)
}

/// Multi-scale deformable attention over the pyramid at (offset) keypoint
/// positions. Returns the concatenated per-head scores before the output
/// projection and the final residual-normalized output.
pub(crate) fn deformable_attention_t(
    tape: &mut Tape,
    q_s: Var,
    positions: Var,
    scene: &SceneConsts,
    p: &DeformVars,
    heads: usize,
    points: usize,
) -> (Var, Var) {
    let levels = scene.levels.len();
    let d = tape.value(q_s).dims2().1;
    let dh = d / heads;
    let lj = levels * points;

    let off_lin = tape.matmul(q_s, p.off_w);
    let off_norm = tape.add_row(off_lin, p.off_b);
    // Offsets are predicted in crop-normalized units; convert to pixels.
    let off_px = tape.mul_scalar(off_norm, scene.crop_size);
    let att_lin = tape.matmul(q_s, p.att_w);
    let att_raw = tape.add_row(att_lin, p.att_b);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let att_h_raw = tape.narrow(att_raw, 1, h * lj, lj);
        let att_h = tape.softmax_rows(att_h_raw);
        let w_h = tape.narrow(p.val_w, 1, h * dh, dh);
        let mut acc: Option<Var> = None;
        for l in 0..levels {
            for j in 0..points {
                let slot = (h * levels + l) * points + j;
                let dpos = tape.narrow(off_px, 1, slot * 2, 2);
                let pos = tape.add(positions, dpos);
                let sampled =
                    tape.bilinear_sample(scene.levels[l].clone(), pos, scene.strides[l]);
                let proj = tape.matmul(sampled, w_h);
                let wcol = tape.narrow(att_h, 1, l * points + j, 1);
                let term = tape.mul_col(proj, wcol);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
        }
        head_outs.push(acc.expect("levels*points >= 1"));
    }
    let pre = tape.concat(&head_outs, 1);
    let proj = tape.matmul(pre, p.out_w);
    let res = tape.add(q_s, proj);
    let ln = tape.layer_norm_rows(res);
    let scaled = tape.mul_row(ln, p.ln_gain);
    let out = tape.add_row(scaled, p.ln_bias);
    (pre, out)
}

/// Mean-pool over keypoints, then a 2-layer tanh MLP to 9 numbers `(1,9)`.
pub(crate) fn pose_head_t(tape: &mut Tape, q_p: Var, p: &HeadVars) -> Var {
    let d = tape.value(q_p).dims2().1;
    let pooled = tape.mean_rows(q_p);
    let pooled = tape.reshape(pooled, &[1, d]);
    mlp2_t(tape, pooled, p)
}

/// 2-layer tanh MLP `(1, in) -> (1, out)`.
pub(crate) fn mlp2_t(tape: &mut Tape, x: Var, p: &HeadVars) -> Var {
    let h_lin = tape.matmul(x, p.w1);
    let h_b = tape.add_row(h_lin, p.b1);
    let h = tape.tanh(h_b);
    let out = tape.matmul(h, p.w2);
    tape.add_row(out, p.b2)
}

/// Split a `(1,9)` head output into its 6D rotation block and gamma block,
/// passing raw depth through softplus when `positive_depth` is set (coarse
/// head) or leaving it raw (offset heads).
fn split_gamma(tape: &mut Tape, out9: Var, positive_depth: bool) -> (Var, Var) {
    let r6 = tape.narrow(out9, 1, 0, 6);
    let g_xy = tape.narrow(out9, 1, 6, 2);
    let g_z_raw = tape.narrow(out9, 1, 8, 1);
    let g_z = if positive_depth {
        tape.softplus(g_z_raw)
    } else {
        g_z_raw
    };
    let gamma = tape.concat(&[g_xy, g_z], 1);
    (r6, gamma)
}

/// Coarse head: pooled last pyramid level → MLP → allocentric rotation +
/// site translation → egocentric state `(R (3,3), gamma (1,3))`.
pub(crate) fn coarse_t(
    tape: &mut Tape,
    pooled: Var,
    coarse: &HeadVars,
    scene: &SceneConsts,
) -> Result<(Var, Var), GeometryError> {
    let out9 = mlp2_t(tape, pooled, coarse);
    let (r6, gamma) = split_gamma(tape, out9, true);
    let r_allo = recover_rotation_t(tape, r6)?;
    let t = translation_t(tape, gamma, &scene.crop, &scene.k_cam);
    let r_view = view_rotation_t(tape, t)?;
    let r_ego = tape.matmul(r_view, r_allo);
    Ok((r_ego, gamma))
}

/// Spatial mean of the last pyramid level as a constant `(1, C)` leaf.
pub(crate) fn pooled_last_level(tape: &mut Tape, pyramid: &FeaturePyramid) -> Var {
    let level = pyramid.level(pyramid.num_levels() - 1);
    let (h, w, c) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let mut pooled = vec![0.0; c];
    for cell in 0..h * w {
        for ch in 0..c {
            pooled[ch] += level.data()[cell * c + ch];
        }
    }
    for v in &mut pooled {
        *v /= (h * w) as f64;
    }
    tape.leaf(Tensor::new(&[1, c], pooled))
}

/// Apply a `(1,9)` offset to a state: left-multiply the recovered rotation
/// delta, shift gamma_xy, rescale gamma_z by the bounded positive factor
/// `2σ(2Δγ_z)` (≡ `1 + tanh(Δγ_z)`), with the raw offset clamped to ±30.
pub(crate) fn apply_offset_t(
    tape: &mut Tape,
    r_prev: Var,
    gamma_prev: Var,
    out9: Var,
) -> Result<(Var, Var), GeometryError> {
    let (r6, dgamma) = split_gamma(tape, out9, false);
    let delta = recover_rotation_t(tape, r6)?;
    let r_new = tape.matmul(delta, r_prev);

    let g_xy_prev = tape.narrow(gamma_prev, 1, 0, 2);
    let g_z_prev = tape.narrow(gamma_prev, 1, 2, 1);
    let d_xy = tape.narrow(dgamma, 1, 0, 2);
    let d_z = tape.narrow(dgamma, 1, 2, 1);
    let g_xy = tape.add(g_xy_prev, d_xy);
    let c = tape.clamp(d_z, -30.0, 30.0);
    let e = tape.mul_scalar(c, -2.0);
    let e = tape.exp(e);
    let denom = tape.add_scalar(e, 1.0);
    let sig = tape.recip(denom);
    let factor = tape.mul_scalar(sig, 2.0);
    let g_z = tape.mul(g_z_prev, factor);
    let gamma_new = tape.concat(&[g_xy, g_z], 1);
    Ok((r_new, gamma_new))
}

/// Everything one refinement step produces.
pub(crate) struct StepOutput {
    pub rotation: Var,
    pub gamma: Var,
    /// Recycled query: the deformable-attention output, bit-for-bit.
    pub q_next: Var,
    /// Raw `(1,9)` head output.
    pub offset: Var,
    /// Positional embedding added inside the first attention.
    pub embed: Var,
}

/// One refinement step.
pub(crate) fn refine_step_t(
    tape: &mut Tape,
    r_prev: Var,
    gamma_prev: Var,
    q_prev: Var,
    step: &StepVars,
    scene: &SceneConsts,
    config: &RefinerConfig,
) -> Result<StepOutput, RefinerError> {
    let t = translation_t(tape, gamma_prev, &scene.crop, &scene.k_cam);
    let positions = project_keypoints_t(tape, scene, r_prev, t)?;

    // Fresh surface-keypoint features at the current positions, folded into
    // the recycled query through the input projection.
    let mut level_feats = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        level_feats.push(tape.bilinear_sample(
            scene.levels[l].clone(),
            positions,
            scene.strides[l],
        ));
    }
    let oskf = tape.concat(&level_feats, 1);
    let oskf_lin = tape.matmul(oskf, step.in_proj_w);
    let oskf_proj = tape.add_row(oskf_lin, step.in_proj_b);
    let q_in = tape.add(q_prev, oskf_proj);

    let e = positional_embed_t(tape, positions, scene.crop_size, config.d_model);
    let q_s = self_attention_t(tape, q_in, Some(e), &step.attn1, config.heads);
    let (_pre, z_tilde) = deformable_attention_t(
        tape,
        q_s,
        positions,
        scene,
        &step.deform,
        config.heads,
        config.points,
    );
    let q_p = self_attention_t(tape, z_tilde, None, &step.attn2, config.heads);
    let out9 = pose_head_t(tape, q_p, &step.head);
    let (r_new, gamma_new) = apply_offset_t(tape, r_prev, gamma_prev, out9)?;
    Ok(StepOutput {
        rotation: r_new,
        gamma: gamma_new,
        q_next: z_tilde,
        offset: out9,
        embed: e,
    })
}

/// The full cascade as tape variables.
pub(crate) struct CascadeGraph {
    /// `(R, gamma)` per iteration, coarse first; length `steps + 1`.
    pub states: Vec<(Var, Var)>,
    /// Query per iteration (`q0` first); length `steps + 1`.
    pub queries: Vec<Var>,
    /// Raw `(1,9)` offset per refinement step; length `steps`.
    pub offsets: Vec<Var>,
}

pub(crate) fn cascade_t(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    config: &RefinerConfig,
    scene: &SceneConsts,
    pyramid: &FeaturePyramid,
) -> Result<CascadeGraph, RefinerError> {
    let pooled = pooled_last_level(tape, pyramid);
    let coarse = coarse_vars(vars);
    let state0 = coarse_t(tape, pooled, &coarse, scene)?;

    let mut states = vec![state0];
    let mut queries = vec![var(vars, "q0")];
    let mut offsets = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let set = if config.shared_steps { 0 } else { t };
        let step = step_vars(vars, set);
        let (r_prev, gamma_prev) = *states.last().unwrap();
        let q_prev = *queries.last().unwrap();
        let out = refine_step_t(tape, r_prev, gamma_prev, q_prev, &step, scene, config)?;
        states.push((out.rotation, out.gamma));
        queries.push(out.q_next);
        offsets.push(out.offset);
    }
    Ok(CascadeGraph {
        states,
        queries,
        offsets,
    })
}

/// Read a `(3,3)` rotation value off the tape.
pub(crate) fn rotation_value(tape: &Tape, r: Var) -> Mat3 {
    Mat3::from_row_slice(tape.value(r).data())
}

/// Read a `(1,3)` gamma value off the tape.
pub(crate) fn gamma_value(tape: &Tape, gamma: Var) -> SiteTranslation {
    let d = tape.value(gamma).data();
    SiteTranslation::new(d[0], d[1], d[2])
}
