//! Runtime invariant suite behind `crt6d selfcheck`.
//!
//! Each check re-derives the expected behaviour with an independent oracle
//! (nested-loop attention, quadratic greedy FPS, central finite differences)
//! rather than trusting the library's own internals, so a green table
//! certifies the numerical core on the machine it runs on.

use std::path::Path;

use crt6d::geometry::{
    allo_to_ego, back_project, ego_to_allo, project, recover_rotation, site_decode, site_encode,
    CameraIntrinsics, CropFrame, Mat3, Pose, Rotation6D, Vec2, Vec3,
};
use crt6d::keypoints::{default_seed_index, farthest_point_sample, ObjectModel};
use crt6d::losses::{lambda_schedule, LossConfig};
use crt6d::metrics::{add_distance, add_s_accuracy, adds_distance, auc_add};
use crt6d::pyramid::{bilinear_sample, FeaturePyramid};
use crt6d::refiner::{
    cascade, checkpoint_from_bytes, checkpoint_to_bytes, deformable_attention, self_attention,
    DeformWeights, ParamStore, RefinerConfig, SelfAttnWeights,
};
use crt6d::synth::{
    demo_object_model, generate_scene, scene_gradient, scene_loss, PyramidSpec, SceneConfig,
};
use crt6d::tape::LAYER_NORM_EPS;
use crt6d::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check; `detail` explains a failure and is empty on
/// success.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str) -> Self {
        Self {
            name,
            passed: true,
            detail: String::new(),
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self {
            name,
            passed: false,
            detail,
        }
    }
}

/// Run every check in a fixed order. `checkpoint` optionally adds a named
/// check that loads and validates the given checkpoint file.
pub fn run_all(checkpoint: Option<&Path>) -> Vec<CheckResult> {
    let mut results = vec![
        check_geometry(),
        check_fps(),
        check_attention(),
        check_gradcheck(),
        check_identity_cascade(),
        check_metrics(),
    ];
    results.push(check_checkpoint(checkpoint));
    results
}

fn rand_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Rotation recovery orthonormality plus site, projection and
/// allocentric/egocentric round-trips on 10,000 random draws.
pub fn check_geometry() -> CheckResult {
    const NAME: &str = "geometry";
    const TOL: f64 = 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let k_cam = CameraIntrinsics {
        fx: 600.0,
        fy: 590.0,
        cx: 320.0,
        cy: 240.0,
    };
    for i in 0..10_000 {
        let repr = Rotation6D::new(rand_vec3(&mut rng, 2.0), rand_vec3(&mut rng, 2.0));
        let r = match recover_rotation(&repr) {
            Ok(r) => r,
            Err(e) => return CheckResult::fail(NAME, format!("draw {i}: {e}")),
        };
        let gram = r.transpose() * r - Mat3::identity();
        let ortho = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if ortho > TOL {
            return CheckResult::fail(NAME, format!("draw {i}: orthonormality error {ortho:e}"));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > TOL {
            return CheckResult::fail(NAME, format!("draw {i}: determinant {det}"));
        }

        // Site encoding round-trip on a random crop.
        let crop = CropFrame::new(
            [
                rng.random_range(120.0..520.0),
                rng.random_range(120.0..360.0),
            ],
            rng.random_range(60.0..320.0),
            rng.random_range(60.0..320.0),
            640.0,
        );
        let center = Vec2::new(
            crop.center[0] + rng.random_range(-30.0..30.0),
            crop.center[1] + rng.random_range(-30.0..30.0),
        );
        let t_z = rng.random_range(0.3..3.0);
        let site = match site_encode(&center, t_z, &crop) {
            Ok(s) => s,
            Err(e) => return CheckResult::fail(NAME, format!("draw {i}: site encode: {e}")),
        };
        let (back_center, back_z) = match site_decode(&site, &crop) {
            Ok(v) => v,
            Err(e) => return CheckResult::fail(NAME, format!("draw {i}: site decode: {e}")),
        };
        let site_err = (back_center - center).norm().max((back_z - t_z).abs());
        if site_err > TOL {
            return CheckResult::fail(NAME, format!("draw {i}: site round-trip error {site_err:e}"));
        }

        // Projection round-trip at known depth.
        let p_cam = Vec3::new(
            rng.random_range(-0.8..0.8),
            rng.random_range(-0.6..0.6),
            t_z,
        );
        let px = match project(&p_cam, &k_cam) {
            Ok(p) => p,
            Err(e) => return CheckResult::fail(NAME, format!("draw {i}: project: {e}")),
        };
        let back = back_project(&px, p_cam.z, &k_cam);
        let proj_err = (back - p_cam).norm();
        if proj_err > TOL {
            return CheckResult::fail(
                NAME,
                format!("draw {i}: projection round-trip error {proj_err:e}"),
            );
        }

        // Allocentric/egocentric conversion round-trip.
        let allo = match ego_to_allo(&r, &p_cam) {
            Ok(a) => a,
            Err(e) => return CheckResult::fail(NAME, format!("draw {i}: ego_to_allo: {e}")),
        };
        let ego = match allo_to_ego(&allo, &p_cam) {
            Ok(a) => a,
            Err(e) => return CheckResult::fail(NAME, format!("draw {i}: allo_to_ego: {e}")),
        };
        let allo_err = (ego - r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if allo_err > TOL {
            return CheckResult::fail(NAME, format!("draw {i}: allo round-trip error {allo_err:e}"));
        }
    }
    CheckResult::pass(NAME)
}

/// Library FPS against an independently written O(n²k) greedy reference on
/// 200 random clouds: the selected points must agree exactly.
pub fn check_fps() -> CheckResult {
    const NAME: &str = "fps";
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..200 {
        let n = rng.random_range(4..=256);
        let points: Vec<Vec3> = (0..n).map(|_| rand_vec3(&mut rng, 0.5)).collect();
        let k = rng.random_range(1..=n.min(32));
        let model = match ObjectModel::new(points.clone(), vec![]) {
            Ok(m) => m,
            Err(e) => return CheckResult::fail(NAME, format!("case {case}: {e}")),
        };
        let seed = match default_seed_index(&points) {
            Ok(s) => s,
            Err(e) => return CheckResult::fail(NAME, format!("case {case}: {e}")),
        };
        let got = match farthest_point_sample(&model, k, seed) {
            Ok(s) => s.keypoints,
            Err(e) => return CheckResult::fail(NAME, format!("case {case}: {e}")),
        };

        // Quadratic greedy reference: max-min over squared distances, first
        // index wins ties.
        let mut chosen = vec![seed];
        let mut min_d2: Vec<f64> = points
            .iter()
            .map(|p| (p - points[seed]).norm_squared())
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
                *d2 = d2.min((points[i] - points[best]).norm_squared());
            }
        }
        let want: Vec<Vec3> = chosen.iter().map(|&i| points[i]).collect();
        if got != want {
            return CheckResult::fail(
                NAME,
                format!("case {case}: selection diverged from greedy reference (n={n}, k={k})"),
            );
        }
    }
    CheckResult::pass(NAME)
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

fn naive_self_attention(q_in: &Tensor, e: &Tensor, w: &SelfAttnWeights, heads: usize) -> Vec<f64> {
    let (k, d) = (q_in.shape()[0], q_in.shape()[1]);
    let dh = d / heads;
    let qk: Vec<f64> = (0..k * d).map(|i| q_in.data()[i] + e.data()[i]).collect();
    let qp = naive_linear(&qk, k, d, &w.wq, None);
    let kp = naive_linear(&qk, k, d, &w.wk, None);
    let vp = naive_linear(q_in.data(), k, d, &w.wv, None);
    let mut concat = vec![0.0; k * d];
    for h in 0..heads {
        for i in 0..k {
            let mut scores = vec![0.0; k];
            for (j, score) in scores.iter_mut().enumerate() {
                let mut s = 0.0;
                for m in 0..dh {
                    s += qp[i * d + h * dh + m] * kp[j * d + h * dh + m];
                }
                *score = s / (dh as f64).sqrt();
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
    naive_ln_affine(&res, k, d, &w.ln_gain, &w.ln_bias)
}

#[allow(clippy::too_many_arguments)]
fn naive_deformable(
    q_s: &Tensor,
    positions: &[Vec2],
    pyramid: &FeaturePyramid,
    w: &DeformWeights,
    heads: usize,
    points: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (k, d) = (q_s.shape()[0], q_s.shape()[1]);
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
                    let f = bilinear_sample(pyramid.level(l), &p, pyramid.strides(l));
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
    let out = naive_ln_affine(&res, k, d, &w.ln_gain, &w.ln_bias);
    (pre, out)
}

fn toy_pyramid(rng: &mut ChaCha8Rng, base: usize, levels: usize, c: usize) -> FeaturePyramid {
    let maps: Vec<Tensor> = (0..levels)
        .map(|l| rand_tensor(rng, &[base >> l, base >> l, c], 1.0))
        .collect();
    FeaturePyramid::new(maps, 64.0).expect("toy pyramid dimensions are valid")
}

/// Self- and deformable attention against nested-loop oracles on 50 random
/// toy instances, plus the degenerate deformable case that must reproduce
/// direct pyramid sampling bit for bit.
pub fn check_attention() -> CheckResult {
    const NAME: &str = "attention";
    const TOL: f64 = 1e-10;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
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
    for case in 0..50 {
        let (k, d) = (config.keypoints, config.d_model);
        let q = rand_tensor(&mut rng, &[k, d], 1.0);
        let e = rand_tensor(&mut rng, &[k, d], 1.0);
        let w = SelfAttnWeights {
            wq: rand_tensor(&mut rng, &[d, d], 0.5),
            wk: rand_tensor(&mut rng, &[d, d], 0.5),
            wv: rand_tensor(&mut rng, &[d, d], 0.5),
            wo: rand_tensor(&mut rng, &[d, d], 0.5),
            ln_gain: rand_tensor(&mut rng, &[d], 1.0),
            ln_bias: rand_tensor(&mut rng, &[d], 1.0),
        };
        let got = match self_attention(&q, Some(&e), &w, config.heads) {
            Ok(t) => t,
            Err(err) => return CheckResult::fail(NAME, format!("case {case}: self: {err}")),
        };
        let want = naive_self_attention(&q, &e, &w, config.heads);
        let err = max_abs_diff(got.data(), &want);
        if err > TOL {
            return CheckResult::fail(NAME, format!("case {case}: self-attention error {err:e}"));
        }

        let pyramid = toy_pyramid(&mut rng, 32, config.levels, config.channels);
        let hlj = config.heads * config.levels * config.points;
        let dw = DeformWeights {
            off_w: rand_tensor(&mut rng, &[d, hlj * 2], 0.05),
            off_b: rand_tensor(&mut rng, &[hlj * 2], 0.05),
            att_w: rand_tensor(&mut rng, &[d, hlj], 0.5),
            att_b: rand_tensor(&mut rng, &[hlj], 0.5),
            val_w: rand_tensor(&mut rng, &[config.channels, d], 0.5),
            out_w: rand_tensor(&mut rng, &[d, d], 0.5),
            ln_gain: rand_tensor(&mut rng, &[d], 1.0),
            ln_bias: rand_tensor(&mut rng, &[d], 1.0),
        };
        let positions: Vec<Vec2> = (0..k)
            .map(|_| {
                Vec2::new(
                    rng.random_range(2.0..62.0),
                    rng.random_range(2.0..62.0),
                )
            })
            .collect();
        let got = match deformable_attention(&q, &positions, &pyramid, &dw, &config) {
            Ok(o) => o,
            Err(err) => return CheckResult::fail(NAME, format!("case {case}: deform: {err}")),
        };
        let (want_pre, want_out) =
            naive_deformable(&q, &positions, &pyramid, &dw, config.heads, config.points);
        let err = max_abs_diff(got.per_head.data(), &want_pre)
            .max(max_abs_diff(got.output.data(), &want_out));
        if err > TOL {
            return CheckResult::fail(
                NAME,
                format!("case {case}: deformable attention error {err:e}"),
            );
        }
    }

    // Degenerate single-slot case: the softmax weight is exactly 1, zero
    // offsets leave positions untouched, and identity value/output
    // projections pass features straight through, so the pre-projection rows
    // must equal direct bilinear samples bit for bit.
    let degen = RefinerConfig {
        d_model: 8,
        heads: 1,
        points: 1,
        levels: 1,
        keypoints: 8,
        steps: 1,
        pos_embed_freqs: 2,
        channels: 8,
        shared_steps: false,
    };
    let d = degen.d_model;
    let pyramid = toy_pyramid(&mut rng, 16, 1, degen.channels);
    let q = rand_tensor(&mut rng, &[degen.keypoints, d], 1.0);
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    let dw = DeformWeights {
        off_w: Tensor::new(&[d, 2], vec![0.0; d * 2]),
        off_b: Tensor::new(&[2], vec![0.0; 2]),
        att_w: rand_tensor(&mut rng, &[d, 1], 0.5),
        att_b: rand_tensor(&mut rng, &[1], 0.5),
        val_w: Tensor::new(&[d, d], eye.clone()),
        out_w: Tensor::new(&[d, d], eye),
        ln_gain: rand_tensor(&mut rng, &[d], 1.0),
        ln_bias: rand_tensor(&mut rng, &[d], 1.0),
    };
    let positions: Vec<Vec2> = (0..degen.keypoints)
        .map(|_| Vec2::new(rng.random_range(1.0..15.0), rng.random_range(1.0..15.0)))
        .collect();
    let got = match deformable_attention(&q, &positions, &pyramid, &dw, &degen) {
        Ok(o) => o,
        Err(err) => return CheckResult::fail(NAME, format!("degenerate: {err}")),
    };
    for (i, p) in positions.iter().enumerate() {
        let direct = bilinear_sample(pyramid.level(0), p, pyramid.strides(0));
        let row = &got.per_head.data()[i * d..(i + 1) * d];
        if row != direct.as_slice() {
            return CheckResult::fail(
                NAME,
                format!("degenerate: row {i} differs from direct sampling"),
            );
        }
    }
    CheckResult::pass(NAME)
}

/// Analytic cascade-loss gradient for every parameter of a two-step toy
/// refiner against central finite differences.
pub fn check_gradcheck() -> CheckResult {
    const NAME: &str = "gradcheck";
    const H: f64 = 1e-5;
    const REL_TOL: f64 = 1e-3;
    const ABS_FLOOR: f64 = 1e-8;
    let config = RefinerConfig {
        d_model: 16,
        heads: 2,
        points: 2,
        levels: 2,
        keypoints: 6,
        steps: 2,
        pos_embed_freqs: 4,
        channels: 8,
        shared_steps: false,
    };
    let scene_cfg = SceneConfig {
        pyramid: PyramidSpec {
            levels: 2,
            channels: 8,
            base_resolution: 8,
            mix_seed: 17,
        },
        ..SceneConfig::default()
    };
    let run = || -> Result<(f64, String), String> {
        let model = demo_object_model(96, 5).map_err(|e| e.to_string())?;
        let scene = generate_scene(&model, 42, &scene_cfg).map_err(|e| e.to_string())?;
        let seed = default_seed_index(&model.points).map_err(|e| e.to_string())?;
        let kps = farthest_point_sample(&model, config.keypoints, seed)
            .map_err(|e| e.to_string())?
            .keypoints;
        let params = ParamStore::init(&config, 3);
        let loss_cfg = LossConfig::scheduled(3.0, config.steps, 0.5).map_err(|e| e.to_string())?;
        let (_, analytic) =
            scene_gradient(&params, &scene, &kps, &config, &loss_cfg).map_err(|e| e.to_string())?;

        let mut worst = 0.0f64;
        let mut worst_at = 0usize;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.data_mut()[i] += H;
            let lp = scene_loss(&plus, &scene, &kps, &config, &loss_cfg)
                .map_err(|e| e.to_string())?;
            let mut minus = params.clone();
            minus.data_mut()[i] -= H;
            let lm = scene_loss(&minus, &scene, &kps, &config, &loss_cfg)
                .map_err(|e| e.to_string())?;
            let fd = (lp - lm) / (2.0 * H);
            let a = analytic[i];
            let err = if a.abs() < ABS_FLOOR {
                if (a - fd).abs() > ABS_FLOOR {
                    return Err(format!(
                        "param {i}: analytic {a:e} vs finite difference {fd:e} (absolute)"
                    ));
                }
                0.0
            } else {
                (a - fd).abs() / a.abs().max(fd.abs())
            };
            if err > worst {
                worst = err;
                worst_at = i;
            }
        }
        Ok((worst, format!("worst relative error {worst:e} at parameter {worst_at}")))
    };
    match run() {
        Ok((worst, detail)) => {
            if worst < REL_TOL {
                CheckResult::pass(NAME)
            } else {
                CheckResult::fail(NAME, detail)
            }
        }
        Err(e) => CheckResult::fail(NAME, e),
    }
}

/// Randomized parameters with zeroed pose heads must leave every cascade
/// state bit-identical to the coarse estimate, and the λ schedule must
/// reproduce its closed form.
pub fn check_identity_cascade() -> CheckResult {
    const NAME: &str = "identity-cascade";
    let config = RefinerConfig {
        d_model: 16,
        heads: 2,
        points: 2,
        levels: 2,
        keypoints: 6,
        steps: 3,
        pos_embed_freqs: 4,
        channels: 8,
        shared_steps: false,
    };
    let scene_cfg = SceneConfig {
        pyramid: PyramidSpec {
            levels: 2,
            channels: 8,
            base_resolution: 8,
            mix_seed: 17,
        },
        ..SceneConfig::default()
    };
    let run = || -> Result<(), String> {
        let model = demo_object_model(96, 5).map_err(|e| e.to_string())?;
        let scene = generate_scene(&model, 7, &scene_cfg).map_err(|e| e.to_string())?;
        let seed = default_seed_index(&model.points).map_err(|e| e.to_string())?;
        let kps = farthest_point_sample(&model, config.keypoints, seed)
            .map_err(|e| e.to_string())?
            .keypoints;
        let mut params = ParamStore::init(&config, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for v in params.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        params.zero_pose_heads();
        let trace = cascade(
            &config,
            &params,
            &scene.pyramid,
            &kps,
            &scene.crop,
            &scene.k_cam,
        )
        .map_err(|e| e.to_string())?;
        if trace.poses.len() != config.steps + 1 {
            return Err(format!("expected {} poses, got {}", config.steps + 1, trace.poses.len()));
        }
        let same = |a: &Pose, b: &Pose| {
            a.rotation
                .iter()
                .zip(b.rotation.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
                && a.translation
                    .iter()
                    .zip(b.translation.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        for (t, pose) in trace.poses.iter().enumerate().skip(1) {
            if !same(&trace.poses[0], pose) {
                return Err(format!("pose {t} differs from the coarse pose"));
            }
        }

        for (progress, n, want) in [
            (0.0, 3, 0.0),
            (0.19, 3, 0.0),
            (0.2, 3, 2.0 / 3.0),
            (0.9, 3, 2.0 / 3.0),
            (1.0, 3, 2.0 / 3.0),
            (0.5, 1, 0.0),
            (0.5, 0, 1.0),
        ] {
            let got = lambda_schedule(progress, n);
            if got != want {
                return Err(format!(
                    "lambda_schedule({progress}, {n}) = {got}, expected {want}"
                ));
            }
        }
        Ok(())
    };
    match run() {
        Ok(()) => CheckResult::pass(NAME),
        Err(e) => CheckResult::fail(NAME, e),
    }
}

/// ADD-S dominance over ADD on 1,000 random instances plus closed-form AUC
/// and threshold fixtures.
pub fn check_metrics() -> CheckResult {
    const NAME: &str = "metrics";
    let run = || -> Result<(), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        for case in 0..1_000 {
            let points: Vec<Vec3> = (0..30).map(|_| rand_vec3(&mut rng, 0.1)).collect();
            let mut pose = || -> Result<Pose, String> {
                let repr = Rotation6D::new(rand_vec3(&mut rng, 2.0), rand_vec3(&mut rng, 2.0));
                let r = recover_rotation(&repr).map_err(|e| e.to_string())?;
                let t = Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.5..1.5),
                );
                Ok(Pose::new(r, t))
            };
            let a = pose()?;
            let b = pose()?;
            let add = add_distance(&a, &b, &points).map_err(|e| e.to_string())?;
            let adds = adds_distance(&a, &b, &points).map_err(|e| e.to_string())?;
            if adds > add + 1e-12 {
                return Err(format!("case {case}: ADD-S {adds} exceeds ADD {add}"));
            }
        }

        let auc_zero = auc_add(&[0.0; 8], 0.10).map_err(|e| e.to_string())?;
        if auc_zero != 1.0 {
            return Err(format!("AUC of perfect distances = {auc_zero}, expected 1"));
        }
        let auc_half = auc_add(&[0.05], 0.10).map_err(|e| e.to_string())?;
        if (auc_half - 0.5).abs() > 1e-12 {
            return Err(format!("AUC of single 0.05 m distance = {auc_half}, expected 0.5"));
        }
        // Threshold 0.1·diameter with diameter 1.0 gives exactly 0.1, so the
        // middle distance sits on the boundary and must not count.
        let acc = add_s_accuracy(&[0.05, 0.1, 0.2], 1.0, 0.1).map_err(|e| e.to_string())?;
        if (acc - 1.0 / 3.0).abs() > 1e-15 {
            return Err(format!("thresholded accuracy = {acc}, expected 1/3"));
        }
        Ok(())
    };
    match run() {
        Ok(()) => CheckResult::pass(NAME),
        Err(e) => CheckResult::fail(NAME, e),
    }
}

/// Checkpoint integrity: with no path, a serialize/parse round-trip of a
/// freshly initialized store; with a path, the file must load as a valid
/// checkpoint.
pub fn check_checkpoint(path: Option<&Path>) -> CheckResult {
    const NAME: &str = "checkpoint";
    match path {
        None => {
            let config = RefinerConfig {
                keypoints: 16,
                channels: 16,
                ..RefinerConfig::default()
            };
            let params = ParamStore::init(&config, 1);
            let bytes = checkpoint_to_bytes(&config, &params);
            match checkpoint_from_bytes(&bytes) {
                Ok((c2, p2)) => {
                    if c2 != config {
                        CheckResult::fail(NAME, "config changed across round-trip".into())
                    } else if p2.data() != params.data() {
                        CheckResult::fail(NAME, "parameters changed across round-trip".into())
                    } else {
                        CheckResult::pass(NAME)
                    }
                }
                Err(e) => CheckResult::fail(NAME, format!("round-trip parse: {e}")),
            }
        }
        Some(p) => match std::fs::read(p) {
            Ok(bytes) => match checkpoint_from_bytes(&bytes) {
                Ok(_) => CheckResult::pass(NAME),
                Err(e) => CheckResult::fail(NAME, format!("{}: {e}", p.display())),
            },
            Err(e) => CheckResult::fail(NAME, format!("{}: {e}", p.display())),
        },
    }
}
