//! Training objectives: point-matching rotation loss, γ-space position loss,
//! their symmetry-aware dispatch, and the cascaded total with its λ schedule.

use thiserror::Error;

use crate::geometry::{Mat3, SiteTranslation, Vec3};
use crate::keypoints::ObjectModel;
use crate::refiner::graph;
use crate::refiner::RefinerState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Training-progress fraction below which the coarse term gets zero weight.
pub const LAMBDA_WARMUP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight on the rotation term inside each step loss.
    pub alpha: f64,
    /// Weight on the coarse term; the refinement sum gets `1 − lambda`.
    pub lambda: f64,
    /// Refinement step count N; `total_loss` expects N+1 states.
    pub n_refiners: usize,
    /// Fraction of training completed, in `[0,1]`.
    pub training_progress: f64,
}

impl LossConfig {
    pub fn new(
        alpha: f64,
        lambda: f64,
        n_refiners: usize,
        training_progress: f64,
    ) -> Result<Self, LossError> {
        let cfg = Self {
            alpha,
            lambda,
            n_refiners,
            training_progress,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// λ chosen by the schedule at `training_progress`.
    pub fn scheduled(
        alpha: f64,
        n_refiners: usize,
        training_progress: f64,
    ) -> Result<Self, LossError> {
        Self::new(
            alpha,
            lambda_schedule(training_progress, n_refiners),
            n_refiners,
            training_progress,
        )
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(LossError::BadConfig(format!(
                "alpha {} must be positive and finite",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(LossError::BadConfig(format!(
                "lambda {} must lie in [0,1]",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.training_progress) {
            return Err(LossError::BadConfig(format!(
                "training progress {} must lie in [0,1]",
                self.training_progress
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error("object model has no points or no symmetries")]
    EmptyModel,
    #[error("expected {expected} pose states, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Mean over model points of the L1 distance between the two rotated copies.
pub fn rotation_loss(r_pred: &Mat3, r_gt: &Mat3, model_points: &[Vec3]) -> Result<f64, LossError> {
    if model_points.is_empty() {
        return Err(LossError::EmptyModel);
    }
    let mut total = 0.0;
    for x in model_points {
        let d = r_pred * x - r_gt * x;
        total += d.x.abs() + d.y.abs() + d.z.abs();
    }
    Ok(total / model_points.len() as f64)
}

/// Rotation loss minimized over the model's symmetry group, applied on the
/// ground-truth side.
pub fn rotation_loss_sym(
    r_pred: &Mat3,
    r_gt: &Mat3,
    model: &ObjectModel,
) -> Result<f64, LossError> {
    if model.symmetries.is_empty() {
        return Err(LossError::EmptyModel);
    }
    let mut best = f64::INFINITY;
    for s in &model.symmetries {
        best = best.min(rotation_loss(r_pred, &(r_gt * s), &model.points)?);
    }
    Ok(best)
}

/// L1 norm of the site-translation difference; symmetry-invariant by
/// construction.
pub fn position_loss(site_pred: &SiteTranslation, site_gt: &SiteTranslation) -> f64 {
    (site_pred.gamma_x - site_gt.gamma_x).abs()
        + (site_pred.gamma_y - site_gt.gamma_y).abs()
        + (site_pred.gamma_z - site_gt.gamma_z).abs()
}

/// Per-state loss `α·L_R + L_pos`, with the symmetric rotation variant for
/// symmetric models.
pub fn step_loss(
    pred: &RefinerState,
    gt: &RefinerState,
    model: &ObjectModel,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let rot = if model.is_symmetric() {
        rotation_loss_sym(&pred.rotation, &gt.rotation, model)?
    } else {
        rotation_loss(&pred.rotation, &gt.rotation, &model.points)?
    };
    Ok(cfg.alpha * rot + position_loss(&pred.gamma, &gt.gamma))
}

/// Cascade loss `λ·L⁰ + (1−λ)·ΣᵢLⁱ` over the N+1 states, coarse first.
pub fn total_loss(
    states: &[RefinerState],
    gt: &RefinerState,
    model: &ObjectModel,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    if states.len() != cfg.n_refiners + 1 {
        return Err(LossError::LengthMismatch {
            expected: cfg.n_refiners + 1,
            got: states.len(),
        });
    }
    let coarse = step_loss(&states[0], gt, model, cfg)?;
    let mut refine = 0.0;
    for s in &states[1..] {
        refine += step_loss(s, gt, model, cfg)?;
    }
    Ok(cfg.lambda * coarse + (1.0 - cfg.lambda) * refine)
}

/// 0 during the first 20% of training, then `(N−1)/N` (the boundary belongs
/// to the late phase). With no refinement steps all weight stays on the
/// coarse term.
pub fn lambda_schedule(progress: f64, n_refiners: usize) -> f64 {
    if n_refiners == 0 {
        return 1.0;
    }
    if progress < LAMBDA_WARMUP {
        0.0
    } else {
        (n_refiners as f64 - 1.0) / n_refiners as f64
    }
}

// ---- tape builders (training path) ----

pub(crate) fn rotation_loss_t(
    tape: &mut Tape,
    r_pred: Var,
    r_gt: &Mat3,
    points: &[Vec3],
) -> Result<Var, LossError> {
    if points.is_empty() {
        return Err(LossError::EmptyModel);
    }
    let n = points.len();
    let mut pdata = Vec::with_capacity(n * 3);
    let mut gdata = Vec::with_capacity(n * 3);
    for x in points {
        pdata.extend_from_slice(&[x.x, x.y, x.z]);
        let g = r_gt * x;
        gdata.extend_from_slice(&[g.x, g.y, g.z]);
    }
    let pts = tape.leaf(Tensor::new(&[n, 3], pdata));
    let gt = tape.leaf(Tensor::new(&[n, 3], gdata));
    let rt = tape.transpose(r_pred);
    let rotated = tape.matmul(pts, rt);
    let diff = tape.sub(rotated, gt);
    let abs = tape.abs(diff);
    let total = tape.sum_all(abs);
    Ok(tape.mul_scalar(total, 1.0 / n as f64))
}

/// Symmetric rotation loss on the tape: the minimizing symmetry is chosen
/// eagerly from the current values and the graph is built against that single
/// candidate (a valid subgradient of the min).
pub(crate) fn rotation_loss_sym_t(
    tape: &mut Tape,
    r_pred: Var,
    r_gt: &Mat3,
    model: &ObjectModel,
) -> Result<Var, LossError> {
    if model.symmetries.is_empty() {
        return Err(LossError::EmptyModel);
    }
    let current = graph::rotation_value(tape, r_pred);
    let mut best = (0usize, f64::INFINITY);
    for (i, s) in model.symmetries.iter().enumerate() {
        let l = rotation_loss(&current, &(r_gt * s), &model.points)?;
        if l < best.1 {
            best = (i, l);
        }
    }
    rotation_loss_t(
        tape,
        r_pred,
        &(r_gt * model.symmetries[best.0]),
        &model.points,
    )
}

pub(crate) fn position_loss_t(tape: &mut Tape, gamma_pred: Var, site_gt: &SiteTranslation) -> Var {
    let gt = tape.leaf(Tensor::new(
        &[1, 3],
        vec![site_gt.gamma_x, site_gt.gamma_y, site_gt.gamma_z],
    ));
    let diff = tape.sub(gamma_pred, gt);
    let abs = tape.abs(diff);
    tape.sum_all(abs)
}

pub(crate) fn step_loss_t(
    tape: &mut Tape,
    r_pred: Var,
    gamma_pred: Var,
    gt: &RefinerState,
    model: &ObjectModel,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let rot = if model.is_symmetric() {
        rotation_loss_sym_t(tape, r_pred, &gt.rotation, model)?
    } else {
        rotation_loss_t(tape, r_pred, &gt.rotation, &model.points)?
    };
    let pos = position_loss_t(tape, gamma_pred, &gt.gamma);
    let scaled = tape.mul_scalar(rot, cfg.alpha);
    Ok(tape.add(scaled, pos))
}

/// Cascade loss over tape-resident states `(rotation, gamma)`, coarse first.
pub(crate) fn total_loss_t(
    tape: &mut Tape,
    states: &[(Var, Var)],
    gt: &RefinerState,
    model: &ObjectModel,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    if states.len() != cfg.n_refiners + 1 {
        return Err(LossError::LengthMismatch {
            expected: cfg.n_refiners + 1,
            got: states.len(),
        });
    }
    let coarse = step_loss_t(tape, states[0].0, states[0].1, gt, model, cfg)?;
    let mut out = tape.mul_scalar(coarse, cfg.lambda);
    let mut refine: Option<Var> = None;
    for &(r, g) in &states[1..] {
        let term = step_loss_t(tape, r, g, gt, model, cfg)?;
        refine = Some(match refine {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    if let Some(sum) = refine {
        let scaled = tape.mul_scalar(sum, 1.0 - cfg.lambda);
        out = tape.add(out, scaled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{recover_rotation, Rotation6D};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const FLIP_Z: Mat3 = Mat3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);

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

    fn single_point_model(x: Vec3) -> ObjectModel {
        ObjectModel {
            points: vec![x],
            diameter: 2.0 * x.norm(),
            symmetric: false,
            symmetries: vec![Mat3::identity()],
        }
    }

    fn box_model(symmetric: bool) -> ObjectModel {
        let pts = vec![
            Vec3::new(0.05, 0.02, 0.01),
            Vec3::new(-0.05, 0.02, -0.01),
            Vec3::new(0.01, -0.04, 0.03),
            Vec3::new(-0.02, 0.0, -0.03),
        ];
        let extra = if symmetric { vec![FLIP_Z] } else { vec![] };
        ObjectModel::new(pts, extra).unwrap()
    }

    fn state(r: Mat3, g: SiteTranslation) -> RefinerState {
        RefinerState {
            rotation: r,
            gamma: g,
        }
    }

    #[test]
    fn rotation_loss_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_rotation(&mut rng);
        let pts = vec![Vec3::new(0.1, -0.2, 0.3), Vec3::new(-0.4, 0.0, 0.2)];
        assert_eq!(rotation_loss(&r, &r, &pts).unwrap(), 0.0);

        // 180° flip about z against identity, single point on the x-axis.
        let loss = rotation_loss(&FLIP_Z, &Mat3::identity(), &[Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(loss, 2.0);

        assert!(matches!(
            rotation_loss(&r, &r, &[]),
            Err(LossError::EmptyModel)
        ));
    }

    #[test]
    fn rotation_loss_matches_per_point_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_rotation(&mut rng);
        let b = random_rotation(&mut rng);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                )
            })
            .collect();
        let got = rotation_loss(&a, &b, &pts).unwrap();
        let mut want = 0.0;
        for x in &pts {
            let pa = a * x;
            let pb = b * x;
            want += (pa.x - pb.x).abs() + (pa.y - pb.y).abs() + (pa.z - pb.z).abs();
        }
        want /= pts.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn symmetric_rotation_loss_absorbs_the_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = box_model(true);
        let r_gt = random_rotation(&mut rng);
        let r_pred = r_gt * FLIP_Z;
        assert_eq!(rotation_loss_sym(&r_pred, &r_gt, &model).unwrap(), 0.0);
        assert!(rotation_loss(&r_pred, &r_gt, &model.points).unwrap() > 0.01);

        // Identity-only group reduces to the plain loss.
        let plain_model = box_model(false);
        let val = rotation_loss_sym(&r_pred, &r_gt, &plain_model).unwrap();
        assert_eq!(
            val,
            rotation_loss(&r_pred, &r_gt, &plain_model.points).unwrap()
        );
    }

    #[test]
    fn symmetric_loss_never_exceeds_plain_and_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // An 8-fold rotation group about z.
        let mut extra = Vec::new();
        for k in 1..8 {
            let a = std::f64::consts::TAU * k as f64 / 8.0;
            let (s, c) = a.sin_cos();
            extra.push(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0));
        }
        let model = ObjectModel::new(box_model(false).points, extra).unwrap();
        for _ in 0..100 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let sym = rotation_loss_sym(&a, &b, &model).unwrap();
            let plain = rotation_loss(&a, &b, &model.points).unwrap();
            assert!(sym <= plain + 1e-15);
            let brute = model
                .symmetries
                .iter()
                .map(|s| rotation_loss(&a, &(b * s), &model.points).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(sym, brute);
        }
    }

    #[test]
    fn position_loss_fixtures() {
        let a = SiteTranslation::new(0.1, -0.2, 3.0);
        let b = SiteTranslation::new(0.0, 0.0, 3.5);
        assert_eq!(position_loss(&a, &a), 0.0);
        assert!((position_loss(&a, &b) - 0.8).abs() < 1e-15);
        assert_eq!(position_loss(&a, &b), position_loss(&b, &a));
    }

    #[test]
    fn step_loss_weighted_sum_fixture() {
        // L_R = 0.5 via a quarter-unit point under the z-flip; L_pos = 0.2.
        let model = single_point_model(Vec3::new(0.25, 0.0, 0.0));
        let cfg = LossConfig::new(3.0, 0.5, 1, 0.5).unwrap();
        let pred = state(FLIP_Z, SiteTranslation::new(0.2, 0.0, 1.0));
        let gt = state(Mat3::identity(), SiteTranslation::new(0.0, 0.0, 1.0));
        let loss = step_loss(&pred, &gt, &model, &cfg).unwrap();
        assert_eq!(loss, 1.7);

        // Doubling α doubles only the rotation contribution.
        let cfg2 = LossConfig::new(6.0, 0.5, 1, 0.5).unwrap();
        let loss2 = step_loss(&pred, &gt, &model, &cfg2).unwrap();
        assert!((loss2 - loss - 3.0 * 0.5).abs() < 1e-12);

        let exact = step_loss(&gt, &gt, &model, &cfg).unwrap();
        assert_eq!(exact, 0.0);
    }

    #[test]
    fn total_loss_fixtures() {
        let model = single_point_model(Vec3::new(0.25, 0.0, 0.0));
        let gt = state(Mat3::identity(), SiteTranslation::new(0.0, 0.0, 1.0));
        let pred = state(FLIP_Z, SiteTranslation::new(0.2, 0.0, 1.0));
        // Each state has the same per-step loss ℓ = 1.7 (α = 3).
        let states = vec![pred, pred, pred, pred];
        let ell = 1.7;

        let cfg = LossConfig::new(3.0, 2.0 / 3.0, 3, 0.5).unwrap();
        let total = total_loss(&states, &gt, &model, &cfg).unwrap();
        assert!((total - 5.0 / 3.0 * ell).abs() < 1e-12);

        let only_coarse = LossConfig::new(3.0, 1.0, 3, 0.5).unwrap();
        assert!((total_loss(&states, &gt, &model, &only_coarse).unwrap() - ell).abs() < 1e-15);

        let only_refine = LossConfig::new(3.0, 0.0, 3, 0.1).unwrap();
        assert!(
            (total_loss(&states, &gt, &model, &only_refine).unwrap() - 3.0 * ell).abs() < 1e-12
        );

        assert!(matches!(
            total_loss(&states[..2], &gt, &model, &cfg),
            Err(LossError::LengthMismatch {
                expected: 4,
                got: 2
            })
        ));
    }

    #[test]
    fn lambda_schedule_fixtures() {
        assert_eq!(lambda_schedule(0.1, 3), 0.0);
        assert_eq!(lambda_schedule(0.5, 3), 2.0 / 3.0);
        assert_eq!(lambda_schedule(0.2, 3), 2.0 / 3.0);
        assert_eq!(lambda_schedule(0.19999, 4), 0.0);
        assert_eq!(lambda_schedule(1.0, 1), 0.0);
        assert_eq!(lambda_schedule(0.9, 0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(0.0, 0.5, 3, 0.5).is_err());
        assert!(LossConfig::new(3.0, 1.5, 3, 0.5).is_err());
        assert!(LossConfig::new(3.0, 0.5, 3, 2.0).is_err());
        let s = LossConfig::scheduled(3.0, 3, 0.5).unwrap();
        assert_eq!(s.lambda, 2.0 / 3.0);
        let s = LossConfig::scheduled(3.0, 3, 0.05).unwrap();
        assert_eq!(s.lambda, 0.0);
    }

    fn leaf_state(tape: &mut Tape, s: &RefinerState) -> (Var, Var) {
        let mut r = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                r.push(s.rotation[(i, j)]);
            }
        }
        (
            tape.leaf(Tensor::new(&[3, 3], r)),
            tape.leaf(Tensor::new(
                &[1, 3],
                vec![s.gamma.gamma_x, s.gamma.gamma_y, s.gamma.gamma_z],
            )),
        )
    }

    #[test]
    fn tape_losses_match_plain_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for symmetric in [false, true] {
            let model = box_model(symmetric);
            let gt = state(
                random_rotation(&mut rng),
                SiteTranslation::new(0.02, -0.05, 1.1),
            );
            let states: Vec<RefinerState> = (0..3)
                .map(|_| {
                    state(
                        random_rotation(&mut rng),
                        SiteTranslation::new(
                            rng.random_range(-0.2..0.2),
                            rng.random_range(-0.2..0.2),
                            rng.random_range(0.5..2.0),
                        ),
                    )
                })
                .collect();
            let cfg = LossConfig::new(3.0, 2.0 / 3.0, 2, 0.5).unwrap();
            let plain = total_loss(&states, &gt, &model, &cfg).unwrap();

            let mut tape = Tape::new();
            let vars: Vec<(Var, Var)> = states.iter().map(|s| leaf_state(&mut tape, s)).collect();
            let loss = total_loss_t(&mut tape, &vars, &gt, &model, &cfg).unwrap();
            let got = tape.value(loss).data()[0];
            assert!(
                (got - plain).abs() < 1e-12,
                "symmetric={symmetric}: {got} vs {plain}"
            );
        }
    }

    #[test]
    fn tape_loss_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = box_model(true);
        let gt = state(
            random_rotation(&mut rng),
            SiteTranslation::new(0.02, -0.05, 1.1),
        );
        let pred: Vec<RefinerState> = (0..2)
            .map(|_| {
                state(
                    random_rotation(&mut rng),
                    SiteTranslation::new(0.1, -0.1, 0.9),
                )
            })
            .collect();
        let cfg = LossConfig::new(3.0, 0.25, 1, 0.5).unwrap();

        // Flatten the two states into one parameter vector.
        let pack = |states: &[RefinerState]| -> Vec<f64> {
            let mut v = Vec::new();
            for s in states {
                for i in 0..3 {
                    for j in 0..3 {
                        v.push(s.rotation[(i, j)]);
                    }
                }
                v.extend([s.gamma.gamma_x, s.gamma.gamma_y, s.gamma.gamma_z]);
            }
            v
        };
        let unpack = |v: &[f64]| -> Vec<RefinerState> {
            v.chunks(12)
                .map(|c| {
                    state(
                        Mat3::from_row_slice(&c[..9]),
                        SiteTranslation::new(c[9], c[10], c[11]),
                    )
                })
                .collect()
        };
        let eval = |v: &[f64]| -> f64 {
            let states = unpack(v);
            let mut tape = Tape::new();
            let vars: Vec<(Var, Var)> = states.iter().map(|s| leaf_state(&mut tape, s)).collect();
            let loss = total_loss_t(&mut tape, &vars, &gt, &model, &cfg).unwrap();
            tape.value(loss).data()[0]
        };

        let theta = pack(&pred);
        // Analytic gradients.
        let mut tape = Tape::new();
        let vars: Vec<(Var, Var)> = pred.iter().map(|s| leaf_state(&mut tape, s)).collect();
        let loss = total_loss_t(&mut tape, &vars, &gt, &model, &cfg).unwrap();
        let grads = tape.backward(loss);
        let mut grad = Vec::new();
        for &(r, g) in &vars {
            grad.extend_from_slice(grads.get(r).unwrap().data());
            grad.extend_from_slice(grads.get(g).unwrap().data());
        }

        let h = 1e-6;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(
                (fd - grad[i]).abs() / denom < 1e-5,
                "param {i}: fd {fd} vs grad {}",
                grad[i]
            );
        }
    }

    #[test]
    fn losses_are_nonnegative_and_zero_iff_matching() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = box_model(true);
        for _ in 0..50 {
            let gt = state(
                random_rotation(&mut rng),
                SiteTranslation::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.5..2.0),
                ),
            );
            let pred = state(
                random_rotation(&mut rng),
                SiteTranslation::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(0.5..2.0),
                ),
            );
            let cfg = LossConfig::new(3.0, 0.5, 0, 0.5).unwrap();
            let l = step_loss(&pred, &gt, &model, &cfg).unwrap();
            assert!(l >= 0.0);
            assert_eq!(step_loss(&gt, &gt, &model, &cfg).unwrap(), 0.0);
            // Up-to-symmetry match also lands at zero.
            let flipped = state(gt.rotation * FLIP_Z, gt.gamma);
            assert_eq!(step_loss(&flipped, &gt, &model, &cfg).unwrap(), 0.0);
        }
    }
}
