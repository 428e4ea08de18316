//! Pose representations, conversions, projection, and the pose-update algebra.
//!
//! All rotations are 3×3 matrices in the camera frame unless a function says
//! otherwise; translations are meters. Every function here is pure and safe to
//! call from any thread.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;

/// Below this, vector norms and cross products are treated as degenerate.
pub const DEGENERACY_EPS: f64 = 1e-8;
/// Points closer to the camera plane than this cannot be projected (meters).
pub const NEAR_PLANE: f64 = 1e-6;

/// Numerical edge thresholds used by the geometric operations. The free
/// functions in this module use the defaults; the record exists so callers
/// can log or display the active constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeometryLimits {
    pub degeneracy_eps: f64,
    pub near_plane: f64,
}

impl Default for GeometryLimits {
    fn default() -> Self {
        Self {
            degeneracy_eps: DEGENERACY_EPS,
            near_plane: NEAR_PLANE,
        }
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate 6D rotation input: r1 near zero or r1, r2 near parallel")]
    DegenerateRotation,
    #[error("degenerate viewing direction: translation near zero or antiparallel to the optical axis")]
    DegenerateDirection,
    #[error("point {index} lies behind the camera (z = {z:.6e} m)")]
    BehindCamera { index: usize, z: f64 },
    #[error("invalid crop frame: {reason}")]
    InvalidCrop { reason: String },
}

/// Rigid transform from object frame to camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Largest absolute entry of `RᵀR − I`; zero for a perfect rotation.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.rotation.transpose() * self.rotation - Mat3::identity();
        m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Validity per the type's invariants: orthonormal within `tol`,
    /// determinant within `tol` of +1, and the object in front of the camera.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() < tol
            && (self.rotation.determinant() - 1.0).abs() < tol
            && self.translation.z > 0.0
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Continuous 6D rotation parameterization: the first two (unnormalized)
/// columns of the target matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    pub r1: Vec3,
    pub r2: Vec3,
}

impl Rotation6D {
    pub fn new(r1: Vec3, r2: Vec3) -> Self {
        Self { r1, r2 }
    }

    /// Representation that recovers to the identity matrix.
    pub fn identity() -> Self {
        Self {
            r1: Vec3::new(1.0, 0.0, 0.0),
            r2: Vec3::new(0.0, 1.0, 0.0),
        }
    }

    /// First two columns of `r`, which recover back to `r` exactly when `r`
    /// is a rotation.
    pub fn from_matrix(r: &Mat3) -> Self {
        Self {
            r1: r.column(0).into(),
            r2: r.column(1).into(),
        }
    }
}

/// Pinhole camera intrinsics (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Detection crop used for scale-invariant translation encoding: bbox center
/// and extent in image pixels, plus the full image scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropFrame {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    pub s_image: f64,
}

impl CropFrame {
    pub fn new(center: [f64; 2], width: f64, height: f64, s_image: f64) -> Self {
        Self {
            center,
            width,
            height,
            s_image,
        }
    }

    /// Square crop scale: the larger bbox side.
    pub fn s_bbox(&self) -> f64 {
        self.width.max(self.height)
    }

    /// Crop-to-image scale ratio.
    pub fn r_bbox(&self) -> f64 {
        self.s_bbox() / self.s_image
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.s_bbox() > 0.0) {
            return Err(GeometryError::InvalidCrop {
                reason: format!("s_bbox = {} must be positive", self.s_bbox()),
            });
        }
        if !(self.s_image > 0.0) {
            return Err(GeometryError::InvalidCrop {
                reason: format!("s_image = {} must be positive", self.s_image),
            });
        }
        Ok(())
    }
}

/// Scale-invariant translation: crop-normalized 2D offset of the projected
/// object center plus ratio-normalized depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteTranslation {
    pub gamma_x: f64,
    pub gamma_y: f64,
    pub gamma_z: f64,
}

impl SiteTranslation {
    pub fn new(gamma_x: f64, gamma_y: f64, gamma_z: f64) -> Self {
        Self {
            gamma_x,
            gamma_y,
            gamma_z,
        }
    }
}

/// Raw network output describing a relative pose correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseOffset {
    pub delta_rotation: Rotation6D,
    pub delta_gamma: Vec3,
}

/// Orthonormalize a 6D rotation representation into a rotation matrix with
/// columns `[R1 R2 R3]`: `R1 = r̂1`, `R3 = normalize(R1 × r2)`, `R2 = R3 × R1`.
pub fn recover_rotation(repr: &Rotation6D) -> Result<Mat3, GeometryError> {
    let n1 = repr.r1.norm();
    if n1 <= DEGENERACY_EPS {
        return Err(GeometryError::DegenerateRotation);
    }
    if repr.r1.cross(&repr.r2).norm() <= DEGENERACY_EPS {
        return Err(GeometryError::DegenerateRotation);
    }
    let c1 = repr.r1 / n1;
    let c3 = c1.cross(&repr.r2).normalize();
    let c2 = c3.cross(&c1);
    Ok(Mat3::from_columns(&[c1, c2, c3]))
}

/// Encode a projected object center and depth into crop-normalized form.
pub fn site_encode(
    object_center_2d: &Vec2,
    t_z: f64,
    crop: &CropFrame,
) -> Result<SiteTranslation, GeometryError> {
    crop.validate()?;
    Ok(SiteTranslation {
        gamma_x: (object_center_2d.x - crop.center[0]) / crop.s_bbox(),
        gamma_y: (object_center_2d.y - crop.center[1]) / crop.s_bbox(),
        gamma_z: t_z / crop.r_bbox(),
    })
}

/// Exact algebraic inverse of [`site_encode`].
pub fn site_decode(site: &SiteTranslation, crop: &CropFrame) -> Result<(Vec2, f64), GeometryError> {
    crop.validate()?;
    let o = Vec2::new(
        site.gamma_x * crop.s_bbox() + crop.center[0],
        site.gamma_y * crop.s_bbox() + crop.center[1],
    );
    Ok((o, site.gamma_z * crop.r_bbox()))
}

/// Lift an image point at known depth back into the camera frame.
pub fn back_project(o: &Vec2, t_z: f64, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new(
        t_z * (o.x - k.cx) / k.fx,
        t_z * (o.y - k.cy) / k.fy,
        t_z,
    )
}

/// Pinhole projection of a camera-frame point.
pub fn project(point_cam: &Vec3, k: &CameraIntrinsics) -> Result<Vec2, GeometryError> {
    if point_cam.z <= NEAR_PLANE {
        return Err(GeometryError::BehindCamera {
            index: 0,
            z: point_cam.z,
        });
    }
    Ok(Vec2::new(
        k.fx * point_cam.x / point_cam.z + k.cx,
        k.fy * point_cam.y / point_cam.z + k.cy,
    ))
}

/// Project object-frame keypoints through a pose; the error names the first
/// keypoint that falls behind the camera.
pub fn project_keypoints(
    keypoints: &[Vec3],
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vec<Vec2>, GeometryError> {
    keypoints
        .iter()
        .enumerate()
        .map(|(index, kp)| {
            let p = pose.transform_point(kp);
            project(&p, k).map_err(|e| match e {
                GeometryError::BehindCamera { z, .. } => GeometryError::BehindCamera { index, z },
                other => other,
            })
        })
        .collect()
}

/// Image-frame pixel → crop-frame pixel. The crop frame has its origin at the
/// top-left corner of the square crop of side `s_bbox` centered on the box.
pub fn image_to_crop_px(p: &Vec2, crop: &CropFrame) -> Vec2 {
    Vec2::new(
        p.x + (crop.s_bbox() / 2.0 - crop.center[0]),
        p.y + (crop.s_bbox() / 2.0 - crop.center[1]),
    )
}

/// Inverse of [`image_to_crop_px`].
pub fn crop_to_image_px(p: &Vec2, crop: &CropFrame) -> Vec2 {
    Vec2::new(
        p.x - (crop.s_bbox() / 2.0 - crop.center[0]),
        p.y - (crop.s_bbox() / 2.0 - crop.center[1]),
    )
}

/// Minimal rotation taking the optical axis `(0,0,1)` onto `t/‖t‖`, in the
/// smooth Rodrigues form `I + [v]× + [v]×²/(1+c)` with `v = ẑ × t̂`, `c = t̂_z`.
fn view_rotation(t: &Vec3) -> Result<Mat3, GeometryError> {
    let n = t.norm();
    if n <= DEGENERACY_EPS {
        return Err(GeometryError::DegenerateDirection);
    }
    let dir = t / n;
    let c = dir.z;
    if 1.0 + c <= DEGENERACY_EPS {
        return Err(GeometryError::DegenerateDirection);
    }
    let v = Vec3::new(0.0, 0.0, 1.0).cross(&dir);
    let vx = Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    Ok(Mat3::identity() + vx + vx * vx / (1.0 + c))
}

/// Convert an allocentric (viewpoint-invariant) orientation into the
/// egocentric camera-frame rotation for an object along `t`.
pub fn allo_to_ego(allocentric: &Mat3, t: &Vec3) -> Result<Mat3, GeometryError> {
    Ok(view_rotation(t)? * allocentric)
}

/// Inverse of [`allo_to_ego`].
pub fn ego_to_allo(egocentric: &Mat3, t: &Vec3) -> Result<Mat3, GeometryError> {
    Ok(view_rotation(t)?.transpose() * egocentric)
}

/// Multiplicative depth factor for a raw depth offset: `1 + tanh(Δγ_z)`,
/// computed as `2σ(2Δγ_z)` so the result stays strictly positive in floating
/// point (plain `tanh` rounds to exactly −1 for arguments below ≈ −19.06).
/// The offset is clamped to ±30, which bounds the factor to
/// `[2σ(−60), 2σ(60)] ⊂ (0, 2)`.
pub fn depth_update_factor(delta_gamma_z: f64) -> f64 {
    let c = delta_gamma_z.clamp(-30.0, 30.0);
    (1.0 / (1.0 + (-2.0 * c).exp())) * 2.0
}

/// Apply a relative pose correction: left-multiply the recovered rotation
/// delta, shift the in-plane offsets, and rescale depth through the bounded
/// positive factor of [`depth_update_factor`].
pub fn apply_pose_offset(
    prev_rotation: &Mat3,
    prev_site: &SiteTranslation,
    offset: &PoseOffset,
) -> Result<(Mat3, SiteTranslation), GeometryError> {
    let delta = recover_rotation(&offset.delta_rotation)?;
    let rotation = delta * prev_rotation;
    let site = SiteTranslation {
        gamma_x: prev_site.gamma_x + offset.delta_gamma.x,
        gamma_y: prev_site.gamma_y + offset.delta_gamma.y,
        gamma_z: prev_site.gamma_z * depth_update_factor(offset.delta_gamma.z),
    };
    Ok((rotation, site))
}

/// Full camera-frame pose from a rotation, its crop-normalized translation,
/// and the imaging geometry.
pub fn assemble_pose(
    rotation: &Mat3,
    site: &SiteTranslation,
    crop: &CropFrame,
    k: &CameraIntrinsics,
) -> Result<Pose, GeometryError> {
    let (o, t_z) = site_decode(site, crop)?;
    Ok(Pose::new(*rotation, back_project(&o, t_z, k)))
}

// ---- JSON interchange ----

#[derive(Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum PoseJsonError {
    #[error("malformed pose JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("pose JSON must carry 9 rotation entries and 3 translation entries, got {r} and {t}")]
    WrongArity { r: usize, t: usize },
}

/// Parse `{"R": [9 numbers, row-major], "t": [x, y, z]}` without validating
/// that the matrix is a rotation; callers that need validity use
/// [`Pose::is_valid`].
pub fn pose_from_json(text: &str) -> Result<Pose, PoseJsonError> {
    let pj: PoseJson = serde_json::from_str(text)?;
    if pj.r.len() != 9 || pj.t.len() != 3 {
        return Err(PoseJsonError::WrongArity {
            r: pj.r.len(),
            t: pj.t.len(),
        });
    }
    Ok(Pose::new(
        Mat3::from_row_slice(&pj.r),
        Vec3::new(pj.t[0], pj.t[1], pj.t[2]),
    ))
}

pub fn pose_to_json(pose: &Pose) -> String {
    let r: Vec<f64> = pose
        .rotation
        .row_iter()
        .flat_map(|row| row.iter().cloned().collect::<Vec<_>>())
        .collect();
    serde_json::to_string(&PoseJson {
        r,
        t: vec![
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
        ],
    })
    .expect("pose serialization cannot fail")
}

/// Parse `{"fx":..,"fy":..,"cx":..,"cy":..}`.
pub fn intrinsics_from_json(text: &str) -> Result<CameraIntrinsics, serde_json::Error> {
    serde_json::from_str(text)
}
