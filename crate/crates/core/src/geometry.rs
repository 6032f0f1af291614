//! Pinhole camera math: projection, keypoint warping between views, the
//! image to correspondence-map affine frame, and rigid pose algebra.
//!
//! Pixel coordinates are continuous: pixel `(row i, col j)` covers
//! `[j, j+1) x [i, i+1)` and its center sits at `(j + 0.5, i + 0.5)`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Smallest camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CameraModel<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraModel<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        if !(self.fx > zero && self.fy > zero) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image size must be at least 1x1".into()));
        }
        let w = T::from_usize_lossy(self.width);
        let h = T::from_usize_lossy(self.height);
        if !(self.cx >= zero && self.cx < w && self.cy >= zero && self.cy < h) {
            return Err(Error::InvalidConfig(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Camera with the principal point at the image center and the given
    /// horizontal field of view (degrees); square pixels.
    pub fn from_fov(width: usize, height: usize, hfov_deg: T) -> Result<Self> {
        let half = (hfov_deg * T::lit(0.5)).deg_to_rad();
        let w = T::from_usize_lossy(width);
        let h = T::from_usize_lossy(height);
        let f = w * T::lit(0.5) / half.tan();
        Self::new(f, f, w * T::lit(0.5), h * T::lit(0.5), width, height)
    }

    pub fn matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, o)
    }

    /// `K^-1 p` with unit z.
    pub fn unproject(&self, p: &Vector2<T>) -> Vector3<T> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, T::one())
    }

    /// `K [x, y, 1]`.
    pub fn to_pixel(&self, normalized: &Vector2<T>) -> Vector2<T> {
        Vector2::new(
            self.fx * normalized.x + self.cx,
            self.fy * normalized.y + self.cy,
        )
    }

    /// Bounds test used for the outpainted label: `0 <= x < width`, `0 <= y < height`.
    pub fn contains(&self, p: &Vector2<T>) -> bool {
        let zero = T::zero();
        p.x >= zero
            && p.y >= zero
            && p.x < T::from_usize_lossy(self.width)
            && p.y < T::from_usize_lossy(self.height)
    }

    pub fn cast<U: Real>(&self) -> CameraModel<U> {
        CameraModel {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> RigidPose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validates orthonormality (`|R^T R - I|_inf < 1e-9`, `det R` within 1e-9 of 1).
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        let tol = T::lit(1e-9).max(T::EPS * T::lit(64.0));
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !(ortho < tol && (det - T::one()).abs() <= tol) {
            return Err(Error::InvalidConfig(format!(
                "rotation is not in SO(3): orthogonality residual {ortho}, det {det}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput("pose translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Rotation from an axis-angle vector (radians), via the exponential map.
    pub fn from_axis_angle(axis_angle: Vector3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn rotation_z_deg(deg: T, translation: Vector3<T>) -> Self {
        Self::from_axis_angle(Vector3::z() * deg.deg_to_rad(), translation)
    }

    pub fn transform(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x + self.translation
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies the local increment `(omega, dt)` on the left:
    /// `(exp(omega), dt) * self`.
    pub fn retract(&self, delta: &[T; 6]) -> Self {
        let inc = Self::from_axis_angle(
            Vector3::new(delta[0], delta[1], delta[2]),
            Vector3::new(delta[3], delta[4], delta[5]),
        );
        inc.compose(self)
    }

    /// Re-orthonormalizes the rotation (polar decomposition via SVD).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let mut r = u * vt;
        if r.determinant() < T::zero() {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Self {
            rotation: r,
            translation: self.translation,
        }
    }

    pub fn cast<U: Real>(&self) -> RigidPose<U> {
        RigidPose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

/// JSON form of a pose: row-major rotation rows plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl<T: Real> From<&RigidPose<T>> for PoseRecord {
    fn from(p: &RigidPose<T>) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (r, row) in rotation.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = p.rotation[(r, c)].as_f64();
            }
        }
        Self {
            rotation,
            translation: [
                p.translation.x.as_f64(),
                p.translation.y.as_f64(),
                p.translation.z.as_f64(),
            ],
        }
    }
}

impl PoseRecord {
    pub fn to_pose<T: Real>(&self) -> Result<RigidPose<T>> {
        let r = Matrix3::from_fn(|i, j| T::lit(self.rotation[i][j]));
        let t = Vector3::from_fn(|i, _| T::lit(self.translation[i]));
        RigidPose::new(r, t)
    }
}

/// Integer-parameterized affine map from target image pixels to
/// correspondence-map coordinates: `x_map = x / stride + pad`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MapFrame {
    pub stride: usize,
    pub pad_x: usize,
    pub pad_y: usize,
    pub map_w: usize,
    pub map_h: usize,
}

impl MapFrame {
    /// Frame for an image of `width x height` pixels, backbone stride `stride`
    /// and padding ratio `gamma`; `pad = round(gamma * ceil(dim / stride))`.
    pub fn for_image(width: usize, height: usize, stride: usize, gamma: f64) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be finite and >= 0".into()));
        }
        let gw = width.div_ceil(stride);
        let gh = height.div_ceil(stride);
        let pad_x = (gamma * gw as f64).round() as usize;
        let pad_y = (gamma * gh as f64).round() as usize;
        Ok(Self::from_grid(gw, gh, stride, pad_x, pad_y))
    }

    /// Frame around an unpadded `grid_w x grid_h` feature grid.
    pub fn from_grid(grid_w: usize, grid_h: usize, stride: usize, pad_x: usize, pad_y: usize) -> Self {
        Self {
            stride,
            pad_x,
            pad_y,
            map_w: grid_w + 2 * pad_x,
            map_h: grid_h + 2 * pad_y,
        }
    }

    pub fn cells(&self) -> usize {
        self.map_w * self.map_h
    }

    pub fn grid_w(&self) -> usize {
        self.map_w - 2 * self.pad_x
    }

    pub fn grid_h(&self) -> usize {
        self.map_h - 2 * self.pad_y
    }

    pub fn image_to_map<T: Real>(&self, p: &Vector2<T>) -> Vector2<T> {
        let s = T::from_usize_lossy(self.stride);
        Vector2::new(
            p.x / s + T::from_usize_lossy(self.pad_x),
            p.y / s + T::from_usize_lossy(self.pad_y),
        )
    }

    pub fn map_to_image<T: Real>(&self, x: &Vector2<T>) -> Vector2<T> {
        let s = T::from_usize_lossy(self.stride);
        Vector2::new(
            (x.x - T::from_usize_lossy(self.pad_x)) * s,
            (x.y - T::from_usize_lossy(self.pad_y)) * s,
        )
    }

    /// Half-open extent test `0 <= x < map_w`, `0 <= y < map_h`.
    pub fn contains<T: Real>(&self, x: &Vector2<T>) -> bool {
        x.x >= T::zero()
            && x.y >= T::zero()
            && x.x < T::from_usize_lossy(self.map_w)
            && x.y < T::from_usize_lossy(self.map_h)
    }

    /// The 3x3 affine matrix `K_C`.
    pub fn matrix<T: Real>(&self) -> Matrix3<T> {
        let inv_s = T::one() / T::from_usize_lossy(self.stride);
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(
            inv_s,
            z,
            T::from_usize_lossy(self.pad_x),
            z,
            inv_s,
            T::from_usize_lossy(self.pad_y),
            z,
            z,
            o,
        )
    }
}

/// `pi(u) = (u_x / u_z, u_y / u_z)`.
pub fn project<T: Real>(u: &Vector3<T>) -> Result<Vector2<T>> {
    if !(u.z > T::lit(MIN_DEPTH)) {
        return Err(Error::NonPositiveDepth { z: u.z.as_f64() });
    }
    Ok(Vector2::new(u.x / u.z, u.y / u.z))
}

/// Source pixel at depth `depth` lifted into the source camera frame.
pub fn backproject<T: Real>(p: &Vector2<T>, depth: T, cam: &CameraModel<T>) -> Vector3<T> {
    cam.unproject(p) * depth
}

/// Warps a source pixel with known depth into the target image plane:
/// `K_T pi(d R K_S^-1 p + t)`. The result is not clipped to the target bounds.
pub fn warp<T: Real>(
    p_src: &Vector2<T>,
    depth: T,
    pose_ts: &RigidPose<T>,
    cam_src: &CameraModel<T>,
    cam_tgt: &CameraModel<T>,
) -> Result<Vector2<T>> {
    let x = pose_ts.transform(&backproject(p_src, depth, cam_src));
    Ok(cam_tgt.to_pixel(&project(&x)?))
}

/// Like [`warp`] but also returns the target-frame depth of the point.
pub fn warp_with_depth<T: Real>(
    p_src: &Vector2<T>,
    depth: T,
    pose_ts: &RigidPose<T>,
    cam_src: &CameraModel<T>,
    cam_tgt: &CameraModel<T>,
) -> Result<(Vector2<T>, T)> {
    let x = pose_ts.transform(&backproject(p_src, depth, cam_src));
    Ok((cam_tgt.to_pixel(&project(&x)?), x.z))
}

/// Rotation error in degrees and translation error in scene units.
pub fn pose_error<T: Real>(est: &RigidPose<T>, gt: &RigidPose<T>) -> (T, T) {
    let r = est.rotation * gt.rotation.transpose();
    let cos = (r.trace() - T::one()) * T::lit(0.5);
    let cos = cos.clamp(-T::one(), T::one());
    // sin from the skew part keeps small angles accurate; for angles near pi
    // the skew part vanishes and atan2 falls back to the cosine branch.
    let skew = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let sin = skew.norm() * T::lit(0.5);
    let angle = sin.atan2(cos);
    let trans = (est.translation - gt.translation).norm();
    (angle.rad_to_deg(), trans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> CameraModel<f64> {
        CameraModel::new(100.0, 100.0, 64.0, 48.0, 128, 96).unwrap()
    }

    #[test]
    fn project_examples() {
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(project(&Vector3::new(2.0, 4.0, 2.0)).unwrap(), Vector2::new(1.0, 2.0));
        assert!(matches!(
            project(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::NonPositiveDepth { .. })
        ));
        assert!(project(&Vector3::new(1.0, 1.0, -3.0)).is_err());
    }

    #[test]
    fn warp_examples() {
        let c = cam();
        let id = RigidPose::identity();
        let p = warp(&Vector2::new(10.0, 20.0), 3.0, &id, &c, &c).unwrap();
        assert!((p - Vector2::new(10.0, 20.0)).norm() < 1e-12);

        let tz = RigidPose::from_axis_angle(Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0));
        let p = warp(&Vector2::new(64.0, 48.0), 2.0, &tz, &c, &c).unwrap();
        assert_eq!(p, Vector2::new(64.0, 48.0));

        // 3D (1, 0, 1) -> pi (1, 0) -> K (164, 48)
        let tx = RigidPose::from_axis_angle(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let p = warp(&Vector2::new(64.0, 48.0), 1.0, &tx, &c, &c).unwrap();
        assert_eq!(p, Vector2::new(164.0, 48.0));
    }

    #[test]
    fn warp_behind_camera_is_an_error() {
        let c = cam();
        let back = RigidPose::from_axis_angle(Vector3::zeros(), Vector3::new(0.0, 0.0, -5.0));
        assert!(warp(&Vector2::new(64.0, 48.0), 2.0, &back, &c, &c).is_err());
    }

    #[test]
    fn map_frame_examples() {
        let f = MapFrame::from_grid(16, 12, 4, 0, 0);
        assert_eq!(f.image_to_map(&Vector2::new(8.0, 12.0)), Vector2::new(2.0, 3.0));

        let f = MapFrame::for_image(640, 480, 8, 0.5).unwrap();
        assert_eq!((f.pad_x, f.pad_y), (40, 30));
        assert_eq!((f.map_w, f.map_h), (160, 120));
        assert_eq!(f.image_to_map(&Vector2::new(0.0, 0.0)), Vector2::new(40.0, 30.0));

        let f = MapFrame::for_image(64, 48, 4, 0.5).unwrap();
        assert_eq!((f.pad_x, f.pad_y, f.map_w, f.map_h), (8, 6, 32, 24));
        let f = MapFrame::for_image(64, 48, 4, 0.0).unwrap();
        assert_eq!((f.map_w, f.map_h), (16, 12));
    }

    #[test]
    fn map_frame_matrix_agrees_with_affine() {
        let f = MapFrame::for_image(64, 48, 4, 0.5).unwrap();
        let k: Matrix3<f64> = f.matrix();
        let p = Vector2::new(13.25, -7.5);
        let h = k * Vector3::new(p.x, p.y, 1.0);
        assert_eq!(Vector2::new(h.x, h.y), f.image_to_map(&p));
    }

    #[test]
    fn pose_group_examples() {
        let id = RigidPose::<f64>::identity();
        assert_eq!(id.inverse(), id);

        let t0 = Vector3::zeros();
        let a = RigidPose::rotation_z_deg(30.0, t0);
        let b = RigidPose::rotation_z_deg(60.0, t0);
        let c = a.compose(&b);
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((c.rotation - expect).amax() < 1e-12);
    }

    #[test]
    fn pose_error_examples() {
        let id = RigidPose::<f64>::identity();
        assert_eq!(pose_error(&id, &id), (0.0, 0.0));
        let flip = RigidPose::rotation_z_deg(180.0, Vector3::zeros());
        let (r, _) = pose_error(&flip, &id);
        assert!((r - 180.0).abs() < 1e-9);
        let shifted = RigidPose::from_axis_angle(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(pose_error(&shifted, &id).1, 1.0);
    }

    #[test]
    fn pose_validation() {
        let bad = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(bad, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::new(1.0, 1.0, 1.0, 1.0, 0, 4).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = RigidPose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let json = serde_json::to_string(&PoseRecord::from(&p)).unwrap();
        let back: PoseRecord = serde_json::from_str(&json).unwrap();
        let q: RigidPose<f64> = back.to_pose().unwrap();
        assert_eq!(p, q);
    }

    fn arb_pose() -> impl Strategy<Value = RigidPose<f64>> {
        (
            prop::array::uniform3(-2.0f64..2.0),
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_map(|(w, t)| RigidPose::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(a in arb_pose()) {
            let e = a.compose(&a.inverse());
            prop_assert!((e.rotation - Matrix3::identity()).amax() < 1e-9);
            prop_assert!(e.translation.amax() < 1e-9);
            let (r, t) = pose_error(&a, &a);
            prop_assert_eq!((r, t), (0.0, 0.0));
        }

        #[test]
        fn project_is_scale_invariant(
            x in -10.0f64..10.0, y in -10.0f64..10.0, z in 0.01f64..10.0, alpha in 0.01f64..100.0
        ) {
            let u = Vector3::new(x, y, z);
            let a = project(&u).unwrap();
            let b = project(&(u * alpha)).unwrap();
            prop_assert!((a - b).amax() <= 1e-12 * (1.0 + a.amax()));
        }

        #[test]
        fn map_frame_round_trip_is_exact(
            xi in -40_000i64..40_000, yi in -40_000i64..40_000,
            s_exp in 0u32..5, px in 0usize..64, py in 0usize..64
        ) {
            // dyadic pixels with power-of-two strides round-trip bit-exactly
            let frame = MapFrame::from_grid(20, 15, 1 << s_exp, px, py);
            let p = Vector2::new(xi as f64 / 256.0, yi as f64 / 256.0);
            prop_assert_eq!(frame.map_to_image(&frame.image_to_map(&p)), p);
            prop_assert_eq!(frame.image_to_map(&frame.map_to_image(&p)), p);
        }

        #[test]
        fn warp_round_trip(a in arb_pose(), px in 0.0f64..128.0, py in 0.0f64..96.0, d in 0.5f64..10.0) {
            let c = cam();
            let p = Vector2::new(px, py);
            let Ok((q, d_t)) = warp_with_depth(&p, d, &a, &c, &c) else { return Ok(()); };
            if d_t > 0.1 {
                let back = warp(&q, d_t, &a.inverse(), &c, &c).unwrap();
                prop_assert!((back - p).norm() < 1e-6);
            }
        }
    }
}
