//! Pinhole cameras, rays and the per-MPI NDC warp.
//!
//! Camera frames follow the +x right, +y up, -z forward convention. Pixel rows
//! are counted from the top of the image, and every ray passes through the
//! center of its pixel.

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Rotation tolerance used by [`Pose::new`].
pub const RIGID_TOLERANCE: f64 = 1e-9;

/// A rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that deviate from orthonormal by more
    /// than [`RIGID_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        Self::with_tolerance(rotation, translation, RIGID_TOLERANCE)
    }

    pub fn with_tolerance(rotation: Matrix3<f64>, translation: Vec3, tol: f64) -> Result<Self> {
        let err = orthonormality_error(&rotation);
        if !(err <= tol) {
            return Err(Error::Input(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e}, tolerance {tol:e})"
            )));
        }
        if rotation.determinant() < 0.0 {
            return Err(Error::Input("rotation has negative determinant".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("translation is not finite".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Parses a homogeneous 4×4 matrix. The last row must be `[0, 0, 0, 1]`.
    pub fn from_matrix(m: &Matrix4<f64>, tol: f64) -> Result<Self> {
        let last = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Input(format!(
                "last row of transform must be [0, 0, 0, 1], got {last:?}"
            )));
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::with_tolerance(rotation, translation, tol)
    }

    /// Look-at constructor: the camera sits at `eye` and its -z axis points at `target`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::Input("look_at: up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let true_up = right.cross(&forward);
        let rotation = Matrix3::from_columns(&[right, true_up, -forward]);
        Pose::new(rotation, eye)
    }

    /// Replaces the rotation by the nearest rotation in the Frobenius sense.
    pub fn orthonormalized(rotation: &Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let svd = rotation.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::Input("rotation SVD failed".into())),
        };
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Pose::new(r, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn position(&self) -> Vec3 {
        self.translation
    }

    /// Camera viewing axis (-z column) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        -self.rotation.column(2).into_owned()
    }

    pub fn up(&self) -> Vec3 {
        self.rotation.column(1).into_owned()
    }

    pub fn right(&self) -> Vec3 {
        self.rotation.column(0).into_owned()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.tr_mul(&(p - self.translation))
    }

    pub fn inverse_transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.tr_mul(v)
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Pinhole camera with a rigid camera-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_to_world: Pose,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        cam_to_world: Pose,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image size {width}x{height} is empty")));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Input(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Input("principal point is not finite".into()));
        }
        Ok(Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            cam_to_world,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unnormalized camera-frame direction through the center of pixel `(u, v)`.
    pub fn camera_direction(&self, u: usize, v: usize) -> Vec3 {
        Vec3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            -(v as f64 + 0.5 - self.cy) / self.fy,
            -1.0,
        )
    }

    pub fn ray(&self, pixel_id: usize) -> Result<Ray> {
        if pixel_id >= self.pixel_count() {
            return Err(Error::Input(format!(
                "pixel index {pixel_id} out of bounds for {}x{} image",
                self.width, self.height
            )));
        }
        let (u, v) = (pixel_id % self.width, pixel_id / self.width);
        let dir = self
            .cam_to_world
            .transform_vector(&self.camera_direction(u, v))
            .normalize();
        Ok(Ray {
            origin: self.cam_to_world.position(),
            direction: dir,
            pixel_id,
        })
    }

    /// Half-angle tangents of the field of view along x and y.
    pub fn tan_half_fov(&self) -> (f64, f64) {
        let tx = self.cx.max(self.width as f64 - self.cx) / self.fx;
        let ty = self.cy.max(self.height as f64 - self.cy) / self.fy;
        (tx, ty)
    }
}

/// Generates one ray per pixel index, through the pixel center.
pub fn generate_rays(camera: &Camera, pixels: &[usize]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&p| camera.ray(p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub pixel_id: usize,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
            pixel_id: 0,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// A ray expressed in the NDC space of one MPI.
///
/// For facing rays, `origin + s * direction` with `s` in `[0, 1)` traces the part
/// of the world ray that lies beyond the near plane; `s -> 1` is the point at
/// infinity. Non-facing rays carry the local tangent instead, whose z component
/// is not positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NdcRay {
    pub origin: Vec3,
    pub direction: Vec3,
    pub facing: bool,
    /// World distance along the ray at which `origin` is reached.
    pub t_start: f64,
}

/// Reference frustum of one MPI.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpiFrustum {
    pub pose: Pose,
    pub tan_half_fov_x: f64,
    pub tan_half_fov_y: f64,
    pub near: f64,
}

impl MpiFrustum {
    pub fn new(pose: Pose, tan_half_fov_x: f64, tan_half_fov_y: f64, near: f64) -> Result<Self> {
        if !(near > 0.0 && near.is_finite()) {
            return Err(Error::Input(format!("near plane must be positive, got {near}")));
        }
        if !(tan_half_fov_x > 0.0 && tan_half_fov_y > 0.0) {
            return Err(Error::Input(format!(
                "field-of-view tangents must be positive, got ({tan_half_fov_x}, {tan_half_fov_y})"
            )));
        }
        Ok(MpiFrustum {
            pose,
            tan_half_fov_x,
            tan_half_fov_y,
            near,
        })
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.pose.inverse_transform_point(world)
    }

    fn warp_local(&self, q: &Vec3) -> Vec3 {
        Vec3::new(
            -q.x / (q.z * self.tan_half_fov_x),
            -q.y / (q.z * self.tan_half_fov_y),
            1.0 + 2.0 * self.near / q.z,
        )
    }

    pub fn project_local(&self, q: &Vec3) -> Result<Vec3> {
        if !(q.z < 0.0) {
            return Err(Error::BehindPlane(q.z));
        }
        Ok(self.warp_local(q))
    }

    /// Maps a world point into this MPI's NDC cube.
    pub fn project(&self, world: &Vec3) -> Result<Vec3> {
        self.project_local(&self.to_local(world))
    }

    pub fn unproject_local(&self, a: &Vec3) -> Result<Vec3> {
        if !(a.z < 1.0) {
            return Err(Error::PointAtInfinity(a.z));
        }
        let z = 2.0 * self.near / (a.z - 1.0);
        Ok(Vec3::new(
            -a.x * z * self.tan_half_fov_x,
            -a.y * z * self.tan_half_fov_y,
            z,
        ))
    }

    /// Inverse of [`MpiFrustum::project`].
    pub fn unproject(&self, a: &Vec3) -> Result<Vec3> {
        Ok(self.pose.transform_point(&self.unproject_local(a)?))
    }

    /// NDC of a homogeneous world point `(x, w)`; `w = 0` denotes the point at
    /// infinity in direction `x`. Every component is clamped to `[-1, 1]`.
    /// Points at or behind the camera plane take the clamped limit of their
    /// direction, `(sign x, sign y, -1)`.
    pub fn project_homogeneous_clamped(&self, x: &Vec3, w: f64) -> Vec3 {
        let q = self
            .pose
            .rotation()
            .tr_mul(&(x - self.pose.position() * w));
        if q.z < 0.0 {
            let a = Vec3::new(
                -q.x / (q.z * self.tan_half_fov_x),
                -q.y / (q.z * self.tan_half_fov_y),
                1.0 + 2.0 * self.near * w / q.z,
            );
            a.map(|c| c.clamp(-1.0, 1.0))
        } else {
            Vec3::new(sign_or_zero(q.x), sign_or_zero(q.y), -1.0)
        }
    }

    /// Projects a world ray into NDC and reports whether it faces this MPI.
    pub fn project_ray(&self, ray: &Ray) -> NdcRay {
        let qo = self.to_local(&ray.origin);
        let qd = self.pose.inverse_transform_vector(&ray.direction);
        if qd.z < 0.0 {
            // Advance to the near plane when the origin lies in front of it.
            let t_start = if qo.z > -self.near {
                (-self.near - qo.z) / qd.z
            } else {
                0.0
            };
            let q = qo + qd * t_start;
            let origin = self.warp_local(&q);
            let at_infinity = Vec3::new(
                -qd.x / (qd.z * self.tan_half_fov_x),
                -qd.y / (qd.z * self.tan_half_fov_y),
                1.0,
            );
            NdcRay {
                origin,
                direction: at_infinity - origin,
                facing: true,
                t_start,
            }
        } else if qo.z < 0.0 {
            let origin = self.warp_local(&qo);
            let z2 = qo.z * qo.z;
            let tangent = Vec3::new(
                -(qd.x * qo.z - qo.x * qd.z) / (self.tan_half_fov_x * z2),
                -(qd.y * qo.z - qo.y * qd.z) / (self.tan_half_fov_y * z2),
                -2.0 * self.near * qd.z / z2,
            );
            NdcRay {
                origin,
                direction: tangent,
                facing: false,
                t_start: 0.0,
            }
        } else {
            NdcRay {
                origin: Vec3::zeros(),
                direction: Vec3::zeros(),
                facing: false,
                t_start: 0.0,
            }
        }
    }

    /// World distance along `ray` at which it crosses the plane of NDC depth `z`,
    /// or `None` when the crossing lies behind the origin or does not exist.
    /// The plane `z = 1` sits at infinity.
    pub fn plane_distance(&self, ray: &Ray, z: f64) -> Option<f64> {
        let qo = self.to_local(&ray.origin);
        let qd = self.pose.inverse_transform_vector(&ray.direction);
        if !(qd.z < 0.0) {
            return None;
        }
        if z >= 1.0 {
            return Some(f64::INFINITY);
        }
        let depth = 2.0 * self.near / (z - 1.0);
        let t = (depth - qo.z) / qd.z;
        (t >= 0.0).then_some(t)
    }
}

fn sign_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_frustum() -> MpiFrustum {
        MpiFrustum::new(Pose::identity(), 1.0, 1.0, 1.0).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rot = nalgebra::Rotation3::from_scaled_axis(axis * 2.0);
        let t = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::new(*rot.matrix(), t).unwrap()
    }

    #[test]
    fn center_pixel_looks_down_the_axis() {
        let cam = Camera::new(4, 4, 3.0, 3.0, 2.0, 2.0, Pose::identity()).unwrap();
        // No pixel center sits at (2, 2) for an even image; use a 5×5 one instead.
        let odd = Camera::new(5, 5, 3.0, 3.0, 2.5, 2.5, Pose::identity()).unwrap();
        let ray = odd.ray(12).unwrap();
        assert!((ray.direction - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert_eq!(ray.origin, Vec3::zeros());
        assert!(cam.ray(16).is_err());
    }

    #[test]
    fn corner_pixel_uses_half_pixel_offset() {
        let cam = Camera::new(2, 2, 2.0, 2.0, 1.0, 1.0, Pose::identity()).unwrap();
        let d = cam.camera_direction(0, 0);
        // Row 0 is the top of the image, so y points up.
        assert_eq!(d, Vec3::new(-0.25, 0.25, -1.0));
        let r = cam.ray(0).unwrap();
        assert!((r.direction - d.normalize()).norm() < 1e-15);
    }

    #[test]
    fn generate_rays_rejects_out_of_bounds() {
        let cam = Camera::new(3, 2, 1.0, 1.0, 1.5, 1.0, Pose::identity()).unwrap();
        assert!(generate_rays(&cam, &[0, 5]).is_ok());
        assert!(matches!(generate_rays(&cam, &[6]), Err(Error::Input(_))));
    }

    #[test]
    fn generated_directions_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = Camera::new(17, 11, 13.0, 9.0, 8.0, 6.1, random_pose(&mut rng)).unwrap();
        let pixels: Vec<usize> = (0..cam.pixel_count()).collect();
        for r in generate_rays(&cam, &pixels).unwrap() {
            assert!((r.direction.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_rejects_scaled_rotation() {
        let m = Matrix3::identity() * 1.01;
        assert!(Pose::new(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn ndc_projection_examples() {
        let f = unit_frustum();
        assert_eq!(f.project(&Vec3::new(0.0, 0.0, -1.0)).unwrap(), Vec3::new(0.0, 0.0, -1.0));
        let far = f.project(&Vec3::new(0.0, 0.0, -1e12)).unwrap();
        assert!((far.z - (1.0 - 2e-12)).abs() < 1e-15);
        let a = f.project(&Vec3::new(1.0, 2.0, -4.0)).unwrap();
        assert!((a - Vec3::new(0.25, 0.5, 0.5)).norm() < 1e-15);
        let back = f.unproject(&Vec3::new(0.25, 0.5, 0.5)).unwrap();
        assert!((back - Vec3::new(1.0, 2.0, -4.0)).norm() < 1e-12);
        assert_eq!(f.unproject(&Vec3::new(0.0, 0.0, -1.0)).unwrap(), Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn ndc_errors() {
        let f = unit_frustum();
        assert!(matches!(f.project(&Vec3::new(0.0, 0.0, 0.0)), Err(Error::BehindPlane(_))));
        assert!(matches!(f.project(&Vec3::new(0.0, 0.0, 2.0)), Err(Error::BehindPlane(_))));
        assert!(matches!(
            f.unproject(&Vec3::new(0.0, 0.0, 1.0)),
            Err(Error::PointAtInfinity(_))
        ));
    }

    #[test]
    fn ndc_depth_is_monotone() {
        let f = MpiFrustum::new(Pose::identity(), 0.7, 1.3, 0.4).unwrap();
        let mut prev = -f64::INFINITY;
        for i in 0..200 {
            let z = -0.4 - 0.05 * i as f64;
            let a = f.project(&Vec3::new(0.1, 0.2, z)).unwrap().z;
            assert!(a > prev);
            prev = a;
        }
    }

    #[test]
    fn axial_ray_faces_and_reversed_does_not() {
        let f = MpiFrustum::new(Pose::identity(), 0.5, 0.5, 0.5).unwrap();
        let fwd = f.project_ray(&Ray::new(Vec3::zeros(), Vec3::new(0.0, 0.0, -1.0)));
        assert!(fwd.facing);
        assert_eq!(fwd.direction.x, 0.0);
        assert_eq!(fwd.direction.y, 0.0);
        assert!(fwd.direction.z > 0.0);
        assert_eq!(fwd.origin, Vec3::new(0.0, 0.0, -1.0));
        let rev = f.project_ray(&Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::new(0.0, 0.0, 1.0)));
        assert!(!rev.facing);
        assert!(rev.direction.z < 0.0);
    }

    #[test]
    fn parallel_ray_is_not_facing() {
        let f = unit_frustum();
        let r = f.project_ray(&Ray::new(Vec3::new(5.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 0.0)));
        assert!(!r.facing);
    }

    #[test]
    fn homogeneous_projection_clamps() {
        let f = unit_frustum();
        let inside = f.project_homogeneous_clamped(&Vec3::new(1.0, 2.0, -4.0), 1.0);
        assert!((inside - Vec3::new(0.25, 0.5, 0.5)).norm() < 1e-15);
        let behind = f.project_homogeneous_clamped(&Vec3::new(0.3, -2.0, 1.0), 1.0);
        assert_eq!(behind, Vec3::new(1.0, -1.0, -1.0));
        let infinity = f.project_homogeneous_clamped(&Vec3::new(0.5, 0.0, -1.0), 0.0);
        assert_eq!(infinity, Vec3::new(0.5, 0.0, 1.0));
    }

    #[test]
    fn plane_distance_matches_unproject() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let f = MpiFrustum::new(random_pose(&mut rng), 1.2, 0.8, 0.5).unwrap();
            let ray = Ray::new(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            );
            let ndc = f.project_ray(&ray);
            if !ndc.facing {
                continue;
            }
            for z in [-0.5, 0.0, 0.7] {
                if z < ndc.origin.z {
                    continue;
                }
                let s = (z - ndc.origin.z) / ndc.direction.z;
                let p = ndc.origin + ndc.direction * s;
                let world = f.unproject(&p).unwrap();
                let t = f.plane_distance(&ray, z).unwrap();
                assert!((ray.at(t) - world).norm() < 1e-7 * (1.0 + t));
            }
        }
    }
}
