//! Coordinate frames, the pinhole camera, rays and yaw-only rigid poses.
//!
//! World frame is z-up with the ground near `z = 0`. Camera frame follows the
//! usual computer-vision convention (x right, y down, z forward). Pixel
//! coordinates are `(u, v) = (column, row)` with integer values at pixel
//! centers and the origin at the top-left pixel.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("pose component is not finite")]
    NonFinitePose,
    #[error("bad calibration: {0}")]
    BadCalibration(String),
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; keep the closed upper end.
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Object placement: center in the world frame plus yaw about world z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, theta: f64) -> Result<Self, GeomError> {
        if !(x.is_finite() && y.is_finite() && z.is_finite() && theta.is_finite()) {
            return Err(GeomError::NonFinitePose);
        }
        Ok(Self {
            x,
            y,
            z,
            theta: wrap_angle(theta),
        })
    }

    pub fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn object_to_world(&self, local: &Vec3) -> Vec3 {
        rotate_z(local, self.theta) + self.translation()
    }

    pub fn world_to_object(&self, world: &Vec3) -> Vec3 {
        rotate_z(&(world - self.translation()), -self.theta)
    }

    /// Rotates a world-frame direction into the object frame.
    pub fn direction_to_object(&self, dir: &Vec3) -> Vec3 {
        rotate_z(dir, -self.theta)
    }

    /// Derivatives of `world_to_object(w)` with respect to `(x, y, z, theta)`.
    ///
    /// `local` must be the already-transformed point.
    pub fn world_to_object_jacobian(&self, local: &Vec3) -> [Vec3; 4] {
        let (s, c) = self.theta.sin_cos();
        // d/dt of R(-theta)(w - t) = -R(-theta)
        let dx = Vec3::new(-c, s, 0.0);
        let dy = Vec3::new(-s, -c, 0.0);
        let dz = Vec3::new(0.0, 0.0, -1.0);
        let dtheta = Vec3::new(local.y, -local.x, 0.0);
        [dx, dy, dz, dtheta]
    }
}

/// Rotates `v` by `angle` about the z axis.
pub fn rotate_z(v: &Vec3, angle: f64) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole camera with zero skew and a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    world_to_camera: Matrix4<f64>,
    rotation: Matrix3<f64>,
    translation: Vec3,
    center: Vec3,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_to_camera: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        let (fx, fy) = (intrinsics[(0, 0)], intrinsics[(1, 1)]);
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeomError::BadCalibration("focal lengths must be positive".into()));
        }
        if intrinsics[(0, 1)] != 0.0
            || intrinsics[(1, 0)] != 0.0
            || intrinsics[(2, 0)] != 0.0
            || intrinsics[(2, 1)] != 0.0
            || intrinsics[(2, 2)] != 1.0
        {
            return Err(GeomError::BadCalibration(
                "intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeomError::BadCalibration("image size must be positive".into()));
        }
        if !world_to_camera.iter().all(|v| v.is_finite()) || !intrinsics.iter().all(|v| v.is_finite()) {
            return Err(GeomError::BadCalibration("non-finite calibration".into()));
        }
        let last_row = world_to_camera.fixed_view::<1, 4>(3, 0);
        if last_row[(0, 0)] != 0.0 || last_row[(0, 1)] != 0.0 || last_row[(0, 2)] != 0.0 || last_row[(0, 3)] != 1.0
        {
            return Err(GeomError::BadCalibration("extrinsic last row must be [0,0,0,1]".into()));
        }
        let rotation: Matrix3<f64> = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).abs().max() > 1e-6 || rotation.determinant() < 0.0 {
            return Err(GeomError::BadCalibration("extrinsic rotation is not orthonormal".into()));
        }
        let translation: Vec3 = world_to_camera.fixed_view::<3, 1>(0, 3).into_owned();
        let center = -(rotation.transpose() * translation);
        Ok(Self {
            intrinsics,
            world_to_camera,
            rotation,
            translation,
            center,
            width,
            height,
        })
    }

    /// Camera mounted at `position` looking along world `+x` (yaw 0), pitched
    /// down by `pitch` radians. Convenience for synthetic rigs.
    pub fn looking_forward(
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
        position: Vec3,
        yaw: f64,
        pitch: f64,
    ) -> Result<Self, GeomError> {
        let k = Matrix3::new(
            fx,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            fy,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        // camera axes expressed in world coordinates for yaw = pitch = 0
        let base = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let world_rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), pitch);
        let r = base * world_rot.matrix().transpose();
        let t = -(r * position);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(k, m, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn to_camera_frame(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    /// Projects a world point to `(u, v, depth)`.
    pub fn project_point(&self, world: &Vec3) -> Result<(f64, f64, f64), GeomError> {
        let pc = self.to_camera_frame(world);
        if pc.z <= 0.0 {
            return Err(GeomError::NonPositiveDepth(pc.z));
        }
        let k = &self.intrinsics;
        let u = k[(0, 0)] * pc.x / pc.z + k[(0, 2)];
        let v = k[(1, 1)] * pc.y / pc.z + k[(1, 2)];
        Ok((u, v, pc.z))
    }

    /// Unit ray from the camera center through pixel `(u, v)`.
    pub fn ray_through_pixel(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let dc = Vec3::new((u - k[(0, 2)]) / k[(0, 0)], (v - k[(1, 2)]) / k[(1, 1)], 1.0);
        Ray::new(self.center, self.rotation.transpose() * dc)
    }

    /// Whether continuous pixel coordinates fall on a pixel of the image.
    pub fn pixel_index(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (col, row) = (u.round(), v.round());
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((col as usize, row as usize))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn simple_camera() -> Camera {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        Camera::new(k, Matrix4::identity(), 100, 100).unwrap()
    }

    #[test]
    fn project_principal_axis() {
        let cam = simple_camera();
        assert_eq!(cam.project_point(&Vec3::new(0.0, 0.0, 10.0)).unwrap(), (50.0, 50.0, 10.0));
        assert_eq!(cam.project_point(&Vec3::new(1.0, 0.0, 10.0)).unwrap(), (60.0, 50.0, 10.0));
        assert!(matches!(
            cam.project_point(&Vec3::new(0.0, 0.0, -1.0)),
            Err(GeomError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn central_ray_is_forward() {
        let cam = simple_camera();
        let ray = cam.ray_through_pixel(50.0, 50.0);
        assert!((ray.direction - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn translated_camera_center_matches_inverse() {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        let rot = Rotation3::from_euler_angles(0.1, -0.2, 0.3);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        m[(0, 3)] = 1.0;
        m[(1, 3)] = -2.0;
        m[(2, 3)] = 0.5;
        let cam = Camera::new(k, m, 100, 100).unwrap();
        // camera center solves R c + t = 0
        let lu = m.fixed_view::<3, 3>(0, 0).into_owned().lu();
        let c = lu.solve(&(-m.fixed_view::<3, 1>(0, 3).into_owned())).unwrap();
        let ray = cam.ray_through_pixel(12.0, 80.0);
        assert!((ray.origin - c).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_calibration() {
        let k = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(k, Matrix4::identity(), 10, 10).is_err());
        let k = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(Camera::new(k, m, 10, 10).is_err());
        assert!(Camera::new(k, Matrix4::identity(), 0, 10).is_err());
    }

    #[test]
    fn pose_examples() {
        let x = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(Pose::identity().object_to_world(&x), x);
        let p = Pose::new(1.0, 2.0, 3.0, PI / 2.0).unwrap();
        let w = p.object_to_world(&Vec3::new(1.0, 0.0, 0.0));
        assert!((w - Vec3::new(1.0, 3.0, 3.0)).norm() < 1e-12);
        assert!(Pose::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = Pose::new(0.4, -1.2, 0.7, 0.9).unwrap();
        let w = Vec3::new(3.0, 1.0, -0.5);
        let q = p.world_to_object(&w);
        let jac = p.world_to_object_jacobian(&q);
        let h = 1e-6;
        for (k, col) in jac.iter().enumerate() {
            let mut a = [p.x, p.y, p.z, p.theta];
            let mut b = a;
            a[k] += h;
            b[k] -= h;
            let pa = Pose { x: a[0], y: a[1], z: a[2], theta: a[3] };
            let pb = Pose { x: b[0], y: b[1], z: b[2], theta: b[3] };
            let fd = (pa.world_to_object(&w) - pb.world_to_object(&w)) / (2.0 * h);
            assert!((fd - col).norm() < 1e-8, "coordinate {k}");
        }
    }

    #[test]
    fn projection_and_rays_consistent_on_random_points() {
        use rand::{Rng, SeedableRng};
        let cam = Camera::looking_forward(540.0, 540.0, 960, 540, Vec3::new(0.0, 0.0, 1.6), 0.2, 0.05)
            .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 1000 {
            let local = Vec3::new(rng.gen_range(1.0..60.0), rng.gen_range(-30.0..30.0), rng.gen_range(-3.0..3.0));
            let w = cam.center() + rotate_z(&local, 0.2);
            let Ok((u, v, _)) = cam.project_point(&w) else { continue };
            let ray = cam.ray_through_pixel(u, v);
            let t = rng.gen_range(0.5..80.0);
            let (u2, v2, _) = cam.project_point(&ray.at(t)).unwrap();
            assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6);
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn pose_inverse_round_trip(x in -50.0..50.0f64, y in -50.0..50.0f64, z in -5.0..5.0f64,
                                   th in -10.0..10.0f64, px in -5.0..5.0f64, py in -5.0..5.0f64, pz in -5.0..5.0f64) {
            let p = Pose::new(x, y, z, th).unwrap();
            prop_assert!(p.theta > -PI && p.theta <= PI);
            let v = Vec3::new(px, py, pz);
            let back = p.world_to_object(&p.object_to_world(&v));
            prop_assert!((back - v).norm() < 1e-9);
        }

        #[test]
        fn yaw_composition(th1 in -PI..PI, th2 in -PI..PI, px in -5.0..5.0f64, py in -5.0..5.0f64) {
            let center = Vec3::new(2.0, -1.0, 0.5);
            let p1 = Pose::new(center.x, center.y, center.z, th1).unwrap();
            let v = Vec3::new(px, py, 0.3);
            let w1 = p1.object_to_world(&v);
            let rotated = rotate_z(&(w1 - center), th2) + center;
            let p12 = Pose::new(center.x, center.y, center.z, th1 + th2).unwrap();
            prop_assert!((p12.object_to_world(&v) - rotated).norm() < 1e-9);
        }
    }
}
