use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{quat_to_matrix, quat_to_matrix_vjp, CameraView, Gaussian3D, Intrinsics, Pose};

/// Gaussians with camera-space depth at or below this are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance, in px^2.
pub const COV2D_REGULARIZATION: f64 = 0.3;

/// A Gaussian on the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    /// Pixel coordinates; pixel `(i, j)` has its centre at `(i + 0.5, j + 0.5)`.
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth_z: f64,
}

impl Splat2D {
    pub fn conic(&self) -> Option<Matrix2<f64>> {
        self.cov2d.try_inverse()
    }

    /// Half-extents of the 3-sigma bounding box.
    pub fn extent(&self) -> Vector2<f64> {
        Vector2::new(3.0 * self.cov2d[(0, 0)].sqrt(), 3.0 * self.cov2d[(1, 1)].sqrt())
    }
}

/// `exp(-0.5 (x - mu)^T cov^-1 (x - mu))`. `None` when the covariance is singular.
pub fn gaussian_weight(splat: &Splat2D, x: &Vector2<f64>) -> Option<f64> {
    let conic = splat.conic()?;
    let d = x - splat.mean2d;
    Some((-0.5 * (d.transpose() * conic * d)[(0, 0)]).exp())
}

/// Project onto the camera's image plane; `None` when culled by the near plane.
pub fn project_gaussian(g: &Gaussian3D, cam: &CameraView) -> Option<Splat2D> {
    Projection::compute(g, &cam.intrinsics, &cam.pose).map(|p| p.splat)
}

/// Projection with the intermediates its adjoint needs.
#[derive(Clone, Debug)]
pub struct Projection {
    pub splat: Splat2D,
    pub conic: Matrix2<f64>,
    pub p_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    rot: Matrix3<f64>,
    q_unit: [f64; 4],
    q_norm: f64,
    scale: Vector3<f64>,
}

/// Gradients of one Gaussian's geometric parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectionGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
}

impl Projection {
    pub fn compute(g: &Gaussian3D, intr: &Intrinsics, pose: &Pose) -> Option<Self> {
        let p_cam = pose.to_camera(&g.position);
        let z = p_cam.z;
        if z <= NEAR_PLANE {
            return None;
        }
        let [w, x, y, qz] = g.rotation;
        let q_norm = (w * w + x * x + y * y + qz * qz).sqrt();
        let q_unit = [w / q_norm, x / q_norm, y / q_norm, qz / q_norm];
        let rot = quat_to_matrix(q_unit);
        let scale = g.scale();
        let m = rot * Matrix3::from_diagonal(&scale);
        let cov_world = m * m.transpose();
        let cov_cam = pose.rotation * cov_world * pose.rotation.transpose();
        let (fx, fy) = (intr.fx, intr.fy);
        let jac = Matrix2x3::new(
            fx / z,
            0.0,
            -fx * p_cam.x / (z * z),
            0.0,
            fy / z,
            -fy * p_cam.y / (z * z),
        );
        let mut cov2d = jac * cov_cam * jac.transpose();
        cov2d[(0, 0)] += COV2D_REGULARIZATION;
        cov2d[(1, 1)] += COV2D_REGULARIZATION;
        // keep exact symmetry
        let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
        cov2d[(0, 1)] = off;
        cov2d[(1, 0)] = off;
        let conic = cov2d.try_inverse()?;
        let mean2d = Vector2::new(fx * p_cam.x / z + intr.cx, fy * p_cam.y / z + intr.cy);
        Some(Self {
            splat: Splat2D {
                mean2d,
                cov2d,
                depth_z: z,
            },
            conic,
            p_cam,
            jac,
            cov_cam,
            rot,
            q_unit,
            q_norm,
            scale,
        })
    }

    /// Pull gradients on `(mean2d, conic, depth_z)` back to the Gaussian.
    ///
    /// `d_conic` is the gradient w.r.t. the full symmetric 2x2 conic matrix,
    /// i.e. an off-diagonal coefficient counted twice in the quadratic form
    /// receives half of its total in each slot.
    pub fn vjp(
        &self,
        intr: &Intrinsics,
        pose: &Pose,
        d_mean: &Vector2<f64>,
        d_conic: &Matrix2<f64>,
        d_z: f64,
    ) -> ProjectionGrad {
        let (fx, fy) = (intr.fx, intr.fy);
        let p = self.p_cam;
        let z = p.z;
        let (z2, z3) = (z * z, z * z * z);

        let d_cov2d = -(self.conic * d_conic * self.conic);
        let d_cov_cam = self.jac.transpose() * d_cov2d * self.jac;
        let d_jac = (d_cov2d + d_cov2d.transpose()) * self.jac * self.cov_cam;

        let mut d_p = Vector3::zeros();
        d_p.x += d_mean.x * fx / z - d_jac[(0, 2)] * fx / z2;
        d_p.y += d_mean.y * fy / z - d_jac[(1, 2)] * fy / z2;
        d_p.z += d_z - d_mean.x * fx * p.x / z2 - d_mean.y * fy * p.y / z2
            - d_jac[(0, 0)] * fx / z2
            + d_jac[(0, 2)] * 2.0 * fx * p.x / z3
            - d_jac[(1, 1)] * fy / z2
            + d_jac[(1, 2)] * 2.0 * fy * p.y / z3;
        let position = pose.rotation.transpose() * d_p;

        let d_cov_world = pose.rotation.transpose() * d_cov_cam * pose.rotation;
        let m = self.rot * Matrix3::from_diagonal(&self.scale);
        let d_m = (d_cov_world + d_cov_world.transpose()) * m;
        let mut d_rot = d_m;
        let mut d_scale = Vector3::zeros();
        for j in 0..3 {
            for i in 0..3 {
                d_rot[(i, j)] *= self.scale[j];
                d_scale[j] += d_m[(i, j)] * self.rot[(i, j)];
            }
        }
        let log_scale = d_scale.component_mul(&self.scale);

        let dq = quat_to_matrix_vjp(self.q_unit, &d_rot);
        let q = self.q_unit;
        let dot: f64 = (0..4).map(|k| q[k] * dq[k]).sum();
        let rotation = [0, 1, 2, 3].map(|k| (dq[k] - q[k] * dot) / self.q_norm);

        ProjectionGrad {
            position,
            log_scale,
            rotation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use nalgebra::{Rotation3, UnitQuaternion};
    use proptest::prelude::*;

    fn camera(pose: Pose) -> CameraView {
        let intr = Intrinsics::centered(40.0, 32, 24);
        CameraView::new("c", intr, pose, Image::new(32, 24)).unwrap()
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let cam = camera(Pose::identity());
        let g = Gaussian3D::new(Vector3::new(0.0, 0.0, 2.0), 0.1, 0);
        let s = project_gaussian(&g, &cam).unwrap();
        assert_eq!(s.mean2d, Vector2::new(16.0, 12.0));
        assert_eq!(s.depth_z, 2.0);
    }

    #[test]
    fn isotropic_covariance_closed_form() {
        let cam = camera(Pose::identity());
        let (s, z, f) = (0.07, 2.5, 40.0);
        let g = Gaussian3D::new(Vector3::new(0.0, 0.0, z), s, 0);
        let sp = project_gaussian(&g, &cam).unwrap();
        let expect = (f * s / z) * (f * s / z);
        let unreg = sp.cov2d - Matrix2::identity() * COV2D_REGULARIZATION;
        assert!((unreg[(0, 0)] - expect).abs() < 1e-12);
        assert!((unreg[(1, 1)] - expect).abs() < 1e-12);
        assert!(unreg[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn near_plane_culls() {
        let cam = camera(Pose::identity());
        for z in [NEAR_PLANE, 0.0, -1.0] {
            let g = Gaussian3D::new(Vector3::new(0.0, 0.0, z), 0.1, 0);
            assert!(project_gaussian(&g, &cam).is_none());
        }
    }

    #[test]
    fn weight_values() {
        let splat = Splat2D {
            mean2d: Vector2::new(3.0, 4.0),
            cov2d: Matrix2::identity(),
            depth_z: 1.0,
        };
        assert_eq!(gaussian_weight(&splat, &Vector2::new(3.0, 4.0)), Some(1.0));
        let w = gaussian_weight(&splat, &Vector2::new(4.0, 5.0)).unwrap();
        assert!((w - (-1.0f64).exp()).abs() < 1e-15);
        let w = gaussian_weight(&splat, &Vector2::new(6.0, 8.0)).unwrap();
        assert!((w - 3.727e-6).abs() < 1e-9);
        let singular = Splat2D {
            cov2d: Matrix2::zeros(),
            ..splat
        };
        assert!(gaussian_weight(&singular, &Vector2::zeros()).is_none());
    }

    fn splat_loss(g: &Gaussian3D, intr: &Intrinsics, pose: &Pose) -> f64 {
        let p = Projection::compute(g, intr, pose).unwrap();
        1.3 * p.splat.mean2d.x - 0.7 * p.splat.mean2d.y
            + 2.0 * p.conic[(0, 0)]
            + 0.5 * (p.conic[(0, 1)] + p.conic[(1, 0)])
            - 1.5 * p.conic[(1, 1)]
            + 0.9 * p.splat.depth_z
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let intr = Intrinsics::centered(40.0, 32, 24);
        let pose = Pose::look_at(
            Vector3::new(0.5, -0.3, -3.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        );
        let mut g = Gaussian3D::new(Vector3::new(0.2, 0.3, 0.1), 0.2, 0);
        g.log_scale = Vector3::new(-1.2, -1.9, -1.5);
        g.rotation = [0.8, 0.3, -0.2, 0.4];
        let proj = Projection::compute(&g, &intr, &pose).unwrap();
        let d_conic = Matrix2::new(2.0, 0.5, 0.5, -1.5);
        let grad = proj.vjp(&intr, &pose, &Vector2::new(1.3, -0.7), &d_conic, 0.9);
        let mut flat = vec![0.0; 17];
        g.write_flat(&mut flat);
        let analytic: Vec<f64> = grad
            .position
            .iter()
            .chain(grad.log_scale.iter())
            .chain(grad.rotation.iter())
            .copied()
            .collect();
        for k in 0..10 {
            let h = 1e-6;
            let mut a = g.clone();
            let mut b = g.clone();
            let mut fa = flat.clone();
            let mut fb = flat.clone();
            fa[k] += h;
            fb[k] -= h;
            a.read_flat(&fa);
            b.read_flat(&fb);
            let fd = (splat_loss(&a, &intr, &pose) - splat_loss(&b, &intr, &pose)) / (2.0 * h);
            let err = (fd - analytic[k]).abs() / fd.abs().max(1e-6);
            assert!(err < 1e-5, "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }

    proptest! {
        #[test]
        fn projection_commutes_with_rigid_motion(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
            shift in prop::array::uniform3(-5.0f64..5.0),
            pos in prop::array::uniform3(-0.5f64..0.5),
        ) {
            let intr = Intrinsics::centered(40.0, 32, 24);
            let pose = Pose::look_at(
                Vector3::new(0.2, 0.1, -3.0),
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
            );
            let mut g = Gaussian3D::new(Vector3::from(pos), 0.2, 0);
            g.rotation = [0.9, 0.1, 0.2, -0.3];
            g.normalize_rotation();
            g.log_scale = Vector3::new(-1.0, -1.5, -2.0);
            let before = Projection::compute(&g, &intr, &pose).unwrap().splat;

            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let shift = Vector3::from(shift);
            // world' = rot * world + shift; camera pose compensates
            let moved_pose = Pose {
                rotation: pose.rotation * rot.matrix().transpose(),
                translation: pose.translation - pose.rotation * rot.matrix().transpose() * shift,
            };
            let mut moved = g.clone();
            moved.position = rot * g.position + shift;
            let q = UnitQuaternion::from_rotation_matrix(&rot)
                * UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3],
                ));
            moved.rotation = [q.w, q.i, q.j, q.k];
            let after = Projection::compute(&moved, &intr, &moved_pose).unwrap().splat;
            prop_assert!((before.mean2d - after.mean2d).abs().max() < 1e-9);
            prop_assert!((before.cov2d - after.cov2d).abs().max() < 1e-9);
            prop_assert!((before.depth_z - after.depth_z).abs() < 1e-9);
        }

        #[test]
        fn weight_decreases_along_rays(
            dir in -3.1f64..3.1,
            t1 in 0.0f64..5.0,
            dt in 0.01f64..5.0,
        ) {
            let splat = Splat2D {
                mean2d: Vector2::new(5.0, 5.0),
                cov2d: Matrix2::new(3.0, 1.0, 1.0, 2.0),
                depth_z: 1.0,
            };
            let ray = Vector2::new(dir.cos(), dir.sin());
            let w1 = gaussian_weight(&splat, &(splat.mean2d + ray * t1)).unwrap();
            let w2 = gaussian_weight(&splat, &(splat.mean2d + ray * (t1 + dt))).unwrap();
            prop_assert!(w2 < w1);
            prop_assert!(w1 <= 1.0);
        }
    }
}
