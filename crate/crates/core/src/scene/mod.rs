//! Scene representation: Gaussians, posed cameras, spherical harmonics and
//! the pinhole projection of a 3D Gaussian onto the image plane.

mod projection;
pub mod sh;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};

pub use projection::{gaussian_weight, project_gaussian, Projection, Splat2D, NEAR_PLANE};

pub const MAX_SH_DEGREE: usize = 3;

/// Number of SH coefficients per channel for a degree.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Number of scalar parameters one Gaussian contributes to a flat vector.
pub const fn gaussian_stride(sh_degree: usize) -> usize {
    GaussianParam::Sh as usize + 3 * sh_coeff_count(sh_degree)
}

/// Offsets of each parameter group inside a Gaussian's flat slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianParam {
    Position = 0,
    LogScale = 3,
    Rotation = 6,
    Opacity = 10,
    Backscatter = 11,
    Sh = 14,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// Per-axis log of the standard deviations, so scales stay positive.
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`. Kept at unit norm between updates.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `sh[k][ch]`, `k < (L+1)^2`.
    pub sh: Vec<[f64; 3]>,
    pub backscatter_logit: [f64; 3],
}

impl Gaussian3D {
    pub fn new(position: Vector3<f64>, scale: f64, sh_degree: usize) -> Self {
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; sh_coeff_count(sh_degree)],
            backscatter_logit: [0.0; 3],
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn backscatter_colour(&self) -> [f64; 3] {
        self.backscatter_logit.map(sigmoid)
    }

    pub fn normalized_rotation(&self) -> [f64; 4] {
        let [w, x, y, z] = self.rotation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        [w / n, x / n, y / n, z / n]
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = self.normalized_rotation();
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.normalized_rotation())
    }

    /// `R diag(s^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation_matrix() * Matrix3::from_diagonal(&self.scale());
        m * m.transpose()
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        out[0..3].copy_from_slice(self.position.as_slice());
        out[3..6].copy_from_slice(self.log_scale.as_slice());
        out[6..10].copy_from_slice(&self.rotation);
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(&self.backscatter_logit);
        for (k, c) in self.sh.iter().enumerate() {
            out[14 + 3 * k..17 + 3 * k].copy_from_slice(c);
        }
    }

    pub fn read_flat(&mut self, src: &[f64]) {
        self.position = Vector3::new(src[0], src[1], src[2]);
        self.log_scale = Vector3::new(src[3], src[4], src[5]);
        self.rotation.copy_from_slice(&src[6..10]);
        self.opacity_logit = src[10];
        self.backscatter_logit.copy_from_slice(&src[11..14]);
        for (k, c) in self.sh.iter_mut().enumerate() {
            c.copy_from_slice(&src[14 + 3 * k..17 + 3 * k]);
        }
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pull a gradient on the rotation matrix back to the unit quaternion.
pub fn quat_to_matrix_vjp(q: [f64; 4], d: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let gw = 2.0 * z * (d[(1, 0)] - d[(0, 1)])
        + 2.0 * y * (d[(0, 2)] - d[(2, 0)])
        + 2.0 * x * (d[(2, 1)] - d[(1, 2)]);
    let gx = -4.0 * x * (d[(1, 1)] + d[(2, 2)])
        + 2.0 * y * (d[(0, 1)] + d[(1, 0)])
        + 2.0 * z * (d[(0, 2)] + d[(2, 0)])
        + 2.0 * w * (d[(2, 1)] - d[(1, 2)]);
    let gy = -4.0 * y * (d[(0, 0)] + d[(2, 2)])
        + 2.0 * x * (d[(0, 1)] + d[(1, 0)])
        + 2.0 * z * (d[(1, 2)] + d[(2, 1)])
        + 2.0 * w * (d[(0, 2)] - d[(2, 0)]);
    let gz = -4.0 * z * (d[(0, 0)] + d[(1, 1)])
        + 2.0 * x * (d[(0, 2)] + d[(2, 0)])
        + 2.0 * y * (d[(1, 2)] + d[(2, 1)])
        + 2.0 * w * (d[(1, 0)] - d[(0, 1)]);
    [gw, gx, gy, gz]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian3D>,
    /// Stored SH degree; every Gaussian holds `(sh_degree + 1)^2` coefficients.
    pub sh_degree: usize,
    /// Degree used when rendering. Grows during training up to `sh_degree`.
    pub active_sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian3D>, sh_degree: usize) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Contract(format!("sh degree {sh_degree} > 3")));
        }
        let k = sh_coeff_count(sh_degree);
        if let Some(i) = gaussians.iter().position(|g| g.sh.len() != k) {
            return Err(Error::Contract(format!(
                "gaussian {i} has {} sh coefficients, expected {k}",
                gaussians[i].sh.len()
            )));
        }
        Ok(Self {
            gaussians,
            sh_degree,
            active_sh_degree: sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn stride(&self) -> usize {
        gaussian_stride(self.sh_degree)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let s = self.stride();
        let mut out = vec![0.0; s * self.len()];
        for (g, chunk) in self.gaussians.iter().zip(out.chunks_exact_mut(s)) {
            g.write_flat(chunk);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let s = self.stride();
        debug_assert_eq!(flat.len(), s * self.len());
        for (g, chunk) in self.gaussians.iter_mut().zip(flat.chunks_exact(s)) {
            g.read_flat(chunk);
        }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.position).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Principal point at the image centre.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// World-to-camera rigid transform, `x_cam = R x_world + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, image y axis pointing along `-up`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image: Image,
    pub pseudo_depth: Option<Plane>,
    pub motion_mask: Option<Plane>,
    pub is_interpolated: bool,
    /// Index into the trainer's frame-weight table.
    pub weight_handle: Option<usize>,
}

impl CameraView {
    pub fn new(id: impl Into<String>, intrinsics: Intrinsics, pose: Pose, mut image: Image) -> Result<Self> {
        if image.width != intrinsics.width || image.height != intrinsics.height {
            return Err(Error::Shape(format!(
                "image {}x{} vs camera {}x{}",
                image.width, image.height, intrinsics.width, intrinsics.height
            )));
        }
        if pose.orthonormality_error() > 1e-6 {
            return Err(Error::Contract("camera rotation is not orthonormal".into()));
        }
        image.clamp01();
        Ok(Self {
            id: id.into(),
            intrinsics,
            pose,
            image,
            pseudo_depth: None,
            motion_mask: None,
            is_interpolated: false,
            weight_handle: None,
        })
    }

    /// Camera without a photograph, for rendering novel views.
    pub fn blank(id: impl Into<String>, intrinsics: Intrinsics, pose: Pose) -> Self {
        Self {
            id: id.into(),
            intrinsics,
            pose,
            image: Image::new(intrinsics.width, intrinsics.height),
            pseudo_depth: None,
            motion_mask: None,
            is_interpolated: false,
            weight_handle: None,
        }
    }

    pub fn with_mask(mut self, mask: Plane) -> Result<Self> {
        mask.ensure_matches(self.intrinsics.width, self.intrinsics.height)?;
        self.motion_mask = Some(mask);
        Ok(self)
    }

    pub fn with_pseudo_depth(mut self, depth: Plane) -> Result<Self> {
        depth.ensure_matches(self.intrinsics.width, self.intrinsics.height)?;
        self.pseudo_depth = Some(depth);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Motion mask, or all ones.
    pub fn mask_or_ones(&self) -> Plane {
        self.motion_mask
            .clone()
            .unwrap_or_else(|| Plane::filled(self.width(), self.height(), 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quaternion_vjp_matches_finite_differences() {
        let q = [0.7, -0.2, 0.4, 0.1];
        let d = Matrix3::new(0.3, -1.0, 0.2, 0.5, 0.1, -0.7, 0.9, 0.4, -0.3);
        let f = |q: [f64; 4]| quat_to_matrix(q).component_mul(&d).sum();
        let g = quat_to_matrix_vjp(q, &d);
        for k in 0..4 {
            let (mut a, mut b) = (q, q);
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let fd = (f(a) - f(b)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn look_at_is_orthonormal_and_centered() {
        let eye = Vector3::new(1.0, 2.0, -3.0);
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0));
        assert!(pose.orthonormality_error() < 1e-12);
        assert!((pose.center() - eye).norm() < 1e-12);
        let target_cam = pose.to_camera(&Vector3::zeros());
        assert!(target_cam.x.abs() < 1e-12 && target_cam.y.abs() < 1e-12 && target_cam.z > 0.0);
    }

    #[test]
    fn flat_round_trip() {
        let mut g = Gaussian3D::new(Vector3::new(1.0, 2.0, 3.0), 0.5, 1);
        g.sh[3] = [0.1, 0.2, 0.3];
        g.backscatter_logit = [0.4, 0.5, 0.6];
        let mut flat = vec![0.0; gaussian_stride(1)];
        g.write_flat(&mut flat);
        let mut h = Gaussian3D::new(Vector3::zeros(), 1.0, 1);
        h.read_flat(&flat);
        assert_eq!(g, h);
    }

    #[test]
    fn mismatched_sh_length_rejected() {
        let g = Gaussian3D::new(Vector3::zeros(), 1.0, 2);
        assert!(GaussianCloud::new(vec![g], 1).is_err());
    }

    proptest! {
        #[test]
        fn covariance_is_spd(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(-4.0f64..1.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let mut g = Gaussian3D::new(Vector3::zeros(), 1.0, 0);
            g.rotation = q;
            g.log_scale = Vector3::from(s);
            let cov = g.covariance();
            prop_assert!((cov - cov.transpose()).abs().max() < 1e-12);
            let eig = cov.symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
        }
    }
}
