//! Real spherical harmonics up to degree 3 (the usual splatting constants and
//! sign convention) with their gradients in the viewing direction.

use nalgebra::Vector3;

use super::sh_coeff_count;
use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Offset added to the SH sum so zero coefficients give mid grey.
pub const SH_OFFSET: f64 = 0.5;

/// Basis values `Y_k(d)` for `k < (degree+1)^2`; trailing entries are zero.
pub fn sh_basis(d: &Vector3<f64>, degree: usize) -> [f64; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = [0.0; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
        if degree >= 3 {
            b[9] = SH_C3[0] * y * (3.0 * xx - yy);
            b[10] = SH_C3[1] * x * y * z;
            b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            b[14] = SH_C3[5] * z * (xx - yy);
            b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    b
}

/// Partial derivatives of each basis polynomial w.r.t. `(x, y, z)`.
pub fn sh_basis_grad(d: &Vector3<f64>, degree: usize) -> [[f64; 3]; 16] {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut g = [[0.0; 3]; 16];
    if degree >= 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        let c = SH_C2;
        g[4] = [c[0] * y, c[0] * x, 0.0];
        g[5] = [0.0, c[1] * z, c[1] * y];
        g[6] = [-2.0 * c[2] * x, -2.0 * c[2] * y, 4.0 * c[2] * z];
        g[7] = [c[3] * z, 0.0, c[3] * x];
        g[8] = [2.0 * c[4] * x, -2.0 * c[4] * y, 0.0];
        if degree >= 3 {
            let c = SH_C3;
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = [6.0 * c[0] * x * y, c[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [c[1] * y * z, c[1] * x * z, c[1] * x * y];
            g[11] = [
                -2.0 * c[2] * x * y,
                c[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * c[2] * y * z,
            ];
            g[12] = [
                -6.0 * c[3] * x * z,
                -6.0 * c[3] * y * z,
                c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                c[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * c[4] * x * y,
                8.0 * c[4] * x * z,
            ];
            g[14] = [2.0 * c[5] * x * z, -2.0 * c[5] * y * z, c[5] * (xx - yy)];
            g[15] = [c[6] * (3.0 * xx - 3.0 * yy), -6.0 * c[6] * x * y, 0.0];
        }
    }
    g
}

/// Raw SH sum per channel, without offset or clamp.
pub fn sh_sum(coeffs: &[[f64; 3]], basis: &[f64; 16], degree: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, &y) in coeffs.iter().zip(basis).take(sh_coeff_count(degree)) {
        for ch in 0..3 {
            out[ch] += c[ch] * y;
        }
    }
    out
}

/// View-dependent colour `max(SH(v) + 0.5, 0)` per channel.
pub fn eval_sh(coeffs: &[[f64; 3]], view_dir: &Vector3<f64>, degree: usize) -> Result<[f64; 3]> {
    if degree > super::MAX_SH_DEGREE || coeffs.len() < sh_coeff_count(degree) {
        return Err(Error::Contract(format!(
            "sh degree {degree} needs {} coefficients, have {}",
            sh_coeff_count(degree),
            coeffs.len()
        )));
    }
    let basis = sh_basis(view_dir, degree);
    Ok(sh_sum(coeffs, &basis, degree).map(|v| (v + SH_OFFSET).max(0.0)))
}

/// Degree-0 coefficient reproducing a flat colour.
pub fn rgb_to_dc(c: f64) -> f64 {
    (c - SH_OFFSET) / SH_C0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z).normalize()
    }

    #[test]
    fn degree_zero_unit_coefficient() {
        let c = eval_sh(&[[1.0; 3]], &unit(0.3, -0.2, 0.9), 0).unwrap();
        let expect = 1.0 / (2.0 * std::f64::consts::PI.sqrt()) + 0.5;
        for v in c {
            assert!((v - expect).abs() < 1e-12);
            assert!((v - 0.78209).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_coefficients_give_mid_grey() {
        let c = eval_sh(&[[0.0; 3]; 16], &unit(1.0, 2.0, 3.0), 3).unwrap();
        assert_eq!(c, [0.5; 3]);
    }

    #[test]
    fn degree_zero_is_view_independent() {
        let coeffs = [[0.3, -0.4, 0.8]];
        let a = eval_sh(&coeffs, &unit(1.0, 0.0, 0.0), 0).unwrap();
        let b = eval_sh(&coeffs, &unit(-0.3, 0.7, -0.2), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn odd_band_mirrors_about_offset() {
        let mut coeffs = [[0.0; 3]; 4];
        coeffs[2] = [0.4, 0.2, -0.3];
        let v = unit(0.2, -0.5, 0.8);
        let a = eval_sh(&coeffs, &v, 1).unwrap();
        let b = eval_sh(&coeffs, &(-v), 1).unwrap();
        for ch in 0..3 {
            assert!((a[ch] - 0.5 + (b[ch] - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn insufficient_coefficients_is_contract_error() {
        assert!(matches!(
            eval_sh(&[[0.0; 3]], &unit(0.0, 0.0, 1.0), 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let d = Vector3::new(0.3, -0.6, 0.74);
        let g = sh_basis_grad(&d, 3);
        for axis in 0..3 {
            let mut a = d;
            let mut b = d;
            a[axis] += 1e-6;
            b[axis] -= 1e-6;
            let (ba, bb) = (sh_basis(&a, 3), sh_basis(&b, 3));
            for k in 0..16 {
                let fd = (ba[k] - bb[k]) / 2e-6;
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn dc_inversion() {
        assert_eq!(rgb_to_dc(0.5), 0.0);
        let c = eval_sh(&[[rgb_to_dc(0.2); 3]], &unit(0.0, 0.0, 1.0), 0).unwrap();
        assert!((c[0] - 0.2).abs() < 1e-12);
    }
}
