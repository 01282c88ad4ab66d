//! Real spherical harmonics up to degree 3, with the sign conventions used
//! by standard Gaussian-splatting PLY files.

use core::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const MAX_SH_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Degree-0 basis constant `Y₀₀`.
pub const SH_C0: f64 = C0;

/// Number of coefficients for a degree.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Scalar supporting the arithmetic the basis needs; implemented for `f64`
/// and for a forward-mode dual number so the direction gradient comes from
/// the same code path.
pub trait ShScalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn lit(v: f64) -> Self;
}

impl ShScalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
}

/// Value plus gradient with respect to a 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    pub fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}
impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}
impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
            ],
        }
    }
}
impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}
impl ShScalar for Dual3 {
    fn lit(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }
}

/// Evaluates the first `coeff_count(degree)` basis functions at `dir`.
pub fn basis<T: ShScalar>(degree: usize, dir: [T; 3], out: &mut [T]) {
    let c = T::lit;
    let [x, y, z] = dir;
    out[0] = c(C0);
    if degree < 1 {
        return;
    }
    out[1] = -(c(C1) * y);
    out[2] = c(C1) * z;
    out[3] = -(c(C1) * x);
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = c(C2[0]) * xy;
    out[5] = c(C2[1]) * yz;
    out[6] = c(C2[2]) * (c(2.0) * zz - xx - yy);
    out[7] = c(C2[3]) * xz;
    out[8] = c(C2[4]) * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = c(C3[0]) * y * (c(3.0) * xx - yy);
    out[10] = c(C3[1]) * xy * z;
    out[11] = c(C3[2]) * y * (c(4.0) * zz - xx - yy);
    out[12] = c(C3[3]) * z * (c(2.0) * zz - c(3.0) * xx - c(3.0) * yy);
    out[13] = c(C3[4]) * x * (c(4.0) * zz - xx - yy);
    out[14] = c(C3[5]) * z * (xx - yy);
    out[15] = c(C3[6]) * x * (xx - c(3.0) * yy);
}

fn degree_of(len: usize) -> Result<usize> {
    (0..=MAX_SH_DEGREE)
        .find(|&d| coeff_count(d) == len)
        .ok_or_else(|| Error::invalid(alloc::format!("{len} SH coefficients is not (L+1)² for L ≤ 3")))
}

/// Color before the `[0, 1]` clamp: `Σ cₗ·Yₗ(dir) + 0.5`.
pub fn sh_to_color_unclamped(coeffs: &[Vec3], dir: Vec3) -> Result<Vec3> {
    let degree = degree_of(coeffs.len())?;
    let mut b = [0.0f64; 16];
    basis(degree, dir, &mut b);
    let mut rgb = [0.5; 3];
    for (k, c) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            rgb[ch] += b[k] * c[ch];
        }
    }
    Ok(rgb)
}

/// View-dependent color of one Gaussian, clamped to `[0, 1]`.
pub fn sh_to_color(coeffs: &[Vec3], dir: Vec3) -> Result<Vec3> {
    let rgb = sh_to_color_unclamped(coeffs, dir)?;
    Ok([rgb[0].clamp(0.0, 1.0), rgb[1].clamp(0.0, 1.0), rgb[2].clamp(0.0, 1.0)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_only_offset() {
        let rgb = sh_to_color(&[[0.0; 3]], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rgb, [0.5, 0.5, 0.5]);
        let rgb = sh_to_color(&[[1.2, 0.0, 0.0]], [0.0, 0.0, 1.0]).unwrap();
        assert!((rgb[0] - (0.28209 * 1.2 + 0.5)).abs() < 1e-5);
        assert_eq!(rgb[1], 0.5);
        let rgb = sh_to_color(&[[5.0, 0.0, 0.0]], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(rgb[0], 1.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(matches!(
            sh_to_color(&[[0.0; 3]; 5], [0.0, 0.0, 1.0]),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn dual_basis_matches_finite_difference() {
        let dir = [0.3, -0.5, 0.81];
        let dual = [Dual3::var(dir[0], 0), Dual3::var(dir[1], 1), Dual3::var(dir[2], 2)];
        let mut bd = [Dual3::lit(0.0); 16];
        basis(3, dual, &mut bd);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = dir;
            p[axis] += h;
            let mut m = dir;
            m[axis] -= h;
            let (mut bp, mut bm) = ([0.0; 16], [0.0; 16]);
            basis(3, p, &mut bp);
            basis(3, m, &mut bm);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - bd[k].d[axis]).abs() < 1e-8);
            }
        }
    }
}
