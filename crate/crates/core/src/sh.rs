//! Second-order real spherical harmonics in the irradiance formulation
//! (clamped-cosine attenuation folded into the constants).
//!
//! Basis ordering, used for storage as well:
//!
//! | index | term        |
//! |-------|-------------|
//! | 0     | 1           |
//! | 1     | y           |
//! | 2     | z           |
//! | 3     | x           |
//! | 4     | xy          |
//! | 5     | yz          |
//! | 6     | 3z² − 1     |
//! | 7     | xz          |
//! | 8     | x² − y²     |

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const C1: f64 = 0.429043;
pub const C2: f64 = 0.511664;
pub const C3: f64 = 0.743125;
pub const C4: f64 = 0.886227;
pub const C5: f64 = 0.247708;

pub const NUM_BASIS: usize = 9;

/// Tolerance on `‖n‖ − 1` accepted by the checked basis functions.
pub const UNIT_TOLERANCE: f64 = 1e-4;

pub type ShBasisVector = [f64; NUM_BASIS];

/// Lighting as 9 SH coefficients per RGB channel. Serialized as a flat
/// 27-element array, basis-major and RGB-minor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShLighting {
    pub coeffs: [[f64; 3]; NUM_BASIS],
}

impl ShLighting {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Constant (DC-only) light.
    pub fn ambient(l0: [f64; 3]) -> Self {
        let mut l = Self::zero();
        l.coeffs[0] = l0;
        l
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != 3 * NUM_BASIS {
            return Err(Error::invalid(format!(
                "lighting needs 27 coefficients, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite lighting coefficient"));
        }
        let mut l = Self::zero();
        for (k, row) in l.coeffs.iter_mut().enumerate() {
            row.copy_from_slice(&v[3 * k..3 * k + 3]);
        }
        Ok(l)
    }

    pub fn to_flat(&self) -> [f64; 27] {
        let mut out = [0.0; 27];
        for (k, row) in self.coeffs.iter().enumerate() {
            out[3 * k..3 * k + 3].copy_from_slice(row);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut l = *self;
        l.coeffs.iter_mut().flatten().for_each(|v| *v *= k);
        l
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ShLighting, b: f64) -> Self {
        let mut l = Self::zero();
        for k in 0..NUM_BASIS {
            for c in 0..3 {
                l.coeffs[k][c] = a * self.coeffs[k][c] + b * other.coeffs[k][c];
            }
        }
        l
    }

    /// Irradiance for one basis vector, per channel.
    pub fn shade(&self, h: &ShBasisVector) -> [f64; 3] {
        let mut s = [0.0; 3];
        for (hk, row) in h.iter().zip(&self.coeffs) {
            s[0] += hk * row[0];
            s[1] += hk * row[1];
            s[2] += hk * row[2];
        }
        s
    }

    pub fn max_abs_diff(&self, other: &ShLighting) -> f64 {
        self.coeffs
            .iter()
            .flatten()
            .zip(other.coeffs.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Serialize for ShLighting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ShLighting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        ShLighting::from_flat(&v).map_err(serde::de::Error::custom)
    }
}

fn check_unit(n: [f64; 3]) -> Result<()> {
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if !len.is_finite() || (len - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!("normal {n:?} is not unit length")));
    }
    Ok(())
}

/// Basis vector without the unit-length check; callers guarantee `‖n‖ = 1`.
pub fn basis(n: [f64; 3]) -> ShBasisVector {
    let [x, y, z] = n;
    [
        C4,
        2.0 * C2 * y,
        2.0 * C2 * z,
        2.0 * C2 * x,
        2.0 * C1 * x * y,
        2.0 * C1 * y * z,
        C3 * z * z - C5,
        2.0 * C1 * x * z,
        C1 * (x * x - y * y),
    ]
}

/// `∂h/∂n` without the unit-length check. Row `k` holds `∂h_k/∂(x, y, z)`.
pub fn basis_jacobian(n: [f64; 3]) -> [[f64; 3]; NUM_BASIS] {
    let [x, y, z] = n;
    let a = 2.0 * C1;
    let b = 2.0 * C2;
    [
        [0.0, 0.0, 0.0],
        [0.0, b, 0.0],
        [0.0, 0.0, b],
        [b, 0.0, 0.0],
        [a * y, a * x, 0.0],
        [0.0, a * z, a * y],
        [0.0, 0.0, 2.0 * C3 * z],
        [a * z, 0.0, a * x],
        [a * x, -a * y, 0.0],
    ]
}

pub fn sh_basis(n: [f64; 3]) -> Result<ShBasisVector> {
    check_unit(n)?;
    Ok(basis(n))
}

pub fn sh_basis_jacobian(n: [f64; 3]) -> Result<[[f64; 3]; NUM_BASIS]> {
    check_unit(n)?;
    Ok(basis_jacobian(n))
}
