//! Closed-form SH lighting from an image with known albedo and normals.
//!
//! Per channel `c` this minimizes
//! `Σ_p (I_c(p) − A_c(p) h(n(p))ᵀ x)² + ridge · ‖x‖²` through the 9×9 normal
//! equations.

use nalgebra::{SMatrix, SVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::{ImagePlane, Mask, NormalMap};
use crate::sh::{basis, ShLighting, NUM_BASIS};

type Mat9 = SMatrix<f64, NUM_BASIS, NUM_BASIS>;
type Vec9 = SVector<f64, NUM_BASIS>;

/// Relative ridge used when the caller does not pick one.
pub const DEFAULT_RELATIVE_RIDGE: f64 = 1e-8;

/// Eigenvalues below `RANK_TOLERANCE · λ_max` count as zero.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `1e-8 · trace(Gram) / 9`, per channel.
    ScaleFree,
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::ScaleFree
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightEstimate {
    pub light: ShLighting,
    /// Root mean square of `I − render(A, N, L)` over foreground pixels and channels.
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// Smallest numerical rank over the three channels.
    pub rank: usize,
    /// Largest `λ_max / λ_min` over the three channels; infinite when singular.
    pub condition: f64,
    /// Ascending eigenvalues of each channel's Gram matrix.
    pub eigenvalues: [[f64; NUM_BASIS]; 3],
}

struct Systems {
    gram: [Mat9; 3],
    rhs: [Vec9; 3],
}

fn check_inputs(
    albedo: &ImagePlane,
    normals: &NormalMap,
    mask: &Mask,
    image: Option<&ImagePlane>,
) -> Result<()> {
    albedo.check_dims(mask.width(), mask.height(), 3, "albedo")?;
    mask.check_matches(normals.plane(), "normals")?;
    if let Some(img) = image {
        img.check_dims(mask.width(), mask.height(), 3, "image")?;
    }
    mask.require_foreground(NUM_BASIS)?;
    for i in mask.indices() {
        let finite = albedo.pixel(i).iter().all(|v| v.is_finite())
            && normals.get(i).iter().all(|v| v.is_finite())
            && image.map_or(true, |img| img.pixel(i).iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::invalid(format!("non-finite input at pixel {i}")));
        }
    }
    Ok(())
}

fn accumulate(
    image: Option<&ImagePlane>,
    albedo: &ImagePlane,
    normals: &NormalMap,
    mask: &Mask,
) -> Systems {
    let mut gram = [Mat9::zeros(); 3];
    let mut rhs = [Vec9::zeros(); 3];
    for i in mask.indices() {
        let h = Vec9::from(basis(normals.get(i)));
        let hh = h * h.transpose();
        let a = albedo.pixel(i);
        for c in 0..3 {
            gram[c] += hh * (a[c] * a[c]);
            if let Some(img) = image {
                rhs[c] += h * (a[c] * img.pixel(i)[c]);
            }
        }
    }
    Systems { gram, rhs }
}

pub fn estimate_light(
    image: &ImagePlane,
    albedo: &ImagePlane,
    normals: &NormalMap,
    mask: &Mask,
    ridge: Ridge,
) -> Result<LightEstimate> {
    if let Ridge::Absolute(r) = ridge {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("ridge must be finite and >= 0, got {r}")));
        }
    }
    check_inputs(albedo, normals, mask, Some(image))?;
    let sys = accumulate(Some(image), albedo, normals, mask);

    let mut light = ShLighting::zero();
    for c in 0..3 {
        let g = &sys.gram[c];
        let r = match ridge {
            Ridge::ScaleFree => DEFAULT_RELATIVE_RIDGE * g.trace() / NUM_BASIS as f64,
            Ridge::Absolute(r) => r,
        };
        let lhs = g + Mat9::identity() * r;
        let chol = lhs.cholesky().ok_or_else(|| {
            Error::insufficient(format!(
                "lighting system for channel {c} is singular; raise the ridge"
            ))
        })?;
        let x = chol.solve(&sys.rhs[c]);
        for k in 0..NUM_BASIS {
            light.coeffs[k][c] = x[k];
        }
    }
    if !light.is_finite() {
        return Err(Error::insufficient("lighting solve produced non-finite values"));
    }
    let rms_residual = residual_rms(image, albedo, normals, mask, &light);
    Ok(LightEstimate {
        light,
        rms_residual,
    })
}

/// RMS of `I − A ∘ (Lᵀ h(n))` over foreground pixels and channels.
pub fn residual_rms(
    image: &ImagePlane,
    albedo: &ImagePlane,
    normals: &NormalMap,
    mask: &Mask,
    light: &ShLighting,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in mask.indices() {
        let s = light.shade(&basis(normals.get(i)));
        let a = albedo.pixel(i);
        let img = image.pixel(i);
        for c in 0..3 {
            let r = img[c] - a[c] * s[c];
            sum += r * r;
        }
        count += 3;
    }
    (sum / count.max(1) as f64).sqrt()
}

pub fn condition_report(
    normals: &NormalMap,
    albedo: &ImagePlane,
    mask: &Mask,
) -> Result<ConditionReport> {
    check_inputs(albedo, normals, mask, None)?;
    let sys = accumulate(None, albedo, normals, mask);
    let mut rank = NUM_BASIS;
    let mut condition: f64 = 0.0;
    let mut eigenvalues = [[0.0; NUM_BASIS]; 3];
    for c in 0..3 {
        let eig = SymmetricEigen::new(sys.gram[c]);
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let max = ev[NUM_BASIS - 1];
        let min = ev[0];
        let r = ev.iter().filter(|&&v| v > RANK_TOLERANCE * max).count();
        rank = rank.min(r);
        condition = condition.max(if min > 0.0 { max / min } else { f64::INFINITY });
        eigenvalues[c].copy_from_slice(&ev);
    }
    Ok(ConditionReport {
        rank,
        condition,
        eigenvalues,
    })
}
