//! Training objective for multi-lit pairs.
//!
//! Image terms compare renders with observed images by mean L1 distance in
//! CIE L*a*b* after clamping both sides to `[0, 1]`. All per-pixel terms are
//! means over foreground pixels so they do not scale with mask size.

use serde::{Deserialize, Serialize};

use crate::color::lab_with_jacobian;
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane, Mask, NormalMap};
use crate::render::{render, render_backward_unit};
use crate::sh::{ShLighting, NUM_BASIS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_albedo: f64,
    pub lambda_normal: f64,
    pub lambda_light: f64,
    pub lambda_rec: f64,
    pub lambda_relit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_albedo: 1.0,
            lambda_normal: 1.0,
            lambda_light: 0.1,
            lambda_rec: 1.0,
            lambda_relit: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_albedo,
            self.lambda_normal,
            self.lambda_light,
            self.lambda_rec,
            self.lambda_relit,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }

    /// Only the self-supervised image terms.
    pub fn self_supervised(lambda_rec: f64, lambda_relit: f64) -> Self {
        Self {
            lambda_albedo: 0.0,
            lambda_normal: 0.0,
            lambda_light: 0.0,
            lambda_rec,
            lambda_relit,
        }
    }
}

/// Albedo, unit normals and lighting for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub albedo: ImagePlane,
    pub normals: NormalMap,
    pub light: ShLighting,
}

/// Estimates for the two members of a multi-lit pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub members: [Components; 2],
}

impl PairEstimate {
    pub fn new(first: Components, second: Components) -> Self {
        Self {
            members: [first, second],
        }
    }

    /// Both members set to the same albedo and normals.
    pub fn shared(albedo: ImagePlane, normals: NormalMap, lights: [ShLighting; 2]) -> Self {
        Self::new(
            Components {
                albedo: albedo.clone(),
                normals: normals.clone(),
                light: lights[0],
            },
            Components {
                albedo,
                normals,
                light: lights[1],
            },
        )
    }
}

/// Ground truth for the supervised terms. Albedo and normals are shared by
/// both images of a pair.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub albedo: &'a ImagePlane,
    pub normals: &'a NormalMap,
    pub lights: [&'a ShLighting; 2],
}

/// Unweighted value of every term, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub albedo: f64,
    pub normal: f64,
    pub light: f64,
    pub rec: f64,
    pub relit: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self, w: &LossWeights) -> Self {
        self.total = w.lambda_albedo * self.albedo
            + w.lambda_normal * self.normal
            + w.lambda_light * self.light
            + w.lambda_rec * self.rec
            + w.lambda_relit * self.relit;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.albedo, self.normal, self.light, self.rec, self.relit, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.albedo += k * other.albedo;
        self.normal += k * other.normal;
        self.light += k * other.light;
        self.rec += k * other.rec;
        self.relit += k * other.relit;
        self.total += k * other.total;
    }
}

/// Gradients for one pair member: with respect to its albedo, its unit
/// normals (before any reprojection) and its lighting.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentGradients {
    pub d_albedo: ImagePlane,
    pub d_normals: ImagePlane,
    pub d_light: [[f64; 3]; NUM_BASIS],
}

impl ComponentGradients {
    pub fn zeros(w: usize, h: usize) -> Self {
        Self {
            d_albedo: ImagePlane::zeros(w, h, 3, ColorSpace::Scalar),
            d_normals: ImagePlane::zeros(w, h, 3, ColorSpace::Scalar),
            d_light: [[0.0; 3]; NUM_BASIS],
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.d_albedo.data_mut().iter_mut().for_each(|v| *v *= k);
        self.d_normals.data_mut().iter_mut().for_each(|v| *v *= k);
        self.d_light.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

fn check_pair(x: &ImagePlane, y: &ImagePlane, mask: &Mask) -> Result<usize> {
    x.check_dims(mask.width(), mask.height(), 3, "distance lhs")?;
    y.check_dims(mask.width(), mask.height(), 3, "distance rhs")?;
    mask.require_foreground(1)
}

/// Mean over foreground pixels and the three channels of
/// `|lab(clamp(x)) − lab(clamp(y))|`.
pub fn distance_lab(x: &ImagePlane, y: &ImagePlane, mask: &Mask) -> Result<f64> {
    let n = check_pair(x, y, mask)?;
    let mut sum = 0.0;
    for i in mask.indices() {
        let (lx, _) = lab_with_jacobian(x.rgb(i));
        let (ly, _) = lab_with_jacobian(y.rgb(i));
        sum += (lx[0] - ly[0]).abs() + (lx[1] - ly[1]).abs() + (lx[2] - ly[2]).abs();
    }
    Ok(sum / (3 * n) as f64)
}

/// [`distance_lab`] and its gradient with respect to `x`.
pub fn distance_lab_grad(x: &ImagePlane, y: &ImagePlane, mask: &Mask) -> Result<(f64, ImagePlane)> {
    let n = check_pair(x, y, mask)?;
    let norm = 1.0 / (3 * n) as f64;
    let mut grad = ImagePlane::zeros(x.width(), x.height(), 3, ColorSpace::Scalar);
    let mut sum = 0.0;
    for i in mask.indices() {
        let (lx, jac) = lab_with_jacobian(x.rgb(i));
        let (ly, _) = lab_with_jacobian(y.rgb(i));
        let g = grad.pixel_mut(i);
        for k in 0..3 {
            let d = lx[k] - ly[k];
            sum += d.abs();
            let s = if d > 0.0 {
                norm
            } else if d < 0.0 {
                -norm
            } else {
                0.0
            };
            if s != 0.0 {
                for c in 0..3 {
                    g[c] += s * jac[k][c];
                }
            }
        }
    }
    Ok((sum * norm, grad))
}

fn render_term(est: &PairEstimate, geometry: usize, light: usize, target: &ImagePlane, mask: &Mask) -> Result<f64> {
    let m = &est.members[geometry];
    let r = render(&m.albedo, &m.normals, &est.members[light].light, mask)?;
    distance_lab(&r, target, mask)
}

/// `d(render(Â₁, N̂₁, L̂₁), I₁) + d(render(Â₂, N̂₂, L̂₂), I₂)`.
pub fn loss_rec(est: &PairEstimate, i1: &ImagePlane, i2: &ImagePlane, mask: &Mask) -> Result<f64> {
    Ok(render_term(est, 0, 0, i1, mask)? + render_term(est, 1, 1, i2, mask)?)
}

/// `d(render(Â₁, N̂₁, L̂₂), I₂) + d(render(Â₂, N̂₂, L̂₁), I₁)`.
pub fn loss_relit(est: &PairEstimate, i1: &ImagePlane, i2: &ImagePlane, mask: &Mask) -> Result<f64> {
    Ok(render_term(est, 0, 1, i2, mask)? + render_term(est, 1, 0, i1, mask)?)
}

fn mean_l1(a: &ImagePlane, b: &ImagePlane, mask: &Mask, n: usize) -> f64 {
    let mut sum = 0.0;
    for i in mask.indices() {
        for (x, y) in a.pixel(i).iter().zip(b.pixel(i)) {
            sum += (x - y).abs();
        }
    }
    sum / (3 * n) as f64
}

fn squared_l2(a: &ShLighting, b: &ShLighting) -> f64 {
    a.coeffs
        .iter()
        .flatten()
        .zip(b.coeffs.iter().flatten())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn check_supervision(est: &PairEstimate, sup: &Supervision, mask: &Mask) -> Result<usize> {
    sup.albedo.check_dims(mask.width(), mask.height(), 3, "gt albedo")?;
    mask.check_matches(sup.normals.plane(), "gt normals")?;
    for m in &est.members {
        m.albedo.check_dims(mask.width(), mask.height(), 3, "albedo estimate")?;
        mask.check_matches(m.normals.plane(), "normal estimate")?;
    }
    mask.require_foreground(1)
}

/// Unweighted supervised terms summed over both members; a term is skipped
/// (reported as zero) when its weight is zero.
fn supervised_terms(est: &PairEstimate, sup: &Supervision, mask: &Mask, w: &LossWeights) -> Result<LossBreakdown> {
    let n = check_supervision(est, sup, mask)?;
    let mut out = LossBreakdown::default();
    for (m, gt_light) in est.members.iter().zip(sup.lights) {
        if w.lambda_albedo != 0.0 {
            out.albedo += mean_l1(&m.albedo, sup.albedo, mask, n);
        }
        if w.lambda_normal != 0.0 {
            out.normal += mean_l1(m.normals.plane(), sup.normals.plane(), mask, n);
        }
        if w.lambda_light != 0.0 {
            out.light += squared_l2(&m.light, gt_light);
        }
    }
    Ok(out)
}

/// `λ_A‖Â − A‖₁ + λ_N‖N̂ − N‖₁ + λ_L‖L̂ − L‖₂²` summed over both members.
pub fn loss_supervised(est: &PairEstimate, sup: &Supervision, mask: &Mask, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let t = supervised_terms(est, sup, mask, w)?;
    Ok(w.lambda_albedo * t.albedo + w.lambda_normal * t.normal + w.lambda_light * t.light)
}

/// Weighted objective with a per-term breakdown. Supervised terms are
/// included only when `sup` is given.
pub fn total_loss(
    est: &PairEstimate,
    images: [&ImagePlane; 2],
    mask: &Mask,
    sup: Option<&Supervision>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let mut out = match sup {
        Some(s) => supervised_terms(est, s, mask, w)?,
        None => LossBreakdown::default(),
    };
    if w.lambda_rec != 0.0 {
        out.rec = loss_rec(est, images[0], images[1], mask)?;
    }
    if w.lambda_relit != 0.0 {
        out.relit = loss_relit(est, images[0], images[1], mask)?;
    }
    Ok(out.finish(w))
}

/// [`total_loss`] together with its gradient for each pair member.
pub fn total_loss_with_grad(
    est: &PairEstimate,
    images: [&ImagePlane; 2],
    mask: &Mask,
    sup: Option<&Supervision>,
    w: &LossWeights,
) -> Result<(LossBreakdown, [ComponentGradients; 2])> {
    w.validate()?;
    let (width, height) = (mask.width(), mask.height());
    let mut grads = [
        ComponentGradients::zeros(width, height),
        ComponentGradients::zeros(width, height),
    ];
    let mut out = LossBreakdown::default();

    if let Some(s) = sup {
        out = supervised_terms(est, s, mask, w)?;
        let n = mask.count();
        let k = 1.0 / (3 * n) as f64;
        for (m, (g, gt_light)) in est.members.iter().zip(grads.iter_mut().zip(s.lights)) {
            for i in mask.indices() {
                if w.lambda_albedo != 0.0 {
                    let (a, t) = (m.albedo.pixel(i), s.albedo.pixel(i));
                    let ga = g.d_albedo.pixel_mut(i);
                    for c in 0..3 {
                        ga[c] += w.lambda_albedo * k * sign(a[c] - t[c]);
                    }
                }
                if w.lambda_normal != 0.0 {
                    let (nn, t) = (m.normals.get(i), s.normals.get(i));
                    let gn = g.d_normals.pixel_mut(i);
                    for c in 0..3 {
                        gn[c] += w.lambda_normal * k * sign(nn[c] - t[c]);
                    }
                }
            }
            if w.lambda_light != 0.0 {
                for kk in 0..NUM_BASIS {
                    for c in 0..3 {
                        g.d_light[kk][c] +=
                            w.lambda_light * 2.0 * (m.light.coeffs[kk][c] - gt_light.coeffs[kk][c]);
                    }
                }
            }
        }
    }

    // (geometry member, light member, target image, weight, is_relit)
    let mut terms = Vec::with_capacity(4);
    if w.lambda_rec != 0.0 {
        terms.push((0, 0, 0, w.lambda_rec, false));
        terms.push((1, 1, 1, w.lambda_rec, false));
    }
    if w.lambda_relit != 0.0 {
        terms.push((0, 1, 1, w.lambda_relit, true));
        terms.push((1, 0, 0, w.lambda_relit, true));
    }
    for (geo, lit, target, weight, is_relit) in terms {
        let m = &est.members[geo];
        let light = &est.members[lit].light;
        let r = render(&m.albedo, &m.normals, light, mask)?;
        let (v, mut g) = distance_lab_grad(&r, images[target], mask)?;
        if is_relit {
            out.relit += v;
        } else {
            out.rec += v;
        }
        g.data_mut().iter_mut().for_each(|x| *x *= weight);
        let (da, dn, dl) = render_backward_unit(&g, &m.albedo, &m.normals, light, mask)?;
        add_into(&mut grads[geo].d_albedo, &da);
        add_into(&mut grads[geo].d_normals, &dn);
        for k in 0..NUM_BASIS {
            for c in 0..3 {
                grads[lit].d_light[k][c] += dl[k][c];
            }
        }
    }
    Ok((out.finish(w), grads))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(acc: &mut ImagePlane, g: &ImagePlane) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}
