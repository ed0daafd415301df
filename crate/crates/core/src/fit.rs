//! Direct per-pair optimization of albedo, normals and lighting.
//!
//! Each pair member owns free albedo logits, unnormalized normal parameters
//! and a 9×3 lighting; Adam descends the weighted image losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{normalize_backward, ColorSpace, ImagePlane, Mask, NormalMap};
use crate::lightsolve::{estimate_light, Ridge};
use crate::losses::{total_loss_with_grad, Components, LossBreakdown, LossWeights, PairEstimate};
use crate::nn::{Adam, AdamConfig};
use crate::sh::{ShLighting, NUM_BASIS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Albedo used for the initial lighting solve.
    pub init_albedo: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            lr: 1e-3,
            init_albedo: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Lowest-loss iterate seen.
    pub estimate: PairEstimate,
    pub best_loss: LossBreakdown,
    /// Loss of the variables entering each iteration.
    pub trace: Vec<LossBreakdown>,
}

/// Normals of the sphere whose disc has the mask's centroid and area.
pub fn sphere_prior(mask: &Mask) -> Result<NormalMap> {
    let n = mask.require_foreground(1)? as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in mask.indices() {
        cx += (i % mask.width()) as f64;
        cy += (i / mask.width()) as f64;
    }
    cx /= n;
    cy /= n;
    let r = (n / std::f64::consts::PI).sqrt().max(0.5);
    let plane = ImagePlane::from_fn_rgb(mask.width(), mask.height(), ColorSpace::NormalXyz, |x, y| {
        let u = (x as f64 - cx) / r;
        let v = -(y as f64 - cy) / r;
        let d = (u * u + v * v).sqrt();
        // keep a small forward component at and beyond the rim
        let (u, v) = if d > 0.99 { (u * 0.99 / d, v * 0.99 / d) } else { (u, v) };
        [u, v, (1.0 - u * u - v * v).max(0.0).sqrt()]
    })?;
    NormalMap::from_raw(&plane)
}

/// Flat albedo, sphere-prior normals and the least-squares lighting for
/// each image under them.
pub fn prior_estimate(i1: &ImagePlane, i2: &ImagePlane, mask: &Mask, init_albedo: f64) -> Result<PairEstimate> {
    let normals = sphere_prior(mask)?;
    let albedo = ImagePlane::filled(mask.width(), mask.height(), 3, ColorSpace::LinearRgb, init_albedo);
    let member = |img: &ImagePlane| -> Result<Components> {
        let light = estimate_light(img, &albedo, &normals, mask, Ridge::default())?.light;
        Ok(Components {
            albedo: albedo.clone(),
            normals: normals.clone(),
            light,
        })
    };
    Ok(PairEstimate::new(member(i1)?, member(i2)?))
}

struct Vars {
    logits: [Vec<f64>; 2],
    raw: [Vec<f64>; 2],
    light: [[f64; 3 * NUM_BASIS]; 2],
}

fn logit(a: f64) -> f64 {
    let a = a.clamp(1e-6, 1.0 - 1e-6);
    (a / (1.0 - a)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Vars {
    fn from_estimate(est: &PairEstimate) -> Self {
        let m = &est.members;
        Self {
            logits: [0, 1].map(|k| m[k].albedo.data().iter().map(|&a| logit(a)).collect()),
            raw: [0, 1].map(|k| m[k].normals.plane().data().to_vec()),
            light: [0, 1].map(|k| m[k].light.to_flat()),
        }
    }

    fn len(&self) -> usize {
        2 * (self.logits[0].len() + self.raw[0].len() + 3 * NUM_BASIS)
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for k in 0..2 {
            v.extend_from_slice(&self.logits[k]);
            v.extend_from_slice(&self.raw[k]);
            v.extend_from_slice(&self.light[k]);
        }
        v
    }

    fn unflatten(&mut self, v: &[f64]) {
        let mut off = 0;
        for k in 0..2 {
            let n = self.logits[k].len();
            self.logits[k].copy_from_slice(&v[off..off + n]);
            off += n;
            self.raw[k].copy_from_slice(&v[off..off + n]);
            off += n;
            self.light[k].copy_from_slice(&v[off..off + 3 * NUM_BASIS]);
            off += 3 * NUM_BASIS;
        }
    }

    fn decode(&self, w: usize, h: usize) -> Result<PairEstimate> {
        let member = |k: usize| -> Result<Components> {
            let albedo = ImagePlane::new(
                w,
                h,
                3,
                ColorSpace::LinearRgb,
                self.logits[k].iter().map(|&z| sigmoid(z)).collect(),
            )?;
            let raw = ImagePlane::new(w, h, 3, ColorSpace::NormalXyz, self.raw[k].clone())?;
            Ok(Components {
                albedo,
                normals: NormalMap::from_raw(&raw)?,
                light: ShLighting::from_flat(&self.light[k])?,
            })
        };
        Ok(PairEstimate::new(member(0)?, member(1)?))
    }
}

fn non_finite(step: usize, best: Option<&PairEstimate>, what: &str) -> Error {
    Error::OptimizationFailed {
        step,
        reason: format!("{what} became non-finite"),
        last_finite: best.map(|b| Box::new(b.clone())),
    }
}

/// Fits a multi-lit pair from the flat-albedo / sphere-prior start.
///
/// Only the image terms of `w` are used; there is no supervision here.
pub fn fit_pair(i1: &ImagePlane, i2: &ImagePlane, mask: &Mask, w: &LossWeights, cfg: &FitConfig) -> Result<FitResult> {
    i1.check_dims(mask.width(), mask.height(), 3, "first image")?;
    i2.check_dims(mask.width(), mask.height(), 3, "second image")?;
    let init = prior_estimate(i1, i2, mask, cfg.init_albedo)?;
    fit_pair_from(&init, i1, i2, mask, w, cfg)
}

/// Same as [`fit_pair`] from a caller-supplied starting point.
pub fn fit_pair_from(
    init: &PairEstimate,
    i1: &ImagePlane,
    i2: &ImagePlane,
    mask: &Mask,
    w: &LossWeights,
    cfg: &FitConfig,
) -> Result<FitResult> {
    w.validate()?;
    if cfg.iterations == 0 {
        return Err(Error::invalid("iterations must be positive"));
    }
    let weights = LossWeights {
        lambda_albedo: 0.0,
        lambda_normal: 0.0,
        lambda_light: 0.0,
        ..*w
    };
    let (width, height) = (mask.width(), mask.height());
    let mut vars = Vars::from_estimate(init);
    let mut flat = vars.flatten();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        flat.len(),
    )?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(PairEstimate, LossBreakdown)> = None;

    for step in 0..=cfg.iterations {
        let est = vars.decode(width, height).map_err(|_| {
            non_finite(step, best.as_ref().map(|b| &b.0), "estimate")
        })?;
        let (loss, grads) = total_loss_with_grad(&est, [i1, i2], mask, None, &weights)?;
        if !loss.is_finite() {
            return Err(non_finite(step, best.as_ref().map(|b| &b.0), "loss"));
        }
        trace.push(loss);
        if best.as_ref().map_or(true, |b| loss.total < b.1.total) {
            best = Some((est.clone(), loss));
        }
        if step == cfg.iterations {
            break;
        }
        let mut g = Vec::with_capacity(flat.len());
        for (k, gk) in grads.iter().enumerate() {
            let a = est.members[k].albedo.data();
            g.extend(gk.d_albedo.data().iter().zip(a).map(|(d, s)| d * s * (1.0 - s)));
            for (u, dn) in vars.raw[k].chunks_exact(3).zip(gk.d_normals.data().chunks_exact(3)) {
                g.extend(normalize_backward([u[0], u[1], u[2]], [dn[0], dn[1], dn[2]]));
            }
            for row in &gk.d_light {
                g.extend_from_slice(row);
            }
        }
        opt.step(&mut flat, &g);
        vars.unflatten(&flat);
    }
    let (estimate, best_loss) = best.expect("at least one iteration ran");
    Ok(FitResult {
        estimate,
        best_loss,
        trace,
    })
}
