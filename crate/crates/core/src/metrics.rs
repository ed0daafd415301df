//! Evaluation metrics: normal angular error, pixel L1/L2 on the 0–255 sRGB
//! scale, masked SSIM, and the recon/relit table.

use serde::{Deserialize, Serialize};

use crate::color::{luma, srgb_encode};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane, Mask, NormalMap};
use crate::losses::PairEstimate;
use crate::render::render;

pub const REPORT_VERSION: &str = "v1";

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalErrorReport {
    /// Degrees.
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    /// Percent of pixels with error strictly below the threshold.
    pub pct_below_20: f64,
    pub pct_below_25: f64,
    pub pct_below_30: f64,
    pub pixels: usize,
}

/// Per-pixel angle in degrees between `n_hat` and `n_gt`, in mask order.
pub fn angular_errors(n_hat: &NormalMap, n_gt: &NormalMap, mask: &Mask) -> Result<Vec<f64>> {
    mask.check_matches(n_hat.plane(), "estimated normals")?;
    mask.check_matches(n_gt.plane(), "reference normals")?;
    mask.require_foreground(1)?;
    Ok(mask
        .indices()
        .map(|i| {
            let (a, b) = (n_hat.get(i), n_gt.get(i));
            let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            dot.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect())
}

pub fn angular_error(n_hat: &NormalMap, n_gt: &NormalMap, mask: &Mask) -> Result<NormalErrorReport> {
    summarize_angles(&angular_errors(n_hat, n_gt, mask)?)
}

/// Statistics over a pooled list of per-pixel angles (degrees).
pub fn summarize_angles(angles: &[f64]) -> Result<NormalErrorReport> {
    if angles.is_empty() {
        return Err(Error::insufficient("no pixels to evaluate"));
    }
    let n = angles.len() as f64;
    let mean = angles.iter().sum::<f64>() / n;
    let std = (angles.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = angles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let pct = |t: f64| 100.0 * angles.iter().filter(|&&a| a < t).count() as f64 / n;
    Ok(NormalErrorReport {
        mean,
        std,
        median,
        pct_below_20: pct(20.0),
        pct_below_25: pct(25.0),
        pct_below_30: pct(30.0),
        pixels: angles.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    /// Root mean square.
    L2,
}

/// Display values in `[0, 1]`: linear inputs are clamped and sRGB-encoded,
/// sRGB inputs are clamped.
fn display_values(img: &ImagePlane) -> Result<Vec<f64>> {
    match img.space() {
        ColorSpace::LinearRgb => Ok(img.data().iter().map(|v| srgb_encode(v.clamp(0.0, 1.0))).collect()),
        ColorSpace::Srgb => Ok(img.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()),
        other => Err(Error::invalid(format!("pixel metrics need an RGB image, got {other:?}"))),
    }
}

fn check_pair(x: &ImagePlane, y: &ImagePlane, mask: &Mask) -> Result<()> {
    x.check_dims(mask.width(), mask.height(), 3, "x")?;
    y.check_dims(mask.width(), mask.height(), 3, "y")?;
    if x.space() != y.space() {
        return Err(Error::invalid(format!(
            "color spaces differ: {:?} vs {:?}",
            x.space(),
            y.space()
        )));
    }
    Ok(())
}

/// Mean absolute (L1) or root-mean-square (L2) difference over the mask
/// and all channels, on the 0–255 display scale.
pub fn pixel_error(x: &ImagePlane, y: &ImagePlane, mask: &Mask, norm: Norm) -> Result<f64> {
    check_pair(x, y, mask)?;
    let n = mask.require_foreground(1)?;
    let (dx, dy) = (display_values(x)?, display_values(y)?);
    let mut acc = 0.0;
    for i in mask.indices() {
        for c in 0..3 {
            let d = 255.0 * dx[3 * i + c] - 255.0 * dy[3 * i + c];
            acc += match norm {
                Norm::L1 => d.abs(),
                Norm::L2 => d * d,
            };
        }
    }
    let mean = acc / (3 * n) as f64;
    Ok(match norm {
        Norm::L1 => mean,
        Norm::L2 => mean.sqrt(),
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Single-scale SSIM on luma of the display values, averaged over all
/// 11×11 windows lying fully inside the mask.
pub fn ssim(x: &ImagePlane, y: &ImagePlane, mask: &Mask) -> Result<f64> {
    check_pair(x, y, mask)?;
    let (w, h) = (mask.width(), mask.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let (dx, dy) = (display_values(x)?, display_values(y)?);
    let lx: Vec<f64> = dx.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect();
    let ly: Vec<f64> = dy.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).collect();
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    // windows whose every pixel is foreground, via a summed-area table
    let mut sat = vec![0usize; (w + 1) * (h + 1)];
    for yy in 0..h {
        for xx in 0..w {
            sat[(yy + 1) * (w + 1) + xx + 1] = mask.at(xx, yy) as usize
                + sat[yy * (w + 1) + xx + 1]
                + sat[(yy + 1) * (w + 1) + xx]
                - sat[yy * (w + 1) + xx];
        }
    }
    let s = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - s {
        for x0 in 0..=w - s {
            let inside = sat[(y0 + s) * (w + 1) + x0 + s] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x0 + s]
                - sat[(y0 + s) * (w + 1) + x0];
            if inside != s * s {
                continue;
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..s {
                for wx in 0..s {
                    let k = win[wy * s + wx];
                    let i = (y0 + wy) * w + x0 + wx;
                    mx += k * lx[i];
                    my += k * ly[i];
                    sxx += k * lx[i] * lx[i];
                    syy += k * ly[i] * ly[i];
                    sxy += k * lx[i] * ly[i];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::insufficient("no SSIM window fits inside the mask"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn compute(x: &ImagePlane, y: &ImagePlane, mask: &Mask) -> Result<Self> {
        Ok(Self {
            l1: pixel_error(x, y, mask, Norm::L1)?,
            l2: pixel_error(x, y, mask, Norm::L2)?,
            ssim: ssim(x, y, mask)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub recon: ImageMetrics,
    pub relit: ImageMetrics,
}

/// Recon compares `render(Â₁, N̂₁, L̂₁)` with `I₁`; relit compares
/// `render(Â₁, N̂₁, L̂₂)` with `I₂`.
pub fn evaluate_pair(est: &PairEstimate, i1: &ImagePlane, i2: &ImagePlane, mask: &Mask) -> Result<PairMetrics> {
    let m1 = &est.members[0];
    let recon = render(&m1.albedo, &m1.normals, &m1.light, mask)?;
    let relit = render(&m1.albedo, &m1.normals, &est.members[1].light, mask)?;
    Ok(PairMetrics {
        recon: ImageMetrics::compute(&recon, i1, mask)?,
        relit: ImageMetrics::compute(&relit, i2, mask)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelightReport {
    pub version: String,
    pub model: String,
    pub pairs: usize,
    pub recon: ImageMetrics,
    pub relit: ImageMetrics,
    /// Present when ground-truth normals were available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<NormalErrorReport>,
}

impl RelightReport {
    /// Averages per-pair metrics.
    pub fn from_pairs(model: impl Into<String>, pairs: &[PairMetrics], normals: Option<NormalErrorReport>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::insufficient("no pairs evaluated"));
        }
        let n = pairs.len() as f64;
        let mut recon = ImageMetrics::default();
        let mut relit = ImageMetrics::default();
        for p in pairs {
            recon.l1 += p.recon.l1 / n;
            recon.l2 += p.recon.l2 / n;
            recon.ssim += p.recon.ssim / n;
            relit.l1 += p.relit.l1 / n;
            relit.l2 += p.relit.l2 / n;
            relit.ssim += p.relit.ssim / n;
        }
        Ok(Self {
            version: REPORT_VERSION.into(),
            model: model.into(),
            pairs: pairs.len(),
            recon,
            relit,
            normals,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `model,metric,value` rows, one per metric.
    pub fn to_csv(&self) -> String {
        let mut rows = vec![
            ("l1_recon", self.recon.l1),
            ("l2_recon", self.recon.l2),
            ("ssim_recon", self.recon.ssim),
            ("l1_relit", self.relit.l1),
            ("l2_relit", self.relit.l2),
            ("ssim_relit", self.relit.ssim),
        ];
        if let Some(n) = &self.normals {
            rows.extend([
                ("normal_mean_deg", n.mean),
                ("normal_std_deg", n.std),
                ("normal_median_deg", n.median),
                ("normal_pct_below_20", n.pct_below_20),
                ("normal_pct_below_25", n.pct_below_25),
                ("normal_pct_below_30", n.pct_below_30),
            ]);
        }
        let mut out = String::from("model,metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{},{k},{v}\n", self.model));
        }
        out
    }
}
