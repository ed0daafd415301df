//! Procedural Lambertian scenes with exact albedo, normals and lighting.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::srgb_decode;
use crate::error::{Error, Result};
use crate::image::{normalize_guarded, ColorSpace, ImagePlane, Mask, NormalMap};
use crate::io::{dequantize16, quantize16, quantize_normals};
use crate::render::{render, shading};
use crate::sh::{ShLighting, C4};

pub const MIN_SIZE: usize = 8;
pub const ALBEDO_RANGE: (f64, f64) = (0.05, 0.95);

/// Default number of lightings per scene.
pub const DEFAULT_K: usize = 5;

/// Rendered images are kept at or below this value so they survive storage.
const EXPOSURE_CEILING: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    /// Radius as a fraction of half the image size.
    Sphere { radius: f64 },
    /// Semi-axes as fractions of half the image size; `rz` scales depth.
    Ellipsoid { rx: f64, ry: f64, rz: f64 },
    /// Full-frame height field `z = amplitude · fbm(frequency · (u, v))`.
    Heightfield {
        octaves: u32,
        amplitude: f64,
        frequency: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlbedoPattern {
    Flat { rgb: [f64; 3] },
    /// Two regions split by a line through the center at a seeded angle.
    TwoTone { a: [f64; 3], b: [f64; 3] },
    /// Linear blend along a seeded direction.
    SmoothGradient { from: [f64; 3], to: [f64; 3] },
    /// `scale` cells per image side.
    Checker { scale: u32, a: [f64; 3], b: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub geometry: Geometry,
    pub albedo: AlbedoPattern,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub albedo: ImagePlane,
    pub normals: NormalMap,
    pub mask: Mask,
}

/// One scene under `K ≥ 2` lightings; all images share albedo and normals.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLitSample {
    pub albedo: ImagePlane,
    pub normals: NormalMap,
    pub mask: Mask,
    pub lightings: Vec<ShLighting>,
    pub images: Vec<ImagePlane>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Every unordered pair.
    All,
    /// `(0, k)` for every other index: image 0 is always a member.
    Anchored,
}

pub fn enumerate_pairs(k: usize, mode: PairMode) -> Result<Vec<(usize, usize)>> {
    if k < 2 {
        return Err(Error::invalid(format!("pairs need at least 2 images, got {k}")));
    }
    Ok(match mode {
        PairMode::All => (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .collect(),
        PairMode::Anchored => (1..k).map(|j| (0, j)).collect(),
    })
}

impl MultiLitSample {
    pub fn k(&self) -> usize {
        self.images.len()
    }

    pub fn pairs(&self, mode: PairMode) -> Result<Vec<(usize, usize)>> {
        enumerate_pairs(self.k(), mode)
    }

    /// Renders every lighting from the shared components.
    pub fn from_components(
        albedo: ImagePlane,
        normals: NormalMap,
        mask: Mask,
        lightings: Vec<ShLighting>,
    ) -> Result<Self> {
        if lightings.len() < 2 {
            return Err(Error::invalid("a multi-lit sample needs K >= 2 lightings"));
        }
        let images = lightings
            .iter()
            .map(|l| render(&albedo, &normals, l, &mask))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            albedo,
            normals,
            mask,
            lightings,
            images,
        })
    }
}

fn check_color(c: &[f64; 3]) -> Result<()> {
    if c.iter().any(|v| !(ALBEDO_RANGE.0..=ALBEDO_RANGE.1).contains(v)) {
        return Err(Error::invalid(format!(
            "albedo {c:?} outside [{}, {}]",
            ALBEDO_RANGE.0, ALBEDO_RANGE.1
        )));
    }
    Ok(())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::invalid(format!(
                "scene size {} below minimum {MIN_SIZE}",
                self.size
            )));
        }
        match &self.geometry {
            Geometry::Sphere { radius } => {
                if !(*radius > 0.0 && *radius <= 1.0) {
                    return Err(Error::invalid(format!("sphere radius {radius} not in (0, 1]")));
                }
            }
            Geometry::Ellipsoid { rx, ry, rz } => {
                for r in [rx, ry, rz] {
                    if !(*r > 0.0 && *r <= 1.0) {
                        return Err(Error::invalid(format!("ellipsoid axis {r} not in (0, 1]")));
                    }
                }
            }
            Geometry::Heightfield {
                octaves,
                amplitude,
                frequency,
            } => {
                if *octaves == 0 || !amplitude.is_finite() || *amplitude < 0.0 || !(*frequency > 0.0) {
                    return Err(Error::invalid("heightfield needs octaves >= 1, amplitude >= 0, frequency > 0"));
                }
            }
        }
        match &self.albedo {
            AlbedoPattern::Flat { rgb } => check_color(rgb)?,
            AlbedoPattern::TwoTone { a, b } | AlbedoPattern::SmoothGradient { from: a, to: b } => {
                check_color(a)?;
                check_color(b)?;
            }
            AlbedoPattern::Checker { scale, a, b } => {
                if *scale == 0 {
                    return Err(Error::invalid("checker scale must be positive"));
                }
                check_color(a)?;
                check_color(b)?;
            }
        }
        Ok(())
    }
}

/// Normalized image-plane coordinates of a pixel center: `u` right, `v` up,
/// both in `[-1, 1]`.
fn plane_coords(x: usize, y: usize, size: usize) -> (f64, f64) {
    let half = size as f64 / 2.0;
    ((x as f64 + 0.5 - half) / half, (half - (y as f64 + 0.5)) / half)
}

pub fn make_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut mask_bits = vec![false; size * size];
    let mut normals = vec![0.0; size * size * 3];
    match &spec.geometry {
        Geometry::Sphere { radius } => {
            let r2 = radius * radius;
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = plane_coords(x, y, size);
                    let d2 = u * u + v * v;
                    if d2 < r2 {
                        let i = y * size + x;
                        mask_bits[i] = true;
                        let n = normalize_guarded([u / radius, v / radius, (1.0 - d2 / r2).sqrt()]);
                        normals[3 * i..3 * i + 3].copy_from_slice(&n);
                    }
                }
            }
        }
        Geometry::Ellipsoid { rx, ry, rz } => {
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = plane_coords(x, y, size);
                    let q = (u / rx).powi(2) + (v / ry).powi(2);
                    if q < 1.0 {
                        let i = y * size + x;
                        mask_bits[i] = true;
                        let z = rz * (1.0 - q).sqrt();
                        // gradient of the implicit surface
                        let n = normalize_guarded([u / (rx * rx), v / (ry * ry), z / (rz * rz)]);
                        normals[3 * i..3 * i + 3].copy_from_slice(&n);
                    }
                }
            }
        }
        Geometry::Heightfield {
            octaves,
            amplitude,
            frequency,
        } => {
            let noise = Perlin::new(&mut rng);
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = plane_coords(x, y, size);
                    let (_, [gx, gy]) = noise.fbm([u * frequency, v * frequency], *octaves);
                    let i = y * size + x;
                    mask_bits[i] = true;
                    let n = normalize_guarded([
                        -amplitude * frequency * gx,
                        -amplitude * frequency * gy,
                        1.0,
                    ]);
                    normals[3 * i..3 * i + 3].copy_from_slice(&n);
                }
            }
        }
    }
    let mask = Mask::new(size, size, mask_bits)?;
    if mask.count() == 0 {
        return Err(Error::invalid("scene covers no pixels"));
    }
    // Off-surface pixels carry a valid placeholder normal.
    for i in 0..size * size {
        if !mask.get(i) {
            normals[3 * i + 2] = 1.0;
        }
    }
    let normals = NormalMap::new(ImagePlane::new(size, size, 3, ColorSpace::NormalXyz, normals)?)?;

    let albedo = paint_albedo(&spec.albedo, size, &mut rng)?.masked(&mask);
    Ok(Scene {
        albedo,
        normals,
        mask,
    })
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn paint_albedo(pattern: &AlbedoPattern, size: usize, rng: &mut ChaCha8Rng) -> Result<ImagePlane> {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    ImagePlane::from_fn_rgb(size, size, ColorSpace::LinearRgb, |x, y| {
        let (u, v) = plane_coords(x, y, size);
        match pattern {
            AlbedoPattern::Flat { rgb } => *rgb,
            AlbedoPattern::TwoTone { a, b } => {
                if u * dx + v * dy >= 0.0 {
                    *a
                } else {
                    *b
                }
            }
            AlbedoPattern::SmoothGradient { from, to } => {
                let t = ((u * dx + v * dy) / std::f64::consts::SQRT_2 + 1.0) / 2.0;
                lerp3(from, to, t.clamp(0.0, 1.0))
            }
            AlbedoPattern::Checker { scale, a, b } => {
                let cell = size as f64 / *scale as f64;
                let cx = (x as f64 / cell).floor() as i64;
                let cy = (y as f64 / cell).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    })
}

/// 2D gradient noise with analytic derivatives.
pub(crate) struct Perlin {
    perm: [u8; 512],
    grads: [[f64; 2]; 256],
}

impl Perlin {
    pub(crate) fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut p: Vec<u8> = (0..=255).collect();
        p.shuffle(rng);
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        let mut grads = [[0.0; 2]; 256];
        for (i, g) in grads.iter_mut().enumerate() {
            let a = i as f64 * std::f64::consts::TAU / 256.0;
            *g = [a.cos(), a.sin()];
        }
        Self { perm, grads }
    }

    fn grad(&self, ix: i64, iy: i64) -> [f64; 2] {
        let x = (ix & 255) as usize;
        let y = (iy & 255) as usize;
        self.grads[self.perm[self.perm[x] as usize + y] as usize]
    }

    /// Value and gradient of single-octave noise at `p`.
    pub(crate) fn noise(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let ix = p[0].floor();
        let iy = p[1].floor();
        let (fx, fy) = (p[0] - ix, p[1] - iy);
        let (ix, iy) = (ix as i64, iy as i64);
        let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let dfade = |t: f64| 30.0 * t * t * (t - 1.0) * (t - 1.0);
        let (ux, uy) = (fade(fx), fade(fy));
        let (dux, duy) = (dfade(fx), dfade(fy));

        let ga = self.grad(ix, iy);
        let gb = self.grad(ix + 1, iy);
        let gc = self.grad(ix, iy + 1);
        let gd = self.grad(ix + 1, iy + 1);
        let va = ga[0] * fx + ga[1] * fy;
        let vb = gb[0] * (fx - 1.0) + gb[1] * fy;
        let vc = gc[0] * fx + gc[1] * (fy - 1.0);
        let vd = gd[0] * (fx - 1.0) + gd[1] * (fy - 1.0);

        let k = va - vb - vc + vd;
        let value = va + ux * (vb - va) + uy * (vc - va) + ux * uy * k;
        let mut d = [0.0; 2];
        for j in 0..2 {
            d[j] = ga[j] + ux * (gb[j] - ga[j]) + uy * (gc[j] - ga[j])
                + ux * uy * (ga[j] - gb[j] - gc[j] + gd[j]);
        }
        d[0] += dux * (vb - va + uy * k);
        d[1] += duy * (vc - va + ux * k);
        (value, d)
    }

    /// Fractal sum with octave weights `0.5^o` and frequencies `2^o`.
    pub(crate) fn fbm(&self, p: [f64; 2], octaves: u32) -> (f64, [f64; 2]) {
        let mut value = 0.0;
        let mut d = [0.0; 2];
        let mut amp = 1.0;
        let mut freq = 1.0;
        for o in 0..octaves {
            // decorrelate octaves by a fixed offset
            let off = o as f64 * 17.31;
            let (v, g) = self.noise([p[0] * freq + off, p[1] * freq + off]);
            value += amp * v;
            d[0] += amp * freq * g[0];
            d[1] += amp * freq * g[1];
            amp *= 0.5;
            freq *= 2.0;
        }
        (value, d)
    }
}

/// Lighting distribution for synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightingSampler {
    /// Range of the DC coefficient.
    pub intensity: (f64, f64),
    /// Maximum angle between the dominant direction and the view axis.
    pub max_tilt_deg: f64,
    /// Degree-1 magnitude relative to DC.
    pub direction_weight: (f64, f64),
    /// Degree-2 coefficients are uniform in `±quadratic_weight · DC`.
    pub quadratic_weight: f64,
    /// Relative per-channel jitter of the DC term.
    pub channel_jitter: f64,
    /// Minimum fraction of visible unit-sphere normals with nonnegative shading.
    pub min_nonnegative: f64,
}

impl Default for LightingSampler {
    fn default() -> Self {
        Self {
            intensity: (0.6 / C4, 1.1 / C4),
            max_tilt_deg: 60.0,
            direction_weight: (0.2, 0.7),
            quadratic_weight: 0.1,
            channel_jitter: 0.1,
            min_nonnegative: 0.95,
        }
    }
}

const MAX_LIGHT_ATTEMPTS: usize = 1000;

fn probe_sphere() -> &'static (NormalMap, Mask) {
    use std::sync::OnceLock;
    static PROBE: OnceLock<(NormalMap, Mask)> = OnceLock::new();
    PROBE.get_or_init(|| {
        let s = make_scene(&SceneSpec {
            geometry: Geometry::Sphere { radius: 1.0 },
            albedo: AlbedoPattern::Flat { rgb: [0.5; 3] },
            size: 32,
            seed: 0,
        })
        .expect("probe sphere spec is valid");
        (s.normals, s.mask)
    })
}

impl LightingSampler {
    fn draw(&self, rng: &mut ChaCha8Rng) -> ShLighting {
        let (lo, hi) = self.intensity;
        let base = rng.gen_range(lo..=hi);
        let mut dc = [0.0; 3];
        for v in dc.iter_mut() {
            let j = rng.gen_range(-self.channel_jitter..=self.channel_jitter);
            *v = (base * (1.0 + j)).clamp(lo, hi);
        }
        let cos_max = self.max_tilt_deg.to_radians().cos();
        let cos_t = rng.gen_range(cos_max..=1.0);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
        let w = rng.gen_range(self.direction_weight.0..=self.direction_weight.1);

        let mut shape = [0.0; 9];
        shape[1] = w * dir[1];
        shape[2] = w * dir[2];
        shape[3] = w * dir[0];
        for s in shape.iter_mut().skip(4) {
            *s = rng.gen_range(-self.quadratic_weight..=self.quadratic_weight);
        }
        let mut l = ShLighting::zero();
        l.coeffs[0] = dc;
        for k in 1..9 {
            for c in 0..3 {
                l.coeffs[k][c] = dc[c] * shape[k];
            }
        }
        l
    }

    fn plausible(&self, l: &ShLighting) -> bool {
        let (normals, mask) = probe_sphere();
        let s = shading(normals, l, mask).expect("probe geometry is valid");
        let ok = mask
            .indices()
            .filter(|&i| s.pixel(i).iter().all(|&v| v >= 0.0))
            .count();
        ok as f64 >= self.min_nonnegative * mask.count() as f64
    }
}

/// Draws a lighting, resampling until the unit-sphere shading check passes.
pub fn sample_lighting(rng: &mut ChaCha8Rng, sampler: &LightingSampler) -> ShLighting {
    let mut l = sampler.draw(rng);
    for _ in 1..MAX_LIGHT_ATTEMPTS {
        if sampler.plausible(&l) {
            break;
        }
        l = sampler.draw(rng);
    }
    l
}

/// Albedo and normals as they come back from 16-bit storage. Samples are
/// built on these so stored files re-render exactly.
pub fn quantize_components(albedo: &ImagePlane, normals: &NormalMap) -> Result<(ImagePlane, NormalMap)> {
    let albedo = albedo.map(ColorSpace::LinearRgb, |v| {
        srgb_decode(dequantize16(quantize16(crate::color::srgb_encode(v.clamp(0.0, 1.0)))))
    })?;
    Ok((albedo, quantize_normals(normals)?))
}

/// Builds a stored-precision multi-lit sample: quantized components and
/// `k` lightings. Each lighting is resampled while the render goes negative
/// on the mask and scaled down when it exceeds the exposure ceiling.
pub fn generate_sample(
    spec: &SceneSpec,
    k: usize,
    sampler: &LightingSampler,
    rng: &mut ChaCha8Rng,
) -> Result<MultiLitSample> {
    if k < 2 {
        return Err(Error::invalid("K must be at least 2"));
    }
    let scene = make_scene(spec)?;
    let (albedo, normals) = quantize_components(&scene.albedo, &scene.normals)?;
    let albedo = albedo.masked(&scene.mask);
    let mut lightings = Vec::with_capacity(k);
    for _ in 0..k {
        let mut chosen = None;
        for _ in 0..MAX_LIGHT_ATTEMPTS {
            let l = sample_lighting(rng, sampler);
            let img = render(&albedo, &normals, &l, &scene.mask)?;
            let fg = || scene.mask.indices().flat_map(|i| img.pixel(i).to_vec());
            if fg().any(|v| v < 0.0) {
                continue;
            }
            let max = fg().fold(0.0, f64::max);
            chosen = Some(if max > EXPOSURE_CEILING {
                l.scaled(EXPOSURE_CEILING / max)
            } else {
                l
            });
            break;
        }
        lightings.push(chosen.ok_or_else(|| {
            Error::invalid("could not sample a lighting with a nonnegative render")
        })?);
    }
    MultiLitSample::from_components(albedo, normals, scene.mask, lightings)
}

/// Distribution of scene specs used for dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDistribution {
    pub sphere_weight: f64,
    pub ellipsoid_weight: f64,
    pub heightfield_weight: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            sphere_weight: 0.35,
            ellipsoid_weight: 0.35,
            heightfield_weight: 0.3,
        }
    }
}

impl SceneDistribution {
    pub fn sample(&self, size: usize, rng: &mut ChaCha8Rng) -> SceneSpec {
        let total = self.sphere_weight + self.ellipsoid_weight + self.heightfield_weight;
        let pick = rng.gen_range(0.0..total);
        let geometry = if pick < self.sphere_weight {
            Geometry::Sphere {
                radius: rng.gen_range(0.6..0.95),
            }
        } else if pick < self.sphere_weight + self.ellipsoid_weight {
            Geometry::Ellipsoid {
                rx: rng.gen_range(0.5..0.95),
                ry: rng.gen_range(0.5..0.95),
                rz: rng.gen_range(0.4..1.0),
            }
        } else {
            Geometry::Heightfield {
                octaves: rng.gen_range(1..=3),
                amplitude: rng.gen_range(0.1..0.35),
                frequency: rng.gen_range(1.5..3.0),
            }
        };
        fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
            [
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.15..0.9),
                rng.gen_range(0.15..0.9),
            ]
        }
        let albedo = match rng.gen_range(0..4) {
            0 => AlbedoPattern::Flat { rgb: color(rng) },
            1 => AlbedoPattern::TwoTone {
                a: color(rng),
                b: color(rng),
            },
            2 => AlbedoPattern::SmoothGradient {
                from: color(rng),
                to: color(rng),
            },
            _ => {
                let scale = rng.gen_range(2..=6);
                AlbedoPattern::Checker {
                    scale,
                    a: color(rng),
                    b: color(rng),
                }
            }
        };
        SceneSpec {
            geometry,
            albedo,
            size,
            seed: rng.gen(),
        }
    }
}
