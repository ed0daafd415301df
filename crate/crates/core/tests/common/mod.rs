//! Finite-difference helpers shared by the gradient test targets.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relit_core::dataset::{synthesize_scene, DatasetConfig};
use relit_core::image::normalize_backward;
use relit_core::losses::{ComponentGradients, Components, PairEstimate, Supervision};
use relit_core::synth::MultiLitSample;
use relit_core::{ColorSpace, ImagePlane, NormalMap, ShLighting};

/// Central differences with a one-sided fallback at L1 and ReLU kinks.
pub struct FdStats {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
    pub checked: usize,
    pub kinks: usize,
    pub failures: Vec<String>,
    /// Largest |analytic - central| / tolerance among passing checks.
    pub worst_ratio: f64,
}

impl FdStats {
    pub fn new(step: f64, rel: f64, abs: f64) -> Self {
        Self {
            step,
            rel,
            abs,
            checked: 0,
            kinks: 0,
            failures: Vec::new(),
            worst_ratio: 0.0,
        }
    }

    pub fn check(&mut self, what: &str, analytic: f64, f0: f64, fp: f64, fm: f64) {
        self.checked += 1;
        let central = (fp - fm) / (2.0 * self.step);
        let (rel, abs) = (self.rel, self.abs);
        let tol = |n: f64| rel * analytic.abs().max(n.abs()) + abs;
        if (analytic - central).abs() <= tol(central) {
            self.worst_ratio = self.worst_ratio.max((analytic - central).abs() / tol(central));
            return;
        }
        let fwd = (fp - f0) / self.step;
        let bwd = (f0 - fm) / self.step;
        let (lo, hi) = (fwd.min(bwd), fwd.max(bwd));
        let spread = tol(lo.abs().max(hi.abs()));
        if hi - lo > spread && analytic >= lo - spread && analytic <= hi + spread {
            self.kinks += 1;
            return;
        }
        if self.failures.len() < 5 {
            self.failures.push(format!("{what}: analytic {analytic:e} central {central:e} fwd {fwd:e} bwd {bwd:e}"));
        } else {
            self.failures.push(String::new());
        }
    }

    pub fn kink_fraction(&self) -> f64 {
        self.kinks as f64 / self.checked.max(1) as f64
    }
}

/// Single 8×8 scene under two lightings.
pub fn small_scene(seed: u64) -> MultiLitSample {
    let cfg = DatasetConfig {
        scenes: 1,
        k: 2,
        size: 8,
        seed,
        ..Default::default()
    };
    synthesize_scene(&cfg, 0).unwrap().1
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Free variables of a pair: albedo logits, raw normals and lightings.
#[derive(Clone)]
pub struct PairVars {
    pub logits: [Vec<f64>; 2],
    pub raw: [Vec<f64>; 2],
    pub light: [[f64; 27]; 2],
}

impl PairVars {
    pub fn random(rng: &mut ChaCha8Rng, s: &MultiLitSample) -> Self {
        let n = s.mask.width() * s.mask.height() * 3;
        let logits = [0, 1].map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let raw = [0, 1].map(|_| {
            (0..n / 3)
                .flat_map(|_| [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7), rng.gen_range(0.3..1.2)])
                .collect()
        });
        let light = [0, 1].map(|k| {
            let mut l = s.lightings[k].to_flat();
            l.iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
            l
        });
        Self { logits, raw, light }
    }

    pub fn len(&self) -> usize {
        2 * (self.logits[0].len() + self.raw[0].len() + 27)
    }

    pub fn get_mut(&mut self, mut i: usize) -> &mut f64 {
        for k in 0..2 {
            let n = self.logits[k].len();
            if i < n {
                return &mut self.logits[k][i];
            }
            i -= n;
            if i < n {
                return &mut self.raw[k][i];
            }
            i -= n;
            if i < 27 {
                return &mut self.light[k][i];
            }
            i -= 27;
        }
        unreachable!()
    }

    pub fn estimate(&self, w: usize, h: usize) -> PairEstimate {
        let member = |k: usize| Components {
            albedo: ImagePlane::new(w, h, 3, ColorSpace::LinearRgb, self.logits[k].iter().map(|&z| sigmoid(z)).collect()).unwrap(),
            normals: NormalMap::from_raw(&ImagePlane::new(w, h, 3, ColorSpace::NormalXyz, self.raw[k].clone()).unwrap()).unwrap(),
            light: ShLighting::from_flat(&self.light[k]).unwrap(),
        };
        PairEstimate::new(member(0), member(1))
    }

    /// Chains the component gradients through the sigmoid and the normalization.
    pub fn gradient(&self, est: &PairEstimate, g: &[ComponentGradients; 2]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..2 {
            let a = est.members[k].albedo.data();
            out.extend(g[k].d_albedo.data().iter().zip(a).map(|(d, s)| d * s * (1.0 - s)));
            for (u, dn) in self.raw[k].chunks_exact(3).zip(g[k].d_normals.data().chunks_exact(3)) {
                out.extend(normalize_backward([u[0], u[1], u[2]], [dn[0], dn[1], dn[2]]));
            }
            out.extend(g[k].d_light.iter().flatten());
        }
        out
    }
}

pub fn supervision(s: &MultiLitSample) -> Supervision<'_> {
    Supervision {
        albedo: &s.albedo,
        normals: &s.normals,
        lights: [&s.lightings[0], &s.lightings[1]],
    }
}
