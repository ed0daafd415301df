//! `render_backward` against central differences of `⟨G, render(A, u/‖u‖, L)⟩`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relit_core::render::{render, render_backward};
use relit_core::{ColorSpace, ImagePlane, Mask, NormalMap, ShLighting};

const STEP: f64 = 1e-4;
const REL: f64 = 1e-4;

struct Inputs {
    albedo: ImagePlane,
    raw: ImagePlane,
    light: Vec<f64>,
    mask: Mask,
    upstream: ImagePlane,
}

fn inputs(seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8, 8);
    let mut rgb = |lo: f64, hi: f64, space| {
        ImagePlane::from_fn_rgb(w, h, space, |_, _| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]).unwrap()
    };
    let albedo = rgb(0.05, 0.95, ColorSpace::LinearRgb);
    let upstream = rgb(-1.0, 1.0, ColorSpace::Scalar);
    let raw = ImagePlane::from_fn_rgb(w, h, ColorSpace::Scalar, |_, _| {
        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.2..1.5)]
    })
    .unwrap();
    let light = (0..27).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let mask = Mask::from_fn(w, h, |_, _| rng.gen_bool(0.75));
    Inputs {
        albedo,
        raw,
        light,
        mask,
        upstream,
    }
}

fn objective(x: &Inputs) -> f64 {
    let n = NormalMap::from_raw(&x.raw).unwrap();
    let l = ShLighting::from_flat(&x.light).unwrap();
    let img = render(&x.albedo, &n, &l, &x.mask).unwrap();
    img.data().iter().zip(x.upstream.data()).map(|(a, b)| a * b).sum()
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL * analytic.abs().max(numeric.abs()) + 1e-9
}

fn central(x: &mut Inputs, get: impl Fn(&mut Inputs) -> &mut f64) -> f64 {
    let orig = *get(x);
    *get(x) = orig + STEP;
    let fp = objective(x);
    *get(x) = orig - STEP;
    let fm = objective(x);
    *get(x) = orig;
    (fp - fm) / (2.0 * STEP)
}

#[test]
fn all_gradient_blocks_match_finite_differences() {
    for seed in 0..20 {
        let mut x = inputs(seed);
        let l = ShLighting::from_flat(&x.light).unwrap();
        let g = render_backward(&x.upstream, &x.albedo, &x.raw, &l, &x.mask).unwrap();
        let n = x.albedo.data().len();
        for i in 0..n {
            let fd = central(&mut x, |x| &mut x.albedo.data_mut()[i]);
            assert!(close(g.d_albedo.data()[i], fd), "seed {seed} albedo {i}: {} vs {fd}", g.d_albedo.data()[i]);
            let fd = central(&mut x, |x| &mut x.raw.data_mut()[i]);
            assert!(close(g.d_normals_raw.data()[i], fd), "seed {seed} normal {i}: {} vs {fd}", g.d_normals_raw.data()[i]);
        }
        for k in 0..27 {
            let fd = central(&mut x, |x| &mut x.light[k]);
            let an = g.d_lighting[k / 3][k % 3];
            assert!(close(an, fd), "seed {seed} light {k}: {an} vs {fd}");
        }
    }
}
