//! Finite-difference checks of the network backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relit_core::losses::{ComponentGradients, Components};
use relit_core::nn::{Mode, Model, ModelConfig};
use relit_core::{ColorSpace, ImagePlane, Mask};

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImagePlane {
    ImagePlane::from_fn_rgb(w, h, ColorSpace::LinearRgb, |_, _| {
        [rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9), rng.gen_range(0.05..0.9)]
    })
    .unwrap()
}

fn random_grads(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ComponentGradients {
    let mut g = ComponentGradients::zeros(w, h);
    g.d_albedo.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    g.d_normals.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    for row in g.d_light.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    g
}

fn linear_functional(out: &[Components], gs: &[ComponentGradients]) -> f64 {
    let mut s = 0.0;
    for (o, g) in out.iter().zip(gs) {
        s += o.albedo.data().iter().zip(g.d_albedo.data()).map(|(a, b)| a * b).sum::<f64>();
        s += o.normals.plane().data().iter().zip(g.d_normals.data()).map(|(a, b)| a * b).sum::<f64>();
        for (lr, gr) in o.light.coeffs.iter().zip(&g.d_light) {
            s += lr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    s
}

#[test]
fn backward_matches_finite_differences_on_micro_model() {
    let (w, h) = (8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::new(ModelConfig::micro(), 7).unwrap();
    let imgs: Vec<ImagePlane> = (0..4).map(|_| random_image(&mut rng, w, h)).collect();
    let mask = Mask::full(w, h);
    let refs: Vec<&ImagePlane> = imgs.iter().collect();
    let masks = vec![&mask; 4];
    let gs: Vec<ComponentGradients> = (0..4).map(|_| random_grads(&mut rng, w, h)).collect();

    let (_, tape) = model.forward(&refs, &masks, Mode::Train).unwrap();
    let analytic = model.backward(&tape.unwrap(), &gs).unwrap();

    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..model.num_params() {
        let orig = model.params().data()[i];
        model.params_mut()[i] = orig + step;
        let (o, _) = model.forward(&refs, &masks, Mode::Train).unwrap();
        let fp = linear_functional(&o, &gs);
        model.params_mut()[i] = orig - step;
        let (o, _) = model.forward(&refs, &masks, Mode::Train).unwrap();
        let fm = linear_functional(&o, &gs);
        model.params_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let tol = 1e-3 * a.abs().max(numeric.abs()) + 1e-7;
        worst = worst.max((a - numeric).abs() / (a.abs().max(numeric.abs()) + 1e-12));
        assert!(
            (a - numeric).abs() <= tol,
            "param {i}: analytic {a} numeric {numeric}"
        );
    }
    eprintln!("params {} worst rel {worst:e}", model.num_params());
}
