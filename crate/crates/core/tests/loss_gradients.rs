//! Each loss term on its own, differentiated through the albedo sigmoid and
//! the normal normalization, against finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use relit_core::losses::{total_loss, total_loss_with_grad, LossWeights};

mod common;
use common::{small_scene, supervision, FdStats, PairVars};

const SEEDS: u64 = 20;

fn only(term: &str) -> LossWeights {
    let mut w = LossWeights {
        lambda_albedo: 0.0,
        lambda_normal: 0.0,
        lambda_light: 0.0,
        lambda_rec: 0.0,
        lambda_relit: 0.0,
    };
    match term {
        "albedo" => w.lambda_albedo = 1.0,
        "normal" => w.lambda_normal = 1.0,
        "light" => w.lambda_light = 1.0,
        "rec" => w.lambda_rec = 1.0,
        "relit" => w.lambda_relit = 1.0,
        _ => unreachable!(),
    }
    w
}

fn check_term(term: &str) {
    let mut stats = FdStats::new(1e-6, 1e-3, 1e-7);
    for seed in 0..SEEDS {
        let s = small_scene(500 + seed);
        let (w, h) = (s.mask.width(), s.mask.height());
        let weights = only(term);
        let sup = supervision(&s);
        let images = [&s.images[0], &s.images[1]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vars = PairVars::random(&mut rng, &s);
        let est = vars.estimate(w, h);
        let (f0, g) = total_loss_with_grad(&est, images, &s.mask, Some(&sup), &weights).unwrap();
        let analytic = vars.gradient(&est, &g);
        for i in 0..vars.len() {
            let orig = *vars.get_mut(i);
            *vars.get_mut(i) = orig + stats.step;
            let fp = total_loss(&vars.estimate(w, h), images, &s.mask, Some(&sup), &weights).unwrap().total;
            *vars.get_mut(i) = orig - stats.step;
            let fm = total_loss(&vars.estimate(w, h), images, &s.mask, Some(&sup), &weights).unwrap().total;
            *vars.get_mut(i) = orig;
            stats.check(&format!("{term} seed {seed} var {i}"), analytic[i], f0.total, fp, fm);
        }
    }
    assert!(stats.failures.is_empty(), "{term}: {:?}", &stats.failures[..stats.failures.len().min(5)]);
    assert!(stats.kink_fraction() <= 0.01, "{term}: {} kinks of {}", stats.kinks, stats.checked);
}

#[test]
fn reconstruction_term() {
    check_term("rec");
}

#[test]
fn cross_relighting_term() {
    check_term("relit");
}

#[test]
fn albedo_supervision_term() {
    check_term("albedo");
}

#[test]
fn normal_supervision_term() {
    check_term("normal");
}

#[test]
fn light_supervision_term() {
    check_term("light");
}
