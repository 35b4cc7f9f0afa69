mod common;

use aptbench::losses::*;
use aptbench::models::{ClassLabel, LatentZ, StyleCode};
use aptbench::tensor::Tensor;
use common::{micro, objective_and_grad, random_image};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn objective_gradient_matches_central_differences() {
    let m = micro(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = ClassLabel(1);
    let w_p = m.gen.map_latent(&LatentZ::sample(m.gen.arch.z_dim, &mut rng), c).unwrap();
    let n = m.gen.random_noise(&mut rng);
    let x = random_image(&[1, 4, 4], &mut rng);
    let obj = AptObjective {
        fx: &m.fx,
        gen: &m.gen,
        classifier: &m.clf,
        discriminators: &m.disc,
        weights: LossWeights::default(),
        mask: TermMask::ALL,
    };
    let w_r = locality_sample(&w_p, &LatentZ::sample(m.gen.arch.z_dim, &mut rng), c, 0.5, &m.gen).unwrap();
    let loc = obj.locality_inputs(w_r, &n).unwrap();
    let mut theta = m.gen.synthesis.params.clone();
    for (_, t) in theta.iter_mut() {
        for v in t.data_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
    }
    let (_, grads) = objective_and_grad(&obj, &theta, &x, &w_p, &n, &loc, ClassLabel(2), true);
    let grads = grads.unwrap();
    let names: Vec<String> = theta.names().map(str::to_string).collect();
    assert_eq!(grads.len(), names.len());
    let fd_at = |theta: &mut aptbench::nn::ParamSet, name: &str, i: usize, h: f64| {
        let orig = theta.get(name).unwrap().data()[i];
        theta.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let (fp, _) = objective_and_grad(&obj, theta, &x, &w_p, &n, &loc, ClassLabel(2), false);
        theta.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let (fm, _) = objective_and_grad(&obj, theta, &x, &w_p, &n, &loc, ClassLabel(2), false);
        theta.get_mut(name).unwrap().data_mut()[i] = orig;
        (fp - fm) / (2.0 * h)
    };
    for name in names {
        let an = grads[&name].data().to_vec();
        let (mut diff, mut norm) = (0.0, 0.0);
        for (i, &a) in an.iter().enumerate() {
            let fd = fd_at(&mut theta, &name, i, 1e-3);
            diff += (a - fd).powi(2);
            norm += fd.powi(2);
            let fine = fd_at(&mut theta, &name, i, 1e-5);
            assert!((a - fine).abs() <= 1e-4 * a.abs().max(1e-4), "{name}[{i}]: analytic {a} numeric {fine}");
        }
        let rel = (diff / norm.max(1e-300)).sqrt();
        assert!(rel < 1e-3, "{name}: relative error {rel:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_losses_recompose(seed in any::<u64>(), lp in 0.0..1.0f64, lr in 0.0..1.0f64, lce in 0.0..1.0f64, lpg in 0.0..1.0f64, rec: bool, ce: bool, pg: bool) {
        let m = micro(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let weights = LossWeights { lambda_l2_p: lp, lambda_l2_r: lr, lambda_ce: lce, lambda_pg: lpg, ..LossWeights::default() };
        let mask = TermMask { rec, ce, pg };
        let c = ClassLabel(rng.gen_range(0..3));
        let c_any = ClassLabel((c.0 + 1 + rng.gen_range(0..2)) % 3);
        let w_p = m.gen.map_latent(&LatentZ::sample(m.gen.arch.z_dim, &mut rng), c).unwrap();
        let n = m.gen.random_noise(&mut rng);
        let x = random_image(&[1, 4, 4], &mut rng);
        let y = random_image(&[1, 4, 4], &mut rng);
        let z = LatentZ::sample(m.gen.arch.z_dim, &mut rng);
        let alpha = rng.gen_range(0.1..2.0);
        let mut theta = m.gen.synthesis.clone();
        for (_, t) in theta.params.iter_mut() {
            for v in t.data_mut() {
                *v += 0.02 * rng.gen_range(-1.0..1.0);
            }
        }

        let pt = loss_pt(&m.fx, &x, &y, &weights).unwrap();
        let want = perceptual_distance(&m.fx, &x, &y).unwrap() + lp * l2_distance(&x, &y).unwrap();
        prop_assert!(close(pt, want, 1e-12));
        let r = loss_r(&m.fx, &x, &y, &weights).unwrap();
        let want = perceptual_distance(&m.fx, &x, &y).unwrap() + lr * l2_distance(&x, &y).unwrap();
        prop_assert!(close(r, want, 1e-12));

        let w_r = locality_sample(&w_p, &z, c, alpha, &m.gen).unwrap();
        let x_p = m.gen.synthesize(&w_p, &n, &theta).unwrap();
        let x_r = m.gen.synthesize(&w_r, &n, &m.gen.synthesis).unwrap();
        let x_r_star = m.gen.synthesize(&w_r, &n, &theta).unwrap();
        let l_pt = loss_pt(&m.fx, &x, &x_p, &weights).unwrap();
        let l_r = loss_r(&m.fx, &x_r, &x_r_star, &weights).unwrap();
        let (rec_v, _) = loss_rec(&m.fx, &m.gen, &x, &w_p, &n, &theta, &z, c, alpha, &weights).unwrap();
        prop_assert!(close(rec_v, l_pt + l_r, 1e-12));

        let obj = AptObjective { fx: &m.fx, gen: &m.gen, classifier: &m.clf, discriminators: &m.disc, weights, mask };
        let (total, b) = apt_total(&obj, &x, &w_p, &n, &theta, &z, c, alpha, c_any).unwrap();
        let ce_v = fooling_loss(&m.clf.classify(&x_p).unwrap(), c_any).unwrap();
        let pg_v = projected_gan_loss(&m.disc.discriminate(&x_p));
        let mut want = 0.0;
        if rec { want += l_pt + l_r; }
        if ce { want += lce * ce_v; }
        if pg { want += lpg * pg_v; }
        prop_assert!(close(total, want, 1e-12), "total {} want {}", total, want);
        prop_assert!(close(b.l_pt, l_pt, 1e-12));
    }

    #[test]
    fn locality_step_lands_at_alpha(seed in any::<u64>(), alpha in 1e-3..10.0f64, layers in 1usize..6, width in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || StyleCode(Tensor::from_fn(&[layers, width], |_| rng.gen_range(-3.0..3.0)));
        let (w_p, w_z) = (draw(), draw());
        let w_r = locality_step(&w_p, &w_z, alpha).unwrap();
        prop_assert!((w_r.distance(&w_p) - alpha).abs() < 1e-6 * alpha.max(1.0));
        prop_assert!(locality_step(&w_p, &w_p, alpha).is_none());
    }

    #[test]
    fn perceptual_distance_is_a_symmetric_premetric(seed in any::<u64>()) {
        let m = micro(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_image(&[1, 4, 4], &mut rng);
        let y = random_image(&[1, 4, 4], &mut rng);
        let dxy = perceptual_distance(&m.fx, &x, &y).unwrap();
        prop_assert!(dxy >= 0.0);
        prop_assert!(perceptual_distance(&m.fx, &x, &x).unwrap().abs() < 1e-12);
        prop_assert!(close(dxy, perceptual_distance(&m.fx, &y, &x).unwrap(), 1e-12));
        prop_assert!(l2_distance(&x, &y).unwrap() >= 0.0);
    }

    #[test]
    fn fooling_and_realness_terms_have_their_signs(raw in proptest::collection::vec(-20.0..20.0f64, 2..12), d in proptest::collection::vec(0.0..1.0f64, 1..4)) {
        let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = raw.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let probs: Vec<f64> = e.iter().map(|v| v / s).collect();
        for c in 0..probs.len() {
            let l = fooling_loss(&probs, ClassLabel(c)).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!(l <= -LOG_EPS.ln() + 1e-12);
        }
        prop_assert!(fooling_loss(&probs, ClassLabel(probs.len())).is_err());
        prop_assert!(projected_gan_loss(&d) <= 0.0);
    }
}
