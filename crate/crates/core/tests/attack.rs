mod common;

use std::sync::OnceLock;

use aptbench::attack::*;
use aptbench::config::RunConfig;
use aptbench::inversion::PivotState;
use aptbench::losses::{loss_pt, TermMask};
use aptbench::models::{argmax, ClassLabel, LatentZ};
use aptbench::pipeline::{run_campaign, Bench, CampaignSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let (root, cfg): (_, RunConfig) = common::fixture(common::TINY, "attack-tiny");
        Bench::load(&root, &cfg).unwrap()
    })
}

fn json(r: &AttackRecord) -> String {
    serde_json::to_string(r).unwrap() + &serde_json::to_string(&r.trace).unwrap()
}

fn spec(b: &Bench, kind: AttackKind, bounds: Vec<f64>) -> CampaignSpec {
    CampaignSpec {
        id: "t".into(),
        kind,
        mask: TermMask::ALL,
        target: "conv".into(),
        bounds,
        image_ids: b.attack_ids(),
        samples: 6,
        seed: 4,
    }
}

#[test]
fn emitted_images_respect_the_bound_and_weights_stay_frozen() {
    let b = bench();
    let before = b.gen.synthesis.digest();
    for kind in [AttackKind::Apt, AttackKind::LatentOnly] {
        let c = run_campaign(b, &spec(b, kind, vec![b.cfg.attack.d]), 1).unwrap().remove(0);
        assert!(c.emitted().count() > 0);
        for r in c.emitted() {
            let x = b.image(r.image_id.unwrap());
            let l = loss_pt(&b.perceptual, &x, r.image.as_ref().unwrap(), &b.cfg.weights).unwrap();
            assert!(l <= b.cfg.attack.d, "{l}");
            assert!((l - r.l_pt_at_emission.unwrap()).abs() < 1e-12);
        }
        assert_eq!(c.header.generator_digest, before);
        let mut all = c.image_ids();
        all.extend(&c.header.excluded);
        all.sort_unstable();
        assert_eq!(all, c.header.requested);
    }
    assert_eq!(b.gen.synthesis.digest(), before);
}

#[test]
fn worker_count_does_not_change_results() {
    let b = bench();
    for kind in [AttackKind::Apt, AttackKind::RandomSample] {
        let s = spec(b, kind, vec![b.cfg.attack.d]);
        let one = run_campaign(b, &s, 1).unwrap().remove(0);
        let three = run_campaign(b, &s, 3).unwrap().remove(0);
        assert_eq!(one.header, three.header);
        let a: Vec<String> = one.records.iter().map(json).collect();
        let c: Vec<String> = three.records.iter().map(json).collect();
        assert_eq!(a, c);
    }
}

#[test]
fn shared_trajectory_equals_separate_runs() {
    let b = bench();
    let bounds = b.cfg.sweep.d_values.clone();
    let multi = run_campaign(b, &spec(b, AttackKind::Apt, bounds.clone()), 1).unwrap();
    for (d, m) in bounds.iter().zip(&multi) {
        let single = run_campaign(b, &spec(b, AttackKind::Apt, vec![*d]), 1).unwrap().remove(0);
        let a: Vec<String> = m.records.iter().map(json).collect();
        let s: Vec<String> = single.records.iter().map(json).collect();
        assert_eq!(a, s, "d = {d}");
    }
    let fooled = |i: usize| -> Vec<bool> {
        multi[i]
            .records
            .iter()
            .map(|r| r.emitted && r.fooled["conv"])
            .collect()
    };
    for (lo, hi) in fooled(0).into_iter().zip(fooled(1)) {
        assert!(!lo || hi);
    }
}

#[test]
fn without_fooling_a_perfect_pivot_stays_within_the_bound() {
    let b = bench();
    let target = b.classifier("conv").unwrap();
    let m = common::models(b, target);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cfg = b.attack_config("conv", TermMask { rec: true, ce: false, pg: true }, 0).unwrap();
    cfg.d = 0.2;
    cfg.max_iters = 150;
    let mut tried = 0;
    loop {
        tried += 1;
        assert!(tried < 200, "no correctly classified generator sample found");
        let c = ClassLabel(tried % 10);
        let w = b.gen.map_latent(&LatentZ::sample(b.gen.arch.z_dim, &mut rng), c).unwrap();
        let n = b.gen.random_noise(&mut rng);
        let x = b.gen.synthesize(&w, &n, &b.gen.synthesis).unwrap();
        if argmax(&target.classify(&x).unwrap()) != c.0 {
            continue;
        }
        let pivot = PivotState {
            w_p: w,
            n,
            final_loss: 0.0,
            trace: Vec::new(),
            image_id: None,
            class: c,
            seed: 0,
        };
        let r = apt_attack(&x, None, c, &pivot, &m, &cfg, &mut attack_rng(0, tried as u64)).unwrap();
        if r.stop_reason == StopReason::FooledWithinD {
            continue;
        }
        assert!(r.iterations_used >= 100, "{:?} after {}", r.stop_reason, r.iterations_used);
        assert!(r.trace.iter().take(100).all(|t| t.l_pt <= 0.2));
        assert!(r.trace[0].l_pt < 1e-12);
        break;
    }
}

#[test]
fn random_samples_mostly_fool_the_target() {
    let b = bench();
    let target = b.classifier("conv").unwrap();
    let m = common::models(b, target);
    let mut cfg = b.attack_config("conv", TermMask::ALL, 0).unwrap();
    cfg.max_iters = 100;
    let n = 20;
    let fooled = (0..n)
        .filter(|&i| {
            let r = random_sample_attack(ClassLabel(i % 10), &m, &cfg, &mut attack_rng(9, i as u64)).unwrap();
            r.emitted && r.fooled["conv"]
        })
        .count();
    assert!(fooled * 2 >= n, "{fooled}/{n}");
}

#[test]
fn oracle_cannot_be_attacked() {
    let b = bench();
    let mut s = spec(b, AttackKind::Apt, vec![0.2]);
    s.target = "oracle".into();
    assert!(run_campaign(b, &s, 1).unwrap_err().is_validation());
}
