//! Pivotal tuning attacks and the latent-space baselines.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{AptError, Result};
use crate::losses::{
    draw_locality_sample, fooling_loss_on, loss_pt, AptObjective, LossBreakdown, LossWeights, TermMask,
};
use crate::models::{
    argmax, ClassLabel, ClassifierHandle, DiscriminatorSet, FeatureExtractor, Generator, ImageTensor, LatentZ,
    NoiseMaps, StyleCode,
};
use crate::inversion::PivotState;
use crate::nn::{Adam, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Apt,
    LatentOnly,
    RandomSample,
}

impl AttackKind {
    pub fn tag(&self) -> &'static str {
        match self {
            AttackKind::Apt => "apt",
            AttackKind::LatentOnly => "latent_only",
            AttackKind::RandomSample => "random_sample",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FooledWithinD,
    HitDistanceBound,
    MaxIters,
    /// The objective became non-finite.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub weights: LossWeights,
    pub mask: TermMask,
    pub d: f64,
    /// Absolute locality radius in style space.
    pub alpha: f64,
    pub lr: f64,
    /// Step size of the latent-space baselines.
    pub latent_lr: f64,
    pub max_iters: usize,
    pub target: String,
    pub seed: u64,
    /// Draw a new fooling class every step instead of once per attack.
    pub resample_c_any: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(AptError::Config(format!("d must be positive, got {}", self.d)));
        }
        if !(self.lr > 0.0 && self.latent_lr > 0.0) {
            return Err(AptError::Config("learning rates must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AptError::Config("alpha must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Outcome of one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub kind: AttackKind,
    pub image_id: Option<usize>,
    pub true_class: usize,
    pub c_any: usize,
    pub d: Option<f64>,
    pub stop_reason: StopReason,
    pub emitted: bool,
    pub image_ref: Option<String>,
    pub l_pt_at_emission: Option<f64>,
    pub emitted_iter: Option<usize>,
    pub iterations_used: usize,
    /// Predicted class of every judging classifier on the emitted image.
    pub predictions: BTreeMap<String, usize>,
    pub fooled: BTreeMap<String, bool>,
    pub conf_before: Option<f64>,
    pub conf_after: Option<f64>,
    /// Mean discriminator probability-of-real on the emitted image.
    pub realness: Option<f64>,
    pub failure: Option<String>,
    #[serde(skip)]
    pub trace: Vec<LossBreakdown>,
    #[serde(skip)]
    pub image: Option<ImageTensor>,
}

/// Frozen models an attack reads.
pub struct AttackModels<'a> {
    pub gen: &'a Generator,
    pub fx: &'a (dyn FeatureExtractor + Sync),
    pub target: &'a ClassifierHandle,
    pub discriminators: &'a DiscriminatorSet,
    /// Classifiers whose verdicts are recorded; the target is always included.
    pub judges: Vec<&'a ClassifierHandle>,
}

impl AttackModels<'_> {
    fn judge(&self, rec: &mut AttackRecord) -> Result<()> {
        let Some(img) = rec.image.as_ref() else {
            return Ok(());
        };
        let mut all: Vec<&ClassifierHandle> = vec![self.target];
        all.extend(self.judges.iter().copied().filter(|j| j.id != self.target.id));
        for c in all {
            let p = c.classify(img)?;
            let pred = argmax(&p);
            if c.id == self.target.id {
                rec.conf_after = Some(p[rec.true_class]);
            }
            rec.predictions.insert(c.id.clone(), pred);
            rec.fooled.insert(c.id.clone(), pred != rec.true_class);
        }
        let s = self.discriminators.discriminate(img);
        rec.realness = Some(s.iter().sum::<f64>() / s.len() as f64);
        Ok(())
    }
}

/// Uniform over the classes other than `true_class`.
pub fn choose_fool_target(true_class: ClassLabel, k: usize, rng: &mut impl Rng) -> Result<ClassLabel> {
    if k < 2 {
        return Err(AptError::InvalidArgument(format!("need at least two classes to pick a wrong one, got {k}")));
    }
    if true_class.0 >= k {
        return Err(AptError::InvalidArgument(format!("class {} out of range {k}", true_class.0)));
    }
    let r = rng.gen_range(0..k - 1);
    Ok(ClassLabel(if r >= true_class.0 { r + 1 } else { r }))
}

/// Per-attack RNG stream derived from the campaign seed and the image id.
pub fn attack_rng(seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(image_id.wrapping_add(1));
    r
}

/// Absolute locality radius: `alpha_rel` times the mean Frobenius distance of
/// mapped codes from their mean.
pub fn resolve_alpha(gen: &Generator, alpha_rel: f64, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = gen.arch.num_classes;
    let zs: Vec<LatentZ> = (0..samples).map(|_| LatentZ::sample(gen.arch.z_dim, &mut rng)).collect();
    let cs: Vec<ClassLabel> = (0..samples).map(|i| ClassLabel(i % k)).collect();
    let rows = gen.map_rows(&zs, &cs)?;
    let s = gen.arch.style_dim;
    let mut mean = vec![0.0; s];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / samples as f64;
        }
    }
    let l = gen.num_layers() as f64;
    let dist: f64 = rows
        .iter()
        .map(|r| (l * r.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sqrt())
        .sum::<f64>()
        / samples as f64;
    Ok(alpha_rel * dist)
}

/// Bookkeeping of one distance bound while a shared trajectory runs.
struct BoundState {
    d: f64,
    done: Option<(StopReason, usize)>,
    last_ok: Option<(usize, ImageTensor, f64)>,
    last_ok_fooled: Option<(usize, ImageTensor, f64)>,
    emitted: Option<(usize, ImageTensor, f64)>,
}

impl BoundState {
    fn new(d: f64) -> Self {
        Self {
            d,
            done: None,
            last_ok: None,
            last_ok_fooled: None,
            emitted: None,
        }
    }

    /// Apply the stopping rule to iterate `k`.
    fn observe(&mut self, k: usize, img: &ImageTensor, l_pt: f64, fooled: bool, max_iters: usize) {
        if self.done.is_some() {
            return;
        }
        if k >= 1 {
            if l_pt <= self.d && fooled {
                self.emitted = Some((k, img.clone(), l_pt));
                self.done = Some((StopReason::FooledWithinD, k));
                return;
            }
            if l_pt >= self.d {
                self.emitted = self.last_ok_fooled.take().or_else(|| self.last_ok.take());
                self.done = Some((StopReason::HitDistanceBound, k));
                return;
            }
        }
        if l_pt <= self.d {
            self.last_ok = Some((k, img.clone(), l_pt));
            if fooled {
                self.last_ok_fooled = Some((k, img.clone(), l_pt));
            }
        }
        if k == max_iters {
            self.emitted = self.last_ok_fooled.take().or_else(|| self.last_ok.take());
            self.done = Some((StopReason::MaxIters, k));
        }
    }

    fn fail(&mut self, k: usize) {
        if self.done.is_none() {
            self.done = Some((StopReason::Failed, k));
        }
    }
}

fn base_record(kind: AttackKind, image_id: Option<usize>, true_class: usize, c_any: usize) -> AttackRecord {
    AttackRecord {
        kind,
        image_id,
        true_class,
        c_any,
        d: None,
        stop_reason: StopReason::MaxIters,
        emitted: false,
        image_ref: None,
        l_pt_at_emission: None,
        emitted_iter: None,
        iterations_used: 0,
        predictions: BTreeMap::new(),
        fooled: BTreeMap::new(),
        conf_before: None,
        conf_after: None,
        realness: None,
        failure: None,
        trace: Vec::new(),
        image: None,
    }
}

/// What an optimization variant tunes.
enum Tuned {
    Weights(ParamSet),
    Latent(ParamSet),
}

const STYLE_PREFIX: &str = "w.";
const NOISE_PREFIX: &str = "n.";

fn latent_params(w: &StyleCode, n: &NoiseMaps) -> ParamSet {
    let mut p = ParamSet::new();
    for l in 0..w.layers() {
        p.insert(format!("{STYLE_PREFIX}{l:02}"), Tensor::new(vec![1, w.width()], w.row(l).to_vec()));
    }
    for (i, t) in n.0.iter().enumerate() {
        let (h, ww) = t.dims2();
        p.insert(format!("{NOISE_PREFIX}{i:02}"), t.clone().reshape(&[1, h, ww]));
    }
    p
}

/// Shared loop of the pivot-based attacks; one record per bound in `ds`.
#[allow(clippy::too_many_arguments)]
fn pivot_attack(
    kind: AttackKind,
    x: &ImageTensor,
    image_id: Option<usize>,
    true_class: ClassLabel,
    pivot: &PivotState,
    m: &AttackModels<'_>,
    cfg: &AttackConfig,
    ds: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AttackRecord>> {
    cfg.validate()?;
    if ds.is_empty() || ds.iter().any(|d| !(*d > 0.0)) {
        return Err(AptError::Config("distance bounds must be positive".into()));
    }
    let gen = m.gen;
    gen.check_shapes(&pivot.w_p, &pivot.n)?;
    let k_classes = m.target.num_classes;
    let mut c_any = choose_fool_target(true_class, k_classes, rng)?;
    let first_c_any = c_any;
    let obj = AptObjective {
        fx: m.fx,
        gen,
        classifier: m.target,
        discriminators: m.discriminators,
        weights: cfg.weights,
        mask: cfg.mask,
    };
    let mut tuned = match kind {
        AttackKind::Apt => Tuned::Weights(gen.synthesis.params.clone()),
        AttackKind::LatentOnly => Tuned::Latent(latent_params(&pivot.w_p, &pivot.n)),
        AttackKind::RandomSample => unreachable!("random samples have no pivot"),
    };
    let (lr, mut opt) = match kind {
        AttackKind::Apt => (cfg.lr, Adam::new(0.9, 0.999)),
        _ => (cfg.latent_lr, Adam::new(0.9, 0.999)),
    };
    let conf_before = m.target.classify(x)?[true_class.0];
    let mut states: Vec<BoundState> = ds.iter().map(|&d| BoundState::new(d)).collect();
    let mut trace = Vec::new();
    let mut failure = None;
    let layers = gen.num_layers();

    for k in 0..=cfg.max_iters {
        if cfg.resample_c_any && k > 0 {
            c_any = choose_fool_target(true_class, k_classes, rng)?;
        }
        let locality = if cfg.mask.rec && matches!(kind, AttackKind::Apt) {
            let w_r = draw_locality_sample(&pivot.w_p, true_class, cfg.alpha, gen, rng)?;
            Some(obj.locality_inputs(w_r, &pivot.n)?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let (bound, styles, noise): (_, Vec<Var>, Vec<Var>) = match &tuned {
            Tuned::Weights(p) => {
                let b = p.bind(&mut tape, true);
                let s = gen.style_vars(&mut tape, &pivot.w_p, false);
                let n = gen.noise_vars(&mut tape, &pivot.n, false);
                (b, s, n)
            }
            Tuned::Latent(p) => {
                let b = p.bind(&mut tape, true);
                let s = (0..layers).map(|l| b.var(&format!("{STYLE_PREFIX}{l:02}"))).collect();
                let n = (0..layers).map(|l| b.var(&format!("{NOISE_PREFIX}{l:02}"))).collect();
                (b, s, n)
            }
        };
        let theta = match &tuned {
            Tuned::Weights(_) => bound.clone(),
            Tuned::Latent(_) => gen.synthesis.params.bind(&mut tape, false),
        };
        let g = obj.build_on(&mut tape, &theta, x, &styles, &noise, locality.as_ref(), c_any)?;
        let b = g.breakdown(&tape);
        if !b.total.is_finite() || !b.l_pt.is_finite() {
            failure = Some(format!("objective became non-finite at iteration {k}"));
            states.iter_mut().for_each(|s| s.fail(k));
            trace.push(b);
            break;
        }
        let img = ImageTensor(tape.value(g.x_p_star).index0(0));
        let fooled = argmax(tape.value(g.logits).data()) != true_class.0;
        for s in states.iter_mut() {
            s.observe(k, &img, b.l_pt, fooled, cfg.max_iters);
        }
        if states.iter().all(|s| s.done.is_some()) {
            break;
        }
        trace.push(b);
        let mut grads = tape.backward(g.total);
        let gm = bound.grads(&tape, &mut grads);
        match &mut tuned {
            Tuned::Weights(p) | Tuned::Latent(p) => opt.step(p, &gm, lr),
        }
    }

    let mut out = Vec::with_capacity(states.len());
    for s in states {
        let (reason, stop_k) = s.done.expect("every bound terminates");
        let mut rec = base_record(kind, image_id, true_class.0, first_c_any.0);
        rec.d = Some(s.d);
        rec.stop_reason = reason;
        rec.iterations_used = stop_k;
        rec.conf_before = Some(conf_before);
        rec.trace = trace[..stop_k.min(trace.len())].to_vec();
        rec.failure = failure.clone();
        if let Some((ek, img, _)) = s.emitted {
            // the bound is re-checked from scratch on the emitted pixels
            let l_pt = loss_pt(m.fx, x, &img, &cfg.weights)?;
            if l_pt <= s.d {
                rec.emitted = true;
                rec.emitted_iter = Some(ek);
                rec.l_pt_at_emission = Some(l_pt);
                rec.image = Some(img);
            }
        }
        m.judge(&mut rec)?;
        out.push(rec);
    }
    Ok(out)
}

/// Pivotal tuning of the synthesis weights; one record per bound in `ds`.
/// Bounds share one trajectory, so each record equals a separate run at its bound.
#[allow(clippy::too_many_arguments)]
pub fn apt_attack_bounds(
    x: &ImageTensor,
    image_id: Option<usize>,
    true_class: ClassLabel,
    pivot: &PivotState,
    m: &AttackModels<'_>,
    cfg: &AttackConfig,
    ds: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AttackRecord>> {
    pivot_attack(AttackKind::Apt, x, image_id, true_class, pivot, m, cfg, ds, rng)
}

pub fn apt_attack(
    x: &ImageTensor,
    image_id: Option<usize>,
    true_class: ClassLabel,
    pivot: &PivotState,
    m: &AttackModels<'_>,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackRecord> {
    Ok(apt_attack_bounds(x, image_id, true_class, pivot, m, cfg, &[cfg.d], rng)?.remove(0))
}

/// Same loop with the generator frozen and the pivot code and noise optimized.
#[allow(clippy::too_many_arguments)]
pub fn latent_only_attack_bounds(
    x: &ImageTensor,
    image_id: Option<usize>,
    true_class: ClassLabel,
    pivot: &PivotState,
    m: &AttackModels<'_>,
    cfg: &AttackConfig,
    ds: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<AttackRecord>> {
    pivot_attack(AttackKind::LatentOnly, x, image_id, true_class, pivot, m, cfg, ds, rng)
}

pub fn latent_only_attack(
    x: &ImageTensor,
    image_id: Option<usize>,
    true_class: ClassLabel,
    pivot: &PivotState,
    m: &AttackModels<'_>,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackRecord> {
    Ok(latent_only_attack_bounds(x, image_id, true_class, pivot, m, cfg, &[cfg.d], rng)?.remove(0))
}

/// Optimize the style code of a fresh sample of class `c` to fool the target.
pub fn random_sample_attack(
    c: ClassLabel,
    m: &AttackModels<'_>,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttackRecord> {
    cfg.validate()?;
    let gen = m.gen;
    let c_any = choose_fool_target(c, m.target.num_classes, rng)?;
    let z = LatentZ::sample(gen.arch.z_dim, rng);
    let w = gen.map_latent(&z, c)?;
    let n = gen.random_noise(rng);
    let layers = gen.num_layers();
    let mut p = ParamSet::new();
    for l in 0..layers {
        p.insert(format!("{STYLE_PREFIX}{l:02}"), Tensor::new(vec![1, w.width()], w.row(l).to_vec()));
    }
    let mut opt = Adam::new(0.9, 0.999);
    let cw = m.target.weights()?;
    let mut rec = base_record(AttackKind::RandomSample, None, c.0, c_any.0);
    rec.stop_reason = StopReason::MaxIters;
    let mut last = None;
    for k in 0..=cfg.max_iters {
        let mut tape = Tape::new();
        let th = gen.synthesis.params.bind(&mut tape, false);
        let b = p.bind(&mut tape, true);
        let styles: Vec<Var> = (0..layers).map(|l| b.var(&format!("{STYLE_PREFIX}{l:02}"))).collect();
        let noise = gen.noise_vars(&mut tape, &n, false);
        let y = gen.arch.synthesize_on(&mut tape, &th, &styles, &noise);
        let cb = cw.bind(&mut tape, false);
        let logits = m.target.logits_on(&mut tape, &cb, y);
        let l_ce = fooling_loss_on(&mut tape, logits, c_any);
        let v = tape.scalar(l_ce);
        if !v.is_finite() {
            rec.stop_reason = StopReason::Failed;
            rec.failure = Some(format!("fooling loss became non-finite at iteration {k}"));
            rec.iterations_used = k;
            break;
        }
        rec.trace.push(LossBreakdown {
            l_ce: v,
            total: v,
            ..LossBreakdown::default()
        });
        let img = ImageTensor(tape.value(y).index0(0));
        if k == 0 {
            rec.conf_before = Some(m.target.classify(&img)?[c.0]);
        }
        let fooled = argmax(tape.value(logits).data()) != c.0;
        last = Some((k, img));
        if fooled && k >= 1 {
            rec.stop_reason = StopReason::FooledWithinD;
            rec.iterations_used = k;
            break;
        }
        if k == cfg.max_iters {
            rec.iterations_used = k;
            break;
        }
        let mut g = tape.backward(l_ce);
        let gm = b.grads(&tape, &mut g);
        opt.step(&mut p, &gm, cfg.latent_lr);
    }
    if rec.stop_reason != StopReason::Failed {
        if let Some((k, img)) = last {
            rec.emitted = true;
            rec.emitted_iter = Some(k);
            rec.image = Some(img);
        }
    }
    m.judge(&mut rec)?;
    Ok(rec)
}
