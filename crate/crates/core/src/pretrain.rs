//! Training of the frozen fixtures: conditional GAN, classifier zoo, perceptual net.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Dataset, SplitName};
use crate::error::{AptError, Result};
use crate::models::{
    argmax, onehot, ClassifierArch, ClassifierHandle, DiscriminatorArch, DiscriminatorSet, Generator, GeneratorArch,
    ImageTensor, ModelConfig, PerceptualArch, PerceptualNet, Preprocess,
};
use crate::nn::{Adam, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AptError::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Decay of the generator weight average that becomes the saved generator.
    pub ema_decay: f64,
    pub seed: u64,
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(AptError::Config("batch_size and learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(AptError::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub model: T,
    pub log: Vec<EpochLog>,
    /// Clean test-split accuracy, where the model classifies.
    pub test_accuracy: Option<f64>,
}

pub(crate) fn check_finite(what: &str, epoch: usize, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(AptError::Numerical(format!(
            "{what} diverged in epoch {epoch} (loss = {v}); lower the learning rate or change the seed"
        )))
    }
}

/// Shift each image by up to one pixel along each axis (circular).
pub(crate) fn augment(batch: &Tensor, rng: &mut impl Rng) -> Tensor {
    let (n, c, h, w) = batch.dims4();
    let mut out = batch.clone();
    let src = batch.data();
    let dst = out.data_mut();
    for s in 0..n {
        let dy = rng.gen_range(0..3) + h - 1;
        let dx = rng.gen_range(0..3) + w - 1;
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    dst[base + ((y + dy) % h) * w + (x + dx) % w] = src[base + y * w + x];
                }
            }
        }
    }
    out
}

pub(crate) fn mean_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, labels);
    let s = tape.sum_all(picked);
    tape.scale(s, -1.0 / labels.len() as f64)
}

/// Supervised loop shared by classifiers and the perceptual net.
fn fit(
    ds: &Dataset,
    params: &mut ParamSet,
    cfg: &TrainConfig,
    what: &str,
    forward: &dyn Fn(&mut Tape, &crate::nn::Bound, Var) -> Var,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(0.9, 0.999);
    let mut order = ds.splits.train.clone();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for ids in order.chunks(cfg.batch_size) {
            let (x, labels) = ds.batch(ids);
            let x = augment(&x, &mut rng);
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let logits = forward(&mut tape, &bp, xv);
            let loss = mean_ce(&mut tape, logits, &labels);
            let l = tape.scalar(loss);
            check_finite(what, epoch, l)?;
            let k = tape.value(logits).shape()[1];
            for (row, &y) in tape.value(logits).data().chunks(k).zip(&labels) {
                correct += usize::from(argmax(row) == y);
            }
            total += l * ids.len() as f64;
            seen += ids.len();
            let mut g = tape.backward(loss);
            let grads = bp.grads(&tape, &mut g);
            opt.step(params, &grads, cfg.lr);
        }
        let mut losses = BTreeMap::new();
        losses.insert("ce".to_string(), total / seen.max(1) as f64);
        losses.insert("train_accuracy".to_string(), correct as f64 / seen.max(1) as f64);
        log.push(EpochLog { epoch, losses });
    }
    Ok(log)
}

pub fn preprocess_for(ds: &Dataset) -> Preprocess {
    let (mean, std) = ds.channel_stats();
    Preprocess::new(ds.config.image_size, mean, std)
}

/// Fraction of `ids` whose argmax equals the label.
pub fn split_accuracy(clf: &ClassifierHandle, ds: &Dataset, ids: &[usize]) -> Result<f64> {
    let imgs: Vec<ImageTensor> = ids.iter().map(|&i| ImageTensor(ds.image(i).clone())).collect();
    let probs = clf.classify_many(&imgs)?;
    let correct = probs
        .iter()
        .zip(ids)
        .filter(|(p, &i)| argmax(p) == ds.labels[i])
        .count();
    Ok(correct as f64 / ids.len().max(1) as f64)
}

pub fn train_classifier(ds: &Dataset, id: &str, arch: ClassifierArch, cfg: &TrainConfig) -> Result<Trained<ClassifierHandle>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a5);
    let c = &ds.config;
    let mut clf = ClassifierHandle::init(id, arch, c.num_classes(), c.channels, preprocess_for(ds), &mut rng);
    let mut params = clf.weights()?.clone();
    let log = {
        let shape = clf.clone();
        fit(ds, &mut params, cfg, id, &|tape, bp, x| shape.logits_on(tape, bp, x))?
    };
    *clf.weights_mut()? = params;
    let acc = split_accuracy(&clf, ds, ds.splits.get(SplitName::Test))?;
    Ok(Trained {
        model: clf,
        log,
        test_accuracy: Some(acc),
    })
}

pub fn perceptual_arch(ds: &Dataset, mc: &ModelConfig) -> PerceptualArch {
    PerceptualArch {
        image_size: ds.config.image_size,
        channels: ds.config.channels,
        num_classes: ds.config.num_classes(),
        block_channels: mc.perceptual_channels,
    }
}

pub fn train_perceptual(ds: &Dataset, mc: &ModelConfig, cfg: &TrainConfig) -> Result<Trained<PerceptualNet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e4c);
    let mut net = PerceptualNet::init(perceptual_arch(ds, mc), &mut rng);
    let log = {
        let shape = net.clone();
        fit(ds, &mut net.params, cfg, "perceptual net", &|tape, bp, x| shape.head_on(tape, bp, x).1)?
    };
    let test = ds.splits.get(SplitName::Test);
    let mut correct = 0;
    for ids in test.chunks(64) {
        let (x, labels) = ds.batch(ids);
        let mut tape = Tape::new();
        let bp = net.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (_, logits) = net.head_on(&mut tape, &bp, xv);
        let k = ds.config.num_classes();
        for (row, y) in tape.value(logits).data().chunks(k).zip(labels) {
            correct += usize::from(argmax(row) == y);
        }
    }
    Ok(Trained {
        model: net,
        log,
        test_accuracy: Some(correct as f64 / test.len().max(1) as f64),
    })
}

/// Non-saturating loss on realness logits, with an auxiliary class term.
fn adversarial_terms(
    tape: &mut Tape,
    outs: &[(Var, Var)],
    real: bool,
    labels: Option<&[usize]>,
) -> (Var, Var) {
    let mut adv: Option<Var> = None;
    let mut aux: Option<Var> = None;
    for &(r, cls) in outs {
        let n = tape.value(r).len() as f64;
        let x = if real { tape.scale(r, -1.0) } else { r };
        let sp = tape.softplus(x);
        let s = tape.sum_all(sp);
        let s = tape.scale(s, 1.0 / n);
        adv = Some(match adv {
            Some(a) => tape.add(a, s),
            None => s,
        });
        if let Some(l) = labels {
            let ce = mean_ce(tape, cls, l);
            aux = Some(match aux {
                Some(a) => tape.add(a, ce),
                None => ce,
            });
        }
    }
    let adv = adv.expect("at least one scale");
    let aux = aux.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    (adv, aux)
}

fn batch_noise(gen: &Generator, n: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    gen.arch
        .noise_shapes()
        .iter()
        .map(|s| Tensor::randn(&[n, s[0], s[1]], 1.0, rng))
        .collect()
}

fn fake_batch(
    tape: &mut Tape,
    gen: &Generator,
    mapping: &crate::nn::Bound,
    synthesis: &crate::nn::Bound,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Var {
    let n = labels.len();
    let z = tape.constant(Tensor::randn(&[n, gen.arch.z_dim], 1.0, rng));
    let oh = tape.constant(onehot(labels, gen.arch.num_classes));
    let w = gen.arch.map_on(tape, mapping, z, oh);
    let styles = vec![w; gen.num_layers()];
    let noise: Vec<Var> = batch_noise(gen, n, rng)
        .into_iter()
        .map(|t| tape.constant(t))
        .collect();
    gen.arch.synthesize_on(tape, synthesis, &styles, &noise)
}

fn ema_update(avg: &mut ParamSet, cur: &ParamSet, decay: f64) {
    for (name, a) in avg.iter_mut() {
        let c = cur.get(name).expect("same parameter names");
        for (x, y) in a.data_mut().iter_mut().zip(c.data()) {
            *x = decay * *x + (1.0 - decay) * y;
        }
    }
}

/// Conditional GAN training against the multi-scale discriminator set.
/// Returns the weight-averaged generator and the final discriminators.
pub fn train_gan(ds: &Dataset, mc: &ModelConfig, cfg: &GanTrainConfig) -> Result<Trained<(Generator, DiscriminatorSet)>> {
    cfg.validate()?;
    let c = &ds.config;
    mc.validate(c.image_size)?;
    let k = c.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::init(GeneratorArch::new(mc, c.image_size, c.channels, k), &mut rng);
    let mut disc = DiscriminatorSet::init(DiscriminatorArch::new(mc, c.image_size, c.channels, k), &mut rng);
    let mut ema_map = gen.mapping.clone();
    let mut ema_syn = gen.synthesis.params.clone();
    let mut opt_g_map = Adam::new(0.0, 0.99);
    let mut opt_g_syn = Adam::new(0.0, 0.99);
    let mut opt_d = Adam::new(0.0, 0.99);
    let train = ds.splits.get(SplitName::Train).to_vec();
    let steps = train.len() / cfg.batch_size;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc: BTreeMap<&str, f64> = BTreeMap::new();
        for step in 0..steps {
            let ids = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let (real, labels) = ds.batch(ids);

            // discriminator step
            let mut tape = Tape::new();
            let mp = gen.mapping.bind(&mut tape, false);
            let sp = gen.synthesis.params.bind(&mut tape, false);
            let fake = fake_batch(&mut tape, &gen, &mp, &sp, &labels, &mut rng);
            let dp = disc.params.bind(&mut tape, true);
            let rv = tape.constant(real);
            let r_out = disc.arch.logits_on(&mut tape, &dp, rv);
            let f_out = disc.arch.logits_on(&mut tape, &dp, fake);
            let (adv_r, aux_r) = adversarial_terms(&mut tape, &r_out, true, Some(&labels));
            let (adv_f, _) = adversarial_terms(&mut tape, &f_out, false, None);
            let d_adv = tape.add(adv_r, adv_f);
            let d_loss = tape.add(d_adv, aux_r);
            let dl = tape.scalar(d_loss);
            check_finite("discriminator", epoch, dl)?;
            *acc.entry("d_adv").or_default() += tape.scalar(d_adv);
            *acc.entry("d_aux").or_default() += tape.scalar(aux_r);
            let mut g = tape.backward(d_loss);
            let grads = dp.grads(&tape, &mut g);
            opt_d.step(&mut disc.params, &grads, cfg.lr_d);

            // generator step
            let mut tape = Tape::new();
            let mp = gen.mapping.bind(&mut tape, true);
            let sp = gen.synthesis.params.bind(&mut tape, true);
            let fake = fake_batch(&mut tape, &gen, &mp, &sp, &labels, &mut rng);
            let dp = disc.params.bind(&mut tape, false);
            let f_out = disc.arch.logits_on(&mut tape, &dp, fake);
            let (adv, aux) = adversarial_terms(&mut tape, &f_out, true, Some(&labels));
            let g_loss = tape.add(adv, aux);
            let gl = tape.scalar(g_loss);
            check_finite("generator", epoch, gl)?;
            *acc.entry("g_adv").or_default() += tape.scalar(adv);
            *acc.entry("g_aux").or_default() += tape.scalar(aux);
            let mut g = tape.backward(g_loss);
            let gm = mp.grads(&tape, &mut g);
            let gs = sp.grads(&tape, &mut g);
            opt_g_map.step(&mut gen.mapping, &gm, cfg.lr_g);
            opt_g_syn.step(&mut gen.synthesis.params, &gs, cfg.lr_g);
            ema_update(&mut ema_map, &gen.mapping, cfg.ema_decay);
            ema_update(&mut ema_syn, &gen.synthesis.params, cfg.ema_decay);
        }
        let losses = acc
            .into_iter()
            .map(|(k, v)| (k.to_string(), v / steps.max(1) as f64))
            .collect();
        log.push(EpochLog { epoch, losses });
    }
    gen.mapping = ema_map;
    gen.synthesis.params = ema_syn;
    if !(gen.mapping.is_finite() && gen.synthesis.params.is_finite()) {
        return Err(AptError::Numerical("generator weights are not finite after training".into()));
    }
    Ok(Trained {
        model: (gen, disc),
        log,
        test_accuracy: None,
    })
}
