//! Fine-tuning a classifier on attack images and the paired before/after comparison.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackRecord;
use crate::autograd::Tape;
use crate::data::{Dataset, SplitName};
use crate::error::{AptError, Result};
use crate::evaluate::{accuracy_confidence, Score};
use crate::models::{ClassifierHandle, ImageTensor};
use crate::nn::Adam;
use crate::pretrain::{augment, check_finite, mean_ce, split_accuracy, EpochLog, Trained};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each batch drawn from the attack images; 1.0 trains on them alone.
    pub mix: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 3,
            batch_size: 32,
            mix: 0.5,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AptError::Config(format!("finetune lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(AptError::Config(format!("finetune mix must lie in [0, 1], got {}", self.mix)));
        }
        if self.batch_size < 2 {
            return Err(AptError::Config("finetune batch_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Attack images labeled with their original class.
#[derive(Clone, Debug)]
pub struct FinetuneSet {
    pub campaign: String,
    pub image_ids: Vec<usize>,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub image_refs: Vec<Option<String>>,
}

impl FinetuneSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Emitted records of a campaign on training images; everything else is skipped.
pub fn build_finetune_set(ds: &Dataset, campaign: &str, records: &[AttackRecord]) -> Result<FinetuneSet> {
    let train: BTreeSet<usize> = ds.splits.get(SplitName::Train).iter().copied().collect();
    let k = ds.config.num_classes();
    let mut set = FinetuneSet {
        campaign: campaign.to_string(),
        image_ids: Vec::new(),
        images: Vec::new(),
        labels: Vec::new(),
        image_refs: Vec::new(),
    };
    for r in records.iter().filter(|r| r.emitted) {
        let id = r
            .image_id
            .ok_or_else(|| AptError::InvalidArgument("finetune records need source image ids".into()))?;
        if !train.contains(&id) {
            return Err(AptError::InvalidArgument(format!(
                "image {id} is not in the train split; fine-tuning uses attacks on training images only"
            )));
        }
        if r.true_class >= k {
            return Err(AptError::InvalidArgument(format!("label {} out of range", r.true_class)));
        }
        let img = r
            .image
            .clone()
            .ok_or_else(|| AptError::InvalidArgument(format!("pixels of the emitted image for {id} are not loaded")))?;
        set.image_ids.push(id);
        set.images.push(img);
        set.labels.push(r.true_class);
        set.image_refs.push(r.image_ref.clone());
    }
    Ok(set)
}

/// Fails when the evaluation images overlap the fine-tuning images.
pub fn check_disjoint(finetune_ids: &[usize], eval_ids: &[usize]) -> Result<()> {
    let a: BTreeSet<usize> = finetune_ids.iter().copied().collect();
    let shared: Vec<usize> = eval_ids.iter().copied().filter(|i| a.contains(i)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(AptError::InvalidArgument(format!(
            "evaluation images overlap the finetune set: {shared:?}"
        )))
    }
}

pub fn finetuned_id(base: &str, campaign: &str) -> String {
    format!("{base}-apt-ft-{campaign}")
}

/// Continue training `clf` on batches mixing attack images with clean training images.
/// One epoch is one pass over the attack images.
pub fn finetune(
    clf: &ClassifierHandle,
    ds: &Dataset,
    set: &FinetuneSet,
    cfg: &FinetuneConfig,
) -> Result<Trained<ClassifierHandle>> {
    cfg.validate()?;
    if set.is_empty() && cfg.epochs > 0 && cfg.mix > 0.0 {
        return Err(AptError::InvalidArgument("finetune set is empty".into()));
    }
    let mut out = clf.clone();
    out.id = finetuned_id(&clf.id, &set.campaign);
    let mut params = clf.weights()?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(0.9, 0.999);
    let n_apt = ((cfg.batch_size as f64 * cfg.mix).round() as usize).clamp(usize::from(cfg.mix > 0.0), cfg.batch_size);
    let n_clean = cfg.batch_size - n_apt;
    let clean_pool = ds.splits.get(SplitName::Train);
    let steps = if n_apt == 0 {
        clean_pool.len().div_ceil(cfg.batch_size)
    } else {
        set.len().div_ceil(n_apt)
    };
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for s in 0..steps {
            let mut imgs: Vec<Tensor> = Vec::with_capacity(cfg.batch_size);
            let mut labels = Vec::with_capacity(cfg.batch_size);
            for j in 0..n_apt {
                let i = order[(s * n_apt + j) % order.len()];
                imgs.push(set.images[i].0.clone());
                labels.push(set.labels[i]);
            }
            for id in clean_pool.choose_multiple(&mut rng, n_clean) {
                imgs.push(ds.image(*id).clone());
                labels.push(ds.labels[*id]);
            }
            let x = augment(&Tensor::stack(&imgs), &mut rng);
            let mut tape = Tape::new();
            let bp = params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let logits = out.logits_on(&mut tape, &bp, xv);
            let loss = mean_ce(&mut tape, logits, &labels);
            let l = tape.scalar(loss);
            check_finite(&out.id, epoch, l)?;
            total += l * labels.len() as f64;
            seen += labels.len();
            let mut g = tape.backward(loss);
            let grads = bp.grads(&tape, &mut g);
            opt.step(&mut params, &grads, cfg.lr);
        }
        let mut losses = BTreeMap::new();
        losses.insert("ce".to_string(), total / seen.max(1) as f64);
        log.push(EpochLog { epoch, losses });
    }
    *out.weights_mut()? = params;
    let acc = split_accuracy(&out, ds, ds.splits.get(SplitName::Test))?;
    Ok(Trained {
        model: out,
        log,
        test_accuracy: Some(acc),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub before_id: String,
    pub after_id: String,
    pub attack: [Score; 2],
    pub clean: [Score; 2],
    pub delta_acc: f64,
    pub delta_conf: f64,
    pub clean_delta_acc: f64,
}

/// Both classifiers on the same held-out attack set and the same clean images.
pub fn before_after_eval(
    before: &ClassifierHandle,
    after: &ClassifierHandle,
    attack: (&[ImageTensor], &[usize]),
    clean: (&[ImageTensor], &[usize]),
) -> Result<PairedReport> {
    let a0 = accuracy_confidence(before, attack.0, attack.1)?;
    let a1 = accuracy_confidence(after, attack.0, attack.1)?;
    let c0 = accuracy_confidence(before, clean.0, clean.1)?;
    let c1 = accuracy_confidence(after, clean.0, clean.1)?;
    Ok(PairedReport {
        before_id: before.id.clone(),
        after_id: after.id.clone(),
        attack: [a0, a1],
        clean: [c0, c1],
        delta_acc: a1.acc - a0.acc,
        delta_conf: a1.conf - a0.conf,
        clean_delta_acc: c1.acc - c0.acc,
    })
}
