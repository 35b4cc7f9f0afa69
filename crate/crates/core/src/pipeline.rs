//! End-to-end orchestration over an output root: pretraining, pivots,
//! campaigns, ablations, distance sweeps and robustification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifacts::{campaign_dir, read_campaign, write_campaign, Campaign, CampaignHeader};
use crate::attack::{
    apt_attack_bounds, attack_rng, latent_only_attack_bounds, random_sample_attack, resolve_alpha, AttackConfig,
    AttackKind, AttackModels, AttackRecord,
};
use crate::config::{derive_seed, RunConfig};
use crate::data::{self, Dataset, SplitName};
use crate::error::{AptError, Result};
use crate::evaluate::{attacked_set, class_preservation_rate, evaluate_campaign, EvalReport};
use crate::inversion::{invert, load_pivot, save_pivot, PivotState};
use crate::losses::TermMask;
use crate::models::{argmax, ClassLabel, ClassifierHandle, DiscriminatorSet, Generator, ImageTensor, PerceptualNet};
use crate::pretrain::{train_classifier, train_gan, train_perceptual, EpochLog};
use crate::robustify::{
    before_after_eval, build_finetune_set, check_disjoint, finetune, finetuned_id, PairedReport,
};
use crate::store::{self, Provenance};

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Hash of the sections that determine the trained models.
pub fn pretrain_hash(cfg: &RunConfig) -> String {
    let v = serde_json::json!({
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "model": cfg.model,
        "pretrain": cfg.pretrain,
    });
    sha_hex(&["pretrain", &v.to_string()])
}

/// Hash of everything a pivot depends on.
pub fn inversion_hash(cfg: &RunConfig) -> String {
    let inv = serde_json::to_string(&cfg.inversion_config()).expect("inversion config serializes");
    sha_hex(&["inversion", &pretrain_hash(cfg), &inv])
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| AptError::io(p, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| AptError::io(path, e))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AptError::Config(format!("cannot start {workers} workers: {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub model: String,
    pub test_accuracy: Option<f64>,
    pub log: Vec<EpochLog>,
    pub skipped: bool,
}

/// Train every fixture model the configuration names; existing checkpoints with
/// a matching hash are kept unless `force`.
pub fn pretrain_all(root: &Path, cfg: &RunConfig, force: bool) -> Result<Vec<PretrainSummary>> {
    let ds = data::load(root, &cfg.dataset.id)?;
    let hash = pretrain_hash(cfg);
    let prov = Provenance {
        dataset_id: ds.config.id.clone(),
        config_hash: hash.clone(),
        seed: cfg.seed,
    };
    let id = &ds.config.id;
    let fresh = |p: &Path| force || store_hash(p).as_deref() != Some(hash.as_str());
    let mut out = Vec::new();
    for spec in &cfg.pretrain.classifiers {
        let path = store::classifier_path(root, id, &spec.id);
        if !fresh(&path) {
            out.push(skipped(&format!("classifier-{}", spec.id)));
            continue;
        }
        let t = train_classifier(&ds, &spec.id, spec.arch, &cfg.classifier_train(&spec.id)?)?;
        let extra = [("test_accuracy".to_string(), serde_json::json!(t.test_accuracy))];
        store::save_classifier(&path, &t.model, &prov, extra)?;
        out.push(PretrainSummary {
            model: format!("classifier-{}", spec.id),
            test_accuracy: t.test_accuracy,
            log: t.log,
            skipped: false,
        });
    }
    let path = store::perceptual_path(root, id);
    if fresh(&path) {
        let t = train_perceptual(&ds, &cfg.model, &cfg.perceptual_train())?;
        let extra = [("test_accuracy".to_string(), serde_json::json!(t.test_accuracy))];
        store::save_perceptual(&path, &t.model, &prov, extra)?;
        out.push(PretrainSummary {
            model: "perceptual".into(),
            test_accuracy: t.test_accuracy,
            log: t.log,
            skipped: false,
        });
    } else {
        out.push(skipped("perceptual"));
    }
    let path = store::gan_path(root, id);
    if fresh(&path) {
        let t = train_gan(&ds, &cfg.model, &cfg.gan_train())?;
        store::save_gan(&path, &t.model.0, &t.model.1, &prov, [])?;
        out.push(PretrainSummary {
            model: "gan".into(),
            test_accuracy: None,
            log: t.log,
            skipped: false,
        });
    } else {
        out.push(skipped("gan"));
    }
    Ok(out)
}

fn skipped(model: &str) -> PretrainSummary {
    PretrainSummary {
        model: model.to_string(),
        test_accuracy: None,
        log: Vec::new(),
        skipped: true,
    }
}

fn store_hash(path: &Path) -> Option<String> {
    if !path.exists() {
        return None;
    }
    crate::models::load_checkpoint(path, None).ok().map(|c| c.meta.config_hash)
}

/// The frozen models of one output root.
pub struct Bench {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub ds: Dataset,
    pub gen: Generator,
    pub disc: DiscriminatorSet,
    pub perceptual: PerceptualNet,
    pub classifiers: BTreeMap<String, ClassifierHandle>,
    /// Absolute locality radius.
    pub alpha: f64,
}

impl Bench {
    /// Load the dataset and every checkpoint; all must match the configuration.
    pub fn load(root: &Path, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let ds = data::load(root, &cfg.dataset.id)?;
        if ds.config != cfg.dataset {
            return Err(AptError::Dataset(format!(
                "dataset `{}` on disk differs from the configuration; rerun `aptbench ingest --force`",
                cfg.dataset.id
            )));
        }
        let hash = pretrain_hash(cfg);
        let id = &cfg.dataset.id;
        let stale = |e: AptError| match e {
            AptError::Checkpoint { path, reason } if reason.contains("hash") => AptError::MissingPrerequisite {
                what: format!("checkpoint for this configuration ({} is stale)", path.display()),
                command: "pretrain".into(),
            },
            e => e,
        };
        let (gen, disc, _) = store::load_gan(&store::gan_path(root, id), Some(&hash)).map_err(stale)?;
        let (perceptual, _) = store::load_perceptual(&store::perceptual_path(root, id), Some(&hash)).map_err(stale)?;
        let mut classifiers = BTreeMap::new();
        for spec in &cfg.pretrain.classifiers {
            let (c, _) =
                store::load_classifier(&store::classifier_path(root, id, &spec.id), Some(&hash)).map_err(stale)?;
            classifiers.insert(spec.id.clone(), c);
        }
        let alpha = resolve_alpha(&gen, cfg.attack.alpha_rel, 512, derive_seed(cfg.seed, "alpha"))?;
        Ok(Self {
            root: root.to_path_buf(),
            cfg: cfg.clone(),
            ds,
            gen,
            disc,
            perceptual,
            classifiers,
            alpha,
        })
    }

    pub fn classifier(&self, id: &str) -> Result<&ClassifierHandle> {
        self.classifiers.get(id).ok_or_else(|| AptError::MissingPrerequisite {
            what: format!("classifier `{id}`"),
            command: "pretrain".into(),
        })
    }

    pub fn oracle(&self) -> Result<&ClassifierHandle> {
        self.classifier(&self.cfg.attack.oracle)
    }

    pub fn runs_dir(&self) -> PathBuf {
        store::runs_dir(&self.root)
    }

    pub fn image(&self, id: usize) -> ImageTensor {
        ImageTensor(self.ds.image(id).clone())
    }

    /// Balanced test images of a campaign.
    pub fn attack_ids(&self) -> Vec<usize> {
        data::sample_per_class(&self.ds, SplitName::Test, self.cfg.attack.per_class, derive_seed(self.cfg.seed, "attack-ids"))
    }

    pub fn finetune_ids(&self) -> Vec<usize> {
        data::sample_per_class(
            &self.ds,
            SplitName::Train,
            self.cfg.finetune.per_class,
            derive_seed(self.cfg.seed, "finetune-ids"),
        )
    }

    fn pivot_dir(&self) -> PathBuf {
        self.root
            .join("pivots")
            .join(&self.cfg.dataset.id)
            .join(&inversion_hash(&self.cfg)[..16])
    }

    /// Pivots of `ids`, read from the cache or computed and stored.
    pub fn pivots(&self, ids: &[usize], workers: usize) -> Result<Vec<PivotState>> {
        let dir = self.pivot_dir();
        fs::create_dir_all(&dir).map_err(|e| AptError::io(&dir, e))?;
        let hash = inversion_hash(&self.cfg);
        let icfg = self.cfg.inversion_config();
        pool(workers)?.install(|| {
            ids.par_iter()
                .map(|&id| {
                    let path = dir.join(format!("{id:06}.safetensors"));
                    if path.exists() {
                        return load_pivot(&path, Some(&hash));
                    }
                    let mut p = invert(&self.perceptual, &self.gen, &self.image(id), ClassLabel(self.ds.labels[id]), &icfg)?;
                    p.image_id = Some(id);
                    save_pivot(&path, &p, &self.cfg.dataset.id, &hash)?;
                    Ok(p)
                })
                .collect()
        })
    }

    fn models<'a>(&'a self, target: &'a ClassifierHandle) -> AttackModels<'a> {
        AttackModels {
            gen: &self.gen,
            fx: &self.perceptual,
            target,
            discriminators: &self.disc,
            judges: self.classifiers.values().collect(),
        }
    }

    pub fn attack_config(&self, target: &str, mask: TermMask, seed: u64) -> Result<AttackConfig> {
        let mut c = self.cfg.attack_config(target, mask, seed)?;
        c.alpha = self.alpha;
        Ok(c)
    }
}

/// What a campaign attacks and how.
#[derive(Clone, Debug)]
pub struct CampaignSpec {
    pub id: String,
    pub kind: AttackKind,
    pub mask: TermMask,
    pub target: String,
    /// One campaign is produced per bound; bounds share trajectories.
    pub bounds: Vec<f64>,
    pub image_ids: Vec<usize>,
    /// Sample count of random-sample campaigns.
    pub samples: usize,
    pub seed: u64,
}

impl CampaignSpec {
    pub fn id_for(&self, d: f64) -> String {
        if self.bounds.len() == 1 {
            self.id.clone()
        } else {
            format!("{}-d{d}", self.id)
        }
    }
}

/// Run a campaign in memory; one result per bound.
pub fn run_campaign(bench: &Bench, spec: &CampaignSpec, workers: usize) -> Result<Vec<Campaign>> {
    let target = bench.classifier(&spec.target)?;
    if spec.target == bench.cfg.attack.oracle {
        return Err(AptError::Config("the oracle classifier cannot be attacked".into()));
    }
    let cfg = bench.attack_config(&spec.target, spec.mask, spec.seed)?;
    let digest_before = bench.gen.synthesis.digest();
    let models = bench.models(target);
    let bounds = if spec.kind == AttackKind::RandomSample { vec![cfg.d] } else { spec.bounds.clone() };
    let (kept, excluded, per_bound): (Vec<usize>, Vec<usize>, Vec<Vec<AttackRecord>>) = match spec.kind {
        AttackKind::RandomSample => {
            let k = bench.ds.config.num_classes();
            let recs: Vec<AttackRecord> = pool(workers)?.install(|| {
                (0..spec.samples)
                    .into_par_iter()
                    .map(|i| {
                        let mut rng = attack_rng(spec.seed, i as u64);
                        random_sample_attack(ClassLabel(i % k), &models, &cfg, &mut rng)
                    })
                    .collect::<Result<_>>()
            })?;
            (Vec::new(), Vec::new(), vec![recs])
        }
        kind => {
            let mut ids = spec.image_ids.clone();
            ids.sort_unstable();
            ids.dedup();
            let imgs: Vec<ImageTensor> = ids.iter().map(|&i| bench.image(i)).collect();
            let probs = target.classify_many(&imgs)?;
            let (mut kept, mut excluded) = (Vec::new(), Vec::new());
            for (&id, p) in ids.iter().zip(&probs) {
                if argmax(p) == bench.ds.labels[id] {
                    kept.push(id);
                } else {
                    excluded.push(id);
                }
            }
            let pivots = bench.pivots(&kept, workers)?;
            let per_image: Vec<Vec<AttackRecord>> = pool(workers)?.install(|| {
                kept.par_iter()
                    .zip(pivots.par_iter())
                    .map(|(&id, pivot)| {
                        let mut rng = attack_rng(spec.seed, id as u64);
                        let x = bench.image(id);
                        let c = ClassLabel(bench.ds.labels[id]);
                        match kind {
                            AttackKind::Apt => apt_attack_bounds(&x, Some(id), c, pivot, &models, &cfg, &bounds, &mut rng),
                            _ => latent_only_attack_bounds(&x, Some(id), c, pivot, &models, &cfg, &bounds, &mut rng),
                        }
                    })
                    .collect::<Result<_>>()
            })?;
            let mut per_bound = vec![Vec::with_capacity(kept.len()); bounds.len()];
            for recs in per_image {
                for (b, r) in recs.into_iter().enumerate() {
                    per_bound[b].push(r);
                }
            }
            (kept, excluded, per_bound)
        }
    };
    let digest_after = bench.gen.synthesis.digest();
    if digest_before != digest_after {
        return Err(AptError::Numerical("generator weights changed during a campaign".into()));
    }
    let _ = kept;
    Ok(bounds
        .iter()
        .zip(per_bound)
        .map(|(&d, records)| Campaign {
            header: CampaignHeader {
                id: spec.id_for(d),
                kind: spec.kind,
                mask: spec.mask,
                d: (spec.kind != AttackKind::RandomSample).then_some(d),
                target: spec.target.clone(),
                dataset_id: bench.cfg.dataset.id.clone(),
                config_hash: bench.cfg.hash(),
                seed: spec.seed,
                alpha: cfg.alpha,
                max_iters: cfg.max_iters,
                generator_digest: digest_before.clone(),
                requested: {
                    let mut r = spec.image_ids.clone();
                    r.sort_unstable();
                    r.dedup();
                    r
                },
                excluded: excluded.clone(),
            },
            records,
        })
        .collect())
}

/// Run and persist, or read back an existing campaign with the same id and config.
pub fn run_or_load(bench: &Bench, spec: &CampaignSpec, workers: usize, force: bool) -> Result<Vec<Campaign>> {
    let runs = bench.runs_dir();
    if !force {
        let existing: Vec<PathBuf> = spec.bounds.iter().map(|&d| campaign_dir(&runs, &spec.id_for(d))).collect();
        if existing.iter().all(|p| p.join(crate::artifacts::MANIFEST).exists()) {
            let loaded: Vec<Campaign> = existing.iter().map(|p| read_campaign(p)).collect::<Result<_>>()?;
            if loaded.iter().all(|c| c.header.config_hash == bench.cfg.hash()) {
                return Ok(loaded);
            }
            return Err(AptError::OutputExists(existing[0].clone()));
        }
    }
    let mut out = run_campaign(bench, spec, workers)?;
    for c in &mut out {
        write_campaign(&campaign_dir(&runs, &c.header.id), c, force)?;
    }
    Ok(out)
}

/// Per-campaign aggregates shared by the ablation and sweep reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub campaign: String,
    pub inputs: usize,
    pub emitted: usize,
    pub fooled: usize,
    pub fooling_rate: f64,
    pub mean_l_pt: Option<f64>,
    pub realness: Option<f64>,
    pub class_preservation: Option<f64>,
    pub mean_conf_before: Option<f64>,
    pub mean_conf_after: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Fooling counts an input only when its emitted image fools the target.
pub fn summarize(c: &Campaign, oracle: &ClassifierHandle) -> Result<Summary> {
    let t = &c.header.target;
    let fooled = c.emitted().filter(|r| r.fooled.get(t).copied().unwrap_or(false)).count();
    let emitted = c.emitted().count();
    let n = c.records.len();
    Ok(Summary {
        campaign: c.header.id.clone(),
        inputs: n,
        emitted,
        fooled,
        fooling_rate: if n == 0 { 0.0 } else { fooled as f64 / n as f64 },
        mean_l_pt: mean(c.emitted().filter_map(|r| r.l_pt_at_emission)),
        realness: mean(c.emitted().filter_map(|r| r.realness)),
        class_preservation: if emitted == 0 { None } else { Some(class_preservation_rate(&c.records, oracle)?) },
        mean_conf_before: mean(c.records.iter().filter_map(|r| r.conf_before)),
        mean_conf_after: mean(c.records.iter().map(|r| r.conf_after.or(r.conf_before).unwrap_or(f64::NAN)).filter(|v| v.is_finite())),
    })
}

pub const ABLATION_VARIANTS: [(&str, AttackKind, TermMask); 5] = [
    ("full", AttackKind::Apt, TermMask::ALL),
    ("no_rec", AttackKind::Apt, TermMask { rec: false, ce: true, pg: true }),
    ("no_ce", AttackKind::Apt, TermMask { rec: true, ce: false, pg: true }),
    ("no_pg", AttackKind::Apt, TermMask { rec: true, ce: true, pg: false }),
    ("latent_only", AttackKind::LatentOnly, TermMask::ALL),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub target: String,
    pub seed: u64,
    pub image_ids: Vec<usize>,
    pub variants: BTreeMap<String, Summary>,
}

pub fn campaign_id(bench: &Bench, what: &str, target: &str, seed: u64) -> String {
    format!("{what}-{target}-s{seed}-{}", bench.cfg.short_hash())
}

/// Every variant on the same inputs with the same seed.
pub fn ablate(
    bench: &Bench,
    target: &str,
    seed: u64,
    variants: &[&str],
    workers: usize,
    force: bool,
) -> Result<(AblationReport, BTreeMap<String, Campaign>)> {
    let ids = bench.attack_ids();
    let mut report = AblationReport {
        target: target.to_string(),
        seed,
        image_ids: ids.clone(),
        variants: BTreeMap::new(),
    };
    let mut campaigns = BTreeMap::new();
    for (name, kind, mask) in ABLATION_VARIANTS {
        if !variants.contains(&name) {
            continue;
        }
        let spec = CampaignSpec {
            id: campaign_id(bench, &format!("ablate-{name}"), target, seed),
            kind,
            mask,
            target: target.to_string(),
            bounds: vec![bench.cfg.attack.d],
            image_ids: ids.clone(),
            samples: 0,
            seed,
        };
        let c = run_or_load(bench, &spec, workers, force)?.remove(0);
        report.variants.insert(name.to_string(), summarize(&c, bench.oracle()?)?);
        campaigns.insert(name.to_string(), c);
    }
    let dir = bench.runs_dir().join(campaign_id(bench, "ablation", target, seed));
    write_json(&dir.join("report.json"), &report)?;
    Ok((report, campaigns))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: f64,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub target: String,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

/// Full attacks at several bounds, sharing one trajectory per image.
pub fn sweep_d(
    bench: &Bench,
    target: &str,
    seed: u64,
    bounds: &[f64],
    workers: usize,
    force: bool,
) -> Result<(SweepReport, Vec<Campaign>)> {
    let mut sorted = bounds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let spec = CampaignSpec {
        id: campaign_id(bench, "sweep", target, seed),
        kind: AttackKind::Apt,
        mask: TermMask::ALL,
        target: target.to_string(),
        bounds: sorted.clone(),
        image_ids: bench.attack_ids(),
        samples: 0,
        seed,
    };
    let campaigns = run_or_load(bench, &spec, workers, force)?;
    let oracle = bench.oracle()?;
    let rows = sorted
        .iter()
        .zip(&campaigns)
        .map(|(&d, c)| Ok(SweepRow { d, summary: summarize(c, oracle)? }))
        .collect::<Result<Vec<_>>>()?;
    let report = SweepReport {
        target: target.to_string(),
        seed,
        rows,
    };
    write_json(&bench.runs_dir().join(&spec.id).join("report.json"), &report)?;
    Ok((report, campaigns))
}

/// Evaluate a stored or fresh campaign and persist the report next to it.
pub fn evaluate(bench: &Bench, campaign: &Campaign) -> Result<EvalReport> {
    let zoo: Vec<&ClassifierHandle> = bench
        .cfg
        .zoo_ids()
        .iter()
        .map(|id| bench.classifier(id))
        .collect::<Result<_>>()?;
    let mut reference = data::sample_per_class(
        &bench.ds,
        SplitName::Val,
        bench.cfg.eval.fid_reference.div_ceil(bench.ds.config.num_classes()),
        derive_seed(bench.cfg.seed, "fid-reference"),
    );
    reference.truncate(bench.cfg.eval.fid_reference);
    let report = evaluate_campaign(
        &campaign.header.id,
        &bench.ds,
        &campaign.records,
        &campaign.header.target,
        &zoo,
        bench.oracle()?,
        &bench.perceptual,
        &reference,
    )?;
    write_json(&bench.runs_dir().join(&campaign.header.id).join("eval.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustifyReport {
    pub finetune_campaign: String,
    pub eval_campaign: String,
    pub checkpoint: String,
    pub finetune_images: usize,
    pub clean_test_accuracy: [f64; 2],
    pub paired: PairedReport,
    pub log: Vec<EpochLog>,
}

/// Attack training images, fine-tune the target on them, and compare both
/// classifiers on a held-out attack campaign over test images.
pub fn robustify(bench: &Bench, target: &str, seed: u64, workers: usize, force: bool) -> Result<RobustifyReport> {
    let eval_spec = CampaignSpec {
        id: campaign_id(bench, AttackKind::Apt.tag(), target, seed),
        kind: AttackKind::Apt,
        mask: TermMask::ALL,
        target: target.to_string(),
        bounds: vec![bench.cfg.attack.d],
        image_ids: bench.attack_ids(),
        samples: 0,
        seed,
    };
    let eval_campaign = run_or_load(bench, &eval_spec, workers, force)?.remove(0);
    robustify_with(bench, target, seed, &eval_campaign, workers, force)
}

/// As [`robustify`], with the held-out campaign supplied by the caller.
pub fn robustify_with(
    bench: &Bench,
    target: &str,
    seed: u64,
    eval_campaign: &Campaign,
    workers: usize,
    force: bool,
) -> Result<RobustifyReport> {
    let clf = bench.classifier(target)?;
    if eval_campaign.header.target != target {
        return Err(AptError::InvalidArgument(format!(
            "held-out campaign `{}` attacks `{}`, not `{target}`",
            eval_campaign.header.id, eval_campaign.header.target
        )));
    }
    let ft_spec = CampaignSpec {
        id: campaign_id(bench, "ftset", target, seed),
        kind: AttackKind::Apt,
        mask: TermMask::ALL,
        target: target.to_string(),
        bounds: vec![bench.cfg.attack.d],
        image_ids: bench.finetune_ids(),
        samples: 0,
        seed,
    };
    let ft_campaign = run_or_load(bench, &ft_spec, workers, force)?.remove(0);
    let set = build_finetune_set(&bench.ds, &ft_campaign.header.id, &ft_campaign.records)?;
    check_disjoint(&set.image_ids, &eval_campaign.image_ids())?;
    let trained = finetune(clf, &bench.ds, &set, &bench.cfg.finetune_config(derive_seed(seed, "finetune")))?;
    let path = store::classifier_path(&bench.root, &bench.cfg.dataset.id, &trained.model.id);
    let prov = Provenance {
        dataset_id: bench.cfg.dataset.id.clone(),
        config_hash: pretrain_hash(&bench.cfg),
        seed,
    };
    store::save_classifier(
        &path,
        &trained.model,
        &prov,
        [
            ("finetune_campaign".to_string(), serde_json::json!(ft_campaign.header.id)),
            ("test_accuracy".to_string(), serde_json::json!(trained.test_accuracy)),
        ],
    )?;
    let (ax, ay) = attacked_set(&eval_campaign.records, Some(&bench.ds))?;
    let test = bench.ds.splits.get(SplitName::Test);
    let cx: Vec<ImageTensor> = test.iter().map(|&i| bench.image(i)).collect();
    let cy: Vec<usize> = test.iter().map(|&i| bench.ds.labels[i]).collect();
    let paired = before_after_eval(clf, &trained.model, (&ax, &ay), (&cx, &cy))?;
    let report = RobustifyReport {
        finetune_campaign: ft_campaign.header.id.clone(),
        eval_campaign: eval_campaign.header.id.clone(),
        checkpoint: finetuned_id(target, &ft_campaign.header.id),
        finetune_images: set.len(),
        clean_test_accuracy: [paired.clean[0].acc, paired.clean[1].acc],
        paired,
        log: trained.log,
    };
    write_json(&bench.runs_dir().join(&report.checkpoint).join("paired_report.json"), &report)?;
    Ok(report)
}
