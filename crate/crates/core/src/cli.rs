//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::artifacts::{campaign_dir, read_campaign, Campaign};
use crate::attack::AttackKind;
use crate::config::RunConfig;
use crate::data::{self, IngestOutcome};
use crate::error::{AptError, Result};
use crate::losses::TermMask;
use crate::pipeline::{self, Bench, CampaignSpec, ABLATION_VARIANTS};
use crate::report;

pub const HOME_VAR: &str = "APTBENCH_HOME";

#[derive(Debug, Parser)]
#[command(name = "aptbench", version, about = "Generator-tuning attacks on small image classifiers")]
pub struct Cli {
    /// Run configuration (TOML). Defaults to the built-in configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for inversion and attacks.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Apt,
    LatentOnly,
    RandomSample,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Apt => AttackKind::Apt,
            KindArg::LatentOnly => AttackKind::LatentOnly,
            KindArg::RandomSample => AttackKind::RandomSample,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset and its split manifest.
    Ingest,
    /// Train the classifiers, perceptual network and GAN.
    Pretrain,
    /// Invert the attack images and cache their pivots.
    Invert {
        /// Invert the fine-tuning images as well.
        #[arg(long)]
        with_train: bool,
    },
    /// Run an attack campaign.
    Attack {
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_enum, default_value = "apt")]
        kind: KindArg,
        /// Override the distance bound.
        #[arg(long)]
        d: Option<f64>,
        /// Number of images for random-sample campaigns.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        no_rec: bool,
        #[arg(long)]
        no_ce: bool,
        #[arg(long)]
        no_pg: bool,
    },
    /// Evaluate a stored campaign.
    Eval { campaign: String },
    /// Fine-tune the target on attacks against training images and compare on a held-out campaign.
    Finetune {
        #[arg(long)]
        target: Option<String>,
    },
    /// Run every objective variant on a shared image set.
    Ablate {
        #[arg(long)]
        target: Option<String>,
    },
    /// Full attacks at several distance bounds.
    SweepD {
        #[arg(long)]
        target: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Render tables and plots for stored runs.
    Report {
        #[arg(required = true)]
        runs: Vec<String>,
    },
}

/// Output root: `APTBENCH_HOME` or the current directory.
pub fn home() -> PathBuf {
    std::env::var_os(HOME_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn campaign_line(c: &Campaign, runs: &Path) -> String {
    let fooled = c
        .emitted()
        .filter(|r| r.fooled.get(&c.header.target).copied().unwrap_or(false))
        .count();
    format!(
        "attack {}: {} inputs, {} excluded, {} emitted, {} fooled -> {}",
        c.header.id,
        c.records.len(),
        c.header.excluded.len(),
        c.emitted().count(),
        fooled,
        campaign_dir(runs, &c.header.id).display()
    )
}

fn grid_originals(bench: &Bench, ids: &[usize]) -> Vec<(usize, crate::models::ImageTensor)> {
    ids.iter().take(8).map(|&i| (i, bench.image(i))).collect()
}

/// Execute one command; the returned lines go to stdout.
pub fn run(cli: &Cli, root: &Path) -> Result<Vec<String>> {
    let cfg = resolve_config(cli)?;
    if cli.workers == 0 {
        return Err(AptError::Config("--workers must be at least 1".into()));
    }
    let runs = crate::store::runs_dir(root);
    let target_of = |t: &Option<String>| t.clone().unwrap_or_else(|| cfg.attack.target.clone());
    match &cli.command {
        Command::Ingest => {
            let outcome = data::ingest(&cfg.dataset, root, cli.force)?;
            let ds = data::load(root, &cfg.dataset.id)?;
            let state = match outcome {
                IngestOutcome::Created => "created",
                IngestOutcome::AlreadyPresent => "verified",
            };
            Ok(vec![format!(
                "ingest {}: {state}, {} images at {}",
                cfg.dataset.id,
                ds.len(),
                data::dataset_dir(root, &cfg.dataset.id).display()
            )])
        }
        Command::Pretrain => {
            let out = pipeline::pretrain_all(root, &cfg, cli.force)?;
            Ok(out
                .iter()
                .map(|s| match (s.skipped, s.test_accuracy) {
                    (true, _) => format!("pretrain {}: up to date", s.model),
                    (false, Some(a)) => format!("pretrain {}: {} epochs, test accuracy {a:.4}", s.model, s.log.len()),
                    (false, None) => format!("pretrain {}: {} epochs", s.model, s.log.len()),
                })
                .collect())
        }
        Command::Invert { with_train } => {
            let bench = Bench::load(root, &cfg)?;
            let mut ids = bench.attack_ids();
            if *with_train {
                ids.extend(bench.finetune_ids());
            }
            let pivots = bench.pivots(&ids, cli.workers)?;
            let mean = pivots.iter().map(|p| p.final_loss).sum::<f64>() / pivots.len().max(1) as f64;
            Ok(vec![format!("invert: {} pivots, mean final loss {mean:.5}", pivots.len())])
        }
        Command::Attack {
            target,
            kind,
            d,
            samples,
            no_rec,
            no_ce,
            no_pg,
        } => {
            let bench = Bench::load(root, &cfg)?;
            let target = target_of(target);
            let mask = TermMask {
                rec: !no_rec,
                ce: !no_ce,
                pg: !no_pg,
            };
            let kind: AttackKind = (*kind).into();
            let d = d.unwrap_or(cfg.attack.d);
            let mut tag = kind.tag().to_string();
            for (off, name) in [(*no_rec, "norec"), (*no_ce, "noce"), (*no_pg, "nopg")] {
                if off {
                    tag.push('-');
                    tag.push_str(name);
                }
            }
            if d != cfg.attack.d {
                tag.push_str(&format!("-d{d}"));
            }
            let spec = CampaignSpec {
                id: pipeline::campaign_id(&bench, &tag, &target, cfg.seed),
                kind,
                mask,
                target,
                bounds: vec![d],
                image_ids: bench.attack_ids(),
                samples: *samples,
                seed: cfg.seed,
            };
            let cs = pipeline::run_or_load(&bench, &spec, cli.workers, cli.force)?;
            Ok(cs.iter().map(|c| campaign_line(c, &runs)).collect())
        }
        Command::Eval { campaign } => {
            let dir = campaign_dir(&runs, campaign);
            let c = read_campaign(&dir)?;
            let bench = Bench::load(root, &cfg)?;
            if c.records.is_empty() {
                return Ok(vec![format!("eval {campaign}: empty")]);
            }
            let r = pipeline::evaluate(&bench, &c)?;
            let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            Ok(vec![format!(
                "eval {campaign}: target {} accuracy {} -> {}, fid {}, preserved {}, report {}",
                r.target,
                show(r.real.get(&r.target).map(|s| s.acc)),
                show(r.attacked.get(&r.target).map(|s| s.acc)),
                show(r.fid.get("reference_vs_attacked").copied()),
                show(r.class_preservation),
                dir.join("eval.json").display()
            )])
        }
        Command::Finetune { target } => {
            let bench = Bench::load(root, &cfg)?;
            let r = pipeline::robustify(&bench, &target_of(target), cfg.seed, cli.workers, cli.force)?;
            let p = &r.paired;
            Ok(vec![format!(
                "finetune {}: attack accuracy {:.4} -> {:.4}, clean accuracy {:.4} -> {:.4}, {} images",
                r.checkpoint, p.attack[0].acc, p.attack[1].acc, p.clean[0].acc, p.clean[1].acc, r.finetune_images
            )])
        }
        Command::Ablate { target } => {
            let bench = Bench::load(root, &cfg)?;
            let target = target_of(target);
            let names: Vec<&str> = ABLATION_VARIANTS.iter().map(|v| v.0).collect();
            let (rep, cs) = pipeline::ablate(&bench, &target, cfg.seed, &names, cli.workers, cli.force)?;
            let dir = runs.join(pipeline::campaign_id(&bench, "ablation", &target, cfg.seed));
            let cols: Vec<&Campaign> = names.iter().filter_map(|n| cs.get(*n)).collect();
            report::comparison_grid(&dir.join("grid.png"), &grid_originals(&bench, &rep.image_ids), &cols)?;
            let mut out: Vec<String> = rep
                .variants
                .iter()
                .map(|(k, s)| format!("ablate {k}: fooling {:.4}, realness {}", s.fooling_rate, s.realness.map_or("-".into(), |v| format!("{v:.4}"))))
                .collect();
            out.push(format!("ablate: report {}", dir.join("report.json").display()));
            Ok(out)
        }
        Command::SweepD { target, values } => {
            let bench = Bench::load(root, &cfg)?;
            let target = target_of(target);
            let values = values.clone().unwrap_or_else(|| cfg.sweep.d_values.clone());
            let (rep, cs) = pipeline::sweep_d(&bench, &target, cfg.seed, &values, cli.workers, cli.force)?;
            let dir = runs.join(pipeline::campaign_id(&bench, "sweep", &target, cfg.seed));
            let cols: Vec<&Campaign> = cs.iter().collect();
            let ids = cs.first().map(|c| c.image_ids()).unwrap_or_default();
            report::comparison_grid(&dir.join("grid.png"), &grid_originals(&bench, &ids), &cols)?;
            let mut out: Vec<String> = rep
                .rows
                .iter()
                .map(|r| format!("sweep d={}: fooling {:.4}, emitted {}", r.d, r.summary.fooling_rate, r.summary.emitted))
                .collect();
            out.push(format!("sweep-d: report {}", dir.join("report.json").display()));
            Ok(out)
        }
        Command::Report { runs: ids } => {
            let mut out = Vec::new();
            for id in ids {
                for p in report::render_run(&runs, id)? {
                    out.push(p.display().to_string());
                }
            }
            Ok(out)
        }
    }
}

/// Exit status for a result: 0 success, 1 validation error, 2 runtime fault.
pub fn exit_code(r: &Result<Vec<String>>) -> i32 {
    match r {
        Ok(_) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}
