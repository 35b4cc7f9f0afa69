//! On-disk layout and typed checkpoint wrappers for every model kind.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AptError, Result};
use crate::models::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ClassifierArch, ClassifierHandle,
    DiscriminatorArch, DiscriminatorSet, Generator, GeneratorArch, GeneratorWeights, PerceptualArch, PerceptualNet,
    Preprocess,
};
use crate::nn::ParamSet;

pub fn models_dir(root: &Path, dataset_id: &str) -> PathBuf {
    root.join("models").join(dataset_id)
}

pub fn gan_path(root: &Path, dataset_id: &str) -> PathBuf {
    models_dir(root, dataset_id).join("gan.safetensors")
}

pub fn perceptual_path(root: &Path, dataset_id: &str) -> PathBuf {
    models_dir(root, dataset_id).join("perceptual.safetensors")
}

pub fn classifier_path(root: &Path, dataset_id: &str, id: &str) -> PathBuf {
    models_dir(root, dataset_id).join(format!("classifier-{id}.safetensors"))
}

pub fn runs_dir(root: &Path) -> PathBuf {
    root.join("runs")
}

/// Identity stamped on every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
}

fn meta(kind: &str, p: &Provenance, arch: serde_json::Value) -> CheckpointMeta {
    CheckpointMeta::new(kind, &p.dataset_id, &p.config_hash, p.seed, arch)
}

fn expect_kind(path: &Path, m: &CheckpointMeta, kind: &str) -> Result<()> {
    if m.kind != kind {
        return Err(AptError::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a `{kind}` checkpoint, found `{}`", m.kind),
        });
    }
    Ok(())
}

fn arch_of<T: for<'de> Deserialize<'de>>(path: &Path, m: &CheckpointMeta) -> Result<T> {
    serde_json::from_value(m.arch.clone()).map_err(|e| AptError::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad architecture block: {e}"),
    })
}

/// Reports a missing file as a missing prerequisite of `command`.
fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(AptError::MissingPrerequisite {
            what: format!("{what} ({})", path.display()),
            command: command.to_string(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GanArch {
    generator: GeneratorArch,
    discriminator: DiscriminatorArch,
}

pub fn save_gan(
    path: &Path,
    gen: &Generator,
    disc: &DiscriminatorSet,
    prov: &Provenance,
    extra: impl IntoIterator<Item = (String, serde_json::Value)>,
) -> Result<()> {
    let mut params = ParamSet::new();
    params.extend_scoped("mapping", &gen.mapping);
    params.extend_scoped("synthesis", &gen.synthesis.params);
    params.extend_scoped("disc", &disc.params);
    let arch = serde_json::to_value(GanArch {
        generator: gen.arch.clone(),
        discriminator: disc.arch.clone(),
    })?;
    let mut m = meta("gan", prov, arch);
    m.extra.extend(extra);
    save_checkpoint(path, &Checkpoint { meta: m, params })
}

pub fn load_gan(path: &Path, expected_hash: Option<&str>) -> Result<(Generator, DiscriminatorSet, CheckpointMeta)> {
    require(path, "GAN checkpoint", "pretrain")?;
    let ck = load_checkpoint(path, expected_hash)?;
    expect_kind(path, &ck.meta, "gan")?;
    let a: GanArch = arch_of(path, &ck.meta)?;
    let gen = Generator {
        arch: a.generator,
        mapping: ck.params.scoped("mapping"),
        synthesis: GeneratorWeights {
            params: ck.params.scoped("synthesis"),
        },
    };
    let disc = DiscriminatorSet {
        arch: a.discriminator,
        params: ck.params.scoped("disc"),
    };
    Ok((gen, disc, ck.meta))
}

#[derive(Serialize, Deserialize)]
struct ClassifierArchBlock {
    id: String,
    arch: ClassifierArch,
    num_classes: usize,
    channels: usize,
    preprocess: Preprocess,
}

pub fn save_classifier(
    path: &Path,
    clf: &ClassifierHandle,
    prov: &Provenance,
    extra: impl IntoIterator<Item = (String, serde_json::Value)>,
) -> Result<()> {
    let arch = serde_json::to_value(ClassifierArchBlock {
        id: clf.id.clone(),
        arch: clf.arch,
        num_classes: clf.num_classes,
        channels: clf.channels,
        preprocess: clf.preprocess.clone(),
    })?;
    let mut m = meta("classifier", prov, arch);
    m.extra.extend(extra);
    save_checkpoint(
        path,
        &Checkpoint {
            meta: m,
            params: clf.weights()?.clone(),
        },
    )
}

pub fn load_classifier(path: &Path, expected_hash: Option<&str>) -> Result<(ClassifierHandle, CheckpointMeta)> {
    require(path, "classifier checkpoint", "pretrain")?;
    let ck = load_checkpoint(path, expected_hash)?;
    expect_kind(path, &ck.meta, "classifier")?;
    let a: ClassifierArchBlock = arch_of(path, &ck.meta)?;
    let h = ClassifierHandle::unloaded(&a.id, a.arch, a.num_classes, a.channels, a.preprocess).with_weights(ck.params);
    Ok((h, ck.meta))
}

pub fn save_perceptual(
    path: &Path,
    net: &PerceptualNet,
    prov: &Provenance,
    extra: impl IntoIterator<Item = (String, serde_json::Value)>,
) -> Result<()> {
    let mut arch = serde_json::to_value(&net.arch)?;
    arch["tap_shapes"] = serde_json::to_value(net.arch.tap_shapes())?;
    let mut m = meta("perceptual", prov, arch);
    m.extra.extend(extra);
    save_checkpoint(
        path,
        &Checkpoint {
            meta: m,
            params: net.params.clone(),
        },
    )
}

pub fn load_perceptual(path: &Path, expected_hash: Option<&str>) -> Result<(PerceptualNet, CheckpointMeta)> {
    require(path, "perceptual network checkpoint", "pretrain")?;
    let ck = load_checkpoint(path, expected_hash)?;
    expect_kind(path, &ck.meta, "perceptual")?;
    let mut arch_json = ck.meta.arch.clone();
    if let Some(o) = arch_json.as_object_mut() {
        o.remove("tap_shapes");
    }
    let arch: PerceptualArch = serde_json::from_value(arch_json).map_err(|e| AptError::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad architecture block: {e}"),
    })?;
    Ok((
        PerceptualNet {
            arch,
            params: ck.params,
        },
        ck.meta,
    ))
}
