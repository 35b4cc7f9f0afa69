#![allow(dead_code)]

use std::path::{Path, PathBuf};

use aptbench::attack::AttackModels;
use aptbench::autograd::Tape;
use aptbench::config::RunConfig;
use aptbench::data;
use aptbench::losses::{AptObjective, LocalityInputs};
use aptbench::models::{
    ClassLabel, ClassifierArch, ClassifierHandle, DiscriminatorArch, DiscriminatorSet, Generator, GeneratorArch,
    ImageTensor, ModelConfig, NoiseMaps, PerceptualArch, PerceptualNet, Preprocess, StyleCode,
};
use aptbench::nn::ParamSet;
use aptbench::pipeline::{pretrain_all, Bench};
use aptbench::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/tiny.toml");

/// Randomly initialized networks around a 4x4 generator with three classes.
pub struct Micro {
    pub gen: Generator,
    pub fx: PerceptualNet,
    pub clf: ClassifierHandle,
    pub disc: DiscriminatorSet,
}

pub fn micro(seed: u64) -> Micro {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        z_dim: 3,
        style_dim: 4,
        mapping_hidden: 6,
        gen_base_channels: 8,
        disc_channels: 4,
        disc_scales: 1,
        perceptual_channels: [3, 4, 4],
    };
    let (size, k) = (4, 3);
    let gen = Generator::init(GeneratorArch::new(&cfg, size, 1, k), &mut rng);
    let fx = PerceptualNet::init(
        PerceptualArch {
            image_size: size,
            channels: 1,
            num_classes: k,
            block_channels: cfg.perceptual_channels,
        },
        &mut rng,
    );
    let clf = ClassifierHandle::init(
        "micro",
        ClassifierArch::Mlp,
        k,
        1,
        Preprocess::new(size, vec![0.0], vec![1.0]),
        &mut rng,
    );
    let disc = DiscriminatorSet::init(DiscriminatorArch::new(&cfg, size, 1, k), &mut rng);
    Micro { gen, fx, clf, disc }
}

pub fn random_image(shape: &[usize], rng: &mut ChaCha8Rng) -> ImageTensor {
    use rand::Rng;
    ImageTensor(Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)))
}

/// Total objective and its gradient with respect to every synthesis parameter.
pub fn objective_and_grad(
    obj: &AptObjective<'_, PerceptualNet>,
    theta: &ParamSet,
    x: &ImageTensor,
    w_p: &StyleCode,
    n: &NoiseMaps,
    loc: &LocalityInputs,
    c_any: ClassLabel,
    with_grad: bool,
) -> (f64, Option<std::collections::BTreeMap<String, Tensor>>) {
    let mut tape = Tape::new();
    let th = theta.bind(&mut tape, with_grad);
    let styles = obj.gen.style_vars(&mut tape, w_p, false);
    let noise = obj.gen.noise_vars(&mut tape, n, false);
    let g = obj.build_on(&mut tape, &th, x, &styles, &noise, Some(loc), c_any).unwrap();
    let v = tape.scalar(g.total);
    if !with_grad {
        return (v, None);
    }
    let mut gr = tape.backward(g.total);
    (v, Some(th.grads(&tape, &mut gr)))
}

pub fn models<'a>(b: &'a Bench, target: &'a ClassifierHandle) -> AttackModels<'a> {
    AttackModels {
        gen: &b.gen,
        fx: &b.perceptual,
        target,
        discriminators: &b.disc,
        judges: b.classifiers.values().collect(),
    }
}

/// A trained fixture under the test target directory, built once per config.
pub fn fixture(config: &str, name: &str) -> (PathBuf, RunConfig) {
    let cfg = RunConfig::load(Path::new(config)).unwrap();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    data::ingest(&cfg.dataset, &root, false).unwrap();
    pretrain_all(&root, &cfg, false).unwrap();
    (root, cfg)
}
