//! Target-classifier zoo with built-in crop and normalization.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{crop_size, ImageTensor};
use crate::autograd::{Tape, Var};
use crate::error::{AptError, Result};
use crate::nn::{init_weight, Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierArch {
    /// Two conv blocks and a dense head.
    Conv,
    /// Three dense layers on raw pixels.
    Mlp,
    /// Four conv layers; used for the held-out oracle.
    Deepconv,
}

impl ClassifierArch {
    pub fn tag(&self) -> &'static str {
        match self {
            ClassifierArch::Conv => "conv",
            ClassifierArch::Mlp => "mlp",
            ClassifierArch::Deepconv => "deepconv",
        }
    }
}

impl FromStr for ClassifierArch {
    type Err = AptError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(ClassifierArch::Conv),
            "mlp" => Ok(ClassifierArch::Mlp),
            "deepconv" => Ok(ClassifierArch::Deepconv),
            other => Err(AptError::InvalidArgument(format!(
                "unknown classifier architecture `{other}` (expected conv, mlp or deepconv)"
            ))),
        }
    }
}

/// Center crop followed by `(x01 - mean) / std` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub crop: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Preprocess {
    pub fn new(image_size: usize, mean: Vec<f64>, std: Vec<f64>) -> Self {
        Self {
            crop: crop_size(image_size),
            mean,
            std,
        }
    }

    pub fn apply_on(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.value(x).shape()[0];
        let cropped = tape.center_crop(x, self.crop);
        let c = self.mean.len();
        let scale: Vec<f64> = self.std.iter().map(|s| 0.5 / s).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&self.std).map(|(m, s)| (0.5 - m) / s).collect();
        let mut sd = Vec::with_capacity(n * c);
        for _ in 0..n {
            sd.extend_from_slice(&scale);
        }
        let sv = tape.constant(Tensor::new(vec![n, c], sd));
        let bv = tape.constant(Tensor::new(vec![c], shift));
        let scaled = tape.channel_scale(cropped, sv);
        tape.channel_bias(scaled, bv)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierHandle {
    pub id: String,
    pub arch: ClassifierArch,
    pub num_classes: usize,
    pub channels: usize,
    pub preprocess: Preprocess,
    weights: Option<ParamSet>,
}

fn conv_block(p: &mut ParamSet, name: &str, ci: usize, co: usize, rng: &mut impl Rng) {
    p.insert(format!("{name}.weight"), init_weight(&[co, ci, 3, 3], ci * 9, 2f64.sqrt(), rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
}

fn dense(p: &mut ParamSet, name: &str, i: usize, o: usize, gain: f64, rng: &mut impl Rng) {
    p.insert(format!("{name}.weight"), init_weight(&[o, i], i, gain, rng));
    p.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
}

impl ClassifierHandle {
    /// A handle with no weights; classification fails until weights are set.
    pub fn unloaded(id: &str, arch: ClassifierArch, num_classes: usize, channels: usize, preprocess: Preprocess) -> Self {
        Self {
            id: id.to_string(),
            arch,
            num_classes,
            channels,
            preprocess,
            weights: None,
        }
    }

    pub fn init(
        id: &str,
        arch: ClassifierArch,
        num_classes: usize,
        channels: usize,
        preprocess: Preprocess,
        rng: &mut impl Rng,
    ) -> Self {
        let mut h = Self::unloaded(id, arch, num_classes, channels, preprocess);
        let crop = h.preprocess.crop;
        let k = num_classes;
        let mut p = ParamSet::new();
        match arch {
            ClassifierArch::Conv => {
                conv_block(&mut p, "conv0", channels, 16, rng);
                conv_block(&mut p, "conv1", 16, 32, rng);
                dense(&mut p, "fc0", 32 * (crop / 2) * (crop / 2), 64, 2f64.sqrt(), rng);
                dense(&mut p, "fc1", 64, k, 1.0, rng);
            }
            ClassifierArch::Mlp => {
                dense(&mut p, "fc0", channels * crop * crop, 128, 2f64.sqrt(), rng);
                dense(&mut p, "fc1", 128, 64, 2f64.sqrt(), rng);
                dense(&mut p, "fc2", 64, k, 1.0, rng);
            }
            ClassifierArch::Deepconv => {
                conv_block(&mut p, "conv0", channels, 16, rng);
                conv_block(&mut p, "conv1", 16, 16, rng);
                conv_block(&mut p, "conv2", 16, 32, rng);
                conv_block(&mut p, "conv3", 32, 32, rng);
                dense(&mut p, "fc0", 32 * (crop / 2) * (crop / 2), 64, 2f64.sqrt(), rng);
                dense(&mut p, "fc1", 64, k, 1.0, rng);
            }
        }
        h.weights = Some(p);
        h
    }

    pub fn with_weights(mut self, weights: ParamSet) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn is_loaded(&self) -> bool {
        self.weights.is_some()
    }

    pub fn weights(&self) -> Result<&ParamSet> {
        self.weights
            .as_ref()
            .ok_or_else(|| AptError::InvalidArgument(format!("classifier `{}` has no weights loaded", self.id)))
    }

    pub fn weights_mut(&mut self) -> Result<&mut ParamSet> {
        let id = self.id.clone();
        self.weights
            .as_mut()
            .ok_or_else(|| AptError::InvalidArgument(format!("classifier `{id}` has no weights loaded")))
    }

    /// Logits `[N, K]` for raw generator-range images `[N, C, H, W]`.
    pub fn logits_on(&self, tape: &mut Tape, bp: &Bound, x: Var) -> Var {
        let h = self.preprocess.apply_on(tape, x);
        let conv = |tape: &mut Tape, h: Var, name: &str| {
            let y = tape.conv2d(h, bp.var(&format!("{name}.weight")), Some(bp.var(&format!("{name}.bias"))));
            tape.relu(y)
        };
        let fc = |tape: &mut Tape, h: Var, name: &str| {
            tape.linear(h, bp.var(&format!("{name}.weight")), Some(bp.var(&format!("{name}.bias"))))
        };
        let flatten = |tape: &mut Tape, h: Var| {
            let s = tape.value(h).shape().to_vec();
            let inner = s[1..].iter().product();
            tape.reshape(h, &[s[0], inner])
        };
        match self.arch {
            ClassifierArch::Conv => {
                let h = conv(tape, h, "conv0");
                let h = tape.avg_pool2x(h);
                let h = conv(tape, h, "conv1");
                let h = flatten(tape, h);
                let h = fc(tape, h, "fc0");
                let h = tape.relu(h);
                fc(tape, h, "fc1")
            }
            ClassifierArch::Mlp => {
                let h = flatten(tape, h);
                let h = fc(tape, h, "fc0");
                let h = tape.relu(h);
                let h = fc(tape, h, "fc1");
                let h = tape.relu(h);
                fc(tape, h, "fc2")
            }
            ClassifierArch::Deepconv => {
                let h = conv(tape, h, "conv0");
                let h = conv(tape, h, "conv1");
                let h = tape.avg_pool2x(h);
                let h = conv(tape, h, "conv2");
                let h = conv(tape, h, "conv3");
                let h = flatten(tape, h);
                let h = fc(tape, h, "fc0");
                let h = tape.relu(h);
                fc(tape, h, "fc1")
            }
        }
    }

    /// Softmax probabilities for a batch `[N, C, H, W]`.
    pub fn probs_batch(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let w = self.weights()?;
        let mut tape = Tape::new();
        let bp = w.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = self.logits_on(&mut tape, &bp, xv);
        let lp = tape.log_softmax(logits);
        let k = self.num_classes;
        Ok(tape
            .value(lp)
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|v| v.exp()).collect())
            .collect())
    }

    pub fn classify(&self, x: &ImageTensor) -> Result<Vec<f64>> {
        if x.0.shape()[0] != self.channels {
            return Err(AptError::Shape(format!(
                "classifier `{}` expects {} channels",
                self.id, self.channels
            )));
        }
        Ok(self.probs_batch(&x.batched())?.remove(0))
    }

    /// Probabilities for many images, evaluated in chunks.
    pub fn classify_many(&self, xs: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(64) {
            let imgs: Vec<Tensor> = chunk.iter().map(|x| x.0.clone()).collect();
            out.extend(self.probs_batch(&Tensor::stack(&imgs))?);
        }
        Ok(out)
    }
}

/// Lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}
