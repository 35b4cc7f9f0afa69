//! Frozen convolutional feature stack used for perceptual distance and FID.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::autograd::{Tape, Var};
use crate::nn::{init_weight, Bound, ParamSet};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;

/// Anything that maps an `[N, C, H, W]` batch to a list of tap feature maps.
pub trait FeatureExtractor {
    fn taps_on(&self, tape: &mut Tape, x: Var) -> Vec<Var>;
}

/// The input itself as the only tap.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityTap;

impl FeatureExtractor for IdentityTap {
    fn taps_on(&self, _tape: &mut Tape, x: Var) -> Vec<Var> {
        vec![x]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptualArch {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub block_channels: [usize; 3],
}

impl PerceptualArch {
    /// `(channels, side)` of each tap.
    pub fn tap_shapes(&self) -> Vec<(usize, usize)> {
        (0..3)
            .map(|b| (self.block_channels[b], self.image_size >> b))
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.block_channels[2]
    }
}

#[derive(Clone, Debug)]
pub struct PerceptualNet {
    pub arch: PerceptualArch,
    pub params: ParamSet,
}

impl PerceptualNet {
    pub fn init(arch: PerceptualArch, rng: &mut impl Rng) -> Self {
        let mut p = ParamSet::new();
        let mut cin = arch.channels;
        for (b, &co) in arch.block_channels.iter().enumerate() {
            p.insert(format!("conv{b}.weight"), init_weight(&[co, cin, 3, 3], cin * 9, 2f64.sqrt(), rng));
            p.insert(format!("conv{b}.bias"), Tensor::zeros(&[co]));
            cin = co;
        }
        let f = arch.feature_dim();
        p.insert("head.weight", init_weight(&[arch.num_classes, f], f, 1.0, rng));
        p.insert("head.bias", Tensor::zeros(&[arch.num_classes]));
        Self { arch, params: p }
    }

    fn taps_bound(&self, tape: &mut Tape, bp: &Bound, x: Var) -> Vec<Var> {
        let mut taps = Vec::with_capacity(3);
        let mut h = x;
        for b in 0..3 {
            if b > 0 {
                h = tape.avg_pool2x(h);
            }
            h = tape.conv2d(
                h,
                bp.var(&format!("conv{b}.weight")),
                Some(bp.var(&format!("conv{b}.bias"))),
            );
            h = tape.leaky_relu(h, LRELU);
            taps.push(h);
        }
        taps
    }

    /// `(penultimate features [N, F], logits [N, K])` with bound parameters.
    pub fn head_on(&self, tape: &mut Tape, bp: &Bound, x: Var) -> (Var, Var) {
        let taps = self.taps_bound(tape, bp, x);
        let feat = tape.global_avg_pool(taps[2]);
        let logits = tape.linear(feat, bp.var("head.weight"), Some(bp.var("head.bias")));
        (feat, logits)
    }

    /// Tap feature maps of one image, forward only.
    pub fn embed(&self, x: &ImageTensor) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.batched());
        let taps = self.taps_on(&mut tape, xv);
        taps.into_iter().map(|t| tape.value(t).index0(0)).collect()
    }

    /// Penultimate features for a batch `[N, C, H, W]`.
    pub fn features(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (feat, _) = self.head_on(&mut tape, &bp, xv);
        let f = self.arch.feature_dim();
        tape.value(feat).data().chunks(f).map(<[f64]>::to_vec).collect()
    }

    pub fn features_many(&self, xs: &[ImageTensor]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(64) {
            let imgs: Vec<Tensor> = chunk.iter().map(|x| x.0.clone()).collect();
            out.extend(self.features(&Tensor::stack(&imgs)));
        }
        out
    }
}

impl FeatureExtractor for PerceptualNet {
    fn taps_on(&self, tape: &mut Tape, x: Var) -> Vec<Var> {
        let bp = self.params.bind(tape, false);
        self.taps_bound(tape, &bp, x)
    }
}
