//! Multi-scale discriminators with a realness head and an auxiliary class head.
//!
//! Scale `l` sees the image average-pooled `l` times.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageTensor, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::nn::{init_weight, Bound, ParamSet};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;
const HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub scales: usize,
}

impl DiscriminatorArch {
    pub fn new(cfg: &ModelConfig, image_size: usize, channels: usize, num_classes: usize) -> Self {
        Self {
            image_size,
            channels,
            num_classes,
            base_channels: cfg.disc_channels,
            scales: cfg.disc_scales,
        }
    }

    /// `(in, out)` channels of each conv block of scale `l`.
    fn blocks(&self, l: usize) -> Vec<(usize, usize)> {
        let mut res = self.image_size >> l;
        let mut cin = self.channels;
        let mut cout = self.base_channels;
        let mut out = Vec::new();
        while res > 4 {
            out.push((cin, cout));
            cin = cout;
            cout = (cout * 2).min(self.base_channels * 4);
            res /= 2;
        }
        out.push((cin, cin));
        out
    }

    fn init_scale(&self, l: usize, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let blocks = self.blocks(l);
        for (b, &(ci, co)) in blocks.iter().enumerate() {
            p.insert(format!("conv{b}.weight"), init_weight(&[co, ci, 3, 3], ci * 9, 2f64.sqrt(), rng));
            p.insert(format!("conv{b}.bias"), Tensor::zeros(&[co]));
        }
        let flat = blocks.last().unwrap().1 * 16;
        p.insert("fc.weight", init_weight(&[HIDDEN, flat], flat, 2f64.sqrt(), rng));
        p.insert("fc.bias", Tensor::zeros(&[HIDDEN]));
        p.insert("real.weight", init_weight(&[1, HIDDEN], HIDDEN, 1.0, rng));
        p.insert("real.bias", Tensor::zeros(&[1]));
        p.insert("cls.weight", init_weight(&[self.num_classes, HIDDEN], HIDDEN, 1.0, rng));
        p.insert("cls.bias", Tensor::zeros(&[self.num_classes]));
        p
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        for l in 0..self.scales {
            p.extend_scoped(&format!("d{l}"), &self.init_scale(l, rng));
        }
        p
    }

    fn scale_on(&self, tape: &mut Tape, bp: &Bound, l: usize, x: Var) -> (Var, Var) {
        let blocks = self.blocks(l);
        let mut h = x;
        for b in 0..blocks.len() {
            h = tape.conv2d(
                h,
                bp.var(&format!("conv{b}.weight")),
                Some(bp.var(&format!("conv{b}.bias"))),
            );
            h = tape.leaky_relu(h, LRELU);
            if b + 1 < blocks.len() {
                h = tape.avg_pool2x(h);
            }
        }
        let (n, c, hh, ww) = tape.value(h).dims4();
        let flat = tape.reshape(h, &[n, c * hh * ww]);
        let f = tape.linear(flat, bp.var("fc.weight"), Some(bp.var("fc.bias")));
        let f = tape.leaky_relu(f, LRELU);
        let real = tape.linear(f, bp.var("real.weight"), Some(bp.var("real.bias")));
        let cls = tape.linear(f, bp.var("cls.weight"), Some(bp.var("cls.bias")));
        (real, cls)
    }

    /// Per-scale `(realness logit [N, 1], class logits [N, K])`.
    pub fn logits_on(&self, tape: &mut Tape, bp: &Bound, x: Var) -> Vec<(Var, Var)> {
        let mut input = x;
        let mut out = Vec::with_capacity(self.scales);
        for l in 0..self.scales {
            if l > 0 {
                input = tape.avg_pool2x(input);
            }
            out.push(self.scale_on(tape, &bp.scoped(&format!("d{l}")), l, input));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorSet {
    pub arch: DiscriminatorArch,
    pub params: ParamSet,
}

impl DiscriminatorSet {
    pub fn init(arch: DiscriminatorArch, rng: &mut impl Rng) -> Self {
        let params = arch.init(rng);
        Self { arch, params }
    }

    pub fn num_scales(&self) -> usize {
        self.arch.scales
    }

    /// Probability-of-real per scale for one image.
    pub fn discriminate(&self, x: &ImageTensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.batched());
        self.arch
            .logits_on(&mut tape, &bp, xv)
            .into_iter()
            .map(|(r, _)| {
                let p = tape.sigmoid(r);
                tape.value(p).item()
            })
            .collect()
    }

    /// Realness probabilities on tape, one `[N, 1]` var per scale.
    pub fn scores_on(&self, tape: &mut Tape, bp: &Bound, x: Var) -> Vec<Var> {
        self.arch
            .logits_on(tape, bp, x)
            .into_iter()
            .map(|(r, _)| tape.sigmoid(r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scores_are_probabilities_one_per_scale() {
        let cfg = ModelConfig {
            disc_channels: 4,
            ..ModelConfig::default()
        };
        let arch = DiscriminatorArch::new(&cfg, 16, 1, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = DiscriminatorSet::init(arch, &mut rng);
        let x = ImageTensor(Tensor::randn(&[1, 16, 16], 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0)));
        let s = d.discriminate(&x);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(s, d.discriminate(&x));
    }
}
