//! Conditional style-based generator: mapping MLP plus a modulated synthesis stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, ImageTensor, LatentZ, ModelConfig, NoiseMaps, StyleCode};
use crate::autograd::{Tape, Var};
use crate::error::{AptError, Result};
use crate::nn::{init_weight, Bound, ParamSet};
use crate::tensor::Tensor;

const LRELU: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub resolution: usize,
    pub upsample: bool,
    pub to_rgb: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub z_dim: usize,
    pub style_dim: usize,
    pub mapping_hidden: usize,
    pub const_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl GeneratorArch {
    pub fn new(cfg: &ModelConfig, image_size: usize, channels: usize, num_classes: usize) -> Self {
        let levels = (image_size / 4).trailing_zeros() as usize + 1;
        let ch = |lvl: usize| (cfg.gen_base_channels >> lvl).max(8);
        let mut layers = Vec::new();
        let push = |layers: &mut Vec<LayerSpec>, cin, cout, k, res, up, rgb| {
            let name = format!("l{}", layers.len());
            layers.push(LayerSpec {
                name,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                resolution: res,
                upsample: up,
                to_rgb: rgb,
            });
        };
        push(&mut layers, ch(0), ch(0), 3, 4, false, false);
        for lvl in 1..levels {
            let res = 4 << lvl;
            push(&mut layers, ch(lvl - 1), ch(lvl), 3, res, true, false);
            push(&mut layers, ch(lvl), ch(lvl), 3, res, false, false);
        }
        push(&mut layers, ch(levels - 1), channels, 1, image_size, false, true);
        Self {
            image_size,
            channels,
            num_classes,
            z_dim: cfg.z_dim,
            style_dim: cfg.style_dim,
            mapping_hidden: cfg.mapping_hidden,
            const_channels: ch(0),
            layers,
        }
    }

    /// Number of style rows and noise maps.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn noise_shapes(&self) -> Vec<[usize; 2]> {
        self.layers.iter().map(|l| [l.resolution, l.resolution]).collect()
    }

    pub fn init_mapping(&self, rng: &mut impl Rng) -> ParamSet {
        let (h, s) = (self.mapping_hidden, self.style_dim);
        let mut p = ParamSet::new();
        p.insert("fc0.weight", init_weight(&[h, self.z_dim], self.z_dim, 1.0, rng));
        p.insert("fc0.embed", init_weight(&[h, self.num_classes], 1, 1.0, rng));
        p.insert("fc0.bias", Tensor::zeros(&[h]));
        p.insert("fc1.weight", init_weight(&[h, h], h, 2f64.sqrt(), rng));
        p.insert("fc1.bias", Tensor::zeros(&[h]));
        p.insert("fc2.weight", init_weight(&[s, h], h, 1.0, rng));
        p.insert("fc2.bias", Tensor::zeros(&[s]));
        p
    }

    pub fn init_synthesis(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "const",
            Tensor::randn(&[1, self.const_channels, 4, 4], 1.0, rng),
        );
        for l in &self.layers {
            let fan_in = l.in_channels * l.kernel * l.kernel;
            p.insert(
                format!("{}.affine.weight", l.name),
                init_weight(&[l.in_channels, self.style_dim], self.style_dim, 1.0, rng),
            );
            p.insert(format!("{}.affine.bias", l.name), Tensor::full(&[l.in_channels], 1.0));
            p.insert(
                format!("{}.weight", l.name),
                init_weight(&[l.out_channels, l.in_channels, l.kernel, l.kernel], fan_in, 1.0, rng),
            );
            p.insert(format!("{}.bias", l.name), Tensor::zeros(&[l.out_channels]));
            p.insert(format!("{}.noise_strength", l.name), Tensor::zeros(&[l.out_channels]));
        }
        p
    }

    /// Mapping network on the tape: `z [N, d_z]`, `onehot [N, K]` to `w [N, S]`.
    pub fn map_on(&self, tape: &mut Tape, mp: &Bound, z: Var, onehot: Var) -> Var {
        let a = tape.linear(z, mp.var("fc0.weight"), Some(mp.var("fc0.bias")));
        let e = tape.linear(onehot, mp.var("fc0.embed"), None);
        let h = tape.add(a, e);
        let h = tape.leaky_relu(h, LRELU);
        let h = tape.linear(h, mp.var("fc1.weight"), Some(mp.var("fc1.bias")));
        let h = tape.leaky_relu(h, LRELU);
        tape.linear(h, mp.var("fc2.weight"), Some(mp.var("fc2.bias")))
    }

    fn modulated(
        &self,
        tape: &mut Tape,
        sp: &Bound,
        l: &LayerSpec,
        x: Var,
        style: Var,
        noise: Var,
    ) -> Var {
        let n = &l.name;
        let s = tape.linear(
            style,
            sp.var(&format!("{n}.affine.weight")),
            Some(sp.var(&format!("{n}.affine.bias"))),
        );
        let x = if l.upsample { tape.upsample2x(x) } else { x };
        let xm = tape.channel_scale(x, s);
        let weight = sp.var(&format!("{n}.weight"));
        let mut y = tape.conv2d(xm, weight, None);
        if !l.to_rgb {
            let wsq = tape.square(weight);
            let wsq = tape.reshape(
                wsq,
                &[l.out_channels, l.in_channels, l.kernel * l.kernel],
            );
            let w2 = tape.sum_last_axis(wsq);
            let s2 = tape.square(s);
            let energy = tape.linear(s2, w2, None);
            let energy = tape.add_scalar(energy, DEMOD_EPS);
            let demod = tape.rsqrt(energy);
            y = tape.channel_scale(y, demod);
        }
        let y = tape.add_noise(y, noise, sp.var(&format!("{n}.noise_strength")));
        let y = tape.channel_bias(y, sp.var(&format!("{n}.bias")));
        if l.to_rgb {
            tape.tanh(y)
        } else {
            tape.leaky_relu(y, LRELU)
        }
    }

    /// Synthesis network on the tape. `styles` holds one `[N, S]` var per
    /// layer (the same var may repeat); `noise` one `[1 or N, H, W]` per layer.
    pub fn synthesize_on(&self, tape: &mut Tape, sp: &Bound, styles: &[Var], noise: &[Var]) -> Var {
        assert_eq!(styles.len(), self.num_layers(), "one style row per layer");
        assert_eq!(noise.len(), self.num_layers(), "one noise map per layer");
        let batch = tape.value(styles[0]).shape()[0];
        let mut x = tape.broadcast_batch(sp.var("const"), batch);
        for (i, l) in self.layers.iter().enumerate() {
            x = self.modulated(tape, sp, l, x, styles[i], noise[i]);
        }
        x
    }
}

/// Synthesis-network weights, the only parameters pivotal tuning updates.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub params: ParamSet,
}

impl GeneratorWeights {
    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub mapping: ParamSet,
    pub synthesis: GeneratorWeights,
}

pub(crate) fn onehot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

impl Generator {
    pub fn init(arch: GeneratorArch, rng: &mut impl Rng) -> Self {
        let mapping = arch.init_mapping(rng);
        let synthesis = GeneratorWeights {
            params: arch.init_synthesis(rng),
        };
        Self {
            arch,
            mapping,
            synthesis,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.arch.num_layers()
    }

    /// Batched mapping; returns one style row `[S]` per input.
    pub fn map_rows(&self, zs: &[LatentZ], classes: &[ClassLabel]) -> Result<Vec<Vec<f64>>> {
        if zs.len() != classes.len() {
            return Err(AptError::Shape("one class per latent".into()));
        }
        let mut zd = Vec::with_capacity(zs.len() * self.arch.z_dim);
        for z in zs {
            if z.dim() != self.arch.z_dim {
                return Err(AptError::Config(format!(
                    "latent has dimension {}, mapping expects {}",
                    z.dim(),
                    self.arch.z_dim
                )));
            }
            zd.extend_from_slice(&z.0);
        }
        let labels: Vec<usize> = classes.iter().map(|c| c.0).collect();
        if let Some(bad) = labels.iter().find(|&&c| c >= self.arch.num_classes) {
            return Err(AptError::InvalidArgument(format!("class {bad} out of range")));
        }
        let mut tape = Tape::new();
        let mp = self.mapping.bind(&mut tape, false);
        let z = tape.constant(Tensor::new(vec![zs.len(), self.arch.z_dim], zd));
        let oh = tape.constant(onehot(&labels, self.arch.num_classes));
        let w = self.arch.map_on(&mut tape, &mp, z, oh);
        let s = self.arch.style_dim;
        Ok(tape.value(w).data().chunks(s).map(<[f64]>::to_vec).collect())
    }

    pub fn map_latent(&self, z: &LatentZ, c: ClassLabel) -> Result<StyleCode> {
        let rows = self.map_rows(std::slice::from_ref(z), &[c])?;
        Ok(StyleCode::broadcast(&rows[0], self.num_layers()))
    }

    pub fn map_latents(&self, zs: &[LatentZ], classes: &[ClassLabel]) -> Result<Vec<StyleCode>> {
        Ok(self
            .map_rows(zs, classes)?
            .into_iter()
            .map(|r| StyleCode::broadcast(&r, self.num_layers()))
            .collect())
    }

    /// Mean style row of class `c` over `samples` latents.
    pub fn class_mean_row(&self, c: ClassLabel, samples: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let zs: Vec<LatentZ> = (0..samples).map(|_| LatentZ::sample(self.arch.z_dim, rng)).collect();
        let rows = self.map_rows(&zs, &vec![c; samples])?;
        let mut mean = vec![0.0; self.arch.style_dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / samples as f64;
            }
        }
        Ok(mean)
    }

    pub fn random_noise(&self, rng: &mut impl Rng) -> NoiseMaps {
        NoiseMaps(
            self.arch
                .noise_shapes()
                .iter()
                .map(|s| Tensor::randn(s, 1.0, rng))
                .collect(),
        )
    }

    pub fn check_shapes(&self, w: &StyleCode, n: &NoiseMaps) -> Result<()> {
        if w.0.shape() != [self.num_layers(), self.arch.style_dim] {
            return Err(AptError::Shape(format!(
                "style code {:?}, generator expects [{}, {}]",
                w.0.shape(),
                self.num_layers(),
                self.arch.style_dim
            )));
        }
        let want = self.arch.noise_shapes();
        if n.0.len() != want.len() || n.0.iter().zip(&want).any(|(t, s)| t.shape() != s) {
            return Err(AptError::Shape("noise maps do not match synthesis layers".into()));
        }
        Ok(())
    }

    /// Place a style code on the tape as per-layer `[1, S]` rows.
    pub fn style_vars(&self, tape: &mut Tape, w: &StyleCode, trainable: bool) -> Vec<Var> {
        (0..w.layers())
            .map(|l| {
                let t = Tensor::new(vec![1, w.width()], w.row(l).to_vec());
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    pub fn noise_vars(&self, tape: &mut Tape, n: &NoiseMaps, trainable: bool) -> Vec<Var> {
        n.0.iter()
            .map(|t| {
                let (h, w) = t.dims2();
                let t = t.clone().reshape(&[1, h, w]);
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    /// Forward-only synthesis of one image.
    pub fn synthesize(&self, w: &StyleCode, n: &NoiseMaps, theta: &GeneratorWeights) -> Result<ImageTensor> {
        self.check_shapes(w, n)?;
        let mut tape = Tape::new();
        let sp = theta.params.bind(&mut tape, false);
        let styles = self.style_vars(&mut tape, w, false);
        let noise = self.noise_vars(&mut tape, n, false);
        let x = self.arch.synthesize_on(&mut tape, &sp, &styles, &noise);
        let img = tape.value(x).index0(0);
        if !img.is_finite() {
            return Err(AptError::Numerical("synthesis produced non-finite pixels".into()));
        }
        Ok(ImageTensor(img))
    }

    /// Random class-conditional samples with fresh noise.
    pub fn sample(&self, classes: &[ClassLabel], rng: &mut impl Rng) -> Result<Vec<ImageTensor>> {
        let zs: Vec<LatentZ> = classes
            .iter()
            .map(|_| LatentZ::sample(self.arch.z_dim, rng))
            .collect();
        let ws = self.map_latents(&zs, classes)?;
        ws.iter()
            .map(|w| {
                let n = self.random_noise(rng);
                self.synthesize(w, &n, &self.synthesis)
            })
            .collect()
    }
}
