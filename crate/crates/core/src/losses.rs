//! Loss terms for inversion and pivotal tuning, as tape builders plus
//! value-level wrappers over the same graph code.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{AptError, Result};
use crate::models::{
    ClassLabel, ClassifierHandle, DiscriminatorSet, FeatureExtractor, Generator, GeneratorWeights, ImageTensor,
    LatentZ, NoiseMaps, StyleCode,
};
use crate::nn::Bound;
use crate::tensor::Tensor;

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;
/// Added to the channel norm before unit-normalizing features.
pub const FEATURE_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_n: f64,
    pub lambda_l2_p: f64,
    pub lambda_l2_r: f64,
    pub lambda_ce: f64,
    pub lambda_pg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_n: 1e4,
            lambda_l2_p: 0.1,
            lambda_l2_r: 0.1,
            lambda_ce: 0.01,
            lambda_pg: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_n", self.lambda_n),
            ("lambda_l2_p", self.lambda_l2_p),
            ("lambda_l2_r", self.lambda_l2_r),
            ("lambda_ce", self.lambda_ce),
            ("lambda_pg", self.lambda_pg),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AptError::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which terms of the tuning objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMask {
    pub rec: bool,
    pub ce: bool,
    pub pg: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        rec: true,
        ce: true,
        pg: true,
    };
}

impl Default for TermMask {
    fn default() -> Self {
        Self::ALL
    }
}

/// Per-term values of one objective evaluation. Inactive terms read zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lpips: f64,
    pub l2: f64,
    pub l_pt: f64,
    pub lpips_r: f64,
    pub l2_r: f64,
    pub l_r: f64,
    pub l_rec: f64,
    pub l_ce: f64,
    pub l_pg: f64,
    pub total: f64,
}

fn same_shape(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.0.shape() != y.0.shape() {
        return Err(AptError::Shape(format!(
            "image shapes differ: {:?} vs {:?}",
            x.0.shape(),
            y.0.shape()
        )));
    }
    Ok(())
}

/// Unit-normalized tap features of a batch.
pub fn normalized_taps_on<F: FeatureExtractor + ?Sized>(tape: &mut Tape, fx: &F, x: Var) -> Vec<Var> {
    fx.taps_on(tape, x)
        .into_iter()
        .map(|t| tape.unit_norm_channels(t, FEATURE_EPS))
        .collect()
}

/// Sum over taps of the channel-summed, spatially averaged squared difference.
pub fn tap_distance_on(tape: &mut Tape, a: &[Var], b: &[Var]) -> Var {
    assert_eq!(a.len(), b.len(), "tap lists differ in length");
    let mut acc: Option<Var> = None;
    for (&ta, &tb) in a.iter().zip(b) {
        let c = tape.value(ta).shape()[1] as f64;
        let d = tape.sub(ta, tb);
        let d = tape.square(d);
        let m = tape.mean_all(d);
        let term = tape.scale(m, c);
        acc = Some(match acc {
            Some(s) => tape.add(s, term),
            None => term,
        });
    }
    acc.expect("at least one tap")
}

pub fn perceptual_distance_on<F: FeatureExtractor + ?Sized>(tape: &mut Tape, fx: &F, x: Var, y: Var) -> Var {
    let a = normalized_taps_on(tape, fx, x);
    let b = normalized_taps_on(tape, fx, y);
    tap_distance_on(tape, &a, &b)
}

pub fn l2_distance_on(tape: &mut Tape, x: Var, y: Var) -> Var {
    let d = tape.sub(x, y);
    let d = tape.square(d);
    tape.mean_all(d)
}

/// LPIPS-style distance between two images.
pub fn perceptual_distance<F: FeatureExtractor + ?Sized>(fx: &F, x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same_shape(x, y)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.batched());
    let yv = tape.constant(y.batched());
    let d = perceptual_distance_on(&mut tape, fx, xv, yv);
    Ok(tape.scalar(d))
}

/// Mean squared pixel error.
pub fn l2_distance(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same_shape(x, y)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.0.clone());
    let yv = tape.constant(y.0.clone());
    let d = l2_distance_on(&mut tape, xv, yv);
    Ok(tape.scalar(d))
}

/// Squared one-pixel-shift autocorrelations, both axes, summed over a 2x
/// pyramid of each map. Maps are `[1, H, W]` vars.
pub fn noise_reg_on(tape: &mut Tape, maps: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for &m in maps {
        let s = tape.value(m).shape().to_vec();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut n = tape.reshape(m, &[1, 1, h, w]);
        loop {
            for axis in [3, 2] {
                let r = tape.roll(n, axis, 1);
                let p = tape.mul(n, r);
                let mean = tape.mean_all(p);
                let sq = tape.square(mean);
                acc = Some(match acc {
                    Some(a) => tape.add(a, sq),
                    None => sq,
                });
            }
            let side = tape.value(n).shape()[2];
            if side <= 8 {
                break;
            }
            n = tape.avg_pool2x(n);
        }
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

pub fn noise_reg(n: &NoiseMaps) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = n
        .0
        .iter()
        .map(|t| {
            let (h, w) = t.dims2();
            tape.constant(t.clone().reshape(&[1, h, w]))
        })
        .collect();
    let r = noise_reg_on(&mut tape, &vars);
    tape.scalar(r)
}

/// `(lpips, l2, lpips + lambda * l2)` on the tape.
pub fn reconstruction_on<F: FeatureExtractor + ?Sized>(
    tape: &mut Tape,
    fx: &F,
    x: Var,
    y: Var,
    lambda_l2: f64,
) -> (Var, Var, Var) {
    let lp = perceptual_distance_on(tape, fx, x, y);
    let l2 = l2_distance_on(tape, x, y);
    let s = tape.scale(l2, lambda_l2);
    let total = tape.add(lp, s);
    (lp, l2, total)
}

pub fn loss_pt<F: FeatureExtractor + ?Sized>(
    fx: &F,
    x: &ImageTensor,
    x_p_star: &ImageTensor,
    w: &LossWeights,
) -> Result<f64> {
    same_shape(x, x_p_star)?;
    let mut tape = Tape::new();
    let a = tape.constant(x.batched());
    let b = tape.constant(x_p_star.batched());
    let (_, _, t) = reconstruction_on(&mut tape, fx, a, b, w.lambda_l2_p);
    Ok(tape.scalar(t))
}

pub fn loss_r<F: FeatureExtractor + ?Sized>(
    fx: &F,
    x_r: &ImageTensor,
    x_r_star: &ImageTensor,
    w: &LossWeights,
) -> Result<f64> {
    same_shape(x_r, x_r_star)?;
    let mut tape = Tape::new();
    let a = tape.constant(x_r.batched());
    let b = tape.constant(x_r_star.batched());
    let (_, _, t) = reconstruction_on(&mut tape, fx, a, b, w.lambda_l2_r);
    Ok(tape.scalar(t))
}

/// `w_p + alpha (w_z - w_p) / ‖w_z - w_p‖_F`; `None` when `w_z == w_p`.
pub fn locality_step(w_p: &StyleCode, w_z: &StyleCode, alpha: f64) -> Option<StyleCode> {
    let norm = w_p.distance(w_z);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(StyleCode(w_p.0.zip_map(&w_z.0, |p, z| p + alpha * (z - p) / norm)))
}

/// Map `(z, c)` and step `alpha` from the pivot toward the result.
pub fn locality_sample(w_p: &StyleCode, z: &LatentZ, c: ClassLabel, alpha: f64, gen: &Generator) -> Result<StyleCode> {
    let w_z = gen.map_latent(z, c)?;
    locality_step(w_p, &w_z, alpha)
        .ok_or_else(|| AptError::Numerical("mapped latent coincides with the pivot; resample z".into()))
}

/// Draw latents until the mapped code differs from the pivot.
pub fn draw_locality_sample(
    w_p: &StyleCode,
    c: ClassLabel,
    alpha: f64,
    gen: &Generator,
    rng: &mut impl rand::Rng,
) -> Result<StyleCode> {
    for _ in 0..16 {
        let z = LatentZ::sample(gen.arch.z_dim, rng);
        match locality_sample(w_p, &z, c, alpha, gen) {
            Err(AptError::Numerical(_)) => continue,
            other => return other,
        }
    }
    Err(AptError::Numerical("could not draw a latent distinct from the pivot".into()))
}

/// `-ln max(p[c_any], eps)` from logits `[1, K]`, via log-softmax.
pub fn fooling_loss_on(tape: &mut Tape, logits: Var, c_any: ClassLabel) -> Var {
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, &[c_any.0]);
    let s = tape.sum_all(picked);
    tape.scale(s, -1.0)
}

pub fn fooling_loss(probs: &[f64], c_any: ClassLabel) -> Result<f64> {
    let p = probs
        .get(c_any.0)
        .ok_or_else(|| AptError::InvalidArgument(format!("class {} out of range", c_any.0)))?;
    Ok(-p.max(LOG_EPS).ln())
}

/// `Σ_l ln max(1 - D_l, eps)` over per-scale probability vars.
pub fn projected_gan_loss_on(tape: &mut Tape, scores: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for &s in scores {
        let neg = tape.scale(s, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        let l = tape.log_clamped(one_minus, LOG_EPS);
        let l = tape.sum_all(l);
        acc = Some(match acc {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
}

pub fn projected_gan_loss(scores: &[f64]) -> f64 {
    scores.iter().map(|d| (1.0 - d).max(LOG_EPS).ln()).sum()
}

pub fn projected_gan_loss_image(x: &ImageTensor, ds: &DiscriminatorSet) -> f64 {
    projected_gan_loss(&ds.discriminate(x))
}

/// Frozen models and settings of the tuning objective.
pub struct AptObjective<'a, F: FeatureExtractor + ?Sized> {
    pub fx: &'a F,
    pub gen: &'a Generator,
    pub classifier: &'a ClassifierHandle,
    pub discriminators: &'a DiscriminatorSet,
    pub weights: LossWeights,
    pub mask: TermMask,
}

/// Locality inputs: `w_r` and the original generator's image at it.
pub struct LocalityInputs {
    pub w_r: StyleCode,
    pub x_r: ImageTensor,
}

/// Handles into a built objective graph.
pub struct AptGraph {
    pub total: Var,
    pub l_pt: Var,
    pub x_p_star: Var,
    pub logits: Var,
    parts: Vec<(Part, Var)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Lpips,
    L2,
    LpipsR,
    L2R,
    LR,
    Rec,
    Ce,
    Pg,
}

impl AptGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let mut b = LossBreakdown {
            l_pt: tape.scalar(self.l_pt),
            total: tape.scalar(self.total),
            ..LossBreakdown::default()
        };
        for &(p, v) in &self.parts {
            let x = tape.scalar(v);
            match p {
                Part::Lpips => b.lpips = x,
                Part::L2 => b.l2 = x,
                Part::LpipsR => b.lpips_r = x,
                Part::L2R => b.l2_r = x,
                Part::LR => b.l_r = x,
                Part::Rec => b.l_rec = x,
                Part::Ce => b.l_ce = x,
                Part::Pg => b.l_pg = x,
            }
        }
        b
    }
}

impl<F: FeatureExtractor + ?Sized> AptObjective<'_, F> {
    /// The original generator's image at `w_r`, used as the locality target.
    pub fn locality_inputs(&self, w_r: StyleCode, n: &NoiseMaps) -> Result<LocalityInputs> {
        let x_r = self.gen.synthesize(&w_r, n, &self.gen.synthesis)?;
        Ok(LocalityInputs { w_r, x_r })
    }

    /// Build the objective on `tape`. `theta_hat` binds the synthesis weights
    /// being tuned (or constants); `styles` and `noise` are the pivot inputs.
    /// Locality is included only when `locality` is given and the mask has `rec`.
    #[allow(clippy::too_many_arguments)]
    pub fn build_on(
        &self,
        tape: &mut Tape,
        theta_hat: &Bound,
        target: &ImageTensor,
        styles: &[Var],
        noise: &[Var],
        locality: Option<&LocalityInputs>,
        c_any: ClassLabel,
    ) -> Result<AptGraph> {
        let w = &self.weights;
        let arch = &self.gen.arch;
        let x = tape.constant(target.batched());
        let x_p_star = arch.synthesize_on(tape, theta_hat, styles, noise);
        let (lp, l2, l_pt) = reconstruction_on(tape, self.fx, x, x_p_star, w.lambda_l2_p);
        let mut parts = vec![(Part::Lpips, lp), (Part::L2, l2)];

        let mut total: Option<Var> = None;
        if self.mask.rec {
            let mut l_rec = l_pt;
            if let Some(loc) = locality {
                let rows: Vec<Var> = self.gen.style_vars(tape, &loc.w_r, false);
                let x_r_star = arch.synthesize_on(tape, theta_hat, &rows, noise);
                let x_r = tape.constant(loc.x_r.batched());
                let (lpr, l2r, l_r) = reconstruction_on(tape, self.fx, x_r, x_r_star, w.lambda_l2_r);
                parts.extend([(Part::LpipsR, lpr), (Part::L2R, l2r), (Part::LR, l_r)]);
                l_rec = tape.add(l_pt, l_r);
            }
            parts.push((Part::Rec, l_rec));
            total = Some(l_rec);
        }

        let cw = self.classifier.weights()?.bind(tape, false);
        let logits = self.classifier.logits_on(tape, &cw, x_p_star);
        if self.mask.ce {
            let l_ce = fooling_loss_on(tape, logits, c_any);
            parts.push((Part::Ce, l_ce));
            let t = tape.scale(l_ce, w.lambda_ce);
            total = Some(match total {
                Some(s) => tape.add(s, t),
                None => t,
            });
        }
        if self.mask.pg {
            let dp = self.discriminators.params.bind(tape, false);
            let scores = self.discriminators.scores_on(tape, &dp, x_p_star);
            let l_pg = projected_gan_loss_on(tape, &scores);
            parts.push((Part::Pg, l_pg));
            let t = tape.scale(l_pg, w.lambda_pg);
            total = Some(match total {
                Some(s) => tape.add(s, t),
                None => t,
            });
        }
        let total = total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
        Ok(AptGraph {
            total,
            l_pt,
            x_p_star,
            logits,
            parts,
        })
    }
}

/// `L_pt + L_R` for tuned weights `theta_hat` against the original generator.
#[allow(clippy::too_many_arguments)]
pub fn loss_rec<F: FeatureExtractor + ?Sized>(
    fx: &F,
    gen: &Generator,
    x: &ImageTensor,
    w_p: &StyleCode,
    n: &NoiseMaps,
    theta_hat: &GeneratorWeights,
    z: &LatentZ,
    c: ClassLabel,
    alpha: f64,
    w: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    let w_r = locality_sample(w_p, z, c, alpha, gen)?;
    let x_p_star = gen.synthesize(w_p, n, theta_hat)?;
    let x_r = gen.synthesize(&w_r, n, &gen.synthesis)?;
    let x_r_star = gen.synthesize(&w_r, n, theta_hat)?;
    let mut tape = Tape::new();
    let xs = [x, &x_p_star, &x_r, &x_r_star].map(|t| tape.constant(t.batched()));
    let (lp, l2, l_pt) = reconstruction_on(&mut tape, fx, xs[0], xs[1], w.lambda_l2_p);
    let (lpr, l2r, l_r) = reconstruction_on(&mut tape, fx, xs[2], xs[3], w.lambda_l2_r);
    let l_rec = tape.add(l_pt, l_r);
    if !tape.scalar(l_rec).is_finite() {
        return Err(AptError::Numerical("reconstruction loss is not finite".into()));
    }
    let b = LossBreakdown {
        lpips: tape.scalar(lp),
        l2: tape.scalar(l2),
        l_pt: tape.scalar(l_pt),
        lpips_r: tape.scalar(lpr),
        l2_r: tape.scalar(l2r),
        l_r: tape.scalar(l_r),
        l_rec: tape.scalar(l_rec),
        total: tape.scalar(l_rec),
        ..LossBreakdown::default()
    };
    Ok((b.l_rec, b))
}

/// The full tuning objective at `theta_hat`, forward only.
#[allow(clippy::too_many_arguments)]
pub fn apt_total<F: FeatureExtractor + ?Sized>(
    obj: &AptObjective<'_, F>,
    x: &ImageTensor,
    w_p: &StyleCode,
    n: &NoiseMaps,
    theta_hat: &GeneratorWeights,
    z: &LatentZ,
    c: ClassLabel,
    alpha: f64,
    c_any: ClassLabel,
) -> Result<(f64, LossBreakdown)> {
    obj.gen.check_shapes(w_p, n)?;
    let loc = if obj.mask.rec {
        let w_r = locality_sample(w_p, z, c, alpha, obj.gen)?;
        Some(obj.locality_inputs(w_r, n)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let th = theta_hat.params.bind(&mut tape, false);
    let styles = obj.gen.style_vars(&mut tape, w_p, false);
    let noise = obj.gen.noise_vars(&mut tape, n, false);
    let g = obj.build_on(&mut tape, &th, x, &styles, &noise, loc.as_ref(), c_any)?;
    let b = g.breakdown(&tape);
    if !b.total.is_finite() {
        return Err(AptError::Numerical("objective is not finite".into()));
    }
    Ok((b.total, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::IdentityTap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(shape: &[usize], v: &[f64]) -> ImageTensor {
        ImageTensor(Tensor::new(shape.to_vec(), v.to_vec()))
    }

    #[test]
    fn identity_tap_single_channel_is_sign_disagreement() {
        let x = img(&[1, 2, 2], &[0.5, -0.25, 0.75, 0.1]);
        let y = img(&[1, 2, 2], &[0.3, 0.2, -0.6, 0.9]);
        let norm = |v: f64| v / (v.abs() + FEATURE_EPS);
        let want: f64 = x
            .0
            .data()
            .iter()
            .zip(y.0.data())
            .map(|(a, b)| (norm(*a) - norm(*b)).powi(2))
            .sum::<f64>()
            / 4.0;
        let got = perceptual_distance(&IdentityTap, &x, &y).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 2.0).abs() < 1e-8);
        assert_eq!(perceptual_distance(&IdentityTap, &x, &x).unwrap(), 0.0);
        assert_eq!(got, perceptual_distance(&IdentityTap, &y, &x).unwrap());
    }

    #[test]
    fn identity_tap_multichannel_matches_hand_computation() {
        let x = img(&[2, 1, 2], &[3.0, 0.0, 4.0, 1.0]);
        let y = img(&[2, 1, 2], &[0.0, 1.0, 1.0, 0.0]);
        // column 0: (0.6, 0.8) vs (0, 1); column 1: (0, 1) vs (1, 0)
        let d0 = 0.6f64.powi(2) + 0.2f64.powi(2);
        let d1 = 2.0;
        let want = 2.0 * (d0 + d1) / 4.0;
        let got = perceptual_distance(&IdentityTap, &x, &y).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = img(&[1, 2, 2], &[0.0; 4]);
        let y = img(&[1, 1, 4], &[0.0; 4]);
        assert!(matches!(perceptual_distance(&IdentityTap, &x, &y), Err(AptError::Shape(_))));
        assert!(l2_distance(&x, &y).is_err());
    }

    #[test]
    fn l2_matches_brute_force() {
        let x = img(&[1, 2, 2], &[0.0; 4]);
        let o = img(&[1, 2, 2], &[1.0; 4]);
        assert_eq!(l2_distance(&x, &o).unwrap(), 1.0);
        assert_eq!(l2_distance(&x, &x).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ImageTensor(Tensor::randn(&[3, 5, 5], 1.0, &mut rng));
        let b = ImageTensor(Tensor::randn(&[3, 5, 5], 1.0, &mut rng));
        let mut s = 0.0;
        for i in 0..75 {
            s += (a.0.data()[i] - b.0.data()[i]).powi(2);
        }
        assert!((l2_distance(&a, &b).unwrap() - s / 75.0).abs() < 1e-12);
    }

    fn brute_noise_reg(maps: &[Tensor]) -> f64 {
        let mut total = 0.0;
        for m in maps {
            let (mut h, mut w) = m.dims2();
            let mut cur = m.data().to_vec();
            loop {
                let (mut sx, mut sy) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let v = cur[y * w + x];
                        sx += v * cur[y * w + (x + w - 1) % w];
                        sy += v * cur[((y + h - 1) % h) * w + x];
                    }
                }
                let n = (h * w) as f64;
                total += (sx / n).powi(2) + (sy / n).powi(2);
                if h <= 8 {
                    break;
                }
                let mut next = vec![0.0; h * w / 4];
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        next[y * (w / 2) + x] = 0.25
                            * (cur[2 * y * w + 2 * x]
                                + cur[2 * y * w + 2 * x + 1]
                                + cur[(2 * y + 1) * w + 2 * x]
                                + cur[(2 * y + 1) * w + 2 * x + 1]);
                    }
                }
                cur = next;
                h /= 2;
                w /= 2;
            }
        }
        total
    }

    #[test]
    fn noise_reg_matches_brute_force_and_sign_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let maps = vec![
            Tensor::randn(&[4, 4], 1.0, &mut rng),
            Tensor::randn(&[16, 16], 1.0, &mut rng),
            Tensor::randn(&[32, 32], 1.0, &mut rng),
        ];
        let n = NoiseMaps(maps.clone());
        let got = noise_reg(&n);
        assert!((got - brute_noise_reg(&maps)).abs() < 1e-12);
        let flipped = NoiseMaps(maps.iter().map(|t| t.map(|v| -v)).collect());
        assert_eq!(got, noise_reg(&flipped));
        let ones = NoiseMaps(vec![Tensor::full(&[4, 4], 1.0)]);
        assert!((noise_reg(&ones) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fooling_loss_closed_forms() {
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        assert_eq!(fooling_loss(&onehot, ClassLabel(3)).unwrap(), 0.0);
        let uniform = vec![0.1; 10];
        assert!((fooling_loss(&uniform, ClassLabel(7)).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((fooling_loss(&onehot, ClassLabel(0)).unwrap() + LOG_EPS.ln()).abs() < 1e-9);

        let logits = [0.3, -1.2, 2.0, 0.7];
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let probs: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
        let brute: f64 = -(0..4).map(|k| if k == 1 { probs[k].ln() } else { 0.0 }).sum::<f64>();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![1, 4], logits.to_vec()));
        let f = fooling_loss_on(&mut tape, l, ClassLabel(1));
        assert!((tape.scalar(f) - brute).abs() < 1e-12);
        assert!((fooling_loss(&probs, ClassLabel(1)).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn projected_gan_loss_closed_forms() {
        assert_eq!(projected_gan_loss(&[0.0, 0.0]), 0.0);
        let d = 1.0 - (-1.0f64).exp();
        assert!((projected_gan_loss(&[d, d]) + 2.0).abs() < 1e-12);
        assert!((projected_gan_loss(&[1.0]) - LOG_EPS.ln()).abs() < 1e-9);
        let scores = [0.2, 0.9, 0.55];
        let mut tape = Tape::new();
        let vars: Vec<Var> = scores
            .iter()
            .map(|&s| tape.constant(Tensor::new(vec![1, 1], vec![s])))
            .collect();
        let l = projected_gan_loss_on(&mut tape, &vars);
        let brute = (0.8f64).ln() + (0.1f64).ln() + (0.45f64).ln();
        assert!((tape.scalar(l) - brute).abs() < 1e-12);
    }

    #[test]
    fn locality_step_arithmetic() {
        let mut p = Tensor::zeros(&[2, 3]);
        p.data_mut()[0] = 1.0;
        let w_p = StyleCode(p.clone());
        let mut z = p.clone();
        z.data_mut()[0] += 2.0;
        let w_r = locality_step(&w_p, &StyleCode(z), 1.0).unwrap();
        let diff = w_r.0.zip_map(&w_p.0, |a, b| a - b);
        assert_eq!(diff.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let same = locality_step(&w_p, &StyleCode(Tensor::full(&[2, 3], 4.0)), 0.0).unwrap();
        assert_eq!(same, w_p);
        assert!(locality_step(&w_p, &w_p, 1.0).is_none());
    }
}
