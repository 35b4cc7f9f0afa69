//! Latent optimization of a shared style row and noise maps against a frozen generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{AptError, Result};
use crate::losses::{noise_reg_on, normalized_taps_on, tap_distance_on};
use crate::models::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ClassLabel, FeatureExtractor, Generator,
    ImageTensor, NoiseMaps, StyleCode,
};
use crate::nn::{Adam, ParamSet};
use crate::tensor::Tensor;

/// Recorded in pivot metadata.
pub const OPTIMIZER_NAME: &str = "adam(beta1=0, beta2=0.999, eps=1e-8)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub lr_max: f64,
    pub warmup_iters: usize,
    pub cosine_tail_iters: usize,
    pub lambda_n: f64,
    /// Latents averaged for the class-mean initialization.
    pub init_samples: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr_max: 0.05,
            warmup_iters: 50,
            cosine_tail_iters: 250,
            lambda_n: 1e4,
            init_samples: 512,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(AptError::Config("inversion iterations must be positive".into()));
        }
        if self.warmup_iters + self.cosine_tail_iters > self.iterations {
            return Err(AptError::Config(format!(
                "warmup ({}) + cosine tail ({}) exceed iterations ({})",
                self.warmup_iters, self.cosine_tail_iters, self.iterations
            )));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) || !(self.lambda_n >= 0.0) || self.init_samples == 0 {
            return Err(AptError::Config(
                "lr_max must be positive, lambda_n nonnegative, init_samples positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup from zero, constant plateau, cosine decay over the tail.
pub fn lr_schedule(iter: usize, cfg: &InversionConfig) -> f64 {
    let tail_start = cfg.iterations - cfg.cosine_tail_iters;
    if iter < cfg.warmup_iters {
        cfg.lr_max * iter as f64 / cfg.warmup_iters as f64
    } else if iter < tail_start {
        cfg.lr_max
    } else {
        let t = (iter - tail_start) as f64 / cfg.cosine_tail_iters as f64;
        cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionStep {
    pub iter: usize,
    pub lpips: f64,
    pub noise_reg: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PivotState {
    pub w_p: StyleCode,
    pub n: NoiseMaps,
    pub final_loss: f64,
    pub trace: Vec<InversionStep>,
    pub image_id: Option<usize>,
    pub class: ClassLabel,
    pub seed: u64,
}

impl PivotState {
    pub fn initial_lpips(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |s| s.lpips)
    }

    pub fn final_lpips(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |s| s.lpips)
    }
}

/// Reconstruct `x` as `G(w, n; θ)` with one style row shared by every layer.
/// `θ` is only read. The state returned is the last traced iterate.
pub fn invert<F: FeatureExtractor + ?Sized>(
    fx: &F,
    gen: &Generator,
    x: &ImageTensor,
    c: ClassLabel,
    cfg: &InversionConfig,
) -> Result<PivotState> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mean_row = gen.class_mean_row(c, cfg.init_samples, &mut rng)?;
    let noise = gen.random_noise(&mut rng);
    let s = gen.arch.style_dim;
    let layers = gen.num_layers();

    let mut vars = ParamSet::new();
    vars.insert("w", Tensor::new(vec![1, s], mean_row));
    for (i, t) in noise.0.iter().enumerate() {
        let (h, w) = t.dims2();
        vars.insert(format!("noise.{i:02}"), t.clone().reshape(&[1, h, w]));
    }
    let noise_names: Vec<String> = (0..noise.0.len()).map(|i| format!("noise.{i:02}")).collect();

    let target_taps: Vec<Tensor> = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.batched());
        normalized_taps_on(&mut tape, fx, xv)
            .into_iter()
            .map(|v| tape.value(v).clone())
            .collect()
    };

    let mut opt = Adam::new(0.0, 0.999);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let lr = lr_schedule(iter, cfg);
        let mut tape = Tape::new();
        let sp = gen.synthesis.params.bind(&mut tape, false);
        let bv = vars.bind(&mut tape, true);
        let w = bv.var("w");
        let styles = vec![w; layers];
        let nv: Vec<_> = noise_names.iter().map(|n| bv.var(n)).collect();
        let y = gen.arch.synthesize_on(&mut tape, &sp, &styles, &nv);
        let yt = normalized_taps_on(&mut tape, fx, y);
        let xt: Vec<_> = target_taps.iter().map(|t| tape.constant(t.clone())).collect();
        let lpips = tap_distance_on(&mut tape, &xt, &yt);
        let reg = noise_reg_on(&mut tape, &nv);
        let reg_w = tape.scale(reg, cfg.lambda_n);
        let total = tape.add(lpips, reg_w);
        let step = InversionStep {
            iter,
            lpips: tape.scalar(lpips),
            noise_reg: tape.scalar(reg),
            total: tape.scalar(total),
            lr,
        };
        trace.push(step);
        if !step.total.is_finite() {
            return Err(AptError::Numerical(format!(
                "inversion loss became non-finite at iteration {iter} (last finite: {:?})",
                trace.iter().rev().find(|s| s.total.is_finite()).map(|s| s.total)
            )));
        }
        if iter + 1 == cfg.iterations {
            break;
        }
        let mut g = tape.backward(total);
        let grads = bv.grads(&tape, &mut g);
        opt.step(&mut vars, &grads, lr);
    }

    let row = vars.get("w").expect("w").data().to_vec();
    let maps = noise_names
        .iter()
        .map(|n| {
            let t = vars.get(n).expect("noise").clone();
            let sh = t.shape().to_vec();
            t.reshape(&sh[1..])
        })
        .collect();
    let final_loss = trace.last().expect("at least one iteration").total;
    Ok(PivotState {
        w_p: StyleCode::broadcast(&row, layers),
        n: NoiseMaps(maps),
        final_loss,
        trace,
        image_id: None,
        class: c,
        seed: cfg.seed,
    })
}

/// Persist a pivot (without its trace) in checkpoint format.
pub fn save_pivot(path: &Path, pivot: &PivotState, dataset_id: &str, config_hash: &str) -> Result<()> {
    let mut params = ParamSet::new();
    params.insert("w_p", pivot.w_p.0.clone());
    for (i, t) in pivot.n.0.iter().enumerate() {
        params.insert(format!("noise.{i:02}"), t.clone());
    }
    let mut meta = CheckpointMeta::new(
        "pivot",
        dataset_id,
        config_hash,
        pivot.seed,
        serde_json::json!({ "optimizer": OPTIMIZER_NAME }),
    );
    let extra: BTreeMap<String, serde_json::Value> = [
        ("final_loss", serde_json::json!(pivot.final_loss)),
        ("image_id", serde_json::json!(pivot.image_id)),
        ("class", serde_json::json!(pivot.class.0)),
        ("initial_lpips", serde_json::json!(pivot.initial_lpips())),
        ("final_lpips", serde_json::json!(pivot.final_lpips())),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    meta.extra = extra;
    save_checkpoint(path, &Checkpoint { meta, params })
}

/// Load a pivot saved by [`save_pivot`]; the trace is not restored.
pub fn load_pivot(path: &Path, expected_hash: Option<&str>) -> Result<PivotState> {
    let ck = load_checkpoint(path, expected_hash)?;
    let bad = |r: &str| AptError::Checkpoint {
        path: path.to_path_buf(),
        reason: r.to_string(),
    };
    if ck.meta.kind != "pivot" {
        return Err(bad("not a pivot file"));
    }
    let w_p = StyleCode(ck.params.get("w_p").ok_or_else(|| bad("missing w_p"))?.clone());
    let maps: Vec<Tensor> = ck
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("noise."))
        .map(|(_, t)| t.clone())
        .collect();
    let get_f = |k: &str| ck.meta.extra.get(k).and_then(|v| v.as_f64());
    Ok(PivotState {
        w_p,
        n: NoiseMaps(maps),
        final_loss: get_f("final_loss").ok_or_else(|| bad("missing final_loss"))?,
        trace: Vec::new(),
        image_id: ck.meta.extra.get("image_id").and_then(|v| v.as_u64()).map(|v| v as usize),
        class: ClassLabel(
            ck.meta
                .extra
                .get("class")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("missing class"))? as usize,
        ),
        seed: ck.meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GeneratorArch, IdentityTap, LatentZ, ModelConfig};

    fn cfg() -> InversionConfig {
        InversionConfig::default()
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(50, &c), 0.05);
        assert_eq!(lr_schedule(25, &c), 0.025);
        assert_eq!(lr_schedule(749, &c), 0.05);
        assert_eq!(lr_schedule(750, &c), 0.05);
        let last = 0.05 * 0.5 * (1.0 + (std::f64::consts::PI * 249.0 / 250.0).cos());
        assert!((lr_schedule(999, &c) - last).abs() < 1e-15);
        assert!(lr_schedule(999, &c) > 0.0 && lr_schedule(999, &c) < 1e-5);
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let c = InversionConfig {
            iterations: 100,
            ..cfg()
        };
        assert!(matches!(c.validate(), Err(AptError::Config(_))));
    }

    fn small_gen() -> Generator {
        let mc = ModelConfig {
            style_dim: 8,
            mapping_hidden: 8,
            gen_base_channels: 8,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Generator::init(GeneratorArch::new(&mc, 16, 1, 10), &mut rng)
    }

    #[test]
    fn inversion_is_deterministic_and_leaves_weights_alone() {
        let gen = small_gen();
        let before = gen.synthesis.digest();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gen.sample(&[ClassLabel(3)], &mut rng).unwrap().remove(0);
        let c = InversionConfig {
            iterations: 60,
            warmup_iters: 10,
            cosine_tail_iters: 20,
            init_samples: 16,
            seed: 9,
            ..cfg()
        };
        let a = invert(&IdentityTap, &gen, &x, ClassLabel(3), &c).unwrap();
        let b = invert(&IdentityTap, &gen, &x, ClassLabel(3), &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(gen.synthesis.digest(), before);
        assert_eq!(a.trace.len(), 60);
        assert_eq!(a.final_loss, a.trace.last().unwrap().total);
        assert!(a.w_p.0.is_finite() && a.n.is_finite());
        let y = gen.synthesize(&a.w_p, &a.n, &gen.synthesis).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.batched());
        let yv = tape.constant(y.batched());
        let d = crate::losses::perceptual_distance_on(&mut tape, &IdentityTap, xv, yv);
        assert!((tape.scalar(d) - a.final_lpips()).abs() < 1e-12);
    }

    #[test]
    fn pivot_round_trips() {
        let gen = small_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = gen.map_latent(&LatentZ::sample(16, &mut rng), ClassLabel(1)).unwrap();
        let p = PivotState {
            w_p: w,
            n: gen.random_noise(&mut rng),
            final_loss: 0.125,
            trace: vec![],
            image_id: Some(17),
            class: ClassLabel(1),
            seed: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.safetensors");
        save_pivot(&path, &p, "ds", "h").unwrap();
        assert_eq!(load_pivot(&path, Some("h")).unwrap(), p);
    }
}
