//! Procedurally rendered ten-class shape dataset with split manifests.
//!
//! Every sample is rendered from its own RNG stream `(seed, index)`, quantized
//! to 8 bits and stored; loaded pixels are `q / 127.5 - 1` in `[-1, 1]`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safetensors::tensor::{Dtype, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AptError, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 10] = [
    "disk", "ring", "square", "frame", "plus", "cross", "hbars", "vbars", "triangle", "diamond",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: String,
    pub image_size: usize,
    pub channels: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            id: "shapes10".into(),
            image_size: 32,
            channels: 1,
            count: 6000,
            seed: 1234,
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        CLASS_NAMES.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return Err(AptError::Config(format!(
                "dataset.image_size must be a multiple of 8 and >= 8, got {}",
                self.image_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(AptError::Config("dataset.channels must be 1 or 3".into()));
        }
        if self.count < 10 * self.num_classes() {
            return Err(AptError::Config("dataset.count too small for a 3-way split".into()));
        }
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(AptError::Config("dataset.id must be a plain name".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn get(&self, s: SplitName) -> &[usize] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetManifest {
    config: DatasetConfig,
    images_sha256: String,
    splits: SplitManifest,
}

/// An in-memory dataset. Image ids are sample indices.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub splits: SplitManifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, id: usize) -> &Tensor {
        &self.images[id]
    }

    /// Stacks the given ids into an `[N, C, H, W]` batch.
    pub fn batch(&self, ids: &[usize]) -> (Tensor, Vec<usize>) {
        let imgs: Vec<Tensor> = ids.iter().map(|&i| self.images[i].clone()).collect();
        (Tensor::stack(&imgs), ids.iter().map(|&i| self.labels[i]).collect())
    }

    /// Per-channel mean and std of the train split in `[0, 1]` units.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.config.channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0usize;
        for &i in &self.splits.train {
            let img = &self.images[i];
            let hw = img.len() / c;
            for ch in 0..c {
                for v in &img.data()[ch * hw..(ch + 1) * hw] {
                    let u = (v + 1.0) * 0.5;
                    sum[ch] += u;
                    sq[ch] += u * u;
                }
            }
            n += hw;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(1e-12).sqrt())
            .collect();
        (mean, std)
    }
}

#[derive(Clone, Copy)]
struct ShapeParams {
    scale: f64,
    dx: f64,
    dy: f64,
    rot: f64,
    thick: f64,
}

fn inside(class: usize, u: f64, v: f64, t: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 0.8,
        1 => (0.78 - 0.28 * t..=0.85).contains(&r),
        2 => u.abs() <= 0.7 && v.abs() <= 0.7,
        3 => {
            let m = u.abs().max(v.abs());
            (0.8 - 0.3 * t..=0.8).contains(&m)
        }
        4 => (u.abs() <= 0.2 * t && v.abs() <= 0.85) || (v.abs() <= 0.2 * t && u.abs() <= 0.85),
        5 => {
            let inb = u.abs() <= 0.75 && v.abs() <= 0.75;
            inb && ((u - v).abs() / 2f64.sqrt() <= 0.2 * t || (u + v).abs() / 2f64.sqrt() <= 0.2 * t)
        }
        6 => u.abs() <= 0.8 && ((v - 0.4).abs() <= 0.18 * t || (v + 0.4).abs() <= 0.18 * t),
        7 => v.abs() <= 0.8 && ((u - 0.4).abs() <= 0.18 * t || (u + 0.4).abs() <= 0.18 * t),
        8 => {
            // apex up (image y grows downward)
            let (ax, ay, bx, by, cx, cy) = (0.0, -0.8, 0.8, 0.65, -0.8, 0.65);
            let s = |px: f64, py: f64, qx: f64, qy: f64| (qx - px) * (v - py) - (qy - py) * (u - px);
            let d1 = s(ax, ay, bx, by);
            let d2 = s(bx, by, cx, cy);
            let d3 = s(cx, cy, ax, ay);
            (d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0) || (d1 <= 0.0 && d2 <= 0.0 && d3 <= 0.0)
        }
        9 => {
            let m = u.abs() + v.abs();
            (0.92 - 0.3 * t..=0.92).contains(&m)
        }
        _ => unreachable!("class index out of range"),
    }
}

/// Render one sample of `class` in `[-1, 1]`, before quantization.
pub fn render(class: usize, size: usize, channels: usize, rng: &mut impl Rng) -> Tensor {
    let p = ShapeParams {
        scale: rng.gen_range(0.62..0.88),
        dx: rng.gen_range(-0.12..0.12),
        dy: rng.gen_range(-0.12..0.12),
        rot: rng.gen_range(-0.22..0.22),
        thick: rng.gen_range(0.85..1.2),
    };
    let bg: f64 = rng.gen_range(-1.0..-0.65);
    let fg: Vec<f64> = (0..channels)
        .map(|_| rng.gen_range(0.35..1.0))
        .collect();
    let (sn, cs) = p.rot.sin_cos();
    let ss = 4;
    let hw = size * size;
    let mut out = vec![0.0; channels * hw];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let px = (x as f64 + (sx as f64 + 0.5) / ss as f64) / size as f64 * 2.0 - 1.0;
                    let py = (y as f64 + (sy as f64 + 0.5) / ss as f64) / size as f64 * 2.0 - 1.0;
                    let qx = (px - p.dx) / p.scale;
                    let qy = (py - p.dy) / p.scale;
                    let u = cs * qx + sn * qy;
                    let v = -sn * qx + cs * qy;
                    if inside(class, u, v, p.thick) {
                        hits += 1;
                    }
                }
            }
            let cover = hits as f64 / (ss * ss) as f64;
            for (ch, f) in fg.iter().enumerate() {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.03;
                out[ch * hw + y * size + x] = (bg + (f - bg) * cover + noise).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![channels, size, size], out)
}

pub fn quantize(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r
}

/// Generate the full dataset in memory (quantized).
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.num_classes();
    let mut images = Vec::with_capacity(cfg.count);
    let mut labels = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let class = i % k;
        let mut rng = sample_rng(cfg.seed, i);
        let img = render(class, cfg.image_size, cfg.channels, &mut rng);
        images.push(img.map(|v| dequantize(quantize(v))));
        labels.push(class);
    }
    let splits = make_splits(cfg.count, cfg.seed);
    Ok(Dataset {
        config: cfg.clone(),
        images,
        labels,
        splits,
    })
}

/// 80/10/10 split of a seeded permutation; each list is sorted.
pub fn make_splits(count: usize, seed: u64) -> SplitManifest {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    idx.shuffle(&mut rng);
    let n_train = count * 8 / 10;
    let n_val = count / 10;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    SplitManifest { train, val, test }
}

pub fn dataset_dir(root: &Path, id: &str) -> PathBuf {
    root.join("datasets").join(id)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| AptError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Created,
    AlreadyPresent,
}

/// Generate and persist the dataset; a verified existing copy is left alone.
pub fn ingest(cfg: &DatasetConfig, root: &Path, force: bool) -> Result<IngestOutcome> {
    cfg.validate()?;
    let dir = dataset_dir(root, &cfg.id);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        let ds = load(root, &cfg.id)?;
        if ds.config != *cfg {
            return Err(AptError::Dataset(format!(
                "dataset `{}` exists with a different configuration; pass --force to regenerate",
                cfg.id
            )));
        }
        return Ok(IngestOutcome::AlreadyPresent);
    }
    let ds = generate(cfg)?;
    fs::create_dir_all(&dir).map_err(|e| AptError::io(&dir, e))?;
    let (c, s) = (cfg.channels, cfg.image_size);
    let pixels: Vec<u8> = ds
        .images
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| quantize(v)))
        .collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    let views = vec![
        (
            "images".to_string(),
            TensorView::new(Dtype::U8, vec![cfg.count, c, s, s], &pixels)
                .map_err(|e| AptError::Dataset(e.to_string()))?,
        ),
        (
            "labels".to_string(),
            TensorView::new(Dtype::U8, vec![cfg.count], &labels)
                .map_err(|e| AptError::Dataset(e.to_string()))?,
        ),
    ];
    let images_path = dir.join("images.safetensors");
    safetensors::serialize_to_file(views, &None, &images_path)
        .map_err(|e| AptError::Dataset(e.to_string()))?;
    let manifest = DatasetManifest {
        config: cfg.clone(),
        images_sha256: sha256_file(&images_path)?,
        splits: ds.splits.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| AptError::io(&manifest_path, e))?;
    Ok(IngestOutcome::Created)
}

/// Load a persisted dataset, verifying its checksum.
pub fn load(root: &Path, id: &str) -> Result<Dataset> {
    let dir = dataset_dir(root, id);
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(AptError::MissingPrerequisite {
            what: format!("dataset `{id}` under {}", dir.display()),
            command: "ingest".into(),
        });
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| AptError::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let images_path = dir.join("images.safetensors");
    let digest = sha256_file(&images_path)?;
    if digest != manifest.images_sha256 {
        return Err(AptError::Dataset(format!(
            "checksum mismatch for {}: expected {}, found {digest}",
            images_path.display(),
            manifest.images_sha256
        )));
    }
    let bytes = fs::read(&images_path).map_err(|e| AptError::io(&images_path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| AptError::Dataset(e.to_string()))?;
    let imgs = st.tensor("images").map_err(|e| AptError::Dataset(e.to_string()))?;
    let labs = st.tensor("labels").map_err(|e| AptError::Dataset(e.to_string()))?;
    let cfg = manifest.config;
    let per = cfg.channels * cfg.image_size * cfg.image_size;
    let images = imgs
        .data()
        .chunks(per)
        .map(|chunk| {
            Tensor::new(
                vec![cfg.channels, cfg.image_size, cfg.image_size],
                chunk.iter().map(|&q| dequantize(q)).collect(),
            )
        })
        .collect();
    let labels = labs.data().iter().map(|&l| l as usize).collect();
    Ok(Dataset {
        config: cfg,
        images,
        labels,
        splits: manifest.splits,
    })
}

/// Pick `per_class` ids of each class from a split, seeded, sorted by id.
pub fn sample_per_class(ds: &Dataset, split: SplitName, per_class: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
    for &i in ds.splits.get(split) {
        by_class.entry(ds.labels[i]).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..ds.config.num_classes() {
        let mut ids = by_class.remove(&c).unwrap_or_default();
        ids.shuffle(&mut rng);
        out.extend(ids.into_iter().take(per_class));
    }
    out.sort_unstable();
    out
}
