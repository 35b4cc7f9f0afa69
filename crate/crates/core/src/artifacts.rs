//! Campaign directories: manifests, emitted images, raw sidecars and loss traces.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackRecord};
use crate::data::quantize;
use crate::error::{AptError, Result};
use crate::losses::{LossBreakdown, TermMask};
use crate::models::ImageTensor;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";
pub const HEADER: &str = "campaign.json";

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| AptError::io(path, e))
}

/// Grayscale or RGB 8-bit PNG, each pixel repeated `scale` times per axis.
pub fn write_png(path: &Path, img: &ImageTensor, scale: usize) -> Result<()> {
    grid_png(path, &[vec![img.clone()]], scale)
}

/// Rows of equally sized images tiled with a one-pixel gutter.
pub fn grid_png(path: &Path, rows: &[Vec<ImageTensor>], scale: usize) -> Result<()> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| AptError::InvalidArgument("empty image grid".into()))?;
    let (c, h, w) = {
        let s = first.0.shape();
        (s[0], s[1], s[2])
    };
    if c != 1 && c != 3 {
        return Err(AptError::Shape(format!("PNG needs 1 or 3 channels, got {c}")));
    }
    let scale = scale.max(1);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (cell_h, cell_w) = (h * scale + 1, w * scale + 1);
    let (out_h, out_w) = (rows.len() * cell_h + 1, cols * cell_w + 1);
    let mut px = vec![255u8; out_h * out_w * c];
    for (r, row) in rows.iter().enumerate() {
        for (col, img) in row.iter().enumerate() {
            if img.0.shape() != first.0.shape() {
                return Err(AptError::Shape("grid images differ in shape".into()));
            }
            let d = img.0.data();
            for y in 0..h * scale {
                for x in 0..w * scale {
                    let oy = r * cell_h + 1 + y;
                    let ox = col * cell_w + 1 + x;
                    for ch in 0..c {
                        px[(oy * out_w + ox) * c + ch] = quantize(d[(ch * h + y / scale) * w + x / scale]);
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        io(parent, fs::create_dir_all(parent))?;
    }
    let file = io(path, fs::File::create(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), out_w as u32, out_h as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header().map_err(|e| AptError::Serde(e.to_string()))?;
    wr.write_image_data(&px).map_err(|e| AptError::Serde(e.to_string()))?;
    Ok(())
}

/// Raw `f64` pixels with declared shape and dtype.
pub fn save_sidecar(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes: Vec<u8> = img.0.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let view = TensorView::new(Dtype::F64, img.0.shape().to_vec(), &bytes).map_err(|e| AptError::Serde(e.to_string()))?;
    let meta = [("layout".to_string(), "CHW".to_string())].into_iter().collect();
    if let Some(parent) = path.parent() {
        io(parent, fs::create_dir_all(parent))?;
    }
    safetensors::serialize_to_file([("image", view)], &Some(meta), path).map_err(|e| AptError::Serde(e.to_string()))
}

pub fn load_sidecar(path: &Path) -> Result<ImageTensor> {
    let bytes = io(path, fs::read(path))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| AptError::Serde(e.to_string()))?;
    let t = st.tensor("image").map_err(|e| AptError::Serde(e.to_string()))?;
    if t.dtype() != Dtype::F64 || t.shape().len() != 3 {
        return Err(AptError::Serde(format!("{}: expected an f64 CHW image", path.display())));
    }
    let data = t
        .data()
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok(ImageTensor(Tensor::new(t.shape().to_vec(), data)))
}

/// Everything about a campaign except its per-image records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignHeader {
    pub id: String,
    pub kind: AttackKind,
    pub mask: TermMask,
    pub d: Option<f64>,
    pub target: String,
    pub dataset_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub alpha: f64,
    pub max_iters: usize,
    /// Digest of the generator weights, identical before and after the campaign.
    pub generator_digest: String,
    pub requested: Vec<usize>,
    /// Inputs the target already misclassified; not attacked.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Campaign {
    pub header: CampaignHeader,
    pub records: Vec<AttackRecord>,
}

impl Campaign {
    pub fn emitted(&self) -> impl Iterator<Item = &AttackRecord> {
        self.records.iter().filter(|r| r.emitted)
    }

    pub fn image_ids(&self) -> Vec<usize> {
        self.records.iter().filter_map(|r| r.image_id).collect()
    }
}

fn stem(r: &AttackRecord, i: usize) -> String {
    match r.image_id {
        Some(id) => format!("{id:06}"),
        None => format!("sample-{i:06}"),
    }
}

/// Directory of a campaign under the runs root.
pub fn campaign_dir(runs: &Path, id: &str) -> PathBuf {
    runs.join(id)
}

/// Write `campaign` into `dir`. Existing content is an error unless `force`.
/// Fills in `image_ref` of every emitted record.
pub fn write_campaign(dir: &Path, campaign: &mut Campaign, force: bool) -> Result<()> {
    if dir.join(MANIFEST).exists() {
        if !force {
            return Err(AptError::OutputExists(dir.to_path_buf()));
        }
        io(dir, fs::remove_dir_all(dir))?;
    }
    io(dir, fs::create_dir_all(dir.join("images")))?;
    io(dir, fs::create_dir_all(dir.join("traces")))?;
    let mut manifest = String::new();
    for (i, r) in campaign.records.iter_mut().enumerate() {
        let s = stem(r, i);
        if let Some(img) = &r.image {
            let rel = format!("images/{s}.png");
            write_png(&dir.join(&rel), img, 1)?;
            save_sidecar(&dir.join(format!("images/{s}.safetensors")), img)?;
            r.image_ref = Some(rel);
        }
        let trace_path = dir.join(format!("traces/{s}.jsonl"));
        let mut t = String::new();
        for b in &r.trace {
            t.push_str(&serde_json::to_string(b)?);
            t.push('\n');
        }
        io(&trace_path, fs::write(&trace_path, t))?;
        manifest.push_str(&serde_json::to_string(r)?);
        manifest.push('\n');
    }
    let header_path = dir.join(HEADER);
    io(&header_path, fs::write(&header_path, serde_json::to_string_pretty(&campaign.header)? + "\n"))?;
    let mp = dir.join(MANIFEST);
    let mut f = io(&mp, fs::File::create(&mp))?;
    io(&mp, f.write_all(manifest.as_bytes()))?;
    Ok(())
}

/// Read a campaign back, reloading emitted pixels from their sidecars and traces.
pub fn read_campaign(dir: &Path) -> Result<Campaign> {
    let hp = dir.join(HEADER);
    if !hp.exists() {
        return Err(AptError::MissingPrerequisite {
            what: format!("campaign at {}", dir.display()),
            command: "attack".into(),
        });
    }
    let header: CampaignHeader = serde_json::from_str(&io(&hp, fs::read_to_string(&hp))?)?;
    let mp = dir.join(MANIFEST);
    let text = io(&mp, fs::read_to_string(&mp))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut r: AttackRecord = serde_json::from_str(line)?;
        let s = stem(&r, i);
        if r.emitted {
            r.image = Some(load_sidecar(&dir.join(format!("images/{s}.safetensors")))?);
        }
        let tp = dir.join(format!("traces/{s}.jsonl"));
        if tp.exists() {
            r.trace = io(&tp, fs::read_to_string(&tp))?
                .lines()
                .map(serde_json::from_str::<LossBreakdown>)
                .collect::<std::result::Result<_, _>>()?;
        }
        records.push(r);
    }
    Ok(Campaign { header, records })
}
