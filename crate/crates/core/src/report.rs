//! Plain-text tables, SVG plots and image grids rendered from stored run outputs.
//! Rendering is a pure function of the files read, so output bytes are stable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::artifacts::{grid_png, read_campaign, Campaign, HEADER};
use crate::error::{AptError, Result};
use crate::evaluate::{EvalReport, TransferMatrix};
use crate::models::ImageTensor;
use crate::pipeline::{AblationReport, RobustifyReport, Summary, SweepReport};
use crate::tensor::Tensor;

/// Left-aligned columns separated by two spaces; a table without rows reads `empty`.
pub fn table(title: &str, headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("{title}\n");
    if rows.is_empty() {
        out.push_str("empty\n");
        return out;
    }
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let s: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    out.push_str(&line(headers.to_vec()));
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_else(|| "-".into())
}

pub fn campaign_table(c: &Campaign) -> String {
    let t = &c.header.target;
    let rows: Vec<Vec<String>> = c
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.image_id.map(|v| v.to_string()).unwrap_or_else(|| format!("s{i}")),
                r.true_class.to_string(),
                r.c_any.to_string(),
                format!("{:?}", r.stop_reason),
                r.emitted.to_string(),
                opt(r.l_pt_at_emission),
                r.fooled.get(t).map(|b| b.to_string()).unwrap_or_else(|| "-".into()),
                opt(r.conf_before),
                opt(r.conf_after),
            ]
        })
        .collect();
    table(
        &format!("campaign {} (target {})", c.header.id, t),
        &["image", "class", "c_any", "stop", "emitted", "l_pt", "fooled", "conf_before", "conf_after"],
        &rows,
    )
}

pub fn eval_tables(r: &EvalReport) -> String {
    let rows: Vec<Vec<String>> = r
        .real
        .iter()
        .map(|(id, s)| {
            let a = r.attacked.get(id);
            vec![
                id.clone(),
                f(s.acc),
                f(s.conf),
                a.map(|a| f(a.acc)).unwrap_or_else(|| "-".into()),
                a.map(|a| f(a.conf)).unwrap_or_else(|| "-".into()),
            ]
        })
        .collect();
    let mut out = table(
        &format!("accuracy and confidence, campaign {} ({} inputs, {} emitted)", r.campaign, r.inputs, r.emitted),
        &["classifier", "real_acc", "real_conf", "attack_acc", "attack_conf"],
        &rows,
    );
    out.push('\n');
    let fid: Vec<Vec<String>> = r.fid.iter().map(|(k, v)| vec![k.clone(), f(*v)]).collect();
    out.push_str(&table("fid", &["pair", "fid"], &fid));
    if let Some(t) = &r.transfer {
        out.push('\n');
        out.push_str(&transfer_table(t));
    }
    out.push('\n');
    out.push_str(&format!("class preservation: {}\n", opt(r.class_preservation)));
    out
}

pub fn transfer_table(t: &TransferMatrix) -> String {
    let mut headers = vec!["source"];
    headers.extend(t.evaluated.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = t
        .sources
        .iter()
        .zip(&t.acc)
        .map(|(s, row)| std::iter::once(s.clone()).chain(row.iter().map(|v| f(*v))).collect())
        .collect();
    table("transfer accuracy (rows attack source, columns evaluated)", &headers, &rows)
}

fn summary_row(name: String, s: &Summary) -> Vec<String> {
    vec![
        name,
        s.inputs.to_string(),
        s.emitted.to_string(),
        f(s.fooling_rate),
        opt(s.mean_l_pt),
        opt(s.realness),
        opt(s.class_preservation),
    ]
}

const SUMMARY_HEADERS: [&str; 7] = ["run", "inputs", "emitted", "fooling", "mean_l_pt", "realness", "preserved"];

pub fn ablation_table(r: &AblationReport) -> String {
    let rows: Vec<Vec<String>> = r.variants.iter().map(|(k, s)| summary_row(k.clone(), s)).collect();
    table(&format!("ablation, target {} seed {}", r.target, r.seed), &SUMMARY_HEADERS, &rows)
}

pub fn sweep_table(r: &SweepReport) -> String {
    let rows: Vec<Vec<String>> = r.rows.iter().map(|row| summary_row(format!("d={}", row.d), &row.summary)).collect();
    table(&format!("distance sweep, target {} seed {}", r.target, r.seed), &SUMMARY_HEADERS, &rows)
}

pub fn robustify_table(r: &RobustifyReport) -> String {
    let p = &r.paired;
    let rows = vec![
        vec![p.before_id.clone(), f(p.attack[0].acc), f(p.attack[0].conf), f(p.clean[0].acc)],
        vec![p.after_id.clone(), f(p.attack[1].acc), f(p.attack[1].conf), f(p.clean[1].acc)],
    ];
    table(
        &format!("fine-tuning on {} ({} images), evaluated on {}", r.finetune_campaign, r.finetune_images, r.eval_campaign),
        &["classifier", "attack_acc", "attack_conf", "clean_acc"],
        &rows,
    )
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Per-record `l_pt` (solid) and total objective (dashed) against the iteration.
pub fn loss_trace_svg(c: &Campaign) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let traces: Vec<_> = c.records.iter().filter(|r| !r.trace.is_empty()).collect();
    let max_len = traces.iter().map(|r| r.trace.len()).max().unwrap_or(1).max(2) as f64;
    let max_y = traces
        .iter()
        .flat_map(|r| r.trace.iter().flat_map(|b| [b.l_pt, b.total]))
        .filter(|v| v.is_finite())
        .fold(c.header.d.unwrap_or(0.0), f64::max)
        .max(1e-9);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (max_len - 1.0);
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v.clamp(0.0, max_y) / max_y);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="20" font-family="monospace" font-size="12">{} loss traces, max {:.4}</text>"#,
        c.header.id, max_y
    );
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {} L{pad} {} L{} {}" stroke="black" fill="none"/>"#,
        pad,
        h - pad,
        w - pad,
        h - pad
    );
    if let Some(d) = c.header.d {
        let _ = writeln!(
            s,
            r##"<line x1="{pad}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="#888" stroke-dasharray="2 2"/>"##,
            y(d),
            w - pad,
            y(d)
        );
    }
    for (k, r) in traces.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (dash, pick) in [("", 0usize), (r#" stroke-dasharray="4 2""#, 1)] {
            let pts: Vec<String> = r
                .trace
                .iter()
                .enumerate()
                .map(|(i, b)| format!("{:.2},{:.2}", x(i), y(if pick == 0 { b.l_pt } else { b.total })))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1"{dash}/>"#,
                pts.join(" ")
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Accuracy cells shaded from white (0) to dark blue (1).
pub fn heatmap_svg(t: &TransferMatrix) -> String {
    let (cell, left, top) = (80.0, 100.0, 60.0);
    let w = left + cell * t.evaluated.len() as f64 + 10.0;
    let h = top + cell * t.sources.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (j, e) in t.evaluated.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="12" text-anchor="middle">{e}</text>"#,
            left + cell * (j as f64 + 0.5),
            top - 10.0
        );
    }
    for (i, src) in t.sources.iter().enumerate() {
        let cy = top + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="12" text-anchor="end">{src}</text>"#,
            left - 8.0,
            cy + cell / 2.0
        );
        for (j, v) in t.acc[i].iter().enumerate() {
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let text = if *v > 0.5 { "white" } else { "black" };
            let cx = left + cell * j as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{cx:.1}" y="{cy:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="black"/>"#
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="14" text-anchor="middle" fill="{text}">{v:.3}</text>"#,
                cx + cell / 2.0,
                cy + cell / 2.0 + 5.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn blank_like(img: &ImageTensor) -> ImageTensor {
    ImageTensor(Tensor::zeros(img.0.shape()))
}

/// One row per original image: the original followed by each column's emitted image,
/// mid-gray where nothing was emitted.
pub fn comparison_grid(path: &Path, originals: &[(usize, ImageTensor)], columns: &[&Campaign]) -> Result<()> {
    let rows: Vec<Vec<ImageTensor>> = originals
        .iter()
        .map(|(id, img)| {
            std::iter::once(img.clone())
                .chain(columns.iter().map(|c| {
                    c.records
                        .iter()
                        .find(|r| r.image_id == Some(*id))
                        .and_then(|r| r.image.clone())
                        .unwrap_or_else(|| blank_like(img))
                }))
                .collect()
        })
        .collect();
    grid_png(path, &rows, 2)
}

fn write(path: PathBuf, body: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| AptError::io(p, e))?;
    }
    fs::write(&path, body).map_err(|e| AptError::io(&path, e))?;
    out.push(path);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| AptError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Render everything stored under `runs/<id>` into `runs/<id>/report/`; returns the files written.
pub fn render_run(runs: &Path, id: &str) -> Result<Vec<PathBuf>> {
    let dir = runs.join(id);
    if !dir.is_dir() {
        return Err(AptError::MissingPrerequisite {
            what: format!("run `{id}` under {}", runs.display()),
            command: "attack".into(),
        });
    }
    let out_dir = dir.join("report");
    let mut out = Vec::new();
    if dir.join(HEADER).exists() {
        let c = read_campaign(&dir)?;
        write(out_dir.join("records.txt"), &campaign_table(&c), &mut out)?;
        write(out_dir.join("loss_traces.svg"), &loss_trace_svg(&c), &mut out)?;
        let ev = dir.join("eval.json");
        if ev.exists() {
            let r: EvalReport = read_json(&ev)?;
            write(out_dir.join("eval.txt"), &eval_tables(&r), &mut out)?;
            if let Some(t) = &r.transfer {
                write(out_dir.join("transfer_heatmap.svg"), &heatmap_svg(t), &mut out)?;
            }
        }
    }
    let rp = dir.join("report.json");
    if rp.exists() {
        let v: serde_json::Value = read_json(&rp)?;
        let text = if v.get("variants").is_some() {
            ablation_table(&serde_json::from_value(v)?)
        } else {
            sweep_table(&serde_json::from_value(v)?)
        };
        write(out_dir.join("summary.txt"), &text, &mut out)?;
    }
    let pp = dir.join("paired_report.json");
    if pp.exists() {
        let r: RobustifyReport = read_json(&pp)?;
        write(out_dir.join("paired.txt"), &robustify_table(&r), &mut out)?;
    }
    if out.is_empty() {
        return Err(AptError::InvalidArgument(format!("nothing to render under {}", dir.display())));
    }
    Ok(out)
}
