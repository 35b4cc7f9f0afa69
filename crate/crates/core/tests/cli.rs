use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/tiny.toml");

fn aptbench(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aptbench"))
        .env("APTBENCH_HOME", home)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(home: &Path, args: &[&str]) -> String {
    let mut full = vec!["--config", TINY];
    full.extend_from_slice(args);
    let out = aptbench(home, &full);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files_under(dir: &Path, ext: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if ext.iter().any(|x| p.extension().is_some_and(|e| e == *x)) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = aptbench(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["ingest", "pretrain", "invert", "attack", "eval", "finetune", "ablate", "sweep-d", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(aptbench(dir.path(), &["attack", "--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(aptbench(dir.path(), &["no-such-command"]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(TINY).unwrap() + "\nsurprise = 1\n").unwrap();
    let out = aptbench(dir.path(), &["--config", bad.to_str().unwrap(), "ingest"]);
    assert_eq!(out.status.code(), Some(1));
    let out = aptbench(dir.path(), &["--config", TINY, "--workers", "0", "ingest"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_prerequisites_name_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = aptbench(dir.path(), &["--config", TINY, "pretrain"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aptbench ingest"));
    ok(dir.path(), &["ingest"]);
    let out = aptbench(dir.path(), &["--config", TINY, "attack"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aptbench pretrain"));
    let out = aptbench(dir.path(), &["--config", TINY, "report", "nothing-here"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ok(dir.path(), &["ingest"]).contains("created"));
    let before = files_under(dir.path(), &["json", "png", "bin", "safetensors"]);
    assert!(ok(dir.path(), &["ingest"]).contains("verified"));
    assert_eq!(before, files_under(dir.path(), &["json", "png", "bin", "safetensors"]));
}

fn full_flow(home: &Path, seed: &str) -> Vec<String> {
    let mut lines = Vec::new();
    for args in [
        vec!["ingest"],
        vec!["pretrain"],
        vec!["invert", "--with-train"],
        vec!["attack", "--workers", "2"],
        vec!["attack", "--kind", "latent-only"],
        vec!["attack", "--kind", "random-sample", "--samples", "4"],
        vec!["ablate"],
        vec!["sweep-d"],
        vec!["finetune"],
    ] {
        let mut a = vec!["--seed", seed];
        a.extend(args);
        lines.extend(ok(home, &a).lines().map(str::to_string));
    }
    lines
}

#[test]
fn full_pipeline_is_reproducible_and_reports_are_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_flow(a.path(), "5");
    full_flow(b.path(), "5");
    let ma = files_under(&a.path().join("runs"), &["jsonl", "json"]);
    let mb = files_under(&b.path().join("runs"), &["jsonl", "json"]);
    assert!(ma.keys().any(|k| k.ends_with("manifest.jsonl")));
    assert_eq!(ma.keys().collect::<Vec<_>>(), mb.keys().collect::<Vec<_>>());
    for (k, v) in &ma {
        assert!(mb[k] == *v, "{} differs between runs", k.display());
    }

    let runs: Vec<String> = fs::read_dir(a.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let apt = runs.iter().find(|r| r.starts_with("apt-")).unwrap().clone();
    let line = ok(a.path(), &["--seed", "5", "eval", &apt]);
    assert!(line.starts_with(&format!("eval {apt}:")), "{line}");

    let mut args = vec!["--seed", "5", "report"];
    args.extend(runs.iter().map(String::as_str));
    let listed = ok(a.path(), &args);
    let first = files_under(&a.path().join("runs"), &["txt", "svg"]);
    assert!(listed.lines().count() >= runs.len());
    for l in listed.lines() {
        assert!(Path::new(l).exists(), "{l} listed but missing");
    }
    assert!(first.keys().any(|k| k.ends_with("transfer_heatmap.svg")));
    ok(a.path(), &args);
    assert_eq!(first, files_under(&a.path().join("runs"), &["txt", "svg"]));

    let ids: Vec<String> = fs::read_dir(a.path().join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let abl = ids.iter().filter(|r| r.starts_with("ablate-")).count();
    assert_eq!(abl, 5);
    assert!(a.path().join("runs").join(ids.iter().find(|r| r.starts_with("ablation-")).unwrap()).join("grid.png").exists());
}

#[test]
fn reruns_reuse_outputs_and_force_overwrites() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    ok(h, &["ingest"]);
    ok(h, &["pretrain"]);
    let first = ok(h, &["attack"]);
    let again = ok(h, &["attack"]);
    assert_eq!(first, again);
    let forced = ok(h, &["--force", "attack"]);
    assert_eq!(first, forced);
    assert!(ok(h, &["pretrain"]).contains("up to date"));
}

#[test]
fn empty_campaign_reports_empty_table() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    ok(h, &["ingest"]);
    ok(h, &["pretrain"]);
    let line = ok(h, &["attack", "--kind", "random-sample", "--samples", "0"]);
    let id = line.split_whitespace().nth(1).unwrap().trim_end_matches(':').to_string();
    assert!(ok(h, &["eval", &id]).contains("empty"));
    let listed = ok(h, &["report", &id]);
    let table = listed.lines().find(|l| l.ends_with("records.txt")).unwrap();
    assert!(fs::read_to_string(table).unwrap().lines().any(|l| l == "empty"));
}
