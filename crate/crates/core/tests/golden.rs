//! Frozen reports for every bundled scenario at its own seed.
//! Regenerate with `UPDATE_GOLDEN=1 cargo test --test golden`.

use std::path::PathBuf;

use hemsim::scenario::{bundled, run_once, RunReport, BUNDLED};

fn golden_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Record layout of each JSONL file: file name, then the keys of every distinct record shape.
fn record_schema(report: &RunReport) -> String {
    let mut out = String::new();
    for (file, body) in &report.files {
        if !file.ends_with(".jsonl") {
            continue;
        }
        let mut shapes = std::collections::BTreeSet::new();
        for line in body.lines() {
            let value: serde_json::Value = serde_json::from_str(line).unwrap();
            let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
            shapes.insert(keys.join(","));
        }
        out.push_str(file);
        out.push('\n');
        for shape in shapes {
            out.push_str("  ");
            out.push_str(&shape);
            out.push('\n');
        }
    }
    out
}

#[test]
fn bundled_reports_match_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let mut mismatches = Vec::new();
    for (name, _) in BUNDLED {
        let config = bundled(name).unwrap();
        let report = run_once(&config, config.seed).unwrap();
        let actual = [
            ("summary.txt", report.files["summary.txt"].clone()),
            ("metrics.json", report.files["metrics.json"].clone()),
            ("records.txt", record_schema(&report)),
        ];
        let dir = golden_dir(name);
        for (file, body) in actual {
            let path = dir.join(file);
            if update {
                std::fs::create_dir_all(&dir).unwrap();
                std::fs::write(&path, &body).unwrap();
                continue;
            }
            let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            if expected != body {
                mismatches.push(format!("{name}/{file}"));
            }
        }
    }
    assert!(mismatches.is_empty(), "reports differ from golden files: {mismatches:?}");
}
