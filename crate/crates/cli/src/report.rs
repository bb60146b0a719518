//! Report files: a flat CSV table and a hierarchical JSON document.
//!
//! Both start with a format version. Floats in the CSV use fixed decimals so
//! that re-emitting a bundle yields byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::experiment::{Bundle, RatioRecord, RunRecord};

pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const CSV_COLUMNS: &[&str] = &[
    "format_version",
    "kind",
    "config_hash",
    "preset",
    "id",
    "label",
    "parallelism",
    "fused",
    "reuse",
    "pruning",
    "epsilon",
    "k",
    "profile",
    "total_cycles",
    "probs_mask_cycles",
    "offset_mm_cycles",
    "value_mm_cycles",
    "sample_aggregate_cycles",
    "msgs_cycles",
    "msgs_batches",
    "conflict_stalls",
    "detect_cycles",
    "dram_read_bits",
    "dram_write_bits",
    "sram_read_bits",
    "sram_write_bits",
    "fmap_fill_bits",
    "bi_read_bits",
    "mask_read_bits",
    "intermediate_dram_bits",
    "kept_samples",
    "sampling_value_bits",
    "point_keep_ratio",
    "fmap_keep_ratio",
    "max_resident_bits",
    "uniform_resident_bits",
    "dram_pj",
    "sram_pj",
    "total_pj",
    "output_hash",
    "ratio_a",
    "ratio_b",
    "speedup_total",
    "speedup_msgs",
    "energy_ratio",
    "dram_bits_delta",
];

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn run_row(b: &Bundle, r: &RunRecord) -> Vec<String> {
    let f = &r.spec.flags;
    let t = &r.traffic;
    let mut row = vec![
        REPORT_FORMAT_VERSION.to_string(),
        "run".into(),
        b.config_hash.clone(),
        b.preset.name().into(),
        r.id.to_string(),
        r.spec.label.clone(),
        format!("{:?}", f.parallelism).to_lowercase(),
        f.fused.to_string(),
        f.reuse.to_string(),
        f.pruning.to_string(),
        f6(r.spec.epsilon),
        f6(r.spec.k),
        format!("{:?}", r.spec.profile).to_lowercase(),
        r.total_cycles.to_string(),
    ];
    row.extend(r.phase_cycles.iter().map(u64::to_string));
    row.extend(
        [
            r.msgs_cycles,
            r.msgs_batches,
            r.conflict_stalls,
            r.detect_cycles,
            t.dram_read_bits,
            t.dram_write_bits,
            t.sram_read_bits,
            t.sram_write_bits,
            t.fmap_fill_bits,
            t.bi_read_bits,
            t.mask_read_bits,
            t.intermediate_dram_bits,
            r.kept_samples,
            r.sampling_value_bits,
        ]
        .iter()
        .map(u64::to_string),
    );
    row.push(f6(r.point_keep_ratio));
    row.push(f6(r.fmap_keep_ratio));
    row.push(r.max_resident_bits.to_string());
    row.push(r.uniform_resident_bits.to_string());
    row.push(format!("{:.3}", r.dram_pj));
    row.push(format!("{:.3}", r.sram_pj));
    row.push(format!("{:.3}", r.total_pj));
    row.push(r.output_hash.clone());
    row.extend(std::iter::repeat_n(String::new(), 6));
    row
}

fn ratio_row(b: &Bundle, r: &RatioRecord) -> Vec<String> {
    let mut row = vec![
        REPORT_FORMAT_VERSION.to_string(),
        "ratio".into(),
        b.config_hash.clone(),
        b.preset.name().into(),
        String::new(),
        r.label.clone(),
    ];
    row.resize(CSV_COLUMNS.len() - 6, String::new());
    row.extend([
        r.a.to_string(),
        r.b.to_string(),
        f6(r.speedup_total),
        f6(r.speedup_msgs),
        f6(r.energy_ratio),
        r.dram_bits_delta.to_string(),
    ]);
    row
}

pub fn to_csv(bundle: &Bundle) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for r in &bundle.runs {
        w.write_record(run_row(bundle, r))?;
    }
    for r in &bundle.ratios {
        w.write_record(ratio_row(bundle, r))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[derive(Serialize)]
struct JsonReport<'a> {
    format_version: u32,
    tool: &'static str,
    tool_version: &'static str,
    notes: [&'static str; 2],
    #[serde(flatten)]
    bundle: &'a Bundle,
}

pub fn to_json(bundle: &Bundle) -> Result<String> {
    let doc = JsonReport {
        format_version: REPORT_FORMAT_VERSION,
        tool: "defa",
        tool_version: env!("CARGO_PKG_VERSION"),
        notes: [
            "phases run back to back; softmax and point-mask generation do not overlap the offset projection",
            "cycles and pJ only; no wall-clock or power figures",
        ],
        bundle,
    };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

/// Writes `<preset>.csv`, `<preset>.json` and the config echo into `dir`.
pub fn emit(bundle: &Bundle, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let stem = bundle.preset.name();
    let files = [
        (dir.join(format!("{stem}.csv")), to_csv(bundle)?),
        (dir.join(format!("{stem}.json")), to_json(bundle)?),
        (dir.join(format!("{stem}.config.toml")), bundle.config.canonical()),
    ];
    let mut out = Vec::new();
    for (path, text) in files {
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        out.push(path);
    }
    Ok(out)
}

fn diff_json(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                match y.get(k) {
                    Some(vb) => diff_json(&format!("{path}.{k}"), va, vb, out),
                    None => out.push(format!("{path}.{k}: only in first")),
                }
            }
            for k in y.keys().filter(|k| !x.contains_key(*k)) {
                out.push(format!("{path}.{k}: only in second"));
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!("{path}: length {} vs {}", x.len(), y.len()));
            }
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                diff_json(&format!("{path}[{i}]"), va, vb, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

fn diff_csv(a: &str, b: &str, out: &mut Vec<String>) -> Result<()> {
    let read = |s: &str| -> Result<Vec<csv::StringRecord>> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(s.as_bytes());
        Ok(r.records().collect::<Result<_, _>>()?)
    };
    let (ra, rb) = (read(a)?, read(b)?);
    let header = ra.first().cloned().unwrap_or_default();
    if ra.len() != rb.len() {
        out.push(format!("row count {} vs {}", ra.len(), rb.len()));
    }
    for (i, (x, y)) in ra.iter().zip(&rb).enumerate() {
        for c in 0..x.len().max(y.len()) {
            let (va, vb) = (x.get(c).unwrap_or(""), y.get(c).unwrap_or(""));
            if va != vb {
                let col = header.get(c).map_or_else(|| c.to_string(), str::to_string);
                out.push(format!("row {i} {col}: {va} vs {vb}"));
            }
        }
    }
    Ok(())
}

/// Human-readable differences between two report files of the same kind.
pub fn diff_files(a: &Path, b: &Path) -> Result<Vec<String>> {
    let read = |p: &Path| std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()));
    let (ta, tb) = (read(a)?, read(b)?);
    let is_json = |p: &Path| p.extension().is_some_and(|e| e == "json");
    let mut out = Vec::new();
    match (is_json(a), is_json(b)) {
        (true, true) => {
            let va: Value = serde_json::from_str(&ta).with_context(|| format!("{} is not JSON", a.display()))?;
            let vb: Value = serde_json::from_str(&tb).with_context(|| format!("{} is not JSON", b.display()))?;
            diff_json("$", &va, &vb, &mut out);
        }
        (false, false) => diff_csv(&ta, &tb, &mut out)?,
        _ => bail!("cannot compare a JSON report with a CSV report"),
    }
    Ok(out)
}

/// One-line summary per run, for the terminal.
pub fn summary(bundle: &Bundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} (config {})", bundle.preset.name(), bundle.config_hash);
    for r in &bundle.runs {
        let _ = writeln!(
            s,
            "  [{}] {:<48} cycles {:>10}  msgs {:>9}  dram {:>12} b  {:>14.1} pJ",
            r.id,
            r.spec.label,
            r.total_cycles,
            r.msgs_cycles,
            r.traffic.dram_bits(),
            r.total_pj
        );
    }
    for r in &bundle.ratios {
        let _ = writeln!(
            s,
            "  {}: speedup {:.3} (msgs {:.3}), energy ratio {:.3}",
            r.label, r.speedup_total, r.speedup_msgs, r.energy_ratio
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::experiment::{run_experiment, Preset};

    fn small_bundle(preset: Preset) -> Bundle {
        let cfg = RunConfig {
            levels: "4x4,2x2".into(),
            d_in: 4,
            n_heads: 2,
            n_points: 2,
            blocks: 1,
            ..RunConfig::default()
        };
        run_experiment(preset, &cfg).unwrap()
    }

    #[test]
    fn empty_bundle_is_header_only() {
        let mut b = small_bundle(Preset::Simulate);
        b.runs.clear();
        let csv = to_csv(&b).unwrap();
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("format_version,kind,"));
    }

    #[test]
    fn two_runs_give_two_rows_and_a_ratio() {
        let b = small_bundle(Preset::FusionAblation);
        let csv = to_csv(&b).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,run,") && lines[2].starts_with("1,run,"));
        assert!(lines[3].starts_with("1,ratio,"));
        let width = CSV_COLUMNS.len();
        let mut r = csv::Reader::from_reader(csv.as_bytes());
        assert!(r.records().all(|rec| rec.unwrap().len() == width));
    }

    #[test]
    fn re_emitting_is_byte_identical() {
        let b = small_bundle(Preset::ReuseAblation);
        assert_eq!(to_csv(&b).unwrap(), to_csv(&b.clone()).unwrap());
        assert_eq!(to_json(&b).unwrap(), to_json(&b.clone()).unwrap());
        let json: Value = serde_json::from_str(&to_json(&b).unwrap()).unwrap();
        assert_eq!(json["format_version"], 1);
        assert_eq!(json["config"]["levels"], "4x4,2x2");
    }

    #[test]
    fn diff_reports_changed_cells() {
        let dir = tempfile::tempdir().unwrap();
        let b = small_bundle(Preset::FusionAblation);
        let a_dir = dir.path().join("a");
        let b_dir = dir.path().join("b");
        emit(&b, &a_dir).unwrap();
        let mut changed = b.clone();
        changed.runs[0].total_cycles += 1;
        emit(&changed, &b_dir).unwrap();
        let same = diff_files(&a_dir.join("fusion-ablation.csv"), &a_dir.join("fusion-ablation.csv")).unwrap();
        assert!(same.is_empty());
        let d = diff_files(&a_dir.join("fusion-ablation.csv"), &b_dir.join("fusion-ablation.csv")).unwrap();
        assert_eq!(d, vec![format!("row 1 total_cycles: {} vs {}", b.runs[0].total_cycles, b.runs[0].total_cycles + 1)]);
        let dj = diff_files(&a_dir.join("fusion-ablation.json"), &b_dir.join("fusion-ablation.json")).unwrap();
        assert_eq!(dj.len(), 1);
        assert!(dj[0].starts_with("$.runs[0].total_cycles"));
        assert!(diff_files(&a_dir.join("fusion-ablation.json"), &a_dir.join("fusion-ablation.csv")).is_err());
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, "x").unwrap();
        let err = emit(&small_bundle(Preset::Simulate), &file.join("sub")).unwrap_err();
        assert!(format!("{err:#}").contains("occupied"));
    }
}
