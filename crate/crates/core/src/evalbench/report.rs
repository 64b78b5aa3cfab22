use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BenchReport, Result, Stat};
use crate::styletext::hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown];

    fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => "report.json",
            ReportFormat::Csv => "report.csv",
            ReportFormat::Markdown => "report.md",
        }
    }
}

pub fn load_report(path: &Path) -> Result<BenchReport> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Writes `r` into `dir` in each format and returns the written paths.
pub fn emit_report(r: &BenchReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for &f in formats {
        let path = dir.join(f.file_name());
        let bytes = match f {
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(r)?;
                s.push('\n');
                s.into_bytes()
            }
            ReportFormat::Csv => to_csv(r)?,
            ReportFormat::Markdown => to_markdown(r).into_bytes(),
        };
        std::fs::write(&path, bytes)?;
        out.push(path);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per (method, seed, domain).
fn to_csv(r: &BenchReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "method", "seed", "domain", "split", "n", "dice", "hd95", "hd95_sentinels"])?;
    for row in &r.rows {
        let splits = std::iter::once(("id", &row.id)).chain(row.ood.iter().map(|d| ("ood", d)));
        for (split, d) in splits {
            w.write_record([
                row.run_id.clone(),
                row.method.to_string(),
                row.seed.to_string(),
                d.domain.clone(),
                split.to_string(),
                d.n.to_string(),
                format!("{}", d.dice),
                opt(d.hd95),
                d.hd95_sentinels.to_string(),
            ])?;
        }
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn pm(s: &Stat, scale: f64) -> String {
    format!("{:.2} ± {:.2}", s.mean * scale, s.std * scale)
}

fn to_markdown(r: &BenchReport) -> String {
    let mut s = String::new();
    let seeds = r.config.seeds.len();
    let _ = writeln!(s, "# Benchmark report\n");
    let _ = writeln!(s, "Mean ± std over {seeds} seed(s). Dice in points (x100), HD95 in pixels.\n");

    let _ = writeln!(s, "## Segmentation by domain\n");
    let _ = writeln!(s, "| Method | Domain | Dice | HD95 |");
    let _ = writeln!(s, "|---|---|---|---|");
    for m in &r.summary {
        for d in &m.domains {
            let hd = d.hd95.as_ref().map(|h| pm(h, 1.0)).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(s, "| {} | {} | {} | {} |", m.method, d.domain, pm(&d.dice, 100.0), hd);
        }
    }

    let _ = writeln!(s, "\n## Ablation\n");
    let _ = writeln!(s, "| Method | Avg OOD Dice | Gap (ID − OOD) | Domain probe acc. |");
    let _ = writeln!(s, "|---|---|---|---|");
    for m in &r.summary {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            m.method,
            pm(&m.avg_ood_dice, 100.0),
            pm(&m.gap, 100.0),
            pm(&m.probe_accuracy, 100.0)
        );
    }
    if !r.orderings.is_empty() {
        let _ = writeln!(s, "\nSeeds where the first method has higher avg OOD Dice:\n");
        for o in &r.orderings {
            let _ = writeln!(s, "- {} > {}: {}/{}", o.better, o.other, o.wins, o.seeds);
        }
    }
    for c in &r.spot_checks {
        let _ = writeln!(
            s,
            "- seed {}: lad at lambda 0 {} erm_lambda0",
            c.seed,
            if c.identical { "matches" } else { "DIFFERS FROM" }
        );
    }

    if let Some(st) = &r.intervention {
        let _ = writeln!(s, "\n## Intervention study ({} cases)\n", st.cases.len());
        let _ = writeln!(s, "| Arm | Dice | HD95 |");
        let _ = writeln!(s, "|---|---|---|");
        let hd = |h: &Option<Stat>| h.as_ref().map(|h| pm(h, 1.0)).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(s, "| No intervention | {} | {} |", pm(&st.dice_a, 100.0), hd(&st.hd95_a));
        let _ = writeln!(s, "| Canonical command | {} | {} |", pm(&st.dice_b, 100.0), hd(&st.hd95_b));
        let _ = writeln!(
            s,
            "\nDice improved on {}/{} cases.",
            st.improved,
            st.cases.len()
        );
    }
    if !r.notes.is_empty() {
        let _ = writeln!(s, "\n---\n");
        for n in &r.notes {
            let _ = writeln!(s, "{n}\n");
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Size and SHA-256 of `file`, with its path relative to `dir` when it
/// lies under it.
pub fn file_entry(dir: &Path, file: &Path) -> Result<ManifestEntry> {
    let bytes = std::fs::read(file)?;
    let rel = file.strip_prefix(dir).unwrap_or(file);
    Ok(ManifestEntry {
        path: rel.to_string_lossy().replace('\\', "/"),
        bytes: bytes.len() as u64,
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

/// Hashes `files` (paths under `dir`) into `dir/manifest.json`.
pub fn write_manifest(dir: &Path, files: &[PathBuf]) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        entries.push(file_entry(dir, f)?);
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    entries.dedup();
    let m = Manifest { entries };
    let mut text = serde_json::to_string_pretty(&m)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(m)
}
