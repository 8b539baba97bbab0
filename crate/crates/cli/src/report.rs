//! Aggregation of per-run metrics into summary tables and plot data.
//!
//! A run is the artifact pair `<run_id>.csv` + `<run_id>.manifest` that
//! `pop cil` leaves in the metrics directory: the CSV carries the
//! accuracies, the manifest the fully-resolved settings. Aggregation
//! groups runs by config hash for the AA mean ± std table, and
//! marginalizes over single settings (fusion, prompt rows, buffer
//! capacity, shots per class) for the per-figure files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pop_core::{PopError, Result};

use crate::settings::{manifest_derived, Settings};

/// One completed run, reconstructed from its artifact pair.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub aa: f64,
    pub fusion: String,
    pub mode: String,
    pub prompt_rows: usize,
    pub buffer: usize,
    pub kshot: usize,
}

/// Canonical row order for the fusion table.
pub const FUSION_ORDER: [&str; 5] = [
    "ff-cat",
    "mean-of-all",
    "max-pool",
    "pop-only",
    "mean-and-cat",
];

fn fusion_rank(name: &str) -> usize {
    FUSION_ORDER
        .iter()
        .position(|&f| f == name)
        .unwrap_or(FUSION_ORDER.len())
}

/// Every run in `dir`, sorted by file name. A missing or empty directory
/// yields an empty list; a metrics CSV without its manifest is an error,
/// not a silent skip.
pub fn collect(dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Ok(Vec::new()),
    };
    let mut csvs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|s| s.to_str()) == Some("csv"))
        .collect();
    csvs.sort();
    csvs.iter().map(|p| read_run(p)).collect()
}

fn read_run(csv: &Path) -> Result<RunRecord> {
    let text = std::fs::read_to_string(csv)?;
    let (run_id, seed, aa) = summary_of(&text)
        .map_err(|m| PopError::format(format!("{}: {m}", csv.display())))?;

    let mpath = csv.with_extension("manifest");
    let mtext = std::fs::read_to_string(&mpath).map_err(|_| {
        PopError::format(format!(
            "run {run_id} has no manifest at {}",
            mpath.display()
        ))
    })?;
    let derived = manifest_derived(&mtext);
    if let Some(mid) = derived.get("run_id") {
        if *mid != run_id {
            return Err(PopError::format(format!(
                "{} belongs to run {run_id} but its manifest names {mid}",
                csv.display()
            )));
        }
    }
    let mut s = Settings::default();
    s.apply_text(&mtext)
        .map_err(|e| PopError::format(format!("manifest {}: {e}", mpath.display())))?;

    let config_hash = derived
        .get("config_hash")
        .cloned()
        .or_else(|| run_id.rsplit_once("-s").map(|(h, _)| h.to_string()))
        .unwrap_or_default();

    Ok(RunRecord {
        seed,
        config_hash,
        aa,
        fusion: s.get("fusion").to_string(),
        mode: s.get("mode").to_string(),
        prompt_rows: s.usize_of("prompt_rows")?,
        buffer: s.usize_of("buffer")?,
        kshot: s.usize_of("kshot")?,
    })
}

/// (run id, seed, AA) from a metrics CSV's summary row.
fn summary_of(text: &str) -> std::result::Result<(String, u64, f64), String> {
    let mut lines = text.lines();
    if lines.next() != Some("run_id,seed,task,split,metric,value") {
        return Err("not a metrics file (unexpected header)".into());
    }
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 6 && f[3] == "summary" && f[4] == "average_accuracy" {
            let seed = f[1].parse().map_err(|_| format!("bad seed `{}`", f[1]))?;
            let aa = f[5].parse().map_err(|_| format!("bad accuracy `{}`", f[5]))?;
            return Ok((f[0].to_string(), seed, aa));
        }
    }
    Err("missing average_accuracy summary row".into())
}

/// Mean and population standard deviation (a single run reports 0).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs sharing one config hash, with AA aggregated across their seeds.
#[derive(Debug, Clone)]
pub struct ConfigGroup {
    pub hash: String,
    pub fusion: String,
    pub mode: String,
    pub prompt_rows: usize,
    pub buffer: usize,
    pub kshot: usize,
    pub seeds: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

pub fn group_by_config(records: &[RunRecord]) -> Vec<ConfigGroup> {
    let mut by_hash: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_hash.entry(&r.config_hash).or_default().push(r);
    }
    let mut groups: Vec<ConfigGroup> = by_hash
        .into_iter()
        .map(|(hash, rs)| {
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            let aas: Vec<f64> = rs.iter().map(|r| r.aa).collect();
            let (mean, std) = mean_std(&aas);
            let first = rs[0];
            ConfigGroup {
                hash: hash.to_string(),
                fusion: first.fusion.clone(),
                mode: first.mode.clone(),
                prompt_rows: first.prompt_rows,
                buffer: first.buffer,
                kshot: first.kshot,
                seeds,
                mean,
                std,
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        (fusion_rank(&a.fusion), a.prompt_rows, a.buffer, a.kshot, &a.hash).cmp(&(
            fusion_rank(&b.fusion),
            b.prompt_rows,
            b.buffer,
            b.kshot,
            &b.hash,
        ))
    });
    groups
}

/// AA aggregated per value of one numeric setting, ascending.
pub fn numeric_rows(
    records: &[RunRecord],
    key: impl Fn(&RunRecord) -> usize,
) -> Vec<(String, usize, f64, f64)> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        by.entry(key(r)).or_default().push(r.aa);
    }
    by.into_iter()
        .map(|(k, aas)| {
            let (mean, std) = mean_std(&aas);
            (k.to_string(), aas.len(), mean, std)
        })
        .collect()
}

/// AA aggregated per fusion method, in [`FUSION_ORDER`].
pub fn fusion_rows(records: &[RunRecord]) -> Vec<(String, usize, f64, f64)> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        by.entry(fusion_rank(&r.fusion)).or_default().push(r.aa);
    }
    by.into_iter()
        .map(|(rank, aas)| {
            let name = FUSION_ORDER.get(rank).copied().unwrap_or("unknown");
            let (mean, std) = mean_std(&aas);
            (name.to_string(), aas.len(), mean, std)
        })
        .collect()
}

/// One plot-data file: a key column plus run count and AA statistics.
pub fn key_csv(key: &str, rows: &[(String, usize, f64, f64)]) -> String {
    let mut out = format!("{key},runs,aa_mean,aa_std\n");
    for (k, n, mean, std) in rows {
        out.push_str(&format!("{k},{n},{mean},{std}\n"));
    }
    out
}

pub fn summary_csv(groups: &[ConfigGroup]) -> String {
    let mut out = String::from(
        "config_hash,fusion,mode,prompt_rows,buffer,kshot,runs,seeds,aa_mean,aa_std\n",
    );
    for g in groups {
        let seeds: Vec<String> = g.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            g.hash,
            g.fusion,
            g.mode,
            g.prompt_rows,
            g.buffer,
            g.kshot,
            g.seeds.len(),
            seeds.join(";"),
            g.mean,
            g.std
        ));
    }
    out
}
