//! Line-delimited JSON records and the consolidated run table.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::train::StageReport;

/// File name of the per-stage summaries inside a run directory.
pub const STAGES_FILE: &str = "stages.jsonl";
/// File name of the per-step log inside a run directory.
pub const STEPS_FILE: &str = "steps.jsonl";

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Appends records one per line.
pub struct JsonlWriter {
    path: PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

impl JsonlWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: std::io::BufWriter::new(file),
            path,
        })
    }

    pub fn write<T: Serialize>(&mut self, item: &T) -> Result<()> {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Every stage record under `dir`, searched recursively in path order.
pub fn collect_stage_reports(dir: impl AsRef<Path>) -> Result<Vec<StageReport>> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    find_files(dir, STAGES_FILE, &mut files)?;
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_jsonl::<StageReport>(&f)?);
    }
    if out.is_empty() {
        return Err(Error::NoRecords(dir.display().to_string()));
    }
    Ok(out)
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            find_files(&path, name, out)?;
        } else if path.file_name().is_some_and(|n| n == name) {
            out.push(path);
        }
    }
    Ok(())
}

/// One row per stage, grouped by pipeline and seed.
pub fn render_table(reports: &[StageReport]) -> String {
    let mut rows: Vec<&StageReport> = reports.iter().collect();
    rows.sort_by(|a, b| (&a.pipeline, a.seed, a.stage).cmp(&(&b.pipeline, b.seed, b.stage)));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>6} {:>5} {:<16} {:>6} {:>10} {:>7} {:>10} {:>12}",
        "pipeline", "seed", "stage", "label", "steps", "sparsity%", "ratio", "eval_loss", "polarization"
    );
    let mut last: Option<(&str, u64)> = None;
    for r in rows {
        let key = (r.pipeline.as_str(), r.seed);
        let (name, seed) = if last == Some(key) {
            (String::new(), String::new())
        } else {
            (r.pipeline.clone(), r.seed.to_string())
        };
        last = Some(key);
        let pol = r.polarization.map_or("-".to_string(), |p| format!("{p:.4}"));
        let ratio = r.params_before as f64 / r.params_after as f64;
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>5} {:<16} {:>6} {:>10.2} {:>7.3} {:>10.5} {:>12}",
            name, seed, r.stage, r.label, r.steps, r.sparsity_pct, ratio, r.eval_loss, pol
        );
    }
    out
}
