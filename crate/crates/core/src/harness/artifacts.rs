//! On-disk layout of an experiment directory.
//!
//! ```text
//! <out>/dataset.jsonl
//! <out>/checkpoints/<name>.json
//! <out>/eval/<name>/report.json
//! <out>/eval/<name>/traces.jsonl
//! <out>/grid/grid.csv, grid.json
//! <out>/report/...
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::expert::Dataset;
use crate::harness::eval::EvalReport;
use crate::harness::HarnessError;
use crate::network::Checkpoint;
use crate::simulator::{read_trace, write_trace, TraceRecord};

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| HarnessError::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingInputs(vec![path.display().to_string()]));
    }
    Ok(BufReader::new(File::open(path).map_err(|e| HarnessError::io(path, e))?))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| HarnessError::io(path, e))?;
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn list(dir: &Path, keep: impl Fn(&Path) -> Option<String>) -> Result<Vec<String>, HarnessError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))? {
        let entry = entry.map_err(|e| HarnessError::io(dir, e))?;
        if let Some(n) = keep(&entry.path()) {
            names.push(n);
        }
    }
    names.sort();
    Ok(names)
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.json"))
    }

    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }

    pub fn grid_dir(&self) -> PathBuf {
        self.root.join("grid")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn write_dataset(&self, ds: &Dataset) -> Result<(), HarnessError> {
        let path = self.dataset_path();
        let mut w = create(&path)?;
        ds.write_jsonl(&mut w).map_err(|e| HarnessError::io(&path, e))?;
        w.flush().map_err(|e| HarnessError::io(&path, e))
    }

    pub fn read_dataset(&self) -> Result<Dataset, HarnessError> {
        let path = self.dataset_path();
        Dataset::read_jsonl(open(&path)?).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn write_checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<(), HarnessError> {
        let path = self.checkpoint_path(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        Ok(ck.save(&path)?)
    }

    pub fn read_checkpoint(&self, name: &str) -> Result<Checkpoint, HarnessError> {
        let path = self.checkpoint_path(name);
        if !path.exists() {
            return Err(HarnessError::MissingInputs(vec![path.display().to_string()]));
        }
        Ok(Checkpoint::load(&path)?)
    }

    pub fn checkpoint_names(&self) -> Result<Vec<String>, HarnessError> {
        list(&self.root.join("checkpoints"), |p| {
            (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(String::from))?
        })
    }

    pub fn write_eval(&self, report: &EvalReport, traces: &[TraceRecord]) -> Result<(), HarnessError> {
        let dir = self.eval_dir(&report.agent);
        write_json(&dir.join("report.json"), report)?;
        let path = dir.join("traces.jsonl");
        let mut w = create(&path)?;
        write_trace(&mut w, traces)?;
        w.flush().map_err(|e| HarnessError::io(&path, e))
    }

    pub fn read_traces(&self, name: &str) -> Result<Vec<TraceRecord>, HarnessError> {
        Ok(read_trace(open(&self.eval_dir(name).join("traces.jsonl"))?)?)
    }

    /// Agents with recorded evaluation traces.
    pub fn eval_names(&self) -> Result<Vec<String>, HarnessError> {
        list(&self.root.join("eval"), |p| {
            p.join("traces.jsonl").exists().then(|| p.file_name()?.to_str().map(String::from))?
        })
    }
}
