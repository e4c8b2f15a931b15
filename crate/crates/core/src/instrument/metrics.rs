use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub series: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(step: u64, series: impl Into<String>, value: f64) -> Self {
        MetricRecord {
            step,
            series: series.into(),
            value,
        }
    }
}

/// Single-writer sink for `metrics.jsonl`. Records are buffered and
/// written every `flush_every` pushes.
pub struct MetricSink {
    path: Option<PathBuf>,
    out: Option<BufWriter<File>>,
    pending: Vec<MetricRecord>,
    last_step: HashMap<String, u64>,
    flush_every: usize,
    all: Vec<MetricRecord>,
}

impl MetricSink {
    /// In-memory sink.
    pub fn memory() -> Self {
        MetricSink {
            path: None,
            out: None,
            pending: Vec::new(),
            last_step: HashMap::new(),
            flush_every: usize::MAX,
            all: Vec::new(),
        }
    }

    pub fn to_file(path: &Path, flush_every: usize) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = Self::memory();
        s.path = Some(path.to_path_buf());
        s.out = Some(BufWriter::new(f));
        s.flush_every = flush_every.max(1);
        Ok(s)
    }

    /// Rejects non-finite values and steps that go backwards within a
    /// series.
    pub fn push(&mut self, r: MetricRecord) -> Result<()> {
        if !r.value.is_finite() {
            return Err(Error::invalid(format!(
                "metric `{}` at step {} is not finite",
                r.series, r.step
            )));
        }
        if let Some(&last) = self.last_step.get(&r.series) {
            if r.step < last {
                return Err(Error::invalid(format!(
                    "metric `{}` step {} after step {last}",
                    r.series, r.step
                )));
            }
        }
        self.last_step.insert(r.series.clone(), r.step);
        self.all.push(r.clone());
        self.pending.push(r);
        if self.pending.len() >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn extend(&mut self, rs: impl IntoIterator<Item = MetricRecord>) -> Result<()> {
        rs.into_iter().try_for_each(|r| self.push(r))
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new("metrics.jsonl"));
            for r in self.pending.drain(..) {
                let line = serde_json::to_string(&r)?;
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
            out.flush().map_err(|e| Error::io(path, e))?;
        } else {
            self.pending.clear();
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.all
    }

    /// `(step, value)` pairs of one series.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        series_of(&self.all, name)
    }
}

impl Drop for MetricSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

pub fn series_of(records: &[MetricRecord], name: &str) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter(|r| r.series == name)
        .map(|r| (r.step, r.value))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes a CSV table with `.` decimals.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sink_checks_order_and_finiteness() {
        let mut s = MetricSink::memory();
        s.push(MetricRecord::new(1, "a", 1.0)).unwrap();
        s.push(MetricRecord::new(1, "b", 1.0)).unwrap();
        s.push(MetricRecord::new(2, "a", 1.0)).unwrap();
        assert!(s.push(MetricRecord::new(1, "a", 1.0)).is_err());
        assert!(s.push(MetricRecord::new(3, "a", f64::NAN)).is_err());
        assert_eq!(s.series("a"), vec![(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        {
            let mut s = MetricSink::to_file(&p, 2).unwrap();
            s.push(MetricRecord::new(1, "loss", 5.5)).unwrap();
            s.push(MetricRecord::new(2, "loss", 0.1 + 0.2)).unwrap();
            s.push(MetricRecord::new(3, "loss", 1e-300)).unwrap();
        }
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"step\":1,\"series\":\"loss\",\"value\":5.5}\n"));
        let back = read_metrics(&p).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[1].value, 0.1 + 0.2);
    }
}
