//! The JSONL record stream and its aggregation into run summaries and CSV
//! traces.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{EngineConfig, PredictionRecord};
use crate::error::{Error, Result};
use crate::zeroshot::ZeroShotStats;

/// First line of every stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub classes: usize,
    pub samples: usize,
    pub views: usize,
    pub config: EngineConfig,
    pub calibration: Option<ZeroShotStats>,
}

/// Per-class thresholds after `t` processed samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSnapshot {
    pub t: u64,
    pub thresholds: Vec<f64>,
    pub sigma: Vec<f64>,
    pub m: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamLine {
    Header(StreamHeader),
    Prediction(PredictionRecord),
    Thresholds(ThresholdSnapshot),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub sample: u64,
    pub running_accuracy: Option<f64>,
    pub cache_accuracy: Option<f64>,
    pub cache_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub samples: u64,
    pub labeled: u64,
    pub correct: u64,
    /// `None` when no sample carried a label.
    pub accuracy: Option<f64>,
    /// Indexed by true class.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub admitted: u64,
    pub evicted: u64,
    pub faults: u64,
    pub final_cache_size: usize,
    pub final_cache_accuracy: Option<f64>,
    pub trace: Vec<TracePoint>,
    pub threshold_trace: Vec<ThresholdSnapshot>,
}

impl RunSummary {
    pub fn builder(classes: usize) -> SummaryBuilder {
        SummaryBuilder {
            class_correct: vec![0; classes],
            class_total: vec![0; classes],
            ..SummaryBuilder::default()
        }
    }

    pub fn predictions_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "sample,running_accuracy,cache_accuracy,cache_size")?;
        for p in &self.trace {
            writeln!(
                out,
                "{},{},{},{}",
                p.sample,
                opt(p.running_accuracy),
                opt(p.cache_accuracy),
                p.cache_size
            )?;
        }
        Ok(())
    }

    pub fn thresholds_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "t,class,threshold,sigma,m")?;
        for s in &self.threshold_trace {
            for c in 0..s.thresholds.len() {
                writeln!(out, "{},{c},{},{},{}", s.t, s.thresholds[c], s.sigma[c], s.m[c])?;
            }
        }
        Ok(())
    }

    /// Plain-text summary for terminals.
    pub fn render(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("unavailable".to_string(), |a| format!("{:.2}%", 100.0 * a));
        let mut s = String::new();
        let _ = writeln!(s, "samples          {}", self.samples);
        let _ = writeln!(s, "top-1 accuracy   {}", pct(self.accuracy));
        let _ = writeln!(s, "admitted         {}", self.admitted);
        let _ = writeln!(s, "evicted          {}", self.evicted);
        let _ = writeln!(s, "faults           {}", self.faults);
        let _ = writeln!(s, "cache size       {}", self.final_cache_size);
        let _ = writeln!(s, "cache accuracy   {}", pct(self.final_cache_accuracy));
        if self.per_class_accuracy.iter().any(Option::is_some) {
            let _ = writeln!(s, "per class:");
            for (c, a) in self.per_class_accuracy.iter().enumerate() {
                let _ = writeln!(s, "  {c:>4}  {}", pct(*a));
            }
        }
        if let Some(last) = self.threshold_trace.last() {
            let joined: Vec<String> = last.thresholds.iter().map(|t| format!("{t:.4}")).collect();
            let _ = writeln!(s, "thresholds @t={}  [{}]", last.t, joined.join(", "));
        }
        s
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// Folds stream lines into a [`RunSummary`] in order.
#[derive(Clone, Debug, Default)]
pub struct SummaryBuilder {
    samples: u64,
    labeled: u64,
    correct: u64,
    class_correct: Vec<u64>,
    class_total: Vec<u64>,
    admitted: u64,
    evicted: u64,
    faults: u64,
    final_cache_size: usize,
    final_cache_accuracy: Option<f64>,
    trace: Vec<TracePoint>,
    threshold_trace: Vec<ThresholdSnapshot>,
}

impl SummaryBuilder {
    pub fn push(&mut self, line: &StreamLine) {
        match line {
            StreamLine::Header(h) => {
                if self.class_total.len() < h.classes {
                    self.class_total.resize(h.classes, 0);
                    self.class_correct.resize(h.classes, 0);
                }
            }
            StreamLine::Thresholds(t) => self.threshold_trace.push(t.clone()),
            StreamLine::Prediction(r) => {
                self.samples += 1;
                if let (Some(label), Some(ok)) = (r.label, r.correct) {
                    let c = label as usize;
                    if c >= self.class_total.len() {
                        self.class_total.resize(c + 1, 0);
                        self.class_correct.resize(c + 1, 0);
                    }
                    self.labeled += 1;
                    self.class_total[c] += 1;
                    if ok {
                        self.correct += 1;
                        self.class_correct[c] += 1;
                    }
                }
                self.admitted += r.admitted as u64;
                self.evicted += r.evicted as u64;
                self.faults += r.fault.is_some() as u64;
                self.final_cache_size = r.cache_size;
                self.final_cache_accuracy = r.cache_accuracy;
                self.trace.push(TracePoint {
                    sample: r.sample,
                    running_accuracy: self.accuracy(),
                    cache_accuracy: r.cache_accuracy,
                    cache_size: r.cache_size,
                });
            }
        }
    }

    fn accuracy(&self) -> Option<f64> {
        (self.labeled > 0).then(|| self.correct as f64 / self.labeled as f64)
    }

    pub fn finish(self) -> RunSummary {
        let accuracy = self.accuracy();
        let per_class_accuracy = self
            .class_correct
            .iter()
            .zip(&self.class_total)
            .map(|(&k, &n)| (n > 0).then(|| k as f64 / n as f64))
            .collect();
        RunSummary {
            samples: self.samples,
            labeled: self.labeled,
            correct: self.correct,
            accuracy,
            per_class_accuracy,
            admitted: self.admitted,
            evicted: self.evicted,
            faults: self.faults,
            final_cache_size: self.final_cache_size,
            final_cache_accuracy: self.final_cache_accuracy,
            trace: self.trace,
            threshold_trace: self.threshold_trace,
        }
    }
}

/// A parsed record stream.
#[derive(Clone, Debug)]
pub struct ParsedStream {
    pub header: Option<StreamHeader>,
    pub summary: RunSummary,
}

/// Reads a JSONL record stream. Blank lines are skipped; any other line that
/// does not parse fails with its 1-based line number.
pub fn parse_stream(reader: impl BufRead) -> Result<ParsedStream> {
    let mut header = None;
    let mut builder = RunSummary::builder(0);
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StreamLine = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let StreamLine::Header(h) = &parsed {
            header = Some(h.clone());
        }
        builder.push(&parsed);
    }
    Ok(ParsedStream {
        header,
        summary: builder.finish(),
    })
}
