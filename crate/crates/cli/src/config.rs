//! Run configuration files and flag overrides.
//!
//! A config file is a flat TOML table whose keys are the engine config fields
//! plus the path keys below. Values resolve as flags over file over defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use toml::{Table, Value};
use tta_core::engine::EngineConfig;

use crate::Failure;

const PATH_KEYS: [&str; 4] = ["manifest", "jsonl", "report", "cache_dump"];

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunPaths {
    pub manifest: Option<PathBuf>,
    pub jsonl: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub cache_dump: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

#[derive(Clone, Debug)]
pub struct ResolvedConfig {
    pub engine: EngineConfig,
    pub paths: RunPaths,
    /// Where each engine key's value came from.
    pub sources: BTreeMap<String, Source>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct RunFlags {
    /// TOML run configuration
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// JSONL record stream output (stdout when unset)
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    /// JSON run report output
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Directory for a final cache dump (cache.acef, cache.labels.bin)
    #[arg(long)]
    pub cache_dump: Option<PathBuf>,

    /// ace | fixed-threshold-baseline | zeroshot-only
    #[arg(long)]
    pub mode: Option<String>,
    /// probability | entropy
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub cache_size: Option<i64>,
    #[arg(long)]
    pub no_zs_init: bool,
    #[arg(long)]
    pub literal_adapt: bool,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub view_threshold: Option<f64>,
    #[arg(long)]
    pub views: Option<i64>,
    /// Samples between threshold refreshes; 0 disables refreshes
    #[arg(long)]
    pub refresh_interval: Option<i64>,
    #[arg(long)]
    pub calib_fraction: Option<f64>,
    /// pace | zeroshot
    #[arg(long)]
    pub admission_key: Option<String>,
    #[arg(long)]
    pub report_pace: bool,
    #[arg(long)]
    pub carry_optimizer_state: bool,
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub m_floor: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub seed: Option<i64>,
}

impl RunFlags {
    fn engine_table(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.to_string(), v);
            }
        };
        put("mode", self.mode.clone().map(Value::String));
        put("strategy", self.strategy.clone().map(Value::String));
        put("cache_size", self.cache_size.map(Value::Integer));
        put("zs_init", self.no_zs_init.then_some(Value::Boolean(false)));
        put("literal_adapt", self.literal_adapt.then_some(Value::Boolean(true)));
        put("rho", self.rho.map(Value::Float));
        put("view_threshold", self.view_threshold.map(Value::Float));
        put("views", self.views.map(Value::Integer));
        put("refresh_interval", self.refresh_interval.map(Value::Integer));
        put("calib_fraction", self.calib_fraction.map(Value::Float));
        put("admission_key", self.admission_key.clone().map(Value::String));
        put("report_pace", self.report_pace.then_some(Value::Boolean(true)));
        put(
            "carry_optimizer_state",
            self.carry_optimizer_state.then_some(Value::Boolean(true)),
        );
        put("timing", self.timing.then_some(Value::Boolean(true)));
        put("alpha", self.alpha.map(Value::Float));
        put("beta", self.beta.map(Value::Float));
        put("lambda", self.lambda.map(Value::Float));
        put("delta", self.delta.map(Value::Float));
        put("gamma", self.gamma.map(Value::Float));
        put("m_floor", self.m_floor.map(Value::Float));
        put("lr", self.lr.map(Value::Float));
        put("temperature", self.temperature.map(Value::Float));
        put("seed", self.seed.map(Value::Integer));
        t
    }

    /// Merges defaults, the config file (if any) and these flags, plus one
    /// extra override applied last (used by sweeps).
    pub fn resolve(&self, extra: Option<(&str, Value)>) -> Result<ResolvedConfig, Failure> {
        let (mut file, base) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
                let table: Table = text
                    .parse()
                    .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, base)
            }
            None => (Table::new(), PathBuf::new()),
        };

        let mut paths = RunPaths::default();
        for key in PATH_KEYS {
            if let Some(v) = file.remove(key) {
                let s = v
                    .as_str()
                    .ok_or_else(|| Failure::config(format!("{key} must be a string path")))?;
                let p = base.join(s);
                match key {
                    "manifest" => paths.manifest = Some(p),
                    "jsonl" => paths.jsonl = Some(p),
                    "report" => paths.report = Some(p),
                    _ => paths.cache_dump = Some(p),
                }
            }
        }
        paths.manifest = self.manifest.clone().or(paths.manifest);
        paths.jsonl = self.jsonl.clone().or(paths.jsonl);
        paths.report = self.report.clone().or(paths.report);
        paths.cache_dump = self.cache_dump.clone().or(paths.cache_dump);

        let mut sources: BTreeMap<String, Source> = BTreeMap::new();
        let mut merged = Table::new();
        for (k, v) in file {
            sources.insert(k.clone(), Source::File);
            merged.insert(k, v);
        }
        let mut flags = self.engine_table();
        if let Some((k, v)) = extra {
            flags.insert(k.to_string(), v);
        }
        for (k, v) in flags {
            sources.insert(k.clone(), Source::Flag);
            merged.insert(k, v);
        }
        let engine = parse_engine(merged)?;

        let defaults = Value::try_from(EngineConfig::default())
            .map_err(|e| Failure::internal(e.to_string()))?;
        if let Value::Table(t) = defaults {
            for k in t.keys() {
                sources.entry(k.clone()).or_insert(Source::Default);
            }
        }
        Ok(ResolvedConfig {
            engine,
            paths,
            sources,
        })
    }
}

pub fn parse_engine(table: Table) -> Result<EngineConfig, Failure> {
    let engine: EngineConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
    engine.validate().map_err(|e| Failure::config(e.to_string()))?;
    Ok(engine)
}

/// The effective engine config as a flat TOML document.
pub fn echo(config: &EngineConfig) -> Result<String, Failure> {
    toml::to_string(config).map_err(|e| Failure::internal(e.to_string()))
}
