//! Per-sample adaptation pipeline and whole-stream runs.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{
    adamw_step, apply_residuals, compute_gradients, filter_views, proto_predict, AdamWConfig,
    AdapterParams, OptimizerState, PrototypeBank, Residuals, ViewBatch, ViewFilter,
};
use crate::cache::{AdmitOutcome, ClassCache, DEFAULT_CAPACITY};
use crate::error::{Error, Result};
use crate::features::{write_feature_file, write_labels, Dataset, FeatureMatrix};
use crate::numerics::ProbVector;
use crate::report::{RunSummary, StreamLine, ThresholdSnapshot};
use crate::thresholds::{ThresholdParams, ThresholdState};
use crate::zeroshot::{calibrate_zero_shot_stats, zeroshot_predict, TextPrototypeBank, ZeroShotStats, DEFAULT_TEMPERATURE};
use crate::Strategy;

pub const DEFAULT_RHO: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Ace,
    /// Thresholds stay at their initial values for the whole stream.
    FixedThresholdBaseline,
    ZeroshotOnly,
}

/// Which distribution decides the pseudo-label and gate of a cache offer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissionKey {
    /// `P_ACE` recomputed under the prototypes updated for this sample.
    #[default]
    Pace,
    /// Zero-shot prediction of the clean view under the initial text bank.
    Zeroshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub mode: Mode,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub cache_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub rho: f64,
    /// Replaces top-ρ view filtering with a fixed confidence cut.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub view_threshold: Option<f64>,
    /// Views used per sample, counted from view 0. All manifest views when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub views: Option<usize>,
    /// Refresh thresholds every this many samples. 0 disables refreshes and
    /// leaves only rarity relaxation, applied after every sample.
    pub refresh_interval: u64,
    pub zs_init: bool,
    /// Leading fraction of the stream seen by the calibration pre-pass.
    pub calib_fraction: f64,
    pub literal_adapt: bool,
    pub m_floor: f64,
    pub admission_key: AdmissionKey,
    /// Also emit the `P_ACE` argmax under the final prototypes of each sample.
    pub report_pace: bool,
    pub carry_optimizer_state: bool,
    /// Adds per-stage wall-clock timings to every record. Breaks
    /// byte-identical output across runs.
    pub timing: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let adapter = AdapterParams::default();
        let thresholds = ThresholdParams::default();
        Self {
            mode: Mode::Ace,
            strategy: Strategy::Entropy,
            alpha: adapter.alpha,
            beta: adapter.beta,
            delta: thresholds.delta,
            gamma: thresholds.gamma,
            lambda: adapter.lambda,
            cache_size: DEFAULT_CAPACITY,
            lr: AdamWConfig::default().lr,
            temperature: DEFAULT_TEMPERATURE,
            rho: DEFAULT_RHO,
            view_threshold: None,
            views: None,
            refresh_interval: 1,
            zs_init: true,
            calib_fraction: 1.0,
            literal_adapt: false,
            m_floor: thresholds.m_floor,
            admission_key: AdmissionKey::Pace,
            report_pace: false,
            carry_optimizer_state: false,
            timing: false,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn adapter_params(&self) -> AdapterParams {
        AdapterParams {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn threshold_params(&self) -> ThresholdParams {
        ThresholdParams {
            delta: self.delta,
            gamma: self.gamma,
            m_floor: self.m_floor,
            literal_adapt: self.literal_adapt,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            ..AdamWConfig::default()
        }
    }

    pub fn view_filter(&self) -> ViewFilter {
        match self.view_threshold {
            Some(t) => ViewFilter::FixedThreshold(t),
            None => ViewFilter::TopFraction(self.rho),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        for (name, x) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
        ] {
            if !(x >= 0.0) || !x.is_finite() {
                return bad(format!("{name} = {x} must be finite and >= 0"));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad(format!("temperature = {} must be > 0", self.temperature));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho = {} not in (0, 1]", self.rho));
        }
        if let Some(t) = self.view_threshold {
            if self.rho != DEFAULT_RHO {
                return bad("rho and view_threshold are both set".into());
            }
            if !t.is_finite() || t < 0.0 {
                return bad(format!("view_threshold = {t} must be finite and >= 0"));
            }
        }
        if self.views == Some(0) {
            return bad("views must be >= 1".into());
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction <= 1.0) {
            return bad(format!("calib_fraction = {} not in (0, 1]", self.calib_fraction));
        }
        self.threshold_params()
            .validate()
            .and_then(|_| self.optimizer().validate())
            .map_err(|e| Error::ConfigInvalid(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub score_us: u64,
    pub optimize_us: u64,
    pub admit_us: u64,
    pub predict_us: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample: u64,
    pub prediction: usize,
    pub max_prob: f64,
    pub entropy: f64,
    pub pseudo_label: Option<usize>,
    pub admitted: bool,
    pub evicted: bool,
    pub threshold: Option<f64>,
    pub cache_size: usize,
    /// Set when a numerical fault downgraded the sample to zero-shot.
    pub fault: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate_classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pace_prediction: Option<usize>,
    pub label: Option<u32>,
    pub correct: Option<bool>,
    pub cache_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<StageTiming>,
}

/// What one call to [`Engine::process_sample`] produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleOutput {
    pub record: PredictionRecord,
    /// Thresholds after this sample, when they changed.
    pub thresholds: Option<ThresholdSnapshot>,
}

struct Adapted {
    pseudo_label: usize,
    outcome: AdmitOutcome,
    threshold: f64,
    degenerate: Vec<usize>,
    pace_prediction: Option<usize>,
    probs: ProbVector,
    timing: StageTiming,
}

/// Persistent state of one stream.
#[derive(Clone, Debug)]
pub struct Engine {
    config: EngineConfig,
    zs_bank: TextPrototypeBank,
    bank: PrototypeBank,
    cache: ClassCache,
    thresholds: ThresholdState,
    optimizer: Option<OptimizerState>,
    processed: u64,
    /// Labels of processed samples, for cache accuracy only.
    seen_labels: Vec<u32>,
    labels_complete: bool,
}

impl Engine {
    /// `stats` seeds the thresholds when `zs_init` is on and is ignored
    /// otherwise.
    pub fn new(zs_bank: TextPrototypeBank, config: EngineConfig, stats: Option<&ZeroShotStats>) -> Result<Self> {
        config.validate()?;
        if (zs_bank.temperature() - config.temperature).abs() > 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "text bank temperature {} differs from config {}",
                zs_bank.temperature(),
                config.temperature
            )));
        }
        let classes = zs_bank.classes();
        let params = config.threshold_params();
        let thresholds = match (config.zs_init, stats) {
            (true, Some(s)) => ThresholdState::init_from_stats(s, classes, config.strategy, params)?,
            (true, None) if config.mode != Mode::ZeroshotOnly => {
                return Err(Error::ConfigInvalid("zs_init needs calibration statistics".into()))
            }
            _ => ThresholdState::init_fallback(classes, config.strategy, params)?,
        };
        Ok(Self {
            bank: PrototypeBank::from_text(&zs_bank),
            cache: ClassCache::new(classes, config.cache_size),
            optimizer: None,
            processed: 0,
            seen_labels: Vec::new(),
            labels_complete: true,
            zs_bank,
            thresholds,
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn zeroshot_bank(&self) -> &TextPrototypeBank {
        &self.zs_bank
    }

    pub fn cache(&self) -> &ClassCache {
        &self.cache
    }

    pub fn thresholds(&self) -> &ThresholdState {
        &self.thresholds
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn threshold_snapshot(&self) -> ThresholdSnapshot {
        ThresholdSnapshot {
            t: self.processed,
            thresholds: self.thresholds.thresholds().to_vec(),
            sigma: self.thresholds.sigma().to_vec(),
            m: self.thresholds.metric().to_vec(),
        }
    }

    /// Runs one sample through the pipeline. `views[0]` is the clean view.
    /// `label` only feeds the metric fields of the record.
    pub fn process_sample(&mut self, mut views: Vec<Vec<f64>>, label: Option<u32>) -> Result<SampleOutput> {
        if views.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(v) = self.config.views {
            if v > views.len() {
                return Err(Error::ConfigInvalid(format!(
                    "{v} views requested, sample has {}",
                    views.len()
                )));
            }
            views.truncate(v);
        }
        let sample = self.processed;

        let (prediction, fault, adapted, timing) = if self.config.mode == Mode::ZeroshotOnly {
            let t = Instant::now();
            let p = zeroshot_predict(&views[0], &self.zs_bank)?;
            let timing = StageTiming {
                predict_us: t.elapsed().as_micros() as u64,
                ..StageTiming::default()
            };
            (p, None, None, timing)
        } else {
            let snapshot = self.bank.clone();
            let optimizer = self.optimizer.clone();
            let clean = views[0].clone();
            match self.adapt(views, sample) {
                Ok((a, p)) => {
                    let timing = a.timing;
                    (p, None, Some(a), timing)
                }
                Err(e @ (Error::DegenerateSum(_) | Error::NonFiniteGradient)) => {
                    self.bank = snapshot;
                    self.optimizer = optimizer;
                    let p = zeroshot_predict(&clean, &self.zs_bank)?;
                    (p, Some(e.to_string()), None, StageTiming::default())
                }
                Err(e) => return Err(e),
            }
        };

        let mut refreshed = false;
        if let Some(a) = &adapted {
            if self.config.mode == Mode::Ace {
                self.thresholds
                    .record_prediction(a.pseudo_label, a.probs.max_prob(), a.probs.entropy())?;
                let k = self.config.refresh_interval;
                if k == 0 {
                    self.thresholds.apply_rarity_adaptation(&self.cache.class_counts())?;
                    refreshed = true;
                } else if (sample + 1) % k == 0 {
                    self.thresholds.refresh_thresholds();
                    self.thresholds.apply_rarity_adaptation(&self.cache.class_counts())?;
                    refreshed = true;
                }
            }
        }
        self.processed += 1;
        let record = self.finish_record(sample, &prediction, label, fault, adapted, timing);
        Ok(SampleOutput {
            record,
            thresholds: refreshed.then(|| self.threshold_snapshot()),
        })
    }

    fn adapt(&mut self, views: Vec<Vec<f64>>, sample: u64) -> Result<(Adapted, ProbVector)> {
        let params = self.config.adapter_params();
        let strategy = self.config.strategy;
        let filter = self.config.view_filter();
        let mut timing = StageTiming::default();

        let t = Instant::now();
        let batch = ViewBatch::score(views, &self.bank, &params)?;
        let (selected, _) = filter_views(&batch, strategy, filter)?;
        timing.score_us = t.elapsed().as_micros() as u64;

        let t = Instant::now();
        let (classes, dim) = (self.bank.classes(), self.bank.dim());
        let mut residuals = Residuals::zeros(classes, dim);
        let eval = compute_gradients(&batch, &selected, &self.bank, &residuals, &params)?;
        let mut state = match (&self.optimizer, self.config.carry_optimizer_state) {
            (Some(s), true) => s.clone(),
            _ => OptimizerState::new(residuals.as_slice().len()),
        };
        adamw_step(residuals.as_mut_slice(), eval.gradient.as_slice(), &mut state, &self.config.optimizer())?;
        let degenerate = apply_residuals(&mut self.bank, &mut residuals)?;
        if self.config.carry_optimizer_state {
            self.optimizer = Some(state);
        }
        timing.optimize_us = t.elapsed().as_micros() as u64;

        let t = Instant::now();
        let views = batch.views;
        let probs = match self.config.admission_key {
            AdmissionKey::Pace => {
                let rescored = ViewBatch::score(views.clone(), &self.bank, &params)?;
                filter_views(&rescored, strategy, filter)?.1
            }
            AdmissionKey::Zeroshot => zeroshot_predict(&views[0], &self.zs_bank)?,
        };
        let pseudo_label = probs.argmax();
        let threshold = self.thresholds.admission_threshold(pseudo_label)?;
        let outcome = self
            .cache
            .try_admit(&views[0], pseudo_label, &probs, threshold, strategy, sample)?;
        if outcome.passed_gate() {
            self.bank
                .set_visual(pseudo_label, self.cache.visual_prototype(pseudo_label));
        }
        timing.admit_us = t.elapsed().as_micros() as u64;

        let t = Instant::now();
        let prediction = proto_predict(&views[0], &self.bank, params.alpha, params.beta)?;
        let pace_prediction = if self.config.report_pace {
            let rescored = ViewBatch::score(views, &self.bank, &params)?;
            Some(filter_views(&rescored, strategy, filter)?.1.argmax())
        } else {
            None
        };
        timing.predict_us = t.elapsed().as_micros() as u64;

        Ok((
            Adapted {
                pseudo_label,
                outcome,
                threshold,
                degenerate,
                pace_prediction,
                probs,
                timing,
            },
            prediction,
        ))
    }

    fn finish_record(
        &mut self,
        sample: u64,
        prediction: &ProbVector,
        label: Option<u32>,
        fault: Option<String>,
        adapted: Option<Adapted>,
        timing: StageTiming,
    ) -> PredictionRecord {
        match label {
            Some(l) if self.labels_complete => self.seen_labels.push(l),
            _ => self.labels_complete = false,
        }
        let labels = self.labels_complete.then_some(self.seen_labels.as_slice());
        let predicted = prediction.argmax();
        let (pseudo_label, admitted, evicted, threshold, degenerate_classes, pace_prediction) = match adapted {
            Some(a) => (
                Some(a.pseudo_label),
                a.outcome.passed_gate(),
                a.outcome.evicted(),
                Some(a.threshold),
                a.degenerate,
                a.pace_prediction,
            ),
            None => (None, false, false, None, Vec::new(), None),
        };
        PredictionRecord {
            sample,
            prediction: predicted,
            max_prob: prediction.max_prob(),
            entropy: prediction.entropy(),
            pseudo_label,
            admitted,
            evicted,
            threshold,
            cache_size: self.cache.len(),
            fault,
            degenerate_classes,
            pace_prediction,
            label,
            correct: label.map(|l| l as usize == predicted),
            cache_accuracy: self.cache.cache_accuracy(labels),
            timing: self.config.timing.then_some(timing),
        }
    }

    /// Writes cached features class-major to `<stem>.acef` and their
    /// pseudo-labels to `<stem>.labels.bin`.
    pub fn dump_cache(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rows: Vec<&[f64]> = self.cache.iter().map(|e| e.feature.as_slice()).collect();
        let matrix = if rows.is_empty() {
            FeatureMatrix::empty(self.bank.dim())?
        } else {
            FeatureMatrix::from_f64_rows(&rows)?
        };
        write_feature_file(dir.join(format!("{stem}.acef")), &matrix)?;
        let labels: Vec<u32> = self.cache.iter().map(|e| e.pseudo_label as u32).collect();
        write_labels(dir.join(format!("{stem}.labels.bin")), &labels)
    }
}

/// Zero-shot statistics of the clean views over the calibration prefix, with
/// zero-shot accuracy on that prefix when labels exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub stats: ZeroShotStats,
    pub accuracy: Option<f64>,
}

/// Number of leading samples the calibration pre-pass reads.
pub fn calibration_count(fraction: f64, samples: usize) -> usize {
    let n = (fraction * samples as f64 - 1e-9).ceil().max(1.0) as usize;
    n.min(samples)
}

pub fn calibrate(dataset: &Dataset, bank: &TextPrototypeBank, fraction: f64) -> Result<CalibrationReport> {
    let n = calibration_count(fraction, dataset.sample_count());
    let mut clean = Vec::with_capacity(n);
    for views in dataset.views()?.take(n) {
        let mut views = views?;
        clean.push(views.swap_remove(0).into_inner());
    }
    let stats = calibrate_zero_shot_stats(&clean, bank)?;
    let accuracy = match &dataset.labels {
        Some(labels) => {
            let mut correct = 0usize;
            for (z, &l) in clean.iter().zip(labels) {
                if zeroshot_predict(z, bank)?.argmax() == l as usize {
                    correct += 1;
                }
            }
            Some(correct as f64 / clean.len() as f64)
        }
        None => None,
    };
    Ok(CalibrationReport { stats, accuracy })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: EngineConfig,
    pub calibration: Option<CalibrationReport>,
    pub summary: RunSummary,
    pub wall_clock_secs: f64,
}

fn write_line(sink: &mut dyn Write, line: &StreamLine) -> Result<()> {
    let text = serde_json::to_string(line).map_err(|e| Error::InvalidParams(e.to_string()))?;
    writeln!(sink, "{text}").map_err(|e| Error::io("<record stream>", e))
}

/// Runs the whole stream, writing one JSON line per record to `sink`.
pub fn run_stream(dataset: &Dataset, config: &EngineConfig, sink: &mut dyn Write) -> Result<RunReport> {
    run_stream_with(dataset, config, sink, |_| Ok(()))
}

/// As [`run_stream`], handing the finished engine to `inspect` before the
/// report is assembled.
pub fn run_stream_with(
    dataset: &Dataset,
    config: &EngineConfig,
    sink: &mut dyn Write,
    inspect: impl FnOnce(&Engine) -> Result<()>,
) -> Result<RunReport> {
    let started = Instant::now();
    config.validate()?;
    let available = dataset.views_per_sample();
    let views = config.views.unwrap_or(available);
    if views > available {
        return Err(Error::ConfigInvalid(format!(
            "{views} views requested, manifest has {available}"
        )));
    }
    let bank = TextPrototypeBank::build(&dataset.prompts, config.temperature)?;
    let calibration = if config.zs_init && config.mode != Mode::ZeroshotOnly {
        Some(calibrate(dataset, &bank, config.calib_fraction)?)
    } else {
        None
    };
    let mut engine = Engine::new(bank, config.clone(), calibration.as_ref().map(|c| &c.stats))?;

    let mut summary = RunSummary::builder(dataset.classes());
    let header = StreamLine::Header(crate::report::StreamHeader {
        classes: dataset.classes(),
        samples: dataset.sample_count(),
        views,
        config: config.clone(),
        calibration: calibration.as_ref().map(|c| c.stats),
    });
    write_line(sink, &header)?;
    summary.push(&header);
    if config.mode != Mode::ZeroshotOnly {
        let initial = StreamLine::Thresholds(engine.threshold_snapshot());
        write_line(sink, &initial)?;
        summary.push(&initial);
    }

    for (i, sample_views) in dataset.views()?.enumerate() {
        let sample_views = sample_views?.into_iter().map(|e| e.into_inner()).collect();
        let out = engine.process_sample(sample_views, dataset.label(i))?;
        let line = StreamLine::Prediction(out.record);
        write_line(sink, &line)?;
        summary.push(&line);
        if let Some(snapshot) = out.thresholds {
            let line = StreamLine::Thresholds(snapshot);
            write_line(sink, &line)?;
            summary.push(&line);
        }
    }
    sink.flush().map_err(|e| Error::io("<record stream>", e))?;
    inspect(&engine)?;

    Ok(RunReport {
        config: config.clone(),
        calibration,
        summary: summary.finish(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
