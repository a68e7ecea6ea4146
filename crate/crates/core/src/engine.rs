//! Discovery, reference collection, detection and monitoring on top of any
//! [`TokenSource`], plus JSONL persistence and cost estimation.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::budget;
use crate::client::EndpointConfig;
use crate::source::TokenSource;
use crate::stats::{self, EmpiricalDistribution};

/// Version tag written into every persisted line.
pub const SCHEMA_VERSION: u32 = 1;
/// Default TV threshold for the change-event rule.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Default persistence window (rounds) for the change-event rule.
pub const DEFAULT_WINDOW: usize = 4;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no candidate prompts given")]
    NoCandidates,
    #[error("no usable reference records")]
    NoRecords,
    #[error("every prompt failed during detection ({} failures)", .0.len())]
    AllPromptsFailed(Vec<PromptFailure>),
    #[error("history timestamps must be strictly increasing")]
    OutOfOrder,
    #[error("history mixes endpoints {expected:?} and {found:?}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: unsupported schema version {found}")]
    SchemaVersion { path: PathBuf, line: usize, found: u32 },
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BorderInput {
    pub prompt: String,
    pub discovery_support: BTreeSet<String>,
    pub discovery_samples: u32,
    pub discovered_at: DateTime<Utc>,
    pub temperature_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptFailure {
    pub prompt: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryOptions {
    /// Samples per candidate before giving up on it.
    pub m: u32,
    /// Stop after this many border inputs.
    pub target: usize,
    pub temperature: f64,
    /// Visit candidates in a seeded random order instead of the given order.
    pub shuffle_seed: Option<u64>,
}

impl Default for DiscoveryOptions {
    fn default() -> Self {
        Self {
            m: 3,
            target: usize::MAX,
            temperature: 0.0,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub border_inputs: Vec<BorderInput>,
    pub requests: u64,
    pub candidates_examined: usize,
    pub skipped: Vec<PromptFailure>,
}

impl DiscoveryReport {
    /// Requests spent per border input found; `None` when nothing was found.
    pub fn requests_per_bi(&self) -> Option<f64> {
        (!self.border_inputs.is_empty()).then(|| self.requests as f64 / self.border_inputs.len() as f64)
    }
}

/// Samples each candidate up to `m` times, stopping at the first output that
/// differs from an earlier one, and keeps candidates that produced two or
/// more distinct outputs.
pub fn discover<S: TokenSource + ?Sized>(
    source: &mut S,
    candidates: &[String],
    opts: &DiscoveryOptions,
) -> Result<DiscoveryReport, EngineError> {
    if opts.m < 2 {
        return Err(EngineError::InvalidParameter(format!("m must be at least 2, got {}", opts.m)));
    }
    if candidates.is_empty() {
        return Err(EngineError::NoCandidates);
    }
    let mut order: Vec<&String> = candidates.iter().collect();
    if let Some(seed) = opts.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut report = DiscoveryReport {
        border_inputs: Vec::new(),
        requests: 0,
        candidates_examined: 0,
        skipped: Vec::new(),
    };
    for prompt in order {
        if report.border_inputs.len() >= opts.target {
            break;
        }
        report.candidates_examined += 1;
        let mut seen = BTreeSet::new();
        let mut drawn = 0u32;
        let mut failure = None;
        while drawn < opts.m && seen.len() < 2 {
            drawn += 1;
            report.requests += 1;
            match source.sample(prompt, opts.temperature, 1).pop() {
                Some(Ok(token)) => {
                    seen.insert(token);
                }
                Some(Err(e)) => {
                    failure = Some(e.to_string());
                    break;
                }
                None => {
                    failure = Some("source returned no sample".to_owned());
                    break;
                }
            }
        }
        if let Some(reason) = failure {
            warn!(%prompt, %reason, "skipping candidate");
            report.skipped.push(PromptFailure {
                prompt: prompt.clone(),
                reason,
            });
            continue;
        }
        if seen.len() >= 2 {
            info!(%prompt, samples = drawn, "border input found");
            report.border_inputs.push(BorderInput {
                prompt: prompt.clone(),
                discovery_support: seen,
                discovery_samples: drawn,
                discovered_at: Utc::now(),
                temperature_used: opts.temperature,
            });
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub border_input: BorderInput,
    pub reference: EmpiricalDistribution,
    /// Number of samples that were requested (`n1`).
    pub target_samples: u64,
    pub endpoint_fingerprint: String,
    pub temperature: f64,
    pub collected_at: DateTime<Utc>,
}

impl ReferenceRecord {
    pub fn is_complete(&self) -> bool {
        self.reference.total() == self.target_samples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub records: Vec<ReferenceRecord>,
    /// Border inputs for which not a single sample succeeded.
    pub failed: Vec<PromptFailure>,
}

/// Draws `n1` samples per border input. Records with failed samples keep the
/// samples that did succeed and are flagged incomplete.
pub fn collect_reference<S: TokenSource + ?Sized>(
    source: &mut S,
    bis: &[BorderInput],
    n1: u64,
    temperature: f64,
) -> Result<ReferenceReport, EngineError> {
    if n1 < 1 {
        return Err(EngineError::InvalidParameter("n1 must be at least 1".into()));
    }
    let fingerprint = source.fingerprint();
    let mut report = ReferenceReport {
        records: Vec::new(),
        failed: Vec::new(),
    };
    for bi in bis {
        let mut tokens = Vec::with_capacity(n1 as usize);
        let mut last_error = None;
        for r in source.sample(&bi.prompt, temperature, n1 as usize) {
            match r {
                Ok(t) => tokens.push(t),
                Err(e) => last_error = Some(e.to_string()),
            }
        }
        if let Some(reason) = &last_error {
            warn!(prompt = %bi.prompt, achieved = tokens.len(), %reason, "reference incomplete");
        }
        match EmpiricalDistribution::from_samples(tokens) {
            Ok(reference) => report.records.push(ReferenceRecord {
                border_input: bi.clone(),
                reference,
                target_samples: n1,
                endpoint_fingerprint: fingerprint.clone(),
                temperature,
                collected_at: Utc::now(),
            }),
            Err(_) => report.failed.push(PromptFailure {
                prompt: bi.prompt.clone(),
                reason: last_error.unwrap_or_else(|| "no samples returned".to_owned()),
            }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt: String,
    pub tv: f64,
    pub mismatch: bool,
    pub detection: EmpiricalDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub per_prompt: Vec<PromptResult>,
    pub failures: Vec<PromptFailure>,
    /// Incomplete references skipped before sampling.
    pub excluded_incomplete: usize,
    /// Mean per-prompt TV distance (continuous score).
    pub aggregate_tv: f64,
    /// Support-mismatch decision on any prompt (the test the error bounds cover).
    pub binary_decision: bool,
    pub n2: u64,
    pub temperature: f64,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub n2: u64,
    pub temperature: f64,
    pub include_incomplete: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            n2: 3,
            temperature: 0.0,
            include_incomplete: false,
        }
    }
}

/// Resamples each border input `n2` times and compares with its reference.
/// A prompt with any failed sample is left out of the aggregate and reported.
pub fn detect<S: TokenSource + ?Sized>(
    source: &mut S,
    records: &[ReferenceRecord],
    opts: &DetectOptions,
) -> Result<DetectionOutcome, EngineError> {
    if opts.n2 < 1 {
        return Err(EngineError::InvalidParameter("n2 must be at least 1".into()));
    }
    let usable: Vec<&ReferenceRecord> = records
        .iter()
        .filter(|r| opts.include_incomplete || r.is_complete())
        .collect();
    let excluded_incomplete = records.len() - usable.len();
    if usable.is_empty() {
        return Err(EngineError::NoRecords);
    }

    let mut per_prompt = Vec::with_capacity(usable.len());
    let mut failures = Vec::new();
    for record in usable {
        let prompt = &record.border_input.prompt;
        let results = source.sample(prompt, opts.temperature, opts.n2 as usize);
        let mut tokens = Vec::with_capacity(results.len());
        let mut error = None;
        for r in results {
            match r {
                Ok(t) => tokens.push(t),
                Err(e) => error = Some(e.to_string()),
            }
        }
        if tokens.len() as u64 != opts.n2 && error.is_none() {
            error = Some(format!("expected {} samples, got {}", opts.n2, tokens.len()));
        }
        if let Some(reason) = error {
            warn!(%prompt, %reason, "prompt excluded from detection");
            failures.push(PromptFailure {
                prompt: prompt.clone(),
                reason,
            });
            continue;
        }
        let detection = EmpiricalDistribution::from_samples(tokens)?;
        per_prompt.push(PromptResult {
            prompt: prompt.clone(),
            tv: stats::tv_distance(&record.reference, &detection),
            mismatch: stats::support_mismatch(&record.reference, &detection),
            detection,
        });
    }
    if per_prompt.is_empty() {
        return Err(EngineError::AllPromptsFailed(failures));
    }
    let tvs: Vec<f64> = per_prompt.iter().map(|p| p.tv).collect();
    Ok(DetectionOutcome {
        aggregate_tv: stats::aggregate_statistic(&tvs)?,
        binary_decision: per_prompt.iter().any(|p| p.mismatch),
        per_prompt,
        failures,
        excluded_incomplete,
        n2: opts.n2,
        temperature: opts.temperature,
        timestamp: Utc::now(),
    })
}

/// Position of a change in a TV series: `index` is the first round at or
/// above the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub index: usize,
    pub pre_mean: f64,
    pub post_mean: f64,
}

/// Finds rounds where the preceding `window` values are all below
/// `threshold` and the following `window` values (including this one) are
/// all at or above it. Events never share rounds. A window of 0 or a series
/// shorter than `2 * window` yields no events.
pub fn change_event_scan(series: &[f64], threshold: f64, window: usize) -> Vec<ChangePoint> {
    let mut events = Vec::new();
    if window == 0 || series.len() < 2 * window {
        return events;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut i = window;
    while i + window <= series.len() {
        let pre = &series[i - window..i];
        let post = &series[i..i + window];
        if pre.iter().all(|&v| v < threshold) && post.iter().all(|&v| v >= threshold) {
            events.push(ChangePoint {
                index: i,
                pre_mean: mean(pre),
                post_mean: mean(post),
            });
            i += 2 * window;
        } else {
            i += 1;
        }
    }
    events
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub timestamp: DateTime<Utc>,
    pub aggregate_tv: f64,
    pub binary_decision: bool,
    pub prompts_evaluated: usize,
}

impl HistoryPoint {
    pub fn from_outcome(o: &DetectionOutcome) -> Self {
        Self {
            timestamp: o.timestamp,
            aggregate_tv: o.aggregate_tv,
            binary_decision: o.binary_decision,
            prompts_evaluated: o.per_prompt.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeEvent {
    /// First round of the below-threshold window.
    pub start: DateTime<Utc>,
    /// Last round of the at-or-above-threshold window.
    pub end: DateTime<Utc>,
    /// First round at or above the threshold.
    pub onset: DateTime<Utc>,
    pub pre_mean: f64,
    pub post_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorHistory {
    pub endpoint_fingerprint: String,
    series: Vec<HistoryPoint>,
}

impl MonitorHistory {
    pub fn new(endpoint_fingerprint: impl Into<String>) -> Self {
        Self {
            endpoint_fingerprint: endpoint_fingerprint.into(),
            series: Vec::new(),
        }
    }

    pub fn series(&self) -> &[HistoryPoint] {
        &self.series
    }

    pub fn push(&mut self, point: HistoryPoint) -> Result<(), EngineError> {
        if self.series.last().is_some_and(|last| point.timestamp <= last.timestamp) {
            return Err(EngineError::OutOfOrder);
        }
        self.series.push(point);
        Ok(())
    }

    pub fn tv_series(&self) -> Vec<f64> {
        self.series.iter().map(|p| p.aggregate_tv).collect()
    }

    pub fn change_events(&self, threshold: f64, window: usize) -> Vec<ChangeEvent> {
        change_event_scan(&self.tv_series(), threshold, window)
            .into_iter()
            .map(|c| ChangeEvent {
                start: self.series[c.index - window].timestamp,
                end: self.series[c.index + window - 1].timestamp,
                onset: self.series[c.index].timestamp,
                pre_mean: c.pre_mean,
                post_mean: c.post_mean,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorOptions {
    pub detect: DetectOptions,
    pub rounds: usize,
    pub interval: Duration,
    pub threshold: f64,
    pub window: usize,
}

/// Runs `rounds` detection rounds, appending each to the history file and
/// to `history`. Returns the change events present after the last round.
pub fn run_monitor<S: TokenSource + ?Sized>(
    source: &mut S,
    records: &[ReferenceRecord],
    history: &mut MonitorHistory,
    history_path: Option<&Path>,
    opts: &MonitorOptions,
) -> Result<Vec<ChangeEvent>, EngineError> {
    for round in 0..opts.rounds {
        if round > 0 && !opts.interval.is_zero() {
            std::thread::sleep(opts.interval);
        }
        let outcome = detect(source, records, &opts.detect)?;
        let mut point = HistoryPoint::from_outcome(&outcome);
        if let Some(last) = history.series().last() {
            if point.timestamp <= last.timestamp {
                point.timestamp = last.timestamp + chrono::Duration::microseconds(1);
            }
        }
        if let Some(path) = history_path {
            append_history(path, &history.endpoint_fingerprint, &point)?;
        }
        info!(round, tv = point.aggregate_tv, mismatch = point.binary_decision, "monitor round");
        history.push(point)?;
    }
    Ok(history.change_events(opts.threshold, opts.window))
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, EngineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| EngineError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| parse("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(EngineError::SchemaVersion {
                path: path.to_path_buf(),
                line: i + 1,
                found: version as u32,
            });
        }
        let v: Versioned<T> = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
        out.push(v.body);
    }
    Ok(out)
}

fn jsonl_line<T: Serialize>(body: &T) -> String {
    let mut s = serde_json::to_string(&Versioned {
        schema_version: SCHEMA_VERSION,
        body,
    })
    .expect("records serialize");
    s.push('\n');
    s
}

/// Replaces `path` with the given records in one rename, so readers see
/// either the old file or the complete new one.
fn write_jsonl_atomic<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EngineError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    for item in items {
        tmp.write_all(jsonl_line(item).as_bytes()).map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| EngineError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_border_inputs(path: &Path, bis: &[BorderInput]) -> Result<(), EngineError> {
    write_jsonl_atomic(path, bis)
}

pub fn read_border_inputs(path: &Path) -> Result<Vec<BorderInput>, EngineError> {
    read_jsonl(path)
}

pub fn write_references(path: &Path, records: &[ReferenceRecord]) -> Result<(), EngineError> {
    write_jsonl_atomic(path, records)
}

pub fn read_references(path: &Path) -> Result<Vec<ReferenceRecord>, EngineError> {
    read_jsonl(path)
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    endpoint_fingerprint: String,
    #[serde(flatten)]
    point: HistoryPoint,
}

/// Appends one round to a history file as a single line.
pub fn append_history(path: &Path, fingerprint: &str, point: &HistoryPoint) -> Result<(), EngineError> {
    let line = jsonl_line(&HistoryLine {
        endpoint_fingerprint: fingerprint.to_owned(),
        point: point.clone(),
    });
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Loads a history file. A missing file gives an empty history for `fingerprint`.
pub fn read_history(path: &Path, fingerprint: &str) -> Result<MonitorHistory, EngineError> {
    let mut history = MonitorHistory::new(fingerprint);
    if !path.exists() {
        return Ok(history);
    }
    for line in read_jsonl::<HistoryLine>(path)? {
        if line.endpoint_fingerprint != fingerprint {
            return Err(EngineError::FingerprintMismatch {
                expected: fingerprint.to_owned(),
                found: line.endpoint_fingerprint,
            });
        }
        history.push(line.point)?;
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitoringProtocol {
    pub prompt_count: u64,
    pub n2: u64,
    pub rounds_per_day: f64,
}

impl Default for MonitoringProtocol {
    fn default() -> Self {
        Self {
            prompt_count: 5,
            n2: 3,
            rounds_per_day: 24.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub requests: f64,
    pub cost: f64,
}

fn price_per_request(config: &EndpointConfig, input_tokens_per_request: f64) -> f64 {
    (input_tokens_per_request * config.price_in + config.price_out) / 1e6
}

/// Yearly request count and cost of running `protocol` against an endpoint,
/// assuming one output token per request.
pub fn estimate_yearly_cost(
    config: &EndpointConfig,
    protocol: &MonitoringProtocol,
    input_tokens_per_request: f64,
) -> CostEstimate {
    let requests = (protocol.prompt_count * protocol.n2) as f64 * protocol.rounds_per_day * 365.0;
    CostEstimate {
        requests,
        cost: requests * price_per_request(config, input_tokens_per_request),
    }
}

/// One-off cost of finding `prompt_count` border inputs with stopping limit
/// `m` when a fraction `f_b` of candidates are border inputs, then sampling
/// each `n1` times.
pub fn estimate_initialization_cost(
    config: &EndpointConfig,
    prompt_count: u64,
    m: u32,
    f_b: f64,
    n1: u64,
    input_tokens_per_request: f64,
) -> Result<CostEstimate, budget::BudgetError> {
    let discovery = prompt_count as f64 * budget::cost_per_bi(m, f_b)?;
    let requests = discovery + (prompt_count * n1) as f64;
    Ok(CostEstimate {
        requests,
        cost: requests * price_per_request(config, input_tokens_per_request),
    })
}
