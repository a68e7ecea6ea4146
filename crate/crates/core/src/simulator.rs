//! Synthetic endpoints: per-prompt logit tables with finite precision,
//! perturbation injection and a seeded detection benchmark.
//!
//! Logits are rounded to a grid of width `quantization_step`; that rounding
//! is what produces exactly tied top logits (border inputs). At temperature 0
//! an endpoint samples uniformly among its maximal logits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::source::{SourceError, TokenSource};
use crate::stats::{self, EmpiricalDistribution, StatsError};
use crate::theory::{maximizer_set, softmax_logits};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown prompt {0:?}")]
    UnknownPrompt(String),
    #[error("invalid endpoint table: {0}")]
    InvalidTable(String),
    #[error("need {needed} border inputs, endpoint has {found}")]
    InsufficientBorderInputs { needed: usize, found: usize },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("failed to read or write endpoint file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed endpoint file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Rounds each logit to the nearest multiple of `step`, ties to even.
pub fn quantize_logits(z: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "quantization step must be positive");
    z.iter().map(|&x| (x / step).round_ties_even() * step).collect()
}

/// Label of token index `i` in synthetic outputs.
pub fn token_label(i: usize) -> String {
    format!("t{i}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEndpoint {
    /// Prompt id -> logits over the synthetic vocabulary.
    prompts: BTreeMap<String, Vec<f64>>,
    /// Requested temperatures below this floor are raised to it.
    #[serde(default)]
    temperature_floor: f64,
    /// Numeric precision of the model's logits; 0 disables rounding.
    #[serde(default)]
    quantization_step: f64,
    #[serde(default)]
    rng_seed: u64,
    /// Standard deviation of per-request logit jitter (serving nondeterminism).
    #[serde(default)]
    request_jitter: f64,
    /// Logits used instead of the table when sampling at exactly zero
    /// temperature, emulating endpoints with special-cased greedy decoding.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    zero_temperature_overrides: BTreeMap<String, Vec<f64>>,
}

impl SyntheticEndpoint {
    /// Builds an endpoint, rounding every logit to the quantization grid.
    pub fn new(
        prompts: BTreeMap<String, Vec<f64>>,
        quantization_step: f64,
        rng_seed: u64,
    ) -> Result<Self, SimError> {
        if !(quantization_step >= 0.0 && quantization_step.is_finite()) {
            return Err(SimError::InvalidTable(format!(
                "quantization step {quantization_step} must be finite and nonnegative"
            )));
        }
        let prompts = if quantization_step > 0.0 {
            prompts
                .into_iter()
                .map(|(k, z)| (k, quantize_logits(&z, quantization_step)))
                .collect()
        } else {
            prompts
        };
        let ep = Self {
            prompts,
            temperature_floor: 0.0,
            quantization_step,
            rng_seed,
            request_jitter: 0.0,
            zero_temperature_overrides: BTreeMap::new(),
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn with_temperature_floor(mut self, floor: f64) -> Result<Self, SimError> {
        if !(floor >= 0.0 && floor.is_finite()) {
            return Err(SimError::InvalidTable(format!("temperature floor {floor}")));
        }
        self.temperature_floor = floor;
        Ok(self)
    }

    pub fn with_request_jitter(mut self, sigma: f64) -> Result<Self, SimError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(SimError::InvalidTable(format!("request jitter {sigma}")));
        }
        self.request_jitter = sigma;
        Ok(self)
    }

    pub fn with_zero_temperature_override(mut self, prompt: impl Into<String>, logits: Vec<f64>) -> Result<Self, SimError> {
        self.zero_temperature_overrides.insert(prompt.into(), logits);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), SimError> {
        let Some(d) = self.prompts.values().next().map(Vec::len) else {
            return Err(SimError::InvalidTable("no prompts".into()));
        };
        if d < 2 {
            return Err(SimError::InvalidTable(format!("vocabulary size {d} < 2")));
        }
        for (id, z) in self.prompts.iter().chain(&self.zero_temperature_overrides) {
            if z.len() != d {
                return Err(SimError::InvalidTable(format!(
                    "prompt {id:?} has {} logits, expected {d}",
                    z.len()
                )));
            }
            if z.iter().any(|x| !x.is_finite()) {
                return Err(SimError::InvalidTable(format!("prompt {id:?} has a non-finite logit")));
            }
        }
        if self.quantization_step < 0.0 || self.temperature_floor < 0.0 || self.request_jitter < 0.0 {
            return Err(SimError::InvalidTable("negative parameter".into()));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.prompts.values().next().map_or(0, Vec::len)
    }

    pub fn quantization_step(&self) -> f64 {
        self.quantization_step
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = &str> {
        self.prompts.keys().map(String::as_str)
    }

    pub fn logits(&self, prompt_id: &str) -> Option<&[f64]> {
        self.prompts.get(prompt_id).map(Vec::as_slice)
    }

    /// Number of tied maximal logits for `prompt_id`.
    pub fn tie_size(&self, prompt_id: &str) -> Option<usize> {
        self.logits(prompt_id).map(|z| maximizer_set(z, 0.0).k())
    }

    /// Prompt ids with at least two tied maximal logits, in table order.
    pub fn border_inputs(&self) -> Vec<&str> {
        self.prompts
            .iter()
            .filter(|(_, z)| maximizer_set(z, 0.0).k() >= 2)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Copy restricted to the given prompt ids.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self, SimError> {
        let mut prompts = BTreeMap::new();
        for id in ids {
            let id = id.as_ref();
            let z = self.prompts.get(id).ok_or_else(|| SimError::UnknownPrompt(id.to_owned()))?;
            prompts.insert(id.to_owned(), z.clone());
        }
        let overrides = self
            .zero_temperature_overrides
            .iter()
            .filter(|(k, _)| prompts.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            prompts,
            zero_temperature_overrides: overrides,
            ..self.clone()
        })
    }

    /// Draws one output token index. At effective temperature 0 the draw is
    /// uniform over the maximal logits, otherwise categorical from the softmax.
    pub fn sample_token<R: Rng + ?Sized>(&self, prompt_id: &str, temperature: f64, rng: &mut R) -> Result<usize, SimError> {
        let base = self
            .prompts
            .get(prompt_id)
            .ok_or_else(|| SimError::UnknownPrompt(prompt_id.to_owned()))?;
        let temperature = temperature.max(self.temperature_floor);
        let table = if temperature == 0.0 {
            self.zero_temperature_overrides.get(prompt_id).unwrap_or(base)
        } else {
            base
        };

        let jittered;
        let logits: &[f64] = if self.request_jitter > 0.0 {
            let noise = Normal::new(0.0, self.request_jitter).expect("validated jitter");
            let z: Vec<f64> = table.iter().map(|&x| x + noise.sample(rng)).collect();
            jittered = if self.quantization_step > 0.0 {
                quantize_logits(&z, self.quantization_step)
            } else {
                z
            };
            &jittered
        } else {
            table
        };

        if temperature == 0.0 {
            let m = maximizer_set(logits, 0.0);
            return Ok(m.indices()[rng.random_range(0..m.k())]);
        }
        let z = nalgebra::DVector::from_column_slice(logits);
        let p = softmax_logits(&z, temperature).expect("positive temperature");
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(p.len() - 1)
    }

    /// Draws `n` tokens into an empirical distribution over token labels.
    pub fn sample_distribution<R: Rng + ?Sized>(
        &self,
        prompt_id: &str,
        temperature: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<EmpiricalDistribution, SimError> {
        let draws = (0..n)
            .map(|_| self.sample_token(prompt_id, temperature, rng).map(token_label))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EmpiricalDistribution::from_samples(draws)?)
    }

    /// Returns a modified copy. A zero magnitude returns an identical endpoint.
    pub fn perturb(&self, p: &Perturbation) -> SyntheticEndpoint {
        if p.magnitude == 0.0 {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
        let mut out = self.clone();
        for z in out.prompts.values_mut() {
            match p.kind {
                PerturbationKind::GaussianLogitNoise => {
                    let noise = Normal::new(0.0, p.magnitude).expect("nonnegative sigma");
                    for x in z.iter_mut() {
                        *x += noise.sample(&mut rng);
                    }
                    if self.quantization_step > 0.0 {
                        *z = quantize_logits(z, self.quantization_step);
                    }
                }
                PerturbationKind::SupportCollapse => {
                    let m = maximizer_set(z, 0.0);
                    if m.k() >= 2 {
                        let winner = m.indices()[rng.random_range(0..m.k())];
                        z[winner] += p.magnitude;
                    }
                }
                PerturbationKind::LogitShift => {
                    let i = rng.random_range(0..z.len());
                    z[i] += p.magnitude;
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let ep: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        ep.validate()?;
        Ok(ep)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

/// Parameters for [`generate_endpoint`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub prompts: usize,
    pub vocab_size: usize,
    /// Probability that a prompt is a border input.
    pub border_fraction: f64,
    /// Number of tied tokens on a border input.
    pub tie_size: usize,
    pub quantization_step: f64,
    /// Standard deviation of the raw logits.
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            prompts: 100,
            vocab_size: 10,
            border_fraction: 0.5,
            tie_size: 2,
            quantization_step: 0.0625,
            logit_scale: 1.0,
            seed: 0,
        }
    }
}

/// Random endpoint in which each prompt is, independently with probability
/// `border_fraction`, a border input with exactly `tie_size` tied tokens, and
/// otherwise has a unique maximal logit.
pub fn generate_endpoint(spec: &GenerateSpec) -> Result<SyntheticEndpoint, SimError> {
    if spec.vocab_size < 2 || spec.tie_size < 2 || spec.tie_size > spec.vocab_size {
        return Err(SimError::InvalidTable(format!(
            "tie size {} incompatible with vocabulary size {}",
            spec.tie_size, spec.vocab_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.border_fraction) || spec.prompts == 0 {
        return Err(SimError::InvalidTable("need prompts and a border fraction in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.logit_scale.max(f64::MIN_POSITIVE)).expect("positive scale");
    let width = (spec.prompts - 1).to_string().len();
    let mut prompts = BTreeMap::new();
    for i in 0..spec.prompts {
        let border = rng.random_bool(spec.border_fraction);
        let want = if border { spec.tie_size } else { 1 };
        let z = loop {
            let mut z: Vec<f64> = (0..spec.vocab_size).map(|_| normal.sample(&mut rng)).collect();
            if border {
                let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut idx: Vec<usize> = (0..spec.vocab_size).collect();
                for j in 0..spec.tie_size {
                    let pick = rng.random_range(j..idx.len());
                    idx.swap(j, pick);
                    z[idx[j]] = top;
                }
            }
            if spec.quantization_step > 0.0 {
                z = quantize_logits(&z, spec.quantization_step);
            }
            if maximizer_set(&z, 0.0).k() == want {
                break z;
            }
        };
        prompts.insert(format!("p{i:0width$}"), z);
    }
    SyntheticEndpoint::new(prompts, spec.quantization_step, spec.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Adds i.i.d. Gaussian noise to every logit, then re-rounds.
    GaussianLogitNoise,
    /// Raises one tied maximal logit by `magnitude` on every border input.
    SupportCollapse,
    /// Raises one random logit per prompt by `magnitude`.
    LogitShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    pub rng_seed: u64,
}

/// Detection protocol for the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub prompt_count: usize,
    pub n1: usize,
    pub n2: usize,
    pub temperature: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            prompt_count: 5,
            n1: 50,
            n2: 3,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub magnitude: f64,
    pub auc: f64,
    pub trials: usize,
    pub seed: u64,
}

/// SplitMix64 finalizer over a sequence of words; gives each trial its own stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

fn aggregate_tv<R: Rng + ?Sized>(
    reference_endpoint: &SyntheticEndpoint,
    detection_endpoint: &SyntheticEndpoint,
    ids: &[String],
    protocol: &Protocol,
    rng: &mut R,
) -> Result<f64, SimError> {
    let mut tvs = Vec::with_capacity(ids.len());
    for id in ids {
        let reference = reference_endpoint.sample_distribution(id, protocol.temperature, protocol.n1, rng)?;
        let detection = detection_endpoint.sample_distribution(id, protocol.temperature, protocol.n2, rng)?;
        tvs.push(stats::tv_distance(&reference, &detection));
    }
    Ok(stats::aggregate_statistic(&tvs)?)
}

/// For each magnitude, scores `trials` changed and `trials` unchanged
/// detection rounds with the mean per-prompt TV and reports the ROC AUC.
///
/// The first `protocol.prompt_count` border inputs of `base` are tracked.
/// Every trial has its own seed derived from `seed`, so the output does not
/// depend on thread scheduling.
pub fn run_benchmark(
    base: &SyntheticEndpoint,
    kind: PerturbationKind,
    magnitudes: &[f64],
    trials: usize,
    protocol: &Protocol,
    seed: u64,
) -> Result<Vec<BenchmarkRow>, SimError> {
    if protocol.prompt_count == 0 || protocol.n1 == 0 || protocol.n2 == 0 || trials == 0 {
        return Err(SimError::InvalidProtocol(
            "prompt_count, n1, n2 and trials must be positive".into(),
        ));
    }
    let border = base.border_inputs();
    if border.len() < protocol.prompt_count {
        return Err(SimError::InsufficientBorderInputs {
            needed: protocol.prompt_count,
            found: border.len(),
        });
    }
    let ids: Vec<String> = border[..protocol.prompt_count].iter().map(|s| s.to_string()).collect();
    let tracked = base.subset(&ids)?;

    magnitudes
        .iter()
        .enumerate()
        .map(|(mi, &magnitude)| {
            let scores: Vec<(f64, f64)> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let (mi, t) = (mi as u64, t as u64);
                    let perturbation = Perturbation {
                        kind,
                        magnitude,
                        rng_seed: derive_seed(seed, &[mi, t, 0]),
                    };
                    let changed = tracked.perturb(&perturbation);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[mi, t, 1]));
                    let positive = aggregate_tv(&tracked, &changed, &ids, protocol, &mut rng)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[mi, t, 2]));
                    let negative = aggregate_tv(&tracked, &tracked, &ids, protocol, &mut rng)?;
                    Ok((positive, negative))
                })
                .collect::<Result<_, SimError>>()?;
            let (pos, neg): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
            Ok(BenchmarkRow {
                magnitude,
                auc: stats::roc_auc(&pos, &neg)?,
                trials,
                seed,
            })
        })
        .collect()
}

/// `magnitude,auc,trials,seed` rows with a header line.
pub fn write_benchmark_csv<W: Write>(mut out: W, rows: &[BenchmarkRow]) -> std::io::Result<()> {
    writeln!(out, "magnitude,auc,trials,seed")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.magnitude, r.auc, r.trials, r.seed)?;
    }
    Ok(())
}

/// A [`SyntheticEndpoint`] behind the [`TokenSource`] interface. Prompts are
/// looked up by id; outputs are token labels.
#[derive(Debug, Clone)]
pub struct SimulatedSource {
    endpoint: SyntheticEndpoint,
    rng: ChaCha8Rng,
    name: String,
}

impl SimulatedSource {
    pub fn new(endpoint: SyntheticEndpoint, seed: u64) -> Self {
        Self {
            name: format!("sim:{:016x}", endpoint.rng_seed),
            endpoint,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn endpoint(&self) -> &SyntheticEndpoint {
        &self.endpoint
    }

    /// Swaps the model behind the source, keeping the random stream and fingerprint.
    pub fn replace_endpoint(&mut self, endpoint: SyntheticEndpoint) {
        self.endpoint = endpoint;
    }
}

impl TokenSource for SimulatedSource {
    fn sample(&mut self, prompt: &str, temperature: f64, n: usize) -> Vec<Result<String, SourceError>> {
        (0..n)
            .map(|_| match self.endpoint.sample_token(prompt, temperature, &mut self.rng) {
                Ok(i) => Ok(token_label(i)),
                Err(SimError::UnknownPrompt(p)) => Err(SourceError::UnknownPrompt(p)),
                Err(e) => Err(SourceError::Fatal(e.to_string())),
            })
            .collect()
    }

    fn fingerprint(&self) -> String {
        self.name.clone()
    }
}
