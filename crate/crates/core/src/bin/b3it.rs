use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use b3it_core::budget::BudgetModel;
use b3it_core::client::{BlockingClient, EndpointConfig};
use b3it_core::engine::{
    self, DetectOptions, DiscoveryOptions, MonitorHistory, MonitorOptions, MonitoringProtocol,
};
use b3it_core::prompts::{self, RankOptions};
use b3it_core::simulator::{
    self, GenerateSpec, Perturbation, PerturbationKind, Protocol, SimulatedSource, SyntheticEndpoint,
};
use b3it_core::source::TokenSource;
use b3it_core::theory::{self, Direction, SoftmaxHead};

const EXIT_CHANGE: u8 = 2;
const EXIT_ERROR: u8 = 1;

#[derive(Parser)]
#[command(name = "b3it", version, about = "Black-box change detection for LLM endpoints")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Endpoint config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use a synthetic endpoint file (JSON) instead of a real endpoint.
    #[arg(long, global = true)]
    sim: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Sampling temperature; defaults to the endpoint's configured value, else 0.
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true, default_value_t = 50)]
    n1: u64,
    #[arg(long, global = true, default_value_t = 3)]
    n2: u64,
    #[arg(long, global = true, default_value_t = 5)]
    prompt_count: usize,
    /// Output file; stdout when omitted.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Rank candidate prompts from tokenizer vocabulary files.
    Candidates {
        #[arg(required = true)]
        vocab: Vec<PathBuf>,
        /// Strings known to encode into more than two token ids.
        #[arg(long)]
        exclusions: Option<PathBuf>,
    },
    /// Find border inputs among candidate prompts.
    Discover {
        /// Candidate file, one prompt per line. Defaults to all prompts of --sim.
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        m: u32,
        /// Stop after this many border inputs (default: --prompt-count).
        #[arg(long)]
        target: Option<usize>,
        /// Visit candidates in seeded random order.
        #[arg(long)]
        shuffle: bool,
    },
    /// Sample reference distributions for discovered border inputs.
    Reference {
        #[arg(long)]
        border_inputs: PathBuf,
    },
    /// Run one detection round; exits 2 when a change is flagged.
    Detect {
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        include_incomplete: bool,
        /// Which statistic decides the exit code.
        #[arg(long, value_enum, default_value = "tv")]
        rule: DecisionRule,
        /// Aggregate TV at or above this flags a change under `--rule tv`.
        #[arg(long, default_value_t = engine::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run repeated detection rounds, appending to a history file; exits 2
    /// when the history contains a change event.
    Monitor {
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 3600.0)]
        interval_secs: f64,
        #[arg(long, default_value_t = engine::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = engine::DEFAULT_WINDOW)]
        window: usize,
        /// With --sim: apply --perturbation after this many rounds.
        #[arg(long, requires = "perturbation")]
        inject_after: Option<usize>,
        #[arg(long, value_enum)]
        perturbation: Option<PerturbationKind>,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
    },
    /// Generate a synthetic endpoint, or perturb the one given by --sim.
    Simulate {
        #[arg(long, default_value_t = 100)]
        prompts: usize,
        #[arg(long, default_value_t = 10)]
        vocab_size: usize,
        #[arg(long, default_value_t = 0.5)]
        border_fraction: f64,
        #[arg(long, default_value_t = 2)]
        tie_size: usize,
        #[arg(long, default_value_t = 0.0625)]
        step: f64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, value_enum)]
        perturbation: Option<PerturbationKind>,
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
    },
    /// ROC AUC of the TV statistic against a perturbation family.
    Bench {
        #[arg(long, value_enum, default_value = "support-collapse")]
        perturbation: PerturbationKind,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        magnitudes: Vec<f64>,
        #[arg(long, default_value_t = 500)]
        trials: usize,
    },
    /// SNR^2 of a softmax head along a descending temperature grid.
    TheorySweep {
        /// Logits, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        logits: Vec<f64>,
        /// Logit-space direction, comma separated (normalized). Defaults to e_0 - e_1.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        direction: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        tau_max: f64,
        #[arg(long, default_value_t = 1e-3)]
        tau_min: f64,
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
    /// Expected discovery cost per border input for stopping limits 2..=m-max.
    Budget {
        #[arg(long, default_value_t = 0.5)]
        f_b: f64,
        #[arg(long, default_value_t = 10)]
        m_max: u32,
    },
    /// Check endpoints in --config against the selection rules.
    Screen {
        #[arg(long, default_value = "a")]
        probe: String,
    },
    /// Yearly monitoring cost and one-off initialization cost.
    Cost {
        /// USD per million input tokens (default: from --config).
        #[arg(long)]
        price_in: Option<f64>,
        /// USD per million output tokens (default: from --config).
        #[arg(long)]
        price_out: Option<f64>,
        #[arg(long, default_value_t = 7.0)]
        input_tokens: f64,
        /// Detection rounds per day.
        #[arg(long, default_value_t = 24.0)]
        rounds_per_day: f64,
        /// Assumed border-input fraction among candidates, for the initialization estimate.
        #[arg(long, default_value_t = 0.05)]
        f_b: f64,
        #[arg(long, default_value_t = 3)]
        m: u32,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DecisionRule {
    /// Mean per-prompt TV distance against --threshold.
    Tv,
    /// Any support mismatch. Strict: with few detection samples it also
    /// fires on unchanged endpoints.
    Mismatch,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn write_jsonl_stdout<T: serde::Serialize>(items: &[T]) -> Result<()> {
    let mut out = open_output(None)?;
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

enum Source {
    Sim(SimulatedSource),
    Http(Box<BlockingClient>),
}

impl Source {
    fn as_dyn(&mut self) -> &mut dyn TokenSource {
        match self {
            Source::Sim(s) => s,
            Source::Http(c) => c.as_mut(),
        }
    }
}

fn load_config(g: &Global) -> Result<EndpointConfig> {
    let path = g.config.as_ref().context("--config is required")?;
    Ok(EndpointConfig::load(path)?)
}

fn open_source(g: &Global) -> Result<(Source, f64)> {
    if let Some(path) = &g.sim {
        let ep = SyntheticEndpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        return Ok((Source::Sim(SimulatedSource::new(ep, g.seed)), g.temperature.unwrap_or(0.0)));
    }
    if g.config.is_some() {
        let config = load_config(g)?;
        let temperature = g.temperature.unwrap_or(config.default_temperature);
        return Ok((Source::Http(Box::new(BlockingClient::new(config)?)), temperature));
    }
    bail!("either --config or --sim is required")
}

fn run(cli: Cli) -> Result<u8> {
    let g = &cli.global;
    let out = g.output.as_deref();
    match cli.command {
        Command::Candidates { vocab, exclusions } => {
            let exclusions = match exclusions {
                Some(p) => prompts::read_exclusions(&p)?,
                None => Default::default(),
            };
            let ranked = prompts::rank_candidates(
                &vocab,
                &RankOptions {
                    exclusions,
                    ..Default::default()
                },
            )?;
            if ranked.invalid_utf8_lines > 0 {
                eprintln!("skipped {} lines that were not valid UTF-8", ranked.invalid_utf8_lines);
            }
            let mut w = open_output(out)?;
            prompts::write_candidates(&mut w, &ranked.candidates)?;
            w.flush()?;
        }
        Command::Discover {
            candidates,
            m,
            target,
            shuffle,
        } => {
            let (mut source, temperature) = open_source(g)?;
            let candidates = match (&candidates, &source) {
                (Some(p), _) => prompts::read_candidates(p)?,
                (None, Source::Sim(s)) => s.endpoint().prompt_ids().map(str::to_owned).collect(),
                (None, Source::Http(_)) => bail!("--candidates is required for real endpoints"),
            };
            let opts = DiscoveryOptions {
                m,
                target: target.unwrap_or(g.prompt_count),
                temperature,
                shuffle_seed: shuffle.then_some(g.seed),
            };
            let report = engine::discover(source.as_dyn(), &candidates, &opts)?;
            eprintln!(
                "found {} border inputs in {} requests over {} candidates",
                report.border_inputs.len(),
                report.requests,
                report.candidates_examined
            );
            match out {
                Some(p) => engine::write_border_inputs(p, &report.border_inputs)?,
                None => write_jsonl_stdout(&report.border_inputs)?,
            }
        }
        Command::Reference { border_inputs } => {
            let (mut source, temperature) = open_source(g)?;
            let bis = engine::read_border_inputs(&border_inputs)?;
            let report = engine::collect_reference(source.as_dyn(), &bis, g.n1, temperature)?;
            for f in &report.failed {
                eprintln!("no reference for {:?}: {}", f.prompt, f.reason);
            }
            let incomplete = report.records.iter().filter(|r| !r.is_complete()).count();
            if incomplete > 0 {
                eprintln!("{incomplete} reference records are incomplete");
            }
            match out {
                Some(p) => engine::write_references(p, &report.records)?,
                None => write_jsonl_stdout(&report.records)?,
            }
        }
        Command::Detect {
            references,
            include_incomplete,
            rule,
            threshold,
        } => {
            let (mut source, temperature) = open_source(g)?;
            let records = engine::read_references(&references)?;
            let outcome = engine::detect(
                source.as_dyn(),
                &records,
                &DetectOptions {
                    n2: g.n2,
                    temperature,
                    include_incomplete,
                },
            )?;
            write_json(out, &outcome)?;
            let changed = match rule {
                DecisionRule::Tv => outcome.aggregate_tv >= threshold,
                DecisionRule::Mismatch => outcome.binary_decision,
            };
            if changed {
                return Ok(EXIT_CHANGE);
            }
        }
        Command::Monitor {
            references,
            history,
            rounds,
            interval_secs,
            threshold,
            window,
            inject_after,
            perturbation,
            magnitude,
        } => {
            let (mut source, temperature) = open_source(g)?;
            let records = engine::read_references(&references)?;
            let fingerprint = source.as_dyn().fingerprint();
            let mut hist: MonitorHistory = engine::read_history(&history, &fingerprint)?;
            let mut opts = MonitorOptions {
                detect: DetectOptions {
                    n2: g.n2,
                    temperature,
                    include_incomplete: false,
                },
                rounds,
                interval: Duration::from_secs_f64(interval_secs.max(0.0)),
                threshold,
                window,
            };
            let events = match (inject_after, &mut source) {
                (Some(after), Source::Sim(sim)) => {
                    let kind = perturbation.expect("clap enforces");
                    opts.rounds = after.min(rounds);
                    engine::run_monitor(sim, &records, &mut hist, Some(&history), &opts)?;
                    let changed = sim.endpoint().perturb(&Perturbation {
                        kind,
                        magnitude,
                        rng_seed: g.seed,
                    });
                    sim.replace_endpoint(changed);
                    opts.rounds = rounds - opts.rounds;
                    engine::run_monitor(sim, &records, &mut hist, Some(&history), &opts)?
                }
                (Some(_), Source::Http(_)) => bail!("--inject-after only works with --sim"),
                (None, s) => engine::run_monitor(s.as_dyn(), &records, &mut hist, Some(&history), &opts)?,
            };
            write_json(out, &events)?;
            if !events.is_empty() {
                return Ok(EXIT_CHANGE);
            }
        }
        Command::Simulate {
            prompts,
            vocab_size,
            border_fraction,
            tie_size,
            step,
            scale,
            perturbation,
            magnitude,
        } => {
            let ep = match (&g.sim, perturbation) {
                (Some(path), Some(kind)) => SyntheticEndpoint::load(path)?.perturb(&Perturbation {
                    kind,
                    magnitude,
                    rng_seed: g.seed,
                }),
                (None, Some(_)) => bail!("--perturbation needs --sim with the endpoint to perturb"),
                (_, None) => simulator::generate_endpoint(&GenerateSpec {
                    prompts,
                    vocab_size,
                    border_fraction,
                    tie_size,
                    quantization_step: step,
                    logit_scale: scale,
                    seed: g.seed,
                })?,
            };
            eprintln!("{} prompts, {} border inputs", ep.len(), ep.border_inputs().len());
            match out {
                Some(p) => ep.save(p)?,
                None => write_json(None, &ep)?,
            }
        }
        Command::Bench {
            perturbation,
            magnitudes,
            trials,
        } => {
            let base = match &g.sim {
                Some(p) => SyntheticEndpoint::load(p)?,
                None => simulator::generate_endpoint(&GenerateSpec {
                    seed: g.seed,
                    ..Default::default()
                })?,
            };
            let protocol = Protocol {
                prompt_count: g.prompt_count,
                n1: g.n1 as usize,
                n2: g.n2 as usize,
                temperature: g.temperature.unwrap_or(0.0),
            };
            let rows = simulator::run_benchmark(&base, perturbation, &magnitudes, trials, &protocol, g.seed)?;
            let mut w = open_output(out)?;
            simulator::write_benchmark_csv(&mut w, &rows)?;
            w.flush()?;
        }
        Command::TheorySweep {
            logits,
            direction,
            tau_max,
            tau_min,
            points,
        } => {
            let d = logits.len();
            if d < 2 {
                bail!("need at least two logits");
            }
            let h = if direction.is_empty() {
                let mut v = DVector::zeros(d);
                v[0] = 1.0;
                v[1] = -1.0;
                v
            } else {
                DVector::from_vec(direction)
            };
            let head = SoftmaxHead::new(DVector::from_vec(logits), tau_max)?.with_jacobian(DMatrix::identity(d, d))?;
            let sweep = theory::phase_transition_sweep(
                &head,
                &Direction::normalized(h)?,
                &theory::descending_grid(tau_max, tau_min, points),
            )?;
            let mut w = open_output(out)?;
            theory::write_sweep_csv(&mut w, &sweep)?;
            w.flush()?;
        }
        Command::Budget { f_b, m_max } => {
            let model = BudgetModel::new(f_b, m_max)?;
            let mut w = open_output(out)?;
            writeln!(w, "m,expected_samples,success_probability,cost_per_bi")?;
            for r in model.table() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    r.m, r.expected_samples, r.success_probability, r.cost_per_bi
                )?;
            }
            w.flush()?;
            eprintln!("optimal m = {}", model.optimal_m());
        }
        Command::Screen { probe } => {
            let path = g.config.as_ref().context("--config is required")?;
            let mut reports = Vec::new();
            for config in EndpointConfig::load_all(path)? {
                let client = BlockingClient::new(config)?;
                reports.push(client.screen(&probe));
            }
            write_json(out, &reports)?;
        }
        Command::Cost {
            price_in,
            price_out,
            input_tokens,
            rounds_per_day,
            f_b,
            m,
        } => {
            let mut config = match &g.config {
                Some(_) => load_config(g)?,
                None => EndpointConfig::new("", ""),
            };
            if let Some(p) = price_in {
                config.price_in = p;
            }
            if let Some(p) = price_out {
                config.price_out = p;
            }
            if config.price_in < 0.0 || config.price_out < 0.0 {
                bail!("prices must be nonnegative");
            }
            let protocol = MonitoringProtocol {
                prompt_count: g.prompt_count as u64,
                n2: g.n2,
                rounds_per_day,
            };
            let yearly = engine::estimate_yearly_cost(&config, &protocol, input_tokens);
            let init =
                engine::estimate_initialization_cost(&config, g.prompt_count as u64, m, f_b, g.n1, input_tokens)?;
            write_json(
                out,
                &serde_json::json!({
                    "yearly_requests": yearly.requests,
                    "yearly_cost_usd": yearly.cost,
                    "initialization_requests": init.requests,
                    "initialization_cost_usd": init.cost,
                }),
            )?;
        }
    }
    Ok(0)
}
