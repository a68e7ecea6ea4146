//! Acceptance checks. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use b3it_core::budget;
use b3it_core::client::{BlockingClient, EndpointConfig};
use b3it_core::engine::{self, DetectOptions, DiscoveryOptions, MonitorHistory, MonitorOptions, MonitoringProtocol};
use b3it_core::simulator::{self, GenerateSpec, PerturbationKind, Protocol, SimulatedSource};
use b3it_core::stats::{self, EmpiricalDistribution, ErrorBoundInputs};
use b3it_core::theory::{self, Direction, SoftmaxHead};
use common::{cycle, fixed, MockServer, MockState};

const LABELS: [&str; 4] = ["A", "B", "C", "D"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn uniform_sample(rng: &mut ChaCha8Rng, k: usize, n: u64) -> EmpiricalDistribution {
    EmpiricalDistribution::from_samples((0..n).map(|_| LABELS[rng.random_range(0..k)])).unwrap()
}

fn dirac(n: u64) -> EmpiricalDistribution {
    EmpiricalDistribution::from_counts([(LABELS[0], n)]).unwrap()
}

fn se(p: f64, trials: u64) -> f64 {
    (p * (1.0 - p) / trials as f64).sqrt()
}

fn type1_rate(k: usize, n1: u64, n2: u64, trials: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..trials)
        .filter(|_| stats::support_mismatch(&uniform_sample(&mut rng, k, n1), &uniform_sample(&mut rng, k, n2)))
        .count();
    hits as f64 / trials as f64
}

fn collapse_miss_rate(n1: u64, n2: u64, trials: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let misses = (0..trials)
        .filter(|_| !stats::support_mismatch(&uniform_sample(&mut rng, 2, n1), &dirac(n2)))
        .count();
    misses as f64 / trials as f64
}

fn criterion_1() -> Verdict {
    let trials = 100_000;
    let grid: Vec<(usize, u64, u64)> = [2usize, 3, 4]
        .iter()
        .flat_map(|&k| [3u64, 6, 12].into_iter().flat_map(move |n1| [3u64, 6, 12].into_iter().map(move |n2| (k, n1, n2))))
        .collect();
    let rows: Vec<(usize, u64, u64, f64, f64)> = grid
        .par_iter()
        .enumerate()
        .map(|(i, &(k, n1, n2))| {
            let rate = type1_rate(k, n1, n2, trials, 1000 + i as u64);
            (k, n1, n2, rate, stats::type1_bound(k as u64, n1, n2).unwrap())
        })
        .collect();
    let failures: Vec<String> = rows
        .iter()
        .filter(|&&(_, _, _, rate, bound)| rate > bound + 3.0 * se(rate, trials))
        .map(|(k, n1, n2, rate, bound)| format!("k={k} n1={n1} n2={n2}: {rate:.5} > {bound:.5}"))
        .collect();
    let tightest = rows
        .iter()
        .map(|&(k, n1, n2, rate, bound)| (bound - rate, k, n1, n2, rate, bound))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "27 configs x 1e5 trials; tightest k={} n1={} n2={}: rate {:.5}, bound {:.5} (+3 SE allowed)",
                tightest.1, tightest.2, tightest.3, tightest.4, tightest.5
            )
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_2() -> Verdict {
    let trials = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, n1) in [2u64, 4, 6].into_iter().enumerate() {
        let expected = 0.5f64.powi(n1 as i32);
        let bound = stats::type2_bound(&ErrorBoundInputs::new(2, 1, 1, n1, 3).unwrap());
        let rate = collapse_miss_rate(n1, 3, trials, 2000 + i as u64);
        let within = (rate - expected).abs() <= 3.0 * se(expected, trials) && (bound - expected).abs() < 1e-15;
        ok &= within;
        parts.push(format!("n1={n1}: miss {rate:.5} vs {expected:.5}"));
    }
    verdict(ok, parts.join(", "))
}

/// Exact risk of the mismatch test for fair k=2 vs collapse with n1 = n2 = n.
fn exact_risk(n: u64) -> f64 {
    let full = 1.0 - 2.0 * 0.5f64.powi(n as i32);
    let singleton = 0.5f64.powi(n as i32);
    let agree = full * full + 2.0 * singleton * singleton;
    (1.0 - agree) + singleton
}

fn criterion_3() -> Verdict {
    let trials = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for n in 1u64..=6 {
        let t1 = type1_rate(2, n, n, trials, 3000 + n);
        let t2 = collapse_miss_rate(n, n, trials, 3100 + n);
        let risk = t1 + t2;
        let lower = stats::risk_lower_bound(n).unwrap();
        let upper = 8.0 * lower;
        let pass = risk >= lower && risk <= upper;
        ok &= pass;
        parts.push(format!(
            "n={n}: {risk:.4} in [{lower:.4}, {upper:.4}]{} (exact {:.4})",
            if pass { "" } else { " NO" },
            exact_risk(n)
        ));
    }
    verdict(ok, parts.join(", "))
}

fn random_unit(rng: &mut ChaCha8Rng, q: usize) -> Direction {
    loop {
        let v = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-3 {
            return Direction::normalized(v).unwrap();
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_head(rng: &mut ChaCha8Rng) -> (SoftmaxHead, usize) {
    let d = rng.random_range(2..=6);
    let q = rng.random_range(1..=4);
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let tau = rng.random_range(0.3..3.0);
    let head = SoftmaxHead::new(z, tau).unwrap().with_jacobian(random_matrix(rng, d, q)).unwrap();
    (head, q)
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (head, q) = random_head(&mut rng);
        let h = random_unit(&mut rng, q);
        let full = theory::snr_squared(&head, &h).unwrap();
        let p = theory::softmax(&head).unwrap();
        let d = p.len();
        let j = theory::reduced_output_jacobian(&head).unwrap();
        let reduced = theory::snr_squared_reduced(&j, &p.rows(0, d - 1).into_owned(), &h).unwrap();
        worst = worst.max((full - reduced).abs() / full.abs().max(1e-300));
    }
    verdict(worst <= 1e-8, format!("max relative difference {worst:.3e} over 100 heads"))
}

fn loglog_slope(points: &[theory::SweepPoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.temperature.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.snr_squared.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = theory::descending_grid(1.0, 1e-3, 61);
    let jz = random_matrix(&mut rng, 3, 3);
    let h = random_unit(&mut rng, 3);

    let single = SoftmaxHead::new(DVector::from_vec(vec![0.0, -1.0, -1.5]), 1.0)
        .unwrap()
        .with_jacobian(jz.clone())
        .unwrap();
    let s1 = theory::phase_transition_sweep(&single, &h, &grid).unwrap();
    let k1_end = s1.last().unwrap().snr_squared;

    let tied_logits = DVector::from_vec(vec![0.0, 0.0, -1.0]);
    let m = theory::maximizer_set(tied_logits.as_slice(), 0.0);
    let sigma_m = theory::sigma_uniform_on(m.indices(), 3).unwrap();
    let v = &jz * h.as_vector();
    let limit = (v.transpose() * sigma_m * &v)[(0, 0)];
    let tied = SoftmaxHead::new(tied_logits, 1.0).unwrap().with_jacobian(jz).unwrap();
    let s2 = theory::phase_transition_sweep(&tied, &h, &grid).unwrap();
    let k2_end = s2.last().unwrap().snr_squared;
    let tail: Vec<_> = s2.iter().copied().filter(|p| p.temperature <= 0.1).collect();
    let slope = loglog_slope(&tail);

    let pass = k1_end < 1e-6 && limit > 1e-6 && k2_end > 1e4 && (slope + 2.0).abs() <= 0.02;
    verdict(
        pass,
        format!("k=1 SNR^2(1e-3) = {k1_end:.3e}; k=2 SNR^2(1e-3) = {k2_end:.3e}, log-log slope {slope:.5}"),
    )
}

fn criterion_6() -> Verdict {
    let l = |m, f| budget::cost_per_bi(m, f).unwrap();
    let grid_ok = (1..=1000).all(|i| {
        let f = i as f64 / 1000.0;
        l(3, f) < l(2, f)
    });

    let g = |f| l(4, f) - l(3, f);
    let (mut lo, mut hi) = (0.5, 0.99);
    let bracketed = g(lo) > 0.0 && g(hi) < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let crossover = 0.5 * (lo + hi);

    let endpoint = simulator::generate_endpoint(&GenerateSpec {
        prompts: 10_000,
        border_fraction: 0.5,
        tie_size: 2,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let candidates: Vec<String> = endpoint.prompt_ids().map(str::to_owned).collect();
    let mut src = SimulatedSource::new(endpoint, 6);
    let report = engine::discover(&mut src, &candidates, &DiscoveryOptions::default()).unwrap();
    let per_bi = report.requests_per_bi().unwrap();
    let target = l(3, 0.5);
    let rel = (per_bi - target).abs() / target;

    verdict(
        grid_ok && bracketed && (crossover - 0.75).abs() <= 1e-6 && rel <= 0.05,
        format!(
            "L(3)<L(2) on grid: {grid_ok}; crossover {crossover:.9}; discovery {per_bi:.4} req/BI vs {target:.4} ({:.2}%)",
            rel * 100.0
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (head, q) = random_head(&mut rng);
        let d = head.vocab_size();
        let jz = head.jacobian().unwrap().clone();
        let analytic = theory::reduced_output_jacobian(&head).unwrap();
        let reduced_at = |theta: &DVector<f64>| {
            let z = head.logits() + &jz * theta;
            theory::softmax_logits(&z, head.temperature()).unwrap().rows(0, d - 1).into_owned()
        };
        for j in 0..q {
            let mut plus = DVector::zeros(q);
            plus[j] = eps;
            let minus = -plus.clone();
            let fd = (reduced_at(&plus) - reduced_at(&minus)) / (2.0 * eps);
            worst = worst.max((fd - analytic.column(j)).abs().max());
        }
    }
    verdict(worst <= 1e-5, format!("max abs difference {worst:.3e} over 50 heads"))
}

fn criterion_8() -> Verdict {
    let spec = GenerateSpec {
        seed: 8,
        ..Default::default()
    };
    let base = simulator::generate_endpoint(&spec).unwrap();
    let protocol = Protocol::default();
    let collapse = simulator::run_benchmark(&base, PerturbationKind::SupportCollapse, &[1.0], 500, &protocol, 81).unwrap();
    let null = simulator::run_benchmark(&base, PerturbationKind::SupportCollapse, &[0.0], 1000, &protocol, 82).unwrap();
    let sigmas: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|m| m * spec.quantization_step)
        .collect();
    let noise = simulator::run_benchmark(&base, PerturbationKind::GaussianLogitNoise, &sigmas, 500, &protocol, 83).unwrap();
    let monotone = noise.windows(2).all(|w| w[1].auc >= w[0].auc - 0.03);
    let curve: Vec<String> = noise.iter().map(|r| format!("{:.3}", r.auc)).collect();
    let pass = collapse[0].auc >= 0.95 && (null[0].auc - 0.5).abs() <= 0.05 && monotone;
    verdict(
        pass,
        format!(
            "collapse AUC {:.4}; null AUC {:.4}; gaussian curve [{}]",
            collapse[0].auc,
            null[0].auc,
            curve.join(", ")
        ),
    )
}

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let q = rng.random_range(1..=5);
        let d = rng.random_range(2..=8);
        let k = rng.random_range(1..=d);
        let r = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut idx: Vec<usize> = (0..d).collect();
        for i in 0..k {
            let j = rng.random_range(i..d);
            idx.swap(i, j);
        }
        let sigma_m = theory::sigma_uniform_on(&idx[..k], d).unwrap();
        let j = theory::head_jacobian(&r, d);
        let trace = (j.transpose() * sigma_m * &j).trace();
        let expected = (r.norm_squared() + 1.0) * (1.0 - 1.0 / k as f64);
        worst = worst.max((trace - expected).abs());
    }
    verdict(worst <= 1e-9, format!("max abs difference {worst:.3e} over 200 cases"))
}

fn criterion_10() -> Verdict {
    let mut state = MockState::new();
    let mut candidates = Vec::new();
    for i in 0..5 {
        for j in 0..2 {
            let x = format!("x{i}{j}");
            state = state.with(&x, fixed("same"));
            candidates.push(x);
        }
        let bi = format!("bi{i}");
        state = state.with(&bi, cycle(&["A", "B"]));
        candidates.push(bi);
    }
    let server = MockServer::start(state);
    let config = EndpointConfig {
        max_concurrent_requests: 8,
        backoff_base_ms: 1,
        backoff_cap_ms: 5,
        price_in: 0.38,
        price_out: 1.2,
        ..EndpointConfig::new(server.base_url(), "mock-model")
    };
    let mut client = BlockingClient::new(config.clone()).unwrap();

    let discovery = engine::discover(
        &mut client,
        &candidates,
        &DiscoveryOptions {
            target: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let discovery_ok = discovery.border_inputs.len() == 5 && discovery.requests == 5 * 2 + 10 * 3;

    let refs = engine::collect_reference(&mut client, &discovery.border_inputs, 50, 0.0).unwrap();
    let refs_ok = refs.records.iter().all(|r| r.is_complete() && r.reference.count("A") == 25);

    let dir = tempfile::tempdir().unwrap();
    let history_path = dir.path().join("history.jsonl");
    let fingerprint = config.fingerprint();
    let mut history = MonitorHistory::new(&fingerprint);
    let opts = MonitorOptions {
        detect: DetectOptions::default(),
        rounds: 6,
        interval: Duration::ZERO,
        threshold: engine::DEFAULT_THRESHOLD,
        window: engine::DEFAULT_WINDOW,
    };
    let before = engine::run_monitor(&mut client, &refs.records, &mut history, Some(&history_path), &opts).unwrap();
    server.state.collapse();
    let events = engine::run_monitor(&mut client, &refs.records, &mut history, Some(&history_path), &opts).unwrap();
    let reloaded = engine::read_history(&history_path, &fingerprint).unwrap();
    let reload_events = reloaded.change_events(engine::DEFAULT_THRESHOLD, engine::DEFAULT_WINDOW);
    let onset_ok = events.len() == 1 && events[0].onset == history.series()[6].timestamp;

    let cost = engine::estimate_yearly_cost(&config, &MonitoringProtocol::default(), 7.0).cost;
    let cost_ok = (cost - 0.52).abs() / 0.52 <= 0.10;

    let pass = discovery_ok
        && refs_ok
        && before.is_empty()
        && onset_ok
        && reload_events == events
        && reloaded == history
        && cost_ok;
    verdict(
        pass,
        format!(
            "discovery {} BIs / {} requests; tv series {:?}; {} change event(s); cost ${cost:.4}/yr",
            discovery.border_inputs.len(),
            discovery.requests,
            history.tv_series().iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            events.len(),
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Verdict); 10] = [
        (1, "type-I rate vs bound", Duration::from_secs(60), criterion_1),
        (2, "collapse miss rate", Duration::from_secs(60), criterion_2),
        (3, "risk sandwich", Duration::from_secs(60), criterion_3),
        (4, "SNR^2 two routes", Duration::from_secs(5), criterion_4),
        (5, "low-temperature phase transition", Duration::from_secs(5), criterion_5),
        (6, "discovery budget", Duration::from_secs(30), criterion_6),
        (7, "Jacobian vs finite differences", Duration::from_secs(5), criterion_7),
        (8, "simulated benchmark AUC", Duration::from_secs(300), criterion_8),
        (9, "head trace identity", Duration::from_secs(1), criterion_9),
        (10, "mock endpoint operations", Duration::from_secs(60), criterion_10),
    ];
    let mut failed = 0;
    for (n, name, budget, check) in criteria {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {}: {name}: {} [{:.2}s / {}s budget]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
