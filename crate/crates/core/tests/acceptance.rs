//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use fedsel::agent::{
    ddql_loss_and_grad, ddql_target, fit_pca, select_top_u, AgentConfig, AgentState, DdqlAgent,
    NormStats, QNetwork, TargetState, Transition,
};
use fedsel::config::{PerformanceMetric, PolicyKind};
use fedsel::data::{
    distinct_labels, partition, synth_blobs, PartitionPlan, PartitionScheme,
};
use fedsel::hardware::{
    builtin_hardware_catalog, client_latency, local_compute_time, round_robin_profiles,
    sample_round_conditions, transmission_time, ClientSystemProfile,
};
use fedsel::numerics::{LabeledDataset, ParamVector};
use fedsel::output::{run_to_dir, METRICS_FILE};
use fedsel::scoring::{
    divergence, minmax_normalize, reputation_update, utility, ReputationLedger, ScoreConfig,
};
use fedsel::seeds::SimRng;
use fedsel::sim::{rounds_to_target, run_simulation, RunResult};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Scoring formulas
// ---------------------------------------------------------------------------

fn formula_suite() -> Outcome {
    let mut r = rng(101);
    let cases = 25;
    let mut worst: f64 = 0.0;

    for _ in 0..cases {
        let len = r.random_range(1..40);
        let g: Vec<f64> = (0..len).map(|_| r.random_range(-3.0..3.0)).collect();
        let c: Vec<f64> = g.iter().map(|v| v + r.random_range(-1.0..1.0)).collect();
        let eps = 1e-8;
        let mut total = 0.0;
        for i in 0..len {
            let denom = if g[i].abs() > eps { g[i].abs() } else { eps };
            total += ((c[i] - g[i]) / denom).abs();
        }
        let want = total / len as f64;
        let got = divergence(&ParamVector(c), &ParamVector(g), eps).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs() / want.max(1.0));
    }
    ensure!(worst <= 1e-10, "divergence off by {worst:e}");

    for _ in 0..cases {
        let d: f64 = r.random_range(0.0..20.0);
        let improved = r.random_bool(0.5);
        let want = if improved { (-d).exp() } else { 1.0 - (-d).exp() };
        worst = worst.max((utility(d, improved).map_err(|e| e.to_string())? - want).abs());
    }
    ensure!(worst <= 1e-10, "utility off by {worst:e}");

    for case in 0..cases {
        let len = r.random_range(1..20);
        let v: Vec<f64> = if case % 8 == 0 {
            vec![r.random_range(0.0..5.0); len]
        } else {
            (0..len).map(|_| r.random_range(0.0..100.0)).collect()
        };
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let got = minmax_normalize(&v).map_err(|e| e.to_string())?;
        for (x, y) in v.iter().zip(&got) {
            let want = if hi == lo { 0.5 } else { (x - lo) / (hi - lo) };
            worst = worst.max((y - want).abs());
        }
    }
    ensure!(worst <= 1e-10, "min-max normalisation off by {worst:e}");

    for _ in 0..cases {
        let cfg = ScoreConfig {
            lambda: r.random_range(0.0..1.0),
            alpha1: r.random_range(0.0..1.0),
            alpha2: r.random_range(0.0..1.0),
            psi_init: r.random_range(-0.1..0.1),
            ..ScoreConfig::default()
        };
        let steps = r.random_range(1..30);
        let mut ledger = ReputationLedger::new(1, cfg.psi_init);
        let mut instants = Vec::new();
        for _ in 0..steps {
            let zeta: f64 = r.random_range(0.0..1.0);
            let lat: f64 = r.random_range(0.0..1.0);
            instants.push(cfg.alpha1 * zeta - cfg.alpha2 * lat);
            reputation_update(&mut ledger, 0, zeta, lat, &cfg).map_err(|e| e.to_string())?;
        }
        let t = instants.len() as i32;
        let keep = 1.0 - cfg.lambda;
        let closed: f64 = instants
            .iter()
            .enumerate()
            .map(|(i, g)| cfg.lambda * keep.powi(t - 1 - i as i32) * g)
            .sum::<f64>()
            + keep.powi(t) * cfg.psi_init;
        worst = worst.max((ledger.get(0).unwrap() - closed).abs());
    }
    ensure!(worst <= 1e-10, "reputation recursion off by {worst:e}");

    let mut comp: f64 = 0.0;
    for _ in 0..10_000 {
        let d: f64 = r.random_range(0.0..50.0);
        let s = utility(d, true).unwrap() + utility(d, false).unwrap();
        comp = comp.max((s - 1.0).abs());
    }
    ensure!(comp <= 1e-12, "utility branches sum to 1 ± {comp:e}");
    Ok(format!("{cases} cases per formula, max abs err {worst:.1e}; 10^4 complementarity checks"))
}

// ---------------------------------------------------------------------------
// Latency model
// ---------------------------------------------------------------------------

/// Device rows as (MHz, cores) and link rows in Mb/s, typed in independently
/// of the built-in catalog.
const DEVICES: [(f64, u32); 12] = [
    (921.0, 128),
    (1300.0, 256),
    (800.0, 384),
    (1100.0, 384),
    (1377.0, 384),
    (350.0, 4),
    (1500.0, 4),
    (700.0, 1),
    (3950.0, 2),
    (4300.0, 4),
    (4400.0, 4),
    (4400.0, 8),
];
const LINKS: [f64; 4] = [6.0, 33.0, 336.0, 100.0];

fn latency_suite() -> Outcome {
    let catalog = builtin_hardware_catalog();
    let mut checked = 0;
    for (i, &(f, cores)) in DEVICES.iter().enumerate() {
        for (j, &b) in LINKS.iter().enumerate() {
            let profile =
                ClientSystemProfile::new(catalog.hardware[i].clone(), catalog.protocols[j].clone())
                    .deterministic();
            let cond = sample_round_conditions(&profile, &mut rng((i * 4 + j) as u64));
            let data_bits = 1e6 * (i + 1) as f64;
            let model_bits = 3.2e5 * (j + 1) as f64;
            let want = data_bits / (cores as f64 * f * 1e6) + model_bits / (b * 1e6);
            let got = client_latency(&profile, &cond, data_bits, model_bits).map_err(|e| e.to_string())?;
            ensure!(
                (got - want).abs() <= 1e-12 * want.max(1.0),
                "device {} link {}: {got} vs {want}",
                i + 1,
                j + 1
            );
            checked += 1;
        }
    }

    let mut r = rng(7);
    for trial in 0..1000 {
        let bits: f64 = r.random_range(1e3..1e9);
        let g: f64 = r.random_range(0.5..50.0);
        let cores: u32 = r.random_range(1..400);
        let f: f64 = r.random_range(100.0..5000.0);
        let model: f64 = r.random_range(1e3..1e8);
        let b: f64 = r.random_range(1.0..400.0);
        let up: f64 = r.random_range(1.0001..2.0);
        let total = |bits: f64, g: f64, cores: u32, f: f64, model: f64, b: f64| {
            local_compute_time(bits, g, cores, f).unwrap() + transmission_time(model, b).unwrap()
        };
        let base = total(bits, g, cores, f, model, b);
        let ok = base > 0.0
            && total(bits * up, g, cores, f, model, b) > base
            && total(bits, g * up, cores, f, model, b) > base
            && total(bits, g, cores, f, model * up, b) > base
            && total(bits, g, cores + 1, f, model, b) < base
            && total(bits, g, cores, f * up, model, b) < base
            && total(bits, g, cores, f, model, b * up) < base;
        ensure!(ok, "monotonicity violated on trial {trial}");
    }
    Ok(format!("{checked} device x link cases exact; 1000 monotonicity trials"))
}

// ---------------------------------------------------------------------------
// DDQL
// ---------------------------------------------------------------------------

fn random_state(len: usize, r: &mut SimRng) -> AgentState {
    AgentState((0..len).map(|_| r.random_range(-1.0..1.0)).collect())
}

fn random_transition(len: usize, n: usize, u: usize, done: bool, r: &mut SimRng) -> Transition {
    let mut actions = rand::seq::index::sample(r, n, u).into_vec();
    actions.sort_unstable();
    Transition {
        state: random_state(len, r),
        next_state: random_state(len, r),
        rewards: (0..u).map(|_| r.random_range(-0.5..0.5)).collect(),
        actions,
        done,
    }
}

fn brute_force_top(q: &[f64], u: usize) -> Vec<usize> {
    let mut left: Vec<usize> = (0..q.len()).collect();
    let mut out = Vec::new();
    for _ in 0..u {
        let mut best = 0;
        for pos in 1..left.len() {
            if q[left[pos]] > q[left[best]] {
                best = pos;
            }
        }
        out.push(left.remove(best));
    }
    out.sort_unstable();
    out
}

fn ddql_suite() -> Outcome {
    let (n, u, k) = (3, 2, 2);
    let state_len = n * (k + 4);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut r = rng(500 + seed);
        let main = QNetwork::new(state_len, 6, n, &mut r).map_err(|e| e.to_string())?;
        let target = QNetwork::new(state_len, 6, n, &mut r).map_err(|e| e.to_string())?;
        let owned: Vec<Transition> = (0..4)
            .map(|i| random_transition(state_len, n, u, i == 3, &mut r))
            .collect();
        let batch: Vec<&Transition> = owned.iter().collect();
        let (_, g) = ddql_loss_and_grad(&main, &target, &batch, 0.9, TargetState::Next)
            .map_err(|e| e.to_string())?;
        let h = 1e-6;
        for i in 0..main.params.len() {
            let mut up = main.clone();
            let mut dn = main.clone();
            up.params.0[i] += h;
            dn.params.0[i] -= h;
            let lu = ddql_loss_and_grad(&up, &target, &batch, 0.9, TargetState::Next).unwrap().0;
            let ld = ddql_loss_and_grad(&dn, &target, &batch, 0.9, TargetState::Next).unwrap().0;
            let fd = (lu - ld) / (2.0 * h);
            let rel = (g.0[i] - fd).abs() / g.0[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure!(worst <= 1e-4, "gradient relative error {worst:e}");

    let mut r = rng(77);
    let main = QNetwork::new(state_len, 6, n, &mut r).unwrap();
    let target = QNetwork::new(state_len, 6, n, &mut r).unwrap();
    for _ in 0..20 {
        let done = random_transition(state_len, n, u, true, &mut r);
        ensure!(
            ddql_target(&done, &main, &target, 0.9, TargetState::Next).unwrap() == done.rewards,
            "terminal target is not the reward"
        );
        let live = random_transition(state_len, n, u, false, &mut r);
        ensure!(
            ddql_target(&live, &main, &target, 0.0, TargetState::Next).unwrap() == live.rewards,
            "gamma = 0 target is not the reward"
        );
    }

    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let projector = fit_pca(&rows, k, &mut r).unwrap();
    let profiles = round_robin_profiles(&builtin_hardware_catalog(), n);
    let norm = NormStats::from_catalog(&builtin_hardware_catalog(), &profiles, &[10, 20, 30]);
    let cfg = AgentConfig {
        hidden_dim: 6,
        k_pca: k,
        batch_size: 4,
        target_sync_every: 10,
        ..AgentConfig::default()
    };
    let mut agent = DdqlAgent::new(cfg, n, 100, projector, norm, &mut r).unwrap();
    let mut synced_at = Vec::new();
    for step in 1..=35u64 {
        let tr = random_transition(state_len, n, u, false, &mut r);
        let target_before = agent.target.params.clone();
        agent.observe(tr, &mut r).unwrap();
        ensure!(agent.step_counter == step, "step counter {} at step {step}", agent.step_counter);
        if agent.target.params == agent.main.params {
            synced_at.push(step);
        } else {
            ensure!(agent.target.params == target_before, "target changed without sync at {step}");
        }
    }
    ensure!(synced_at == vec![10, 20, 30], "target synced at {synced_at:?}");

    let mut r = rng(3);
    for trial in 0..1000 {
        let len = r.random_range(1..25);
        // Coarse values make ties common.
        let q: Vec<f64> = (0..len).map(|_| (r.random_range(-4.0..4.0) * 2.0f64).round() / 2.0).collect();
        let u = r.random_range(1..=len);
        let got = select_top_u(&q, u, 0.0, &mut r).unwrap();
        ensure!(got == brute_force_top(&q, u), "trial {trial}: {got:?} for {q:?}");
    }
    Ok(format!(
        "max gradient rel err {worst:.1e}; terminal and gamma=0 exact; sync at {synced_at:?}; 1000 top-U trials"
    ))
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

fn pca_suite() -> Outcome {
    let mut worst: f64 = 1.0;
    let mut largest = (0, 0);
    for case in 0..20u64 {
        let mut r = rng(900 + case);
        let m = if case == 19 { 50 } else { r.random_range(5..=50) };
        let d = if case == 19 { 200 } else { r.random_range(5..=200) };
        let k = 5.min(m - 1).min(d);
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let p = fit_pca(&rows, k, &mut r).map_err(|e| e.to_string())?;

        let x = DMatrix::from_fn(m, d, |i, j| rows[i][j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (m as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for c in 0..k {
            let v = eig.eigenvectors.column(order[c]);
            let cos: f64 = p.components[c].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            ensure!(
                cos.abs() > 0.999,
                "case {case} ({m}x{d}) component {c}: |cos| = {:.6}",
                cos.abs()
            );
            worst = worst.min(cos.abs());
        }
        largest = largest.max((m, d));
    }
    Ok(format!("20 matrices up to {}x{}, min |cos| {worst:.6}", largest.0, largest.1))
}

// ---------------------------------------------------------------------------
// Partitions
// ---------------------------------------------------------------------------

fn exact_cover(plan: &PartitionPlan, expected: &BTreeSet<usize>) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for (k, idx) in plan.assignments.iter().enumerate() {
        for &i in idx {
            ensure!(seen.insert(i), "index {i} repeated (client {k})");
        }
    }
    ensure!(&seen == expected, "plan covers {} of {} expected indices", seen.len(), expected.len());
    Ok(())
}

fn partition_suite() -> Outcome {
    let ds: LabeledDataset = synth_blobs(10, 4, 100, 0.5, &mut rng(1)).unwrap();
    let all: BTreeSet<usize> = (0..ds.len()).collect();

    let shards = partition(&ds, 50, &PartitionScheme::Shards { shards_per_client: 2 }, 5).unwrap();
    exact_cover(&shards, &all)?;
    let sizes = shards.client_sizes();
    ensure!(sizes.iter().all(|&s| s == sizes[0]), "shard sizes differ: {sizes:?}");
    let max_labels = shards.assignments.iter().map(|a| distinct_labels(&ds, a).len()).max().unwrap();
    ensure!(max_labels <= 2, "a shard client holds {max_labels} labels");

    let noniid = partition(
        &ds,
        50,
        &PartitionScheme::NoniidLabel {
            labels_per_client: 2,
            size_jitter: 0.5,
        },
        5,
    )
    .unwrap();
    let used: BTreeSet<usize> = noniid.assignments.iter().flatten().copied().collect();
    exact_cover(&noniid, &used)?;
    ensure!(used.is_subset(&all), "noniid plan indexes outside the dataset");
    ensure!(
        noniid.assignments.iter().all(|a| distinct_labels(&ds, a).len() == 2),
        "noniid client without exactly two labels"
    );
    let ns = noniid.client_sizes();
    let (lo, hi) = (ns.iter().min().unwrap(), ns.iter().max().unwrap());
    ensure!(hi > lo, "noniid sizes do not vary");

    let big = synth_blobs(10, 2, 1000, 0.5, &mut rng(2)).unwrap();
    let big_all: BTreeSet<usize> = (0..big.len()).collect();
    let clients = 10;
    let dir = partition(
        &big,
        clients,
        &PartitionScheme::HeteroDirichlet {
            alpha: 1e6,
            min_size: 10,
        },
        5,
    )
    .unwrap();
    exact_cover(&dir, &big_all)?;
    let hist = dir.label_histograms(&big);
    let mut worst: f64 = 0.0;
    for label in 0..10 {
        let total: usize = hist.iter().map(|h| h[label]).sum();
        for h in &hist {
            worst = worst.max((h[label] as f64 / total as f64 - 1.0 / clients as f64).abs());
        }
    }
    ensure!(worst <= 0.05, "Dirichlet share deviates by {worst:.4}");
    Ok(format!(
        "shards <= {max_labels} labels, equal sizes; noniid 2 labels, sizes {lo}..{hi}; Dirichlet max deviation {worst:.4}"
    ))
}

// ---------------------------------------------------------------------------
// End-to-end runs
// ---------------------------------------------------------------------------

const E2E_SEEDS: u64 = 5;
const E2E_ROUNDS: usize = 200;

fn mean_curve(runs: &[RunResult]) -> Vec<f64> {
    let rounds = runs[0].records.len();
    (0..rounds)
        .map(|t| runs.iter().map(|r| r.records[t].global_accuracy).sum::<f64>() / runs.len() as f64)
        .collect()
}

fn curve_records(curve: &[f64]) -> Vec<fedsel::sim::RoundRecord> {
    curve
        .iter()
        .enumerate()
        .map(|(i, &a)| fedsel::sim::RoundRecord {
            round: i + 1,
            selected: vec![],
            global_accuracy: a,
            global_macro_f1: 0.0,
            round_latency: 0.0,
            cumulative_latency: 0.0,
            mean_reward: 0.0,
            agent_loss: None,
            epsilon: None,
        })
        .collect()
}

fn directional_suite() -> Outcome {
    let run_all = |policy: PolicyKind| -> Result<Vec<RunResult>, String> {
        (0..E2E_SEEDS)
            .into_par_iter()
            .map(|s| run_simulation(common::heterogeneous_blobs(policy, s, E2E_ROUNDS)).map_err(|e| e.to_string()))
            .collect()
    };
    let random = run_all(PolicyKind::Random)?;
    let agent = run_all(PolicyKind::FlashRl)?;
    let mean_latency = |runs: &[RunResult]| {
        common::mean(&runs.iter().map(|r| r.records.last().unwrap().cumulative_latency).collect::<Vec<_>>())
    };
    let (lat_r, lat_a) = (mean_latency(&random), mean_latency(&agent));
    let reduction = 1.0 - lat_a / lat_r;

    let (curve_r, curve_a) = (mean_curve(&random), mean_curve(&agent));
    let final_r = *curve_r.last().unwrap();
    let final_a = *curve_a.last().unwrap();
    let target = final_r - 0.02;
    let rtt = |c: &[f64]| rounds_to_target(&curve_records(c), PerformanceMetric::Accuracy, target);
    let (rtt_r, rtt_a) = (rtt(&curve_r), rtt(&curve_a));

    let a_ok = reduction >= 0.10;
    let b_ok = match (rtt_a, rtt_r) {
        (Some(a), Some(r)) => a <= r,
        (Some(_), None) => true,
        _ => false,
    };
    let c_ok = final_a >= final_r - 0.02;
    let detail = format!(
        "latency -{:.1}% [{}]; rounds to {:.5}: agent {:?} vs random {:?} [{}]; final acc agent {:.5} vs random {:.5} [{}]",
        100.0 * reduction,
        if a_ok { "ok" } else { "fail" },
        target,
        rtt_a,
        rtt_r,
        if b_ok { "ok" } else { "fail" },
        final_a,
        final_r,
        if c_ok { "ok" } else { "fail" },
    );
    if a_ok && b_ok && c_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism_suite() -> Outcome {
    let mut bytes = 0;
    for policy in [PolicyKind::FlashRl, PolicyKind::Random, PolicyKind::FullParticipation] {
        let mut cfg = common::heterogeneous_blobs(policy, 42, 25);
        if policy == PolicyKind::FullParticipation {
            cfg.total_rounds = 5;
        }
        let csv = |cfg| -> Result<Vec<u8>, String> {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let loaded = fedsel::config::LoadedConfig { config: cfg, defaulted: vec![] };
            run_to_dir(loaded, dir.path()).map_err(|e| e.to_string())?;
            std::fs::read(dir.path().join(METRICS_FILE)).map_err(|e| e.to_string())
        };
        let (a, b) = (csv(cfg.clone())?, csv(cfg)?);
        ensure!(a == b, "{} metrics differ between identical runs", policy.name());
        bytes += a.len();
    }
    Ok(format!("3 policies, {bytes} CSV bytes identical across repeat runs"))
}

fn utility_branch_suite() -> Outcome {
    let run = run_simulation(common::heterogeneous_blobs(PolicyKind::FlashRl, 8, 100)).map_err(|e| e.to_string())?;
    let mut prev = run.initial_metrics.accuracy;
    let mut improving = 0;
    for (rec, clients) in run.records.iter().zip(&run.client_outcomes) {
        if rec.global_accuracy > prev {
            improving += 1;
            let lo = clients.iter().min_by(|a, b| a.divergence.total_cmp(&b.divergence)).unwrap();
            let hi = clients.iter().max_by(|a, b| a.divergence.total_cmp(&b.divergence)).unwrap();
            ensure!(
                lo.utility > hi.utility,
                "round {}: utility {} (d={}) vs {} (d={})",
                rec.round,
                lo.utility,
                lo.divergence,
                hi.utility,
                hi.divergence
            );
        }
        prev = rec.global_accuracy;
    }
    ensure!(improving > 0, "no improving rounds in 100");
    Ok(format!("{improving} improving rounds of 100 checked"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 8] = [
        ("formula suite", Duration::from_secs(1), formula_suite),
        ("latency suite", Duration::from_secs(1), latency_suite),
        ("ddql suite", Duration::from_secs(10), ddql_suite),
        ("pca suite", Duration::from_secs(10), pca_suite),
        ("partition suite", Duration::from_secs(5), partition_suite),
        ("directional end-to-end", Duration::from_secs(600), directional_suite),
        ("determinism", Duration::from_secs(120), determinism_suite),
        ("utility branch in live run", Duration::from_secs(600), utility_branch_suite),
    ];
    let mut failed = 0;
    println!();
    for (name, budget, check) in criteria {
        let clock = Instant::now();
        let outcome = check();
        let took = clock.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > budget => Err(format!("{detail}; took {took:.2?} > {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} ({took:.2?})");
            }
        }
    }
    println!("\nacceptance: {} passed, {failed} failed\n", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
