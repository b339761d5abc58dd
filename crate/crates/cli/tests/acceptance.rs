//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <n> PASS|FAIL` line before asserting.
//!
//! Run with `cargo test -p imr-cli --test acceptance -- --nocapture`.

use std::convert::Infallible;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use imr::aggtree::{build_shape, sequential_fold, tree_fold, LeafOrder, ScalarSum, VecSum};
use imr::cost_model::{iteration_time, ClusterProfile, PlanPoint};
use imr::engine::{
    load_and_partition, run_iteration, run_loop, ExecPlan, LoopOptions, LoopProgram, MapReduce,
    Sequential, Step,
};
use imr::ingest::{decode, encode, parse_line, ParseErrorKind};
use imr::ml_bgd::{
    bgd_program, record_gradient, synthetic_dataset, LossKind, ModelVector, SparseExample, Stop,
};
use imr::optimizer::{
    continuous_time_optima, optimal_fanin_discrete, optimal_fanin_time, random_profile,
    spill_beneficial, validate_trials,
};
use imr::simulator::sweep;

type KindCheck = fn(&ParseErrorKind) -> bool;

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    println!(
        "ACCEPTANCE {n} {}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    assert!(pass, "criterion {n} failed: {}", detail.as_ref());
}

fn profile_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../profiles")
        .join(name)
}

fn ok(records: &[SparseExample]) -> Vec<Result<SparseExample, Infallible>> {
    records.iter().cloned().map(Ok).collect()
}

/// Runs `imr plan` and returns the machine count from its CSV row.
fn planned_machines(profile: &str, objective: &str) -> (u64, Duration) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_imr"))
        .args(["plan", "--profile"])
        .arg(profile_path(profile))
        .args(["--objective", objective])
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    let row = stdout.lines().last().unwrap();
    (row.split(',').nth(1).unwrap().parse().unwrap(), elapsed)
}

#[test]
fn criterion_1_fifth_rack_plans() {
    let (cost_n, t_cost) = planned_machines("rack120-fifth.profile", "cost");
    let (time_n, t_time) = planned_machines("rack120-fifth.profile", "time");
    let slowest = t_cost.max(t_time);
    report(
        1,
        cost_n == 24 && time_n == 120 && slowest < Duration::from_secs(1),
        format!(
            "min cost N={cost_n} (want 24), min time N={time_n} (want 120), slowest {slowest:?}"
        ),
    );
}

#[test]
fn criterion_2_unbounded_time_optimum() {
    let start = Instant::now();
    let profile = ClusterProfile::from_file(profile_path("rack120-full.profile")).unwrap();
    let (cached, _) = continuous_time_optima(&profile);
    let closed =
        profile.records as f64 * profile.map_secs / (profile.agg_secs * std::f64::consts::E);
    let elapsed = start.elapsed();
    let n = cached.machines;
    let within = (n - 1500.0).abs() <= 0.1 * 1500.0;
    report(
        2,
        within
            && (n - closed).abs() < 1e-9 * closed
            && (n - 1583.0).abs() < 1.0
            && elapsed < Duration::from_secs(1),
        format!(
            "N = {n:.2} vs reported ~1500 ({:+.1}%), {elapsed:?}",
            (n / 1500.0 - 1.0) * 100.0
        ),
    );
}

#[test]
fn criterion_3_fanin_constancy() {
    // root of d/df [A f ln N / ln f] = A ln N (ln f - 1) / ln^2 f, by bisection
    let grid = |lo: f64, hi: f64| (0..6).map(move |i| lo * (hi / lo).powf(i as f64 / 5.0));
    let mut worst: f64 = 0.0;
    for n in grid(2.0, 1e6) {
        for a in grid(1e-3, 10.0) {
            let slope = |f: f64| a * n.ln() * (f.ln() - 1.0) / f.ln().powi(2);
            let (mut lo, mut hi) = (1.5, 10.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            worst = worst.max((0.5 * (lo + hi) - std::f64::consts::E).abs());
        }
    }
    let continuous_ok = worst <= 1e-9 && optimal_fanin_time() == std::f64::consts::E;

    // discrete: brute-force f over the model, and the simulator's f-sweep
    let leaves = [2u64, 4, 8, 16, 32];
    let mut found = Vec::new();
    for a in grid(1e-3, 10.0) {
        let profile = ClusterProfile::new(1_000_000, 64, 1_000_000, 1e-6, 0.0, a).unwrap();
        for &n in &leaves {
            let brute = (2..=64u64)
                .min_by(|&f, &g| {
                    let t = |f| {
                        iteration_time(&profile, PlanPoint::discrete(n, f))
                            .unwrap()
                            .time
                    };
                    t(f).total_cmp(&t(g))
                })
                .unwrap();
            found.push(brute);
            found.push(optimal_fanin_discrete(n, a).unwrap());
        }
        let sim = sweep(&profile, &leaves, &(2..=8).collect::<Vec<_>>()).unwrap();
        found.extend(sim.best_fanin_per_machines().into_iter().map(|(_, f)| f));
    }
    let discrete_ok = found.iter().all(|&f| f == found[0]);
    report(
        3,
        continuous_ok && discrete_ok,
        format!(
            "continuous argmin max |f - e| = {worst:.1e}; discrete optimum {} across {} (N, A, method) cases",
            found[0],
            found.len()
        ),
    );
}

#[test]
fn criterion_4_oracle_equivalence() {
    let start = Instant::now();
    let summary = validate_trials(None, 100, 2024, 10_000).unwrap();
    let elapsed = start.elapsed();
    report(
        4,
        summary.divergences.is_empty()
            && summary.checked == 200
            && elapsed < Duration::from_secs(30),
        format!(
            "{} optimizations, {} divergences, {elapsed:?}",
            summary.checked,
            summary.divergences.len()
        ),
    );
}

#[test]
fn criterion_5_spill_rule_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut mismatches = Vec::new();
    let mut beneficial = 0;
    let trials = 10_000;
    for _ in 0..trials {
        let profile = random_profile(&mut rng, 10_000).unbounded();
        let (cached, spilling) = continuous_time_optima(&profile);
        let spill_wins = spilling.is_some_and(|s| s.time < cached.time);
        let predicted = spill_beneficial(&profile);
        beneficial += predicted as usize;
        if predicted != spill_wins {
            mismatches.push(profile);
        }
    }
    report(
        5,
        mismatches.is_empty() && beneficial > 0 && beneficial < trials,
        format!(
            "{trials} profiles, {beneficial} favour spilling, {} mismatches",
            mismatches.len()
        ),
    );
}

fn largest_eigenvalue(data: &[SparseExample], dim: usize) -> f64 {
    let mut v = vec![1.0; dim];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; dim];
        for r in data {
            let dot: f64 = r.features().iter().map(|&(i, x)| v[i as usize] * x).sum();
            for &(i, x) in r.features() {
                next[i as usize] += dot * x;
            }
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

#[test]
fn criterion_6_plan_invariance() {
    let start = Instant::now();
    let dim = 40;
    let data = synthetic_dataset(10_000, dim, 8, 6, LossKind::Squared);
    let eta = 0.5 / largest_eigenvalue(&data, dim);
    let program = bgd_program(LossKind::Squared, eta, Stop::MaxIter(20), dim).unwrap();

    // integer statistic: per-feature nonzero counts, accumulated into the model
    let counts: LoopProgram<Vec<i64>, Vec<i64>> = LoopProgram::new(
        move || vec![0; dim],
        vec![
            Step::MapReduce(MapReduce::new(
                "nnz",
                VecSum { dim },
                |_: &Vec<i64>, r: &SparseExample, acc: &mut Vec<i64>| {
                    for &(i, _) in r.features() {
                        acc[i as usize] += 1;
                    }
                    Ok(())
                },
            )),
            Step::Sequential(Sequential::new("add", |m: &Vec<i64>, s: &Vec<i64>| {
                Ok(m.iter().zip(s).map(|(a, b)| 2 * a + b).collect())
            })),
        ],
        |st| st.iteration < 20,
    )
    .unwrap();
    let scalar: LoopProgram<i64, i64> = LoopProgram::new(
        || 0,
        vec![
            Step::MapReduce(MapReduce::new(
                "labels",
                ScalarSum,
                |_: &i64, r: &SparseExample, acc: &mut i64| {
                    *acc += (r.label() * 1e6).round() as i64;
                    Ok(())
                },
            )),
            Step::Sequential(Sequential::new("add", |m: &i64, s: &i64| {
                Ok(m.wrapping_mul(3).wrapping_add(*s))
            })),
        ],
        |st| st.iteration < 20,
    )
    .unwrap();

    let mut reference: Option<(Vec<f64>, Vec<i64>, i64)> = None;
    let mut worst: f64 = 0.0;
    let mut exact = true;
    // a per-partition cache below R / N for small N exercises the spill path
    let cache_records = 3_000;
    for n in [1usize, 2, 4, 8] {
        let set = load_and_partition(ok(&data), n, cache_records).unwrap();
        for f in [2usize, 3, 4] {
            let plan = ExecPlan::new(n, f);
            let w = run_loop(&program, &set, &plan, &LoopOptions::default())
                .unwrap()
                .model
                .w;
            let c = run_loop(&counts, &set, &plan, &LoopOptions::default())
                .unwrap()
                .model;
            let s = run_loop(&scalar, &set, &plan, &LoopOptions::default())
                .unwrap()
                .model;
            match &reference {
                None => reference = Some((w, c, s)),
                Some((w0, c0, s0)) => {
                    for (a, b) in w.iter().zip(w0) {
                        let scale = a.abs().max(b.abs());
                        if scale > 0.0 {
                            worst = worst.max((a - b).abs() / scale);
                        }
                    }
                    exact &= &c == c0 && s == *s0;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        6,
        worst <= 1e-6 && exact && elapsed < Duration::from_secs(120),
        format!("12 plans, worst componentwise relative gap {worst:.2e}, integer programs equal: {exact}, {elapsed:?}"),
    );
}

#[test]
fn criterion_7_aggregation_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 6;
    let comb = VecSum { dim };
    let mut cases = 0;
    let mut failures = 0;
    for n in 1..=64usize {
        for f in 2..=8usize {
            let shape = build_shape(n, f).unwrap();
            for _ in 0..50 {
                let leaves: Vec<Vec<i64>> = (0..n)
                    .map(|_| {
                        (0..dim)
                            .map(|_| rng.gen_range(-1_000_000..1_000_000))
                            .collect()
                    })
                    .collect();
                let expected = sequential_fold(leaves.clone(), &comb);
                let perm = LeafOrder::Shuffled(rng.gen()).permutation(n);
                let shuffled: Vec<Vec<i64>> = perm.iter().map(|&i| leaves[i].clone()).collect();
                let tree = tree_fold(leaves, &shape, &comb).unwrap();
                let permuted = tree_fold(shuffled, &shape, &comb).unwrap();
                cases += 1;
                if tree != expected || permuted != expected {
                    failures += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        7,
        failures == 0 && elapsed < Duration::from_secs(60),
        format!("{cases} leaf sets, {failures} mismatches, {elapsed:?}"),
    );
}

fn fd_failures(loss: LossKind, rng: &mut ChaCha8Rng, cases: usize) -> usize {
    let mut failures = 0;
    for _ in 0..cases {
        let dim = rng.gen_range(1..=20usize);
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut features: Vec<(u32, f64)> = Vec::new();
        for i in 0..dim as u32 {
            if rng.gen_bool(0.6) {
                features.push((i, rng.gen_range(-2.0..2.0)));
            }
        }
        let label = match loss {
            LossKind::Squared => rng.gen_range(-3.0..3.0),
            LossKind::Logistic => [-1.0, 1.0][rng.gen_range(0..2)],
        };
        let ex = SparseExample::new(label, features).unwrap();
        let at = |w: &[f64]| {
            record_gradient(
                &ex,
                &ModelVector {
                    w: w.to_vec(),
                    eta: 1.0,
                },
                loss,
            )
            .unwrap()
        };
        let g = at(&w).grad;
        let h = 1e-5;
        for k in 0..dim {
            let mut plus = w.clone();
            plus[k] += h;
            let mut minus = w.clone();
            minus[k] -= h;
            let fd = (at(&plus).loss - at(&minus).loss) / (2.0 * h);
            // relative, with a floor for components whose gradient is ~0
            let scale = g[k].abs().max(fd.abs()).max(1e-3);
            if (g[k] - fd).abs() > 1e-4 * scale {
                failures += 1;
            }
        }
    }
    failures
}

#[test]
fn criterion_8_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fd_sq = fd_failures(LossKind::Squared, &mut rng, 200);
    let fd_log = fd_failures(LossKind::Logistic, &mut rng, 200);

    // descent on a convex problem with eta below 1 / L
    let dim = 10;
    let data = synthetic_dataset(500, dim, 4, 81, LossKind::Squared);
    let eta = 0.9 / largest_eigenvalue(&data, dim);
    let program = bgd_program(LossKind::Squared, eta, Stop::MaxIter(30), dim).unwrap();
    let set = load_and_partition(ok(&data), 3, 1000).unwrap();
    let plan = ExecPlan::new(3, 2);
    let mut model = program.initial_model();
    let mut losses = Vec::new();
    for it in 0..30 {
        let (next, outs, _) =
            run_iteration(&program, model, &set, &plan, it, None, |_| Ok(())).unwrap();
        losses.push(outs[0].loss);
        model = next;
    }
    let descends = losses.windows(2).all(|w| w[1] <= w[0]);

    // GradNorm on sum 1/2 (w - y)^2 over y in {1, 3}
    let quad = [
        SparseExample::new(1.0, vec![(0, 1.0)]).unwrap(),
        SparseExample::new(3.0, vec![(0, 1.0)]).unwrap(),
    ];
    let program = bgd_program(LossKind::Squared, 0.25, Stop::GradNorm(1e-6), 1).unwrap();
    let set = load_and_partition(ok(&quad), 2, 10).unwrap();
    let w = run_loop(
        &program,
        &set,
        &ExecPlan::new(2, 2),
        &LoopOptions::default(),
    )
    .unwrap()
    .model
    .w[0];
    let minimizer_ok = (w - 2.0).abs() < 1e-5;

    report(
        8,
        fd_sq == 0 && fd_log == 0 && descends && minimizer_ok,
        format!(
            "FD mismatches squared {fd_sq}, logistic {fd_log}; loss non-increasing over 30 steps: {descends}; GradNorm w = {w:.8}"
        ),
    );
}

#[test]
fn criterion_9_cache_spill_accounting() {
    let data = synthetic_dataset(1_003, 8, 3, 9, LossKind::Squared);
    let r = data.len() as u64;
    let program = bgd_program(LossKind::Squared, 1e-4, Stop::MaxIter(5), 8).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (n, m) in [
        (4usize, 300usize),
        (4, 251),
        (4, 250),
        (3, 100),
        (1, 1000),
        (5, 1),
    ] {
        let set = load_and_partition(ok(&data), n, m).unwrap();
        let stats = run_loop(
            &program,
            &set,
            &ExecPlan::new(n, 2),
            &LoopOptions::default(),
        )
        .unwrap()
        .stats;
        let expected = r.saturating_sub((m * n) as u64);
        let ok = stats.len() == 5
            && stats.iter().all(|s| {
                s.records_from_disk == expected && s.records_from_cache + s.records_from_disk == r
            });
        pass &= ok;
        details.push(format!(
            "N={n} M={m}: disk/iter {:?} want {expected}",
            stats
                .iter()
                .map(|s| s.records_from_disk)
                .collect::<Vec<_>>()
        ));
    }
    report(9, pass, details.join("; "));
}

#[test]
fn criterion_10_format_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let records: Vec<SparseExample> = (0..10_000)
        .map(|_| {
            let mut idx: Vec<u32> = (0..rng.gen_range(0..12)).map(|_| rng.gen()).collect();
            idx.sort_unstable();
            idx.dedup();
            let features = idx
                .into_iter()
                .map(|i| (i, rng.gen_range(-1e6..1e6)))
                .collect();
            SparseExample::new(rng.gen_range(-10.0..10.0), features).unwrap()
        })
        .collect();
    let bytes = encode(&records).unwrap();
    let back = decode(&bytes).unwrap();
    let bit_exact = back.len() == records.len()
        && back.iter().zip(&records).all(|(a, b)| {
            a.label().to_bits() == b.label().to_bits()
                && a.features().len() == b.features().len()
                && a.features()
                    .iter()
                    .zip(b.features())
                    .all(|(x, y)| x.0 == y.0 && x.1.to_bits() == y.1.to_bits())
        })
        && encode(&back).unwrap() == bytes;

    let malformed: [(&str, KindCheck); 8] = [
        ("1 3:0.5", |k| matches!(k, ParseErrorKind::MissingSeparator)),
        ("one | 3:0.5", |k| matches!(k, ParseErrorKind::BadLabel(_))),
        ("1 | 3", |k| matches!(k, ParseErrorKind::MissingColon(_))),
        ("1 | -3:0.5", |k| matches!(k, ParseErrorKind::BadIndex(_))),
        ("1 | 3:half", |k| matches!(k, ParseErrorKind::BadValue(_))),
        ("1 | 3:inf", |k| matches!(k, ParseErrorKind::NonFinite(_))),
        ("1 | 7:1 3:2", |k| {
            matches!(k, ParseErrorKind::Unsorted { prev: 7, index: 3 })
        }),
        ("1 | 3:1 3:2", |k| matches!(k, ParseErrorKind::Duplicate(3))),
    ];
    let rejected = malformed
        .iter()
        .filter(|(line, expect)| parse_line(line).is_err_and(|e| expect(&e.kind) && e.column >= 1))
        .count();
    report(
        10,
        bit_exact && rejected == malformed.len(),
        format!(
            "10000 records bit-exact: {bit_exact}; malformed classes rejected {rejected}/{}",
            malformed.len()
        ),
    );
}
