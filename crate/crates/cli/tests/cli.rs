use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use imr::cost_model::ClusterProfile;
use imr::ml_bgd::ModelVector;

fn imr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imr"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn profile(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../profiles")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(code(&imr(&[])), 1);
    assert_eq!(code(&imr(&["plan", "--objective", "time"])), 1);
    assert_eq!(
        code(&imr(&["plan", "--profile", "x", "--objective", "speed"])),
        1
    );
    assert_eq!(
        code(&imr(&[
            "sweep",
            "--profile",
            "x",
            "--n",
            "5-2",
            "--f",
            "2",
            "--out",
            "o"
        ])),
        1
    );
    assert_eq!(code(&imr(&["--help"])), 0);

    let out = imr(&[
        "plan",
        "--profile",
        "/nonexistent/p.profile",
        "--objective",
        "time",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/p.profile"));

    // an unbounded profile cannot be scanned exhaustively
    assert_eq!(
        code(&imr(&[
            "validate",
            "--profile",
            &profile("rack120-full.profile"),
            "--trials",
            "1",
            "--seed",
            "1"
        ])),
        2
    );
}

#[test]
fn plan_prints_report_and_csv() {
    let out = imr(&[
        "plan",
        "--profile",
        &profile("rack120-fifth.profile"),
        "--objective",
        "cost",
        "--in-loop",
    ]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("machines (N):     24"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[lines.len() - 2],
        "objective,N,f,regime,T,C,continuous_N"
    );
    assert!(lines[lines.len() - 1].starts_with("cost,24,"));
    assert!(lines[lines.len() - 1].contains(",spilling,"));
}

#[test]
fn ingest_then_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("train.txt");
    let mut body = String::new();
    for i in 0..200 {
        let x = (i % 17) as f64 / 17.0;
        let y = 2.0 * x - 0.5 * ((i % 5) as f64);
        body.push_str(&format!("{y} | 0:{x} {}:1\n", 1 + i % 5));
        if i % 50 == 0 {
            body.push('\n');
        }
    }
    fs::write(&text, body).unwrap();
    let cache = dir.path().join("train.imr");
    let out = imr(&["ingest", s(&text), s(&cache)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "200 records");

    let run = |tag: &str| {
        let model = dir.path().join(format!("model-{tag}.bin"));
        let stats = dir.path().join(format!("stats-{tag}.csv"));
        let out = imr(&[
            "run",
            "--cache",
            s(&cache),
            "--n",
            "3",
            "--fanin",
            "2",
            "--loss",
            "squared",
            "--eta",
            "0.002",
            "--max-iter",
            "4",
            "--model-out",
            s(&model),
            "--stats-out",
            s(&stats),
            "--cache-records",
            "50",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        (fs::read(model).unwrap(), fs::read_to_string(stats).unwrap())
    };
    let (model_a, stats_a) = run("a");
    let (model_b, stats_b) = run("b");
    assert_eq!(model_a, model_b);
    let (w, it) = ModelVector::from_store_bytes(&model_a).unwrap();
    assert_eq!((w.len(), it), (6, 4));

    let header: Vec<&str> = stats_a.lines().next().unwrap().split(',').collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !header[i].ends_with("_wall"))
        .collect();
    let strip = |csv: &str| -> Vec<Vec<String>> {
        csv.lines()
            .map(|l| {
                let cells: Vec<&str> = l.split(',').collect();
                keep.iter().map(|&i| cells[i].to_string()).collect()
            })
            .collect()
    };
    assert_eq!(strip(&stats_a), strip(&stats_b));
    assert_eq!(stats_a.lines().count(), 5);
    // 200 records over 3 partitions with 50 cached each: 50 come from disk
    assert_eq!(strip(&stats_a)[1], vec!["0", "0", "3", "2", "150", "50"]);
}

#[test]
fn malformed_text_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("bad.txt");
    fs::write(&text, "1 | 0:1\n1 | 7:1 3:2\n").unwrap();
    let out = imr(&["ingest", s(&text), s(&dir.path().join("o.imr"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let junk = dir.path().join("junk.imr");
    fs::write(&junk, b"NOPE\0\0\0\0").unwrap();
    let out = imr(&[
        "run",
        "--cache",
        s(&junk),
        "--n",
        "1",
        "--fanin",
        "2",
        "--loss",
        "squared",
        "--eta",
        "0.1",
        "--max-iter",
        "1",
        "--model-out",
        s(&dir.path().join("m")),
        "--stats-out",
        s(&dir.path().join("st")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_on_empty_cache_returns_the_initializer() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let cache = dir.path().join("empty.imr");
    assert_eq!(code(&imr(&["ingest", s(&empty), s(&cache)])), 0);
    assert_eq!(fs::metadata(&cache).unwrap().len(), 8);
    let model = dir.path().join("m.bin");
    let stats = dir.path().join("s.csv");
    let out = imr(&[
        "run",
        "--cache",
        s(&cache),
        "--n",
        "2",
        "--fanin",
        "2",
        "--loss",
        "logistic",
        "--eta",
        "0.1",
        "--max-iter",
        "1",
        "--model-out",
        s(&model),
        "--stats-out",
        s(&stats),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (w, it) = ModelVector::from_store_bytes(&fs::read(&model).unwrap()).unwrap();
    assert_eq!(w, vec![0.0]);
    assert_eq!(it, 0);
    assert_eq!(fs::read_to_string(&stats).unwrap().lines().count(), 1);
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = imr(&[
        "sweep",
        "--profile",
        &profile("rack120-fifth.profile"),
        "--n",
        "15,24,30,60,90,120",
        "--f",
        "4",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("min time: N=120 f=4"));
    assert!(stdout.contains("min cost: N=24 f=4"));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "N,f,regime,T_model,C_model");
    assert_eq!(text.lines().count(), 7);

    let grid = imr(&[
        "sweep",
        "--profile",
        &profile("rack120-fifth.profile"),
        "--n",
        "1-3,8",
        "--f",
        "2-4",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&grid), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 4 * 3);
}

#[test]
fn validate_passes_on_seeded_profiles() {
    let out = imr(&[
        "validate",
        "--profile",
        &profile("rack120-fifth.profile"),
        "--trials",
        "30",
        "--seed",
        "9",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .contains("checked 62 optimizations"));
}

#[test]
fn calibrate_emits_a_loadable_profile() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("host.profile");
    let out = imr(&[
        "calibrate",
        "--budget",
        "1000000",
        "--dim",
        "64",
        "--out",
        s(&out_path),
        "--sample",
        "2000",
        "--records",
        "5000000",
        "--n-max",
        "32",
        "--trials",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let p = ClusterProfile::from_file(&out_path).unwrap();
    assert_eq!((p.records, p.max_machines), (5_000_000, 32));
    assert!(p.map_secs > 0.0 && p.load_secs > 0.0 && p.agg_secs > 0.0 && p.cache_records > 0);

    let plan = imr(&["plan", "--profile", s(&out_path), "--objective", "time"]);
    assert_eq!(code(&plan), 0);

    let tiny = imr(&[
        "calibrate",
        "--budget",
        "1",
        "--dim",
        "8",
        "--out",
        s(&out_path),
        "--sample",
        "100",
    ]);
    assert_eq!(code(&tiny), 2);
}
