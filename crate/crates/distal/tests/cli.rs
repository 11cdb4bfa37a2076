use std::path::Path;
use std::process::{Command, Output};

use distal::store::PairLine;
use serde_json::Value;

fn distal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distal"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(
        code(&o),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write_pool(dir: &Path, n: usize) {
    let mut text = String::new();
    for i in 0..n {
        let g = ["g00", "g00", "g00", "g01", "g01", "g02", "g03", "g04"][i % 8];
        text.push_str(&format!(
            "{{\"id\": \"p{i:04}\", \"text\": \"[[group:{g}]] claim number {i}\", \"subgroup\": \"{g}\"}}\n"
        ));
    }
    std::fs::write(dir.join("pool.jsonl"), text).unwrap();
}

const CONFIG: &str = r#"
seed = 3
logical_clock = true

[loop]
test_size = 40
bootstrap = 30
clusters = 5

[verification]
auto_approve = true

[providers]
mock = true
"#;

#[test]
fn step_by_step_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pool(d, 400);
    std::fs::write(d.join("distal.toml"), CONFIG).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "distal.toml"];
        all.extend_from_slice(args);
        distal(d, &all)
    };

    assert!(ok(run(&["ingest", "pool.jsonl"])).contains("ingested 400"));
    // iterate before bootstrap is a state error
    assert_eq!(code(&run(&["iterate"])), 4);
    assert!(ok(run(&["bootstrap"])).contains("30 training pairs"));
    assert!(ok(run(&["cluster"])).contains("fitted 5 clusters"));
    assert!(ok(run(&["iterate"])).contains("1 iterations done, budget 80/100"));
    // the strategy is fixed once iterations started
    assert_eq!(code(&run(&["--strategy", "topn", "iterate"])), 4);
    // so is the seed
    assert_eq!(code(&run(&["--seed", "4", "run"])), 4);
    assert!(ok(run(&["run"]))
        .contains("phase done: 5 iterations done, budget 0/100, 130 training pairs"));

    let metrics: Value =
        serde_json::from_str(&ok(run(&["evaluate", "--csv", "groups.csv"]))).unwrap();
    assert_eq!(metrics["n"], 40);
    let csv = std::fs::read_to_string(d.join("groups.csv")).unwrap();
    assert!(csv.starts_with("group,errors,total,ratio\n"));
    assert_eq!(csv.lines().count(), 6);

    ok(run(&[
        "export-splits",
        "--provenance",
        "bootstrap,cluster",
        "--output",
        "train.jsonl",
    ]));
    let lines: Vec<PairLine> = std::fs::read_to_string(d.join("train.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 130);
    assert!(lines.windows(2).all(|w| w[0].id < w[1].id));

    let state: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("distal-state/state.json")).unwrap())
            .unwrap();
    assert_eq!(state["phase"]["phase"], "done");
}

#[test]
fn splits_from_a_fresh_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pool(d, 500);
    std::fs::write(d.join("distal.toml"), CONFIG).unwrap();
    ok(distal(
        d,
        &["--config", "distal.toml", "ingest", "pool.jsonl"],
    ));
    let out = ok(distal(
        d,
        &[
            "--config",
            "distal.toml",
            "export-splits",
            "--out",
            "splits",
        ],
    ));
    assert!(out.contains("total: 430 pairs"), "{out}");
    for (name, n) in [
        ("standard", 130),
        ("topn_al", 130),
        ("cluster_al", 130),
        ("test", 40),
    ] {
        let text = std::fs::read_to_string(d.join(format!("splits/{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n, "{name}");
    }
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(&distal(d, &["--config", "bad.toml", "run"])), 2);
    assert_eq!(code(&distal(d, &["--config", "missing.toml", "run"])), 2);
    // real providers need endpoint URLs
    assert_eq!(code(&distal(d, &["run"])), 2);
    std::fs::write(
        d.join("zero.toml"),
        "[loop]\nbatch_size = 0\n[providers]\nmock = true\n",
    )
    .unwrap();
    assert_eq!(code(&distal(d, &["--config", "zero.toml", "run"])), 2);
    assert_eq!(
        code(&distal(
            d,
            &["--mock-providers", "--strategy", "bogus", "run"]
        )),
        2
    );
}

#[test]
fn unreachable_providers_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pool(d, 200);
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut cfg = String::from("[loop]\ntest_size = 20\nbootstrap = 20\n[verification]\nauto_approve = true\n[providers]\ntimeout_ms = 2000\n[providers.retry]\nattempts = 1\nbase_delay_ms = 0\n");
    for e in ["embed", "generate", "finetune", "score", "chat"] {
        cfg.push_str(&format!(
            "[providers.{e}]\nurl = \"http://127.0.0.1:{port}/{e}\"\n"
        ));
    }
    std::fs::write(d.join("real.toml"), cfg).unwrap();
    ok(distal(
        d,
        &["--config", "real.toml", "ingest", "pool.jsonl"],
    ));
    let o = distal(d, &["--config", "real.toml", "run"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    // nothing was lost: the snapshot is still loadable
    let o = distal(d, &["--config", "real.toml", "--mock-providers", "run"]);
    ok(o);
}

#[test]
fn state_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir_all(d.join("distal-state")).unwrap();
    std::fs::write(d.join("distal-state/state.json"), "{ not json").unwrap();
    assert_eq!(code(&distal(d, &["--mock-providers", "run"])), 4);
    std::fs::remove_file(d.join("distal-state/state.json")).unwrap();
    // an empty pool cannot be bootstrapped
    assert_eq!(code(&distal(d, &["--mock-providers", "run"])), 4);
    std::fs::write(
        d.join("dup.jsonl"),
        "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n",
    )
    .unwrap();
    let o = distal(d, &["--mock-providers", "ingest", "dup.jsonl"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("sim.toml"),
        "total = 600\nbootstrap = 40\ntest_per_group = 20\n",
    )
    .unwrap();
    let sim = |out: &str, jobs: &str| {
        ok(distal(
            d,
            &[
                "simulate", "--spec", "sim.toml", "--seeds", "2", "--out", out, "--jobs", jobs,
            ],
        ))
    };
    let printed = sim("a", "1");
    assert!(printed.contains("cluster") && printed.contains("random") && printed.contains("topn"));
    sim("b", "3");
    let a = std::fs::read(d.join("a/report.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/report.json")).unwrap());
    assert_eq!(
        std::fs::read(d.join("a/per_seed.csv")).unwrap(),
        std::fs::read(d.join("b/per_seed.csv")).unwrap()
    );
    assert!(d.join("a/runs/cluster-1.json").exists());
    std::fs::write(d.join("bad.toml"), "total = 0\n").unwrap();
    assert_eq!(
        code(&distal(
            d,
            &["simulate", "--spec", "bad.toml", "--seeds", "1", "--out", "c"]
        )),
        2
    );
}

#[test]
fn replay_reruns_a_recorded_session_offline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pool(d, 300);
    let cfg = format!("{CONFIG}record = \"calls.jsonl\"\n");
    std::fs::write(d.join("rec.toml"), cfg).unwrap();
    std::fs::write(d.join("distal.toml"), CONFIG).unwrap();
    ok(distal(d, &["--config", "rec.toml", "ingest", "pool.jsonl"]));
    ok(distal(d, &["--config", "rec.toml", "run"]));
    ok(distal(
        d,
        &[
            "--config",
            "rec.toml",
            "export-splits",
            "--provenance",
            "bootstrap,cluster",
            "--output",
            "live.jsonl",
        ],
    ));

    let out = ok(distal(
        d,
        &[
            "--config",
            "distal.toml",
            "replay",
            "--log",
            "calls.jsonl",
            "--pool",
            "pool.jsonl",
            "--output",
            "replayed.jsonl",
        ],
    ));
    assert!(out.contains("130 pairs"), "{out}");
    assert_eq!(
        std::fs::read_to_string(d.join("live.jsonl")).unwrap(),
        std::fs::read_to_string(d.join("replayed.jsonl")).unwrap()
    );
    // a log missing the calls fails with a provider error
    std::fs::write(d.join("empty.jsonl"), "").unwrap();
    let o = distal(
        d,
        &[
            "--config",
            "distal.toml",
            "replay",
            "--log",
            "empty.jsonl",
            "--pool",
            "pool.jsonl",
        ],
    );
    assert_eq!(code(&o), 3);
}
