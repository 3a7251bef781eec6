use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = r#"{"num_nodes":120,"m":6,"n":2,"d_in":6,"vocab_txt":24,"topic_size":4,
    "p_in":0.15,"p_out":0.02,"pi":[0.35,0.35,0.3],"seed":3}"#;

const CONFIG: &str = r#"{"seed":5,
    "stage1":{"epochs":1,"tower":{"layers":1,"heads":2,"d":8}},
    "lm":{"d_lm":16,"layers":1,"heads":2,"context":64},
    "prompt":{"limit":64},"router":{"hidden":[16,8,4]},"stage2":{"epochs":1}}"#;

fn mario(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mario"))
        .current_dir(dir)
        .env_remove("MARIO_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    json(&mario(
        dir.path(),
        &["gen", "--spec", "spec.json", "--out", "g"],
    ));
    dir
}

#[test]
fn gen_stage1_stage2_eval_transfer_and_reports() {
    let dir = setup();
    let d = dir.path();
    let meta = json(&mario(d, &["gen", "--spec", "spec.json", "--out", "g"]));
    assert_eq!(meta["num_nodes"], 120);

    let s1 = json(&mario(
        d,
        &[
            "stage1", "--graph", "g", "--config", "cfg.json", "--out", "s1",
        ],
    ));
    assert_eq!(s1["epoch_losses"].as_array().unwrap().len(), 1);
    let trace = json(&mario(
        d,
        &[
            "stage2", "--graph", "g", "--config", "cfg.json", "--stage1", "s1", "--out", "s2",
        ],
    ));
    assert_eq!(trace["epoch_losses"].as_array().unwrap().len(), 1);

    let rep = json(&mario(
        d,
        &[
            "eval", "--graph", "g", "--stage1", "s1", "--models", "s2", "--report", "r.jsonl",
        ],
    ));
    assert_eq!(rep["mode"], "mario");
    let total = rep["total"].as_u64().unwrap();
    assert_eq!(rep["lm_calls"].as_u64().unwrap(), total);
    let line = std::fs::read_to_string(d.join("r.jsonl")).unwrap();
    let stored: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(stored["accuracy"], rep["accuracy"]);

    let fixed = json(&mario(
        d,
        &[
            "eval",
            "--graph",
            "g",
            "--stage1",
            "s1",
            "--models",
            "s2",
            "--mode",
            "fixed-vis",
            "--task",
            "nc",
        ],
    ));
    assert_eq!(fixed["routing_histogram"][1].as_u64().unwrap(), total);

    let tr = json(&mario(
        d,
        &[
            "transfer", "--stage1", "s1", "--source", "s2", "--target", "g",
        ],
    ));
    assert_eq!(tr["accuracy"], rep["accuracy"]);

    let venn = json(&mario(
        d,
        &[
            "report", "venn", "--graph", "g", "--stage1", "s1", "--models", "s2",
        ],
    ));
    assert_eq!(venn["regions"].as_array().unwrap().len(), 7);
    let align = json(&mario(
        d,
        &[
            "report", "align", "--graph", "g", "--stage1", "s1", "--pairs", "50",
        ],
    ));
    assert_eq!(align["pairs"], 50);
    let routes = json(&mario(
        d,
        &[
            "report",
            "routes",
            "--graph",
            "g",
            "--stage1",
            "s1",
            "--models",
            "s2",
            "--out",
            "routes.jsonl",
        ],
    ));
    assert_eq!(routes["routed"].as_u64().unwrap(), total);
    let lines = std::fs::read_to_string(d.join("routes.jsonl")).unwrap();
    assert_eq!(lines.lines().count() as u64, total);
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"stage2":{"batch_size":0}}"#).unwrap();
    let out = mario(
        d,
        &[
            "stage1", "--graph", "g", "--config", "bad.json", "--out", "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch size"));

    let out = mario(
        d,
        &[
            "stage2", "--graph", "g", "--stage1", "missing", "--out", "x",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no stage 1 checkpoint"));

    let out = mario(
        d,
        &[
            "eval", "--graph", "g", "--stage1", "s1", "--models", "s2", "--mode", "bogus",
        ],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = mario(d, &["stage1", "--graph", "nowhere", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_3() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(
        d.join("hot.json"),
        r#"{"seed":5,"stage1":{"epochs":1,"lr":1e300,"tower":{"layers":1,"heads":2,"d":8}}}"#,
    )
    .unwrap();
    let out = mario(
        d,
        &[
            "stage1", "--graph", "g", "--config", "hot.json", "--out", "x",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn seed_variable_overrides_the_configured_seed() {
    let dir = setup();
    let d = dir.path();
    let run = |seed: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mario"));
        cmd.current_dir(d).env_remove("MARIO_SEED");
        if let Some(s) = seed {
            cmd.env("MARIO_SEED", s);
        }
        cmd.args(["gen", "--spec", "spec.json", "--out", out])
            .output()
            .unwrap()
    };
    json(&run(Some("3"), "same"));
    json(&run(Some("4"), "other"));
    let read = |name: &str| std::fs::read(d.join(name).join("nodes.jsonl")).unwrap();
    assert_eq!(read("g"), read("same"));
    assert_ne!(read("g"), read("other"));
    assert_eq!(run(Some("x"), "bad").status.code(), Some(2));

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mario"));
    let out = cmd
        .current_dir(d)
        .env("MARIO_SEED", "-1")
        .args([
            "stage1", "--graph", "g", "--config", "cfg.json", "--out", "x",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
