use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tgcnet::config::RunConfig;
use tgcnet::gate::init_adjacency;
use tgcnet::train::Trainer;
use tgcnet_cli::checkpoint;
use tgcnet_cli::records::{read_lines, EvalLine, MetricsLine, TraceLine, VariantSummary};

const SMOKE: &str = r#"
variant = "tgcnet"
seed = 1

[env]
name = "hallway"

[model]
hidden = 8
blocks = 1
gate_dim = 4
keys = 2
state_dim = 8
gcn_dim = 8
mixing_embed = 8
hypernet_hidden = 8

[train]
total_steps = 200
batch_size = 4
buffer_size = 50
target_interval = 10

[eval]
interval = 100
episodes = 4

[output]
checkpoint_interval = 100
"#;

fn tgcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tgcnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, config: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, config);
    let out = dir.join("run");
    let mut args = vec!["train", "--config", s(&cfg), "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    let o = tgcnet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "variant = \"tgcnet\"\n[env]\nname = \"hallway\"\n",
    );
    let o = tgcnet(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`seed`"));

    let cfg = write_config(
        dir.path(),
        &SMOKE.replace("batch_size = 4", "batch_size = 0"),
    );
    let o = tgcnet(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.batch_size"));

    let o = tgcnet(&["train", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = tgcnet(&["train", "--config", s(&cfg), "--variant", "qmix"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_run_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), SMOKE, &[]);
    let lines: Vec<MetricsLine> = read_lines(&out.join("metrics.jsonl")).unwrap();
    assert!(matches!(&lines[0], MetricsLine::Header { variant, .. } if variant.name() == "tgcnet"));
    let metrics = lines
        .iter()
        .filter(|l| matches!(l, MetricsLine::Metric(_)))
        .count();
    assert!(metrics >= 1);
    assert!(matches!(lines.last(), Some(MetricsLine::Summary(_))));
    assert!(out.join("checkpoint_final.json").exists());
    assert!(fs::read_dir(&out).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("checkpoint_000")));
    let echo = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echo.seed, 1);
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(a.path(), SMOKE, &[]);
    let rb = train(b.path(), SMOKE, &[]);
    let strip = |p: &Path| {
        // the header echoes the output directory
        let text = fs::read_to_string(p.join("metrics.jsonl")).unwrap();
        text.replace(s(p), "<out>")
    };
    assert_eq!(strip(&ra), strip(&rb));
    let rc = train(b.path(), SMOKE, &["--seed", "2"]);
    assert_ne!(strip(&ra), strip(&rc));
}

#[test]
fn checkpoint_file_resumes_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::from_toml(SMOKE).unwrap();
    config.train.total_steps = 100_000;
    let mut a = Trainer::new(config).unwrap();
    let mut done = 0;
    while done < 20 {
        done += usize::from(a.iteration().unwrap().is_some());
    }
    let path = dir.path().join("ck.json");
    checkpoint::save(&path, &a.state()).unwrap();
    let mut b = Trainer::from_state(checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(a.state(), b.state());
    let next = |t: &mut Trainer| {
        let mut out = Vec::new();
        while out.len() < 100 {
            if let Some(u) = t.iteration().unwrap() {
                out.push(u.loss.to_bits());
            }
        }
        out
    };
    assert_eq!(next(&mut a), next(&mut b));
}

#[test]
fn resume_through_cli_continues_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), SMOKE, &[]);
    let longer = SMOKE.replace("total_steps = 200", "total_steps = 400");
    let cfg = write_config(dir.path(), &longer);
    let ck = out.join("checkpoint_final.json");
    let o = tgcnet(&[
        "train",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--checkpoint",
        s(&ck),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<MetricsLine> = read_lines(&out.join("metrics.jsonl")).unwrap();
    assert!(lines
        .iter()
        .any(|l| matches!(l, MetricsLine::Resume { .. })));
    match lines.last() {
        Some(MetricsLine::Summary(s)) => assert!(s.steps >= 400),
        other => panic!("{other:?}"),
    }
    // a different model cannot resume this checkpoint
    let cfg = write_config(dir.path(), &longer.replace("hidden = 8", "hidden = 12"));
    let o = tgcnet(&[
        "train",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out),
        "--checkpoint",
        s(&ck),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_reports_interval_and_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), SMOKE, &[]);
    let ck = out.join("checkpoint_final.json");
    let o = tgcnet(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--episodes",
        "12",
        "--greedy",
        "--seed",
        "3",
    ]);
    assert!(o.status.success());
    let lines: Vec<EvalLine> = read_lines(&out.join("eval.jsonl")).unwrap();
    assert_eq!(lines.len(), 13);
    let EvalLine::Summary(summary) = &lines[12] else {
        panic!("last line is the summary")
    };
    assert_eq!(summary.episodes, 12);
    assert!(summary.greedy);
    let h = summary.success.half_width.unwrap();
    assert!((0.0..=1.0).contains(&summary.success.mean) && h >= 0.0);
    let stdout: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stdout["episodes"], 12);

    let o = tgcnet(&["eval", "--checkpoint", s(&ck), "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let other = write_config(dir.path(), &SMOKE.replace("keys = 2", "keys = 3"));
    let o = tgcnet(&["eval", "--checkpoint", s(&ck), "--config", s(&other)]);
    assert_eq!(o.status.code(), Some(2));
    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{\"format\": \"other\"}").unwrap();
    let o = tgcnet(&["eval", "--checkpoint", s(&junk)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn untrained_trace_starts_fully_connected() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        dir.path(),
        &SMOKE.replace("total_steps = 200", "total_steps = 0"),
        &[],
    );
    let ck = out.join("checkpoint_final.json");
    let o = tgcnet(&["trace", "--checkpoint", s(&ck), "--episodes", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // rows deserialize only as valid binary, loop-free adjacency slices
    let lines: Vec<TraceLine> = read_lines(&out.join("trace.jsonl")).unwrap();
    let init = init_adjacency(2).unwrap();
    assert_eq!(lines.iter().filter(|l| l.t == 0).count(), 3);
    for l in &lines {
        if l.t == 0 {
            assert_eq!(l.pre, init);
        }
        assert!(l.edges <= 2);
        assert_eq!(l.edges, l.matrix.edges());
    }
    let text = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let bad = text.replacen("\"matrix\":[[0,", "\"matrix\":[[1,", 1);
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, bad).unwrap();
    assert!(read_lines::<TraceLine>(&broken).is_err());
}

#[test]
fn summarize_groups_runs_by_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for (k, variant) in ["tgcnet", "tgcnet", "no_comm"].iter().enumerate() {
        let sub = dir.path().join(format!("r{k}"));
        fs::create_dir_all(&sub).unwrap();
        let seed = k.to_string();
        let out = train(&sub, SMOKE, &["--variant", variant, "--seed", &seed]);
        files.push(out.join("metrics.jsonl"));
    }
    let table = dir.path().join("summary.jsonl");
    let mut args = vec!["summarize", "--out", s(&table)];
    args.extend(files.iter().map(|f| s(f)));
    let o = tgcnet(&args);
    assert!(o.status.success());
    let rows: Vec<VariantSummary> = read_lines(&table).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].variant.name(), rows[0].runs), ("tgcnet", 2));
    assert_eq!(rows[0].seeds, vec![0, 1]);
    assert_eq!((rows[1].variant.name(), rows[1].runs), ("no_comm", 1));
    assert_eq!(rows[1].median_edges_per_step, 0.0);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["hallway.toml", "forage.toml"] {
        let config = tgcnet_cli::commands::load_config(&dir.join(name)).unwrap();
        config.validate().unwrap();
    }
}
