use std::path::{Path, PathBuf};
use std::process::Command;

use chainforge::algorithms::{AlgoConfig, Algorithm};
use chainforge::trajectory::{write_jsonl, Segment, SegmentKind, Termination, Trajectory};
use chainforge_cli::commands::{cmd_advantages, cmd_rollout, cmd_stats, load_trajectories};
use chainforge_cli::{CliError, RunConfig};

const COUNTER: &str = r#"
seed = 1
tools = ["counter_step"]
reward = "counter_reward"

[policy]
kind = "scripted"
script = [
    ["Action: counter_step\nInput: {\"action\": \"inc\"}", "Answer: done"],
    ["Action: counter_step\nInput: {\"action\": \"inc\"}", "Action: counter_step\nInput: {\"action\": \"inc\"}", "Answer: done"],
]

[rollout]
n_chains_per_query = 3
max_turns = 4

[[rollout.queries]]
prompt = "Count to 1."
task_id = "1"

[[rollout.queries]]
prompt = "Count to 3."
task_id = "3"
"#;

fn demo() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/demo.toml");
    RunConfig::from_toml_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Runtime::new().unwrap()
}

fn rollout_into(mut cfg: RunConfig, dir: &Path) -> PathBuf {
    cfg.output.dir = dir.to_path_buf();
    rt().block_on(cmd_rollout(&cfg)).unwrap();
    dir.join("trajectories.jsonl")
}

#[test]
fn counter_rollout_scores_each_group() {
    let dir = tempfile::tempdir().unwrap();
    let path = rollout_into(RunConfig::from_toml_str(COUNTER).unwrap(), dir.path());
    let ts = load_trajectories(&path).unwrap();
    assert_eq!(ts.len(), 6);
    for t in &ts {
        assert_eq!(t.terminated, Termination::Natural);
        // Group 0 reaches its target of 1; group 1 stops at 2 of 3.
        assert_eq!(t.reward, if t.group == 0 { 1.0 } else { 0.0 }, "{}", t.chain_id);
    }
    assert!(dir.path().join("stats.json").exists());
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2, "{curve}");
    let saved = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    let mut expected = RunConfig::from_toml_str(COUNTER).unwrap();
    expected.output.dir = dir.path().to_path_buf();
    assert_eq!(RunConfig::from_toml_str(&saved).unwrap(), expected);
}

#[test]
fn rollouts_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let pa = rollout_into(demo(), a.path());
    let pb = rollout_into(demo(), b.path());
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
}

#[test]
fn stats_curve_has_one_row_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = Vec::new();
    let mut batches = Vec::new();
    for seed in 1..=3 {
        let mut cfg = demo();
        cfg.seed = seed;
        let sub = dir.path().join(format!("s{seed}"));
        let path = rollout_into(cfg, &sub);
        all.extend(std::fs::read(&path).unwrap());
        batches.push(load_trajectories(&path).unwrap());
    }
    let joined = dir.path().join("all.jsonl");
    std::fs::write(&joined, all).unwrap();
    let report = cmd_stats(&joined).unwrap();
    assert_eq!(report.curve.len(), 3);
    assert_eq!(report.stats.chains, 3 * 64);

    let mut reader = csv::Reader::from_reader(report.csv.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for (row, batch) in rows.iter().zip(&batches) {
        let n = batch.len() as f64;
        let reward: f64 = batch.iter().map(|t| t.reward).sum::<f64>() / n;
        let calls: usize = batch.iter().map(|t| t.tool_calls.len()).sum();
        let steps = batch
            .iter()
            .flat_map(|t| &t.tool_calls)
            .filter(|c| c.name == "gridhouse_step")
            .count();
        let num = |c: &str| row[col(c)].parse::<f64>().unwrap();
        assert_eq!(num("chains"), n);
        assert!((num("mean_reward") - reward).abs() < 1e-12);
        assert!((num("mean_tool_calls") - calls as f64 / n).abs() < 1e-12);
        assert_eq!(num("calls_gridhouse_step") as usize, steps);
    }
}

#[test]
fn stats_of_an_empty_file_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let err = cmd_stats(&path).unwrap_err();
    assert!(err.to_string().contains("no trajectories"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

fn traj(id: &str, group: usize, reward: f64) -> Trajectory {
    let mut t = Trajectory::new(id, group, Segment::new(SegmentKind::Prompt, "p", vec![1, 2]));
    t.segments
        .push(Segment::new(SegmentKind::Response, "ab", vec![3, 4]));
    t.terminated = Termination::Natural;
    t.reward = reward;
    t
}

fn write(dir: &Path, name: &str, ts: &[Trajectory]) -> PathBuf {
    let path = dir.join(name);
    let mut buf = Vec::new();
    write_jsonl(&mut buf, ts).unwrap();
    std::fs::write(&path, buf).unwrap();
    path
}

#[test]
fn incomplete_groups_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "t.jsonl",
        &[
            traj("q0000-c00", 0, 1.0),
            traj("q0000-c01", 0, 0.0),
            traj("q0001-c00", 1, 1.0),
        ],
    );
    let cfg = AlgoConfig::default();
    match cmd_advantages(&path, &cfg, Some(2), None) {
        Err(CliError::GroupIncomplete(missing)) => assert_eq!(missing, vec!["q0001-c01".to_string()]),
        other => panic!("{other:?}"),
    }
    // Without an expected size the singleton group is still too small for RLOO.
    let rloo = AlgoConfig {
        algorithm: Algorithm::Rloo,
        ..AlgoConfig::default()
    };
    let err = cmd_advantages(&path, &rloo, None, None).unwrap_err();
    assert!(
        err.to_string().contains("GroupTooSmall") || err.to_string().contains("group"),
        "{err}"
    );
}

#[test]
fn grpo_advantages_broadcast_over_the_mask() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "t.jsonl",
        &[traj("q0000-c00", 0, 1.0), traj("q0000-c01", 0, 0.0)],
    );
    let report = cmd_advantages(&path, &AlgoConfig::default(), Some(2), None).unwrap();
    let eps = 1e-6;
    let a = 0.5 / (0.5 + eps);
    assert_eq!(report.records[0].mask, vec![0, 0, 1, 1]);
    assert_eq!(report.records[0].advantages, vec![0.0, 0.0, a, a]);
    assert_eq!(report.records[1].advantages, vec![0.0, 0.0, -a, -a]);
    assert!(report.group_sums[&0].abs() < 1e-15);
}

#[test]
fn ppo_sidecar_gives_the_hand_computed_loss() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "t.jsonl", &[traj("only", 0, 1.0)]);
    let side = dir.path().join("side.jsonl");
    let (half, six, seven) = (0.5f64.ln(), 0.6f64.ln(), 0.7f64.ln());
    let row = serde_json::json!({
        "chain_id": "only",
        "values": [9.0, 9.0, 0.5, 0.25],
        "old_logprobs": [0.0, 0.0, half, half],
        "new_logprobs": [0.0, 0.0, six, seven],
    });
    std::fs::write(&side, format!("{row}\n")).unwrap();
    let cfg = AlgoConfig {
        algorithm: Algorithm::Ppo,
        ..AlgoConfig::default()
    };
    let report = cmd_advantages(&path, &cfg, None, Some(&side)).unwrap();
    // GAE with gamma = lambda = 1: deltas -0.25 and 0.75.
    let adv = &report.records[0].advantages;
    assert!(
        (adv[2] - 0.5).abs() < 1e-12 && (adv[3] - 0.75).abs() < 1e-12,
        "{adv:?}"
    );
    // Ratios 1.2 and 1.4 (clipped to 1.2): terms -0.6 and -0.9.
    let loss = report.ppo_loss.unwrap();
    assert!((loss + 0.75).abs() < 1e-12, "{loss}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chainforge"))
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = bin().args(["rollout", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = bin()
        .args(["stats", "/nonexistent/trajectories.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Every chain fails to reach the policy, breaching max_error_fraction.
    let cfg = dir.path().join("remote.toml");
    std::fs::write(
        &cfg,
        COUNTER.replace(
            "kind = \"scripted\"",
            "kind = \"remote\"\nendpoint = \"http://127.0.0.1:9\"",
        ),
    )
    .unwrap();
    let out = bin()
        .args(["rollout", "--config"])
        .arg(&cfg)
        .arg("--output-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let ok = dir.path().join("ok.toml");
    std::fs::write(&ok, COUNTER).unwrap();
    let out = bin()
        .args(["rollout", "--config"])
        .arg(&ok)
        .arg("--output-dir")
        .arg(dir.path().join("ok"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("wrote 6 trajectories"), "{stdout}");
}

#[test]
fn served_envs_pass_conformance() {
    use chainforge::envs::conformance::ConformanceProfile;
    use chainforge_cli::commands::{cmd_conformance, start_env_server, ServedEnv};

    rt().block_on(async {
        for (env, profile) in [
            (ServedEnv::GridHouse, ConformanceProfile::Generic),
            (ServedEnv::Counter, ConformanceProfile::Counter),
        ] {
            let server = start_env_server(env, "127.0.0.1:0".parse().unwrap(), None)
                .await
                .unwrap();
            let report = cmd_conformance(&server.url(), profile).await.unwrap();
            assert!(report.all_passed(), "{report}");
            server.shutdown().await;
        }
        // Nothing listening: every check fails, which is a threshold breach.
        let err = cmd_conformance("http://127.0.0.1:9", ConformanceProfile::Generic)
            .await
            .unwrap_err();
        assert_eq!(err.exit_code(), 4);
    });
}
