//! The `aesformer` binary on a small config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aesformer::eval::EvalReport;
use aesformer::runner::{EditOutput, Manifest};

const SMALL: &str = r#"
seed = 11

[generator]
clean_videos = 60
ad_videos = 4
irrelevant_videos = 4
showcase_videos = 4
duplicate_videos = 4
final_pairs = 160

[mining]
test_count = 30

[sft]
steps = 150

[grpo]
steps = 40

[editor]
steps = 300

[eval]
max_items = 30
bootstrap_resamples = 200
"#;

fn aesformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesformer"))
        .arg("--quiet")
        .arg("--config")
        .arg(dir.join("small.toml"))
        .arg("--run-dir")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = aesformer(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    tmp
}

#[test]
fn scripted_pipeline_writes_every_artifact() {
    let tmp = setup();
    let d = tmp.path();
    for cmd in ["gen-videos", "mine-corpus", "train-sft", "train-grpo", "train-editor"] {
        ok(d, &[cmd]);
    }
    fs::write(d.join("human.csv"), "method,human_preference\ntrained-editor,0.61\n").unwrap();
    ok(d, &["evaluate", "--human", d.join("human.csv").to_str().unwrap()]);
    ok(d, &["ablate-shuffle"]);

    let run = d.join("run");
    for f in [
        "config.resolved.toml",
        "data/videos.jsonl",
        "data/train.jsonl",
        "data/test.jsonl",
        "data/pair_drops.jsonl",
        "reports/funnel.json",
        "checkpoints/sft.json",
        "checkpoints/grpo.json",
        "checkpoints/editor.json",
        "metrics/sft.csv",
        "metrics/grpo.csv",
        "metrics/editor.csv",
        "reports/eval.json",
        "reports/table.csv",
        "reports/ablation.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let grpo_header = fs::read_to_string(run.join("metrics/grpo.csv")).unwrap();
    assert!(
        grpo_header.starts_with("step,prompt,mean_reward,format_rate,mean_alignment,mean_creativity,mean_kl,objective")
    );
    assert_eq!(grpo_header.lines().count(), 41);

    let reports: Vec<EvalReport> = serde_json::from_slice(&fs::read(run.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].samples, 30);
    assert_eq!(reports[0].human_preference, Some(0.61));
    assert_eq!(reports[1].human_preference, None);
    let table = fs::read_to_string(run.join("reports/table.csv")).unwrap();
    assert!(table.starts_with("method,win_vs_poor,win_vs_good,scorer_broad,scorer_mid,scorer_sharp,human_preference"));

    let manifest: Manifest = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    let hashes: std::collections::BTreeSet<_> = manifest.values().map(|e| e.config_hash.clone()).collect();
    assert!(manifest.contains_key("checkpoints/grpo.json"));
    assert!(manifest
        .values()
        .all(|e| e.config_hash.len() == 64 && e.sha256.len() == 64));
    assert_eq!(hashes.len(), 1);

    fs::write(
        d.join("plan.txt"),
        "<d1> </d1> <d2> </d2> <d3> </d3> <d4> </d4> <d5> </d5> <d6> </d6> <d7> </d7>\n",
    )
    .unwrap();
    let out = ok(
        d,
        &["edit", "--prompt", "3", "--plan", d.join("plan.txt").to_str().unwrap()],
    );
    let edit: EditOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert!(edit.plan_valid);
    assert_eq!(edit.latent.len(), 8);
    let out = ok(d, &["edit", "--prompt", "3"]);
    let planned: EditOutput = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(planned.prompt.0, 3);
}

#[test]
fn identical_configs_give_identical_metrics() {
    let a = setup();
    let b = setup();
    for dir in [a.path(), b.path()] {
        for cmd in ["gen-videos", "mine-corpus", "train-sft", "train-grpo"] {
            ok(dir, &[cmd]);
        }
    }
    for f in [
        "metrics/sft.csv",
        "metrics/grpo.csv",
        "data/train.jsonl",
        "checkpoints/grpo.json",
    ] {
        assert_eq!(
            fs::read(a.path().join("run").join(f)).unwrap(),
            fs::read(b.path().join("run").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["--seed", "99", "gen-videos"]);
    ok(d, &["mine-corpus", "--test-count", "12"]);
    let resolved = fs::read_to_string(d.join("run/config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 11"));
    assert!(resolved.contains("test_count = 12"));
    let test = fs::read_to_string(d.join("run/data/test.jsonl")).unwrap();
    assert_eq!(test.lines().count(), 12);
}

#[test]
fn exit_codes() {
    let tmp = setup();
    let d = tmp.path();
    let code = |args: &[&str]| aesformer(d, args).status.code();

    assert_eq!(code(&["train-grpo"]), Some(3));
    assert_eq!(code(&["evaluate"]), Some(1));

    fs::write(
        d.join("small.toml"),
        "[reward]\nformat = 0.5\nalignment = 0.5\ncreativity = 0.4\n",
    )
    .unwrap();
    assert_eq!(code(&["gen-videos"]), Some(2));
    fs::write(d.join("small.toml"), "no_such_field = 3\n").unwrap();
    assert_eq!(code(&["gen-videos"]), Some(2));

    fs::write(
        d.join("small.toml"),
        format!("{SMALL}\n[oracle.remote]\nmax_retries = 1\nbackoff_ms = 1\ntimeout_ms = 2000\n"),
    )
    .unwrap();
    for cmd in ["gen-videos", "mine-corpus", "train-sft"] {
        ok(d, &[cmd]);
    }
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let endpoint = format!("http://127.0.0.1:{port}/score");
    assert_eq!(
        code(&["train-grpo", "--oracle", "remote", "--endpoint", &endpoint]),
        Some(4)
    );

    fs::write(d.join("run/checkpoints/sft.json"), b"{\"format_version\": 1, \"vocab_fingerprint\": \"x\", \"config\": {\"vocab_size\": 62, \"temperature\": 1.0, \"bucket_width\": 4, \"max_len\": 64, \"end_token\": null}, \"rows\": []}").unwrap();
    assert_eq!(code(&["train-grpo"]), Some(3));
    assert_eq!(code(&["not-a-command"]), Some(2));
}
