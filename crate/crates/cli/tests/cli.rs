use std::path::Path;
use std::process::{Command, Output};

use morl_core::io::{read_json, FamilyManifest, MdpDocument};

fn morl(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morl"))
        .args(args)
        .env("MORL_OUT", out)
        .output()
        .expect("failed to spawn morl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_writes_a_readable_family() {
    let dir = tempfile::tempdir().unwrap();
    let o = morl(dir.path(), &["gen", "--tasks", "3", "--n", "20", "--tag", "g"]);
    assert_ok(&o);
    let root = dir.path().join("family_g");
    let manifest: FamilyManifest = read_json(root.join("manifest.json")).unwrap();
    assert_eq!(manifest.members.len(), 3);
    assert_eq!(manifest.behaviors.len(), 3);
    assert_eq!(manifest.dataset.as_deref(), Some("dataset.json"));
    for m in &manifest.members {
        let doc: MdpDocument = read_json(root.join(m)).unwrap();
        assert!(doc.violations().unwrap().is_empty());
        assert_eq!((doc.num_states, doc.num_actions, doc.horizon, doc.d), (5, 2, 3, 2));
    }
}

#[test]
fn upstream_csv_has_header_one_row_per_step_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["upstream", "--n", "60,120", "--tasks", "2", "--seeds", "4,5", "--tag", "u"];
    assert_ok(&morl(dir.path(), &args));
    let path = dir.path().join("upstream_u.csv");
    let first = std::fs::read(&path).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("seed,n,T,h,avg_tv,tv_bound"));
    // 2 sizes x 2 seeds x H = 3 steps.
    assert_eq!(lines.count(), 12);
    assert_ok(&morl(dir.path(), &args));
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seeds": [11, 12], "grid": {"n_off": [40]}, "tag": "fromfile"}"#).unwrap();
    let o = morl(dir.path(), &["offline", "--config", cfg.to_str().unwrap(), "--seeds", "7", "--feature-source", "true"]);
    assert_ok(&o);
    let text = std::fs::read_to_string(dir.path().join("offline_fromfile.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("7,40,"), "{}", rows[0]);
}

#[test]
fn rfe_explore_then_plan_on_the_revealed_reward() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_ok(&morl(out, &["rfe", "explore", "--k", "150", "--seed", "2", "--tag", "r", "--feature-source", "true"]));
    let trace = std::fs::read_to_string(out.join("rfe_trace_r.csv")).unwrap();
    assert_eq!(trace.lines().count(), 151);
    let p = |name: &str| out.join(name).to_str().unwrap().to_string();
    let o = morl(
        out,
        &[
            "rfe",
            "plan",
            "--dataset",
            &p("rfe_dataset_r.json"),
            "--features",
            &p("features_r.json"),
            "--reward",
            &p("reward_r.json"),
            "--mdp",
            &p("target_r.json"),
            "--tag",
            "r",
        ],
    );
    assert_ok(&o);
    let line = stdout(&o).lines().find(|l| l.contains("suboptimality")).unwrap().to_string();
    let gap: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!((0.0..=3.0).contains(&gap), "{line}");
    assert!(out.join("rfe_policy_r.json").exists());
}

#[test]
fn verify_fails_on_a_corrupted_mdp_file() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&morl(dir.path(), &["gen", "--tasks", "1", "--tag", "v"]));
    let good = dir.path().join("family_v").join("task_0.json");
    let mut doc: MdpDocument = read_json(&good).unwrap();
    doc.mu[1][0][0] += 0.5;
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();

    let o = morl(dir.path(), &["verify", "--fast", "--mdp-file", good.to_str().unwrap(), "--mdp-file", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains(&format!("PASS distribution ({})", good.display())), "{text}");
    assert!(text.contains(&format!("FAIL distribution ({})", bad.display())), "{text}");
    assert!(text.contains("1 failed"));
}

#[test]
fn invalid_config_is_an_error_not_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let o = morl(dir.path(), &["upstream", "--delta", "1.5", "--seeds", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));
    let o = morl(dir.path(), &["sweep", "--seeds", "1,1"]);
    assert_eq!(o.status.code(), Some(2));
}
