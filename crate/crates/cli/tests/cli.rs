use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serl_cli::commands::{run_compare, Algo, CompareOptions};
use serl_cli::settings::parse_settings;
use serl_core::trainer::step_tasks;
use serl_core::Env;
use tempfile::TempDir;

const QUICK: &str = "\
group_size = 4
max_turns = 10
feature_dim = 256
warmup_steps = 20
tasks_per_step = 4
eval_tasks = 10
eval_every = 2
";

fn serl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_serl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn setup(extra: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.cfg"), format!("{QUICK}{extra}")).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join(file)).unwrap()
}

#[test]
fn one_step_writes_one_metrics_line() {
    let dir = setup("total_steps = 1\n");
    let o = serl(&["train", "--config", "run.cfg", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    assert_eq!(read(&out, "metrics.jsonl").lines().count(), 1);
    for f in ["ckpt_1.txt", "teacher_1.txt", "trajectories.jsonl", "final_eval.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let last: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(last["step"], 1);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = setup("total_steps = 4\n");
    let p = dir.path();
    assert!(serl(&["train", "--config", "run.cfg", "--out", "full"], p).status.success());
    fs::write(p.join("short.cfg"), format!("{QUICK}total_steps = 2\n")).unwrap();
    assert!(serl(&["train", "--config", "short.cfg", "--out", "split"], p).status.success());
    let o = serl(&["train", "--config", "run.cfg", "--out", "split", "--resume"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "eval.jsonl", "ckpt_4.txt", "teacher_4.txt", "final_eval.json"] {
        assert_eq!(read(&p.join("full"), f), read(&p.join("split"), f), "{f}");
    }
}

#[test]
fn grpo_alias_zeroes_both_schedules() {
    let dir = setup("total_steps = 2\n");
    let o = serl(&["train", "--config", "run.cfg", "--out", "g", "--algo", "grpo"], dir.path());
    assert!(o.status.success());
    for line in read(&dir.path().join("g"), "metrics.jsonl").lines() {
        let m: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(m["alpha"], 0.0);
        assert_eq!(m["lambda"], 0.0);
        assert_eq!(m["l_act"], 0.0);
    }
}

#[test]
fn saved_checkpoint_evaluates_like_the_trained_policy() {
    let dir = setup("total_steps = 2\nseed = 5\n");
    let p = dir.path();
    assert!(serl(&["train", "--config", "run.cfg", "--out", "o"], p).status.success());
    let o = serl(
        &["eval", "--checkpoint", "o/ckpt_2.txt", "--env", "keydoor", "--episodes", "10", "--seed", "5"],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let from_file: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let in_memory: serde_json::Value = serde_json::from_str(&read(&p.join("o"), "final_eval.json")).unwrap();
    for key in ["success_rate", "mean_reward", "episodes"] {
        assert_eq!(from_file[key], in_memory[key], "{key}");
    }
}

#[test]
fn exit_codes() {
    let dir = setup("total_steps = 1\n");
    let p = dir.path();
    fs::write(p.join("oracle.txt"), "SERLCKPT oracle\n").unwrap();
    let o = serl(&["eval", "--checkpoint", "oracle.txt", "--env", "keydoor", "--episodes", "5"], p);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["success_rate"], 1.0);

    let usage = |args: &[&str]| serl(args, p).status.code();
    assert_eq!(usage(&["eval", "--checkpoint", "oracle.txt", "--env", "keydoor", "--episodes", "0"]), Some(2));
    assert_eq!(usage(&["eval", "--checkpoint", "oracle.txt", "--env", "mars", "--episodes", "3"]), Some(2));
    assert_eq!(usage(&["frobnicate"]), Some(2));
    assert_eq!(usage(&["train", "--config", "missing.cfg"]), Some(2));
    fs::write(p.join("bad.cfg"), "clip_eps = 1.5\n").unwrap();
    let o = serl(&["train", "--config", "bad.cfg"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("clip_eps"));
    fs::write(p.join("typo.cfg"), "groupsize = 4\n").unwrap();
    assert_eq!(usage(&["train", "--config", "typo.cfg"]), Some(2));

    fs::write(p.join("junk.txt"), "SERLCKPT v1 garbage\n").unwrap();
    assert_eq!(usage(&["eval", "--checkpoint", "junk.txt", "--env", "keydoor", "--episodes", "3"]), Some(1));
    assert_eq!(usage(&["inspect", "--trajectories", "nowhere.jsonl"]), Some(1));
}

#[test]
fn inspect_renders_every_turn() {
    let dir = setup("total_steps = 1\n");
    let p = dir.path();
    assert!(serl(&["train", "--config", "run.cfg", "--out", "o"], p).status.success());
    let dump = read(&p.join("o"), "trajectories.jsonl");
    let o = serl(&["inspect", "--trajectories", "o/trajectories.jsonl"], p);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with('#')).count(), dump.lines().count());
    assert!(text.contains("act: <act>"));
}

#[test]
fn compare_writes_one_row_per_arm_and_step() {
    let dir = setup("total_steps = 5\n");
    let p = dir.path();
    let o = serl(&["compare", "--config", "run.cfg", "--seeds", "3", "--out", "cmp"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&p.join("cmp"), "compare.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("seed,algo,step,mean_reward,success_rate"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 10);
    for algo in ["grpo", "serl"] {
        let steps: Vec<usize> = rows.iter().filter(|r| r[1] == algo).map(|r| r[2].parse().unwrap()).collect();
        assert_eq!(steps, vec![0, 1, 2, 3, 4]);
    }
    for r in &rows {
        let x: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
    let summary: serde_json::Value = serde_json::from_str(&read(&p.join("cmp"), "compare_summary.json")).unwrap();
    assert_eq!(summary["summary"].as_array().unwrap().len(), 2);
    assert!(stdout(&o).contains("median steps to 0.8"));
}

#[test]
fn both_arms_draw_the_same_tasks() {
    let settings = parse_settings(&format!("{QUICK}total_steps = 3\n")).unwrap();
    let env = Env::new(settings.env, settings.env_size()).unwrap();
    for seed in [1, 2, 3] {
        let mut config = settings.config.clone();
        config.seed = seed;
        let (g, s) = (Algo::Grpo.apply(&config), Algo::Serl.apply(&config));
        for k in 0..10 {
            assert_eq!(
                step_tasks(&env, &g, k, settings.tasks_per_step).unwrap(),
                step_tasks(&env, &s, k, settings.tasks_per_step).unwrap()
            );
        }
    }
}

#[test]
fn compare_is_deterministic_and_needs_seeds() {
    let dir = TempDir::new().unwrap();
    let mut settings = parse_settings(&format!("{QUICK}total_steps = 2\n")).unwrap();
    settings.out_dir = dir.path().join("a");
    let a = run_compare(&settings, &[4], &CompareOptions::default()).unwrap();
    settings.out_dir = dir.path().join("b");
    let b = run_compare(&settings, &[4], &CompareOptions::default()).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(read(&dir.path().join("a"), "compare.csv"), read(&dir.path().join("b"), "compare.csv"));
    assert!(run_compare(&settings, &[], &CompareOptions::default()).is_err());
}
