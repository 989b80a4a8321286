use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
name = small
cells = 20
t_end = 3
inflow = sin-capped base=0.3 amp=0.3 freq=1 cap=0.5
target = constant value=0.3
samples = 64
seed = 5
";

fn vsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsl")).args(args).output().expect("binary runs")
}

fn write_scenario(dir: &Path) -> String {
    let path = dir.join("small.scn");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

/// Every file under `dir`, with the wall-time field masked in JSON summaries.
fn snapshot(dir: &Path) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut text = fs::read_to_string(&path).unwrap();
            if path.extension().is_some_and(|e| e == "json") {
                text = text
                    .lines()
                    .filter(|l| !l.trim_start().starts_with("\"wall_time_s\""))
                    .collect::<Vec<_>>()
                    .join("\n");
            }
            files.push((path.strip_prefix(dir).unwrap().display().to_string(), text));
        }
    }
    files.sort();
    files
}

#[test]
fn run_is_deterministic_apart_from_wall_time() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = write_scenario(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = vsl(&["run", &scn, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.iter().any(|(name, _)| name.ends_with("histogram.csv")));
    assert_eq!(sa.len(), sb.len());
    for ((na, ta), (nb, tb)) in sa.iter().zip(&sb) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb, "{na} differs between identical runs");
    }
}

#[test]
fn printed_costs_match_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = write_scenario(tmp.path());
    let out = tmp.path().join("run");
    let o = vsl(&["run", &scn, "--out", out.to_str().unwrap(), "--policy", "all"]);
    assert!(o.status.success());
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    let summaries: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summaries.len(), 5);
    for s in &summaries {
        let label = s["label"].as_str().unwrap();
        let line = table.lines().find(|l| l.starts_with(label)).unwrap();
        let printed: f64 = line[label.len()..].split_whitespace().next().unwrap().parse().unwrap();
        let cost = s["cost"].as_f64().unwrap();
        assert!((printed - cost).abs() <= 5e-6 * cost.abs(), "{label}: {printed} vs {cost}");
        assert_eq!(printed.to_string(), vsl::scenario::sig6(cost).parse::<f64>().unwrap().to_string());
    }
}

#[test]
fn compare_histograms_follow_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = write_scenario(tmp.path());
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = vsl(&["run", &scn, "--policy", "re", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        out.join("re").to_str().unwrap().to_string()
    };
    let (a, b, c) = (run("a", "1"), run("b", "1"), run("c", "2"));
    let o = vsl(&["compare", &a, &b, &c]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("histograms 0 and 1: identical"), "{text}");
    assert!(text.contains("histograms 0 and 2: different"), "{text}");
    assert!(text.contains("histograms 1 and 2: different"), "{text}");
}

#[test]
fn exit_codes_by_category() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.scn");
    assert_eq!(vsl(&["run", missing.to_str().unwrap()]).status.code(), Some(2));

    let bad = tmp.path().join("bad.scn");
    fs::write(&bad, "cells = 20\nspeed = fast\n").unwrap();
    let o = vsl(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let infeasible = tmp.path().join("infeasible.scn");
    fs::write(&infeasible, "v_min = 1.5\nv_max = 1.0\n").unwrap();
    assert_eq!(vsl(&["run", infeasible.to_str().unwrap()]).status.code(), Some(2));

    // a plain file where the output directory should go
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let scn = write_scenario(tmp.path());
    let o = vsl(&["run", &scn, "--policy", "ip", "--out", blocker.join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    assert_ne!(vsl(&["run"]).status.code(), Some(0));
    assert_ne!(vsl(&["frobnicate"]).status.code(), Some(0));
}

#[test]
fn gradient_check_and_convergence_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let scn = write_scenario(tmp.path());
    let out = tmp.path().join("grad");
    let o = vsl(&["gradient-check", &scn, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("gradient.csv")).unwrap();
    assert!(csv.starts_with("t,left,right,fd"));
    assert!(csv.lines().count() > 1);

    let o = vsl(&["convergence", "trivial", "--cells", "25", "--levels", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("25") && text.contains("50"), "{text}");

    assert_eq!(vsl(&["convergence", "trivial", "--levels", "1"]).status.code(), Some(2));
}
