use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flexmore_core::linalg::Matrix;
use flexmore_core::synth::{random_matrix, Rng};
use flexmore_core::weights::{save_bundle, ExpertBundle};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexmore"))
        .args(args)
        .output()
        .expect("spawn flexmore")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "flexmore {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

const SCENARIO: &str = r#"
seed = 11
hidden = 12
ffn = 20
probes = 4

[[experts]]
name = "alpha"
effective_rank = 3
sigma0 = 2.0
decay = 0.5

[[experts]]
name = "beta"
effective_rank = 8
sigma0 = 1.0
decay = 0.8
noise_floor = 0.01

[[groups]]
name = "g1"
tasks = 2

[[groups]]
name = "g2"
"#;

fn scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    let out = run(&["extract", "a.fmw"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["sweep", "x.toml", "--weights", "w", "--ranks", "4,4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fmw");
    let out = run(&["extract", &s(&missing), &s(&missing), "--rank", "2"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");

    let bad = scenario(dir.path(), "hidden = 4\n");
    let out = run(&["gen", &s(&bad), "--out", &s(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn extract_recovers_planted_rank_one_delta() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(5);
    let base = random_matrix(&mut rng, 10, 7, 1.0);
    let u: Vec<f64> = (0..10).map(|_| rng.uniform(1.0)).collect();
    let v: Vec<f64> = (0..7).map(|_| rng.uniform(1.0)).collect();
    let expert = base.add(&Matrix::from_fn(10, 7, |i, j| 3.0 * u[i] * v[j])).unwrap();
    let (bp, ep) = (dir.path().join("base.fmw"), dir.path().join("e.fmw"));
    save_bundle(&ExpertBundle::new("base", vec![("w".into(), base)]).unwrap(), &bp).unwrap();
    save_bundle(&ExpertBundle::new("e", vec![("w".into(), expert)]).unwrap(), &ep).unwrap();
    let out = ok(&[
        "extract",
        &s(&ep),
        &s(&bp),
        "--rank",
        "1",
        "--out",
        &s(&dir.path().join("a.fma")),
    ]);
    let line = out.lines().nth(1).unwrap();
    let fields: Vec<&str> = line.split(',').collect();
    assert_eq!(&fields[..2], ["w", "1"]);
    let err: f64 = fields[2].parse().unwrap();
    assert!(err < 1e-9, "{line}");
    assert!(dir.path().join("a.fma").exists());
}

#[test]
fn full_rank_adapters_forward_like_dense_experts() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), SCENARIO);
    let w = dir.path().join("w");
    ok(&["gen", &s(&sc), "--out", &s(&w)]);
    let (base, router) = (s(&w.join("base.fmw")), s(&w.join("router.fmw")));
    let mut adapters = Vec::new();
    for e in ["alpha", "beta"] {
        let fma = dir.path().join(format!("{e}.fma"));
        ok(&[
            "extract",
            &s(&w.join(format!("{e}.fmw"))),
            &base,
            "--rank",
            "12",
            "--out",
            &s(&fma),
        ]);
        adapters.push(format!("adapter:{}", s(&fma)));
    }
    let dense: Vec<String> = ["alpha", "beta"]
        .iter()
        .map(|e| format!("full:{}", s(&w.join(format!("{e}.fmw")))))
        .collect();
    let compose = |experts: &[String], out: &str| {
        let mut args = vec!["compose", "--base", &base, "--router", &router, "--top-k", "2"];
        for e in experts {
            args.extend(["--expert", e.as_str()]);
        }
        args.extend(["--out", out]);
        ok(&args);
    };
    let (lr, dn) = (s(&dir.path().join("lr.toml")), s(&dir.path().join("dense.toml")));
    compose(&adapters, &lr);
    compose(&dense, &dn);
    let a = ok(&["forward", &lr, "--random", "5", "--seed", "9"]);
    let b = ok(&["forward", &dn, "--random", "5", "--seed", "9"]);
    let parse = |t: &str| -> Vec<f64> {
        t.lines()
            .flat_map(|l| l.split(',').map(|x| x.parse::<f64>().unwrap()))
            .collect()
    };
    let (x, y) = (parse(&a), parse(&b));
    assert_eq!(x.len(), 5 * 12);
    for (p, q) in x.iter().zip(&y) {
        assert!((p - q).abs() <= 1e-10 * (1.0 + q.abs()), "{p} vs {q}");
    }
}

#[test]
fn gen_is_deterministic_and_rank_zero_expert_equals_base() {
    let dir = tempfile::tempdir().unwrap();
    let text = SCENARIO.replace("effective_rank = 3", "effective_rank = 0");
    let sc = scenario(dir.path(), &text);
    let (w1, w2) = (dir.path().join("w1"), dir.path().join("w2"));
    ok(&["gen", &s(&sc), "--out", &s(&w1)]);
    ok(&["gen", &s(&sc), "--out", &s(&w2)]);
    for f in ["base.fmw", "alpha.fmw", "beta.fmw", "router.fmw"] {
        assert_eq!(
            std::fs::read(w1.join(f)).unwrap(),
            std::fs::read(w2.join(f)).unwrap(),
            "{f}"
        );
    }
    let base = flexmore_core::weights::load_bundle(w1.join("base.fmw")).unwrap();
    let alpha = flexmore_core::weights::load_bundle(w1.join("alpha.fmw")).unwrap();
    assert_eq!(alpha.name(), "alpha");
    assert_eq!(alpha.with_name("base"), base);

    let w3 = dir.path().join("w3");
    ok(&["gen", &s(&sc), "--seed", "12", "--out", &s(&w3)]);
    assert_ne!(
        std::fs::read(w1.join("beta.fmw")).unwrap(),
        std::fs::read(w3.join("beta.fmw")).unwrap()
    );
}

#[test]
fn sweep_covers_default_and_full_only_grids() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), SCENARIO);
    let w = dir.path().join("w");
    ok(&["gen", &s(&sc), "--out", &s(&w)]);
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        &s(&sc),
        "--weights",
        &s(&w),
        "--kind",
        "single",
        "--out",
        &s(&out),
    ]);
    let rows = csv_rows(&std::fs::read_to_string(out.join("scores.csv")).unwrap());
    for e in ["alpha", "beta"] {
        let ranks: std::collections::BTreeSet<&str> =
            rows.iter().filter(|r| r[0] == e).map(|r| r[1].as_str()).collect();
        assert_eq!(ranks.len(), 15, "{e}");
    }

    let full_out = dir.path().join("full");
    ok(&[
        "sweep",
        &s(&sc),
        "--weights",
        &s(&w),
        "--kind",
        "single",
        "--ranks",
        "full",
        "--out",
        &s(&full_out),
    ]);
    let rows = csv_rows(&std::fs::read_to_string(full_out.join("scores.csv")).unwrap());
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r[1] == "full" && r[4] == "1"), "{rows:?}");
}

#[test]
fn renamed_copy_of_an_expert_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), SCENARIO);
    let w = dir.path().join("w");
    ok(&["gen", &s(&sc), "--out", &s(&w)]);
    let base = s(&w.join("base.fmw"));
    let alpha = s(&w.join("alpha.fmw"));
    let copy = dir.path().join("copy.fmw");
    let bundle = flexmore_core::weights::load_bundle(w.join("alpha.fmw"))
        .unwrap()
        .with_name("copy");
    save_bundle(&bundle, &copy).unwrap();
    let rows = random_matrix(&mut Rng::new(1), 2, 12, 1.0);
    let router = Matrix::from_fn(3, 12, |i, j| rows.get(i.min(1), j));
    let rp = dir.path().join("router.fmw");
    save_bundle(
        &ExpertBundle::new("router", vec![("router".into(), router)]).unwrap(),
        &rp,
    )
    .unwrap();
    let comp = s(&dir.path().join("c.toml"));
    ok(&[
        "compose",
        "--base",
        &base,
        "--router",
        &s(&rp),
        "--top-k",
        "2",
        "--expert",
        &format!("full:{alpha}"),
        "--expert",
        &format!("full:{}", s(&copy)),
        "--out",
        &comp,
    ]);
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        &s(&sc),
        "--composition",
        &comp,
        "--kind",
        "single",
        "--ranks",
        "1..64",
        "--out",
        &s(&out),
    ]);
    let rows = csv_rows(&std::fs::read_to_string(out.join("scores.csv")).unwrap());
    let pick =
        |name: &str| -> Vec<Vec<String>> { rows.iter().filter(|r| r[0] == name).map(|r| r[1..].to_vec()).collect() };
    assert_eq!(pick("alpha"), pick("copy"));
    assert_eq!(pick("alpha").len(), 7 * 3);
}

fn write_table(dir: &Path, rows: &[(String, String, &str, f64)]) -> PathBuf {
    let mut t = String::from("expert,rank,group,task,score\n");
    for (m, r, g, v) in rows {
        t.push_str(&format!("{m},{r},{g},t01,{v}\n"));
    }
    let p = dir.join("scores.csv");
    std::fs::write(&p, t).unwrap();
    p
}

#[test]
fn select_ranks_finds_planted_argmax_and_breaks_ties_low() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for k in 0..15u32 {
        let r = (1u64 << k).to_string();
        let peaked = 0.9 - 0.02 * (k as f64 - 6.0).abs();
        rows.push(("peaked".to_string(), r.clone(), "g1", peaked));
        rows.push(("peaked".to_string(), r.clone(), "g2", peaked - 0.1));
        rows.push(("flat".to_string(), r.clone(), "g1", 0.5));
        rows.push(("flat".to_string(), r, "g2", 0.5));
    }
    let table = write_table(dir.path(), &rows);
    let out = ok(&["select-ranks", &s(&table)]);
    assert!(out.lines().any(|l| l.starts_with("peaked,64,6,")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("flat,1,0,")), "{out}");
    let out = ok(&[
        "select-ranks",
        &s(&table),
        "--strategy",
        "group:g2",
        "--models",
        "peaked",
    ]);
    assert_eq!(out.lines().nth(1).unwrap(), "peaked,64,6,0.8000");
    let bad = run(&["select-ranks", &s(&table), "--strategy", "group:nope"]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn analyze_recovers_planted_slopes_and_delta() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for k in 0..15u32 {
        rows.push(("m".to_string(), (1u64 << k).to_string(), "g1", 0.2 + 0.01 * k as f64));
        rows.push(("m".to_string(), (1u64 << k).to_string(), "g2", 0.6 - 0.02 * k as f64));
    }
    rows.push(("base".to_string(), "full".to_string(), "g1", 0.4221));
    rows.push(("base".to_string(), "full".to_string(), "g2", 0.4221));
    rows.push(("m".to_string(), "full".to_string(), "g1", 0.4522));
    rows.push(("m".to_string(), "full".to_string(), "g2", 0.4522));
    let table = write_table(dir.path(), &rows);
    let out = dir.path().join("report");
    ok(&["analyze", &s(&table), "--baseline", "base", "--out", &s(&out)]);
    let reg = std::fs::read_to_string(out.join("regression.csv")).unwrap();
    assert!(reg.lines().any(|l| l == "m,g1,0.200000,0.010000,1.0000,15"), "{reg}");
    assert!(reg.lines().any(|l| l == "m,g2,0.600000,-0.020000,-1.0000,15"), "{reg}");
    assert!(reg.lines().any(|l| l == "m,Avg,0.400000,-0.005000,-1.0000,15"), "{reg}");
    let avg = std::fs::read_to_string(out.join("avg.csv")).unwrap();
    assert!(avg.lines().any(|l| l == "m,full,0.4522,0.4522,0.4522,+7.13"), "{avg}");
    assert!(
        avg.lines().any(|l| l == "base,full,0.4221,0.4221,0.4221,+0.00"),
        "{avg}"
    );
    for f in ["slopes.csv", "peaks.csv", "peak_summary.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn analyze_empty_table_fails_without_report() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("empty.csv");
    std::fs::write(&table, "expert,rank,group,task,score\n").unwrap();
    let out = dir.path().join("report");
    let res = run(&["analyze", &s(&table), "--out", &s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.join("regression.csv").exists());
}

#[test]
fn params_reports_published_totals() {
    let total = |experts: &str| {
        let out = ok(&["params", "--experts", experts]);
        out.lines().last().unwrap().rsplit(',').next().unwrap().to_string()
    };
    assert_eq!(total("full,full,full,full,full,full"), "33.27B");
    assert_eq!(total("64,128,2048,1,8,128"), "10.75B");
    assert_eq!(total("512,512,512,512,512,512"), "11.75B");
}

#[test]
fn json_lines_scores_round_trip_through_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), SCENARIO);
    let w = dir.path().join("w");
    ok(&["gen", &s(&sc), "--out", &s(&w)]);
    let (csv_dir, json_dir) = (dir.path().join("c"), dir.path().join("j"));
    let sweep = |out: &Path, fmt: &str| {
        ok(&[
            "sweep",
            &s(&sc),
            "--weights",
            &s(&w),
            "--ranks",
            "1..16",
            "--mixture-ranks",
            "1,4",
            "--format",
            fmt,
            "--out",
            &s(out),
        ]);
    };
    sweep(&csv_dir, "csv");
    sweep(&json_dir, "json-lines");
    ok(&[
        "analyze",
        &s(&csv_dir.join("scores.csv")),
        "--out",
        &s(&csv_dir.join("r")),
    ]);
    ok(&[
        "analyze",
        &s(&json_dir.join("scores.jsonl")),
        "--out",
        &s(&json_dir.join("r")),
    ]);
    for f in ["regression.csv", "avg.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(csv_dir.join("r").join(f)).unwrap(),
            std::fs::read(json_dir.join("r").join(f)).unwrap(),
            "{f}"
        );
    }
}
