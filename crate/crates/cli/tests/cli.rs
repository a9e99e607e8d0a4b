use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cpconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpconv"))
        .args(args)
        .output()
        .expect("spawn cpconv")
}

fn ok(args: &[&str]) -> String {
    let out = cpconv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// CSV rows with the timing columns blanked.
fn untimed(csv: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let timed: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("measured_ms") || **h == "speedup")
        .map(|(i, _)| i)
        .collect();
    assert_eq!(timed.len(), 3);
    lines
        .map(|l| {
            l.split(',')
                .enumerate()
                .map(|(i, f)| if timed.contains(&i) { "" } else { f })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

#[test]
fn complexity_prints_counts() {
    let out = ok(&["complexity", "--d", "9", "--s", "48", "--t", "128", "--rank", "64"]);
    assert!(out.contains("497664"), "{out}");
    assert!(out.contains("12416"), "{out}");
}

#[test]
fn appendix_check_passes() {
    let out = ok(&["appendix-check"]);
    assert!(out.trim_end().ends_with("ok"), "{out}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cpconv(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        cpconv(&["complexity", "--d", "0", "--s", "1", "--t", "1", "--rank", "1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(cpconv(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_layer_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    let out = dir.path().join("cp");
    ok(&["toy-net", "--classes", "3", "--out", p(&model)]);
    let res = cpconv(&[
        "decompose",
        "--model",
        p(&model),
        "--layer",
        "conv9",
        "--rank",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("conv9"));
    assert!(!out.exists());
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    ok(&[
        "gen-data",
        "--classes",
        "3",
        "--per-class",
        "20",
        "--seed",
        "1",
        "--out",
        p(&d("data")),
    ]);
    ok(&["toy-net", "--classes", "3", "--seed", "2", "--out", p(&d("init"))]);
    let data = d("data");
    let trained = d("trained");
    ok(&[
        "finetune",
        "--model",
        p(&d("init")),
        "--data",
        p(&data),
        "--epochs",
        "2",
        "--lr",
        "0.01",
        "--out",
        p(&trained),
    ]);
    let history = fs::read_to_string(trained.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,train_acc,eval_acc\n"));
    assert_eq!(history.lines().count(), 3);

    for run in ["cp_a", "cp_b"] {
        ok(&[
            "decompose",
            "--model",
            p(&trained),
            "--layer",
            "conv2",
            "--rank",
            "3",
            "--seed",
            "5",
            "--out",
            p(&d(run)),
        ]);
    }
    for file in [
        "cp.toml",
        "factor_0.cpt",
        "factor_1.cpt",
        "factor_2.cpt",
        "factor_3.cpt",
    ] {
        assert_eq!(
            fs::read(d("cp_a").join(file)).unwrap(),
            fs::read(d("cp_b").join(file)).unwrap(),
            "{file}"
        );
    }

    ok(&[
        "rewrite",
        "--model",
        p(&trained),
        "--layer",
        "conv2",
        "--factors",
        p(&d("cp_a")),
        "--out",
        p(&d("rewritten")),
    ]);
    let manifest = fs::read_to_string(d("rewritten").join("network.toml")).unwrap();
    assert!(manifest.contains("conv2.cp4"));
    assert!(!manifest.contains("name = \"conv2\""));

    for run in ["ft_a", "ft_b"] {
        ok(&[
            "finetune",
            "--model",
            p(&d("rewritten")),
            "--data",
            p(&data),
            "--epochs",
            "1",
            "--lr",
            "0.002",
            "--freeze-inserted",
            "--clip",
            "5",
            "--out",
            p(&d(run)),
        ]);
    }
    assert_eq!(
        fs::read(d("rewritten").join("conv2.cp1.kernel.cpt")).unwrap(),
        fs::read(d("ft_a").join("conv2.cp1.kernel.cpt")).unwrap(),
        "frozen inserted layer changed"
    );
    for file in ["classifier.weights.cpt", "conv1.kernel.cpt", "history.csv"] {
        assert_eq!(
            fs::read(d("ft_a").join(file)).unwrap(),
            fs::read(d("ft_b").join(file)).unwrap(),
            "{file}"
        );
    }

    let mut csvs = Vec::new();
    for run in ["bench_a.csv", "bench_b.csv"] {
        ok(&[
            "bench",
            "--model",
            p(&trained),
            "--layer",
            "conv2",
            "--ranks",
            "2,1",
            "--data",
            p(&data),
            "--ft-epochs",
            "1",
            "--batch",
            "4",
            "--iters",
            "3",
            "--warmup",
            "0",
            "--out",
            p(&d(run)),
        ]);
        csvs.push(fs::read_to_string(d(run)).unwrap());
    }
    assert_eq!(csvs[0].lines().count(), 7);
    assert_eq!(untimed(&csvs[0]), untimed(&csvs[1]));
    assert!(csvs[0].lines().skip(1).all(|l| l.ends_with(",ok")), "{}", csvs[0]);
}
