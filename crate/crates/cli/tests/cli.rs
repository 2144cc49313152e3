mod common;

use common::{clrm, ok, tree, write_tiny};

#[test]
fn every_stage_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("out");
    let base = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ];
    let run = |extra: &[&str]| ok(&clrm(&[&base[..], extra].concat(), &[]));

    run(&["generate-models"]);
    assert_eq!(
        std::fs::read_dir(out.join("models"))
            .unwrap()
            .filter(|e| { e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".bin") })
            .count(),
        14
    );
    let s = run(&["build-pca"]);
    assert!(s.contains("latent dimension 4"), "{s}");
    let model = out.join("models/model_0013.bin");
    run(&["simulate", "--model", model.to_str().unwrap()]);
    let rates = std::fs::read_to_string(out.join("rates.csv")).unwrap();
    assert!(rates.starts_with("time_days,I1:water_inj,P1:oil_prod,P1:water_prod\n"));
    assert_eq!(rates.lines().count(), 1 + 13);

    run(&["make-dataset"]);
    run(&["train"]);
    assert!(out.join("proxy/proxy.ckpt").exists());
    let s = run(&["eval-proxy"]);
    assert!(
        s.contains("E = ") && s.contains("P10 = ") && s.contains("P50 = ") && s.contains("P90 = "),
        "{s}"
    );
    assert!(
        std::fs::read_to_string(out.join("error_rank.csv"))
            .unwrap()
            .lines()
            .count()
            == 11
    );

    let s = run(&["optimize"]);
    assert!(s.contains("expected NPV"), "{s}");
    let sched = out.join("optimized_schedule.csv");
    run(&["optimize", "--prefix", sched.to_str().unwrap(), "--first-free", "1"]);
    let after = std::fs::read_to_string(&sched).unwrap();
    assert!(after.contains("I1,1,"));

    let prefix = out.join("first.csv");
    std::fs::copy(&sched, &prefix).unwrap();
    run(&[
        "make-dataset",
        "--prefix",
        prefix.to_str().unwrap(),
        "--fixed-steps",
        "1",
        "--retrain",
    ]);
    let proxy = out.join("proxy");
    let kept = dir.path().join("proxy0");
    std::fs::rename(&proxy, &kept).unwrap();
    run(&["train", "--warm-start", kept.to_str().unwrap()]);

    let s = run(&[
        "history-match",
        "--truth",
        model.to_str().unwrap(),
        "--window-end",
        "180",
    ]);
    assert!(s.contains("6 observations, 10 runs"), "{s}");
    let report = std::fs::read_to_string(out.join("posterior/hm_report.json")).unwrap();
    assert!(report.contains("\"n_observations\": 6"));
    assert!(out.join("posterior/model_0009.bin").exists());
    run(&[
        "history-match",
        "--observations",
        out.join("observations.json").to_str().unwrap(),
    ]);

    let s = run(&["report"]);
    assert!(s.contains("ledger (planned)"));
    assert!(out.join("config_sources.json").exists());
}

#[test]
fn clrm_run_directory_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let out = dir.path().join("run");
    let s = ok(&clrm(
        &[
            "clrm",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    ));
    assert!(s.contains("cycle 1:") && s.contains("cycle 2:"), "{s}");
    for f in [
        "config.toml",
        "ledger.json",
        "summary.json",
        "npv_by_cycle.csv",
        "proxy_eval/error_rank.csv",
        "proxy_eval/eval_rates/p50_proxy.csv",
        "cycle_1/schedule.csv",
        "cycle_1/npv_distribution.csv",
        "cycle_1/constraint_trace.csv",
        "cycle_1/training_history.csv",
        "cycle_2/hm_report.json",
        "cycle_2/training_history.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");
    let cycles = summary["cycles"].as_array().unwrap();
    assert_eq!(cycles[0]["free_variables"], 4);
    assert_eq!(cycles[1]["free_variables"], 2);
    assert_eq!(cycles[1]["hm"]["n_observations"], 6);
    let s0: Vec<Vec<f64>> = serde_json::from_value(cycles[0]["schedule"]["bhp"].clone()).unwrap();
    let s1: Vec<Vec<f64>> = serde_json::from_value(cycles[1]["schedule"]["bhp"].clone()).unwrap();
    for w in 0..2 {
        assert_eq!(s0[w][0], s1[w][0], "operated step changed");
    }

    let other = dir.path().join("rep");
    let s = ok(&clrm(
        &[
            "report",
            "--run",
            out.to_str().unwrap(),
            "--out",
            other.to_str().unwrap(),
        ],
        &[],
    ));
    assert!(s.contains("ledger (run)"));
    assert!(
        s.contains("simulation-based optimization (counterfactual): 2 × 6 × 4 × 10 = 480"),
        "{s}"
    );
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let mut trees = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        ok(&clrm(
            &[
                "clrm",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
            ],
            &[],
        ));
        trees.push(tree(&out));
    }
    assert_eq!(trees[0].len(), trees[1].len());
    for (a, b) in trees[0].iter().zip(&trees[1]) {
        assert_eq!(a.0, b.0);
        assert!(a.1 == b.1, "{} differs", a.0.display());
    }
}

#[test]
fn paper_profile_report_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(&clrm(
        &["report", "--profile", "paper", "--out", dir.path().to_str().unwrap()],
        &[],
    ));
    assert!(s.contains("proxy training simulations: 300 + 200 × 4 = 1,100"), "{s}");
    assert!(s.contains("5 × 35 × 30 × 20 = 105,000"));
    assert!(s.contains("history-matching simulations: 4 × 20 × 110 = 8,800"));
    assert!(s.contains("total: 113,800 / 9,900 = 11.49"));
}

#[test]
fn failures_exit_with_codes_and_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 7\n").unwrap();
    let o = clrm(
        &[
            "report",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(e["error"]["kind"], "config");
    assert_eq!(e["error"]["exit_code"], 2);

    let o = clrm(
        &["report", "--out", dir.path().to_str().unwrap()],
        &[("CLRM_ENSEMBLE__N_PRIOR", "7")],
    );
    assert_eq!(o.status.code(), Some(2));

    let o = clrm(
        &[
            "train",
            "--dataset",
            "/nonexistent",
            "--out",
            dir.path().to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(e["error"]["kind"], "io");

    let cfg = write_tiny(dir.path());
    let out = dir.path().join("o");
    let base = ["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    ok(&clrm(&[&base[..], &["generate-models"]].concat(), &[]));
    let model = out.join("models/model_0000.bin");
    let o = clrm(
        &[&base[..], &["simulate", "--model", model.to_str().unwrap()]].concat(),
        &[("CLRM_NUMERICS__CG_MAX_ITER", "1")],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let e: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(e["error"]["kind"], "numerical");
}
