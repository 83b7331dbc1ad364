mod common;

use std::fs;
use std::path::Path;

use common::{tiny_config, TINY_CONFIG};
use sevcon::cli::{main_with_args, read_score_csv, Method, Run, ScorerKind};
use sevcon::error::Error;
use sevcon::labeling::read_label_csv;

fn sevcon(run: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["sevcon".to_string(), "--run".into(), run.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    main_with_args(argv)
}

#[test]
fn stages_demand_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), tiny_config(), false).unwrap();
    match run.train_gradcon().unwrap_err() {
        Error::MissingArtifact { stage, .. } => assert_eq!(stage, "gen-data"),
        other => panic!("{other}"),
    }
    run.gen_data().unwrap();
    let err = run.probe(sevcon::evalprobe::ProbeTask::Binary(0), Method::SimClr).unwrap_err();
    assert!(err.to_string().contains("pretrain --mode simclr"), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(sevcon(dir.path(), &["probe", "--task", "bio_a", "--method", "simclr"]), 3);
    assert_eq!(sevcon(dir.path(), &["make-labels", "--bins", "5"]), 3);
    assert_eq!(sevcon(dir.path(), &["score", "--scorer", "severity"]), 3);
    assert_eq!(sevcon(dir.path(), &["probe", "--task", "bio_z", "--method", "simclr"]), 2);
    assert_eq!(sevcon(dir.path(), &["pretrain", "--mode", "sideways"]), 2);
}

#[test]
fn config_errors_and_hash_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[gradcon]\nalpah = 0.1\n").unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(sevcon(&run_dir, &["--config", bad.to_str().unwrap(), "gen-data"]), 2);

    let tiny = dir.path().join("tiny.toml");
    fs::write(&tiny, TINY_CONFIG).unwrap();
    assert_eq!(sevcon(&run_dir, &["--config", tiny.to_str().unwrap(), "gen-data"]), 0);
    // the run remembers its config
    assert_eq!(sevcon(&run_dir, &["train-gradcon"]), 0);

    let other = dir.path().join("other.toml");
    fs::write(&other, format!("{TINY_CONFIG}\n[run]\nseed = 99\n")).unwrap();
    let with_other = ["--config", other.to_str().unwrap(), "score", "--scorer", "severity"];
    assert_eq!(sevcon(&run_dir, &with_other), 2);
    let mut forced = with_other.to_vec();
    forced.push("--force");
    assert_eq!(sevcon(&run_dir, &forced), 0);
}

#[test]
fn subcommands_match_the_library_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let by_hand = dir.path().join("by_hand");
    let tiny = dir.path().join("tiny.toml");
    fs::write(&tiny, TINY_CONFIG).unwrap();
    let ok = |args: &[&str]| assert_eq!(sevcon(&by_hand, args), 0, "{args:?}");
    ok(&["--config", tiny.to_str().unwrap(), "gen-data"]);
    ok(&["train-gradcon"]);
    for s in ["severity", "msp", "odin", "mahalanobis"] {
        ok(&["score", "--scorer", s]);
    }
    for n in ["5", "10", "20"] {
        ok(&["make-labels", "--bins", n]);
    }
    ok(&["pretrain", "--mode", "random"]);
    ok(&["pretrain", "--mode", "simclr"]);
    for n in ["5", "10", "20"] {
        ok(&["pretrain", "--mode", "severity", "--bins", n]);
    }
    for method in ["random", "simclr", "severity_n5", "severity_n10", "severity_n20"] {
        for task in ["bio_a", "bio_b", "bio_c", "bio_d", "bio_e", "multilabel"] {
            ok(&["probe", "--task", task, "--method", method]);
        }
        ok(&["evaluate", "--method", method]);
    }
    ok(&["ablate"]);
    ok(&["report"]);

    let auto = dir.path().join("auto");
    Run::new(&auto, tiny_config(), false).unwrap().run_all().unwrap();
    for file in ["table1.csv", "table2.csv", "fig5.pgm", "gradcon_check.json", "provenance.json"] {
        let a = fs::read(by_hand.join("report").join(file)).unwrap();
        let b = fs::read(auto.join("report").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }

    let cfg = tiny_config();
    let labels = read_label_csv(&by_hand.join("labels/severity_n10/labels.csv")).unwrap();
    assert_eq!(labels.len(), cfg.data.n_unlabeled);
    let scores = read_score_csv(&by_hand.join("scores/severity/scores.csv")).unwrap();
    assert_eq!(scores.len(), cfg.data.n_unlabeled);
    assert!(scores.iter().all(|(_, r, g, s)| (r.unwrap() - cfg.gradcon.alpha * g.unwrap() - s).abs() < 1e-12));
    let msp = read_score_csv(&by_hand.join("scores/msp/scores.csv")).unwrap();
    assert!(msp.iter().all(|(_, r, g, _)| r.is_none() && g.is_none()));

    let table1 = fs::read_to_string(by_hand.join("report/table1.csv")).unwrap();
    assert_eq!(table1.lines().next().unwrap(), "method,IRF,DME,IRHRF,FAVF,PAVF,multi_label");
    assert_eq!(table1.lines().count(), 6);
    let table2 = fs::read_to_string(by_hand.join("report/table2.csv")).unwrap();
    let scorers: Vec<&str> = table2.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(scorers, ScorerKind::ALL.map(|k| k.name()));

    let provenance: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(by_hand.join("report/provenance.json")).unwrap()).unwrap();
    assert_eq!(provenance["config_hash"], cfg.hash());
    assert_eq!(provenance["run_seed"], cfg.run.seed);
    assert!(provenance["stages"].as_object().unwrap().values().all(|r| r["config_hash"] == cfg.hash()));
}
