// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `lenslab` binary: exit codes, actionable errors, overrides and
//! restartability on the generated toy fixture.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lenslab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lenslab"))
        .current_dir(dir)
        .args(args)
        .env("LENSLAB_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_fixture() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    let o = lenslab(d.path(), &["make-toy", "."]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    d
}

#[test]
fn every_command_succeeds_on_the_toy_fixture() {
    let d = toy_fixture();
    for cmd in ["fit-lens", "surprisal", "evaluate", "report", "ngram-train", "correlate"] {
        let o = lenslab(d.path(), &[cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let o = lenslab(d.path(), &["validate-bundle", "models/toy"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"n_layers\": 4"));
    for f in [
        "delta_ll.tsv",
        "delta_ll_clause_final.tsv",
        "fit_report.json",
        "table1.tsv",
        "table2.tsv",
        "table3.tsv",
        "scaling.tsv",
        "scaling.svg",
        "interaction_coefs.tsv",
        "corrected_curves.svg",
        "error_regression.tsv",
        "contextualization.svg",
        "surprisal/toy/tuned/spr/layer_4.tsv",
        "translators/toy/kl_curves.tsv",
        "ngram/bigram.json",
    ] {
        assert!(d.path().join("out").join(f).is_file(), "missing {f}");
    }
    // Surprisal files: one per layer of every unit.
    let layers = fs::read_dir(d.path().join("out/surprisal/toy-l/logit/maze")).unwrap().count();
    assert_eq!(layers, 6);
}

#[test]
fn tuned_lens_without_translators_names_fit_lens() {
    let d = toy_fixture();
    for cmd in ["surprisal", "evaluate", "report"] {
        let o = lenslab(d.path(), &[cmd]);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(stderr(&o).contains("lenslab fit-lens"), "{}", stderr(&o));
    }
    // The logit lens alone needs no translators.
    let o = lenslab(d.path(), &["--lens", "logit", "evaluate"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_2() {
    let d = toy_fixture();
    let cases: [&[&str]; 3] = [
        &["--config", "missing.toml", "evaluate"],
        &["--lens", "sideways", "evaluate"],
        &["no-such-command"],
    ];
    for args in cases {
        assert_eq!(code(&lenslab(d.path(), args)), 2, "{args:?}");
    }
    let cfg = fs::read_to_string(d.path().join("lenslab.toml")).unwrap();
    fs::write(d.path().join("typo.toml"), cfg.replace("seed = 0", "sede = 0")).unwrap();
    let o = lenslab(d.path(), &["--config", "typo.toml", "--lens", "logit", "evaluate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));
    fs::write(d.path().join("nopath.toml"), cfg.replace("data/spr.tsv", "data/none.tsv")).unwrap();
    let o = lenslab(d.path(), &["--config", "nopath.toml", "--lens", "logit", "evaluate"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = lenslab(d.path(), &["evaluate"]);
    assert_eq!(code(&o), 2, "workers env is valid here: {}", stderr(&o));
    let bad_workers = Command::new(env!("CARGO_BIN_EXE_lenslab"))
        .current_dir(d.path())
        .args(["--lens", "logit", "evaluate"])
        .env("LENSLAB_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad_workers), 2);
}

#[test]
fn data_errors_exit_with_1() {
    let d = toy_fixture();
    let spr = d.path().join("data/spr.tsv");
    let text = fs::read_to_string(&spr).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut f: Vec<String> = lines[1].split('\t').map(String::from).collect();
    f[5] = "fast".into();
    lines[1] = f.join("\t");
    fs::write(&spr, lines.join("\n") + "\n").unwrap();
    let o = lenslab(d.path(), &["--lens", "logit", "evaluate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("non-numeric cost"), "{}", stderr(&o));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(code(&lenslab(d.path(), &["validate-bundle", empty.path().to_str().unwrap()])), 1);
}

#[test]
fn command_line_overrides_win_and_reruns_are_identical() {
    let d = toy_fixture();
    let args = ["--lens", "logit", "--clause-final", "off", "--out-dir", "alt", "evaluate"];
    assert_eq!(code(&lenslab(d.path(), &args)), 0);
    let alt = d.path().join("alt");
    assert!(alt.join("delta_ll.tsv").is_file());
    assert!(!alt.join("delta_ll_clause_final.tsv").exists());
    assert!(!d.path().join("out").exists());
    let tsv = fs::read_to_string(alt.join("delta_ll.tsv")).unwrap();
    assert!(tsv.lines().skip(1).all(|l| l.split('\t').nth(2) == Some("logit")));

    let first = fs::read(alt.join("fit_report.json")).unwrap();
    assert_eq!(code(&lenslab(d.path(), &args)), 0);
    assert_eq!(first, fs::read(alt.join("fit_report.json")).unwrap());
    assert_eq!(tsv, fs::read_to_string(alt.join("delta_ll.tsv")).unwrap());
}

#[test]
fn deleted_intermediates_are_reproduced() {
    let d = toy_fixture();
    let run = |cmd: &str| assert_eq!(code(&lenslab(d.path(), &["--lens", "logit", cmd])), 0);
    run("surprisal");
    run("evaluate");
    let out = d.path().join("out");
    let layer = out.join("surprisal/toy/logit/spr/layer_3.tsv");
    let before_layer = fs::read(&layer).unwrap();
    let before_dll = fs::read(out.join("delta_ll.tsv")).unwrap();
    fs::remove_file(&layer).unwrap();
    fs::remove_dir_all(out.join("cache")).unwrap();
    fs::remove_file(out.join("delta_ll.tsv")).unwrap();
    run("surprisal");
    run("evaluate");
    assert_eq!(before_layer, fs::read(&layer).unwrap());
    assert_eq!(before_dll, fs::read(out.join("delta_ll.tsv")).unwrap());
}
