use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use irwgan::synth::SynthSpec;

const TINY: &[&str] = &[
    "--set", "epochs=2",
    "--set", "decay_start_epoch=1",
    "--set", "iters_per_epoch=2",
    "--set", "batch_size=4",
    "--set", "micro_batch=4",
    "--set", "checkpoint_every=1",
    "--set", "generator.ngf=4",
    "--set", "discriminator.ndf=4",
    "--set", "importance.ndf=4",
];

fn irwgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irwgan"))
        .args(args)
        .env_remove("IRW_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    SynthSpec {
        size_x: 12,
        size_y: 12,
        seed: 4,
        ..SynthSpec::default()
    }
    .save(&path)
    .unwrap();
    path
}

fn train(dir: &Path, out: &Path, extra: &[&str]) -> Output {
    let spec = tiny_spec(dir);
    let mut args = vec!["train", "--synth", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    irwgan(&args)
}

#[test]
fn train_writes_the_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run1");
    let o = train(tmp.path(), &run, &["--set", "lambda_ess=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "log.csv", "weights_X.csv", "weights_Y.csv", "manifest.json", "synth.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoints").join("ep2.ckpt").is_file());
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["lambda_ess"], 0.0);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["datasets"][0]["size"], 18);
    assert_eq!(manifest["datasets"][0]["aligned"], 12);
    assert_eq!(manifest["datasets"][0]["sha256"].as_str().unwrap().len(), 64);

    // The run directory is not reused without --resume.
    let again = train(tmp.path(), &run, &[]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn seed_precedence_is_config_then_env_then_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let seed_of = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let out = tmp.path().join(out);
        let mut args = vec!["train", "--synth", spec.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "seed=5"];
        args.extend_from_slice(TINY);
        args.extend_from_slice(&["--set", "epochs=1"]);
        if let Some(f) = flag {
            args.extend_from_slice(&["--seed", f]);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_irwgan"));
        cmd.args(&args).env_remove("IRW_SEED");
        if let Some(e) = env {
            cmd.env("IRW_SEED", e);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("a", None, None), 5);
    assert_eq!(seed_of("b", Some("6"), None), 6);
    assert_eq!(seed_of("c", Some("6"), Some("7")), 7);
}

#[test]
fn usage_errors_exit_2() {
    let o = irwgan(&["train", "--synth", "default", "--out", "x", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus-flag"));

    let tmp = tempfile::tempdir().unwrap();
    let o = train(tmp.path(), &tmp.path().join("r"), &["--set", "lambda_foo=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda_foo"));

    let o = irwgan(&["sweep-ess", "--values", "1", "--synth", "default", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoints_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().to_str().unwrap();
    let o = irwgan(&["eval", "--run", run]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = irwgan(&["translate", "--run", run, "--input", run, "--direction", "x2y", "--out", run]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn eval_translate_and_resume_on_one_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = train(tmp.path(), &run, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_s = run.to_str().unwrap();

    let o = irwgan(&["eval", "--run", run_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    for key in ["fid", "kid", "kid_x100", "precision", "recall", "accuracy", "ess_x", "ess_y"] {
        assert!(m.get(key).is_some(), "metrics.json lacks {key}");
    }
    assert!(m["fid"].as_f64().unwrap() >= 0.0);
    assert!(m["detail"]["x2y"]["fid"].is_number() && m["detail"]["y2x"]["fid"].is_number());

    // Translation keeps file names and is byte-for-byte repeatable.
    let input = tmp.path().join("input");
    let (x, _) = irwgan::synth::make_unaligned_pair(&SynthSpec { size_x: 3, size_y: 2, ..SynthSpec::default() }).unwrap();
    x.write_png_dir(&input).unwrap();
    let pngs = |dir: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        v.sort();
        v
    };
    let outs: Vec<_> = ["t1", "t2"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let o = irwgan(&["translate", "--run", run_s, "--input", input.to_str().unwrap(), "--direction", "x2y", "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", stderr(&o));
            pngs(&out)
        })
        .collect();
    let names = |v: &[(String, Vec<u8>)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(&outs[0]), names(&pngs(&input)));
    assert_eq!(outs[0], outs[1]);

    // Resuming a finished run with the same data is a no-op that succeeds;
    // different data is refused.
    let spec = tiny_spec(tmp.path());
    let o = irwgan(&["train", "--synth", spec.to_str().unwrap(), "--out", run_s, "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = irwgan(&["train", "--synth", "default", "--out", run_s, "--resume"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let out = tmp.path().join("sweep");
    let mut args = vec!["sweep-ess", "--values", "0,1", "--synth", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    // Later --set wins.
    args.extend_from_slice(&["--set", "epochs=1"]);
    let o = irwgan(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda_ess,ess_x,ess_y,beta_accuracy,fid");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    for v in ["lambda_0", "lambda_1"] {
        for f in ["hist_X.csv", "hist_Y.csv", "metrics.json", "log.csv"] {
            assert!(out.join(v).join(f).is_file(), "{v}/{f}");
        }
    }
}

#[test]
fn diagnose_writes_probe_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tiny_spec(tmp.path());
    let out = tmp.path().join("diag");
    let mut args = vec!["diagnose", "--synth", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = irwgan(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("hypothesis_probe.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,mean_aligned,mean_unaligned");
    assert_eq!(lines.len(), 1 + 3);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert!(cols[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}
