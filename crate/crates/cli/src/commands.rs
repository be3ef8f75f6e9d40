use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use irwgan::data::{load_dataset, DomainDataset, ImageTensor};
use irwgan::diffnet::{Network, Tensor};
use irwgan::importance::{dataset_weights, WeightSummary};
use irwgan::metrics::{fid, kid, FeatureExtractor, FeatureSet, MetricsReport, RawPixels};
use irwgan::synth::{make_unaligned_pair, SynthSpec};
use irwgan::trainer::{
    checkpoint_path, hypothesis_probe, latest_checkpoint, resume_training, run_training, Checkpoint, Nets,
};
use irwgan::ExperimentConfig;
use serde_json::json;

use crate::manifest::{Fingerprint, RunManifest};
use crate::{ConfigArgs, DataArgs, Direction, EvalArgs, Failure, DiagnoseArgs, SweepArgs, TrainArgs, TranslateArgs};

const SEED_VAR: &str = "IRW_SEED";
const SYNTH_FILE: &str = "synth.json";

struct Pair {
    x: DomainDataset,
    y: DomainDataset,
    synth: Option<SynthSpec>,
}

impl Pair {
    /// Base hyperparameters: tuned small networks for generated data, the full
    /// architecture otherwise.
    fn base_config(&self) -> ExperimentConfig {
        if self.synth.is_some() {
            ExperimentConfig::synthetic_task()
        } else {
            ExperimentConfig::default()
        }
    }

    fn manifest(&self, cfg: &ExperimentConfig) -> RunManifest {
        RunManifest::new(cfg, &self.x, &self.y, self.synth.clone())
    }

    fn save_synth(&self, dir: &Path) -> Result<(), Failure> {
        if let Some(s) = &self.synth {
            s.save(&dir.join(SYNTH_FILE))?;
        }
        Ok(())
    }
}

fn synth_spec(arg: &str) -> Result<SynthSpec, Failure> {
    if arg == "default" {
        return Ok(SynthSpec::default());
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Failure::usage(format!("--synth: `{arg}` is neither `default` nor an existing file")));
    }
    Ok(SynthSpec::load(path)?)
}

/// Explicit labels file, else `labels.csv` next to the images when present.
fn labels_for(dir: &Path, explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| Some(dir.join("labels.csv")).filter(|p| p.is_file()))
}

fn load_dir(dir: &Path, resolution: usize, labels: Option<&Path>) -> Result<DomainDataset, Failure> {
    Ok(load_dataset(dir, resolution, labels_for(dir, labels).as_deref())?)
}

fn load_pair(d: &DataArgs) -> Result<Pair, Failure> {
    if let Some(s) = &d.synth {
        let spec = synth_spec(s)?;
        let (x, y) = make_unaligned_pair(&spec)?;
        return Ok(Pair { x, y, synth: Some(spec) });
    }
    match (&d.x, &d.y) {
        (Some(x), Some(y)) => Ok(Pair {
            x: load_dir(x, d.resolution, d.x_labels.as_deref())?,
            y: load_dir(y, d.resolution, d.y_labels.as_deref())?,
            synth: None,
        }),
        _ => Err(Failure::usage("data source required: --synth <default|spec.json> or --x <dir> --y <dir>")),
    }
}

fn resolve_config(base: ExperimentConfig, a: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let file = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => base,
    };
    let mut cfg = file.with_overrides(&a.overrides)?;
    if let Ok(v) = std::env::var(SEED_VAR) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("{SEED_VAR}=`{v}` is not an unsigned integer")))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| Failure::io(format!("cannot write {}: {e}", path.display())))
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let pair = load_pair(&a.data)?;
    if a.resume {
        if a.cfg.config.is_some() || !a.cfg.overrides.is_empty() || a.cfg.seed.is_some() {
            return Err(Failure::usage("--resume continues with the checkpoint's config; drop --config/--set/--seed"));
        }
        let manifest = RunManifest::load(&a.out)?;
        let now = [Fingerprint::of(&pair.x), Fingerprint::of(&pair.y)];
        if manifest.datasets != now {
            return Err(Failure::usage("data differs from the run's manifest fingerprints"));
        }
        let path = latest_checkpoint(&a.out)
            .ok_or_else(|| Failure::missing(format!("no checkpoint under {}", a.out.display())))?;
        let ck = Checkpoint::load(&path)?;
        let state = resume_training(&pair.x, &pair.y, &ck, Some(&a.out))?;
        println!("resumed from {} and trained to epoch {}", path.display(), state.epoch);
        return Ok(());
    }

    let cfg = resolve_config(pair.base_config(), &a.cfg)?;
    if a.out.join(crate::manifest::MANIFEST).exists() {
        return Err(Failure::usage(format!(
            "{} already holds a run; use --resume or another --out",
            a.out.display()
        )));
    }
    create_dir(&a.out)?;
    pair.manifest(&cfg).write(&a.out)?;
    pair.save_synth(&a.out)?;
    let state = run_training(&pair.x, &pair.y, &cfg, Some(&a.out))?;
    println!("trained {} epochs ({} steps) into {}", state.epoch, state.step, a.out.display());
    Ok(())
}

fn translate_all(net: &Network, ds: &DomainDataset) -> Result<Vec<ImageTensor>, Failure> {
    ds.samples()
        .iter()
        .map(|img| Ok(net.infer_one(&Tensor::from(img))?.to_image()?))
        .collect()
}

fn summary(net: &Network, ds: &DomainDataset, chunk: usize) -> Result<WeightSummary, Failure> {
    Ok(dataset_weights(net, ds, chunk)?.summary()?)
}

/// Mean over the domains where the value is defined.
fn mean_some(vals: [Option<f64>; 2]) -> Option<f64> {
    let got: Vec<f64> = vals.into_iter().flatten().collect();
    (!got.is_empty()).then(|| got.iter().sum::<f64>() / got.len() as f64)
}

struct Evaluation {
    report: MetricsReport,
    weights_x: WeightSummary,
    weights_y: WeightSummary,
}

/// FID/KID of `G(x)` against `y` and `F(y)` against `x`, averaged over the two
/// directions, plus dataset-global weight reports.
fn evaluate(nets: &Nets, x: &DomainDataset, y: &DomainDataset, chunk: usize) -> Result<Evaluation, Failure> {
    let ex = RawPixels;
    let feats = |imgs: &[ImageTensor]| FeatureSet::extract(imgs, &ex);
    let (real_x, real_y) = (feats(x.samples())?, feats(y.samples())?);
    let fake_y = feats(&translate_all(&nets.g, x)?)?;
    let fake_x = feats(&translate_all(&nets.f, y)?)?;
    let (fid_xy, kid_xy) = (fid(&fake_y, &real_y)?, kid(&fake_y, &real_y)?);
    let (fid_yx, kid_yx) = (fid(&fake_x, &real_x)?, kid(&fake_x, &real_x)?);

    let wx = summary(&nets.beta_x, x, chunk)?;
    let wy = summary(&nets.beta_y, y, chunk)?;
    let (rx, ry) = (wx.report, wy.report);
    let report = MetricsReport {
        fid: (fid_xy + fid_yx) / 2.0,
        kid: (kid_xy.raw + kid_yx.raw) / 2.0,
        kid_x100: (kid_xy.x100 + kid_yx.x100) / 2.0,
        precision: mean_some([rx.and_then(|r| r.precision), ry.and_then(|r| r.precision)]),
        recall: mean_some([rx.and_then(|r| r.recall), ry.and_then(|r| r.recall)]),
        accuracy: mean_some([rx.map(|r| r.accuracy), ry.map(|r| r.accuracy)]),
        ess_x: wx.ess,
        ess_y: wy.ess,
        detail: json!({
            "extractor": ex.tag(),
            "x2y": { "fid": fid_xy, "kid": kid_xy.raw, "kid_x100": kid_xy.x100, "n_generated": x.len(), "n_reference": y.len() },
            "y2x": { "fid": fid_yx, "kid": kid_yx.raw, "kid_x100": kid_yx.x100, "n_generated": y.len(), "n_reference": x.len() },
            "report_x": rx,
            "report_y": ry,
            "mean_weight_x": { "aligned": wx.mean_aligned, "unaligned": wx.mean_unaligned },
            "mean_weight_y": { "aligned": wy.mean_aligned, "unaligned": wy.mean_unaligned },
        }),
    };
    Ok(Evaluation {
        report,
        weights_x: wx,
        weights_y: wy,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let body = serde_json::to_string_pretty(value).map_err(|e| Failure::io(e.to_string()))?;
    write(path, body)
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let manifest = RunManifest::load(&a.run)?;
    let path = checkpoint_path(&a.run, manifest.config.epochs);
    if !path.is_file() {
        return Err(Failure::missing(format!("final checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    let (x, y) = match (&a.test_x, &a.test_y) {
        (Some(tx), Some(ty)) => {
            let res = manifest.resolution();
            (load_dir(tx, res, None)?, load_dir(ty, res, None)?)
        }
        _ => {
            let spec_path = a.run.join(SYNTH_FILE);
            if !spec_path.is_file() {
                return Err(Failure::usage("run has no synth.json; pass --test-x and --test-y"));
            }
            make_unaligned_pair(&SynthSpec::load(&spec_path)?)?
        }
    };
    let ev = evaluate(&ck.state.nets, &x, &y, ck.config.report_chunk)?;
    write_json(&a.run.join("metrics.json"), &ev.report)?;
    let r = &ev.report;
    println!(
        "fid {:.4} kid {:.5} accuracy {} ess_x {:.1} ess_y {:.1}",
        r.fid,
        r.kid,
        r.accuracy.map_or("n/a".into(), |v| format!("{v:.3}")),
        r.ess_x,
        r.ess_y
    );
    Ok(())
}

struct SweepRow {
    lambda: f64,
    ess_x: f64,
    ess_y: f64,
    beta_accuracy: Option<f64>,
    fid: f64,
}

fn sweep_one(pair: &Pair, cfg: &ExperimentConfig, dir: &Path) -> Result<SweepRow, Failure> {
    create_dir(dir)?;
    pair.manifest(cfg).write(dir)?;
    pair.save_synth(dir)?;
    let state = run_training(&pair.x, &pair.y, cfg, Some(dir))?;
    let ev = evaluate(&state.nets, &pair.x, &pair.y, cfg.report_chunk)?;
    write_json(&dir.join("metrics.json"), &ev.report)?;
    write(&dir.join("hist_X.csv"), ev.weights_x.histogram.to_csv())?;
    write(&dir.join("hist_Y.csv"), ev.weights_y.histogram.to_csv())?;
    Ok(SweepRow {
        lambda: cfg.lambda_ess,
        ess_x: ev.report.ess_x,
        ess_y: ev.report.ess_y,
        beta_accuracy: ev.report.accuracy,
        fid: ev.report.fid,
    })
}

pub fn sweep_ess(a: &SweepArgs) -> Result<(), Failure> {
    if a.values.len() < 2 {
        return Err(Failure::usage("--values needs at least 2 entries"));
    }
    if let Some(v) = a.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Failure::usage(format!("--values: {v} is not a non-negative number")));
    }
    if a.jobs == 0 {
        return Err(Failure::usage("--jobs must be positive"));
    }
    let pair = load_pair(&a.data)?;
    let base = resolve_config(pair.base_config(), &a.cfg)?;
    create_dir(&a.out)?;
    pair.save_synth(&a.out)?;

    // Every run keeps the same seed so the values differ only in λ_ESS.
    let jobs: Vec<(ExperimentConfig, PathBuf)> = a
        .values
        .iter()
        .map(|&v| {
            let cfg = ExperimentConfig { lambda_ess: v, ..base.clone() };
            (cfg, a.out.join(format!("lambda_{v}")))
        })
        .collect();
    let results: Mutex<Vec<Option<Result<SweepRow, Failure>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some((cfg, dir)) = jobs.get(i) else { break };
        let r = sweep_one(&pair, cfg, dir);
        if let Ok(row) = &r {
            eprintln!("lambda_ess {}: ess_x {:.1} fid {:.4}", row.lambda, row.ess_x, row.fid);
        }
        results.lock().expect("no panics while held")[i] = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..a.jobs.min(jobs.len()) {
            s.spawn(work);
        }
        work();
    });

    let mut csv = String::from("lambda_ess,ess_x,ess_y,beta_accuracy,fid\n");
    for r in results.into_inner().expect("no panics while held") {
        let row = r.expect("every job ran")?;
        let acc = row.beta_accuracy.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{}", row.lambda, row.ess_x, row.ess_y, acc, row.fid);
    }
    write(&a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<(), Failure> {
    let pair = load_pair(&a.data)?;
    let cfg = resolve_config(pair.base_config(), &a.cfg)?;
    create_dir(&a.out)?;
    pair.manifest(&cfg).write(&a.out)?;
    pair.save_synth(&a.out)?;
    let rows = hypothesis_probe(&pair.x, &pair.y, &cfg, Some(&a.out))?;
    let later = rows.iter().filter(|r| r.epoch > 0);
    let (n, above) = later.fold((0, 0), |(n, k), r| (n + 1, k + usize::from(r.mean_unaligned >= r.mean_aligned)));
    println!("unaligned error ≥ aligned error in {above} of {n} epochs");
    Ok(())
}

pub fn translate(a: &TranslateArgs) -> Result<(), Failure> {
    let manifest = RunManifest::load(&a.run)?;
    let path = latest_checkpoint(&a.run)
        .ok_or_else(|| Failure::missing(format!("no checkpoint under {}", a.run.display())))?;
    let ck = Checkpoint::load(&path)?;
    let input = load_dataset(&a.input, manifest.resolution(), None)?;
    let net = match a.direction {
        Direction::X2y => &ck.state.nets.g,
        Direction::Y2x => &ck.state.nets.f,
    };
    create_dir(&a.out)?;
    for (name, img) in input.names().iter().zip(translate_all(net, &input)?) {
        img.save_png(&a.out.join(name))?;
    }
    println!("translated {} images into {}", input.len(), a.out.display());
    Ok(())
}
