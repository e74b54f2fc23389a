use std::io::Write;
use std::path::Path;

use ohem_core::detecteval::{evaluate_dataset, write_detections_csv, write_report_csv};
use ohem_core::roihead::Snapshot;
use ohem_core::synthdata::{read_dataset, write_dataset, Dataset, Split};
use ohem_core::trainer::{
    eval_mean_loss, run_ablation_suite, write_ablation_csv, write_records_csv, write_timing_csv, Trainer,
};
use ohem_core::Error;

use crate::config::RunConfig;
use crate::manifest::{DirLock, RunManifest};

pub const ITERATIONS_CSV: &str = "iterations.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const LOSS_CURVE_CSV: &str = "loss_curve.csv";
pub const DETECTIONS_CSV: &str = "detections.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

pub const LOSS_CURVE_CSV_HEADER: &str = "iter,mean_loss,mean_cls,mean_loc";

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum Failure {
    Other(String),
    Config(String),
    TrainAbort(String),
    Eval(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::TrainAbort(_) => 3,
            Failure::Eval(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Other(m) | Failure::Config(m) | Failure::TrainAbort(m) | Failure::Eval(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn other(context: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{context}: {e}"))
}

fn train_failure(e: Error) -> Failure {
    match e {
        Error::NonFinite { iter, detail, dump } => Failure::TrainAbort(match dump {
            Some(p) => format!(
                "training aborted at iteration {iter}: {detail}; diagnostics in {}",
                p.display()
            ),
            None => format!("training aborted at iteration {iter}: {detail}"),
        }),
        Error::Config(m) | Error::Argument(m) => Failure::Config(m),
        other => Failure::TrainAbort(format!("training aborted: {other}")),
    }
}

fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Config(format!("missing required config key `{key}`")))
}

fn load_dataset(path: &Path, manifest: &mut RunManifest) -> Result<Dataset, Failure> {
    let ds = read_dataset(path).map_err(other(&format!("cannot read dataset {}", path.display())))?;
    manifest.add_input(path)?;
    Ok(ds)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let name = required(&cfg.name, "name")?;
    cfg.dataset.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::new("gen", cfg.seed, cfg.render());
    for split in [Split::Train, Split::Test] {
        let ds = Dataset::generate(&cfg.dataset, split).map_err(|e| Failure::Config(e.to_string()))?;
        let file = format!("{name}.{}", split.name());
        write_dataset(&out.join(&file), &ds).map_err(other(&file))?;
        let ids = split.scene_ids(&cfg.dataset);
        println!("{file}: {} scenes (ids {}..{})", ds.len(), ids.start, ids.end);
        manifest.artifacts.push(file);
    }
    manifest.write(out)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let path = required(&cfg.dataset_path, "dataset")?;
    cfg.train.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::new("train", cfg.seed, cfg.render());
    let ds = load_dataset(path, &mut manifest)?;

    let trainer = match resume {
        Some(p) => {
            let snap = Snapshot::read(p).map_err(other(&format!("cannot read snapshot {}", p.display())))?;
            manifest.add_input(p)?;
            Trainer::resume(cfg.train.clone(), &ds, snap).map_err(train_failure)?
        }
        None => Trainer::new(cfg.train.clone(), &ds).map_err(train_failure)?,
    };
    let start = (trainer.iteration(), trainer.params().clone());
    let outcome = trainer.with_dump_dir(out).run(Some(out)).map_err(train_failure)?;

    write_records_csv(&out.join(ITERATIONS_CSV), &outcome.records).map_err(other(ITERATIONS_CSV))?;
    write_timing_csv(&out.join(TIMING_CSV), &outcome.records).map_err(other(TIMING_CSV))?;

    let mut curve = std::io::BufWriter::new(std::fs::File::create(out.join(LOSS_CURVE_CSV))?);
    writeln!(curve, "{LOSS_CURVE_CSV_HEADER}")?;
    for (iter, params) in std::iter::once(&start).chain(&outcome.snapshots) {
        let l = eval_mean_loss(params, &ds).map_err(train_failure)?;
        writeln!(curve, "{iter},{:?},{:?},{:?}", l.total, l.cls, l.loc)?;
        println!("iter {iter:>6}  mean loss {:.5}  (cls {:.5}, loc {:.5})", l.total, l.cls, l.loc);
    }
    curve.flush()?;

    manifest.artifacts.extend(outcome.snapshot_paths.iter().map(|p| file_name(p)));
    manifest.artifacts.extend([ITERATIONS_CSV, TIMING_CSV, LOSS_CURVE_CSV].map(String::from));
    manifest.write(out)?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, snapshot: &Path, out: &Path) -> Result<(), Failure> {
    let path = cfg
        .test_dataset_path
        .as_ref()
        .or(cfg.dataset_path.as_ref())
        .ok_or_else(|| Failure::Config("missing required config key `test_dataset` (or `dataset`)".into()))?;
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::new("eval", cfg.seed, cfg.render());
    let eval_err = |what: String| move |e: Error| Failure::Eval(format!("{what}: {e}"));
    let snap = Snapshot::read(snapshot).map_err(eval_err(format!("cannot read snapshot {}", snapshot.display())))?;
    manifest.add_input(snapshot)?;
    let ds = read_dataset(path).map_err(eval_err(format!("cannot read dataset {}", path.display())))?;
    manifest.add_input(path)?;

    let (report, output) =
        evaluate_dataset(&snap.params, &ds, &cfg.detect, cfg.iterative_bbox).map_err(eval_err("evaluation failed".into()))?;
    write_detections_csv(&out.join(DETECTIONS_CSV), &output.detections).map_err(other(DETECTIONS_CSV))?;
    write_report_csv(&out.join(REPORT_CSV), &report).map_err(other(REPORT_CSV))?;
    if output.degenerate > 0 {
        eprintln!("note: {} degenerate boxes dropped", output.degenerate);
    }
    println!("{report}");
    manifest.artifacts.extend([DETECTIONS_CSV, REPORT_CSV].map(String::from));
    manifest.write(out)?;
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ablation = cfg.ablation();
    ablation.base.validate().map_err(|e| Failure::Config(e.to_string()))?;
    if ablation.seeds.is_empty() {
        return Err(Failure::Config("ablation_seeds is empty".into()));
    }
    let _lock = DirLock::acquire(out)?;
    let mut manifest = RunManifest::new("ablate", cfg.seed, cfg.render());
    let (train_set, test_set) = match (&cfg.dataset_path, &cfg.test_dataset_path) {
        (Some(tr), Some(te)) => (load_dataset(tr, &mut manifest)?, load_dataset(te, &mut manifest)?),
        (None, None) => {
            let g = |s| Dataset::generate(&cfg.dataset, s).map_err(|e| Failure::Config(e.to_string()));
            (g(Split::Train)?, g(Split::Test)?)
        }
        _ => {
            return Err(Failure::Config(
                "set both `dataset` and `test_dataset`, or neither to generate them".into(),
            ))
        }
    };
    let rows = run_ablation_suite(&ablation, &train_set, &test_set).map_err(train_failure)?;
    write_ablation_csv(&out.join(ABLATION_CSV), &rows).map_err(other(ABLATION_CSV))?;
    println!("{:<18} {:>4} {:>8} {:>8} {:>9} {:>8} {:>8}", "variant", "seed", "mAP", "mAP+B", "loss", "fwd", "bwd");
    for r in &rows {
        println!(
            "{:<18} {:>4} {:>8.4} {:>8.4} {:>9.5} {:>8.1} {:>8.1}",
            r.variant, r.seed, r.final_map, r.final_map_iterative, r.final_mean_loss, r.mean_forward_rois, r.mean_backward_rois
        );
    }
    manifest.artifacts.push(ABLATION_CSV.into());
    manifest.write(out)?;
    Ok(())
}

