use std::path::{Path, PathBuf};

use octave_core::checkpoint::{write_atomic, Checkpoint};
use octave_core::data::{add_scribbles, read_labels, synth_dataset, write_labels, DataLayout, Dataset, MANIFEST};
use octave_core::datamodel::{DenseMask, Grid, TrainConfig};
use octave_core::evaluation::{evaluate_run, summarize_folds, FoldSummary, RunReport};
use octave_core::scribble::{make_scribble, select_available};
use octave_core::seed::DEFAULT_SEED;
use octave_core::training::{train_from_layout, RunManifest, BEST_CHECKPOINT};
use octave_core::{par, Error};
use serde::{Deserialize, Serialize};

use crate::{Command, RunArgs};

pub const SEED_ENV: &str = "OCTAVE_SEED";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    ConfigMissing(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::ConfigMissing(_) => "config-missing",
            CliError::Core(e) => e.category(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigMissing(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, count, size, seed } => synth(&out, count, size, resolve_seed(seed, None)?),
        Command::ScribbleGen {
            input,
            out,
            availability,
            seed,
        } => scribble_gen(&input, &out, availability, resolve_seed(seed, None)?),
        Command::Train { run, out, resume } => train(&run, &out, resume),
        Command::Eval { checkpoint, data, out } => {
            let report = evaluate(&checkpoint, &DataLayout::load(&data)?)?;
            write_json(&out, &report)?;
            println!("mean test dice {:.4} over {} run(s)", report.folds.mean_over_folds, report.runs.len());
            Ok(())
        }
        Command::Report { input, plots } => crate::report::write(&input, &plots),
        Command::Sweep { run, out, availability } => sweep(&run, &out, &availability),
    }
}

/// `--seed`, then the config file, then `OCTAVE_SEED`, then the default.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("{SEED_ENV}={v:?}: {e}")).into()),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn load_config(args: &RunArgs) -> Result<TrainConfig> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::ConfigMissing("--config <file> is required".into()))?;
    if !path.is_file() {
        return Err(CliError::ConfigMissing(format!("{} not found", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = TrainConfig::load(path)?;
    let file_seed = table.contains_key("seed").then_some(cfg.seed);
    cfg.seed = resolve_seed(args.seed, file_seed)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(f) = args.fold {
        cfg.fold = f;
    }
    if let Some(p) = args.scribbles {
        cfg.availability = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(out: &Path, count: usize, (h, w): (usize, usize), seed: u64) -> Result<()> {
    let mut ds = synth_dataset(count, h, w, seed)?;
    add_scribbles(&mut ds, false)?;
    mkdir(out)?;
    ds.save(out)?;
    println!("wrote {count} phantoms ({h}x{w}, seed {seed}) to {}", out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AvailabilityRecord {
    pub availability: f64,
    pub seed: u64,
    pub total: usize,
    pub selected: Vec<String>,
}

fn scribble_gen(input: &Path, out: &Path, p: f64, seed: u64) -> Result<()> {
    let items: Vec<(String, Option<String>, Grid<u8>)> = if input.join(MANIFEST).is_file() {
        Dataset::load(input)?
            .samples
            .into_iter()
            .map(|s| {
                let m = s.mask()?.labels().clone();
                Ok((s.id, s.tag, m))
            })
            .collect::<std::result::Result<_, Error>>()?
    } else {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        files
            .iter()
            .map(|f| {
                let id = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                Ok((id, None, read_labels(f)?))
            })
            .collect::<std::result::Result<_, Error>>()?
    };
    if items.is_empty() {
        return Err(Error::Domain(format!("no masks found in {}", input.display())).into());
    }
    let tags: Vec<Option<String>> = items.iter().map(|(_, t, _)| t.clone()).collect();
    let keep = select_available(&tags, p, seed)?;
    let chosen: Vec<&(String, Option<String>, Grid<u8>)> =
        items.iter().zip(&keep).filter(|(_, &k)| k).map(|(it, _)| it).collect();

    mkdir(out)?;
    let written = par::map(&chosen, |(id, _, labels)| -> std::result::Result<(), Error> {
        let scribble = make_scribble(&DenseMask::new(labels.clone(), 2)?)?;
        write_labels(&out.join(format!("{id}.png")), scribble.labels())
    });
    for w in written {
        w?;
    }
    let record = AvailabilityRecord {
        availability: p,
        seed,
        total: items.len(),
        selected: chosen.iter().map(|(id, _, _)| id.clone()).collect(),
    };
    write_json(&out.join("availability.json"), &record)?;
    println!("wrote {} of {} scribbles to {}", chosen.len(), items.len(), out.display());
    Ok(())
}

fn train_one(cfg: &TrainConfig, layout: &DataLayout, out: &Path, resume: bool) -> Result<(Option<f64>, RunManifest)> {
    mkdir(out)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    let (outcome, manifest) = train_from_layout(layout, cfg, out, resume)?;
    Ok((outcome.best_dice, manifest))
}

fn train(args: &RunArgs, out: &Path, resume: bool) -> Result<()> {
    let cfg = load_config(args)?;
    let layout = DataLayout::load(&args.data)?;
    match train_one(&cfg, &layout, out, resume)?.0 {
        Some(d) => println!("best validation dice {d:.4} after {} epochs", cfg.epochs),
        None => println!("no epochs run; wrote the initial checkpoint"),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: String,
    pub fold: usize,
    pub epoch: usize,
    pub best_val_dice: Option<f64>,
    pub report: RunReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<EvalRun>,
    pub folds: FoldSummary,
}

/// A checkpoint file, a run directory holding best.ckpt, or a directory of
/// run directories (one per fold).
fn find_checkpoints(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if path.join(BEST_CHECKPOINT).is_file() {
        return Ok(vec![path.join(BEST_CHECKPOINT)]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path().join(BEST_CHECKPOINT)))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(Error::Domain(format!("no {BEST_CHECKPOINT} under {}", path.display())).into());
    }
    Ok(found)
}

fn evaluate(path: &Path, layout: &DataLayout) -> Result<EvalReport> {
    let mut runs = Vec::new();
    for ck_path in find_checkpoints(path)? {
        let (ck, restored) = Checkpoint::load_restored(&ck_path)?;
        let cfg = &ck.config;
        let split = layout.split(cfg.test_fraction, cfg.folds, cfg.fold, cfg.seed)?;
        let samples = split
            .test
            .iter()
            .map(|id| layout.sample(id))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let report = evaluate_run(&restored.segmentor, &samples)?;
        runs.push(EvalRun {
            checkpoint: ck_path.display().to_string(),
            fold: cfg.fold,
            epoch: ck.epoch,
            best_val_dice: ck.best_dice,
            report,
        });
    }
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(EvalReport {
        folds: summarize_folds(&reports)?,
        runs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub availability: f64,
    pub run_dir: String,
    pub expected_scribbled: usize,
    pub scribbled: usize,
    pub best_val_dice: Option<f64>,
    pub test_mean_dice: f64,
}

pub fn sweep_dir_name(p: f64) -> String {
    format!("availability-{p:.2}")
}

fn sweep(args: &RunArgs, out: &Path, grid: &[f64]) -> Result<()> {
    if args.scribbles.is_some() {
        return Err(Error::Config("sweep takes --availability, not --scribbles".into()).into());
    }
    let base = load_config(args)?;
    let layout = DataLayout::load(&args.data)?;
    let mut entries = Vec::new();
    for &p in grid {
        let cfg = TrainConfig {
            availability: p,
            ..base.clone()
        };
        cfg.validate()?;
        let dir = out.join(sweep_dir_name(p));
        let (best, manifest) = train_one(&cfg, &layout, &dir, false)?;
        let report = evaluate(&dir, &layout)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
        println!(
            "availability {p}: {} of {} weak samples scribbled, test dice {:.4}",
            manifest.scribbled(),
            manifest.weak.len(),
            report.folds.mean_over_folds
        );
        entries.push(SweepEntry {
            availability: p,
            run_dir: dir.display().to_string(),
            expected_scribbled: manifest.expected_scribbled,
            scribbled: manifest.scribbled(),
            best_val_dice: best,
            test_mean_dice: report.folds.mean_over_folds,
        });
    }
    write_json(&out.join("sweep.json"), &entries)
}
