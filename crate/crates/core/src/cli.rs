//! The `gen`, `train`, `eval` and `active` commands.
//!
//! Every command writes into a staging directory next to `--out` and
//! renames it into place only once all files are complete.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::active::{CycleRecord, Policy};
use crate::checkpoint::{load_into, read_params, write_params};
use crate::config::{Arm, ConfigError, ExperimentConfig, Task};
use crate::dataset::{DataError, Dataset};
use crate::experiment::{self, evaluate, init_network, ExperimentError, Result, StepLog};
use crate::metrics::{self, Report};
use crate::seeds::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Train,
    Eval,
    Active,
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub arm: Option<Arm>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// The config file (or the counting defaults) with command-line overrides.
pub fn load_config(opts: &Options) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::defaults(Task::Counting),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(arm) = opts.arm {
        cfg.arm = arm;
    }
    cfg.validate()?;
    for (key, path) in [("data", &cfg.data), ("checkpoint", &cfg.checkpoint), ("predictions", &cfg.predictions)] {
        if let Some(p) = path {
            if !p.exists() {
                return Err(ConfigError::Value {
                    key: key.into(),
                    reason: format!("{} does not exist", p.display()),
                }
                .into());
            }
        }
    }
    Ok(cfg)
}

/// An output directory that only appears once [`Staging::commit`] runs.
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path) -> Result<Self> {
        let name = dest
            .file_name()
            .ok_or_else(|| ConfigError::Invalid(format!("bad output path {}", dest.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = dest.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    /// Replaces any existing `dest` with the staged directory.
    pub fn commit(mut self) -> Result<()> {
        if self.dest.exists() {
            let old = self.tmp.with_extension("old");
            fs::rename(&self.dest, &old).map_err(io_err(&self.dest))?;
            fs::rename(&self.tmp, &self.dest).map_err(io_err(&self.dest))?;
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        } else {
            fs::rename(&self.tmp, &self.dest).map_err(io_err(&self.dest))?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 48);
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_text(path, &text)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn report_row(split: &str, r: &Report) -> String {
    format!("{split},{},{},{},{}", r.mae, r.mse, opt(r.lcc), opt(r.srocc))
}

/// Every derived seed a run uses, for the record.
fn seeds_text(cfg: &ExperimentConfig) -> String {
    let mut s = format!("run = {}\n", cfg.seed);
    for (name, stream) in [
        ("init", Stream::Init),
        ("scenes", Stream::Scenes),
        ("crops", Stream::Crops),
        ("batches", Stream::Batches),
        ("distortion", Stream::Distortion),
        ("certainty", Stream::Certainty),
        ("selection", Stream::Selection),
        ("split", Stream::Split),
    ] {
        s.push_str(&format!("{name} = {}\n", seeds::derive_seed(cfg.seed, stream as u64)));
    }
    s
}

fn dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(match &cfg.data {
        Some(dir) => Dataset::load(dir, cfg)?,
        None => Dataset::generate(cfg)?,
    })
}

fn write_log(path: &Path, log: &[StepLog], every_step: bool) -> Result<()> {
    let last = log.len().saturating_sub(1);
    let rows: Vec<String> = log
        .iter()
        .filter(|l| every_step || l.step % 100 == 0 || l.step == last)
        .map(|l| format!("{},{},{},{},{}", l.step, l.regression, l.ranking, l.total, l.active_pairs))
        .collect();
    write_rows(path, "step,L_reg,L_rank,L,active_pairs", &rows)
}

/// Runs one command; returns a short human-readable summary.
pub fn run(cmd: Command, opts: &Options) -> Result<String> {
    let cfg = load_config(opts)?;
    let staging = Staging::new(&opts.out)?;
    let dir = staging.path().to_path_buf();
    write_text(&dir.join("config.txt"), &cfg.render())?;
    write_text(&dir.join("seeds.txt"), &seeds_text(&cfg))?;
    let summary = match cmd {
        Command::Gen => gen(&cfg, &dir)?,
        Command::Train => train(&cfg, &dir)?,
        Command::Eval => eval(&cfg, &dir)?,
        Command::Active => active(&cfg, &dir)?,
    };
    staging.commit()?;
    Ok(summary)
}

fn gen(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    let data = Dataset::generate(cfg)?;
    data.save(dir)?;
    Ok(format!(
        "labeled={} test={} unlabeled={} groups={} pairs={}",
        data.labeled.len(),
        data.test.len(),
        data.unlabeled.len(),
        data.groups.len(),
        data.pair_count()
    ))
}

fn write_eval(dir: &Path, splits: &[(&str, &[f64], Report)], truth: &[(&str, Vec<f64>)]) -> Result<()> {
    let rows: Vec<String> = splits.iter().map(|(s, _, r)| report_row(s, r)).collect();
    write_rows(&dir.join("metrics.csv"), "split,mae,mse,lcc,srocc", &rows)?;
    let mut preds = Vec::new();
    for ((split, pred, _), (_, y)) in splits.iter().zip(truth) {
        for (i, (p, t)) in pred.iter().zip(y).enumerate() {
            preds.push(format!("{split},{i},{t},{p}"));
        }
    }
    write_rows(&dir.join("predictions.csv"), "split,id,truth,prediction", &preds)
}

fn train(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let (net, log) = experiment::train_arm(cfg, &data)?;
    write_log(&dir.join("train_log.csv"), &log, cfg.audit)?;
    let ckpt = dir.join("checkpoint.rpk");
    let file = fs::File::create(&ckpt).map_err(io_err(&ckpt))?;
    let mut w = std::io::BufWriter::new(file);
    write_params(net.params(), &mut w)?;
    w.flush().map_err(io_err(&ckpt))?;
    let (p_train, r_train) = evaluate(&net, &data.labeled)?;
    let (p_test, r_test) = evaluate(&net, &data.test)?;
    write_eval(
        dir,
        &[("train", &p_train, r_train), ("test", &p_test, r_test)],
        &[
            ("train", data.labeled.iter().map(|s| s.value).collect()),
            ("test", data.test.iter().map(|s| s.value).collect()),
        ],
    )?;
    Ok(format!(
        "arm={} steps={} train_mae={} test_mae={}",
        cfg.arm,
        log.len(),
        r_train.mae,
        r_test.mae
    ))
}

fn read_predictions(path: &Path, n: usize) -> Result<Vec<f64>> {
    let bad = |reason: String| {
        ExperimentError::Data(DataError::Format {
            path: path.display().to_string(),
            reason,
        })
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = vec![None; n];
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let id: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("bad id in {rec:?}")))?;
        let p: f64 = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad prediction in {rec:?}")))?;
        *out.get_mut(id).ok_or_else(|| bad(format!("id {id} beyond the {n} test images")))? = Some(p);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| bad(format!("no prediction for test image {i}"))))
        .collect()
}

fn eval(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    let data = dataset(cfg)?;
    let truth = |s: &[crate::dataset::Sample]| s.iter().map(|s| s.value).collect::<Vec<f64>>();
    if let Some(path) = &cfg.predictions {
        let pred = read_predictions(path, data.test.len())?;
        let report = metrics::report(&truth(&data.test), &pred)?;
        write_eval(dir, &[("test", &pred, report)], &[("test", truth(&data.test))])?;
        return Ok(format!("test_mae={}", report.mae));
    }
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("eval needs `checkpoint` or `predictions`".into()))?;
    let file = fs::File::open(ckpt).map_err(io_err(ckpt))?;
    let params = read_params(std::io::BufReader::new(file))?;
    let mut net = init_network(cfg, 0)?;
    load_into(net.params_mut(), &params)?;
    let (p_train, r_train) = evaluate(&net, &data.labeled)?;
    let (p_test, r_test) = evaluate(&net, &data.test)?;
    write_eval(
        dir,
        &[("train", &p_train, r_train), ("test", &p_test, r_test)],
        &[("train", truth(&data.labeled)), ("test", truth(&data.test))],
    )?;
    Ok(format!("train_mae={} test_mae={}", r_train.mae, r_test.mae))
}

pub fn active_rows(history: &[CycleRecord]) -> Vec<String> {
    history
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.cycle,
                r.labeled_fraction,
                r.policy,
                r.report.mae,
                r.report.mse,
                opt(r.report.lcc),
                opt(r.report.srocc),
                opt(r.mean_certainty)
            )
        })
        .collect()
}

pub const ACTIVE_HEADER: &str = "cycle,labeled_fraction,policy,MAE,MSE,LCC,SROCC,mean_certainty";

fn active(cfg: &ExperimentConfig, dir: &Path) -> Result<String> {
    if cfg.arm != Arm::Active {
        return Err(ConfigError::Invalid(format!("the active command needs arm = active, not {}", cfg.arm)).into());
    }
    let data = dataset(cfg)?;
    let policies = match cfg.active_policy {
        Some(p) => vec![p],
        None => vec![Policy::Certainty, Policy::Random],
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for p in policies {
        let history = experiment::run_active(cfg, &data, p)?;
        let last = history.last().expect("at least one cycle");
        summary.push(format!("{p}_final_mae={}", last.report.mae));
        rows.extend(active_rows(&history));
    }
    write_rows(&dir.join("active.csv"), ACTIVE_HEADER, &rows)?;
    Ok(summary.join(" "))
}
