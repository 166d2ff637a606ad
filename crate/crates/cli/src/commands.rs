use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use log::{info, warn};
use rayon::prelude::*;

use hail_core::corpus::{load_event_log, split_leave_one_out, LogFormat, PreparedCorpus, SplitKind};
use hail_core::eval::{eval_cases, evaluate_split, pop_baseline, response_consistency_report, EvalReport};
use hail_core::gradcheck;
use hail_core::trainer::{load_checkpoint, save_checkpoint, RunStatus, Trainer};
use hail_core::{HailError, SplitSet, TrainConfig};

use crate::config::RunConfig;
use crate::{Command, Common, Failure};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "effective_config.txt";

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Prepare { common, format, header } => prepare(&common, format.as_deref(), header),
        Command::Train { common } => train(&common),
        Command::Eval { common, split, pop } => eval(&common, &split, pop),
        Command::Consistency { common, split } => consistency(&common, &split),
        Command::Gradcheck { common } => gradcheck(&common),
        Command::Sweep { common, alphas, betas, parallel } => sweep(&common, &alphas, &betas, parallel),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| Failure::usage(anyhow!("--{flag} is required for this command")))
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HailError::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| HailError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn parse_split(s: &str) -> Result<SplitKind, Failure> {
    match s {
        "valid" => Ok(SplitKind::Valid),
        "test" => Ok(SplitKind::Test),
        other => Err(Failure::usage(anyhow!("--split must be valid or test, got `{other}`"))),
    }
}

fn load_split(dir: &Path) -> Result<(PreparedCorpus, SplitSet), Failure> {
    let corpus = PreparedCorpus::read_dir(dir)?;
    let split = split_leave_one_out(&corpus.sequences);
    info!(
        "{} elements, {} train sequences, {} evaluation generators",
        corpus.vocab.size(),
        split.train.len(),
        split.test_targets.len()
    );
    Ok((corpus, split))
}

fn prepare(common: &Common, format: Option<&str>, header: bool) -> Outcome {
    let cfg = common.resolve().map_err(Failure::usage)?;
    let input = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let format = match format {
        Some(f) => f.parse::<LogFormat>().map_err(|e| Failure::usage(anyhow!(e)))?,
        None => LogFormat::from_path(input),
    };
    let log = load_event_log(input, format, header)?;
    let corpus = PreparedCorpus::from_log(&log, cfg.min_seq_len, cfg.train.max_len)?;
    corpus.write_dir(out)?;
    info!(
        "wrote {} elements and {} sequences to {}",
        corpus.vocab.size(),
        corpus.sequences.len(),
        out.display()
    );
    Ok(())
}

fn metrics_jsonl(trainer: &Trainer<'_>) -> String {
    trainer
        .log()
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

/// Trains (or resumes) and leaves the checkpoint, the metric log and the
/// effective config in `out`. Returns the final checkpoint path.
fn train_into(cfg: &RunConfig, split: &SplitSet, vocab_rows: usize, out: &Path, resume: Option<&Path>) -> Result<PathBuf, Failure> {
    fs::create_dir_all(out).map_err(|e| HailError::Io { path: out.to_path_buf(), source: e })?;
    write_file(&out.join(CONFIG_FILE), &cfg.render())?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            info!("resuming from {} at step {} (epoch {})", p.display(), ckpt.step, ckpt.epoch);
            Trainer::resume(cfg.train.clone(), split, ckpt)?
        }
        None => Trainer::new(cfg.train.clone(), split, vocab_rows)?,
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let status = trainer
        .run_with(None, |t, _| {
            save_checkpoint(&t.checkpoint(), &ckpt_path)?;
            fs::write(&metrics_path, metrics_jsonl(t)).map_err(|e| HailError::Io { path: metrics_path.clone(), source: e })
        })
        .map_err(Failure::from)?;
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    write_file(&metrics_path, &metrics_jsonl(&trainer))?;
    match status {
        RunStatus::StoppedEarly => info!("stopped early after {} steps", trainer.step()),
        _ => info!("finished after {} steps", trainer.step()),
    }
    Ok(ckpt_path)
}

fn train(common: &Common) -> Outcome {
    let cfg = common.resolve().map_err(Failure::usage)?;
    let data = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let (corpus, split) = load_split(data)?;
    let path = train_into(&cfg, &split, corpus.vocab.table_rows(), out, common.checkpoint.as_deref())?;
    println!("{}", path.display());
    Ok(())
}

/// Reads a checkpoint and checks it was trained on the given data.
fn load_trained(common: &Common, split: &SplitSet) -> Result<hail_core::Checkpoint, Failure> {
    let path = required(&common.checkpoint, "checkpoint")?;
    let ckpt = load_checkpoint(path)?;
    if ckpt.data_hash != hail_core::trainer::data_hash(split) {
        warn!("checkpoint was trained on different data than {}", common.data.as_deref().unwrap_or(Path::new("?")).display());
    }
    Ok(ckpt)
}

/// The evaluation view of a checkpoint: its own config with the peer index
/// and seed from the command line, if given.
fn eval_config_for(common: &Common, ckpt: &hail_core::Checkpoint) -> Result<TrainConfig, Failure> {
    let mut cfg = ckpt.config.clone();
    if let Some(p) = common.peer_index {
        cfg.peer_index = p;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(Failure::usage)?;
    let view = RunConfig { train: cfg.clone(), ..RunConfig::default() };
    info!("effective config (from checkpoint):\n{}", view.render().trim_end());
    Ok(cfg)
}

fn eval(common: &Common, split_name: &str, pop: bool) -> Outcome {
    let kind = parse_split(split_name)?;
    let data = required(&common.data, "data")?;
    let (corpus, split) = load_split(data)?;
    let ckpt = load_trained(common, &split)?;
    let cfg = eval_config_for(common, &ckpt)?;
    info!("evaluating peer {} on the {split_name} split", cfg.peer_index);
    let report = evaluate_split(&ckpt.model(), cfg.peer_index, &split, kind, &cfg.eval_config())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &common.out {
        write_file(&out.join(format!("eval_{split_name}_peer{}.json", cfg.peer_index)), &(json + "\n"))?;
    }
    if pop {
        let scorer = pop_baseline(&split.train, corpus.vocab.table_rows())?;
        let cases = eval_cases(&split, kind, corpus.vocab.size(), &cfg.eval_config())?;
        let report = EvalReport::from_cases(&scorer.rank_cases(&cases)?)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        println!("{json}");
        if let Some(out) = &common.out {
            write_file(&out.join(format!("eval_{split_name}_pop.json")), &(json + "\n"))?;
        }
    }
    Ok(())
}

fn consistency(common: &Common, split_name: &str) -> Outcome {
    let kind = parse_split(split_name)?;
    let data = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let (_, split) = load_split(data)?;
    let ckpt = load_trained(common, &split)?;
    let cfg = eval_config_for(common, &ckpt)?;
    let report = response_consistency_report(&ckpt.model(), &split, kind, &cfg.eval_config())?;
    let summary = serde_json::json!({
        "split": split_name,
        "inconsistent_fraction": report.inconsistent_fraction,
        "n_cases": report.n_cases,
        "peers": ckpt.shape.peers,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    println!("{text}");
    write_file(&out.join("consistency.json"), &(text + "\n"))?;
    write_file(&out.join("consistency_nll.csv"), &report.nll_csv())?;
    Ok(())
}

fn gradcheck(common: &Common) -> Outcome {
    let cfg = common.resolve().map_err(Failure::usage)?;
    let summary = gradcheck::run_all(cfg.train.seed)?;
    println!("{:<16} {:>8} {:>14}  worst", "class", "checked", "max rel error");
    for c in &summary.classes {
        println!("{:<16} {:>8} {:>14.3e}  {}", c.class, c.checked, c.max_rel_error, c.worst);
    }
    let id = summary.identity;
    println!(
        "positive-term logit gradient over {} instances: closed form max |diff| {:.3e}, finite differences max |diff| {:.3e}",
        id.instances, id.max_formula_error, id.max_fd_error
    );
    if summary.passed {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            error: anyhow!("gradcheck failed (tolerance {:e})", gradcheck::FD_TOLERANCE),
        })
    }
}

fn sweep(common: &Common, alphas: &[f64], betas: &[f64], parallel: bool) -> Outcome {
    let base = common.resolve().map_err(Failure::usage)?;
    let data = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let (corpus, split) = load_split(data)?;
    let betas = if betas.is_empty() { vec![base.train.beta] } else { betas.to_vec() };
    let mut cells = Vec::new();
    for &a in alphas {
        for &b in &betas {
            let mut cfg = base.clone();
            cfg.train.alpha = a;
            cfg.train.beta = b;
            cfg.validate().map_err(Failure::usage)?;
            cells.push(cfg);
        }
    }
    let run_cell = |cfg: &RunConfig| -> Result<PathBuf, Failure> {
        let (a, b) = (cfg.train.alpha, cfg.train.beta);
        let dir = out.join(format!("cell_alpha{a}_beta{b}"));
        let ckpt_path = train_into(cfg, &split, corpus.vocab.table_rows(), &dir, None)?;
        let ckpt = load_checkpoint(&ckpt_path)?;
        let report = evaluate_split(&ckpt.model(), cfg.train.peer_index, &split, SplitKind::Test, &cfg.train.eval_config())?;
        let path = out.join(format!("report_alpha{a}_beta{b}.json"));
        write_file(&path, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
        info!("alpha {a} beta {b}: hr@1 {:.4}", report.hr_1);
        Ok(path)
    };
    let results: Vec<Result<PathBuf, Failure>> = if parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    for r in results {
        let path = r?;
        println!("{}", path.display());
    }
    Ok(())
}
