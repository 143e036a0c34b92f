//! `attnpool` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnpool::checkpoint::Checkpoint;
use attnpool::checks;
use attnpool::datasets::{gen_colors, gen_triangles, ColorsConfig, Dataset, TrianglesConfig};
use attnpool::eval::{aggregate, evaluate_run, write_csv, write_run_csv, AucMode, EvalOptions, RunReport};
use attnpool::experiment::{ExperimentConfig, SeedRun};
use attnpool::graph::SplitName;
use attnpool::training::{occlusion_labels, parallel_map, EpochRecord, WeakLabels};
use attnpool::Model64;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "attnpool", version, about = "Attention pooling experiments on synthetic graph tasks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Colors,
    Triangles,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset (all splits plus metadata).
    Gen {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed of --config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "paper")]
        scale: Scale,
        /// Generator settings as JSON; replaces the --scale preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one run per seed of an experiment config and evaluate it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
        /// Suppress per-epoch progress.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Occlusion attention of a global-pool checkpoint, as weak labels.
    Occlude {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on every test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CSV report; a `.json` extension writes the full run report instead.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pooled")]
        auc_mode: AucArg,
        /// Graphs per test split scored by occlusion for global-pool models.
        #[arg(long)]
        occlusion_limit: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        print: bool,
    },
    /// Aggregate every report.json under a directory into mean/std rows.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        print: bool,
    },
    /// Run the gradient, oracle and invariant suites.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON summary path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AucArg {
    Pooled,
    PerGraph,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen { task, out, seed, scale, config, force } => {
            cmd_gen(task, &out, seed, scale, config.as_deref(), force)
        }
        Cmd::Train { config, data, out, jobs, force, quiet } => cmd_train(&config, &data, &out, jobs, force, quiet),
        Cmd::Occlude { ckpt, data, split, out, jobs } => cmd_occlude(&ckpt, &data, &split, &out, jobs),
        Cmd::Eval { ckpt, data, out, auc_mode, occlusion_limit, jobs, print } => {
            cmd_eval(&ckpt, &data, &out, auc_mode, occlusion_limit, jobs, print)
        }
        Cmd::Report { runs, out, print } => cmd_report(&runs, &out, print),
        Cmd::Selfcheck { seed, out, jobs } => cmd_selfcheck(seed, out.as_deref(), jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Requested workers, capped by `ATTNPOOL_THREADS` when set.
fn worker_count(requested: usize) -> Result<usize> {
    let cap = match std::env::var("ATTNPOOL_THREADS") {
        Ok(v) => v.parse::<usize>().with_context(|| format!("ATTNPOOL_THREADS={v:?} is not a count"))?.max(1),
        Err(_) => usize::MAX,
    };
    Ok(requested.max(1).min(cap))
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    Ok(dir.is_dir() && fs::read_dir(dir)?.next().is_some())
}

fn refuse_overwrite(dir: &Path, force: bool) -> Result<()> {
    if !force && is_nonempty_dir(dir)? {
        bail!("{} exists and is not empty (use --force to overwrite)", dir.display());
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(
    task: TaskArg,
    out: &Path,
    seed: Option<u64>,
    scale: Scale,
    config: Option<&Path>,
    force: bool,
) -> Result<()> {
    refuse_overwrite(out, force)?;
    let data = match task {
        TaskArg::Colors => {
            let mut cfg: ColorsConfig = match config {
                Some(p) => read_json(p)?,
                None => ColorsConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            gen_colors(&cfg)?
        }
        TaskArg::Triangles => {
            let mut cfg: TrianglesConfig = match (config, scale) {
                (Some(p), _) => read_json(p)?,
                (None, Scale::Paper) => TrianglesConfig::default(),
                (None, Scale::Desk) => TrianglesConfig::desk(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            gen_triangles(&cfg)?
        }
    };
    if is_nonempty_dir(out)? {
        fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    data.save(out)?;
    for split in &data.splits {
        eprintln!("{}: {} graphs", split.name.as_str(), split.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    experiment: &'a ExperimentConfig,
    tag: String,
    data: String,
    dataset_seed: u64,
    model: attnpool::model::ModelConfig,
    train: attnpool::training::TrainConfig,
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(config: &Path, data_dir: &Path, out: &Path, jobs: usize, force: bool, quiet: bool) -> Result<()> {
    let exp: ExperimentConfig = read_json(config)?;
    exp.validate()?;
    let data = Dataset::load(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    exp.check_dataset(&data)?;
    let weak = match &exp.weak_labels {
        Some(p) => {
            let w = WeakLabels::load(p).with_context(|| format!("loading weak labels {}", p.display()))?;
            w.validate_against(data.require(SplitName::Train)?)?;
            Some(w)
        }
        None => None,
    };
    for &seed in &exp.seeds {
        refuse_overwrite(&out.join(format!("seed_{seed}")), force)?;
    }
    let jobs = worker_count(jobs)?;
    let eval_jobs = if exp.seeds.len() == 1 { jobs } else { 1 };
    let tag = exp.tag();
    let runs = parallel_map(&exp.seeds, jobs, |&seed| {
        let run = exp.run_seed(&data, weak.as_ref(), seed, eval_jobs, |r| {
            if !quiet {
                let val = r.val_acc.map(|v| format!(" val {v:.2}")).unwrap_or_default();
                eprintln!("{tag} seed {seed} epoch {} loss {:.5}{val}", r.epoch + 1, r.train_loss);
            }
        })?;
        write_seed(&exp, &data, data_dir, out, &run).map_err(|e| attnpool::Error::Config(format!("{e:#}")))?;
        Ok(run)
    })?;
    for run in &runs {
        let accs: Vec<String> = run.report.accuracy.iter().map(|(s, a)| format!("{} {a:.2}", s.as_str())).collect();
        let auc = run.report.attn_auc.map(|a| format!(" attn_auc {a:.2}")).unwrap_or_default();
        eprintln!("{tag} seed {}: {}{auc}", run.seed, accs.join(", "));
    }
    Ok(())
}

fn write_seed(exp: &ExperimentConfig, data: &Dataset, data_dir: &Path, out: &Path, run: &SeedRun) -> Result<()> {
    let dir = out.join(format!("seed_{}", run.seed));
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let train = exp.train_config(run.seed)?;
    let resolved = ResolvedConfig {
        experiment: exp,
        tag: exp.tag(),
        data: data_dir.display().to_string(),
        dataset_seed: data.info.seed,
        model: run.outcome.model.config.clone(),
        train: train.clone(),
    };
    write_json(&dir.join("config.json"), &resolved)?;
    let final_loss = run.outcome.history.last().map(|h| h.train_loss);
    Checkpoint::from_model(
        &run.outcome.model,
        data.info.task,
        &exp.tag(),
        data.info.label_range,
        Some(&train),
        final_loss,
    )
    .save(&dir.join("checkpoint.json"))?;
    write_history(&dir.join("history.csv"), &run.outcome.history)?;
    write_json(&dir.join("report.json"), &run.report)?;
    write_run_csv(&run.report, &dir.join("report.csv"))?;
    write_json(&dir.join("timing.json"), &serde_json::json!({ "train_secs": run.train_secs }))?;
    Ok(())
}

fn load_checked(ckpt: &Path, data_dir: &Path) -> Result<(Checkpoint, Model64, Dataset)> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = Dataset::load(data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    if ck.task != data.info.task {
        bail!("checkpoint is for {}, dataset holds {}", ck.task, data.info.task);
    }
    if ck.model.in_dim != data.info.feature_dim {
        bail!("checkpoint expects {} input features, dataset has {}", ck.model.in_dim, data.info.feature_dim);
    }
    let model = ck.to_model()?;
    Ok((ck, model, data))
}

fn cmd_occlude(ckpt: &Path, data_dir: &Path, split: &str, out: &Path, jobs: usize) -> Result<()> {
    let (_, model, data) = load_checked(ckpt, data_dir)?;
    let name = SplitName::parse(split).with_context(|| format!("unknown split {split:?}"))?;
    let split = data.require(name)?;
    let labels = occlusion_labels(&model, split, worker_count(jobs)?)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    labels.save(out)?;
    eprintln!("{} weak labels for {} written to {}", labels.alphas.len(), name.as_str(), out.display());
    Ok(())
}

fn cmd_eval(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    auc_mode: AucArg,
    occlusion_limit: Option<usize>,
    jobs: usize,
    print: bool,
) -> Result<()> {
    let (ck, model, data) = load_checked(ckpt, data_dir)?;
    let opts = EvalOptions {
        auc_mode: match auc_mode {
            AucArg::Pooled => AucMode::Pooled,
            AucArg::PerGraph => AucMode::PerGraph,
        },
        occlusion_limit,
        jobs: worker_count(jobs)?,
    };
    let seed = ck.train.as_ref().map_or(0, |t| t.seed);
    let report = evaluate_run(&model, &data, &ck.tag, seed, &opts)?;
    if out.extension().is_some_and(|e| e == "json") {
        write_json(out, &report)?;
    } else {
        write_run_csv(&report, out)?;
    }
    if print {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            find_reports(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            found.push(path);
        }
    }
    Ok(())
}

fn cmd_report(runs: &Path, out: &Path, print: bool) -> Result<()> {
    if !runs.is_dir() {
        bail!("{} is not a directory", runs.display());
    }
    let mut paths = Vec::new();
    find_reports(runs, &mut paths)?;
    if paths.is_empty() {
        bail!("no runs found under {} (expected */report.json)", runs.display());
    }
    let reports: Vec<RunReport> = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let agg = aggregate(&reports)?;
    write_csv(&agg, out)?;
    if print {
        for r in &agg.rows {
            println!(
                "{:<28} {:<14} {:<9} {:>7.2} ± {:>6.2}  (n={})",
                r.model, r.subset, r.metric, r.mean, r.std, r.n_seeds
            );
        }
    }
    eprintln!("aggregated {} runs into {}", reports.len(), out.display());
    Ok(())
}

fn cmd_selfcheck(seed: u64, out: Option<&Path>, jobs: usize) -> Result<()> {
    let summary = checks::run_all(seed, worker_count(jobs)?);
    for c in &summary.checks {
        eprintln!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, c.suite, c.name, c.detail);
    }
    if let Some(path) = out {
        write_json(path, &summary)?;
    }
    let failed = summary.failures().count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", summary.checks.len());
    }
    eprintln!("all {} checks passed in {:.1}s", summary.checks.len(), summary.runtime_secs);
    Ok(())
}
