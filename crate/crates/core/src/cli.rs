//! Command-line front end: task generation, training, metric reports and
//! checkpoint diagnostics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    ablation_rows, check_sequence, checkpoint_collision, frob_rows, heatmap_export, registry_from, write_ablation_csv,
    write_collision_csv, write_frob_csv, write_heatmap_csv,
};
use crate::bench::{gen_tasks, metrics_report, AccuracyMatrix, SyntheticTaskSpec, TaskDataset};
use crate::checkpoint::{config_digest, to_json_string, AdapterCheckpoint};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{build_backbone, run_sequence_with, SequenceOutput, TrainConfig};

/// Everything a run needs, read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed (backbone, pools, batches).
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tasks: SyntheticTaskSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    /// Training config with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Digest of everything that affects results; the output directory is
    /// left out.
    pub fn digest(&self) -> Result<u64> {
        config_digest(&Self {
            out_dir: None,
            ..self.clone()
        })
    }
}

/// Generated tasks together with the generator settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskBundle {
    pub spec: SyntheticTaskSpec,
    pub tasks: Vec<TaskDataset>,
}

impl TaskBundle {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bundle: Self = serde_json::from_str(&text)?;
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let first = self.tasks.first().ok_or_else(|| Error::config("task bundle is empty"))?;
        let d = first.rotation.rows();
        for (t, task) in self.tasks.iter().enumerate() {
            let ok = task.task_id == t + 1
                && task.centers.len() == task.classes
                && task.rotation.as_slice().len() == d * d
                && task.centers.iter().all(|c| c.len() == d)
                && task
                    .train
                    .iter()
                    .chain(&task.test)
                    .all(|s| s.x.len() == d && s.label < task.classes);
            if !ok {
                return Err(Error::config(format!("task bundle: task {} is malformed", t + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "r1pool", version, about = "Rank-1 expert pool continual learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task bundle.
    GenTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `tasks.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on every task in order and write checkpoints and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print Transfer / Average / Last for an accuracy matrix CSV.
    Report {
        #[arg(long)]
        matrix: PathBuf,
    },
    /// Diagnostics over saved checkpoints.
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Checkpoint files for tasks 1..n, in order.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Per-expert Frobenius norms in ascending order.
    Frob(CheckpointArgs),
    /// Accuracy change from zeroing ranks of the last checkpoint at merge.
    Ablate {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        /// Zero adjacent pairs instead of single ranks.
        #[arg(long)]
        pairs: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collision of each task against the tasks before it.
    Collision(CheckpointArgs),
    /// Activation counts per task, layer and expert.
    Heatmap(CheckpointArgs),
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenTasks { config, out, seed } => cmd_gen_tasks(&config, &out, seed),
        Command::Train {
            config,
            tasks,
            out_dir,
            seed,
        } => cmd_train(&config, &tasks, out_dir.as_deref(), seed).map(|_| ()),
        Command::Report { matrix } => cmd_report(&matrix, stdout),
        Command::Analyze(a) => cmd_analyze(a, stdout),
    }
}

pub fn cmd_gen_tasks(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.tasks.seed = s;
    }
    let bundle = TaskBundle {
        spec: cfg.tasks,
        tasks: gen_tasks(&cfg.tasks)?,
    };
    write_file(out, to_json_string(&bundle)?.as_bytes())
}

/// Returns the output directory written to.
pub fn cmd_train(config: &Path, tasks: &Path, out_dir: Option<&Path>, seed: Option<u64>) -> Result<PathBuf> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::config("no output directory: pass --out-dir or set out_dir"))?;
    let bundle = TaskBundle::load(tasks)?;
    train_to_dir(&cfg, &bundle.tasks, &out)?;
    Ok(out)
}

/// Runs the task sequence and writes `task_{t}.json`, `matrix.csv`,
/// `metrics.json` and `collision.csv` into `out`.
pub fn train_to_dir(cfg: &RunConfig, tasks: &[TaskDataset], out: &Path) -> Result<SequenceOutput> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let digest = cfg.digest()?;

    let mut collision = Vec::new();
    let output = run_sequence_with(tasks, &cfg.train_config(), &cfg.model, |ck, result| {
        let ck = ck.clone().with_digest(digest);
        ck.save(&out.join(format!("task_{}.json", ck.task_id)))?;
        collision.extend(result.collision.iter().map(|p| (result.task_id, p.step, p.value)));
        Ok(())
    })?;

    write_file(&out.join("matrix.csv"), output.matrix.to_csv_string().as_bytes())?;
    let report = metrics_report(&output.matrix.rounded());
    let mut metrics = serde_json::to_string_pretty(&report)?;
    metrics.push('\n');
    write_file(&out.join("metrics.json"), metrics.as_bytes())?;
    let mut buf = Vec::new();
    write_collision_csv(&mut buf, &collision)?;
    write_file(&out.join("collision.csv"), &buf)?;
    Ok(output)
}

pub fn cmd_report(matrix: &Path, stdout: &mut dyn Write) -> Result<()> {
    let file = fs::File::open(matrix).map_err(|e| Error::io(matrix, e))?;
    let m = AccuracyMatrix::read_csv(file)?;
    let text = serde_json::to_string_pretty(&metrics_report(&m))?;
    writeln!(stdout, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_analyze(cmd: Analyze, stdout: &mut dyn Write) -> Result<()> {
    let mut buf = Vec::new();
    let out = match cmd {
        Analyze::Frob(args) => {
            let ckpts = load_checkpoints(&args.checkpoint)?;
            let rows: Vec<_> = ckpts.iter().map(frob_rows).collect::<Result<Vec<_>>>()?.concat();
            write_frob_csv(&mut buf, &rows)?;
            args.out
        }
        Analyze::Ablate {
            ckpt,
            config,
            tasks,
            pairs,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ckpts = load_checkpoints(&ckpt.checkpoint)?;
            check_sequence(&ckpts)?;
            let digest = format!("{:016x}", cfg.digest()?);
            if let Some(bad) = ckpts.iter().find(|c| c.config_digest != digest) {
                return Err(Error::config(format!(
                    "checkpoint for task {} was trained with a different config (digest {} vs {digest})",
                    bad.task_id, bad.config_digest
                )));
            }
            let bundle = TaskBundle::load(&tasks)?;
            let t = ckpts.len();
            let task = bundle
                .tasks
                .get(t - 1)
                .ok_or_else(|| Error::config(format!("task bundle has no task {t}")))?;
            let pristine = build_backbone(cfg.seed, task.rotation.rows(), &cfg.model);
            let protos = task.prototypes(&pristine)?;
            let rows = ablation_rows(&pristine, &ckpts, &protos, &task.test, pairs)?;
            write_ablation_csv(&mut buf, &rows)?;
            ckpt.out
        }
        Analyze::Collision(args) => {
            let ckpts = load_checkpoints(&args.checkpoint)?;
            check_sequence(&ckpts)?;
            let mut rows = Vec::new();
            for t in 0..ckpts.len() {
                let reg = registry_from(&ckpts[..t])?;
                rows.push((ckpts[t].task_id, checkpoint_collision(&reg, &ckpts[t])?));
            }
            write_task_values(&mut buf, &rows)?;
            args.out
        }
        Analyze::Heatmap(args) => {
            let ckpts = load_checkpoints(&args.checkpoint)?;
            check_sequence(&ckpts)?;
            write_heatmap_csv(&mut buf, &heatmap_export(&ckpts))?;
            args.out
        }
    };
    match out {
        Some(path) => write_file(&path, &buf),
        None => stdout.write_all(&buf).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn write_task_values(buf: &mut Vec<u8>, rows: &[(usize, f64)]) -> Result<()> {
    writeln!(buf, "task_id,value").map_err(|e| Error::io("<csv>", e))?;
    for (t, v) in rows {
        writeln!(buf, "{t},{v:.6}").map_err(|e| Error::io("<csv>", e))?;
    }
    Ok(())
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<AdapterCheckpoint>> {
    paths.iter().map(|p| AdapterCheckpoint::load(p)).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"lrr": 0.1}}"#).unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.exit_code(), 2);
        assert!(msg.contains("train") && msg.contains("lrr"), "{msg}");
        let err = RunConfig::from_json(r#"{"sed": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sed"));
    }

    #[test]
    fn empty_config_is_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"retain": 20}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("retain"));
    }

    #[test]
    fn digest_ignores_out_dir_but_not_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: Some("x".into()),
            ..a.clone()
        };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }
}
