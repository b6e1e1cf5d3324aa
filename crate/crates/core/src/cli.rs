//! Experiment runner behind the `sinreq` binary: `train`, `eval`, `sweep` and
//! `paired`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analyze::{self, RunRecord};
use crate::config::ExperimentConfig;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{self, TrainMode};

/// Histograms cover the level range; values outside land in the edge bins.
pub const HISTOGRAM_RANGE: (f64, f64) = (-1.0, 1.0);

#[derive(Debug, Parser)]
#[command(name = "sinreq", version, about = "Quantization-aware training with a sinusoidal weight regularizer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics, histograms, trajectories and checkpoints.
    Train { config: PathBuf },
    /// Print pre-/post-snap validation accuracy of a checkpoint as JSON.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Run one experiment per value of a training parameter.
    Sweep {
        config: PathBuf,
        /// `<key>=<v1>,<v2>,...` with key one of lambda_q, lambda_wd, learning_rate, seed.
        #[arg(long)]
        vary: String,
    },
    /// Run the experiment with and without the regularizer on the same seed.
    Paired { config: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantizedAccuracy {
    pub pre_snap_accuracy: f64,
    pub post_snap_accuracy: f64,
}

impl QuantizedAccuracy {
    pub fn drop(&self) -> f64 {
        self.pre_snap_accuracy - self.post_snap_accuracy
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub records: Vec<RunRecord>,
    pub quantized: QuantizedAccuracy,
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_labels(cfg: &ExperimentConfig, data: &Splits) -> Result<()> {
    let classes = cfg.model.num_classes()?;
    let seen = data.train.num_classes().max(data.val.num_classes());
    if seen > classes {
        return Err(Error::Config(format!(
            "dataset has labels up to {} but the model outputs {classes} classes",
            seen - 1
        )));
    }
    Ok(())
}

/// Runs a full experiment. Relative dataset, checkpoint and output paths are
/// resolved against `base_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = cfg.dataset.load(base_dir)?;
    check_labels(cfg, &data)?;
    let cfg = cfg.resolved(data.train.len());
    let out = base_dir.join(&cfg.output_dir);
    create_dir(&out)?;
    write(&out.join("config.json"), cfg.to_json())?;

    let mut model = match &cfg.train.init_checkpoint {
        Some(p) => Model::load(cfg.model.clone(), &base_dir.join(p))?,
        None => Model::init(cfg.model.clone(), cfg.train.seed)?,
    };
    let train_cfg = cfg.train_config(&model)?;

    if cfg.train.pretrain_epochs > 0 {
        let pre = train::TrainConfig {
            mode: TrainMode::FpBaseline,
            epochs: cfg.train.pretrain_epochs,
            ..train_cfg.clone()
        };
        train::fit(&mut model, &data, &pre).map_err(|e| e.error)?;
        model.save(&out.join("pretrained.ckpt"))?;
    }

    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let bins = cfg.train.histogram_bins;
    let (lo, hi) = HISTOGRAM_RANGE;
    let result = train::fit_with(&mut model, &data, &train_cfg, |m, rec| {
        m.save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
        for (name, p) in m.params() {
            let counts = analyze::histogram(p.weight.data(), bins, lo, hi)?;
            write(
                &out.join(format!("hist_{name}_{}.csv", rec.epoch)),
                analyze::histogram_csv(&counts, lo, hi),
            )?;
        }
        Ok(())
    });
    let layers: Vec<String> = train_cfg.regularizer.layers().keys().cloned().collect();
    let (records, failure) = match result {
        Ok(r) => (r, None),
        Err(e) => (e.records, Some(e.error)),
    };
    write(&out.join("metrics.csv"), analyze::metrics_csv(&layers, &records))?;
    if let Some(e) = failure {
        return Err(e);
    }

    let sampler_indices: Vec<(String, Vec<usize>)> = records
        .first()
        .map(|r| {
            r.trajectories
                .iter()
                .map(|(n, pts)| (n.clone(), pts.iter().map(|(i, _)| *i).collect()))
                .collect()
        })
        .unwrap_or_default();
    for (name, idx) in &sampler_indices {
        write(
            &out.join(format!("traj_{name}.csv")),
            analyze::trajectory_csv(name, idx, &records),
        )?;
    }
    model.save(&out.join("model.ckpt"))?;

    let (pre, post) = train::evaluate_quantized(&model, &data.val, &train_cfg.geometries())?;
    let quantized = QuantizedAccuracy {
        pre_snap_accuracy: pre,
        post_snap_accuracy: post,
    };
    if cfg.train.eval_quantize {
        write(
            &out.join("quantized_eval.json"),
            serde_json::to_string_pretty(&quantized)? + "\n",
        )?;
    }
    Ok(RunOutcome {
        model,
        records,
        quantized,
    })
}

pub fn eval_checkpoint(checkpoint: &Path, cfg: &ExperimentConfig, base_dir: &Path) -> Result<QuantizedAccuracy> {
    cfg.validate()?;
    let data = cfg.dataset.load(base_dir)?;
    check_labels(cfg, &data)?;
    let model = Model::load(cfg.model.clone(), checkpoint)?;
    let (pre, post) = train::evaluate_quantized(&model, &data.val, &model.geometries()?)?;
    Ok(QuantizedAccuracy {
        pre_snap_accuracy: pre,
        post_snap_accuracy: post,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairedArm {
    pub mode: TrainMode,
    pub pre_snap_accuracy: f64,
    pub post_snap_accuracy: f64,
    pub accuracy_drop: f64,
    pub final_val_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairedComparison {
    pub seed: u64,
    pub with_sinreq: PairedArm,
    pub without_sinreq: PairedArm,
}

fn arm(mode: TrainMode, o: &RunOutcome) -> PairedArm {
    PairedArm {
        mode,
        pre_snap_accuracy: o.quantized.pre_snap_accuracy,
        post_snap_accuracy: o.quantized.post_snap_accuracy,
        accuracy_drop: o.quantized.drop(),
        final_val_acc: o.records.last().map_or(f64::NAN, |r| r.val_acc),
    }
}

/// Same configuration and seed, once with the regularizer and once without.
/// The two runs execute concurrently in separate output directories.
pub fn run_paired(cfg: &ExperimentConfig, base_dir: &Path) -> Result<PairedComparison> {
    cfg.validate()?;
    let mut with = cfg.clone();
    with.train.mode = cfg.train.mode.with_regularizer(true);
    with.output_dir = cfg.output_dir.join("with_sinreq");
    let mut without = cfg.clone();
    without.train.mode = cfg.train.mode.with_regularizer(false);
    without.output_dir = cfg.output_dir.join("without_sinreq");

    let (a, b) = std::thread::scope(|s| {
        let ha = s.spawn(|| run_experiment(&with, base_dir));
        let hb = s.spawn(|| run_experiment(&without, base_dir));
        (
            ha.join().expect("paired run panicked"),
            hb.join().expect("paired run panicked"),
        )
    });
    let (a, b) = (a?, b?);
    let cmp = PairedComparison {
        seed: cfg.train.seed,
        with_sinreq: arm(with.train.mode, &a),
        without_sinreq: arm(without.train.mode, &b),
    };
    write(
        &base_dir.join(&cfg.output_dir).join("comparison.json"),
        serde_json::to_string_pretty(&cmp)? + "\n",
    )?;
    Ok(cmp)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepMember {
    pub key: String,
    pub value: String,
    pub output_dir: PathBuf,
    pub final_val_acc: f64,
    pub pre_snap_accuracy: f64,
    pub post_snap_accuracy: f64,
}

/// Parses `key=v1,v2,...`.
pub fn parse_vary(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--vary expects key=v1,v2,..., got {spec:?}")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("empty value in --vary {spec:?}")));
    }
    Ok((key.trim().to_string(), values))
}

fn apply_vary(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let float = || {
        value
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("{key}: {value:?} is not a number")))
    };
    match key {
        "lambda_q" => {
            let v = float()?;
            cfg.train.lambda_q = v;
            cfg.train.lambda_q_per_layer.values_mut().for_each(|l| *l = v);
        }
        "lambda_wd" => cfg.train.lambda_wd = float()?,
        "learning_rate" => cfg.train.learning_rate = float()?,
        "seed" => {
            cfg.train.seed = value
                .parse()
                .map_err(|_| Error::Config(format!("seed: {value:?} is not an integer")))?
        }
        other => return Err(Error::Config(format!("--vary does not support {other:?}"))),
    }
    Ok(())
}

pub fn run_sweep(cfg: &ExperimentConfig, base_dir: &Path, vary: &str) -> Result<Vec<SweepMember>> {
    cfg.validate()?;
    let (key, values) = parse_vary(vary)?;
    let mut members = Vec::with_capacity(values.len());
    for value in &values {
        let mut c = cfg.clone();
        apply_vary(&mut c, &key, value)?;
        c.output_dir = cfg.output_dir.join(format!("{key}_{value}"));
        c.validate()?;
        members.push((value.clone(), c));
    }
    let results: Vec<Result<RunOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = members
            .iter()
            .map(|(_, c)| s.spawn(move || run_experiment(c, base_dir)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep run panicked"))
            .collect()
    });
    let mut summary = Vec::with_capacity(members.len());
    for ((value, c), r) in members.into_iter().zip(results) {
        let o = r?;
        summary.push(SweepMember {
            key: key.clone(),
            value,
            output_dir: c.output_dir,
            final_val_acc: o.records.last().map_or(f64::NAN, |r| r.val_acc),
            pre_snap_accuracy: o.quantized.pre_snap_accuracy,
            post_snap_accuracy: o.quantized.post_snap_accuracy,
        });
    }
    write(
        &base_dir.join(&cfg.output_dir).join("sweep.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

/// Executes a parsed command line, returning what should go to stdout.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let o = run_experiment(&cfg, &config_dir(&config))?;
            let last = o.records.last();
            Ok(serde_json::to_string_pretty(&serde_json::json!({
                "output_dir": cfg.output_dir,
                "epochs": o.records.len(),
                "final_train_acc": last.map(|r| r.train_acc),
                "final_val_acc": last.map(|r| r.val_acc),
                "pre_snap_accuracy": o.quantized.pre_snap_accuracy,
                "post_snap_accuracy": o.quantized.post_snap_accuracy,
            }))?)
        }
        Command::Eval { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let q = eval_checkpoint(&checkpoint, &cfg, &config_dir(&config))?;
            Ok(serde_json::to_string_pretty(&q)?)
        }
        Command::Sweep { config, vary } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = run_sweep(&cfg, &config_dir(&config), &vary)?;
            Ok(serde_json::to_string_pretty(&s)?)
        }
        Command::Paired { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let c = run_paired(&cfg, &config_dir(&config))?;
            Ok(serde_json::to_string_pretty(&c)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vary_parsing() {
        let (k, v) = parse_vary("lambda_q=0.5,1, 2").unwrap();
        assert_eq!(k, "lambda_q");
        assert_eq!(v, ["0.5", "1", "2"]);
        assert!(parse_vary("lambda_q").is_err());
        assert!(parse_vary("lambda_q=1,,2").is_err());
    }

    #[test]
    fn command_line_shapes() {
        let cli = Cli::try_parse_from(["sinreq", "sweep", "c.json", "--vary", "lambda_q=1,2"]).unwrap();
        assert!(matches!(cli.command, Command::Sweep { .. }));
        assert!(Cli::try_parse_from(["sinreq", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["sinreq", "train", "c.json", "--bogus"]).is_err());
    }
}
