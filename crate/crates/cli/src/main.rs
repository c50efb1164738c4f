use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use fbprop_core::feedback::{infer, Method};
use fbprop_core::harness::{
    benchmark_timing, emit_report, layer_analysis, run_sweep, synth_splits, train_model, BenchSettings, BenchSpec,
    Dataset, DatasetSpec, ExperimentSpec, ModelSpec, SplitDataset,
};
use fbprop_core::metrics::{class_weights, sigmoid_scores};
use fbprop_core::{load_model, save_model, Error, EvidencePartition, FeedbackConfig, Result, Tensor};

#[derive(Parser)]
#[command(name = "fbprop", version, about = "Feedback-propagation inference and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val/test dataset.
    GenData { spec: PathBuf, out_dir: PathBuf },
    /// Train a model on a generated dataset.
    Train { model_spec: PathBuf, data_dir: PathBuf, out_model: PathBuf },
    /// Run one inference with partial evidence.
    Infer {
        model: PathBuf,
        sample: PathBuf,
        /// Known labels as `index=value` pairs, values 0 or 1.
        #[arg(long, default_value = "")]
        known: String,
        /// Unknown labels; defaults to every output not listed in `--known`.
        #[arg(long)]
        unknown: Option<String>,
        #[arg(long, default_value = "lf")]
        method: String,
        #[arg(long, default_value = "")]
        pivots: String,
        #[arg(long, default_value_t = 1e-3)]
        rate: f64,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Dataset directory whose training labels supply class weights; unweighted without it.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Evidence-amount sweep.
    Sweep { experiment: PathBuf, out_csv: PathBuf },
    /// Per-layer best-validation analysis.
    Layers { experiment: PathBuf, out_csv: PathBuf },
    /// LF vs RF timing. `schedule` is a comma-separated pivot list or a JSON file.
    Bench { model: PathBuf, schedule: String, out_csv: PathBuf },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(String::from).collect()
}

fn parse_index(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::InvalidSpec(format!("bad label index `{s}`")))
}

fn parse_known(s: &str) -> Result<BTreeMap<usize, f64>> {
    let mut known = BTreeMap::new();
    for pair in list(s) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidSpec(format!("known label `{pair}` is not index=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::InvalidSpec(format!("bad label value in `{pair}`")))?;
        known.insert(parse_index(k)?, v);
    }
    Ok(known)
}

fn load_sample(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let t = Tensor::load(path)?;
    let squeezed: Vec<usize> = if t.shape().first() == Some(&1) && t.rank() == shape.len() + 1 {
        t.shape()[1..].to_vec()
    } else {
        t.shape().to_vec()
    };
    if squeezed != shape {
        return Err(Error::Shape(format!("sample has shape {:?}, model expects {shape:?}", t.shape())));
    }
    t.reshape(squeezed)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out_dir } => {
            let spec: DatasetSpec = read_json(&spec)?;
            let data = synth_splits(&spec)?;
            data.save(&out_dir)?;
            println!(
                "{}",
                json!({"train": data.train.len(), "val": data.val.len(), "test": data.test.len(), "labels": spec.labels})
            );
        }
        Command::Train { model_spec, data_dir, out_model } => {
            let spec: ModelSpec = read_json(&model_spec)?;
            let data = SplitDataset::load(&data_dir)?;
            let (model, curve) = fbprop_core::harness::worker_pool()?.install(|| train_model(&spec, &data))?;
            save_model(&model, &out_model)?;
            for (epoch, (t, v)) in curve.train_loss.iter().zip(&curve.val_loss).enumerate() {
                println!("{}", json!({"epoch": epoch, "train_loss": t, "val_loss": v}));
            }
        }
        Command::Infer { model, sample, known, unknown, method, pivots, rate, iters, data_dir } => {
            let model = load_model(&model)?;
            let input = load_sample(&sample, model.input_shape())?;
            let known = parse_known(&known)?;
            let d = model.output_dim();
            let unknown = match unknown {
                Some(u) => list(&u).iter().map(|s| parse_index(s)).collect::<Result<Vec<_>>>()?,
                None => (0..d).filter(|j| !known.contains_key(j)).collect(),
            };
            let evidence = EvidencePartition::new(known, unknown, d)?;
            let weights = match data_dir {
                Some(dir) => Some(class_weights(Dataset::load(dir, "train")?.labels())?),
                None => None,
            };
            let method: Method = method.parse()?;
            let config = FeedbackConfig::new(list(&pivots), rate, iters);
            let out = infer(&method, &model, &input, &evidence, &config, weights.as_ref())?;
            let probs = sigmoid_scores(&out.scores);
            println!(
                "{}",
                json!({
                    "method": method.label(),
                    "scores": out.scores.data(),
                    "probabilities": probs.data(),
                    "unknown": evidence.unknown(),
                    "unknown_scores": out.unknown_scores,
                    "degenerate": out.degenerate,
                    "losses": out.trace.losses,
                    "final_losses": out.trace.final_losses,
                })
            );
        }
        Command::Sweep { experiment, out_csv } => {
            let report = run_sweep(&ExperimentSpec::load(&experiment)?)?;
            emit_report(&report, &out_csv)?;
        }
        Command::Layers { experiment, out_csv } => {
            let report = layer_analysis(&ExperimentSpec::load(&experiment)?)?;
            emit_report(&report, &out_csv)?;
        }
        Command::Bench { model, schedule, out_csv } => {
            let model = load_model(&model)?;
            let spec = if schedule.ends_with(".json") {
                read_json::<BenchSpec>(Path::new(&schedule))?
            } else {
                BenchSpec { schedule: list(&schedule), settings: BenchSettings::default() }
            };
            let report = benchmark_timing(&model, &spec.schedule, &spec.settings)?;
            emit_report(&report, &out_csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '"'], " ");
            eprintln!("error kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
