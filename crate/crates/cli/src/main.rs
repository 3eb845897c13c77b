use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fraesormer_core::checkpoint::{load_params, read_tensors, save_params};
use fraesormer_core::data::gen_synthetic;
use fraesormer_core::gradcheck::suite;
use fraesormer_core::train::{sweep_csv, SweepRow};
use fraesormer_core::{
    count_macs, count_params, evaluate, predict, sweep_k, train, Dataset, EpochLog, Error, Model, ModelConfig, Result,
    SyntheticSpec, TrainConfig,
};

/// Adaptive top-k sparse attention backbone: accounting, checks and toy training.
#[derive(Debug, Parser)]
#[command(name = "fraesormer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count parameters of a configuration.
    Params {
        /// Config JSON path or preset name (tiny, base, large, micro).
        #[arg(long)]
        config: String,
        /// Print the per-layer breakdown.
        #[arg(long)]
        breakdown: bool,
    },
    /// Count multiply-accumulates for one square input.
    Macs {
        #[arg(long)]
        config: String,
        #[arg(long)]
        resolution: usize,
        #[arg(long)]
        breakdown: bool,
    },
    /// Finite-difference gradient checks for every op, a block and the micro model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic four-class dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Disable global gradient-norm clipping.
        #[arg(long)]
        no_clip: bool,
    },
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        config: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Classify the image(s) stored in a tensor file.
    Predict {
        #[arg(long)]
        config: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one model per fixed k fraction plus the adaptive mode and score each.
    SweepK {
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Score on this dataset instead of the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn load_config(arg: &str) -> Result<ModelConfig> {
    let path = Path::new(arg);
    if path.exists() {
        return ModelConfig::load(path);
    }
    ModelConfig::named(arg).ok_or_else(|| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such config file or preset"),
    })
}

fn load_model(config: &str, ckpt: &Path) -> Result<Model<f32>> {
    let cfg = load_config(config)?;
    let mut model = Model::build(&cfg, 0)?;
    load_params(&mut model.params, ckpt)?;
    Ok(model)
}

fn run(command: Command) -> Result<bool> {
    let mut stdout = std::io::stdout().lock();
    let mut emit = |line: &str| {
        let _ = writeln!(stdout, "{line}");
    };
    match command {
        Command::Params { config, breakdown } => {
            let model = Model::<f32>::build(&load_config(&config)?, 0)?;
            let report = count_params(&model);
            if breakdown {
                emit(report.to_csv().trim_end());
            } else {
                emit("model,params,params_m");
                emit(&format!("{},{},{:.3}", report.model, report.total_params, report.params_millions()));
            }
        }
        Command::Macs { config, resolution, breakdown } => {
            let model = Model::<f32>::build(&load_config(&config)?, 0)?;
            let report = count_macs(&model, resolution)?;
            if breakdown {
                emit(report.to_csv().trim_end());
            } else {
                emit("model,resolution,macs,macs_g");
                emit(&format!("{},{resolution},{},{:.3}", report.model, report.total_macs, report.macs_giga()));
            }
        }
        Command::Gradcheck { seed } => {
            emit("check,max_rel_error,tolerance,checked,status");
            let mut all = true;
            for e in suite(seed)? {
                all &= e.passed();
                let status = if e.passed() { "pass" } else { "fail" };
                emit(&format!(
                    "{},{:.3e},{:e},{},{status}",
                    e.name, e.report.max_rel_error, e.tolerance, e.report.checked
                ));
            }
            return Ok(all);
        }
        Command::GenData { out, n, seed } => {
            let written = gen_synthetic(&SyntheticSpec::new(seed), n, &out)?;
            emit("samples,dir");
            emit(&format!("{written},{}", out.display()));
        }
        Command::Train { config, data, epochs, lr, batch, seed, out_ckpt, no_clip } => {
            let cfg = load_config(&config)?;
            let train_cfg = TrainConfig {
                epochs,
                batch_size: batch,
                peak_lr: lr,
                seed,
                clip_norm: if no_clip { None } else { TrainConfig::default().clip_norm },
                ..TrainConfig::default()
            };
            train_cfg.validate()?;
            let data = Dataset::load(&data)?;
            let mut model = Model::build(&cfg, seed)?;
            emit(EpochLog::HEADER);
            train(&mut model, &train_cfg, &data, &mut |log| emit(&log.to_string()), None)?;
            save_params(&model.params, &out_ckpt)?;
        }
        Command::Eval { config, ckpt, data } => {
            let model = load_model(&config, &ckpt)?;
            let m = evaluate(&model, &Dataset::load(&data)?)?;
            emit("samples,correct,top1");
            emit(&format!("{},{},{:.4}", m.total, m.correct, m.top1));
        }
        Command::Predict { config, ckpt, input } => {
            let model = load_model(&config, &ckpt)?;
            let tensors = read_tensors(&input)?;
            let [(_, images)] = tensors.as_slice() else {
                return Err(Error::Contract(format!(
                    "{}: expected exactly one tensor, found {}",
                    input.display(),
                    tensors.len()
                )));
            };
            let preds = predict(&model, images)?;
            let classes = preds.first().map_or(0, |p| p.logits.len());
            let header: Vec<String> = (0..classes).map(|c| format!("logit{c}")).collect();
            emit(&format!("index,class,{}", header.join(",")));
            for (i, p) in preds.iter().enumerate() {
                let logits: Vec<String> = p.logits.iter().map(|v| format!("{v:.6}")).collect();
                emit(&format!("{i},{},{}", p.class, logits.join(",")));
            }
        }
        Command::SweepK { config, data, fractions, out, seed, epochs, batch, lr, eval_data } => {
            let cfg = load_config(&config)?;
            let train_cfg = TrainConfig { epochs, batch_size: batch, peak_lr: lr, seed, ..TrainConfig::default() };
            train_cfg.validate()?;
            let train_data = Dataset::load(&data)?;
            let eval_data = match eval_data {
                Some(dir) => Dataset::load(&dir)?,
                None => train_data.clone(),
            };
            emit(SweepRow::HEADER);
            let rows =
                sweep_k(&cfg, &train_cfg, &train_data, &eval_data, &fractions, &mut |row| emit(&row.to_string()))?;
            fs::write(&out, sweep_csv(&rows)).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_corruption() { 2 } else { 1 })
        }
    }
}
