//! The `molt` command line: data generation, training, evaluation, the
//! ablation grid and the robustness grid.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use molt_core::data::{generate_train_test, load_split, save_split, Modality, SplitData, SyntheticSpec, TaskMode};
use molt_core::experiment::{ablation_csv, mean_accuracy, run_ablation};
use molt_core::kv::KvFile;
use molt_core::robustness::{
    robust_rows, run_scenarios, standard_scenarios, EvalScenario, MetricsReport, NoiseTarget, ScenarioKind,
};
use molt_core::training::{load_checkpoint, log_csv, save_checkpoint, train, ModelKind, Toggles, TrainConfig};
use molt_core::{model::Model, Error};

pub const CHECKPOINT_FILE: &str = "checkpoint.molc";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const SOURCE_FILE: &str = "source.cfg";

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_CONFIG: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "molt", version, about = "Robust latent representation tuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Clean,
    TextAbsent,
    ImageAbsent,
    Noise,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Image,
    Text,
    Both,
}

impl From<TargetArg> for NoiseTarget {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Image => NoiseTarget::Image,
            TargetArg::Text => NoiseTarget::Text,
            TargetArg::Both => NoiseTarget::Both,
        }
    }
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// key = value config file; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=50`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset as embedding files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Training samples.
        #[arg(long, default_value_t = 400)]
        samples: usize,
        /// Held-out samples.
        #[arg(long, default_value_t = 400)]
        test_samples: usize,
        #[arg(long)]
        multi_label: bool,
        /// Make each modality carry the class on its own.
        #[arg(long)]
        single_modal: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train the linear baseline instead of the full model.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under one scenario.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the data the model was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "clean")]
        scenario: ScenarioArg,
        /// Noise std as a fraction of the per-feature std.
        #[arg(long, default_value_t = 0.0)]
        p: f64,
        #[arg(long, value_enum, default_value = "both")]
        target: TargetArg,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        /// Report directory; the JSON goes to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and each single-toggle ablation.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absence and noise grid for a model and its baseline.
    Robust {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "both")]
        target: TargetArg,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::BadMagic { .. }
        | Error::BadVersion { .. }
        | Error::Truncated { .. }
        | Error::TrailingBytes(_)
        | Error::Format(_) => EXIT_FORMAT,
        Error::Config { .. } | Error::InvalidConfig(_) | Error::HashMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write(path: &Path, contents: &str) -> molt_core::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> molt_core::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> molt_core::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config file, then overrides. The data's task mode is adopted unless
/// `task` was given explicitly.
fn build_config(args: &ConfigArgs, data_task: TaskMode) -> molt_core::Result<TrainConfig> {
    let (mut config, mut explicit_task) = match &args.config {
        Some(path) => {
            let kv = KvFile::parse(&read(path)?)?;
            (TrainConfig::from_kv(&kv)?, kv.get("task").is_some())
        }
        None => (TrainConfig::default(), false),
    };
    for o in &args.overrides {
        config.apply_override(o)?;
        explicit_task |= o.split('=').next().map(str::trim) == Some("task");
    }
    if !explicit_task {
        config.task = data_task;
    }
    Ok(config)
}

fn model_data_dir(model_dir: &Path, data: Option<PathBuf>) -> molt_core::Result<PathBuf> {
    if let Some(d) = data {
        return Ok(d);
    }
    let kv = KvFile::parse(&read(&model_dir.join(SOURCE_FILE))?)?;
    kv.get("data")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Format(format!("{} has no data entry", model_dir.join(SOURCE_FILE).display())))
}

fn load_model(dir: &Path) -> molt_core::Result<Model> {
    Ok(load_checkpoint(&dir.join(CHECKPOINT_FILE))?.model)
}

fn emit_report(report: &MetricsReport, out: Option<&Path>) -> molt_core::Result<()> {
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("report.json"), &report.to_json())?;
            write(&dir.join("report.csv"), &report.to_csv())
        }
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

fn dispatch(cmd: Command) -> molt_core::Result<()> {
    match cmd {
        Command::GenData {
            seed,
            classes,
            samples,
            test_samples,
            multi_label,
            single_modal,
            out,
        } => {
            let spec = SyntheticSpec {
                num_samples: samples,
                num_classes: classes,
                seed,
                cross_modal: !single_modal,
                task: if multi_label {
                    TaskMode::MultiLabel
                } else {
                    TaskMode::SingleLabel
                },
                ..SyntheticSpec::default()
            };
            let (train_set, test_set) = generate_train_test(&spec, test_samples)?;
            save_split(&out, "train", &train_set)?;
            if test_samples > 0 {
                save_split(&out, "test", &test_set)?;
            }
            println!("wrote {} train and {} test samples to {}", train_set.len(), test_set.len(), out.display());
            Ok(())
        }
        Command::Train {
            data,
            split,
            cfg,
            baseline,
            out,
        } => {
            let split_data = load_split(&data, &split)?;
            let mut config = build_config(&cfg, split_data.task())?;
            if baseline {
                config.model = ModelKind::Baseline;
            }
            let model = Model::for_split(config, &split_data)?;
            let encoded = model.prepare(&split_data)?;
            let trained = train(model, &encoded)?;
            create_dir(&out)?;
            save_checkpoint(&out.join(CHECKPOINT_FILE), &trained)?;
            write(&out.join(LOG_FILE), &log_csv(&trained.log))?;
            write(&out.join(CONFIG_FILE), &trained.model.config.render())?;
            let mut source = KvFile::default();
            source.insert("data", data.display().to_string());
            source.insert("split", split);
            write(&out.join(SOURCE_FILE), &source.render())?;
            if let Some(last) = trained.log.last() {
                println!(
                    "{} epochs, loss {:.6}, train accuracy {:.4}",
                    last.epoch, last.loss_total, last.train_acc
                );
            }
            Ok(())
        }
        Command::Eval {
            model,
            data,
            split,
            scenario,
            p,
            target,
            noise_seed,
            out,
        } => {
            let m = load_model(&model)?;
            let split_data = load_split(&model_data_dir(&model, data)?, &split)?;
            let sc = match scenario {
                ScenarioArg::Clean => EvalScenario::clean(),
                ScenarioArg::TextAbsent => EvalScenario::absent(Modality::Text),
                ScenarioArg::ImageAbsent => EvalScenario::absent(Modality::Image),
                ScenarioArg::Noise => EvalScenario::noise(p, target.into(), noise_seed),
            };
            let rows = run_scenarios(&m, &split_data, &[sc])?;
            emit_report(
                &MetricsReport {
                    config_hash: m.config.hash(),
                    rows,
                },
                out.as_deref(),
            )
        }
        Command::Ablate { data, cfg, seeds, out } => {
            let train_data = load_split(&data, "train")?;
            let test_data = load_split(&data, "test")?;
            let base = build_config(&cfg, train_data.task())?;
            let grid = Toggles::ablation_grid();
            let rows = run_ablation(&base, &train_data, &test_data, &seeds, &grid)?;
            create_dir(&out)?;
            write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
            for (name, _) in &grid {
                if let Some(acc) = mean_accuracy(&rows, name) {
                    println!("{name:<20} {acc:.4}");
                }
            }
            Ok(())
        }
        Command::Robust {
            model,
            baseline,
            data,
            split,
            target,
            noise_seed,
            out,
        } => {
            let m = load_model(&model)?;
            let b = load_model(&baseline)?;
            if b.kind() != ModelKind::Baseline {
                return Err(Error::InvalidConfig(format!("{} is not a baseline checkpoint", baseline.display())));
            }
            let split_data: SplitData = load_split(&model_data_dir(&model, data)?, &split)?;
            let grid: Vec<EvalScenario> = standard_scenarios(noise_seed)
                .into_iter()
                .map(|s| match s.kind {
                    ScenarioKind::Noise => EvalScenario {
                        target: target.into(),
                        ..s
                    },
                    _ => s,
                })
                .collect();
            let rows = robust_rows(&run_scenarios(&b, &split_data, &grid)?, &run_scenarios(&m, &split_data, &grid)?);
            emit_report(
                &MetricsReport {
                    config_hash: m.config.hash(),
                    rows,
                },
                out.as_deref(),
            )
        }
    }
}
