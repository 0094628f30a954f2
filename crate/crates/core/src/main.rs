use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kmtr::heads::Task;
use kmtr::pipeline::{self, Dataset, EncoderVariant, ExperimentConfig, OutputLock, Split};
use kmtr::tokenizer::Domain;
use kmtr::Result;

#[derive(Parser)]
#[command(name = "kmtr", version, about = "k-space representation learning experiments on synthetic cardiac cine data")]
struct Cli {
    /// Experiment config (JSON); defaults to the chosen preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Compact,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Image,
    Kspace,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Regression,
    Classification,
    Segmentation,
    Reconstruction,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Aligned,
    Unaligned,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config as JSON.
    Config,
    /// Generate the phantom cohort, splits and k-space normalization.
    GenData,
    /// Stage I masked-autoencoder pretraining.
    Pretrain {
        #[arg(long, value_enum)]
        domain: DomainArg,
    },
    /// Stage II contrastive alignment.
    Align,
    /// Stage III fine-tuning on undersampled k-space.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum, default_value_t = VariantArg::Aligned)]
        encoder: VariantArg,
        /// Acceleration; defaults to the task's configured R.
        #[arg(long = "R")]
        r: Option<f64>,
    },
    /// Score a fine-tuned checkpoint.
    Evaluate {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long = "R")]
        r: Option<f64>,
        #[arg(long, value_enum, default_value_t = VariantArg::Aligned)]
        encoder: VariantArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Regression fine-tune and evaluation over the configured R values.
    SweepR {
        #[arg(long, value_enum, default_value_t = VariantArg::Aligned)]
        encoder: VariantArg,
    },
    /// Export projected k-space embeddings with a 2-component linear projection.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value_t = VariantArg::Aligned)]
        encoder: VariantArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Render every exported embedding table as an SVG scatter.
    Plot {
        #[arg(long, default_value = "LVEDA")]
        color_by: String,
    },
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
            TaskArg::Segmentation => Task::Segmentation,
            TaskArg::Reconstruction => Task::Reconstruction,
        }
    }
}

impl From<VariantArg> for EncoderVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Aligned => EncoderVariant::Aligned,
            VariantArg::Unaligned => EncoderVariant::Unaligned,
            VariantArg::Random => EncoderVariant::Random,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => match cli.preset {
            Preset::Desk => ExperimentConfig::desk(),
            Preset::Compact => ExperimentConfig::compact(),
            Preset::Tiny => ExperimentConfig::tiny(),
        },
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_json()?);
        return Ok(());
    }
    let out = cli.out.as_path();
    let _lock = OutputLock::acquire(out)?;
    match cli.command {
        Command::Config => unreachable!(),
        Command::GenData => print_json(&pipeline::gen_data(&cfg, out)?)?,
        Command::Plot { color_by } => {
            let dir = pipeline::report_dir(out);
            let mut tables: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("embeddings_")))
                .collect();
            tables.sort();
            if tables.is_empty() {
                return Err(kmtr::KmtrError::MissingArtifact(dir.join("embeddings_*.csv")));
            }
            for t in tables {
                let svg = t.with_extension("svg");
                pipeline::plot(&t, &svg, &color_by)?;
                println!("{}", svg.display());
            }
        }
        command => {
            let data = Dataset::load(&cfg, out)?;
            match command {
                Command::Pretrain { domain } => {
                    let d = match domain {
                        DomainArg::Image => Domain::Image,
                        DomainArg::Kspace => Domain::Kspace,
                    };
                    let ck = pipeline::pretrain(&cfg, &data, d, out)?;
                    print_json(&ck.header.meta)?;
                }
                Command::Align => print_json(&pipeline::align(&cfg, &data, out)?.1)?,
                Command::Finetune { task, encoder, r } => print_json(&pipeline::finetune(&cfg, &data, task.into(), encoder.into(), r, out)?.1)?,
                Command::Evaluate { task, r, encoder, split } => print_json(&pipeline::evaluate(&cfg, &data, task.into(), encoder.into(), r, split.into(), out)?)?,
                Command::SweepR { encoder } => print_json(&pipeline::sweep_r(&cfg, &data, encoder.into(), out)?)?,
                Command::ExportEmbeddings { encoder, split } => {
                    let t = pipeline::export_embeddings(&cfg, &data, encoder.into(), split.into(), out)?;
                    println!("{}", pipeline::embed::EmbeddingTable::path(out, t.variant, t.split).display());
                }
                Command::Config | Command::GenData | Command::Plot { .. } => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("KMTR_NUM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
