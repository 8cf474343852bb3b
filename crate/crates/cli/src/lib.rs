//! Command-line runner: teacher training, teacher caching, student training,
//! evaluation, ratio analysis and prediction, all driven by one TOML config.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use discoprop::corpus::{Relation, Split};
use discoprop::distill::Level;
use discoprop::student::Mode;
use discoprop::teachers::TeacherKind;

use crate::commands::Format;
use crate::config::{LossTerm, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "discoprop",
    version,
    about = "Discourse-guided propaganda identification",
    after_help = "Environment: DISCOPROP_<SECTION>__<KEY>=value overrides a config key, \
                  e.g. DISCOPROP_TRAIN__EPOCHS=3. Precedence: file < environment < --set < flags."
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override any config key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,

    /// Seed for teacher training, student initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// baseline, concat or distill.
    #[arg(long, global = true)]
    pub mode: Option<Mode>,

    /// sentence or token.
    #[arg(long, global = true)]
    pub level: Option<Level>,

    /// Zero a distillation loss weight; repeatable.
    #[arg(long, value_enum, global = true)]
    pub ablate_loss: Vec<LossTerm>,

    /// Remove one relation from the local teacher's probabilities.
    #[arg(long, global = true)]
    pub ablate_relation: Option<Relation>,

    /// -v for info logs, -vv for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the relation or role teacher.
    TrainTeacher {
        /// relation or role
        kind: TeacherKind,
    },
    /// Run both teachers over the propaganda corpus and cache their outputs.
    CacheTeacher {
        /// Cache directory; `paths.cache` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student into `{paths.output}/{run_id}`.
    TrainStudent,
    /// Score a student checkpoint on one split.
    Evaluate {
        /// Defaults to the configured run's `model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "tsv")]
        format: Format,
        /// Also write `metrics.tsv` and `metrics.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Propaganda ratios per teacher relation and role.
    Analyze {
        /// Restrict to one split; all articles when omitted.
        #[arg(long)]
        split: Option<Split>,
        /// Output directory; `{paths.output}/analysis` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label the sentences of one article file.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        article: PathBuf,
        /// Article id; the file stem when omitted.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            set: self.set.clone(),
            seed: self.seed,
            mode: self.mode,
            level: self.level,
            ablate_loss: self.ablate_loss.clone(),
            ablate_relation: self.ablate_relation,
        }
    }

    pub fn load_config(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), std::env::vars(), &self.overrides())
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let config = cli.load_config()?;
    match &cli.command {
        Command::TrainTeacher { kind } => commands::train_teacher(&config, *kind, out).map(drop),
        Command::CacheTeacher { out: dir } => commands::cache_teacher(&config, dir.as_deref(), out).map(drop),
        Command::TrainStudent => commands::train_student_run(&config, out).map(drop),
        Command::Evaluate {
            checkpoint,
            split,
            format,
            out: dir,
        } => commands::evaluate_split(&config, checkpoint.as_deref(), *split, *format, dir.as_deref(), out).map(drop),
        Command::Analyze { split, out: dir } => commands::analyze(&config, *split, dir.as_deref(), out).map(drop),
        Command::Predict {
            checkpoint,
            article,
            id,
            json,
        } => commands::predict_article(&config, checkpoint.as_deref(), article, id.as_deref(), *json, out),
    }
}
