//! Command-line front end: experiment configs, runs and reports.

mod commands;
mod config;
mod report;
mod svg;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_gen_data, cmd_prune, cmd_reinit, cmd_train, load_prune_log, run_result_csv, schedule_csv,
    top_level_width,
};
pub use config::{profile, DataConfig, ExperimentConfig, PruneConfig, PROFILES};
pub use report::{read_summaries, render_report, SummaryRow, SUMMARY_HEADER};
pub use svg::{line_chart, Series};

use crate::data::ContextMode;
use crate::error::Result;
use crate::pruning::Strategy;
use crate::training::Loss;
use crate::unet::{make_spec, Family};

#[derive(Debug, Parser)]
#[command(
    name = "lunet",
    version,
    about = "Unet channel schedules, training and structured pruning"
)]
pub struct Cli {
    /// Experiment config file (TOML); applied on top of the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in profile: harp200, harp50 or synthetic-default.
    #[arg(long, global = true, default_value = "synthetic-default")]
    pub profile: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write it to disk.
    GenData {
        #[command(flatten)]
        o: Overrides,
        /// Destination directory (default: <out>/data).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train a fixed architecture once per seed.
    Train {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train while pruning channels one at a time.
    Prune {
        #[command(flatten)]
        o: Overrides,
    },
    /// Retrain a pruned snapshot from a fresh initialization.
    Reinit {
        #[command(flatten)]
        o: Overrides,
        /// prunelog.toml written by `prune`.
        #[arg(long)]
        log: PathBuf,
        /// Channels-remaining percentage of the snapshot.
        #[arg(long)]
        pct: u32,
    },
    /// Print the widest-block width table as CSV.
    Schedule {
        #[command(flatten)]
        o: Overrides,
        /// Number of removals (default: until every conv has one channel).
        #[arg(long)]
        removals: Option<usize>,
    },
    /// Print parameter and channel counts of an architecture.
    Count {
        #[command(flatten)]
        o: Overrides,
    },
    /// Tabulate every summary below a directory.
    Report {
        /// Directory to scan (default: the output directory).
        dir: Option<PathBuf>,
        #[arg(long, env = "LUNET_OUT")]
        out: Option<PathBuf>,
    },
}

/// Flags that override config fields.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub n_f: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub convs_per_block: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub norm: Option<bool>,
    #[arg(long)]
    pub scale_percent: Option<f64>,
    #[arg(long)]
    pub in_channels: Option<usize>,
    #[arg(long)]
    pub num_labels: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub loss: Option<Loss>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub recovery_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub base_p: Option<f64>,
    #[arg(long)]
    pub stop_at_pct: Option<u32>,
    #[arg(long)]
    pub histogram_pct: Option<u32>,
    #[arg(long)]
    pub layer_normalize: Option<bool>,
    #[arg(long)]
    pub svg: Option<bool>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub side: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub context_mode: Option<ContextMode>,
    /// Output directory.
    #[arg(long, env = "LUNET_OUT")]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = &self.$field {
                    $($target)+ = v.clone();
                }
            };
        }
        set!(family => c.model.family);
        set!(n_f => c.model.n_f);
        set!(levels => c.model.levels);
        set!(convs_per_block => c.model.convs_per_block);
        set!(kernel => c.model.kernel);
        set!(norm => c.model.norm);
        set!(in_channels => c.model.in_channels);
        set!(epochs => c.train.epochs);
        set!(learning_rate => c.train.learning_rate);
        set!(batch_size => c.train.batch_size);
        set!(loss => c.train.loss);
        set!(strategy => c.prune.strategy);
        set!(recovery_epochs => c.prune.recovery_epochs);
        set!(warmup_epochs => c.prune.warmup_epochs);
        set!(base_p => c.prune.base_p);
        set!(layer_normalize => c.prune.layer_normalize);
        set!(svg => c.prune.svg);
        set!(seeds => c.seeds);
        set!(side => c.data.synth.side);
        set!(n_train => c.data.synth.n_train);
        set!(n_test => c.data.synth.n_test);
        set!(data_seed => c.data.synth.seed);
        set!(context_mode => c.data.synth.context_mode);
        set!(out => c.out_dir);
        if let Some(d) = self.dim {
            c.model.dim = d;
            c.data.synth.dim = d;
        }
        if let Some(n) = self.num_labels {
            c.model.num_labels = n;
            c.data.synth.num_labels = n;
        }
        if let Some(p) = self.scale_percent {
            c.model.scale_percent = Some(p);
        }
        if let Some(p) = self.stop_at_pct {
            c.prune.stop_at_pct = Some(p);
        }
        if let Some(p) = self.histogram_pct {
            c.prune.histogram_pct = Some(p);
        }
        if let Some(p) = &self.data {
            c.data.path = Some(p.clone());
        }
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = profile(&cli.profile)?;
    match &cli.config {
        None => Ok(base),
        Some(path) => {
            // fields missing from the file keep their profile values
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => crate::Error::MissingFile(path.clone()),
                _ => crate::Error::Io(e),
            })?;
            let mut merged = toml::Table::try_from(&base)?;
            merge(&mut merged, text.parse::<toml::Table>()?);
            Ok(merged.try_into()?)
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match cli.command {
        Command::GenData { o, dest } => {
            o.apply(&mut cfg);
            let dest = cmd_gen_data(&cfg, dest)?;
            writeln!(out, "wrote {}", dest.display())?;
        }
        Command::Train { o } => {
            o.apply(&mut cfg);
            for r in cmd_train(&cfg)? {
                writeln!(out, "{} seed {}: final Dice {:.4}", r.label, r.seed, r.dice)?;
            }
        }
        Command::Prune { o } => {
            o.apply(&mut cfg);
            for r in cmd_prune(&cfg)? {
                writeln!(
                    out,
                    "{} seed {}: max test Dice {:.4} at N_p {}",
                    r.label, r.seed, r.dice, r.n_params
                )?;
            }
        }
        Command::Reinit { o, log, pct } => {
            o.apply(&mut cfg);
            for r in cmd_reinit(&log, pct, &cfg)? {
                writeln!(
                    out,
                    "{} seed {}: final Dice {:.4} at N_p {}",
                    r.label, r.seed, r.dice, r.n_params
                )?;
            }
        }
        Command::Schedule { o, removals } => {
            o.apply(&mut cfg);
            out.write_all(schedule_csv(&make_spec(&cfg.model)?, removals)?.as_bytes())?;
        }
        Command::Count { o } => {
            o.apply(&mut cfg);
            let c = make_spec(&cfg.model)?.count();
            writeln!(out, "N_p={} N_ch={}", c.n_params, c.n_channels)?;
        }
        Command::Report { dir, out: out_dir } => {
            let dir = dir.or(out_dir).unwrap_or(cfg.out_dir);
            out.write_all(render_report(&dir)?.as_bytes())?;
        }
    }
    Ok(())
}
