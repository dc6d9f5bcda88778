use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::report::{aggregate_csv, summary_csv, SummaryRow, SUMMARY_FILE};
use super::svg::{line_chart, Series};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::pruning::{
    stamp_loop, widest_schedule, CriterionReport, PruneCallbacks, PruneLog, SNAPSHOT_PCTS,
};
use crate::training::{train, RunResult};
use crate::unet::{build, ArchSpec, UnetModel};

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Widest top-level conv; pruning can shrink it below the initial N_f.
pub fn top_level_width(spec: &ArchSpec) -> usize {
    spec.conv_refs()
        .filter(|c| spec.level(c.block) == 0)
        .map(|c| spec.width(c))
        .max()
        .unwrap_or(0)
}

pub fn run_result_csv(r: &RunResult) -> String {
    let labels = r.history.first().map_or(0, |h| h.per_label.len());
    let mut s = String::from("epoch,train_loss,test_dice");
    for l in 1..=labels {
        let _ = write!(s, ",dice_label{l}");
    }
    s.push('\n');
    for h in &r.history {
        let _ = write!(s, "{},{},{}", h.epoch, h.train_loss, h.test_dice);
        for d in &h.per_label {
            let _ = write!(s, ",{d}");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, dest: Option<PathBuf>) -> Result<PathBuf> {
    cfg.data.synth.validate()?;
    let dest = dest.unwrap_or_else(|| cfg.out_dir.join("data"));
    let ds = data::generate(&cfg.data.synth)?;
    data::save(&ds, &dest)?;
    Ok(dest)
}

/// Trains one fixed architecture per seed and writes per-seed histories
/// plus summary and aggregate rows into `dir`.
fn train_cell(
    cfg: &ExperimentConfig,
    data: &Dataset,
    spec: &ArchSpec,
    label: &str,
    n_f_init: usize,
    dir: &Path,
) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut model = build(spec, seed)?;
        let result = train(&mut model, data, &cfg.train_for_seed(seed), None)?;
        write(
            &dir.join(format!("seed_{seed}.csv")),
            &run_result_csv(&result),
        )?;
        if result.aborted {
            eprintln!("{label} seed {seed}: training stopped on a non-finite loss");
        }
        let counts = spec.count();
        rows.push(SummaryRow {
            label: label.to_string(),
            pruning: false,
            n_f: top_level_width(spec),
            n_f_init,
            n_ch: counts.n_channels,
            n_params: counts.n_params,
            seed,
            dice: result.final_dice,
        });
    }
    write(&dir.join(SUMMARY_FILE), &summary_csv(&rows))?;
    write(&dir.join("aggregate.csv"), &aggregate_csv(&rows))?;
    Ok(rows)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let spec = cfg.arch_for(&data)?;
    let label = cfg.model_label();
    let dir = cfg.out_dir.join(format!("train_{label}"));
    train_cell(cfg, &data, &spec, &label, top_level_width(&spec), &dir)
}

struct Histogram {
    target: usize,
    n0: usize,
    captured: Option<(ArchSpec, CriterionReport)>,
}

impl PruneCallbacks for Histogram {
    fn on_criterion(&mut self, step: usize, report: &CriterionReport, model: &UnetModel) {
        // channels present while this report was taken
        let present = self.n0 + 1 - step;
        if self.captured.is_none() && present <= self.target {
            self.captured = Some((model.spec().clone(), report.clone()));
        }
    }
}

fn histogram_csv(spec: &ArchSpec, report: &CriterionReport) -> String {
    let mut s = String::from("block,kind,level,conv,channel,value\n");
    for (id, v) in &report.values {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{v}",
            id.block,
            spec.block_kind(id.block).as_str(),
            spec.level(id.block),
            id.conv,
            id.channel
        );
    }
    s
}

fn prune_charts(log: &PruneLog, dir: &Path) -> Result<()> {
    let dice = Series {
        name: log.strategy.to_string(),
        points: log
            .events
            .iter()
            .filter_map(|e| e.dice.map(|d| (100.0 * e.pct_remaining, d)))
            .collect(),
    };
    write(
        &dir.join("dice.svg"),
        &line_chart(
            "Test Dice during pruning",
            "channels remaining (%)",
            "Dice",
            &[dice],
        ),
    )?;
    let spec = &log.initial;
    let mut series = Vec::new();
    for level in 0..spec.levels {
        for decoder in [false, true] {
            let blocks: Vec<usize> = (0..spec.num_blocks())
                .filter(|&b| {
                    spec.level(b) == level
                        && (spec.block_kind(b) == crate::unet::BlockKind::Decoder) == decoder
                })
                .collect();
            if blocks.is_empty() {
                continue;
            }
            let width = |w: &Vec<Vec<usize>>| {
                blocks
                    .iter()
                    .map(|&b| w[b].iter().sum::<usize>())
                    .sum::<usize>() as f64
            };
            let points = std::iter::once((0.0, width(&spec.widths)))
                .chain(log.events.iter().map(|e| (e.step as f64, width(&e.widths))))
                .collect();
            series.push(Series {
                name: format!("{}{level}", spec.block_kind(blocks[0]).as_str()),
                points,
            });
        }
    }
    write(
        &dir.join("evolution.svg"),
        &line_chart(
            "Remaining channels per block",
            "prune step",
            "channels",
            &series,
        ),
    )
}

pub fn cmd_prune(cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let spec = cfg.arch_for(&data)?;
    let label = format!("{}:{}", cfg.prune.strategy, cfg.model_label());
    let cell = cfg.out_dir.join(format!(
        "prune_{}_{}",
        cfg.prune.strategy,
        cfg.model_label()
    ));
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cell.join(format!("seed_{seed}"));
        let mut model = build(&spec, seed)?;
        let n0 = spec.count().n_channels;
        let mut hist = Histogram {
            target: cfg.prune.histogram_pct.map_or(0, |p| n0 * p as usize / 100),
            n0,
            captured: None,
        };
        let log = stamp_loop(&mut model, &data, &cfg.stamp_for_seed(seed), &mut hist)?;
        write(&dir.join("prunelog.toml"), &toml::to_string(&log)?)?;
        write(&dir.join("log.csv"), &log.to_csv())?;
        write(&dir.join("evolution.csv"), &log.evolution_csv())?;
        write(
            &dir.join("snapshots.csv"),
            &log.snapshots_csv(&SNAPSHOT_PCTS),
        )?;
        if let Some((s, r)) = &hist.captured {
            write(&dir.join("histogram.csv"), &histogram_csv(s, r))?;
        }
        if cfg.prune.svg {
            prune_charts(&log, &dir)?;
        }

        // the architecture at the step with maximum test Dice
        let best = log
            .events
            .iter()
            .filter(|e| e.dice.is_some())
            .max_by(|a, b| {
                a.dice
                    .unwrap()
                    .total_cmp(&b.dice.unwrap())
                    .then(b.step.cmp(&a.step))
            });
        let (widths, n_params, dice) = match (best, log.initial_dice) {
            (Some(e), Some(d0)) if d0 >= e.dice.unwrap() => {
                (spec.widths.clone(), log.initial_params, d0)
            }
            (Some(e), _) => (e.widths.clone(), e.n_params, e.dice.unwrap()),
            (None, d0) => (spec.widths.clone(), log.initial_params, d0.unwrap_or(0.0)),
        };
        let at = ArchSpec {
            widths,
            ..spec.clone()
        };
        rows.push(SummaryRow {
            label: label.clone(),
            pruning: true,
            n_f: top_level_width(&at),
            n_f_init: top_level_width(&spec),
            n_ch: at.count().n_channels,
            n_params,
            seed,
            dice,
        });
    }
    write(&cell.join(SUMMARY_FILE), &summary_csv(&rows))?;
    write(&cell.join("aggregate.csv"), &aggregate_csv(&rows))?;
    Ok(rows)
}

pub fn load_prune_log(path: &Path) -> Result<PruneLog> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(toml::from_str(&text)?)
}

/// Retrains the snapshot architecture at `pct` percent remaining from a
/// fresh random initialization, once per configured seed.
pub fn cmd_reinit(log_path: &Path, pct: u32, cfg: &ExperimentConfig) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let log = load_prune_log(log_path)?;
    let spec = log.snapshot(pct).ok_or_else(|| {
        Error::Config(format!("{} has no snapshot at {pct}%", log_path.display()))
    })?;
    let data = cfg.load_data()?;
    let label = format!("reinit{pct}:{}", cfg.model_label());
    let dir = cfg
        .out_dir
        .join(format!("reinit{pct}_{}", cfg.model_label()));
    train_cell(
        cfg,
        &data,
        &spec,
        &label,
        top_level_width(&log.initial),
        &dir,
    )
}

pub fn schedule_csv(spec: &ArchSpec, removals: Option<usize>) -> Result<String> {
    let max = spec.count().n_channels - spec.num_convs();
    let table = widest_schedule(spec, removals.unwrap_or(max))?;
    let mut s = String::from("step");
    for c in spec.conv_refs() {
        let _ = write!(
            s,
            ",{}{}_c{}",
            spec.block_kind(c.block).as_str(),
            spec.level(c.block),
            c.conv
        );
    }
    s.push('\n');
    for (step, w) in table.iter().enumerate() {
        let _ = write!(s, "{step}");
        for x in w.iter().flatten() {
            let _ = write!(s, ",{x}");
        }
        s.push('\n');
    }
    Ok(s)
}
