use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::training::{aggregate, median};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "label,kind,n_f,n_f_init,n_ch,n_params,seed,dice";

/// One run's result: a fixed model's final Dice or a pruning run's
/// maximum test Dice with the architecture it was reached at.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub pruning: bool,
    pub n_f: usize,
    pub n_f_init: usize,
    pub n_ch: usize,
    pub n_params: usize,
    pub seed: u64,
    pub dice: f64,
}

impl SummaryRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.label,
            if self.pruning { "pruning" } else { "fixed" },
            self.n_f,
            self.n_f_init,
            self.n_ch,
            self.n_params,
            self.seed,
            self.dice
        )
    }

    fn parse(line: &str, file: &Path) -> Result<Self> {
        let bad = || {
            Error::Format(format!(
                "{}: malformed summary row {line:?}",
                file.display()
            ))
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        Ok(Self {
            label: f[0].to_string(),
            pruning: match f[1] {
                "pruning" => true,
                "fixed" => false,
                _ => return Err(bad()),
            },
            n_f: int(f[2])?,
            n_f_init: int(f[3])?,
            n_ch: int(f[4])?,
            n_params: int(f[5])?,
            seed: f[6].parse().map_err(|_| bad())?,
            dice: f[7].parse().map_err(|_| bad())?,
        })
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

/// Aggregate row over seeds: median N_f, N_ch, N_p and median ± MAD Dice.
pub fn aggregate_csv(rows: &[SummaryRow]) -> String {
    let a = Aggregate::of(rows);
    format!(
        "label,kind,n_f,n_f_init,n_ch,n_params,n_params_mad,dice_median,dice_mad,seeds\n{},{},{},{},{},{},{},{},{},{}\n",
        a.label,
        if a.pruning { "pruning" } else { "fixed" },
        a.n_f,
        a.n_f_init,
        a.n_ch,
        a.n_params,
        a.n_params_mad,
        a.dice.median,
        a.dice.mad,
        a.seeds
    )
}

struct Aggregate {
    label: String,
    pruning: bool,
    n_f: f64,
    n_f_init: usize,
    n_ch: f64,
    n_params: f64,
    n_params_mad: f64,
    dice: crate::training::Summary,
    seeds: usize,
}

impl Aggregate {
    fn of(rows: &[SummaryRow]) -> Self {
        let col = |f: fn(&SummaryRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let params = aggregate(&col(|r| r.n_params as f64));
        Self {
            label: rows[0].label.clone(),
            pruning: rows[0].pruning,
            n_f: median(&col(|r| r.n_f as f64)),
            n_f_init: rows[0].n_f_init,
            n_ch: median(&col(|r| r.n_ch as f64)),
            n_params: params.median,
            n_params_mad: params.mad,
            dice: aggregate(&col(|r| r.dice)),
            seeds: rows.len(),
        }
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

pub fn read_summaries(dir: &Path) -> Result<Vec<SummaryRow>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    let mut rows = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            rows.push(SummaryRow::parse(line, &f)?);
        }
    }
    Ok(rows)
}

fn fmt_count(x: f64) -> String {
    if x == x.trunc() {
        format!("{x:.0}")
    } else {
        format!("{x:.1}")
    }
}

/// Comparison table over every run below `dir`, ordered by N_p descending.
///
/// Pruning rows report the maximum test Dice and carry a "≤" marker: it is
/// an upper bound on what the final pruned model achieves.
pub fn render_report(dir: &Path) -> Result<String> {
    let rows = read_summaries(dir)?;
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no {SUMMARY_FILE} files below {}",
            dir.display()
        )));
    }
    let mut groups: Vec<(String, bool, Vec<SummaryRow>)> = Vec::new();
    for r in rows {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.label && g.1 == r.pruning)
        {
            Some(g) => g.2.push(r),
            None => groups.push((r.label.clone(), r.pruning, vec![r])),
        }
    }
    let mut aggs: Vec<Aggregate> = groups.iter().map(|g| Aggregate::of(&g.2)).collect();
    aggs.sort_by(|a, b| {
        b.n_params
            .total_cmp(&a.n_params)
            .then_with(|| a.label.cmp(&b.label))
    });

    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>8} {:>8} {:>18} {:>18} {:>5}",
        "model", "N_f", "N_ch", "N_p", "Dice", "seeds"
    );
    for a in &aggs {
        let n_f = if a.pruning {
            format!("{} ({})", fmt_count(a.n_f), a.n_f_init)
        } else {
            fmt_count(a.n_f)
        };
        let n_p = if a.pruning {
            format!("{} ± {}", fmt_count(a.n_params), fmt_count(a.n_params_mad))
        } else {
            fmt_count(a.n_params)
        };
        let dice = if a.pruning {
            format!("≤{}", a.dice)
        } else {
            a.dice.to_string()
        };
        let _ = writeln!(
            s,
            "{:<28} {:>8} {:>8} {:>18} {:>18} {:>5}",
            a.label,
            n_f,
            fmt_count(a.n_ch),
            n_p,
            dice,
            a.seeds
        );
    }
    Ok(s)
}
