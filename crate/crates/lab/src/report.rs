//! Aggregation of results files: one summary row per grid cell and method,
//! and recall-vs-budget series for plotting.
//!
//! Standard deviations are sample standard deviations (n − 1), zero for a
//! single row. Values are summed in sorted order, so the output does not
//! depend on the row order of the input.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Method;
use crate::error::{io_err, Result};
use crate::records::{read_results, ResultRecord};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const BUDGET_FILE: &str = "recall_vs_budget.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let std = if v.len() > 1 {
            (sq.iter().sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub cell: usize,
    pub learner: String,
    pub ft_steps: Option<usize>,
    pub goal: String,
    pub target_class: String,
    pub attack_class: String,
    pub k: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub pgd_steps: usize,
    pub selection: String,
    pub method: String,
    pub count: usize,
    pub clean_acc_mean: f64,
    pub clean_acc_std: f64,
    pub attacked_acc_mean: f64,
    pub attacked_acc_std: f64,
    pub clean_target_recall_mean: Option<f64>,
    pub attacked_target_recall_mean: Option<f64>,
    pub attacked_target_recall_std: Option<f64>,
    pub reference_loss_best_mean: Option<f64>,
}

/// One point of a recall-vs-budget series. For untargeted goals the recall
/// is the overall test accuracy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetPoint {
    pub run_id: String,
    pub learner: String,
    pub ft_steps: Option<usize>,
    pub goal: String,
    pub target_class: String,
    pub attack_class: String,
    pub selection: String,
    pub method: String,
    pub epsilon: f64,
    pub k: usize,
    pub count: usize,
    pub clean_recall_mean: f64,
    pub attacked_recall_mean: f64,
    pub attacked_recall_std: f64,
}

fn method_rank(name: &str) -> usize {
    Method::ALL.iter().position(|m| m.name() == name).unwrap_or(usize::MAX)
}

fn optional_stat(rows: &[&ResultRecord], f: impl Fn(&ResultRecord) -> Option<f64>) -> Option<Stat> {
    rows.iter().map(|r| f(r)).collect::<Option<Vec<f64>>>().map(|v| Stat::of(&v))
}

pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, usize, String), Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.run_id.clone(), r.cell, method_rank(&r.method), r.method.clone());
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rows| {
            let first = rows[0];
            let stat = |f: fn(&ResultRecord) -> f64| Stat::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let clean = stat(|r| r.clean_acc);
            let attacked = stat(|r| r.attacked_acc);
            let attacked_target = optional_stat(&rows, |r| r.attacked_target_recall);
            SummaryRow {
                run_id: first.run_id.clone(),
                cell: first.cell,
                learner: first.learner.clone(),
                ft_steps: first.ft_steps,
                goal: first.goal.clone(),
                target_class: first.target_class.clone(),
                attack_class: first.attack_class.clone(),
                k: first.k,
                epsilon: first.epsilon,
                step_size: first.step_size,
                pgd_steps: first.pgd_steps,
                selection: first.selection.clone(),
                method: first.method.clone(),
                count: rows.len(),
                clean_acc_mean: clean.mean,
                clean_acc_std: clean.std,
                attacked_acc_mean: attacked.mean,
                attacked_acc_std: attacked.std,
                clean_target_recall_mean: optional_stat(&rows, |r| r.clean_target_recall).map(|s| s.mean),
                attacked_target_recall_mean: attacked_target.map(|s| s.mean),
                attacked_target_recall_std: attacked_target.map(|s| s.std),
                reference_loss_best_mean: optional_stat(&rows, |r| r.reference_loss_best).map(|s| s.mean),
            }
        })
        .collect()
}

type SeriesKey = (String, String, Option<usize>, String, String, String, String, usize, String, u64, usize);

pub fn recall_vs_budget(records: &[ResultRecord]) -> Vec<BudgetPoint> {
    let mut groups: BTreeMap<SeriesKey, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.run_id.clone(),
            r.learner.clone(),
            r.ft_steps,
            r.goal.clone(),
            r.target_class.clone(),
            r.attack_class.clone(),
            r.selection.clone(),
            method_rank(&r.method),
            r.method.clone(),
            r.epsilon.to_bits(),
            r.k,
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rows| {
            let first = rows[0];
            let recall = |clean: bool| -> Vec<f64> {
                rows.iter()
                    .map(|r| {
                        let (target, acc) = if clean {
                            (r.clean_target_recall, r.clean_acc)
                        } else {
                            (r.attacked_target_recall, r.attacked_acc)
                        };
                        target.unwrap_or(acc)
                    })
                    .collect()
            };
            let attacked = Stat::of(&recall(false));
            BudgetPoint {
                run_id: first.run_id.clone(),
                learner: first.learner.clone(),
                ft_steps: first.ft_steps,
                goal: first.goal.clone(),
                target_class: first.target_class.clone(),
                attack_class: first.attack_class.clone(),
                selection: first.selection.clone(),
                method: first.method.clone(),
                epsilon: first.epsilon,
                k: first.k,
                count: rows.len(),
                clean_recall_mean: Stat::of(&recall(true)).mean,
                attacked_recall_mean: attacked.mean,
                attacked_recall_std: attacked.std,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("writing to memory");
    }
    std::fs::write(path, w.into_inner().expect("writing to memory")).map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub budget: Vec<BudgetPoint>,
    pub summary_path: PathBuf,
    pub budget_path: PathBuf,
}

/// Reads a results file and writes `summary.csv` and
/// `recall_vs_budget.csv` into `out_dir`.
pub fn report(input: &Path, out_dir: &Path) -> Result<Report> {
    let records = read_results(input)?;
    let summary = summarize(&records);
    let budget = recall_vs_budget(&records);
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let summary_path = out_dir.join(SUMMARY_FILE);
    let budget_path = out_dir.join(BUDGET_FILE);
    write_csv(&summary_path, &summary)?;
    write_csv(&budget_path, &budget)?;
    Ok(Report {
        summary,
        budget,
        summary_path,
        budget_path,
    })
}

/// Fixed-width text table of a summary.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:>4} {:<6} {:>3} {:<10} {:>6} {:>3} {:>6} {:<13} {:<15} {:>5} {:>15} {:>15} {:>15}\n",
        "cell", "model", "ft", "goal", "target", "k", "eps", "selection", "method", "n", "clean", "attacked", "target recall"
    );
    let pm = |m: f64, s: f64| format!("{:.3} ± {:.3}", m, s);
    for r in rows {
        out += &format!(
            "{:>4} {:<6} {:>3} {:<10} {:>6} {:>3} {:>6} {:<13} {:<15} {:>5} {:>15} {:>15} {:>15}\n",
            r.cell,
            r.learner,
            r.ft_steps.map_or("-".into(), |s| s.to_string()),
            r.goal,
            if r.target_class.is_empty() { "-" } else { &r.target_class },
            r.k,
            r.epsilon,
            r.selection,
            r.method,
            r.count,
            pm(r.clean_acc_mean, r.clean_acc_std),
            pm(r.attacked_acc_mean, r.attacked_acc_std),
            match (r.attacked_target_recall_mean, r.attacked_target_recall_std) {
                (Some(m), Some(s)) => pm(m, s),
                _ => "-".into(),
            }
        );
    }
    out
}
