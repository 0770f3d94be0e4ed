//! Result rows: one per (episode, grid cell, method), stored as RFC 4180
//! CSV with a header. Rows are checked against the schema when written and
//! when read back.

use std::collections::HashSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::error::{io_err, LabError, Result};

/// Column order of the results file.
pub const COLUMNS: [&str; 26] = [
    "run_id",
    "episode",
    "episode_seed",
    "cell",
    "learner",
    "ft_steps",
    "goal",
    "target_class",
    "attack_class",
    "pairs",
    "k",
    "epsilon",
    "step_size",
    "pgd_steps",
    "selection",
    "method",
    "clean_acc",
    "attacked_acc",
    "clean_target_recall",
    "attacked_target_recall",
    "clean_recall",
    "attacked_recall",
    "reference_loss_clean",
    "reference_loss_best",
    "wall_ms",
    "seed",
];

/// Targeted values are averages over the class pairs of the cell; `pairs`
/// counts them. Per-class recalls are `;`-separated with an empty entry for
/// a class absent from the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub run_id: String,
    pub episode: usize,
    pub episode_seed: u64,
    pub cell: usize,
    pub learner: String,
    pub ft_steps: Option<usize>,
    pub goal: String,
    pub target_class: String,
    pub attack_class: String,
    pub pairs: usize,
    pub k: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub pgd_steps: usize,
    pub selection: String,
    pub method: String,
    pub clean_acc: f64,
    pub attacked_acc: f64,
    pub clean_target_recall: Option<f64>,
    pub attacked_target_recall: Option<f64>,
    pub clean_recall: String,
    pub attacked_recall: String,
    pub reference_loss_clean: Option<f64>,
    pub reference_loss_best: Option<f64>,
    pub wall_ms: Option<f64>,
    /// Seed of the method's own randomness.
    pub seed: u64,
}

pub fn format_recall(recall: &[Option<f64>]) -> String {
    recall
        .iter()
        .map(|r| r.map_or_else(String::new, |v| v.to_string()))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_recall(text: &str) -> std::result::Result<Vec<Option<f64>>, String> {
    text.split(';')
        .map(|part| {
            if part.is_empty() {
                Ok(None)
            } else {
                part.parse::<f64>()
                    .map(Some)
                    .map_err(|e| format!("recall entry `{part}`: {e}"))
            }
        })
        .collect()
}

fn unit(name: &str, v: f64) -> std::result::Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} = {v} is outside [0, 1]"))
    }
}

impl ResultRecord {
    pub fn key(&self) -> (String, u64, usize, String) {
        (self.run_id.clone(), self.episode_seed, self.cell, self.method.clone())
    }

    pub fn targeted(&self) -> bool {
        self.goal != "untargeted"
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.run_id.is_empty() {
            return Err("empty run_id".into());
        }
        if !["maml", "proto", "seq"].contains(&self.learner.as_str()) {
            return Err(format!("unknown learner `{}`", self.learner));
        }
        if !["untargeted", "direct", "influence"].contains(&self.goal.as_str()) {
            return Err(format!("unknown goal `{}`", self.goal));
        }
        if !["greedy", "random_subset", "all_pool"].contains(&self.selection.as_str()) {
            return Err(format!("unknown selection `{}`", self.selection));
        }
        if Method::from_name(&self.method).is_none() {
            return Err(format!("unknown method `{}`", self.method));
        }
        if self.pairs == 0 {
            return Err("pairs must be at least 1".into());
        }
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) {
            return Err("epsilon and step_size must be non-negative".into());
        }
        unit("clean_acc", self.clean_acc)?;
        unit("attacked_acc", self.attacked_acc)?;
        let targeted = self.targeted();
        for (name, v) in [
            ("clean_target_recall", self.clean_target_recall),
            ("attacked_target_recall", self.attacked_target_recall),
        ] {
            match (targeted, v) {
                (true, Some(v)) => unit(name, v)?,
                (false, None) => {}
                (true, None) => return Err(format!("{name} missing on a targeted row")),
                (false, Some(_)) => return Err(format!("{name} set on an untargeted row")),
            }
        }
        if targeted == self.target_class.is_empty() {
            return Err("target_class must be set exactly on targeted rows".into());
        }
        let clean = parse_recall(&self.clean_recall)?;
        let attacked = parse_recall(&self.attacked_recall)?;
        if clean.len() != attacked.len() {
            return Err("clean and attacked recall lists differ in length".into());
        }
        for v in clean.iter().chain(&attacked).flatten() {
            unit("recall", *v)?;
        }
        for v in [self.reference_loss_clean, self.reference_loss_best, self.wall_ms]
            .into_iter()
            .flatten()
        {
            if !v.is_finite() {
                return Err(format!("non-finite value {v}"));
            }
        }
        Ok(())
    }
}

/// Serializes rows (no header) after validating each.
pub fn encode_rows(rows: &[ResultRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        r.validate().map_err(|message| LabError::Malformed {
            path: "<new row>".into(),
            line: 0,
            message,
        })?;
        w.serialize(r).expect("writing to memory");
    }
    Ok(w.into_inner().expect("writing to memory"))
}

pub fn encode_header() -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).expect("writing to memory");
    w.into_inner().expect("writing to memory")
}

/// Rows parsed from CSV bytes, each with the byte offset just past it.
pub(crate) fn decode_rows(path: &Path, bytes: &[u8]) -> Result<Vec<(ResultRecord, u64)>> {
    let malformed = |line: u64, message: String| LabError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(malformed(1, format!("header must be `{}`", COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(malformed(e.position().map_or(line, |p| p.line()), e.to_string())),
        }
        let row: ResultRecord = record
            .deserialize(Some(&header))
            .map_err(|e| malformed(line, e.to_string()))?;
        row.validate().map_err(|m| malformed(line, m))?;
        if !seen.insert(row.key()) {
            return Err(malformed(line, "duplicate (run, episode, cell, method) key".into()));
        }
        rows.push((row, reader.position().byte()));
    }
    Ok(rows)
}

/// Reads and validates a complete results file.
pub fn read_results(path: &Path) -> Result<Vec<ResultRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    Ok(decode_rows(path, &bytes)?.into_iter().map(|(r, _)| r).collect())
}
