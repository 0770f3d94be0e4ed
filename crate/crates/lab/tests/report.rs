mod common;

use std::path::Path;

use common::*;
use meta_attack_lab::records::{encode_header, read_results, ResultRecord, COLUMNS};
use meta_attack_lab::report::{recall_vs_budget, report, summarize, Stat, BUDGET_FILE, SUMMARY_FILE};
use meta_attack_lab::LabError;

fn small() -> std::path::PathBuf {
    fixtures().join("results-small.csv")
}

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

// (cell, method, count, clean mean, clean std, attacked mean, attacked std,
//  best reference loss mean), aggregated with numpy (sample std).
const EXPECTED: [(usize, &str, usize, f64, f64, f64, f64, f64); 4] = [
    (0, "meta_attack", 3, 0.36666666666666664, 0.29297326385411576, 0.477778, 0.2110380604606667, 7.1499999999999995),
    (0, "random_noise", 3, 0.7500003333333334, 0.33291640592396965, 0.5833333333333334, 0.36855573979159967, 7.350733333333333),
    (1, "meta_attack", 3, 0.6055556666666667, 0.4814139033060152, 0.5499999999999999, 0.39051248379533277, 6.005866666666667),
    (1, "random_noise", 3, 0.5055556666666666, 0.35052872234002924, 0.3944446666666666, 0.42207581818475853, 6.766566666666667),
];
// cell 1: (clean target recall mean, attacked target recall mean, std)
const EXPECTED_TARGET: [(f64, f64, f64); 2] = [
    (0.461111, 0.47777800000000004, 0.3667927384273031),
    (0.7555553333333332, 0.5555556666666667, 0.1669445572198547),
];

#[test]
fn summary_matches_independent_aggregation() {
    let rows = read_results(&small()).unwrap();
    let summary = summarize(&rows);
    assert_eq!(summary.len(), 4);
    for (s, e) in summary.iter().zip(EXPECTED) {
        assert_eq!((s.cell, s.method.as_str(), s.count), (e.0, e.1, e.2));
        close(s.clean_acc_mean, e.3);
        close(s.clean_acc_std, e.4);
        close(s.attacked_acc_mean, e.5);
        close(s.attacked_acc_std, e.6);
        close(s.reference_loss_best_mean.unwrap(), e.7);
    }
    for (s, e) in summary[2..].iter().zip(EXPECTED_TARGET) {
        close(s.clean_target_recall_mean.unwrap(), e.0);
        close(s.attacked_target_recall_mean.unwrap(), e.1);
        close(s.attacked_target_recall_std.unwrap(), e.2);
    }
    assert!(summary[0].attacked_target_recall_mean.is_none());
}

#[test]
fn single_row_has_zero_spread() {
    let s = Stat::of(&[0.42]);
    assert_eq!((s.mean, s.std), (0.42, 0.0));
    let rows = read_results(&small()).unwrap();
    let one = summarize(&rows[..1]);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].attacked_acc_mean, rows[0].attacked_acc);
    assert_eq!(one[0].attacked_acc_std, 0.0);
}

fn write_rows(path: &Path, rows: &[ResultRecord]) {
    let mut bytes = encode_header();
    bytes.extend(meta_attack_lab::records::encode_rows(rows).unwrap());
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn report_ignores_row_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = read_results(&small()).unwrap();
    let a = report(&small(), &dir.path().join("a")).unwrap();
    rows.reverse();
    rows.swap(1, 7);
    let shuffled = dir.path().join("shuffled.csv");
    write_rows(&shuffled, &rows);
    let b = report(&shuffled, &dir.path().join("b")).unwrap();
    for f in [SUMMARY_FILE, BUDGET_FILE] {
        let read = |d: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
        assert_eq!(read("a"), read("b"), "{f}");
    }
    assert_eq!(a.summary, b.summary);
}

#[test]
fn budget_series_use_target_recall_when_targeted() {
    let rows = read_results(&small()).unwrap();
    let series = recall_vs_budget(&rows);
    assert_eq!(series.len(), 4);
    let direct: Vec<_> = series.iter().filter(|p| p.goal == "direct").collect();
    assert_eq!(direct.len(), 2);
    close(direct[0].attacked_recall_mean, EXPECTED_TARGET[0].1);
    let untargeted = series.iter().find(|p| p.goal == "untargeted" && p.method == "meta_attack").unwrap();
    close(untargeted.attacked_recall_mean, EXPECTED[0].5);
    assert_eq!(untargeted.k, 2);
}

#[test]
fn malformed_rows_are_reported_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(small()).unwrap();
    let cases: [(usize, Box<dyn Fn(&str) -> String>, &str); 5] = [
        (3, Box::new(|l| l.replace(",greedy,random_noise,0.966667,", ",greedy,random_noise,1.5,")), "outside"),
        (4, Box::new(|l| l.replace(",meta_attack,", ",magic,")), "method"),
        (2, Box::new(|l| l.replacen("abc123,0,", "abc123,zero,", 1)), "field 1"),
        (5, Box::new(|l| format!("{l},extra")), ""),
        (8, Box::new(|l| l.replace(",direct,", ",untargeted,")), "target"),
    ];
    for (line, edit, needle) in cases {
        let lines: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| if i + 1 == line { edit(l) } else { l.to_string() })
            .collect();
        assert_ne!(lines.join("\n"), text.trim_end(), "edit on line {line} had no effect");
        let path = dir.path().join(format!("bad{line}.csv"));
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        match read_results(&path) {
            Err(LabError::Malformed { line: l, message, .. }) => {
                assert_eq!(l, line as u64, "{message}");
                assert!(message.contains(needle), "{message}");
            }
            other => panic!("line {line}: {other:?}"),
        }
    }
}

#[test]
fn duplicate_keys_and_wrong_headers_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(small()).unwrap();
    let second = text.lines().nth(1).unwrap();
    let dup = dir.path().join("dup.csv");
    std::fs::write(&dup, format!("{text}{second}\n")).unwrap();
    assert!(matches!(read_results(&dup), Err(LabError::Malformed { line: 14, .. })));

    let header = dir.path().join("header.csv");
    std::fs::write(&header, text.replacen("run_id", "run", 1)).unwrap();
    assert!(matches!(read_results(&header), Err(LabError::Malformed { line: 1, .. })));
}

#[test]
fn serialized_field_order_is_the_column_order() {
    let rows = read_results(&small()).unwrap();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(&rows[0]).unwrap();
    let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
    assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
    assert_eq!(String::from_utf8(encode_header()).unwrap().trim_end(), COLUMNS.join(","));
}
