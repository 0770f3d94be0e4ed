//! End-to-end acceptance checks on the shipped experiment configs.
//!
//! Runs as a plain binary (`harness = false`), prints one PASS/FAIL line per
//! criterion and exits nonzero if any fails. Expect roughly a quarter hour on
//! one core.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use meta_attack_core::attack::{
    greedy_select, pgd_on_selected, reference_loss_value, AttackBudget, AttackGoal, GreedyOptions, Serial,
};
use meta_attack_lab::checkpoint::Checkpoint;
use meta_attack_lab::config::ExperimentConfig;
use meta_attack_lab::records::{read_results, ResultRecord};
use meta_attack_lab::run::{self, episode_seed, task_set, AttackOptions, RESULTS_FILE};
use serde_json::{json, Value};

type Check = Result<String, String>;

struct Suite {
    dir: tempfile::TempDir,
    failures: usize,
}

impl Suite {
    fn record(&mut self, id: &str, title: &str, started: Instant, result: Check) {
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id} {title} ({secs:.0}s): {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL {id} {title} ({secs:.0}s): {detail}");
            }
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn shipped(name: &str) -> Value {
    let text = std::fs::read_to_string(shipped_configs().join(format!("{name}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn config(value: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json(&value.to_string(), &shipped_configs()).unwrap()
}

fn train_into(value: &Value, dir: &Path) -> PathBuf {
    run::metatrain(&config(value), dir).unwrap().checkpoint
}

fn attack_rows(value: &Value, checkpoint: &Path, out: &Path) -> Vec<ResultRecord> {
    let cfg = config(value);
    let options = AttackOptions { jobs: 1, stop_after: None };
    run::attack(&cfg, checkpoint, out, &options).unwrap();
    read_results(&out.join(RESULTS_FILE)).unwrap()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over episodes of `pick` for one cell and method.
fn cell_mean(rows: &[ResultRecord], cell: usize, method: &str, pick: impl Fn(&ResultRecord) -> f64) -> f64 {
    mean(rows.iter().filter(|r| r.cell == cell && r.method == method).map(pick))
}

fn pts(x: f64) -> f64 {
    100.0 * x
}

fn gradient_fidelity() -> Check {
    let started = Instant::now();
    let reports = meta_attack_lab::gradcheck(meta_attack_lab::GRADCHECK_SEED, None).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let ops = reports.iter().filter(|r| r.op.is_some()).collect::<Vec<_>>();
    let few = ops.iter().filter(|r| r.cases < 20).count();
    let unrolls = ["1-step", "2-step", "5-step"]
        .iter()
        .filter(|u| reports.iter().any(|r| r.op.is_none() && r.name.contains(*u) && r.tolerance <= 1e-3))
        .count();
    let worst = ops.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let detail = format!(
        "{} checks in {secs:.1}s, worst op rel err {worst:.1e}, {unrolls}/3 unroll depths",
        reports.len()
    );
    let tolerant = ops.iter().all(|r| r.tolerance <= 1e-4);
    if failed.is_empty() && few == 0 && unrolls == 3 && tolerant && ops.len() == 19 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {failed:?}, ops with < 20 cases: {few}"))
    }
}

fn main() -> ExitCode {
    let mut suite = Suite {
        dir: tempfile::tempdir().unwrap(),
        failures: 0,
    };

    let t = Instant::now();
    let c1 = gradient_fidelity();
    suite.record("C1", "gradient fidelity", t, c1);

    // 1-step MAML: the untargeted budget grid of the shipped config.
    let t = Instant::now();
    let one_step = shipped("maml-1step");
    let one_ck = train_into(&one_step, &suite.path("maml-1step"));
    let grid = attack_rows(&one_step, &one_ck, &suite.path("maml-1step/grid"));
    eprintln!("1-step MAML trained and attacked in {:.0}s", t.elapsed().as_secs_f64());
    let ks: Vec<usize> = one_step["grid"].as_array().unwrap().iter().map(|c| c["k"].as_u64().unwrap() as usize).collect();
    let k5 = ks.iter().position(|&k| k == 5).unwrap();
    let clean = cell_mean(&grid, k5, "meta_attack", |r| r.clean_acc);
    let attacked = cell_mean(&grid, k5, "meta_attack", |r| r.attacked_acc);
    let noisy = cell_mean(&grid, k5, "random_noise", |r| r.attacked_acc);
    let episodes = grid.iter().filter(|r| r.cell == k5 && r.method == "meta_attack").count();
    let detail = format!(
        "{episodes} episodes, clean {:.1}, attacked {:.1} ({:.1} below clean, {:.1} below noise), noise {:.1}",
        pts(clean),
        pts(attacked),
        pts(clean - attacked),
        pts(noisy - attacked),
        pts(noisy)
    );
    let ok = episodes == 100
        && pts(clean - attacked) >= 20.0
        && pts(noisy - attacked) >= 15.0
        && pts((clean - noisy).abs()) <= 5.0;
    suite.record("C3", "attack beats noise (1-step MAML, k=5, eps=0.1)", t, if ok { Ok(detail) } else { Err(detail) });

    let t = Instant::now();
    let curve: Vec<(usize, f64)> = ks
        .iter()
        .enumerate()
        .map(|(cell, &k)| (k, cell_mean(&grid, cell, "meta_attack", |r| r.attacked_acc)))
        .collect();
    let monotone = curve.windows(2).all(|w| pts(w[1].1) <= pts(w[0].1) + 2.0);
    let detail = curve.iter().map(|(k, a)| format!("k={k}: {:.1}", pts(*a))).collect::<Vec<_>>().join(", ");
    let ok = monotone && ks == [1, 2, 5, 10];
    suite.record("C4", "budget monotonicity", t, if ok { Ok(detail) } else { Err(detail) });

    // 10-step MAML: clean accuracy and the fine-tuning robustness trend.
    let subset = |mut v: Value| {
        v["grid"] = json!([{ "goal": "untargeted", "k": 5, "epsilon": 0.1, "step_size": 0.025, "steps": 10,
                             "selection": "random_subset" }]);
        v["methods"] = json!(["meta_attack"]);
        v
    };
    let t = Instant::now();
    let ten_step = shipped("maml-10step");
    let ten_ck = train_into(&ten_step, &suite.path("maml-10step"));
    let ten_rows = attack_rows(&subset(ten_step), &ten_ck, &suite.path("maml-10step/subset"));
    let clean10 = mean(ten_rows.iter().map(|r| r.clean_acc));
    let detail = format!("{} episodes, mean held-out accuracy {:.1}", ten_rows.len(), pts(clean10));
    let ok = ten_rows.len() == 100 && clean10 >= 0.90;
    suite.record("C2", "clean meta-learning (10-step MAML)", t, if ok { Ok(detail) } else { Err(detail) });

    let t = Instant::now();
    let one_rows = attack_rows(&subset(one_step.clone()), &one_ck, &suite.path("maml-1step/subset"));
    let att1 = mean(one_rows.iter().map(|r| r.attacked_acc));
    let att10 = mean(ten_rows.iter().map(|r| r.attacked_acc));
    let detail = format!("random 5-subset attack: 1-step {:.1}, 10-step {:.1}", pts(att1), pts(att10));
    let ok = pts(att10) >= pts(att1) - 2.0;
    suite.record("C5", "fine-tuning robustness trend", t, if ok { Ok(detail) } else { Err(detail) });

    let t = Instant::now();
    let c6 = greedy_near_optimality(&suite);
    suite.record("C6", "greedy near-optimality (pool 6, k=2)", t, c6);

    let t = Instant::now();
    let c7 = targeted(&suite, &one_ck);
    suite.record("C7", "targeted behavior", t, c7);

    let t = Instant::now();
    let c8 = identities(&suite, &one_ck);
    suite.record("C8", "identity and constraint suite", t, c8);

    let t = Instant::now();
    let c9 = determinism(&suite, &one_ck);
    suite.record("C9", "determinism", t, c9);

    if suite.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", suite.failures);
        ExitCode::FAILURE
    }
}

fn greedy_near_optimality(suite: &Suite) -> Check {
    let mut v = shipped("maml-1step");
    v["name"] = "greedy-check".into();
    v["shape"] = json!({ "way": 3, "shot": 2, "query": 10 });
    v["training"]["epochs"] = 300.into();
    v["grid"] = json!([{ "goal": "untargeted", "k": 2, "epsilon": 0.1, "step_size": 0.025, "steps": 10 }]);
    let cfg = config(&v);
    let ck = train_into(&v, &suite.path("greedy"));
    let learner = Checkpoint::load(&ck).map_err(|e| e.to_string())?.learner().map_err(|e| e.to_string())?;
    let sampler = task_set(&cfg).map_err(|e| e.to_string())?.held_out;
    let budget = AttackBudget { k: 2, epsilon: 0.1, step_size: 0.025, steps: 10 };
    let goal = AttackGoal::Untargeted;

    let mut ratios = Vec::new();
    for i in 0..20 {
        let ep = sampler.episode(episode_seed(cfg.seed, i)).map_err(|e| e.to_string())?;
        assert_eq!(ep.train.inputs.shape()[0], 6);
        let greedy = greedy_select(&learner, &ep, &goal, &budget, GreedyOptions::default(), &Serial)
            .map_err(|e| e.to_string())?;
        let mut best = f64::NEG_INFINITY;
        let mut pairs = 0;
        for a in 0..6 {
            for b in a + 1..6 {
                let out = pgd_on_selected(&learner, &ep, &[a, b], &goal, &budget).map_err(|e| e.to_string())?;
                best = best.max(out.best_loss);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 15);
        ratios.push(greedy.best_loss / best);
    }
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let passing = ratios.iter().filter(|&&r| r >= 0.9).count();
    let detail = format!(
        "{passing}/{} seeds at >= 0.9, worst greedy/exhaustive ratio {worst:.4}, mean {:.4}",
        ratios.len(),
        mean(ratios.clone())
    );
    if ratios.len() >= 20 && worst >= 0.9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn target_recalls(rows: &[ResultRecord], cell: usize) -> (f64, f64) {
    let clean = cell_mean(rows, cell, "meta_attack", |r| r.clean_target_recall.unwrap());
    let attacked = cell_mean(rows, cell, "meta_attack", |r| r.attacked_target_recall.unwrap());
    (clean, attacked)
}

fn targeted(suite: &Suite, maml_ck: &Path) -> Check {
    let maml = shipped("maml-1step-targeted");
    let maml_rows = attack_rows(&maml, maml_ck, &suite.path("maml-1step/targeted"));
    let proto = shipped("proto");
    let proto_ck = train_into(&proto, &suite.path("proto"));
    let proto_rows = attack_rows(&proto, &proto_ck, &suite.path("proto/targeted"));

    let cells = |v: &Value| -> BTreeMap<String, usize> {
        v["grid"]
            .as_array()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, c)| (c["goal"].as_str().unwrap().to_string(), i))
            .collect()
    };
    let (mc, mp) = (cells(&maml), cells(&proto));
    let maml_direct = target_recalls(&maml_rows, mc["direct"]);
    let maml_influence = target_recalls(&maml_rows, mc["influence"]);
    let proto_direct = target_recalls(&proto_rows, mp["direct"]);
    let proto_influence = target_recalls(&proto_rows, mp["influence"]);

    let all_pool = |v: &Value| v["grid"].as_array().unwrap().iter().all(|c| c["k"] == 5 && c["selection"] == "all_pool");
    let checks = [
        ("MAML direct recall < 30", pts(maml_direct.1) < 30.0),
        ("proto direct recall < 30", pts(proto_direct.1) < 30.0),
        ("MAML influence lowers recall by >= 5", pts(maml_influence.0 - maml_influence.1) >= 5.0),
        ("proto influence moves recall < 10", pts((proto_influence.0 - proto_influence.1).abs()) < 10.0),
        ("all target shots perturbed", all_pool(&maml) && all_pool(&proto)),
    ];
    let detail = format!(
        "target recall clean -> attacked: MAML direct {:.1} -> {:.1}, MAML influence {:.1} -> {:.1}, \
         proto direct {:.1} -> {:.1}, proto influence {:.1} -> {:.1}",
        pts(maml_direct.0),
        pts(maml_direct.1),
        pts(maml_influence.0),
        pts(maml_influence.1),
        pts(proto_direct.0),
        pts(proto_direct.1),
        pts(proto_influence.0),
        pts(proto_influence.1)
    );
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", failed.join(", ")))
    }
}

fn identities(suite: &Suite, maml_ck: &Path) -> Check {
    let mut v = shipped("maml-1step");
    v["name"] = "identities".into();
    v["evaluation"]["episodes"] = 20.into();
    v["grid"] = json!([
        { "goal": "untargeted", "k": 5, "epsilon": 0.0, "step_size": 0.025, "steps": 10 },
        { "goal": "untargeted", "k": 0, "epsilon": 0.1, "step_size": 0.025, "steps": 10 },
        { "goal": "untargeted", "k": 5, "epsilon": 0.1, "step_size": 0.025, "steps": 0, "selection": "random_subset" },
        { "goal": "direct", "k": 5, "epsilon": 0.0, "step_size": 0.025, "steps": 10, "selection": "all_pool" },
        { "goal": "untargeted", "k": 5, "epsilon": 0.1, "step_size": 0.025, "steps": 10 },
        { "goal": "influence", "k": 5, "epsilon": 0.15, "step_size": 0.025, "steps": 10, "selection": "all_pool" }
    ]);
    v["methods"] = json!(["meta_attack", "random_noise"]);
    v["output"] = json!({ "dump_outcomes": true });
    let out = suite.path("identities");
    let rows = attack_rows(&v, maml_ck, &out);

    let mut problems = Vec::new();
    let mut identity_rows = 0;
    for r in rows.iter().filter(|r| r.cell < 4) {
        // noise ignores the step count
        if r.method == "random_noise" && r.epsilon > 0.0 && r.k > 0 {
            continue;
        }
        identity_rows += 1;
        let same = r.attacked_acc.to_bits() == r.clean_acc.to_bits()
            && r.attacked_recall == r.clean_recall
            && r.attacked_target_recall.map(f64::to_bits) == r.clean_target_recall.map(f64::to_bits);
        if !same {
            problems.push(format!("episode {} cell {} {} changed accuracy", r.episode, r.cell, r.method));
        }
    }

    let cfg = config(&v);
    let learner = Checkpoint::load(maml_ck).map_err(|e| e.to_string())?.learner().map_err(|e| e.to_string())?;
    let sampler = task_set(&cfg).map_err(|e| e.to_string())?.held_out;
    let mut samples = 0;
    let mut outcomes = 0;
    for i in 0..20 {
        let ep = sampler.episode(episode_seed(cfg.seed, i)).map_err(|e| e.to_string())?;
        let path = out.join("outcomes").join(format!("episode-{i:05}.json"));
        let dumps: Vec<Value> = serde_json::from_slice(&std::fs::read(&path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        for d in &dumps {
            outcomes += 1;
            let cell = &cfg.grid[d["cell"].as_u64().unwrap() as usize];
            let selected: Vec<usize> = serde_json::from_value(d["selected"].clone()).unwrap();
            let perturbed: Vec<Vec<f64>> = serde_json::from_value(d["perturbed"].clone()).unwrap();
            let goal = match (d["target"].as_u64(), d["attack_class"].as_u64()) {
                (None, _) => AttackGoal::Untargeted,
                (Some(t), None) => AttackGoal::direct(t as usize),
                (Some(t), Some(a)) => AttackGoal::influence(t as usize, a as usize),
            };
            let pool = goal.pool(&ep.train);
            if selected.len() > cell.budget(&cfg.shape).k || !selected.iter().all(|s| pool.contains(s)) {
                problems.push(format!("episode {i}: selection {selected:?} outside budget or pool"));
            }
            // rebuild the poisoned support set from clean samples and the dumped rows
            let mut inputs = ep.train.inputs.clone();
            for (&s, row) in selected.iter().zip(&perturbed) {
                samples += 1;
                for (x, c) in row.iter().zip(ep.train.inputs.row(s)) {
                    if (x - c).abs() > cell.epsilon + 1e-12 || !(0.0..=1.0).contains(x) {
                        problems.push(format!("episode {i}: sample {s} leaves the eps-ball or [0,1]"));
                    }
                }
                inputs.row_mut(s).copy_from_slice(row);
            }
            if d["method"] == "meta_attack" {
                let loss = reference_loss_value(&learner, &inputs, &ep.train, &goal).map_err(|e| e.to_string())?;
                let reported = d["best_loss"].as_f64().unwrap();
                if (loss - reported).abs() > 1e-9 * reported.abs().max(1.0) {
                    problems.push(format!("episode {i}: dumped samples give loss {loss}, run reported {reported}"));
                }
            }
        }
    }
    let detail = format!(
        "{identity_rows} identity rows unchanged; {outcomes} dumped outcomes, {samples} perturbed samples re-verified"
    );
    if problems.is_empty() && identity_rows > 0 && samples > 0 {
        Ok(detail)
    } else {
        problems.truncate(5);
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

fn determinism(suite: &Suite, maml_ck: &Path) -> Check {
    let mut v = shipped("maml-1step");
    v["name"] = "determinism".into();
    v["evaluation"]["episodes"] = 10.into();
    v["grid"] = json!([
        { "goal": "untargeted", "k": 2, "epsilon": 0.1, "step_size": 0.025, "steps": 10 },
        { "goal": "untargeted", "k": 5, "epsilon": 0.1, "step_size": 0.025, "steps": 10, "selection": "random_subset" },
        { "goal": "direct", "k": 5, "epsilon": 0.15, "step_size": 0.025, "steps": 10, "selection": "all_pool" }
    ]);
    let a = suite.path("determinism-a");
    let b = suite.path("determinism-b");
    let rows = attack_rows(&v, maml_ck, &a).len();
    attack_rows(&v, maml_ck, &b);
    let (x, y) = (std::fs::read(a.join(RESULTS_FILE)).unwrap(), std::fs::read(b.join(RESULTS_FILE)).unwrap());
    let detail = format!("{rows} rows, {} bytes", x.len());
    if x == y {
        Ok(detail)
    } else {
        Err(format!("{detail}; the two result files differ"))
    }
}
