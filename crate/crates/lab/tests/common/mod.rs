#![allow(dead_code)]

use std::path::{Path, PathBuf};

use meta_attack_lab::config::ExperimentConfig;
use meta_attack_lab::run;
use serde_json::{json, Value};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn shipped_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A small, fast 3-way 2-shot MAML experiment on the synthetic family.
pub fn tiny_json() -> Value {
    json!({
        "version": 1,
        "name": "tiny",
        "seed": 5,
        "learner": { "variant": "maml", "hidden": [16], "inner_lr": 0.3, "finetune_steps": 1 },
        "tasks": { "source": "synthetic" },
        "shape": { "way": 3, "shot": 2, "query": 3 },
        "training": { "epochs": 4, "tasks_per_epoch": 8, "outer_lr": 0.01, "meta_batch": 4, "eval_episodes": 3 },
        "evaluation": { "episodes": 4 },
        "grid": [
            { "goal": "untargeted", "k": 1, "epsilon": 0.1, "step_size": 0.025, "steps": 3 },
            { "goal": "untargeted", "k": 2, "epsilon": 0.1, "step_size": 0.025, "steps": 3, "selection": "random_subset" },
            { "goal": "direct", "k": 2, "epsilon": 0.1, "step_size": 0.05, "steps": 2, "selection": "all_pool" },
            { "goal": "influence", "target": 1, "k": 1, "epsilon": 0.1, "step_size": 0.05, "steps": 2 }
        ],
        "methods": ["meta_attack", "random_noise", "random_finetune"]
    })
}

pub fn config_from(value: &Value, dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_json(&value.to_string(), dir).unwrap()
}

/// Writes the config to `dir/config.json` and returns its path.
pub fn write_config(value: &Value, dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// Meta-trains the config into `dir/train` and returns the checkpoint path.
pub fn train(config: &ExperimentConfig, dir: &Path) -> PathBuf {
    run::metatrain(config, &dir.join("train")).unwrap().checkpoint
}
