//! The `metatrain` and `attack` commands.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use meta_attack_core::attack::{
    greedy_stages, random_baseline, random_finetune_baseline, run_attack, AttackBudget, AttackGoal, AttackOutcome,
    GreedyOptions, Serial,
};
use meta_attack_core::learner::{meta_train, Learner, MetaLearner, MetaTrainConfig, TrainingCurve};
use meta_attack_core::model::{ClassifierSpec, Metrics};
use meta_attack_core::rng::derive_seed;
use meta_attack_core::tasks::{ImageSampler, SyntheticSampler, SyntheticTaskFamily, TaskSampler};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{build_learner, sha256_hex, Checkpoint, Sidecar, FORMAT_VERSION};
use crate::config::{ExperimentConfig, GridCell, LearnerConfig, Method, SelectionKind, TaskSource};
use crate::error::{io_err, LabError, Result};
use crate::images::load_image_pool;
use crate::records::{decode_rows, encode_header, encode_rows, format_recall, ResultRecord};

// Seed streams derived from the master seed.
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const EPISODE_STREAM: u64 = 3;
// Streams derived from an episode seed; the cell index is added.
const SUBSET_STREAM: u64 = 1 << 20;
const NOISE_STREAM: u64 = 2 << 20;
const FINETUNE_STREAM: u64 = 3 << 20;

pub const CHECKPOINT_FILE: &str = "checkpoint.mpar";
pub const CURVE_FILE: &str = "curve.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const RUN_RECORD_FILE: &str = "run.json";

/// Seed of evaluation episode `index`. Growing the episode count leaves
/// earlier seeds unchanged.
pub fn episode_seed(master: u64, index: usize) -> u64 {
    derive_seed(derive_seed(master, EPISODE_STREAM), index as u64)
}

pub fn init_seed(master: u64) -> u64 {
    derive_seed(master, INIT_STREAM)
}

pub fn train_seed(master: u64) -> u64 {
    derive_seed(master, TRAIN_STREAM)
}

/// Meta-training and evaluation task samplers.
pub struct TaskSet {
    pub train: Box<dyn TaskSampler + Sync>,
    pub held_out: Box<dyn TaskSampler + Sync>,
    pub input_dim: usize,
}

pub fn task_set(config: &ExperimentConfig) -> Result<TaskSet> {
    let shape = config.shape.episode_shape()?;
    Ok(match &config.tasks {
        TaskSource::Synthetic(s) => {
            let family = SyntheticTaskFamily::new(
                s.dim,
                s.radius,
                s.noise,
                s.min_separation,
                s.directions,
                s.family_seed,
            )?;
            let (train, held_out) = family.split(s.held_out_directions)?;
            TaskSet {
                train: Box::new(SyntheticSampler { family: train, shape }),
                held_out: Box::new(SyntheticSampler {
                    family: held_out,
                    shape,
                }),
                input_dim: s.dim,
            }
        }
        TaskSource::Images {
            train_manifest,
            test_manifest,
        } => {
            let train = load_image_pool(train_manifest)?;
            let held_out = load_image_pool(test_manifest)?;
            if train.image_dim != held_out.image_dim {
                return Err(LabError::Config {
                    path: test_manifest.clone(),
                    message: format!(
                        "images have {} pixels, training images {}",
                        held_out.image_dim, train.image_dim
                    ),
                });
            }
            TaskSet {
                input_dim: train.image_dim,
                train: Box::new(ImageSampler { pool: train, shape }),
                held_out: Box::new(ImageSampler { pool: held_out, shape }),
            }
        }
    })
}

pub fn meta_train_config(config: &ExperimentConfig) -> MetaTrainConfig {
    let t = &config.training;
    MetaTrainConfig {
        epochs: t.epochs,
        tasks_per_epoch: t.tasks_per_epoch,
        outer_lr: t.outer_lr,
        meta_batch: t.meta_batch,
        seed: train_seed(config.seed),
        eval_episodes: t.eval_episodes,
    }
}

/// Paths written by [`metatrain`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub training: TrainingCurve,
}

fn write_curve(path: &Path, curve: &TrainingCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "mean_loss", "held_out_accuracy"])
        .expect("writing to memory");
    for e in &curve.epochs {
        w.serialize((e.epoch, e.mean_loss, e.held_out_accuracy))
            .expect("writing to memory");
    }
    std::fs::write(path, w.into_inner().expect("writing to memory")).map_err(io_err(path))
}

/// Meta-trains the configured learner and writes the checkpoint, its
/// sidecar and the training curve into `out_dir`.
pub fn metatrain(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutput> {
    let tasks = task_set(config)?;
    let seed = init_seed(config.seed);
    let mut learner = build_learner(&config.learner, tasks.input_dim, &config.shape, None, seed)?;
    let curve = meta_train(
        &mut learner,
        tasks.train.as_ref(),
        &meta_train_config(config),
        Some(tasks.held_out.as_ref()),
    )?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    Checkpoint {
        sidecar: Sidecar {
            format_version: FORMAT_VERSION,
            config_name: config.name.clone(),
            learner: config.learner.clone(),
            input_dim: tasks.input_dim,
            shape: config.shape,
            seed,
            epochs: config.training.epochs,
            params_sha256: String::new(),
        },
        params: learner.theta().clone(),
    }
    .save(&checkpoint)?;
    let curve_path = out_dir.join(CURVE_FILE);
    write_curve(&curve_path, &curve)?;
    Ok(TrainOutput {
        checkpoint,
        curve: curve_path,
        training: curve,
    })
}

#[derive(Clone, Debug, Default)]
pub struct AttackOptions {
    /// Worker threads for the episode fan-out; 0 or 1 runs serially.
    pub jobs: usize,
    /// Stop after this many newly written episodes, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_name: String,
    pub learner: String,
    pub finetune_steps: Option<usize>,
    pub checkpoint_sha256: String,
    pub episodes: usize,
    /// Episode indices rejected by the task filter.
    pub filtered_out: Vec<usize>,
    pub grid_cells: usize,
    pub methods: Vec<&'static str>,
    pub rows: usize,
    /// Episodes recovered from an earlier, interrupted run.
    pub resumed_episodes: usize,
    pub complete: bool,
    pub wall_seconds: Option<f64>,
    pub config: ExperimentConfig,
}

/// Everything one episode's rows are computed from.
struct Context<'a> {
    config: &'a ExperimentConfig,
    learner: &'a Learner,
    sampler: &'a (dyn TaskSampler + Sync),
    run_id: &'a str,
    /// Largest greedy budget per (cell-level) greedy key.
    greedy_depth: HashMap<String, usize>,
}

fn greedy_key(cell: &GridCell) -> String {
    format!(
        "{}|{:?}|{:?}|{:x}|{:x}|{}|{}",
        cell.goal.name(),
        cell.target,
        cell.attack_class,
        cell.epsilon.to_bits(),
        cell.step_size.to_bits(),
        cell.steps,
        cell.warm_start
    )
}

#[derive(Clone, Debug, Serialize)]
struct OutcomeDump {
    cell: usize,
    method: &'static str,
    target: Option<usize>,
    attack_class: Option<usize>,
    selected: Vec<usize>,
    clean_loss: f64,
    best_loss: f64,
    loss_trace: Vec<f64>,
    stage_losses: Vec<f64>,
    /// Perturbed rows of the support set, in `selected` order.
    perturbed: Vec<Vec<f64>>,
}

struct PairResult {
    clean: Metrics,
    attacked: Metrics,
    reference: Option<(f64, f64)>,
}

struct EpisodeRows {
    rows: Vec<ResultRecord>,
    dumps: Vec<OutcomeDump>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn mean_recall(pairs: &[PairResult], pick: impl Fn(&PairResult) -> &Metrics) -> Vec<Option<f64>> {
    let classes = pick(&pairs[0]).recall.len();
    (0..classes)
        .map(|c| {
            pairs
                .iter()
                .map(|p| pick(p).recall[c])
                .collect::<Option<Vec<f64>>>()
                .map(|v| mean(v.into_iter()))
        })
        .collect()
}

impl Context<'_> {
    fn episode_rows(&self, index: usize, seed: u64) -> Result<EpisodeRows> {
        let episode = self.sampler.episode(seed)?;
        let shape = &self.config.shape;
        let mut stage_cache: HashMap<(String, String), Vec<AttackOutcome>> = HashMap::new();
        let mut rows = Vec::new();
        let mut dumps = Vec::new();
        for (ci, cell) in self.config.grid.iter().enumerate() {
            let goals = cell.goals(shape.way);
            let budget = cell.budget(shape);
            for &method in &self.config.methods {
                let started = Instant::now();
                let mut pairs = Vec::with_capacity(goals.len());
                let method_seed = match method {
                    Method::MetaAttack => match cell.selection {
                        SelectionKind::RandomSubset => derive_seed(seed, SUBSET_STREAM + ci as u64),
                        _ => seed,
                    },
                    Method::RandomNoise => derive_seed(seed, NOISE_STREAM + ci as u64),
                    Method::RandomFinetune => derive_seed(seed, FINETUNE_STREAM),
                };
                let finetuned = match method {
                    Method::RandomFinetune => Some(self.random_finetune(&episode, method_seed)?),
                    _ => None,
                };
                for goal in &goals {
                    let outcome = match method {
                        Method::MetaAttack => Some(self.attack(&episode, cell, goal, &budget, method_seed, &mut stage_cache)?),
                        Method::RandomNoise => {
                            Some(random_baseline(self.learner, &episode, goal, &budget, method_seed)?)
                        }
                        Method::RandomFinetune => None,
                    };
                    let pair = match outcome {
                        Some(out) => {
                            out.check_constraints(&episode.train, &budget)?;
                            if self.config.output.dump_outcomes {
                                dumps.push(OutcomeDump {
                                    cell: ci,
                                    method: method.name(),
                                    target: goal.target(),
                                    attack_class: goal.attack_class(),
                                    perturbed: out.selected.iter().map(|&i| out.d_adv.inputs.row(i).to_vec()).collect(),
                                    selected: out.selected.clone(),
                                    clean_loss: out.clean_loss,
                                    best_loss: out.best_loss,
                                    loss_trace: out.loss_trace.clone(),
                                    stage_losses: out.stage_losses.clone(),
                                });
                            }
                            PairResult {
                                reference: Some((out.clean_loss, out.best_loss)),
                                clean: out.clean.test,
                                attacked: out.attacked.test,
                            }
                        }
                        None => {
                            let metrics = finetuned.clone().expect("set for random_finetune");
                            PairResult {
                                clean: metrics.clone(),
                                attacked: metrics,
                                reference: None,
                            }
                        }
                    };
                    pairs.push(pair);
                }
                let target_recall = |m: fn(&PairResult) -> &Metrics| {
                    goals
                        .iter()
                        .zip(&pairs)
                        .map(|(g, p)| g.target().and_then(|t| m(p).recall[t]))
                        .collect::<Option<Vec<f64>>>()
                        .map(|v| mean(v.into_iter()))
                };
                let reference = pairs
                    .iter()
                    .map(|p| p.reference)
                    .collect::<Option<Vec<(f64, f64)>>>();
                rows.push(ResultRecord {
                    run_id: self.run_id.to_string(),
                    episode: index,
                    episode_seed: seed,
                    cell: ci,
                    learner: self.learner.variant().to_string(),
                    ft_steps: self.config.learner.finetune_steps(),
                    goal: cell.goal.name().to_string(),
                    target_class: cell.target_label(),
                    attack_class: cell.attack_class_label(),
                    pairs: goals.len(),
                    k: budget.k,
                    epsilon: cell.epsilon,
                    step_size: cell.step_size,
                    pgd_steps: cell.steps,
                    selection: cell.selection.name().to_string(),
                    method: method.name().to_string(),
                    clean_acc: mean(pairs.iter().map(|p| p.clean.accuracy)),
                    attacked_acc: mean(pairs.iter().map(|p| p.attacked.accuracy)),
                    clean_target_recall: target_recall(|p| &p.clean),
                    attacked_target_recall: target_recall(|p| &p.attacked),
                    clean_recall: format_recall(&mean_recall(&pairs, |p| &p.clean)),
                    attacked_recall: format_recall(&mean_recall(&pairs, |p| &p.attacked)),
                    reference_loss_clean: reference.as_ref().map(|r| mean(r.iter().map(|x| x.0))),
                    reference_loss_best: reference.as_ref().map(|r| mean(r.iter().map(|x| x.1))),
                    wall_ms: self
                        .config
                        .output
                        .timing
                        .then(|| started.elapsed().as_secs_f64() * 1e3),
                    seed: method_seed,
                });
            }
        }
        Ok(EpisodeRows { rows, dumps })
    }

    fn attack(
        &self,
        episode: &meta_attack_core::tasks::Episode,
        cell: &GridCell,
        goal: &AttackGoal,
        budget: &AttackBudget,
        seed: u64,
        stage_cache: &mut HashMap<(String, String), Vec<AttackOutcome>>,
    ) -> Result<AttackOutcome> {
        if cell.selection != SelectionKind::Greedy || budget.k == 0 {
            return Ok(run_attack(self.learner, episode, goal, budget, cell.selection.selection(seed))?);
        }
        // Stage i of a deeper greedy run equals a run with budget i, so one
        // run serves every greedy cell that differs only in k.
        let key = greedy_key(cell);
        let depth = self.greedy_depth[&key];
        let cache_key = (key, format!("{goal:?}"));
        if !stage_cache.contains_key(&cache_key) {
            let deep = AttackBudget { k: depth, ..*budget };
            let options = GreedyOptions {
                warm_start: cell.warm_start,
            };
            let stages = greedy_stages(self.learner, episode, goal, &deep, options, &Serial)?;
            stage_cache.insert(cache_key.clone(), stages);
        }
        Ok(stage_cache[&cache_key][budget.k - 1].clone())
    }

    fn random_finetune(&self, episode: &meta_attack_core::tasks::Episode, seed: u64) -> Result<Metrics> {
        let LearnerConfig::Maml {
            hidden,
            inner_lr,
            finetune_steps,
        } = &self.config.learner
        else {
            unreachable!("validated: random_finetune needs maml");
        };
        let spec = ClassifierSpec::new(self.learner.input_dim(), hidden.clone(), self.config.shape.way)?;
        Ok(random_finetune_baseline(episode, &spec, *inner_lr, *finetune_steps, seed)?)
    }
}

fn check_compatible(config: &ExperimentConfig, checkpoint: &Checkpoint, input_dim: usize) -> Result<()> {
    let s = &checkpoint.sidecar;
    if s.learner != config.learner {
        return Err(LabError::Mismatch(format!(
            "checkpoint learner {:?}, config learner {:?}",
            s.learner, config.learner
        )));
    }
    if s.input_dim != input_dim {
        return Err(LabError::Mismatch(format!(
            "checkpoint expects {} input features, tasks have {input_dim}",
            s.input_dim
        )));
    }
    let way_shot = |c: &crate::config::ShapeConfig| (c.way, c.shot);
    if way_shot(&s.shape) != way_shot(&config.shape) {
        return Err(LabError::Mismatch(format!(
            "checkpoint trained on {}-way {}-shot, config asks for {}-way {}-shot",
            s.shape.way, s.shape.shot, config.shape.way, config.shape.shot
        )));
    }
    Ok(())
}

/// Identifies a run by its config (output settings aside) and parameters.
pub fn run_id(config: &ExperimentConfig, params_sha256: &str) -> String {
    let mut c = config.clone();
    c.output = Default::default();
    let text = serde_json::to_string(&c).expect("config serializes") + params_sha256;
    sha256_hex(text.as_bytes())[..16].to_string()
}

/// Indices and seeds of the episodes this run evaluates.
fn accepted_episodes(
    config: &ExperimentConfig,
    learner: &Learner,
    sampler: &(dyn TaskSampler + Sync),
) -> Result<(Vec<(usize, u64)>, Vec<usize>)> {
    let needed = config.evaluation.episodes;
    let Some(threshold) = config.evaluation.min_clean_accuracy else {
        return Ok(((0..needed).map(|i| (i, episode_seed(config.seed, i))).collect(), Vec::new()));
    };
    let limit = needed.saturating_mul(100).max(1000);
    let mut accepted = Vec::with_capacity(needed);
    let mut rejected = Vec::new();
    for index in 0..limit {
        if accepted.len() == needed {
            break;
        }
        let seed = episode_seed(config.seed, index);
        let ep = sampler.episode(seed)?;
        if learner.evaluate(&ep.train, &ep.test)?.accuracy >= threshold {
            accepted.push((index, seed));
        } else {
            rejected.push(index);
        }
    }
    if accepted.len() < needed {
        return Err(LabError::FilterExhausted {
            accepted: accepted.len(),
            tried: limit,
            needed,
        });
    }
    Ok((accepted, rejected))
}

/// Keeps the complete leading episodes of an existing results file and
/// truncates anything after them. Returns how many episodes were kept.
fn recover(path: &Path, run_id: &str, expected: &[(usize, u64)], per_episode: usize) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    // a torn final line is dropped before parsing
    let whole = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let header = encode_header();
    if whole < header.len() {
        std::fs::write(path, &header).map_err(io_err(path))?;
        return Ok(0);
    }
    let rows = decode_rows(path, &bytes[..whole])?;
    if let Some((r, _)) = rows.iter().find(|(r, _)| r.run_id != run_id) {
        return Err(LabError::RunMismatch {
            path: path.to_path_buf(),
            found: r.run_id.clone(),
            expected: run_id.to_string(),
        });
    }
    let mut kept = 0;
    let mut end = header.len() as u64;
    for (i, &(index, seed)) in expected.iter().enumerate() {
        let chunk = rows.get(i * per_episode..(i + 1) * per_episode);
        match chunk {
            Some(c) if c.iter().all(|(r, _)| r.episode == index && r.episode_seed == seed) => {
                kept += 1;
                end = c.last().map_or(end, |(_, e)| *e);
            }
            _ => break,
        }
    }
    let file = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    file.set_len(end).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))?;
    Ok(kept)
}

fn append(file: &mut File, path: &Path, bytes: &[u8]) -> Result<()> {
    file.write_all(bytes).map_err(io_err(path))?;
    file.sync_data().map_err(io_err(path))
}

/// Runs the attack grid over the evaluation episodes and writes
/// `results.csv` and `run.json` into `out_dir`. An existing results file of
/// the same run is resumed after its last complete episode.
pub fn attack(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
    options: &AttackOptions,
) -> Result<RunRecord> {
    let started = Instant::now();
    config.validate_for_attack()?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let tasks = task_set(config)?;
    check_compatible(config, &checkpoint, tasks.input_dim)?;
    let learner = checkpoint.learner()?;
    let run_id = run_id(config, &checkpoint.sidecar.params_sha256);

    let mut greedy_depth: HashMap<String, usize> = HashMap::new();
    for cell in &config.grid {
        if cell.selection == SelectionKind::Greedy {
            let d = greedy_depth.entry(greedy_key(cell)).or_insert(0);
            *d = (*d).max(cell.k);
        }
    }
    let ctx = Context {
        config,
        learner: &learner,
        sampler: tasks.held_out.as_ref(),
        run_id: &run_id,
        greedy_depth,
    };
    let (episodes, filtered_out) = accepted_episodes(config, &learner, tasks.held_out.as_ref())?;
    let per_episode = config.grid.len() * config.methods.len();

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let results = out_dir.join(RESULTS_FILE);
    let resumed = if results.exists() {
        recover(&results, &run_id, &episodes, per_episode)?
    } else {
        std::fs::write(&results, encode_header()).map_err(io_err(&results))?;
        0
    };
    let dump_dir = out_dir.join("outcomes");
    if config.output.dump_outcomes {
        std::fs::create_dir_all(&dump_dir).map_err(io_err(&dump_dir))?;
    }

    let mut file = OpenOptions::new().append(true).open(&results).map_err(io_err(&results))?;
    let jobs = options.jobs.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .expect("thread pool");
    let todo = &episodes[resumed..];
    let limit = options.stop_after.unwrap_or(usize::MAX).min(todo.len());
    let mut written = 0;
    for chunk in todo[..limit].chunks(jobs) {
        let computed: Vec<Result<EpisodeRows>> = if jobs == 1 {
            chunk.iter().map(|&(i, s)| ctx.episode_rows(i, s)).collect()
        } else {
            pool.install(|| chunk.par_iter().map(|&(i, s)| ctx.episode_rows(i, s)).collect())
        };
        for (&(index, _), rows) in chunk.iter().zip(computed) {
            let rows = rows?;
            if config.output.dump_outcomes {
                let path = dump_dir.join(format!("episode-{index:05}.json"));
                let json = serde_json::to_vec_pretty(&rows.dumps).expect("outcomes serialize");
                std::fs::write(&path, json).map_err(io_err(&path))?;
            }
            append(&mut file, &results, &encode_rows(&rows.rows)?)?;
            written += 1;
        }
    }
    let complete = resumed + written == episodes.len();
    let record = RunRecord {
        run_id: run_id.clone(),
        config_name: config.name.clone(),
        learner: learner.variant().to_string(),
        finetune_steps: config.learner.finetune_steps(),
        checkpoint_sha256: checkpoint.sidecar.params_sha256.clone(),
        episodes: episodes.len(),
        filtered_out,
        grid_cells: config.grid.len(),
        methods: config.methods.iter().map(|m| m.name()).collect(),
        rows: (resumed + written) * per_episode,
        resumed_episodes: resumed,
        complete,
        wall_seconds: config.output.timing.then(|| started.elapsed().as_secs_f64()),
        config: config.clone(),
    };
    let path = out_dir.join(RUN_RECORD_FILE);
    let json = serde_json::to_string_pretty(&record).expect("run record serializes") + "\n";
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(record)
}
