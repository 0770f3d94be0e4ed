//! Experiment configuration: one JSON document with a versioned schema.
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use meta_attack_core::attack::{AttackBudget, AttackGoal, Selection};
use meta_attack_core::tasks::{EpisodeShape, SyntheticTaskFamily};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    /// Master seed. Initialization, training and every evaluation episode
    /// derive their seeds from it.
    pub seed: u64,
    pub learner: LearnerConfig,
    pub tasks: TaskSource,
    #[serde(default)]
    pub shape: ShapeConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub grid: Vec<GridCell>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerConfig {
    Maml {
        hidden: Vec<usize>,
        inner_lr: f64,
        finetune_steps: usize,
    },
    Proto {
        hidden: Vec<usize>,
        embedding_dim: usize,
    },
    Seq {
        hidden: usize,
        #[serde(default)]
        positional: bool,
    },
}

impl LearnerConfig {
    pub fn variant(&self) -> &'static str {
        match self {
            LearnerConfig::Maml { .. } => "maml",
            LearnerConfig::Proto { .. } => "proto",
            LearnerConfig::Seq { .. } => "seq",
        }
    }

    pub fn finetune_steps(&self) -> Option<usize> {
        match self {
            LearnerConfig::Maml { finetune_steps, .. } => Some(*finetune_steps),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic(SyntheticConfig),
    /// Two disjoint image pools: one for meta-training, one for evaluation.
    Images {
        train_manifest: PathBuf,
        test_manifest: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub radius: f64,
    pub noise: f64,
    pub min_separation: f64,
    pub directions: usize,
    /// Directions reserved for evaluation episodes.
    pub held_out_directions: usize,
    pub family_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: SyntheticTaskFamily::DEFAULT_DIM,
            radius: SyntheticTaskFamily::DEFAULT_RADIUS,
            noise: SyntheticTaskFamily::DEFAULT_NOISE,
            min_separation: SyntheticTaskFamily::DEFAULT_MIN_SEPARATION,
            directions: SyntheticTaskFamily::DEFAULT_POOL,
            held_out_directions: 56,
            family_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        let s = EpisodeShape::default();
        Self {
            way: s.way,
            shot: s.shot,
            query: s.query,
        }
    }
}

impl ShapeConfig {
    pub fn episode_shape(&self) -> Result<EpisodeShape> {
        Ok(EpisodeShape::new(self.way, self.shot, self.query)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub outer_lr: f64,
    pub meta_batch: usize,
    /// Held-out episodes scored after every epoch for the training curve.
    pub eval_episodes: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            tasks_per_epoch: 32,
            outer_lr: 1e-3,
            meta_batch: 4,
            eval_episodes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Number of evaluation episodes per run.
    pub episodes: usize,
    /// When set, only episodes whose clean test accuracy reaches this value
    /// are attacked. Rejected episodes are replaced by later ones.
    pub min_clean_accuracy: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            min_clean_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    Untargeted,
    Direct,
    Influence,
}

impl GoalKind {
    pub fn name(self) -> &'static str {
        match self {
            GoalKind::Untargeted => "untargeted",
            GoalKind::Direct => "direct",
            GoalKind::Influence => "influence",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    #[default]
    Greedy,
    RandomSubset,
    AllPool,
}

impl SelectionKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectionKind::Greedy => "greedy",
            SelectionKind::RandomSubset => "random_subset",
            SelectionKind::AllPool => "all_pool",
        }
    }

    pub fn selection(self, seed: u64) -> Selection {
        match self {
            SelectionKind::Greedy => Selection::Greedy,
            SelectionKind::RandomSubset => Selection::RandomSubset { seed },
            SelectionKind::AllPool => Selection::AllPool,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// PGD on the support samples picked by the cell's selection mode.
    MetaAttack,
    /// Uniform noise of the same radius on randomly chosen samples.
    RandomNoise,
    /// A freshly initialized network fine-tuned on the clean support set.
    RandomFinetune,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::MetaAttack, Method::RandomNoise, Method::RandomFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Method::MetaAttack => "meta_attack",
            Method::RandomNoise => "random_noise",
            Method::RandomFinetune => "random_finetune",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::MetaAttack, Method::RandomNoise]
}

/// One attack setting. Targeted cells without a fixed target (or attack
/// class) run every admissible class pair and report the average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub goal: GoalKind,
    #[serde(default)]
    pub target: Option<usize>,
    #[serde(default)]
    pub attack_class: Option<usize>,
    pub k: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default)]
    pub selection: SelectionKind,
    #[serde(default)]
    pub warm_start: bool,
}

impl GridCell {
    /// The concrete goals this cell averages over, in a fixed order.
    pub fn goals(&self, way: usize) -> Vec<AttackGoal> {
        match self.goal {
            GoalKind::Untargeted => vec![AttackGoal::Untargeted],
            GoalKind::Direct => match self.target {
                Some(t) => vec![AttackGoal::direct(t)],
                None => (0..way).map(AttackGoal::direct).collect(),
            },
            GoalKind::Influence => {
                let targets: Vec<usize> = self.target.map_or_else(|| (0..way).collect(), |t| vec![t]);
                let mut goals = Vec::new();
                for t in targets {
                    for a in 0..way {
                        if a != t && self.attack_class.is_none_or(|fixed| fixed == a) {
                            goals.push(AttackGoal::influence(t, a));
                        }
                    }
                }
                goals
            }
        }
    }

    /// Samples an attacker of this cell may touch in a `shape` episode.
    pub fn pool_size(&self, shape: &ShapeConfig) -> usize {
        match self.goal {
            GoalKind::Untargeted => shape.way * shape.shot,
            _ => shape.shot,
        }
    }

    /// The budget actually spent: all-pool cells perturb the whole pool.
    pub fn budget(&self, shape: &ShapeConfig) -> AttackBudget {
        let k = match self.selection {
            SelectionKind::AllPool => self.pool_size(shape),
            _ => self.k,
        };
        AttackBudget {
            k,
            epsilon: self.epsilon,
            step_size: self.step_size,
            steps: self.steps,
        }
    }

    fn label(v: Option<usize>, targeted: bool) -> String {
        match (targeted, v) {
            (false, _) => String::new(),
            (true, None) => "all".into(),
            (true, Some(c)) => c.to_string(),
        }
    }

    pub fn target_label(&self) -> String {
        Self::label(self.target, self.goal != GoalKind::Untargeted)
    }

    pub fn attack_class_label(&self) -> String {
        match self.goal {
            GoalKind::Direct => self.target_label(),
            GoalKind::Influence => Self::label(self.attack_class, true),
            GoalKind::Untargeted => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory receiving checkpoints, curves and results.
    pub dir: PathBuf,
    /// Write per-episode JSON with the selected samples, loss traces and
    /// perturbed inputs.
    pub dump_outcomes: bool,
    /// Record per-row wall time. Off by default: timings make result files
    /// differ between otherwise identical runs.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            dump_outcomes: false,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base).map_err(|e| match e {
            LabError::Config { message, .. } => LabError::Config {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let bad = |message: String| LabError::Config {
            path: PathBuf::from("<text>"),
            message,
        };
        let version = serde_json::from_str::<serde_json::Value>(text)
            .map_err(|e| bad(e.to_string()))?
            .get("version")
            .and_then(|v| v.as_u64());
        if version != Some(CONFIG_VERSION as u64) {
            return Err(bad(format!(
                "unsupported schema version {version:?}, expected {CONFIG_VERSION}"
            )));
        }
        let mut config: ExperimentConfig = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TaskSource::Images {
            train_manifest,
            test_manifest,
        } = &mut config.tasks
        {
            resolve(train_manifest);
            resolve(test_manifest);
        }
        resolve(&mut config.output.dir);
        config.validate().map_err(bad)?;
        Ok(config)
    }

    /// Checks everything that does not depend on the command being run.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.name.is_empty() {
            return Err("name must not be empty".into());
        }
        let shape = self.shape.episode_shape().map_err(|e| e.to_string())?;
        match &self.learner {
            LearnerConfig::Maml {
                hidden,
                inner_lr,
                ..
            } => {
                if hidden.contains(&0) || !(*inner_lr > 0.0) {
                    return Err("maml needs non-zero hidden widths and a positive inner_lr".into());
                }
            }
            LearnerConfig::Proto { hidden, embedding_dim } => {
                if hidden.contains(&0) || *embedding_dim == 0 {
                    return Err("proto needs non-zero hidden widths and embedding_dim".into());
                }
            }
            LearnerConfig::Seq { hidden, .. } => {
                if *hidden == 0 {
                    return Err("seq needs a non-zero hidden width".into());
                }
            }
        }
        match &self.tasks {
            TaskSource::Synthetic(s) => {
                if s.held_out_directions == 0 || s.held_out_directions >= s.directions {
                    return Err(format!(
                        "held_out_directions must be in 1..{}, got {}",
                        s.directions, s.held_out_directions
                    ));
                }
            }
            TaskSource::Images {
                train_manifest,
                test_manifest,
            } => {
                for p in [train_manifest, test_manifest] {
                    if !p.is_file() {
                        return Err(format!("manifest {} does not exist", p.display()));
                    }
                }
            }
        }
        let t = &self.training;
        if t.meta_batch == 0 || !(t.outer_lr > 0.0) {
            return Err("training needs meta_batch >= 1 and a positive outer_lr".into());
        }
        if self.evaluation.episodes == 0 {
            return Err("evaluation.episodes must be at least 1".into());
        }
        if let Some(th) = self.evaluation.min_clean_accuracy {
            if !(0.0..=1.0).contains(&th) {
                return Err(format!("min_clean_accuracy {th} is outside [0, 1]"));
            }
        }
        if self.methods.is_empty() {
            return Err("methods must not be empty".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(format!("method {} listed twice", m.name()));
            }
        }
        if self.methods.contains(&Method::RandomFinetune) && self.learner.variant() != "maml" {
            return Err("random_finetune needs a maml learner".into());
        }
        for (i, cell) in self.grid.iter().enumerate() {
            self.validate_cell(cell, shape)
                .map_err(|e| format!("grid cell {i}: {e}"))?;
        }
        Ok(())
    }

    fn validate_cell(&self, cell: &GridCell, shape: EpisodeShape) -> std::result::Result<(), String> {
        if !(cell.epsilon >= 0.0) || !(cell.step_size >= 0.0) {
            return Err("epsilon and step_size must be non-negative".into());
        }
        match cell.goal {
            GoalKind::Untargeted if cell.target.is_some() || cell.attack_class.is_some() => {
                return Err("an untargeted cell takes no target or attack_class".into())
            }
            GoalKind::Direct if cell.attack_class.is_some() => {
                return Err("a direct cell attacks its target class, drop attack_class".into())
            }
            _ => {}
        }
        for c in [cell.target, cell.attack_class].into_iter().flatten() {
            if c >= shape.way {
                return Err(format!("class {c} out of {}", shape.way));
            }
        }
        if cell.goal == GoalKind::Influence && cell.target.is_some() && cell.target == cell.attack_class {
            return Err("influence cell needs attack_class != target".into());
        }
        let pool = cell.pool_size(&self.shape);
        if cell.k > pool {
            return Err(format!("k = {} exceeds the {pool} perturbable samples", cell.k));
        }
        Ok(())
    }

    /// Rejects configs that cannot drive an attack run.
    pub fn validate_for_attack(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(LabError::Config {
                path: PathBuf::from(&self.name),
                message: "the attack grid is empty".into(),
            });
        }
        Ok(())
    }
}
