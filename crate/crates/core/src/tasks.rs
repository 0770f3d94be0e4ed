//! Episodic N-way K-shot task generation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::rng;
use crate::tensor::Tensor;

/// Way / shot / query counts of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeShape {
    pub fn new(way: usize, shot: usize, query: usize) -> Result<Self> {
        if way < 2 || shot == 0 || query == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "episode shape {way}-way {shot}-shot {query}-query"
            )));
        }
        Ok(Self { way, shot, query })
    }
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            query: 15,
        }
    }
}

/// One few-shot task. Both splits are class-major: all samples of class 0,
/// then class 1, and so on.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub task_seed: u64,
}

impl Episode {
    fn from_class_rows(
        shape: EpisodeShape,
        rows: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
        task_seed: u64,
    ) -> Result<Self> {
        let mut train_rows = Vec::with_capacity(shape.way * shape.shot);
        let mut test_rows = Vec::with_capacity(shape.way * shape.query);
        let mut train_labels = Vec::new();
        let mut test_labels = Vec::new();
        for (class, (tr, te)) in rows.into_iter().enumerate() {
            train_labels.extend(core::iter::repeat(class).take(tr.len()));
            test_labels.extend(core::iter::repeat(class).take(te.len()));
            train_rows.extend(tr);
            test_rows.extend(te);
        }
        Ok(Self {
            shape,
            train: LabeledBatch::new(Tensor::from_rows(&train_rows)?, train_labels, shape.way)?,
            test: LabeledBatch::new(Tensor::from_rows(&test_rows)?, test_labels, shape.way)?,
            task_seed,
        })
    }
}

/// Anything that can produce episodes deterministically from a seed.
pub trait TaskSampler {
    fn shape(&self) -> EpisodeShape;
    fn episode(&self, seed: u64) -> Result<Episode>;
}

/// Gaussian blobs around class centers `0.5 + radius * u`, where each `u` is
/// drawn from a fixed pool of unit directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskFamily {
    pub dim: usize,
    pub radius: f64,
    pub noise: f64,
    pub min_separation: f64,
    pub directions: Vec<Vec<f64>>,
}

impl SyntheticTaskFamily {
    pub const DEFAULT_DIM: usize = 16;
    pub const DEFAULT_RADIUS: f64 = 0.35;
    pub const DEFAULT_NOISE: f64 = 0.08;
    pub const DEFAULT_MIN_SEPARATION: f64 = 0.3;
    pub const DEFAULT_POOL: usize = 256;

    /// A family with `pool_size` random unit directions drawn from `seed`.
    pub fn new(
        dim: usize,
        radius: f64,
        noise: f64,
        min_separation: f64,
        pool_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || !(radius > 0.0) || !(noise > 0.0) || !(min_separation > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "synthetic family dim={dim} radius={radius} noise={noise} min_separation={min_separation}"
            )));
        }
        let mut rng = rng::rng(seed);
        let directions = (0..pool_size)
            .map(|_| loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
                if norm > 1e-8 {
                    break v.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect();
        Ok(Self {
            dim,
            radius,
            noise,
            min_separation,
            directions,
        })
    }

    /// d=16, r=0.35, σ=0.08, δ_min=0.3 over 256 directions.
    pub fn default_with_seed(seed: u64) -> Self {
        Self::new(
            Self::DEFAULT_DIM,
            Self::DEFAULT_RADIUS,
            Self::DEFAULT_NOISE,
            Self::DEFAULT_MIN_SEPARATION,
            Self::DEFAULT_POOL,
            seed,
        )
        .expect("default family parameters are valid")
    }

    /// Splits the direction pool: the last `held_out` directions form the
    /// second family, so its class centers never occur in the first.
    pub fn split(&self, held_out: usize) -> Result<(Self, Self)> {
        if held_out == 0 || held_out >= self.directions.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "cannot hold out {held_out} of {} directions",
                self.directions.len()
            )));
        }
        let cut = self.directions.len() - held_out;
        let mut a = self.clone();
        let mut b = self.clone();
        a.directions.truncate(cut);
        b.directions.drain(..cut);
        Ok((a, b))
    }

    pub fn center(&self, direction: usize) -> Vec<f64> {
        self.directions[direction]
            .iter()
            .map(|u| 0.5 + self.radius * u)
            .collect()
    }
}

const MAX_CENTER_ATTEMPTS: usize = 1000;

pub fn sample_synthetic_episode(
    family: &SyntheticTaskFamily,
    shape: EpisodeShape,
    seed: u64,
) -> Result<Episode> {
    let infeasible = Error::InfeasibleSeparation {
        classes: shape.way,
        min_separation: family.min_separation,
    };
    if family.directions.len() < shape.way {
        return Err(infeasible);
    }
    let mut rng = rng::rng(seed);
    let mut centers = None;
    for _ in 0..MAX_CENTER_ATTEMPTS {
        let picks = index::sample(&mut rng, family.directions.len(), shape.way).into_vec();
        let cs: Vec<Vec<f64>> = picks.iter().map(|&d| family.center(d)).collect();
        let separated = cs.iter().enumerate().all(|(i, a)| {
            cs[..i].iter().all(|b| {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                libm::sqrt(d2) >= family.min_separation
            })
        });
        if separated {
            centers = Some(cs);
            break;
        }
    }
    let centers = centers.ok_or(infeasible)?;

    let mut draw = |c: &[f64]| -> Vec<f64> {
        c.iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (m + family.noise * z).clamp(0.0, 1.0)
            })
            .collect()
    };
    let rows = centers
        .iter()
        .map(|c| {
            let train = (0..shape.shot).map(|_| draw(c)).collect();
            let test = (0..shape.query).map(|_| draw(c)).collect();
            (train, test)
        })
        .collect();
    Episode::from_class_rows(shape, rows, seed)
}

#[derive(Clone, Debug)]
pub struct SyntheticSampler {
    pub family: SyntheticTaskFamily,
    pub shape: EpisodeShape,
}

impl TaskSampler for SyntheticSampler {
    fn shape(&self) -> EpisodeShape {
        self.shape
    }

    fn episode(&self, seed: u64) -> Result<Episode> {
        sample_synthetic_episode(&self.family, self.shape, seed)
    }
}

/// Flattened grayscale images keyed by class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePool {
    pub classes: BTreeMap<u32, Vec<Vec<f64>>>,
    pub image_dim: usize,
    pub source: String,
}

impl ImagePool {
    pub fn new(classes: BTreeMap<u32, Vec<Vec<f64>>>, source: String) -> Result<Self> {
        let image_dim = classes
            .values()
            .flat_map(|imgs| imgs.first())
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::InvalidArgument("image pool is empty".into()))?;
        for imgs in classes.values() {
            if let Some(bad) = imgs.iter().find(|i| i.len() != image_dim) {
                return Err(Error::ShapeMismatch {
                    op: "image_pool",
                    lhs: alloc::vec![image_dim],
                    rhs: alloc::vec![bad.len()],
                });
            }
        }
        Ok(Self {
            classes,
            image_dim,
            source,
        })
    }
}

/// Which images an episode drew: per episode class, the pool class id and
/// the image indices used for the train and test splits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageSelection {
    pub class_id: u32,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Picks `way` classes without replacement, then `shot + query` images of
/// each without replacement. Episode labels follow the sampled class order.
pub fn sample_image_selection(
    pool: &ImagePool,
    shape: EpisodeShape,
    seed: u64,
) -> Result<Vec<ImageSelection>> {
    if pool.classes.len() < shape.way {
        return Err(Error::InvalidArgument(alloc::format!(
            "pool has {} classes, episode needs {}",
            pool.classes.len(),
            shape.way
        )));
    }
    let mut rng = rng::rng(seed);
    let ids: Vec<u32> = pool.classes.keys().copied().collect();
    let picked = index::sample(&mut rng, ids.len(), shape.way).into_vec();
    let need = shape.shot + shape.query;
    picked
        .into_iter()
        .map(|ci| {
            let class_id = ids[ci];
            let have = pool.classes[&class_id].len();
            if have < need {
                return Err(Error::InsufficientImages {
                    class: class_id as usize,
                    have,
                    need,
                });
            }
            let mut chosen = index::sample(&mut rng, have, need).into_vec();
            let test = chosen.split_off(shape.shot);
            Ok(ImageSelection {
                class_id,
                train: chosen,
                test,
            })
        })
        .collect()
}

pub fn sample_image_episode(pool: &ImagePool, shape: EpisodeShape, seed: u64) -> Result<Episode> {
    let selection = sample_image_selection(pool, shape, seed)?;
    let rows = selection
        .iter()
        .map(|s| {
            let imgs = &pool.classes[&s.class_id];
            (
                s.train.iter().map(|&i| imgs[i].clone()).collect(),
                s.test.iter().map(|&i| imgs[i].clone()).collect(),
            )
        })
        .collect();
    Episode::from_class_rows(shape, rows, seed)
}

#[derive(Clone, Debug)]
pub struct ImageSampler {
    pub pool: ImagePool,
    pub shape: EpisodeShape,
}

impl TaskSampler for ImageSampler {
    fn shape(&self) -> EpisodeShape {
        self.shape
    }

    fn episode(&self, seed: u64) -> Result<Episode> {
        sample_image_episode(&self.pool, self.shape, seed)
    }
}

/// Uniformly random integer used to pick seeds for a stream of episodes.
pub(crate) fn next_seed(rng: &mut rng::Rng) -> u64 {
    rng.random()
}
