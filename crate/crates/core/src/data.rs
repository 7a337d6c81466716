//! Synthetic transfer tasks and coordinated-seed sharding.
//!
//! A task has Gaussian class clusters. Pretraining uses `2 * num_classes`
//! clusters; the fine-tuning task picks `num_classes` of them (the class map
//! is recorded) and moves each center by a random offset of size
//! `domain_gap`, so a pretrained head is a useful but imperfect start.
//! The out-of-distribution test split is the in-distribution test split with
//! a [`ShiftSpec`] applied.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mix_seed, Matrix};

/// Inputs and labels for one optimization step, with stable example ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Identity of each example; keys the stochastic-depth mask.
    pub ids: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Batch of the examples behind stream ids; id `v` refers to example
    /// `v % len`.
    pub fn batch(&self, ids: &[u64]) -> Batch {
        let n = self.len() as u64;
        let rows: Vec<usize> = ids.iter().map(|&v| (v % n) as usize).collect();
        Batch {
            inputs: self.inputs.select_rows(&rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: ids.to_vec(),
        }
    }

    /// Every example, in order, as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            ids: (0..self.len() as u64).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Rotation by `magnitude` radians in the plane of input dims 0 and 1.
    Rotation,
    /// Additive Gaussian noise with standard deviation `magnitude`.
    Noise,
    /// Multiplication by `1 + magnitude`.
    Scale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    /// Seed for the noise shift.
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            kind: ShiftKind::Rotation,
            magnitude: 0.0,
            seed: 0,
        }
    }
}

fn default_domain_gap() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub pretrain_size: usize,
    pub finetune_size: usize,
    pub test_size: usize,
    pub shift: ShiftSpec,
    pub seed: u64,
    /// Expected norm of the offset between a pretraining cluster center and
    /// its fine-tuning counterpart.
    #[serde(default = "default_domain_gap")]
    pub domain_gap: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig(
                "task needs at least one class and one input dimension".into(),
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cluster_spread must be positive, got {}",
                self.cluster_spread
            )));
        }
        let pretrain_classes = 2 * self.num_classes;
        if self.pretrain_size < pretrain_classes
            || self.finetune_size < self.num_classes
            || self.test_size < self.num_classes
        {
            return Err(Error::InvalidConfig(
                "split sizes must be at least the number of classes".into(),
            ));
        }
        if !self.shift.magnitude.is_finite() || !self.domain_gap.is_finite() {
            return Err(Error::InvalidConfig("shift and domain gap must be finite".into()));
        }
        if self.shift.kind == ShiftKind::Rotation && self.input_dim < 2 {
            return Err(Error::InvalidConfig("rotation shift needs input_dim >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub spec: TaskSpec,
    pub pretrain: Dataset,
    pub finetune_train: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
    /// `class_map[j]` is the pretraining class behind fine-tuning class `j`.
    pub class_map: Vec<usize>,
}

impl TaskBundle {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn sample_split(
    centers: &[Vec<f64>],
    size: usize,
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let dim = centers[0].len();
    let classes = centers.len();
    let mut data = Vec::with_capacity(size * dim);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let y = i % classes;
        for c in &centers[y] {
            let z: f64 = StandardNormal.sample(rng);
            data.push(c + spread * z);
        }
        labels.push(y);
    }
    Dataset {
        inputs: Matrix {
            rows: size,
            cols: dim,
            data,
        },
        labels,
        num_classes: classes,
    }
}

/// Builds the pretraining, fine-tuning and test splits of a task.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskBundle> {
    spec.validate()?;
    let d = spec.input_dim;
    let pre_classes = 2 * spec.num_classes;
    let stream = |k: u64| ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, k]));

    let mut rng = stream(1);
    let pre_centers: Vec<Vec<f64>> = (0..pre_classes).map(|_| gaussian_vec(&mut rng, d, 1.0)).collect();

    let mut rng = stream(2);
    let mut order: Vec<usize> = (0..pre_classes).collect();
    order.shuffle(&mut rng);
    let class_map: Vec<usize> = order[..spec.num_classes].to_vec();

    let mut rng = stream(3);
    let gap_scale = spec.domain_gap / (d as f64).sqrt();
    let ft_centers: Vec<Vec<f64>> = class_map
        .iter()
        .map(|&k| {
            let offset = gaussian_vec(&mut rng, d, gap_scale);
            pre_centers[k].iter().zip(offset).map(|(c, o)| c + o).collect()
        })
        .collect();

    let pretrain = sample_split(&pre_centers, spec.pretrain_size, spec.cluster_spread, &mut stream(4));
    let finetune_train =
        sample_split(&ft_centers, spec.finetune_size, spec.cluster_spread, &mut stream(5));
    let test_id = sample_split(&ft_centers, spec.test_size, spec.cluster_spread, &mut stream(6));
    let test_ood = Dataset {
        inputs: apply_shift(&test_id.inputs, &spec.shift)?,
        labels: test_id.labels.clone(),
        num_classes: test_id.num_classes,
    };
    Ok(TaskBundle {
        spec: spec.clone(),
        pretrain,
        finetune_train,
        test_id,
        test_ood,
        class_map,
    })
}

/// Applies a distribution shift to every input row.
pub fn apply_shift(inputs: &Matrix, shift: &ShiftSpec) -> Result<Matrix> {
    let mut out = inputs.clone();
    match shift.kind {
        ShiftKind::Rotation => {
            if inputs.cols < 2 {
                return Err(Error::DimensionMismatch(
                    "rotation shift needs at least two input dims".into(),
                ));
            }
            if shift.magnitude == 0.0 {
                return Ok(out);
            }
            let (s, c) = shift.magnitude.sin_cos();
            for i in 0..out.rows {
                let row = out.row_mut(i);
                let (x, y) = (row[0], row[1]);
                row[0] = c * x - s * y;
                row[1] = s * x + c * y;
            }
        }
        ShiftKind::Noise => {
            if shift.magnitude == 0.0 {
                return Ok(out);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[shift.seed, 0x5a17]));
            for v in &mut out.data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += shift.magnitude * z;
            }
        }
        ShiftKind::Scale => {
            let factor = 1.0 + shift.magnitude;
            for v in &mut out.data {
                *v *= factor;
            }
        }
    }
    Ok(out)
}

/// Global example stream for one epoch.
///
/// The stream concatenates independent permutations of the dataset, keyed
/// only by `(seed, epoch, pass)`, until it holds `samples` ids. Pass `p`
/// contributes ids `p * len + i`, so ids stay unique within the epoch.
pub fn epoch_stream(dataset_len: usize, samples: usize, epoch: u64, seed: u64) -> Vec<u64> {
    let mut stream = Vec::with_capacity(samples);
    let mut pass = 0u64;
    while stream.len() < samples {
        let mut perm: Vec<u64> = (0..dataset_len as u64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, pass]));
        perm.shuffle(&mut rng);
        let take = (samples - stream.len()).min(dataset_len);
        stream.extend(perm[..take].iter().map(|&i| pass * dataset_len as u64 + i));
        pass += 1;
    }
    stream
}

/// Splits a stream into `world_size` interleaved sub-streams and returns the
/// batches of `rank`.
///
/// The stream is first truncated to a multiple of `batch_size * world_size`.
/// Rank `r` receives positions `r, r + w, r + 2w, ...`, so batch `t` of all
/// ranks together covers exactly positions `t * b .. (t + 1) * b` of the
/// stream, with `b = batch_size * world_size`.
pub fn shard_stream(
    stream: &[u64],
    rank: usize,
    world_size: usize,
    batch_size: usize,
) -> Result<Vec<Vec<u64>>> {
    if world_size == 0 || rank >= world_size {
        return Err(Error::RankOutOfRange { rank, world_size });
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let global = batch_size * world_size;
    if global > stream.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_size * world_size = {global} exceeds the {} available examples",
            stream.len()
        )));
    }
    let usable = stream.len() / global * global;
    let mine: Vec<u64> = stream[..usable]
        .iter()
        .skip(rank)
        .step_by(world_size)
        .copied()
        .collect();
    Ok(mine.chunks(batch_size).map(<[u64]>::to_vec).collect())
}

/// Batches of dataset indices that `rank` processes in `epoch`.
///
/// Needs no communication: every rank derives the same global permutation
/// from `(seed, epoch)` and takes its own interleaved share.
pub fn shard_epoch(
    dataset_len: usize,
    epoch: u64,
    rank: usize,
    world_size: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if world_size == 0 || rank >= world_size {
        return Err(Error::RankOutOfRange { rank, world_size });
    }
    let stream = epoch_stream(dataset_len, dataset_len, epoch, seed);
    Ok(shard_stream(&stream, rank, world_size, batch_size)?
        .into_iter()
        .map(|b| b.into_iter().map(|v| v as usize).collect())
        .collect())
}
