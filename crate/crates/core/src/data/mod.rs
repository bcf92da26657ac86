//! Desk-scale data: a seeded Gaussian "foundation" world, task slices of
//! it, n-times synthetic augmentation, input jitter, deterministic batching
//! and the `KDXD` container.

mod dump;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::numerics::Matrix;

pub use dump::{read_dump, write_dump, TeacherDump, DUMP_MAGIC, DUMP_VERSION, FLAG_LABELS};

// ChaCha stream ids; every consumer of the world seed gets its own stream.
const STREAM_WORLD: u64 = 0;
const STREAM_FOUNDATION: u64 = 1;
const STREAM_TASK_TRAIN: u64 = 2;
const STREAM_TASK_TEST: u64 = 3;
const STREAM_SYNTHETIC: u64 = 4;

/// SplitMix64 finalizer folded over `parts`; derives independent seeds
/// from a base seed and a path of tags.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class-conditional Gaussian world. Class `c` has mean
/// `mean_scale * N(0, I)` and samples `mean_c + cluster_std * A_c * eps`
/// with a per-class random mixing matrix `A_c` (entries `N(0, 1/dim)`), so
/// the class covariances differ and the Bayes boundaries are quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianWorldSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub mean_scale: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

impl Default for GaussianWorldSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 16,
            mean_scale: 1.0,
            cluster_std: 1.0,
            seed: 9,
        }
    }
}

impl GaussianWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, message: String| Error::Config {
            key: format!("world.{key}"),
            message,
        };
        if self.num_classes < 2 {
            return Err(err("num_classes", format!("must be >= 2, got {}", self.num_classes)));
        }
        if self.dim == 0 {
            return Err(err("dim", "must be >= 1".into()));
        }
        if !(self.cluster_std.is_finite() && self.cluster_std > 0.0) {
            return Err(err("cluster_std", format!("must be > 0, got {}", self.cluster_std)));
        }
        if !(self.mean_scale.is_finite() && self.mean_scale >= 0.0) {
            return Err(err("mean_scale", format!("must be >= 0, got {}", self.mean_scale)));
        }
        Ok(())
    }
}

/// Materialized class parameters of a [`GaussianWorldSpec`].
#[derive(Debug, Clone)]
pub struct GaussianWorld {
    spec: GaussianWorldSpec,
    means: Matrix<f64>,
    mixing: Vec<Matrix<f64>>,
}

impl GaussianWorld {
    pub fn new(spec: GaussianWorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(spec.seed, STREAM_WORLD);
        let d = spec.dim;
        let means = Matrix::from_fn(spec.num_classes, d, |_, _| {
            spec.mean_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mixing = (0..spec.num_classes)
            .map(|_| Matrix::from_fn(d, d, |_, _| inv_sqrt_d * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(Self { spec, means, mixing })
    }

    pub fn spec(&self) -> &GaussianWorldSpec {
        &self.spec
    }

    pub fn class_mean(&self, class: usize) -> &[f64] {
        self.means.row(class)
    }

    /// `count` fresh samples of `class` drawn from `rng`.
    pub fn sample(&self, class: usize, count: usize, rng: &mut impl Rng) -> Matrix<f64> {
        let d = self.spec.dim;
        let a = &self.mixing[class];
        let mut out = Matrix::zeros(count, d);
        let mut eps = vec![0.0; d];
        for i in 0..count {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            let row = out.row_mut(i);
            for (k, r) in row.iter_mut().enumerate() {
                let mixed: f64 = a.row(k).iter().zip(&eps).map(|(x, y)| x * y).sum();
                *r = self.means.get(class, k) + self.spec.cluster_std * mixed;
            }
        }
        out
    }

    /// Multiply-accumulates spent per generated sample.
    pub fn macs_per_sample(&self) -> u64 {
        (self.spec.dim * self.spec.dim) as u64
    }
}

/// Per-row origin of a dataset sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn new(features: Matrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "Dataset::new",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        let provenance = vec![Provenance::Real; labels.len()];
        Ok(Self {
            features,
            labels,
            num_classes,
            class_names: None,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn synthetic_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|&&p| p == Provenance::Synthetic)
            .count()
    }

    /// Rows `indices` as (features, labels).
    pub fn batch(&self, indices: &[usize]) -> (Matrix<f64>, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Dataset files reuse the dump container: features plus labels, no
    /// logits block.
    pub fn to_dump(&self) -> TeacherDump {
        TeacherDump {
            features: self.features.cast(),
            logits: None,
            labels: Some(self.labels.iter().map(|&l| l as u32).collect()),
        }
    }

    pub fn from_dump(dump: &TeacherDump, num_classes: usize) -> std::result::Result<Self, FormatError> {
        let labels = dump
            .labels
            .as_ref()
            .ok_or_else(|| FormatError::Header("dataset file has no labels".into()))?;
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(FormatError::LabelOutOfRange {
                row,
                label,
                num_classes: num_classes as u32,
            });
        }
        Ok(Dataset::new(
            dump.features.cast(),
            labels.iter().map(|&l| l as usize).collect(),
            num_classes,
        )
        .expect("labels validated"))
    }

    fn append(&mut self, features: &Matrix<f64>, label: usize, provenance: Provenance) -> Result<()> {
        self.features = self.features.vstack(features)?;
        self.labels.extend(std::iter::repeat_n(label, features.rows()));
        self.provenance
            .extend(std::iter::repeat_n(provenance, features.rows()));
        Ok(())
    }
}

/// `per_class` samples of every foundation class, class-major order.
pub fn gen_foundation(spec: &GaussianWorldSpec, per_class: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be >= 1".into()));
    }
    let world = GaussianWorld::new(*spec)?;
    let mut rng = stream_rng(spec.seed, STREAM_FOUNDATION);
    let mut data = Dataset::new(Matrix::zeros(0, spec.dim), Vec::new(), spec.num_classes)?;
    for c in 0..spec.num_classes {
        data.append(&world.sample(c, per_class, &mut rng), c, Provenance::Real)?;
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSplit {
    Train,
    Test,
}

/// Samples restricted to a subset of foundation classes.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    world: GaussianWorld,
    subset: Vec<usize>,
}

impl TaskSampler {
    pub fn new(spec: &GaussianWorldSpec, subset: &[usize]) -> Result<Self> {
        if subset.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "task needs at least 2 classes, got {}",
                subset.len()
            )));
        }
        let mut seen = vec![false; spec.num_classes];
        for &c in subset {
            if c >= spec.num_classes || std::mem::replace(&mut seen[c], true) {
                return Err(Error::InvalidArgument(format!(
                    "invalid class subset {subset:?} for {} classes",
                    spec.num_classes
                )));
            }
        }
        Ok(Self {
            world: GaussianWorld::new(*spec)?,
            subset: subset.to_vec(),
        })
    }

    pub fn world(&self) -> &GaussianWorld {
        &self.world
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }
}

/// Source of class-conditional samples; task-local class indices.
pub trait ClassSampler {
    fn num_classes(&self) -> usize;
    fn sample_class(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Matrix<f64>;
}

impl ClassSampler for TaskSampler {
    fn num_classes(&self) -> usize {
        self.subset.len()
    }

    fn sample_class(&self, class: usize, count: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        self.world.sample(self.subset[class], count, rng)
    }
}

/// Fresh samples of the selected classes, labels re-indexed to
/// `0..subset.len()`. Train and test draw from separate streams, both
/// disjoint from the foundation stream.
pub fn derive_task(
    spec: &GaussianWorldSpec,
    class_subset: &[usize],
    per_class: usize,
    split: TaskSplit,
) -> Result<Dataset> {
    let sampler = TaskSampler::new(spec, class_subset)?;
    let stream = match split {
        TaskSplit::Train => STREAM_TASK_TRAIN,
        TaskSplit::Test => STREAM_TASK_TEST,
    };
    let mut rng = stream_rng(spec.seed, stream);
    let mut data = Dataset::new(Matrix::zeros(0, spec.dim), Vec::new(), class_subset.len())?;
    for c in 0..class_subset.len() {
        data.append(&sampler.sample_class(c, per_class, &mut rng), c, Provenance::Real)?;
    }
    Ok(data)
}

/// Appends `n * count_c` synthetic rows for every class `c`. The original
/// rows stay in place as a prefix; `n = 0` returns the input unchanged.
pub fn augment_nx(task: &Dataset, generator: &impl ClassSampler, n: usize, seed: u64) -> Result<Dataset> {
    let mut out = task.clone();
    if n == 0 {
        return Ok(out);
    }
    if generator.num_classes() != task.num_classes {
        return Err(Error::InvalidArgument(format!(
            "generator has {} classes, task has {}",
            generator.num_classes(),
            task.num_classes
        )));
    }
    let mut rng = stream_rng(seed, STREAM_SYNTHETIC);
    for (c, count) in task.class_counts().into_iter().enumerate() {
        if count > 0 {
            let rows = generator.sample_class(c, n * count, &mut rng);
            out.append(&rows, c, Provenance::Synthetic)?;
        }
    }
    Ok(out)
}

/// Desk-scale stand-in for image augmentation: additive Gaussian jitter
/// plus, with probability `flip_prob` per sample, negating one randomly
/// chosen coordinate. The Gaussian world has no mirror symmetry, so
/// `flip_prob` defaults to 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub jitter_std: f64,
    pub flip_prob: f64,
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        self.jitter_std == 0.0 && self.flip_prob == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_std.is_finite() && self.jitter_std >= 0.0) {
            return Err(Error::Config {
                key: "augment.jitter_std".into(),
                message: format!("must be finite and >= 0, got {}", self.jitter_std),
            });
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config {
                key: "augment.flip_prob".into(),
                message: format!("must be in [0, 1], got {}", self.flip_prob),
            });
        }
        Ok(())
    }
}

/// One augmented view of `batch`, a pure function of `(batch, policy, seed)`.
pub fn input_augment(batch: &Matrix<f64>, policy: &AugmentPolicy, seed: u64) -> Matrix<f64> {
    if policy.is_identity() {
        return batch.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    let d = out.cols();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if policy.jitter_std > 0.0 {
            for v in row.iter_mut() {
                *v += policy.jitter_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if policy.flip_prob > 0.0 && d > 0 && rng.random_bool(policy.flip_prob) {
            let k = rng.random_range(0..d);
            row[k] = -row[k];
        }
    }
    out
}

/// Shuffled row indices for one epoch, chunked into batches. The shuffle
/// is keyed by `(seed, epoch)`; a final batch shorter than 2 is dropped.
pub fn batch_iter(len: usize, batch_size: usize, epoch: u64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be >= 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(seed, epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
