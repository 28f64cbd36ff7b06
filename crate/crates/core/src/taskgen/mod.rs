//! Synthetic family of related classification tasks.
//!
//! Every task shares the same class anchors `μ_c`; task `t` sees them through
//! a rotation `R_t = exp(Σ_j θ_tj A_j)` built from four shared skew-symmetric
//! generators. Each generator rotates one plane, so a task's effect on the
//! first layer of a model trained on the anchors is confined to a small
//! shared subspace. Source and target angles are drawn around a common
//! offset, which is what makes the family "related". A source rotates only
//! some of the planes while the target rotates all of them, so covering the
//! target's shift takes several sources.
//!
//! Samples: `x = R_t μ_y + noise_sigma · ε`, `y` uniform over classes.

mod finetune;
pub mod mlp;

use nalgebra::DMatrix;
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;

pub use finetune::{finetune_full, FinetuneConfig};
pub use mlp::{mlp_forward_backward, ToyModel};

use crate::error::{BoltError, Result};
use crate::rng::{rng_from, rng_from_indexed};
use crate::spectral::polar_factor;
use crate::tensor_store::{Role, TensorContainer, TensorEntry};

pub const NUM_GENERATORS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub noise_sigma: f64,
    pub n_sources: usize,
    /// Magnitude of the angle offset shared by every non-anchor task.
    pub shared_angle: f64,
    /// Standard deviation of the per-task angle around the shared offset.
    pub angle_spread: f64,
    /// Norm of the anchor component inside the rotated planes.
    pub in_plane_scale: f64,
    /// Per-coordinate scale of the anchor component outside the planes.
    pub off_plane_scale: f64,
    /// Planes each source task rotates; the target rotates all of them.
    pub planes_per_source: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            input_dim: 32,
            classes: 8,
            hidden: 16,
            noise_sigma: 0.3,
            n_sources: 8,
            shared_angle: 1.0,
            angle_spread: 0.25,
            in_plane_scale: 3.0,
            off_plane_scale: 0.3,
            planes_per_source: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub config: FamilyConfig,
    pub seed: u64,
    /// classes × input_dim
    pub anchor_means: DMatrix<f64>,
    /// Skew-symmetric, input_dim × input_dim.
    pub generators: Vec<DMatrix<f64>>,
    pub source_angles: Vec<Vec<f64>>,
    pub target_angles: Vec<f64>,
}

/// Which rotation a batch is drawn under.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskRef {
    Anchor,
    Source(usize),
    Target,
    Angles(Vec<f64>),
}

impl TaskRef {
    pub fn label(&self) -> String {
        match self {
            TaskRef::Anchor => "anchor".into(),
            TaskRef::Source(i) => format!("src{i:02}"),
            TaskRef::Target => "target".into(),
            TaskRef::Angles(_) => "custom".into(),
        }
    }
}

pub fn make_task_family(seed: u64) -> TaskFamily {
    make_task_family_with(seed, FamilyConfig::default())
}

pub fn make_task_family_with(seed: u64, config: FamilyConfig) -> TaskFamily {
    let d = config.input_dim;
    let planes = 2 * NUM_GENERATORS;
    assert!(d >= planes, "input_dim must be at least {planes}");
    let mut rng = rng_from(seed, "family");

    let gauss = DMatrix::from_fn(d, planes, |_, _| rng.sample::<f64, _>(StandardNormal));
    let frame = polar_factor(&gauss).expect("d >= planes");

    let generators = (0..NUM_GENERATORS)
        .map(|j| {
            let a = frame.column(2 * j);
            let b = frame.column(2 * j + 1);
            let outer = a * b.transpose();
            // A_ik = P_ik - P_ki is exactly antisymmetric in floating point.
            DMatrix::from_fn(d, d, |i, k| outer[(i, k)] - outer[(k, i)])
        })
        .collect();

    let in_plane_coord = config.in_plane_scale / (planes as f64).sqrt();
    let mut anchor_means = DMatrix::zeros(config.classes, d);
    for c in 0..config.classes {
        let z: Vec<f64> = (0..planes).map(|_| in_plane_coord * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut mu = &frame * nalgebra::DVector::from_vec(z);
        for v in mu.iter_mut() {
            *v += config.off_plane_scale * rng.sample::<f64, _>(StandardNormal);
        }
        anchor_means.set_row(c, &mu.transpose());
    }

    let shared: Vec<f64> = (0..NUM_GENERATORS)
        .map(|_| if rng.random::<bool>() { config.shared_angle } else { -config.shared_angle })
        .collect();
    let draw_angles = |rng: &mut rand_pcg::Pcg64| -> Vec<f64> {
        shared
            .iter()
            .map(|s| s + config.angle_spread * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let active = config.planes_per_source.clamp(1, NUM_GENERATORS);
    let source_angles = (0..config.n_sources)
        .map(|_| {
            let mut angles = draw_angles(&mut rng);
            let keep = rand::seq::index::sample(&mut rng, NUM_GENERATORS, active).into_vec();
            for (j, a) in angles.iter_mut().enumerate() {
                if !keep.contains(&j) {
                    *a = 0.0;
                }
            }
            angles
        })
        .collect();
    let target_angles = draw_angles(&mut rng);

    TaskFamily {
        config,
        seed,
        anchor_means,
        generators,
        source_angles,
        target_angles,
    }
}

impl TaskFamily {
    pub fn angles(&self, task: &TaskRef) -> Result<Vec<f64>> {
        Ok(match task {
            TaskRef::Anchor => vec![0.0; NUM_GENERATORS],
            TaskRef::Source(i) => self
                .source_angles
                .get(*i)
                .cloned()
                .ok_or_else(|| BoltError::validation(format!("no source task {i}")))?,
            TaskRef::Target => self.target_angles.clone(),
            TaskRef::Angles(a) => {
                if a.len() != NUM_GENERATORS {
                    return Err(BoltError::validation(format!(
                        "expected {NUM_GENERATORS} angles, got {}",
                        a.len()
                    )));
                }
                a.clone()
            }
        })
    }

    pub fn rotation(&self, task: &TaskRef) -> Result<DMatrix<f64>> {
        let angles = self.angles(task)?;
        let d = self.config.input_dim;
        let mut skew = DMatrix::zeros(d, d);
        for (theta, g) in angles.iter().zip(&self.generators) {
            skew += g * *theta;
        }
        Ok(expm(&skew))
    }
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm1 > 0.5 { (norm1 / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=30 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// n × d
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Feature rows with no labels at all; what test-time adaptation receives.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub features: DMatrix<f64>,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        select_rows(&self.features, idx)
    }

    pub fn to_container(&self, id: &str) -> TensorContainer {
        TensorContainer::new(id, Role::Dataset).with_entries(vec![TensorEntry::from_matrix("features", &self.features)])
    }

    /// Reads the features of any dataset container; labels, if present, are dropped.
    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        Ok(UnlabeledSet {
            features: c.matrix("features")?,
        })
    }
}

pub(crate) fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: select_rows(&self.features, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn without_labels(&self) -> UnlabeledSet {
        UnlabeledSet {
            features: self.features.clone(),
        }
    }

    /// Consecutive batches of at most `batch_size` rows.
    pub fn batches(&self, batch_size: usize) -> Vec<LabeledSet> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.subset(c)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn to_container(&self, id: &str) -> TensorContainer {
        let labels: Vec<f64> = self.labels.iter().map(|&y| y as f64).collect();
        let mut c = TensorContainer::new(id, Role::Dataset).with_entries(vec![
            TensorEntry::from_matrix("features", &self.features),
            TensorEntry::from_vector("labels", &labels),
        ]);
        c.set_meta("num_classes", self.num_classes);
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let features = c.matrix("features")?;
        let labels = c
            .require("labels")?
            .data
            .iter()
            .map(|&y| {
                if y >= 0.0 && y.fract() == 0.0 {
                    Ok(y as usize)
                } else {
                    Err(BoltError::validation(format!("invalid label {y}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let num_classes = c
            .metadata
            .get("num_classes")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| BoltError::validation("dataset without num_classes"))?;
        if labels.len() != features.nrows() || labels.iter().any(|&y| y >= num_classes) {
            return Err(BoltError::validation("labels do not match features"));
        }
        Ok(LabeledSet {
            features,
            labels,
            num_classes,
        })
    }
}

pub fn sample_batch(family: &TaskFamily, task: &TaskRef, n: usize, seed: u64) -> Result<LabeledSet> {
    if n == 0 {
        return Err(BoltError::validation("sample size must be at least 1"));
    }
    let rotation = family.rotation(task)?;
    let rotated = &family.anchor_means * rotation.transpose();
    let mut rng = rng_from_indexed(seed, "sample", family.seed);
    let classes = family.config.classes;
    let d = family.config.input_dim;
    let mut features = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..classes);
        labels.push(y);
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            features[(i, j)] = rotated[(y, j)] + family.config.noise_sigma * eps;
        }
    }
    Ok(LabeledSet {
        features,
        labels,
        num_classes: classes,
    })
}

/// Exactly `k` examples of every class, chosen by a seeded shuffle.
pub fn kshot_support(dataset: &LabeledSet, k: usize, seed: u64) -> Result<LabeledSet> {
    if k == 0 {
        return Err(BoltError::validation("k must be at least 1"));
    }
    let mut rng = rng_from(seed, "kshot");
    let mut chosen = Vec::with_capacity(k * dataset.num_classes);
    for c in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == c).collect();
        if idx.len() < k {
            return Err(BoltError::validation(format!(
                "class {c} has {} examples, {k} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let mut pick = idx[..k].to_vec();
        pick.sort_unstable();
        chosen.extend(pick);
    }
    Ok(dataset.subset(&chosen))
}
