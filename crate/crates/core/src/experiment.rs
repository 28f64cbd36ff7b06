//! End-to-end runs on the synthetic family: pretrain a base model on the
//! anchor task, fine-tune a library of source models, build bases, and adapt
//! to the held-out target task.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::adapt::{accuracy, model_with_sigmas, train_sigma, AdamWConfig};
use crate::coefficients::{
    alpha_sweep, pooled_coefficients, scale_sigmas, zero_sigmas, SigmaSet, DEFAULT_ALPHA_GRID,
    DEFAULT_PROBE_BATCHES,
};
use crate::error::{BoltError, Result};
use crate::rng::{derive_seed, rng_from, stream_tag};
use crate::spectral::{build_bases, random_bases, BasisConfig, BasisSet};
use crate::taskgen::{
    finetune_full, kshot_support, make_task_family_with, sample_batch, FamilyConfig, FinetuneConfig, LabeledSet,
    TaskFamily, TaskRef, ToyModel, UnlabeledSet,
};
use crate::tensor_store::{compute_task_vector, TaskVector, TensorContainer};
use crate::tta::{tta_run, TtaConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    #[serde(skip)]
    pub family: FamilyConfig,
    pub pretrain_samples: usize,
    pub pretrain: FinetuneConfig,
    pub source_samples: usize,
    pub source_finetune: FinetuneConfig,
    pub target_pool_samples: usize,
    pub test_samples: usize,
    pub unlabeled_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            family: FamilyConfig::default(),
            pretrain_samples: 2048,
            pretrain: FinetuneConfig {
                lr_max: 1e-2,
                epochs: 30,
                ..FinetuneConfig::default()
            },
            source_samples: 1024,
            source_finetune: FinetuneConfig {
                lr_max: 5e-3,
                epochs: 20,
                ..FinetuneConfig::default()
            },
            target_pool_samples: 1024,
            test_samples: 2000,
            unlabeled_samples: 800,
        }
    }
}

/// Every labeled split of one family draw.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyData {
    pub anchor: LabeledSet,
    pub sources: Vec<LabeledSet>,
    pub target_pool: LabeledSet,
    pub target_test: LabeledSet,
    pub target_unlabeled: UnlabeledSet,
}

pub fn generate_data(family: &TaskFamily, cfg: &PipelineConfig, seed: u64) -> Result<FamilyData> {
    let anchor = sample_batch(family, &TaskRef::Anchor, cfg.pretrain_samples, derive_seed(seed, stream_tag("anchor-data")))?;
    let sources = (0..family.config.n_sources)
        .map(|i| {
            let data_seed = derive_seed(derive_seed(seed, stream_tag("source-data")), i as u64);
            sample_batch(family, &TaskRef::Source(i), cfg.source_samples, data_seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let target_pool = sample_batch(family, &TaskRef::Target, cfg.target_pool_samples, derive_seed(seed, stream_tag("target-pool")))?;
    let target_test = sample_batch(family, &TaskRef::Target, cfg.test_samples, derive_seed(seed, stream_tag("target-test")))?;
    let target_unlabeled = sample_batch(family, &TaskRef::Target, cfg.unlabeled_samples, derive_seed(seed, stream_tag("tta-split")))?.without_labels();
    Ok(FamilyData {
        anchor,
        sources,
        target_pool,
        target_test,
        target_unlabeled,
    })
}

/// Base model plus fine-tuned source checkpoints.
#[derive(Debug, Clone)]
pub struct SourceLibrary {
    pub seed: u64,
    pub family: TaskFamily,
    pub data: FamilyData,
    pub theta_0: TensorContainer,
    pub sources: Vec<TensorContainer>,
}

impl SourceLibrary {
    pub fn task_vectors(&self, n_tasks: usize) -> Result<Vec<TaskVector>> {
        if n_tasks == 0 || n_tasks > self.sources.len() {
            return Err(BoltError::validation(format!(
                "requested {n_tasks} source tasks, library has {}",
                self.sources.len()
            )));
        }
        self.sources[..n_tasks]
            .iter()
            .map(|s| compute_task_vector(s, &self.theta_0))
            .collect()
    }
}

/// Train a freshly initialized model on anchor data.
pub fn pretrain_on(anchor: &LabeledSet, hidden: usize, cfg: &FinetuneConfig, seed: u64) -> Result<ToyModel> {
    if anchor.is_empty() {
        return Err(BoltError::validation("anchor data is empty"));
    }
    let init = ToyModel::init(anchor.features.ncols(), hidden, anchor.num_classes, &mut rng_from(seed, "base-init"));
    finetune_full(&init, anchor, cfg, derive_seed(seed, stream_tag("pretrain")))
}

/// Fine-tune the base on the data of source `index`.
pub fn finetune_source_on(
    theta_0: &ToyModel,
    data: &LabeledSet,
    index: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<ToyModel> {
    let ft_seed = derive_seed(derive_seed(seed, stream_tag("source-ft")), index as u64);
    finetune_full(theta_0, data, cfg, ft_seed)
}

pub fn build_library(seed: u64, cfg: &PipelineConfig) -> Result<SourceLibrary> {
    let family = make_task_family_with(seed, cfg.family.clone());
    let data = generate_data(&family, cfg, seed)?;
    let base = pretrain_on(&data.anchor, family.config.hidden, &cfg.pretrain, seed)?;
    let theta_0 = base.to_container("theta_0");
    let sources = data
        .sources
        .iter()
        .enumerate()
        .map(|(i, d)| finetune_source_on(&base, d, i, &cfg.source_finetune, seed).map(|m| m.to_container(&TaskRef::Source(i).label())))
        .collect::<Result<Vec<_>>>()?;
    Ok(SourceLibrary {
        seed,
        family,
        data,
        theta_0,
        sources,
    })
}

/// Class-balanced k-shot support drawn from the target pool.
pub fn support_from(pool: &LabeledSet, shots: usize, seed: u64) -> Result<LabeledSet> {
    kshot_support(pool, shots, derive_seed(seed, stream_tag("support")))
}

/// First `probe_batches` minibatches of a seeded shuffle of the support.
pub fn probe_batches(support: &LabeledSet, probe_batches: usize, batch_size: usize, seed: u64) -> Vec<LabeledSet> {
    let mut idx: Vec<usize> = (0..support.len()).collect();
    idx.shuffle(&mut rng_from(seed, "probe"));
    idx.chunks(batch_size.max(1))
        .take(probe_batches)
        .map(|c| support.subset(c))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub alpha_grid: Vec<f64>,
    pub probe_batches: usize,
    pub batch_size: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            probe_batches: DEFAULT_PROBE_BATCHES,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Initialization {
    pub pooled: SigmaSet,
    pub sigma_0: SigmaSet,
    pub sweep: crate::coefficients::AlphaSweepResult,
}

/// Pool the source diagonals and rescale them by the α that scores best on
/// probe batches of the support.
pub fn initialize(
    theta_0: &TensorContainer,
    bases: &BasisSet,
    task_vectors: &[TaskVector],
    support: &LabeledSet,
    cfg: &InitConfig,
    seed: u64,
) -> Result<Initialization> {
    let pooled = pooled_coefficients(bases, task_vectors)?;
    let probe = probe_batches(support, cfg.probe_batches, cfg.batch_size, seed);
    let sweep = alpha_sweep(
        theta_0,
        bases,
        &pooled,
        &cfg.alpha_grid,
        &probe,
        LabeledSet::len,
        |theta, batch| accuracy(&ToyModel::from_container(theta)?, batch),
    )?;
    let sigma_0 = scale_sigmas(&pooled, sweep.alpha_hat);
    Ok(Initialization {
        pooled,
        sigma_0,
        sweep,
    })
}

#[derive(Debug, Clone)]
pub struct FewShotConfig {
    pub basis: BasisConfig,
    pub n_tasks: usize,
    pub shots: usize,
    pub init: InitConfig,
    pub adapt: AdamWConfig,
    pub full_finetune: FinetuneConfig,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            basis: BasisConfig::default(),
            n_tasks: 8,
            shots: 16,
            init: InitConfig::default(),
            adapt: AdamWConfig::default(),
            full_finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewShotOutcome {
    pub base_acc: f64,
    pub init_acc: f64,
    pub adapted_acc: f64,
    pub zero_init_acc: f64,
    pub full_ft_acc: f64,
    pub random_basis_acc: f64,
    pub alpha_hat: f64,
    pub rank: usize,
    pub sigma_params: usize,
}

/// Test accuracy of Θ_0 with the given diagonals applied.
pub fn eval_sigmas(base: &ToyModel, bases: &BasisSet, sigmas: &SigmaSet, test: &LabeledSet) -> Result<f64> {
    accuracy(&model_with_sigmas(base, bases, sigmas)?, test)
}

/// Everything the few-shot comparison needs for one library and one seed.
pub fn run_fewshot(lib: &SourceLibrary, fs: &FewShotConfig, seed: u64) -> Result<FewShotOutcome> {
    let task_vectors = lib.task_vectors(fs.n_tasks)?;
    let bases = build_bases(&task_vectors, &fs.basis)?;
    let test = &lib.data.target_test;
    let support = support_from(&lib.data.target_pool, fs.shots, seed)?;
    let base = ToyModel::from_container(&lib.theta_0)?;
    let train_seed = adapt_seed(seed);

    let init = initialize(&lib.theta_0, &bases, &task_vectors, &support, &fs.init, seed)?;
    let (adapted, _) = train_sigma(&lib.theta_0, &bases, &init.sigma_0, &support, &fs.adapt, train_seed)?;
    let (zero_adapted, _) = train_sigma(&lib.theta_0, &bases, &zero_sigmas(&bases), &support, &fs.adapt, train_seed)?;

    let control = random_bases(&bases, &mut rng_from(seed, "random-basis"))?;
    let control_init = initialize(&lib.theta_0, &control, &task_vectors, &support, &fs.init, seed)?;
    let (control_adapted, _) = train_sigma(&lib.theta_0, &control, &control_init.sigma_0, &support, &fs.adapt, train_seed)?;

    let full = finetune_full(&base, &support, &fs.full_finetune, train_seed)?;

    Ok(FewShotOutcome {
        base_acc: accuracy(&base, test)?,
        init_acc: eval_sigmas(&base, &bases, &init.sigma_0, test)?,
        adapted_acc: eval_sigmas(&base, &bases, &adapted, test)?,
        zero_init_acc: eval_sigmas(&base, &bases, &zero_adapted, test)?,
        full_ft_acc: accuracy(&full, test)?,
        random_basis_acc: eval_sigmas(&base, &control, &control_adapted, test)?,
        alpha_hat: init.sweep.alpha_hat,
        rank: bases.values().map(|b| b.r).max().unwrap_or(0),
        sigma_params: bases.values().map(|b| b.r).sum(),
    })
}

/// Basis settings for an ablation cell of total rank `rank` built from
/// `n_tasks` sources: enough directions per task to reach `rank`, capped to it.
pub fn ablation_basis(rank: usize, n_tasks: usize, eps: f64) -> BasisConfig {
    let per_task_k = rank.div_ceil(n_tasks).max(1);
    let stacked = per_task_k * n_tasks;
    BasisConfig {
        per_task_k,
        eps,
        rank_cap: (rank < stacked).then_some(rank),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub rank: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub init_acc: f64,
    pub adapted_acc: f64,
    pub zero_init_acc: f64,
}

pub const ABLATION_CSV_HEADER: &str = "rank,n_tasks,seed,init_acc,adapted_acc,zero_init_acc";

impl AblationRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.rank, self.n_tasks, self.seed, self.init_acc, self.adapted_acc, self.zero_init_acc
        )
    }
}

pub fn ablation_cell(lib: &SourceLibrary, rank: usize, n_tasks: usize, fs: &FewShotConfig) -> Result<AblationRow> {
    let task_vectors = lib.task_vectors(n_tasks)?;
    let bases = build_bases(&task_vectors, &ablation_basis(rank, n_tasks, fs.basis.eps))?;
    let test = &lib.data.target_test;
    let seed = lib.seed;
    let support = support_from(&lib.data.target_pool, fs.shots, seed)?;
    let base = ToyModel::from_container(&lib.theta_0)?;
    let train_seed = adapt_seed(seed);
    let init = initialize(&lib.theta_0, &bases, &task_vectors, &support, &fs.init, seed)?;
    let (adapted, _) = train_sigma(&lib.theta_0, &bases, &init.sigma_0, &support, &fs.adapt, train_seed)?;
    let (zero_adapted, _) = train_sigma(&lib.theta_0, &bases, &zero_sigmas(&bases), &support, &fs.adapt, train_seed)?;
    Ok(AblationRow {
        rank,
        n_tasks,
        seed,
        init_acc: eval_sigmas(&base, &bases, &init.sigma_0, test)?,
        adapted_acc: eval_sigmas(&base, &bases, &adapted, test)?,
        zero_init_acc: eval_sigmas(&base, &bases, &zero_adapted, test)?,
    })
}

/// Rows in canonical `(seed, rank, n_tasks)` order. Each seed runs on its
/// own thread; the output does not depend on scheduling.
pub fn ablation_grid(
    cfg: &PipelineConfig,
    ranks: &[usize],
    n_tasks: &[usize],
    seeds: &[u64],
    fs: &FewShotConfig,
) -> Result<Vec<AblationRow>> {
    let max_tasks = n_tasks.iter().copied().max().unwrap_or(0);
    if max_tasks > cfg.family.n_sources {
        return Err(BoltError::validation(format!(
            "ablation needs {max_tasks} source tasks, family has {}",
            cfg.family.n_sources
        )));
    }
    if n_tasks.contains(&0) || ranks.contains(&0) {
        return Err(BoltError::validation("ranks and task counts must be positive"));
    }
    let per_seed = |seed: u64| -> Result<Vec<AblationRow>> {
        let lib = build_library(seed, cfg)?;
        let mut rows = Vec::with_capacity(ranks.len() * n_tasks.len());
        for &rank in ranks {
            for &n in n_tasks {
                rows.push(ablation_cell(&lib, rank, n, fs)?);
            }
        }
        Ok(rows)
    };
    let results: Vec<Result<Vec<AblationRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&seed| scope.spawn(move || per_seed(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(BoltError::numeric("ablation worker panicked"))))
            .collect()
    });
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn adapt_seed(seed: u64) -> u64 {
    derive_seed(seed, stream_tag("adapt"))
}

pub fn tta_seed(seed: u64) -> u64 {
    derive_seed(seed, stream_tag("tta"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtaOutcome {
    pub init_acc: f64,
    pub adapted_acc: f64,
    pub trusted_count: usize,
}

/// Label-free adaptation from the pooled, rescaled initialization.
pub fn run_tta(lib: &SourceLibrary, fs: &FewShotConfig, tta: &TtaConfig, seed: u64) -> Result<TtaOutcome> {
    let task_vectors = lib.task_vectors(fs.n_tasks)?;
    let bases = build_bases(&task_vectors, &fs.basis)?;
    let test = &lib.data.target_test;
    // α is chosen on a labeled k-shot support, as in the few-shot setting.
    let support = support_from(&lib.data.target_pool, fs.shots, seed)?;
    let init = initialize(&lib.theta_0, &bases, &task_vectors, &support, &fs.init, seed)?;
    let (adapted, report) = tta_run(&lib.theta_0, &bases, &init.sigma_0, &lib.data.target_unlabeled, tta, tta_seed(seed))?;
    let base = ToyModel::from_container(&lib.theta_0)?;
    Ok(TtaOutcome {
        init_acc: eval_sigmas(&base, &bases, &init.sigma_0, test)?,
        adapted_acc: eval_sigmas(&base, &bases, &adapted, test)?,
        trusted_count: report.trusted_count,
    })
}
