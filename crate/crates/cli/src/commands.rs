use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bolt_core::adapt::{accuracy, train_sigma, AdamWConfig};
use bolt_core::coefficients::{sigma_set_from_container, sigma_set_to_container, zero_sigmas};
use bolt_core::experiment::{
    ablation_grid, adapt_seed, eval_sigmas, finetune_source_on, generate_data, initialize, pretrain_on, support_from,
    tta_seed, FewShotConfig, InitConfig, PipelineConfig, ABLATION_CSV_HEADER,
};
use bolt_core::spectral::{basis_set_from_container, basis_set_to_container, build_bases, BasisConfig};
use bolt_core::taskgen::{make_task_family_with, FinetuneConfig};
use bolt_core::tensor_store::{apply_task_arithmetic, compute_task_vector, load_container, save_container};
use bolt_core::tta::{tta_run, SharpenMode, TtaConfig};
use bolt_core::{BasisSet, BoltError, LabeledSet, SigmaSet, TaskVector, TensorContainer, ToyModel, UnlabeledSet};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::{Common, Metrics};

const ANCHOR: &str = "anchor";
const TARGET_POOL: &str = "target_pool";
const TARGET_TEST: &str = "target_test";
const TARGET_UNLABELED: &str = "target_unlabeled";

fn data_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("data_{split}.btc"))
}

fn out_path(common: &Common) -> anyhow::Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| BoltError::validation("--out is required").into())
}

fn load(path: &Path) -> anyhow::Result<TensorContainer> {
    load_container(path).with_context(|| format!("reading {}", path.display()))
}

fn save(c: &TensorContainer, path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_container(c, path).with_context(|| format!("writing {}", path.display()))
}

fn load_labeled(dir: &Path, split: &str) -> anyhow::Result<LabeledSet> {
    Ok(LabeledSet::from_container(&load(&data_path(dir, split))?)?)
}

/// Expand every pattern, keep the union sorted and free of duplicates.
fn resolve_sources(patterns: &[String]) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for p in patterns {
        let matches: Vec<PathBuf> = glob::glob(p)
            .map_err(|e| BoltError::validation(format!("bad pattern {p:?}: {e}")))?
            .collect::<Result<_, _>>()?;
        if matches.is_empty() {
            return Err(BoltError::validation(format!("{p:?} matches no files")).into());
        }
        paths.extend(matches);
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

/// Task vectors in canonical source-id order.
fn task_vectors(base: &TensorContainer, patterns: &[String]) -> anyhow::Result<Vec<TaskVector>> {
    let mut sources = resolve_sources(patterns)?
        .iter()
        .map(|p| load(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    sources.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    if let Some(w) = sources.windows(2).find(|w| w[0].model_id == w[1].model_id) {
        bail!(BoltError::validation(format!("duplicate source id {:?}", w[0].model_id)));
    }
    Ok(sources
        .iter()
        .map(|s| compute_task_vector(s, base))
        .collect::<bolt_core::Result<_>>()?)
}

fn warn_rank_deficient(bases: &BasisSet) {
    for (layer, b) in bases {
        if b.is_rank_deficient() {
            eprintln!(
                "warning: basis for layer {layer} is rank-deficient (r = {}, effective rank {} / {})",
                b.r, b.effective_rank_u, b.effective_rank_v
            );
        }
    }
}

fn load_bases(path: &Path) -> anyhow::Result<BasisSet> {
    let bases = basis_set_from_container(&load(path)?)?;
    warn_rank_deficient(&bases);
    Ok(bases)
}

fn load_sigmas(path: Option<&Path>, bases: &BasisSet) -> anyhow::Result<SigmaSet> {
    match path {
        Some(p) => Ok(sigma_set_from_container(&load(p)?)?),
        None => Ok(zero_sigmas(bases)),
    }
}

fn print_lines(lines: &[String]) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(())
}

fn parse_shots(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(k @ (1 | 2 | 4 | 8 | 16)) => Ok(k),
        _ => Err(format!("{s} is not one of 1, 2, 4, 8, 16")),
    }
}

/// Optimizer flags shared by every training subcommand.
#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
}

impl TrainFlags {
    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_max: self.lr,
            epochs: self.epochs,
            batch_size: self.batch,
            warmup_epochs: self.warmup_epochs,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 8)]
    pub n_sources: usize,
    #[arg(long, default_value_t = 2048)]
    pub anchor_samples: usize,
    #[arg(long, default_value_t = 1024)]
    pub source_samples: usize,
    #[arg(long, default_value_t = 1024)]
    pub pool_samples: usize,
    #[arg(long, default_value_t = 2000)]
    pub test_samples: usize,
    #[arg(long, default_value_t = 800)]
    pub unlabeled_samples: usize,
}

pub fn gen(a: &GenArgs) -> anyhow::Result<Metrics> {
    let dir = out_path(&a.common)?;
    let mut cfg = PipelineConfig {
        pretrain_samples: a.anchor_samples,
        source_samples: a.source_samples,
        target_pool_samples: a.pool_samples,
        test_samples: a.test_samples,
        unlabeled_samples: a.unlabeled_samples,
        ..PipelineConfig::default()
    };
    cfg.family.n_sources = a.n_sources;
    let seed = a.common.seed;
    let family = make_task_family_with(seed, cfg.family.clone());
    let data = generate_data(&family, &cfg, seed)?;
    fs::create_dir_all(dir)?;

    let mut files: Vec<(String, TensorContainer)> = vec![
        (ANCHOR.into(), data.anchor.to_container(ANCHOR)),
        (TARGET_POOL.into(), data.target_pool.to_container(TARGET_POOL)),
        (TARGET_TEST.into(), data.target_test.to_container(TARGET_TEST)),
        (TARGET_UNLABELED.into(), data.target_unlabeled.to_container(TARGET_UNLABELED)),
    ];
    for (i, s) in data.sources.iter().enumerate() {
        let name = format!("src{i:02}");
        files.push((name.clone(), s.to_container(&name)));
    }
    let mut rows = 0;
    for (split, mut c) in files {
        c.set_meta("family_seed", seed);
        c.set_meta("hidden", family.config.hidden);
        rows += c.require("features")?.shape[0];
        save(&c, &data_path(dir, &split))?;
    }
    Ok(Metrics::from([
        ("n_sources".into(), a.n_sources as f64),
        ("rows".into(), rows as f64),
    ]))
}

#[derive(Args, Debug, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup_epochs: usize,
}

pub fn pretrain(a: &PretrainArgs) -> anyhow::Result<Metrics> {
    let out = out_path(&a.common)?;
    let anchor = load_labeled(&a.data, ANCHOR)?;
    let cfg = FinetuneConfig {
        lr_max: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        warmup_epochs: a.warmup_epochs,
        ..FinetuneConfig::default()
    };
    let model = pretrain_on(&anchor, a.hidden, &cfg, a.common.seed)?;
    save(&model.to_container("theta_0"), out)?;
    Ok(Metrics::from([("anchor_acc".into(), accuracy(&model, &anchor)?)]))
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneSourcesArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: PathBuf,
    /// Directory written by `gen`; every `data_src*.btc` is used.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup_epochs: usize,
}

pub fn finetune_sources(a: &FinetuneSourcesArgs) -> anyhow::Result<Metrics> {
    let dir = out_path(&a.common)?;
    let base = ToyModel::from_container(&load(&a.base)?)?;
    let pattern = data_path(&a.data, "src*");
    let files = resolve_sources(&[pattern.to_string_lossy().into_owned()])?;
    let cfg = FinetuneConfig {
        lr_max: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        warmup_epochs: a.warmup_epochs,
        ..FinetuneConfig::default()
    };
    let mut metrics = Metrics::new();
    let mut total = 0.0;
    for (i, file) in files.iter().enumerate() {
        let data = LabeledSet::from_container(&load(file)?)?;
        let tuned = finetune_source_on(&base, &data, i, &cfg, a.common.seed)?;
        let id = format!("src{i:02}");
        let acc = accuracy(&tuned, &data)?;
        metrics.insert(format!("{id}_train_acc"), acc);
        total += acc;
        save(&tuned.to_container(&id), &dir.join(format!("{id}.btc")))?;
    }
    metrics.insert("n_sources".into(), files.len() as f64);
    metrics.insert("mean_train_acc".into(), total / files.len() as f64);
    Ok(metrics)
}

#[derive(Args, Debug, Serialize)]
pub struct BuildBasisArgs {
    #[command(flatten)]
    pub common: Common,
    /// Source checkpoints; each value may be a glob pattern.
    #[arg(long, required = true, num_args = 1..)]
    pub sources: Vec<String>,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub per_task_k: usize,
    #[arg(long)]
    pub rank_cap: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
}

pub fn build_basis(a: &BuildBasisArgs) -> anyhow::Result<Metrics> {
    let out = out_path(&a.common)?;
    let base = load(&a.base)?;
    let tvs = task_vectors(&base, &a.sources)?;
    let cfg = BasisConfig {
        per_task_k: a.per_task_k,
        eps: a.eps,
        rank_cap: a.rank_cap,
    };
    let bases = build_bases(&tvs, &cfg)?;
    warn_rank_deficient(&bases);
    let ids: Vec<String> = tvs.iter().map(|tv| tv.source_id.clone()).collect();
    save(&basis_set_to_container(&bases, &cfg, &ids), out)?;

    let mut metrics = Metrics::from([("n_sources".into(), tvs.len() as f64)]);
    for (layer, b) in &bases {
        metrics.insert(format!("r::{layer}"), b.r as f64);
        metrics.insert(format!("effective_rank::{layer}"), b.effective_rank_u.min(b.effective_rank_v) as f64);
    }
    Ok(metrics)
}

#[derive(Args, Debug, Serialize)]
pub struct InitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub sources: Vec<String>,
    #[arg(long)]
    pub base: PathBuf,
    /// Directory written by `gen`; the support is drawn from its target pool.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = parse_shots)]
    pub shots: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,10")]
    pub alpha_grid: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    pub probe_batches: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

pub fn init(a: &InitArgs) -> anyhow::Result<Metrics> {
    let out = out_path(&a.common)?;
    let seed = a.common.seed;
    let theta_0 = load(&a.base)?;
    let bases = load_bases(&a.basis)?;
    let tvs = task_vectors(&theta_0, &a.sources)?;
    let support = support_from(&load_labeled(&a.data, TARGET_POOL)?, a.shots, seed)?;
    let cfg = InitConfig {
        alpha_grid: a.alpha_grid.clone(),
        probe_batches: a.probe_batches,
        batch_size: a.batch,
    };
    let init = initialize(&theta_0, &bases, &tvs, &support, &cfg, seed)?;
    save(&sigma_set_to_container(&init.sigma_0, "sigma_0", Some(init.sweep.alpha_hat)), out)?;

    let base = ToyModel::from_container(&theta_0)?;
    let test = load_labeled(&a.data, TARGET_TEST)?;
    let mut metrics = Metrics::from([
        ("alpha_hat".into(), init.sweep.alpha_hat),
        ("base_acc".into(), accuracy(&base, &test)?),
        ("init_acc".into(), eval_sigmas(&base, &bases, &init.sigma_0, &test)?),
    ]);
    for (alpha, score) in init.sweep.grid.iter().zip(&init.sweep.scores) {
        metrics.insert(format!("probe_acc@{alpha}"), *score);
    }
    Ok(metrics)
}

#[derive(Args, Debug, Serialize)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
    /// Starting coefficients; zeros when omitted.
    #[arg(long)]
    pub sigma_init: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = parse_shots)]
    pub shots: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainFlags,
}

pub fn adapt(a: &AdaptArgs) -> anyhow::Result<Metrics> {
    let out = out_path(&a.common)?;
    let seed = a.common.seed;
    let theta_0 = load(&a.base)?;
    let bases = load_bases(&a.basis)?;
    let sigma_init = load_sigmas(a.sigma_init.as_deref(), &bases)?;
    let support = support_from(&load_labeled(&a.data, TARGET_POOL)?, a.shots, seed)?;
    let (sigmas, report) = train_sigma(&theta_0, &bases, &sigma_init, &support, &a.train.optimizer(), adapt_seed(seed))?;
    print_lines(&report.to_json_lines())?;
    save(&sigma_set_to_container(&sigmas, "sigma", None), out)?;

    let base = ToyModel::from_container(&theta_0)?;
    let test = load_labeled(&a.data, TARGET_TEST)?;
    Ok(Metrics::from([
        ("init_acc".into(), eval_sigmas(&base, &bases, &sigma_init, &test)?),
        ("test_acc".into(), eval_sigmas(&base, &bases, &sigmas, &test)?),
        ("train_acc".into(), report.final_accuracy),
        ("final_loss".into(), report.losses().last().copied().unwrap_or(f64::NAN)),
        ("sigma_params".into(), report.sigma_param_count as f64),
    ]))
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SharpenArg {
    Temperature,
    Literal,
}

#[derive(Args, Debug, Serialize)]
pub struct TtaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub basis: PathBuf,
    /// Starting coefficients; zeros when omitted.
    #[arg(long)]
    pub sigma_init: Option<PathBuf>,
    /// Directory written by `gen`; adapts on its unlabeled target split.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, value_enum, default_value_t = SharpenArg::Temperature)]
    pub sharpen_mode: SharpenArg,
    #[arg(long, default_value_t = 0.3)]
    pub aug_sigma: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Split evenly between untrusted and trusted rows.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

pub fn tta(a: &TtaArgs) -> anyhow::Result<Metrics> {
    let out = out_path(&a.common)?;
    let theta_0 = load(&a.base)?;
    let bases = load_bases(&a.basis)?;
    let sigma_init = load_sigmas(a.sigma_init.as_deref(), &bases)?;
    let unlabeled = UnlabeledSet::from_container(&load(&data_path(&a.data, TARGET_UNLABELED))?)?;
    let cfg = TtaConfig {
        tau: a.tau,
        temperature: a.temperature,
        sharpen_mode: match a.sharpen_mode {
            SharpenArg::Temperature => SharpenMode::Temperature,
            SharpenArg::Literal => SharpenMode::Literal,
        },
        batch_size: a.batch,
        epochs: a.epochs,
        aug_noise_sigma: a.aug_sigma,
        optimizer: AdamWConfig {
            lr_max: a.lr,
            ..AdamWConfig::default()
        },
    };
    let (sigmas, report) = tta_run(&theta_0, &bases, &sigma_init, &unlabeled, &cfg, tta_seed(a.common.seed))?;
    print_lines(&report.to_json_lines())?;
    save(&sigma_set_to_container(&sigmas, "sigma_tta", None), out)?;

    let base = ToyModel::from_container(&theta_0)?;
    let test = load_labeled(&a.data, TARGET_TEST)?;
    Ok(Metrics::from([
        ("init_acc".into(), eval_sigmas(&base, &bases, &sigma_init, &test)?),
        ("adapted_acc".into(), eval_sigmas(&base, &bases, &sigmas, &test)?),
        ("trusted_count".into(), report.trusted_count as f64),
        ("k_per_class".into(), report.k_per_class as f64),
        ("final_loss".into(), report.epochs.last().map_or(0.0, |e| e.loss)),
    ]))
}

#[derive(Args, Debug, Serialize)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub sources: Vec<String>,
    /// One coefficient per source in source-id order, or a single one for all.
    #[arg(long, value_delimiter = ',', required = true)]
    pub alphas: Vec<f64>,
    /// Directory written by `gen`; when given, the merge is scored on the target test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

pub fn merge(a: &MergeArgs) -> anyhow::Result<Metrics> {
    let out = out_path(&a.common)?;
    let theta_0 = load(&a.base)?;
    let tvs = task_vectors(&theta_0, &a.sources)?;
    let alphas = match a.alphas.as_slice() {
        [one] => vec![*one; tvs.len()],
        many => many.to_vec(),
    };
    let merged = apply_task_arithmetic(&theta_0, &tvs, &alphas)?;
    save(&merged, out)?;
    let mut metrics = Metrics::from([("n_sources".into(), tvs.len() as f64)]);
    if let Some(dir) = &a.data {
        let test = load_labeled(dir, TARGET_TEST)?;
        metrics.insert("test_acc".into(), accuracy(&ToyModel::from_container(&merged)?, &test)?);
        metrics.insert("base_acc".into(), accuracy(&ToyModel::from_container(&theta_0)?, &test)?);
    }
    Ok(metrics)
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub n_tasks: Vec<usize>,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, default_value_t = 16, value_parser = parse_shots)]
    pub shots: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
}

pub fn ablate(a: &AblateArgs) -> anyhow::Result<Metrics> {
    if a.seeds == 0 {
        bail!(BoltError::validation("--seeds must be at least 1"));
    }
    let seeds: Vec<u64> = (a.common.seed..a.common.seed + a.seeds).collect();
    let mut few = FewShotConfig {
        shots: a.shots,
        ..FewShotConfig::default()
    };
    few.adapt.epochs = a.epochs;
    let rows = ablation_grid(&PipelineConfig::default(), &a.ranks, &a.n_tasks, &seeds, &few)?;

    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    match &a.common.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{csv}"),
    }

    let mean = |keep: &dyn Fn(&bolt_core::experiment::AblationRow) -> bool| {
        let sel: Vec<f64> = rows.iter().filter(|r| keep(r)).map(|r| r.adapted_acc).collect();
        sel.iter().sum::<f64>() / sel.len() as f64
    };
    let mut metrics = Metrics::from([("rows".into(), rows.len() as f64)]);
    for &r in &a.ranks {
        metrics.insert(format!("mean_adapted_acc@rank{r}"), mean(&|row| row.rank == r));
    }
    for &n in &a.n_tasks {
        metrics.insert(format!("mean_adapted_acc@tasks{n}"), mean(&|row| row.n_tasks == n));
    }
    Ok(metrics)
}

#[derive(Args, Debug, Serialize)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Container to describe.
    pub path: PathBuf,
}

pub fn inspect(a: &InspectArgs) -> anyhow::Result<Metrics> {
    let c = load(&a.path)?;
    let manifest = c.manifest_json()?;
    match &a.common.out {
        Some(path) => fs::write(path, format!("{manifest}\n"))?,
        None => println!("{manifest}"),
    }
    Ok(Metrics::from([
        ("entries".into(), c.entries.len() as f64),
        ("values".into(), c.entries.iter().map(|e| e.numel()).sum::<usize>() as f64),
    ]))
}
