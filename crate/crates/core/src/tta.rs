//! Label-free test-time adaptation of the diagonal coefficients.
//!
//! The initial model labels the whole target split once. The most confident
//! samples of each class become a trusted set with frozen one-hot targets;
//! the rest are trained on with a confidence-masked consistency loss between
//! a noisy "strong" view and sharpened pseudo-labels from the clean "weak"
//! view. Every minibatch is half untrusted, half trusted.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::adapt::{apply_sigma_step, contract_grads, lr_schedule, model_with_sigmas, AdamWConfig, OptimState};
use crate::coefficients::{sigma_param_count, SigmaOrigin, SigmaSet};
use crate::error::{BoltError, Result};
use crate::rng::{rng_from, Pcg64};
use crate::spectral::BasisSet;
use crate::taskgen::mlp::{self, log_sum_exp, softmax_rows, ToyModel};
use crate::taskgen::UnlabeledSet;
use crate::tensor_store::TensorContainer;

pub const DEFAULT_TAU: f64 = 0.99;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const MAX_TRUSTED_PER_CLASS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SharpenMode {
    /// `softmax(z / T)`.
    Temperature,
    /// `0.5 · softmax(z)` renormalized, which is `softmax(z)` unchanged.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtaConfig {
    pub tau: f64,
    pub temperature: f64,
    pub sharpen_mode: SharpenMode,
    /// Split evenly between the untrusted and trusted streams.
    pub batch_size: usize,
    pub epochs: usize,
    /// Scale of the Gaussian noise forming the strong view.
    pub aug_noise_sigma: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            tau: DEFAULT_TAU,
            temperature: DEFAULT_TEMPERATURE,
            sharpen_mode: SharpenMode::Temperature,
            batch_size: 32,
            epochs: 10,
            aug_noise_sigma: 0.3,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(BoltError::validation(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(BoltError::validation("temperature must be positive"));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(BoltError::validation(format!(
                "batch size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if self.aug_noise_sigma.is_nan() || self.aug_noise_sigma < 0.0 {
            return Err(BoltError::validation("augmentation scale must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustedSet {
    /// Sorted, unique.
    pub indices: Vec<usize>,
    pub targets: BTreeMap<usize, usize>,
    pub k_per_class: usize,
}

impl TrustedSet {
    pub fn per_class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &c in self.targets.values() {
            counts[c] += 1;
        }
        counts
    }
}

/// `clamp(floor((N / C) / 10), 1, 100)`.
pub fn k_trusted(n: usize, classes: usize) -> usize {
    (n / (classes * 10)).clamp(1, MAX_TRUSTED_PER_CLASS)
}

/// Per class, the `k_trusted` most confident samples among those the model
/// assigns to that class.
pub fn mine_trusted(probs: &DMatrix<f64>) -> Result<TrustedSet> {
    let (n, classes) = probs.shape();
    if classes == 0 || n < classes {
        return Err(BoltError::Degenerate(format!(
            "cannot mine trusted samples from {n} rows and {classes} classes"
        )));
    }
    for (i, row) in probs.row_iter().enumerate() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|p| !p.is_finite()) {
            return Err(BoltError::validation(format!("row {i} is not a probability vector")));
        }
    }
    let k = k_trusted(n, classes);
    let assigned = mlp::predict(probs);
    let mut targets = BTreeMap::new();
    for c in 0..classes {
        let mut candidates: Vec<usize> = (0..n).filter(|&i| assigned[i] == c).collect();
        // Stable: equal confidences keep index order.
        candidates.sort_by(|&a, &b| probs[(b, c)].total_cmp(&probs[(a, c)]));
        for &i in candidates.iter().take(k) {
            targets.insert(i, c);
        }
    }
    Ok(TrustedSet {
        indices: targets.keys().copied().collect(),
        targets,
        k_per_class: k,
    })
}

pub fn sharpen(logits: &[f64], temperature: f64, mode: SharpenMode) -> Vec<f64> {
    match mode {
        SharpenMode::Temperature => {
            let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
            softmax(&scaled)
        }
        SharpenMode::Literal => {
            let halved: Vec<f64> = softmax(logits).into_iter().map(|p| 0.5 * p).collect();
            let total: f64 = halved.iter().sum();
            halved.into_iter().map(|p| p / total).collect()
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

#[derive(Debug, Clone)]
pub struct UfmLoss {
    pub loss: f64,
    pub masked_count: usize,
    /// `∂loss/∂strong_logits`; all zero when nothing passes the mask.
    pub dlogits: DMatrix<f64>,
}

/// Confidence-masked soft cross-entropy.
///
/// `trusted[i]` holds the frozen target of a trusted row. Untrusted rows use
/// the sharpened weak-view prediction and count only when its top
/// probability exceeds `tau`; trusted rows always count.
pub fn ufm_loss(
    strong_logits: &DMatrix<f64>,
    weak_logits: &DMatrix<f64>,
    trusted: &[Option<usize>],
    cfg: &TtaConfig,
) -> Result<UfmLoss> {
    let (b, classes) = strong_logits.shape();
    if weak_logits.shape() != (b, classes) || trusted.len() != b {
        return Err(BoltError::dimension("strong logits, weak logits and trust flags disagree"));
    }
    let mut dlogits = DMatrix::zeros(b, classes);
    let mut targets = Vec::with_capacity(b);
    for (i, trust) in trusted.iter().enumerate() {
        let target = match *trust {
            Some(c) => {
                if c >= classes {
                    return Err(BoltError::validation(format!("trusted target {c} out of range")));
                }
                let mut one_hot = vec![0.0; classes];
                one_hot[c] = 1.0;
                Some(one_hot)
            }
            None => {
                let row: Vec<f64> = weak_logits.row(i).iter().copied().collect();
                let q = sharpen(&row, cfg.temperature, cfg.sharpen_mode);
                let confidence = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (confidence > cfg.tau).then_some(q)
            }
        };
        targets.push(target);
    }
    let masked_count = targets.iter().filter(|t| t.is_some()).count();
    if masked_count == 0 {
        return Ok(UfmLoss {
            loss: 0.0,
            masked_count: 0,
            dlogits,
        });
    }
    let weight = 1.0 / masked_count as f64;
    let probs = softmax_rows(strong_logits);
    let mut loss = 0.0;
    for (i, q) in targets.iter().enumerate() {
        let Some(q) = q else { continue };
        let row: Vec<f64> = strong_logits.row(i).iter().copied().collect();
        let lse = log_sum_exp(&row);
        loss += q.iter().zip(&row).map(|(qc, z)| -qc * (z - lse)).sum::<f64>();
        for c in 0..classes {
            dlogits[(i, c)] = weight * (probs[(i, c)] - q[c]);
        }
    }
    Ok(UfmLoss {
        loss: loss * weight,
        masked_count,
        dlogits,
    })
}

/// Strong-view augmentation for feature vectors.
pub trait Augment {
    fn strong_view(&self, x: &DMatrix<f64>, rng: &mut Pcg64) -> DMatrix<f64>;
}

/// Additive isotropic Gaussian noise.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNoise {
    pub sigma: f64,
}

impl Augment for GaussianNoise {
    fn strong_view(&self, x: &DMatrix<f64>, rng: &mut Pcg64) -> DMatrix<f64> {
        if self.sigma == 0.0 {
            return x.clone();
        }
        x.map(|v| v + self.sigma * rng.sample::<f64, _>(StandardNormal))
    }
}

/// One optimizer step on a two-view batch. Returns `(loss, masked_count)`;
/// no step is taken when nothing passes the mask.
#[allow(clippy::too_many_arguments)]
pub fn tta_step(
    base: &ToyModel,
    bases: &BasisSet,
    sigmas: &mut SigmaSet,
    state: &mut OptimState,
    weak: &DMatrix<f64>,
    strong: &DMatrix<f64>,
    trusted: &[Option<usize>],
    cfg: &TtaConfig,
    lr: f64,
) -> Result<(f64, usize)> {
    let model = model_with_sigmas(base, bases, sigmas)?;
    let weak_logits = mlp::logits(&model, weak)?;
    let cache = mlp::forward(&model, strong)?;
    let ufm = ufm_loss(&cache.logits, &weak_logits, trusted, cfg)?;
    if ufm.masked_count == 0 {
        return Ok((0.0, 0));
    }
    if !ufm.loss.is_finite() {
        return Err(BoltError::numeric("non-finite adaptation loss"));
    }
    let grads = mlp::backward(&model, strong, &cache, &ufm.dlogits);
    let sigma_grads = contract_grads(&grads, bases)?;
    apply_sigma_step(state, sigmas, &sigma_grads, lr)?;
    Ok((ufm.loss, ufm.masked_count))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtaEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub masked_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtaReport {
    pub epochs: Vec<TtaEpoch>,
    pub trusted_count: usize,
    pub k_per_class: usize,
}

impl TtaReport {
    pub fn to_json_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct"))
            .collect();
        lines.push(
            serde_json::json!({
                "summary": true,
                "trusted_count": self.trusted_count,
                "k_per_class": self.k_per_class,
            })
            .to_string(),
        );
        lines
    }
}

/// Cycles through independent permutations of a fixed index pool.
struct Stream {
    pool: Vec<usize>,
    cursor: usize,
}

impl Stream {
    fn new(pool: Vec<usize>) -> Self {
        let cursor = pool.len();
        Stream { pool, cursor }
    }

    fn take(&mut self, n: usize, rng: &mut Pcg64) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !self.pool.is_empty() {
            if self.cursor == self.pool.len() {
                self.pool.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.pool[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

pub fn tta_run(
    theta_0: &TensorContainer,
    bases: &BasisSet,
    sigma_init: &SigmaSet,
    unlabeled: &UnlabeledSet,
    cfg: &TtaConfig,
    seed: u64,
) -> Result<(SigmaSet, TtaReport)> {
    let aug = GaussianNoise {
        sigma: cfg.aug_noise_sigma,
    };
    tta_run_with(theta_0, bases, sigma_init, unlabeled, cfg, &aug, seed)
}

pub fn tta_run_with(
    theta_0: &TensorContainer,
    bases: &BasisSet,
    sigma_init: &SigmaSet,
    unlabeled: &UnlabeledSet,
    cfg: &TtaConfig,
    augment: &dyn Augment,
    seed: u64,
) -> Result<(SigmaSet, TtaReport)> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(BoltError::validation("no unlabeled samples"));
    }
    let base = ToyModel::from_container(theta_0)?;
    let mut sigmas = sigma_init.clone();
    let initial = model_with_sigmas(&base, bases, &sigmas)?;
    let probs = softmax_rows(&mlp::logits(&initial, &unlabeled.features)?);
    let trusted = mine_trusted(&probs)?;

    let untrusted: Vec<usize> = (0..unlabeled.len()).filter(|i| !trusted.targets.contains_key(i)).collect();
    let half = cfg.batch_size / 2;
    let driving = if untrusted.is_empty() { trusted.indices.len() } else { untrusted.len() };
    let steps_per_epoch = driving.div_ceil(half);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.optimizer.warmup_epochs * steps_per_epoch).min(total.saturating_sub(1));

    let mut state = OptimState::new(cfg.optimizer.clone(), sigma_param_count(&sigmas));
    let mut order_rng = rng_from(seed, "tta-untrusted");
    let mut trusted_rng = rng_from(seed, "tta-trusted");
    let mut aug_rng = rng_from(seed, "tta-augment");
    let mut trusted_stream = Stream::new(trusted.indices.clone());
    let mut untrusted_order = untrusted.clone();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        untrusted_order.shuffle(&mut order_rng);
        let mut untrusted_chunks = untrusted_order.chunks(half);
        let (mut loss_sum, mut loss_steps, mut masked, mut rows) = (0.0, 0usize, 0usize, 0usize);
        for _ in 0..steps_per_epoch {
            let mut idx: Vec<usize> = untrusted_chunks.next().map(<[usize]>::to_vec).unwrap_or_default();
            let flags_untrusted = idx.len();
            idx.extend(trusted_stream.take(half, &mut trusted_rng));
            let flags: Vec<Option<usize>> = idx
                .iter()
                .enumerate()
                .map(|(pos, i)| if pos < flags_untrusted { None } else { trusted.targets.get(i).copied() })
                .collect();
            let weak = unlabeled.rows(&idx);
            let strong = augment.strong_view(&weak, &mut aug_rng);
            let lr = lr_schedule(step, total, warmup, cfg.optimizer.lr_max)?;
            let (loss, count) = tta_step(&base, bases, &mut sigmas, &mut state, &weak, &strong, &flags, cfg, lr)?;
            if count > 0 {
                loss_sum += loss;
                loss_steps += 1;
            }
            masked += count;
            rows += idx.len();
            step += 1;
        }
        epochs.push(TtaEpoch {
            epoch,
            loss: if loss_steps > 0 { loss_sum / loss_steps as f64 } else { 0.0 },
            masked_frac: if rows > 0 { masked as f64 / rows as f64 } else { 0.0 },
        });
    }
    if cfg.epochs > 0 {
        for s in sigmas.values_mut() {
            s.origin = SigmaOrigin::Trained;
        }
    }
    Ok((
        sigmas,
        TtaReport {
            epochs,
            trusted_count: trusted.indices.len(),
            k_per_class: trusted.k_per_class,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_trusted_formula() {
        assert_eq!(k_trusted(800, 8), 10);
        assert_eq!(k_trusted(16000, 8), 100);
        assert_eq!(k_trusted(40, 8), 1);
        assert_eq!(k_trusted(1_000_000, 8), 100);
    }

    fn uniformish_probs(n: usize, c: usize) -> DMatrix<f64> {
        let logits = DMatrix::from_fn(n, c, |i, j| (((i * 31 + j * 17) % 23) as f64) * 0.2);
        softmax_rows(&logits)
    }

    #[test]
    fn mining_respects_k_and_argmax() {
        let probs = uniformish_probs(800, 8);
        let t = mine_trusted(&probs).unwrap();
        assert_eq!(t.k_per_class, 10);
        let assigned = mlp::predict(&probs);
        for (&i, &c) in &t.targets {
            assert_eq!(assigned[i], c);
        }
        assert!(t.per_class_counts(8).iter().all(|&n| n <= 10));
        assert!(t.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mining_tiny_split_and_degenerate() {
        let probs = uniformish_probs(40, 8);
        assert_eq!(mine_trusted(&probs).unwrap().k_per_class, 1);
        assert!(matches!(mine_trusted(&uniformish_probs(5, 8)), Err(BoltError::Degenerate(_))));
        let bad = DMatrix::from_element(10, 2, 0.3);
        assert!(mine_trusted(&bad).is_err());
    }

    #[test]
    fn sharpening() {
        assert_eq!(sharpen(&[0.0, 0.0], 0.5, SharpenMode::Temperature), vec![0.5, 0.5]);
        let p = sharpen(&[1.0, 0.0], 0.5, SharpenMode::Temperature);
        assert!((p[0] - 0.880797).abs() < 1e-6);
        assert!((p[1] - 0.119203).abs() < 1e-6);
        let plain = sharpen(&[1.0, 0.0], 1.0, SharpenMode::Temperature);
        assert!((plain[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);

        // Scaling then renormalizing leaves a distribution unchanged.
        let q = [0.6f64, 0.4];
        let renorm: Vec<f64> = q.iter().map(|v| 0.5 * v / (0.5 * q.iter().sum::<f64>())).collect();
        assert!((renorm[0] - 0.6).abs() < 1e-15 && (renorm[1] - 0.4).abs() < 1e-15);
        let logits = [0.6f64.ln(), 0.4f64.ln()];
        let lit = sharpen(&logits, 0.5, SharpenMode::Literal);
        assert!((lit[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_gives_zero_loss() {
        let cfg = TtaConfig::default();
        let strong = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let weak = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        let out = ufm_loss(&strong, &weak, &[None, None], &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.masked_count, 0);
        assert!(out.dlogits.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn confident_trusted_row_has_near_zero_loss() {
        let cfg = TtaConfig::default();
        let strong = DMatrix::from_row_slice(1, 3, &[30.0, 0.0, 0.0]);
        let weak = DMatrix::zeros(1, 3);
        let out = ufm_loss(&strong, &weak, &[Some(0)], &cfg).unwrap();
        assert_eq!(out.masked_count, 1);
        assert!(out.loss < 1e-12);
    }

    #[test]
    fn raising_tau_never_adds_rows() {
        let strong = DMatrix::from_fn(20, 4, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.8);
        let weak = DMatrix::from_fn(20, 4, |i, j| ((i * 5 + j * 13) % 9) as f64 * 1.1);
        let trusted: Vec<Option<usize>> = (0..20).map(|i| (i % 6 == 0).then_some(i % 4)).collect();
        let mut last = usize::MAX;
        for tau in [0.3, 0.5, 0.8, 0.9, 0.99, 0.999, 1.0] {
            let cfg = TtaConfig { tau, ..TtaConfig::default() };
            let n = ufm_loss(&strong, &weak, &trusted, &cfg).unwrap().masked_count;
            assert!(n <= last);
            assert!(n >= 4, "trusted rows always pass");
            last = n;
        }
    }

    #[test]
    fn ufm_gradient_matches_finite_differences() {
        let cfg = TtaConfig { tau: 0.6, ..TtaConfig::default() };
        let strong = DMatrix::from_row_slice(3, 3, &[0.3, -0.2, 0.1, 1.0, 0.5, -1.0, 0.0, 0.2, 0.4]);
        let weak = DMatrix::from_row_slice(3, 3, &[3.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.0, 0.0, 0.0]);
        let trusted = [None, None, Some(2)];
        let out = ufm_loss(&strong, &weak, &trusted, &cfg).unwrap();
        assert_eq!(out.masked_count, 2);
        let h = 1e-6;
        for i in 0..3 {
            for c in 0..3 {
                let mut p = strong.clone();
                p[(i, c)] += h;
                let mut m = strong.clone();
                m[(i, c)] -= h;
                let fd = (ufm_loss(&p, &weak, &trusted, &cfg).unwrap().loss
                    - ufm_loss(&m, &weak, &trusted, &cfg).unwrap().loss)
                    / (2.0 * h);
                assert!((fd - out.dlogits[(i, c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TtaConfig { batch_size: 31, ..TtaConfig::default() }.validate().is_err());
        assert!(TtaConfig { tau: 0.0, ..TtaConfig::default() }.validate().is_err());
        assert!(TtaConfig { temperature: 0.0, ..TtaConfig::default() }.validate().is_err());
        assert!(TtaConfig::default().validate().is_ok());
    }
}
