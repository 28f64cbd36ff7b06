//! Coordinates of layer updates in a fixed spectral basis.
//!
//! A layer update `M` is projected to `S = Uᵀ M V`. Because the columns of `U`
//! and `V` are orthonormal, `‖M − U D Vᵀ‖²` splits into a part independent of
//! `D` plus `‖S − D‖²`, so the best diagonal `D` is just `diag(S)`. Only that
//! length-`r` vector is kept.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{BoltError, Result};
use crate::spectral::{BasisSet, SpectralBasis};
use crate::tensor_store::{Role, TaskVector, TensorContainer, TensorEntry};

/// Default global-scale grid for the α sweep.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [1.0, 3.0, 5.0, 7.0, 10.0];
pub const DEFAULT_PROBE_BATCHES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    pub s: DMatrix<f64>,
    pub layer_name: String,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaOrigin {
    Extracted,
    Pooled,
    Rescaled,
    Trained,
}

impl SigmaOrigin {
    pub fn as_str(&self) -> &'static str {
        match self {
            SigmaOrigin::Extracted => "extracted",
            SigmaOrigin::Pooled => "pooled",
            SigmaOrigin::Rescaled => "rescaled",
            SigmaOrigin::Trained => "trained",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "extracted" => SigmaOrigin::Extracted,
            "pooled" => SigmaOrigin::Pooled,
            "rescaled" => SigmaOrigin::Rescaled,
            "trained" => SigmaOrigin::Trained,
            other => return Err(BoltError::validation(format!("unknown sigma origin {other:?}"))),
        })
    }
}

/// Diagonal coefficients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaVector {
    pub s: Vec<f64>,
    pub layer_name: String,
    pub origin: SigmaOrigin,
    /// Source checkpoint for extracted vectors; empty otherwise.
    pub source_id: String,
}

impl SigmaVector {
    pub fn new(layer_name: impl Into<String>, s: Vec<f64>, origin: SigmaOrigin) -> Self {
        SigmaVector {
            s,
            layer_name: layer_name.into(),
            origin,
            source_id: String::new(),
        }
    }

    pub fn zeros(layer_name: impl Into<String>, r: usize) -> Self {
        SigmaVector::new(layer_name, vec![0.0; r], SigmaOrigin::Trained)
    }

    pub fn scaled(&self, alpha: f64) -> SigmaVector {
        SigmaVector {
            s: self.s.iter().map(|x| alpha * x).collect(),
            layer_name: self.layer_name.clone(),
            origin: SigmaOrigin::Rescaled,
            source_id: String::new(),
        }
    }
}

/// Per-layer coefficient vectors keyed by layer name.
pub type SigmaSet = BTreeMap<String, SigmaVector>;

pub fn zero_sigmas(bases: &BasisSet) -> SigmaSet {
    bases
        .iter()
        .map(|(name, b)| (name.clone(), SigmaVector::zeros(name.clone(), b.r)))
        .collect()
}

pub fn scale_sigmas(sigmas: &SigmaSet, alpha: f64) -> SigmaSet {
    sigmas
        .iter()
        .map(|(name, s)| (name.clone(), s.scaled(alpha)))
        .collect()
}

/// Total number of coefficients.
pub fn sigma_param_count(sigmas: &SigmaSet) -> usize {
    sigmas.values().map(|s| s.s.len()).sum()
}

fn check_layer_shape(m: &DMatrix<f64>, basis: &SpectralBasis) -> Result<()> {
    if m.shape() != basis.layer_shape() {
        return Err(BoltError::dimension(format!(
            "layer {:?}: matrix is {}x{}, basis acts on {}x{}",
            basis.layer_name,
            m.nrows(),
            m.ncols(),
            basis.layer_shape().0,
            basis.layer_shape().1
        )));
    }
    Ok(())
}

/// `S = U_orthᵀ M V_orth`.
pub fn project(m: &DMatrix<f64>, basis: &SpectralBasis) -> Result<ProjectionMatrix> {
    check_layer_shape(m, basis)?;
    Ok(ProjectionMatrix {
        s: basis.u_orth.transpose() * m * &basis.v_orth,
        layer_name: basis.layer_name.clone(),
        source_id: String::new(),
    })
}

pub fn extract_diagonal(p: &ProjectionMatrix) -> Result<SigmaVector> {
    if !p.s.is_square() {
        return Err(BoltError::dimension(format!(
            "projection of {:?} is {}x{}, expected square",
            p.layer_name,
            p.s.nrows(),
            p.s.ncols()
        )));
    }
    Ok(SigmaVector {
        s: p.s.diagonal().iter().copied().collect(),
        layer_name: p.layer_name.clone(),
        origin: SigmaOrigin::Extracted,
        source_id: p.source_id.clone(),
    })
}

/// Componentwise mean, summed in `source_id` order.
pub fn pool_diagonals(sigmas: &[SigmaVector]) -> Result<SigmaVector> {
    let Some(first) = sigmas.first() else {
        return Err(BoltError::validation("cannot pool an empty set of coefficient vectors"));
    };
    for s in sigmas {
        if s.s.len() != first.s.len() || s.layer_name != first.layer_name {
            return Err(BoltError::validation(format!(
                "cannot pool {:?} (len {}) with {:?} (len {})",
                s.layer_name,
                s.s.len(),
                first.layer_name,
                first.s.len()
            )));
        }
    }
    let mut order: Vec<&SigmaVector> = sigmas.iter().collect();
    order.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    let n = sigmas.len() as f64;
    let mut acc = vec![0.0; first.s.len()];
    for s in order {
        for (a, x) in acc.iter_mut().zip(&s.s) {
            *a += x;
        }
    }
    Ok(SigmaVector::new(
        first.layer_name.clone(),
        acc.into_iter().map(|a| a / n).collect(),
        SigmaOrigin::Pooled,
    ))
}

/// `U_orth diag(s) V_orthᵀ`.
pub fn reconstruct_update(basis: &SpectralBasis, sigma: &SigmaVector) -> Result<DMatrix<f64>> {
    if sigma.s.len() != basis.r {
        return Err(BoltError::dimension(format!(
            "layer {:?}: {} coefficients for a rank-{} basis",
            basis.layer_name,
            sigma.s.len(),
            basis.r
        )));
    }
    let mut us = basis.u_orth.clone();
    for (j, &s) in sigma.s.iter().enumerate() {
        us.column_mut(j).scale_mut(s);
    }
    Ok(us * basis.v_orth.transpose())
}

/// `Θ_0 + Σ_ℓ U_ℓ diag(s_ℓ) V_ℓᵀ`; entries without a basis are copied from `Θ_0`.
pub fn compose_model(
    theta_0: &TensorContainer,
    bases: &BasisSet,
    sigmas: &SigmaSet,
) -> Result<TensorContainer> {
    let mut out = theta_0.clone();
    out.role = Role::Checkpoint;
    for (layer, basis) in bases {
        let sigma = sigmas
            .get(layer)
            .ok_or_else(|| BoltError::validation(format!("no coefficients for layer {layer:?}")))?;
        let entry = out
            .get_mut(layer)
            .ok_or_else(|| BoltError::validation(format!("base checkpoint has no layer {layer:?}")))?;
        let base = entry.to_matrix()?;
        check_layer_shape(&base, basis)?;
        let delta = reconstruct_update(basis, sigma)?;
        *entry = TensorEntry::from_matrix(layer.clone(), &(base + delta));
    }
    Ok(out)
}

/// Project every source task vector onto the bases and keep the diagonals,
/// then average per layer.
pub fn pooled_coefficients(bases: &BasisSet, task_vectors: &[TaskVector]) -> Result<SigmaSet> {
    let mut pooled = SigmaSet::new();
    for (layer, basis) in bases {
        let mut per_source = Vec::with_capacity(task_vectors.len());
        for tv in task_vectors {
            let mut p = project(&tv.matrix(layer)?, basis)?;
            p.source_id = tv.source_id.clone();
            per_source.push(extract_diagonal(&p)?);
        }
        pooled.insert(layer.clone(), pool_diagonals(&per_source)?);
    }
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSweepResult {
    pub alpha_hat: f64,
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
}

impl AlphaSweepResult {
    pub fn best_score(&self) -> f64 {
        self.scores
            .iter()
            .zip(&self.grid)
            .find(|(_, &a)| a == self.alpha_hat)
            .map(|(s, _)| *s)
            .unwrap_or(f64::NAN)
    }
}

/// Pick the global scale for the pooled coefficients that scores best on the
/// probe batches. Ties go to the smallest α.
///
/// `eval` returns the accuracy of a composed checkpoint on one batch; batch
/// scores are combined weighted by batch size, which `batch_len` reports.
pub fn alpha_sweep<B, F, L>(
    theta_0: &TensorContainer,
    bases: &BasisSet,
    s_pool: &SigmaSet,
    grid: &[f64],
    probe: &[B],
    batch_len: L,
    eval: F,
) -> Result<AlphaSweepResult>
where
    F: Fn(&TensorContainer, &B) -> Result<f64>,
    L: Fn(&B) -> usize,
{
    if grid.is_empty() {
        return Err(BoltError::validation("alpha grid is empty"));
    }
    if probe.is_empty() {
        return Err(BoltError::validation("no probe batches for the alpha sweep"));
    }
    let total: usize = probe.iter().map(&batch_len).sum();
    if total == 0 {
        return Err(BoltError::validation("probe batches are empty"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let theta = compose_model(theta_0, bases, &scale_sigmas(s_pool, alpha))?;
        let mut weighted = 0.0;
        for batch in probe {
            weighted += eval(&theta, batch)? * batch_len(batch) as f64;
        }
        scores.push(weighted / total as f64);
    }
    let mut best = 0usize;
    for i in 1..grid.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] < grid[best]) {
            best = i;
        }
    }
    Ok(AlphaSweepResult {
        alpha_hat: grid[best],
        grid: grid.to_vec(),
        scores,
    })
}

pub fn sigma_set_to_container(
    sigmas: &SigmaSet,
    model_id: &str,
    alpha_hat: Option<f64>,
) -> TensorContainer {
    let mut c = TensorContainer::new(model_id, Role::Sigma);
    for (name, s) in sigmas {
        c.push(TensorEntry::from_vector(format!("sigma::{name}"), &s.s));
    }
    if let Some(origin) = sigmas.values().next().map(|s| s.origin) {
        c.set_meta("origin", origin.as_str());
    }
    if let Some(a) = alpha_hat {
        c.set_meta("alpha_hat", a);
    }
    c
}

pub fn sigma_set_from_container(c: &TensorContainer) -> Result<SigmaSet> {
    if c.role != Role::Sigma {
        return Err(BoltError::validation(format!(
            "expected role sigma, found {}",
            c.role.as_str()
        )));
    }
    let origin = match c.metadata.get("origin") {
        Some(o) => SigmaOrigin::parse(o)?,
        None => SigmaOrigin::Trained,
    };
    let mut out = SigmaSet::new();
    for e in &c.entries {
        if let Some(layer) = e.name.strip_prefix("sigma::") {
            out.insert(layer.to_string(), SigmaVector::new(layer, e.data.clone(), origin));
        }
    }
    Ok(out)
}
