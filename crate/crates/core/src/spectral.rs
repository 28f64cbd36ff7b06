//! Thin SVD, cross-task direction stacking and orthogonalization into shared
//! per-layer bases.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slow for large
//! matrices but accurate to working precision and fully deterministic, which is
//! what the bit-reproducibility guarantees downstream rely on.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{BoltError, Result};
use crate::tensor_store::{Role, TaskVector, TensorContainer, TensorEntry};

/// Relative threshold below which a stack singular value is counted as zero.
pub const EFFECTIVE_RANK_RTOL: f64 = 1e-10;

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct ThinSvd {
    /// m×k, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Nonincreasing, length k.
    pub sigma: Vec<f64>,
    /// n×k, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Thin SVD of `m`, optionally truncated to the top `k` triplets.
///
/// Each column pair `(u_j, v_j)` is sign-normalized so that the entry of
/// `u_j` with the largest magnitude (first one on ties) is positive. Equal
/// singular values keep the order in which the iteration produced them.
pub fn thin_svd(m: &DMatrix<f64>, k: Option<usize>) -> Result<ThinSvd> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Err(BoltError::validation("thin_svd of an empty matrix"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(BoltError::numeric("thin_svd input has non-finite entries"));
    }
    let full = rows.min(cols);
    let k = match k {
        Some(0) => return Err(BoltError::validation("truncation rank must be positive")),
        Some(k) if k > full => {
            return Err(BoltError::validation(format!(
                "truncation rank {k} exceeds min(rows, cols) = {full}"
            )))
        }
        Some(k) => k,
        None => full,
    };

    let (mut u, sigma, mut v) = if rows >= cols {
        jacobi_tall(m.clone())
    } else {
        let (u_t, s, v_t) = jacobi_tall(m.transpose());
        (v_t, s, u_t)
    };

    let mut order: Vec<usize> = (0..full).collect();
    // Stable sort keeps index order among ties.
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let order = &order[..k];

    let sigma: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    u = DMatrix::from_fn(u.nrows(), k, |i, j| u[(i, order[j])]);
    v = DMatrix::from_fn(v.nrows(), k, |i, j| v[(i, order[j])]);

    for j in 0..k {
        if leading_sign(u.column(j).iter()) < 0.0 {
            u.column_mut(j).neg_mut();
            v.column_mut(j).neg_mut();
        }
    }
    Ok(ThinSvd { u, sigma, v })
}

/// Sign of the largest-magnitude entry (first on ties); `1.0` for a zero vector.
fn leading_sign<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    let mut best = 0.0f64;
    for &x in xs {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Returns unsorted
/// `(U, sigma, V)` with `A = U diag(sigma) V^T`.
fn jacobi_tall(mut a: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (rows, n) = a.shape();
    let mut v = DMatrix::<f64>::identity(n, n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    let (ap, aq) = (a[(i, p)], a[(i, q)]);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let mut u = a;
    let mut needs_completion = Vec::new();
    for (j, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            u.column_mut(j).unscale_mut(s);
        } else {
            needs_completion.push(j);
        }
    }
    // Columns of tiny singular values carry little signal; polish them
    // against the well-determined ones so U stays orthonormal.
    for (j, &s) in sigma.iter().enumerate() {
        if !needs_completion.contains(&j) && s < 1e-8 * sigma_max && !reorthogonalize(&mut u, j, &needs_completion) {
            needs_completion.push(j);
        }
    }
    complete_columns(&mut u, &needs_completion);
    (u, sigma, v)
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (xp, xq) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * xp - s * xq;
        m[(i, q)] = s * xp + c * xq;
    }
}

/// Gram-Schmidt column `j` against every other column not in `skip`.
fn reorthogonalize(u: &mut DMatrix<f64>, j: usize, skip: &[usize]) -> bool {
    for _ in 0..2 {
        for other in 0..u.ncols() {
            if other == j || skip.contains(&other) {
                continue;
            }
            let dot = u.column(other).dot(&u.column(j));
            let col = u.column(other).clone_owned();
            u.column_mut(j).axpy(-dot, &col, 1.0);
        }
        let norm = u.column(j).norm();
        if norm < 1e-3 {
            return false;
        }
        u.column_mut(j).unscale_mut(norm);
    }
    true
}

/// Replace the listed columns with unit vectors orthogonal to all others,
/// drawn deterministically from the standard basis.
fn complete_columns(u: &mut DMatrix<f64>, cols: &[usize]) {
    if cols.is_empty() {
        return;
    }
    let rows = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|c| !cols.contains(c)).collect();
    let mut candidate = 0usize;
    for &j in cols {
        loop {
            assert!(candidate < rows, "cannot complete orthonormal columns");
            let mut e = nalgebra::DVector::<f64>::zeros(rows);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let dot = u.column(f).dot(&e);
                    e.axpy(-dot, &u.column(f).clone_owned(), 1.0);
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                u.set_column(j, &(e / norm));
                filled.push(j);
                break;
            }
        }
    }
}

/// Nearest matrix with orthonormal columns, `Ψ Φᵀ` from `m = Ψ Σ Φᵀ`.
/// Requires `rows >= cols`.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() < m.ncols() {
        return Err(BoltError::dimension(format!(
            "polar factor with orthonormal columns needs rows >= cols, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let svd = thin_svd(m, None)?;
    Ok(&svd.u * svd.v.transpose())
}

/// Top directions of several sources concatenated column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedDirections {
    pub u_stack: DMatrix<f64>,
    pub v_stack: DMatrix<f64>,
    pub r: usize,
    pub provenance: Vec<(String, usize)>,
}

pub fn stack_directions(svds: &[(String, ThinSvd)], per_task_k: usize) -> Result<StackedDirections> {
    let Some((_, first)) = svds.first() else {
        return Err(BoltError::validation("no sources to stack"));
    };
    if per_task_k == 0 {
        return Err(BoltError::validation("per_task_k must be positive"));
    }
    let (m, n) = (first.u.nrows(), first.v.nrows());
    for (id, svd) in svds {
        if svd.u.nrows() != m || svd.v.nrows() != n {
            return Err(BoltError::dimension(format!(
                "source {id:?} has {}x{} factors, expected {m}x{n}",
                svd.u.nrows(),
                svd.v.nrows()
            )));
        }
        if svd.rank() < per_task_k {
            return Err(BoltError::validation(format!(
                "source {id:?} has only {} directions, per_task_k = {per_task_k}",
                svd.rank()
            )));
        }
    }
    let r = svds.len() * per_task_k;
    let mut u_stack = DMatrix::zeros(m, r);
    let mut v_stack = DMatrix::zeros(n, r);
    let mut provenance = Vec::with_capacity(r);
    for (t, (id, svd)) in svds.iter().enumerate() {
        for j in 0..per_task_k {
            let col = t * per_task_k + j;
            u_stack.set_column(col, &svd.u.column(j));
            v_stack.set_column(col, &svd.v.column(j));
            provenance.push((id.clone(), j));
        }
    }
    Ok(StackedDirections {
        u_stack,
        v_stack,
        r,
        provenance,
    })
}

/// Fixed per-layer coordinates `(U_orth, V_orth)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub layer_name: String,
    pub u_orth: DMatrix<f64>,
    pub v_orth: DMatrix<f64>,
    pub r: usize,
    pub effective_rank_u: usize,
    pub effective_rank_v: usize,
}

impl SpectralBasis {
    pub fn new(layer_name: impl Into<String>, u_orth: DMatrix<f64>, v_orth: DMatrix<f64>) -> Result<Self> {
        if u_orth.ncols() != v_orth.ncols() {
            return Err(BoltError::dimension(format!(
                "U has {} columns, V has {}",
                u_orth.ncols(),
                v_orth.ncols()
            )));
        }
        let r = u_orth.ncols();
        Ok(SpectralBasis {
            layer_name: layer_name.into(),
            u_orth,
            v_orth,
            r,
            effective_rank_u: r,
            effective_rank_v: r,
        })
    }

    /// `(rows, cols)` of the layer matrices this basis acts on.
    pub fn layer_shape(&self) -> (usize, usize) {
        (self.u_orth.nrows(), self.v_orth.nrows())
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.effective_rank_u < self.r || self.effective_rank_v < self.r
    }
}

fn effective_rank(sigma: &[f64]) -> usize {
    let max = sigma.first().copied().unwrap_or(0.0);
    sigma.iter().filter(|&&s| s > EFFECTIVE_RANK_RTOL * max).count()
}

/// Orthogonalize stacked directions with the SVD polar factor.
///
/// With `rank_cap < r` each stack is instead replaced by its top `rank_cap`
/// left singular vectors. `eps` is the ridge of the equivalent whitening
/// `X (XᵀX + εI)^{-1/2}`; the polar factor is its `ε → 0` limit, so it is only
/// carried as provenance here.
pub fn orthogonalize(stack: &StackedDirections, eps: f64, rank_cap: Option<usize>) -> Result<SpectralBasis> {
    orthogonalize_layer("", stack, eps, rank_cap)
}

pub fn orthogonalize_layer(
    layer_name: &str,
    stack: &StackedDirections,
    eps: f64,
    rank_cap: Option<usize>,
) -> Result<SpectralBasis> {
    if eps.is_nan() || eps < 0.0 {
        return Err(BoltError::validation(format!("eps must be >= 0, got {eps}")));
    }
    if stack.u_stack.iter().all(|&x| x == 0.0) || stack.v_stack.iter().all(|&x| x == 0.0) {
        return Err(BoltError::Degenerate(format!(
            "all-zero direction stack for layer {layer_name:?}"
        )));
    }
    let r = stack.u_stack.ncols();
    let svd_u = thin_svd(&stack.u_stack, None)?;
    let svd_v = thin_svd(&stack.v_stack, None)?;
    let effective_rank_u = effective_rank(&svd_u.sigma);
    let effective_rank_v = effective_rank(&svd_v.sigma);

    let (mut u_orth, mut v_orth) = match rank_cap {
        Some(0) => return Err(BoltError::validation("rank_cap must be positive")),
        Some(cap) if cap < r => {
            if cap > svd_u.rank() || cap > svd_v.rank() {
                return Err(BoltError::validation(format!(
                    "rank_cap {cap} exceeds the layer dimensions of {layer_name:?}"
                )));
            }
            (
                svd_u.u.columns(0, cap).clone_owned(),
                svd_v.u.columns(0, cap).clone_owned(),
            )
        }
        _ => {
            if r > stack.u_stack.nrows() || r > stack.v_stack.nrows() {
                return Err(BoltError::validation(format!(
                    "layer {layer_name:?}: {r} stacked directions exceed the layer dimensions {}x{}; set rank_cap",
                    stack.u_stack.nrows(),
                    stack.v_stack.nrows()
                )));
            }
            (&svd_u.u * svd_u.v.transpose(), &svd_v.u * svd_v.v.transpose())
        }
    };

    for j in 0..u_orth.ncols() {
        if leading_sign(u_orth.column(j).iter()) < 0.0 {
            u_orth.column_mut(j).neg_mut();
            v_orth.column_mut(j).neg_mut();
        }
    }
    let r = u_orth.ncols();
    Ok(SpectralBasis {
        layer_name: layer_name.to_string(),
        u_orth,
        v_orth,
        r,
        effective_rank_u: effective_rank_u.min(r),
        effective_rank_v: effective_rank_v.min(r),
    })
}

/// Per-layer bases keyed by layer name.
pub type BasisSet = BTreeMap<String, SpectralBasis>;

#[derive(Debug, Clone, PartialEq)]
pub struct BasisConfig {
    pub per_task_k: usize,
    pub eps: f64,
    pub rank_cap: Option<usize>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            per_task_k: 1,
            eps: 1e-8,
            rank_cap: None,
        }
    }
}

/// Build one basis per matrix-shaped layer from a set of task vectors.
///
/// Sources are used in the order given.
pub fn build_bases(task_vectors: &[TaskVector], config: &BasisConfig) -> Result<BasisSet> {
    let Some(first) = task_vectors.first() else {
        return Err(BoltError::validation("no task vectors to build a basis from"));
    };
    let mut bases = BasisSet::new();
    for layer in first.matrix_layers() {
        let mut svds = Vec::with_capacity(task_vectors.len());
        for tv in task_vectors {
            let m = tv.matrix(&layer)?;
            svds.push((tv.source_id.clone(), thin_svd(&m, Some(config.per_task_k.min(m.nrows().min(m.ncols()))))?));
        }
        let stack = stack_directions(&svds, config.per_task_k.min(svds[0].1.rank()))?;
        let basis = orthogonalize_layer(&layer, &stack, config.eps, config.rank_cap)?;
        bases.insert(layer, basis);
    }
    Ok(bases)
}

/// Haar-like random orthonormal basis of rank `r` with the same layer shapes,
/// used as a control against task-informed bases.
pub fn random_bases<R: Rng>(like: &BasisSet, rng: &mut R) -> Result<BasisSet> {
    let mut out = BasisSet::new();
    for (name, b) in like {
        let (m, n) = b.layer_shape();
        let gu = DMatrix::from_fn(m, b.r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gv = DMatrix::from_fn(n, b.r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let basis = SpectralBasis::new(name.clone(), polar_factor(&gu)?, polar_factor(&gv)?)?;
        out.insert(name.clone(), basis);
    }
    Ok(out)
}

pub fn basis_set_to_container(
    bases: &BasisSet,
    config: &BasisConfig,
    sources: &[String],
) -> TensorContainer {
    let mut c = TensorContainer::new("basis", Role::Basis);
    for (name, b) in bases {
        c.push(TensorEntry::from_matrix(format!("U_orth::{name}"), &b.u_orth));
        c.push(TensorEntry::from_matrix(format!("V_orth::{name}"), &b.v_orth));
        c.set_meta(format!("effective_rank_u::{name}"), b.effective_rank_u);
        c.set_meta(format!("effective_rank_v::{name}"), b.effective_rank_v);
    }
    let ranks: BTreeMap<&str, usize> = bases.iter().map(|(n, b)| (n.as_str(), b.r)).collect();
    c.set_meta("r", serde_json::to_string(&ranks).expect("map of ints"));
    c.set_meta("eps", config.eps);
    c.set_meta("per_task_k", config.per_task_k);
    if let Some(cap) = config.rank_cap {
        c.set_meta("rank_cap", cap);
    }
    c.set_meta("sources", sources.join(","));
    c
}

pub fn basis_set_from_container(c: &TensorContainer) -> Result<BasisSet> {
    if c.role != Role::Basis {
        return Err(BoltError::validation(format!(
            "expected role basis, found {}",
            c.role.as_str()
        )));
    }
    let mut bases = BasisSet::new();
    for e in &c.entries {
        let Some(layer) = e.name.strip_prefix("U_orth::") else {
            continue;
        };
        let u = e.to_matrix()?;
        let v = c.matrix(&format!("V_orth::{layer}"))?;
        let mut b = SpectralBasis::new(layer, u, v)?;
        let meta_usize = |key: String| c.metadata.get(&key).and_then(|s| s.parse::<usize>().ok());
        b.effective_rank_u = meta_usize(format!("effective_rank_u::{layer}")).unwrap_or(b.r);
        b.effective_rank_v = meta_usize(format!("effective_rank_v::{layer}")).unwrap_or(b.r);
        bases.insert(layer.to_string(), b);
    }
    if bases.is_empty() {
        return Err(BoltError::validation("basis container has no U_orth entries"));
    }
    Ok(bases)
}
