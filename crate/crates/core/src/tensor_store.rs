//! Named f64 tensors, the BTC-v1 container file, task vectors and the
//! task-arithmetic merge.
//!
//! A BTC-v1 file is laid out as:
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | `0..8`       | ASCII magic `BOLTTC01`                               |
//! | `8..16`      | manifest length `L`, `u64` little-endian             |
//! | `16..16+L`   | UTF-8 JSON manifest                                  |
//! | `16+L..`     | payload: row-major little-endian `f64`, no padding   |
//!
//! Entry offsets in the manifest are relative to the start of the payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BoltError, ParseError, Result};

pub const MAGIC: &[u8; 8] = b"BOLTTC01";
pub const FORMAT_VERSION: u32 = 1;
/// Entry-name prefix of task-vector rounding residuals.
pub const RESIDUAL_PREFIX: &str = "residual::";
const HEADER_LEN: usize = 16;
const F64_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Checkpoint,
    TaskVector,
    Basis,
    Sigma,
    /// Feature matrix plus label vector, used for reproducibility fixtures.
    Dataset,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Checkpoint => "checkpoint",
            Role::TaskVector => "task_vector",
            Role::Basis => "basis",
            Role::Sigma => "sigma",
            Role::Dataset => "dataset",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Row-major.
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let entry = TensorEntry {
            name: name.into(),
            shape,
            dtype: Dtype::F64,
            data,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        TensorEntry {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            dtype: Dtype::F64,
            data,
        }
    }

    pub fn from_vector(name: impl Into<String>, v: &[f64]) -> Self {
        TensorEntry {
            name: name.into(),
            shape: vec![v.len()],
            dtype: Dtype::F64,
            data: v.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if !self.is_matrix() {
            return Err(BoltError::dimension(format!(
                "entry {:?} has shape {:?}, expected a matrix",
                self.name, self.shape
            )));
        }
        Ok(DMatrix::from_row_slice(
            self.shape[0],
            self.shape[1],
            &self.data,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(BoltError::validation(format!(
                "entry {:?} has zero-size shape {:?}",
                self.name, self.shape
            )));
        }
        if self.numel() != self.data.len() {
            return Err(BoltError::validation(format!(
                "entry {:?}: shape {:?} implies {} elements, data has {}",
                self.name,
                self.shape,
                self.numel(),
                self.data.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub format_version: u32,
    pub model_id: String,
    pub role: Role,
    pub entries: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new(model_id: impl Into<String>, role: Role) -> Self {
        TensorContainer {
            format_version: FORMAT_VERSION,
            model_id: model_id.into(),
            role,
            entries: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_entries(mut self, entries: Vec<TensorEntry>) -> Self {
        self.entries = entries;
        self
    }

    pub fn push(&mut self, entry: TensorEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| BoltError::validation(format!("missing entry {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        self.require(name)?.to_matrix()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    /// `(name, shape)` pairs in entry order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            e.validate()?;
            if !seen.insert(e.name.as_str()) {
                return Err(BoltError::validation(format!(
                    "duplicate entry name {:?}",
                    e.name
                )));
            }
        }
        Ok(())
    }

    fn manifest(&self) -> (Manifest, usize) {
        let mut offset = 0usize;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let byte_len = e.numel() * F64_BYTES;
                let m = ManifestEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: e.dtype,
                    offset: offset as u64,
                    byte_len: byte_len as u64,
                };
                offset += byte_len;
                m
            })
            .collect();
        let manifest = Manifest {
            format_version: self.format_version,
            model_id: self.model_id.clone(),
            role: self.role,
            metadata: self.metadata.clone(),
            entries,
        };
        (manifest, offset)
    }

    /// The manifest as it is written to the file header, pretty-printed.
    pub fn manifest_json(&self) -> Result<String> {
        self.validate()?;
        serde_json::to_string_pretty(&self.manifest().0)
            .map_err(|e| BoltError::validation(format!("manifest encoding: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (manifest, offset) = self.manifest();
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| BoltError::validation(format!("manifest encoding: {e}")))?;

        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ParseError::BadMagic.into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(ParseError::TruncatedHeader.into());
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let manifest_end = usize::try_from(manifest_len)
            .ok()
            .and_then(|l| l.checked_add(HEADER_LEN))
            .filter(|&end| end <= bytes.len())
            .ok_or(ParseError::TruncatedManifest)?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
            .map_err(|e| ParseError::InvalidManifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ParseError::InvalidManifest(format!(
                "unsupported format_version {}",
                manifest.format_version
            ))
            .into());
        }
        let payload = &bytes[manifest_end..];

        let mut expected_offset = 0u64;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for m in &manifest.entries {
            let numel: usize = m.shape.iter().product();
            if m.byte_len != (numel * F64_BYTES) as u64 {
                return Err(ParseError::LengthMismatch(format!(
                    "entry {:?}: byte_len {} but shape {:?} needs {}",
                    m.name,
                    m.byte_len,
                    m.shape,
                    numel * F64_BYTES
                ))
                .into());
            }
            if m.offset != expected_offset {
                return Err(ParseError::LengthMismatch(format!(
                    "entry {:?}: offset {} but previous entries end at {}",
                    m.name, m.offset, expected_offset
                ))
                .into());
            }
            let start = m.offset as usize;
            let end = start + m.byte_len as usize;
            if end > payload.len() {
                return Err(ParseError::TruncatedPayload.into());
            }
            let data = payload[start..end]
                .chunks_exact(F64_BYTES)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push(TensorEntry {
                name: m.name.clone(),
                shape: m.shape.clone(),
                dtype: m.dtype,
                data,
            });
            expected_offset += m.byte_len;
        }
        if payload.len() as u64 != expected_offset {
            return Err(ParseError::LengthMismatch(format!(
                "manifest describes {} payload bytes, file has {}",
                expected_offset,
                payload.len()
            ))
            .into());
        }

        let container = TensorContainer {
            format_version: manifest.format_version,
            model_id: manifest.model_id,
            role: manifest.role,
            entries,
            metadata: manifest.metadata,
        };
        container.validate()?;
        Ok(container)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_id: String,
    role: Role,
    metadata: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
    byte_len: u64,
}

pub fn save_container(c: &TensorContainer, path: impl AsRef<Path>) -> Result<()> {
    let bytes = c.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_container(path: impl AsRef<Path>) -> Result<TensorContainer> {
    let bytes = fs::read(path)?;
    TensorContainer::from_bytes(&bytes)
}

/// Layer-wise difference between a fine-tuned checkpoint and its base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub source_id: String,
    pub entries: Vec<TensorEntry>,
    /// Per-entry rounding error of the subtraction, so that
    /// `entries + residuals == Θ_i − Θ_0` exactly. Empty when unknown.
    pub residuals: BTreeMap<String, Vec<f64>>,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        self.get(name)
            .ok_or_else(|| {
                BoltError::validation(format!(
                    "task vector {:?} has no layer {name:?}",
                    self.source_id
                ))
            })?
            .to_matrix()
    }

    /// Names of the matrix-shaped layers, in entry order.
    pub fn matrix_layers(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.is_matrix())
            .map(|e| e.name.clone())
            .collect()
    }

    /// Residuals are stored as extra entries named `residual::<layer>`.
    pub fn to_container(&self) -> TensorContainer {
        let mut entries = self.entries.clone();
        for e in &self.entries {
            if let Some(r) = self.residuals.get(&e.name) {
                entries.push(TensorEntry {
                    name: format!("{RESIDUAL_PREFIX}{}", e.name),
                    shape: e.shape.clone(),
                    dtype: Dtype::F64,
                    data: r.clone(),
                });
            }
        }
        TensorContainer::new(self.source_id.clone(), Role::TaskVector).with_entries(entries)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        if c.role != Role::TaskVector {
            return Err(BoltError::validation(format!(
                "expected role task_vector, found {}",
                c.role.as_str()
            )));
        }
        let mut entries = Vec::new();
        let mut residuals = BTreeMap::new();
        for e in &c.entries {
            match e.name.strip_prefix(RESIDUAL_PREFIX) {
                Some(layer) => {
                    residuals.insert(layer.to_string(), e.data.clone());
                }
                None => entries.push(e.clone()),
            }
        }
        for (layer, r) in &residuals {
            match entries.iter().find(|e| &e.name == layer) {
                Some(e) if e.data.len() == r.len() => {}
                _ => {
                    return Err(BoltError::validation(format!(
                        "residual for {layer:?} does not match a layer of the task vector"
                    )))
                }
            }
        }
        Ok(TaskVector {
            source_id: c.model_id.clone(),
            entries,
            residuals,
        })
    }
}

fn check_same_architecture(a: &[TensorEntry], b: &[TensorEntry]) -> Result<()> {
    let sig_a: BTreeMap<&str, &[usize]> =
        a.iter().map(|e| (e.name.as_str(), e.shape.as_slice())).collect();
    let sig_b: BTreeMap<&str, &[usize]> =
        b.iter().map(|e| (e.name.as_str(), e.shape.as_slice())).collect();
    let names: BTreeSet<&str> = sig_a.keys().chain(sig_b.keys()).copied().collect();
    let offending: Vec<String> = names
        .into_iter()
        .filter(|n| sig_a.get(n) != sig_b.get(n))
        .map(str::to_string)
        .collect();
    if offending.is_empty() {
        Ok(())
    } else {
        Err(BoltError::Architecture(offending))
    }
}

/// Knuth's TwoSum: `a + b == s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

pub fn compute_task_vector(
    theta_i: &TensorContainer,
    theta_0: &TensorContainer,
) -> Result<TaskVector> {
    check_same_architecture(&theta_i.entries, &theta_0.entries)?;
    let mut entries = Vec::with_capacity(theta_0.entries.len());
    let mut residuals = BTreeMap::new();
    for base in &theta_0.entries {
        let tuned = theta_i.get(&base.name).expect("architecture checked");
        let (data, err): (Vec<f64>, Vec<f64>) = tuned
            .data
            .iter()
            .zip(&base.data)
            .map(|(&t, &b)| two_sum(t, -b))
            .unzip();
        entries.push(TensorEntry {
            name: base.name.clone(),
            shape: base.shape.clone(),
            dtype: Dtype::F64,
            data,
        });
        residuals.insert(base.name.clone(), err);
    }
    Ok(TaskVector {
        source_id: theta_i.model_id.clone(),
        entries,
        residuals,
    })
}

/// `Θ_0 + Σ α_i Δ_i`, accumulated left to right with deltas ordered by `source_id`.
///
/// The sum is carried in two words and rounded once at the end, using each
/// task vector's residuals, so a single task vector merged with `α = 1`
/// gives back its fine-tuned checkpoint bit for bit.
pub fn apply_task_arithmetic(
    theta_0: &TensorContainer,
    deltas: &[TaskVector],
    alphas: &[f64],
) -> Result<TensorContainer> {
    if deltas.is_empty() {
        return Err(BoltError::validation("at least one task vector is required"));
    }
    if deltas.len() != alphas.len() {
        return Err(BoltError::validation(format!(
            "{} task vectors but {} blending coefficients",
            deltas.len(),
            alphas.len()
        )));
    }
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(BoltError::validation(format!("blending coefficient {a} is not finite")));
    }
    for d in deltas {
        check_same_architecture(&d.entries, &theta_0.entries)?;
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].source_id.cmp(&deltas[b].source_id));

    let mut merged = theta_0.clone();
    merged.role = Role::Checkpoint;
    merged.model_id = format!("{}+merge", theta_0.model_id);
    for entry in &mut merged.entries {
        // Double-word accumulation: `hi + lo` tracks the sum with the rounding
        // error of every step carried in `lo`.
        let mut lo = vec![0.0; entry.data.len()];
        for &i in &order {
            let delta = deltas[i].get(&entry.name).expect("architecture checked");
            let residual = deltas[i].residuals.get(&entry.name);
            let alpha = alphas[i];
            for (k, (w, d)) in entry.data.iter_mut().zip(&delta.data).enumerate() {
                let p = alpha * d;
                let p_err = alpha.mul_add(*d, -p);
                if p != 0.0 {
                    let (s, e) = two_sum(*w, p);
                    *w = s;
                    lo[k] += e;
                }
                lo[k] += p_err + residual.map_or(0.0, |r| alpha * r[k]);
            }
        }
        for (w, l) in entry.data.iter_mut().zip(&lo) {
            if *l != 0.0 {
                *w += l;
            }
        }
        if entry.data.iter().any(|w| !w.is_finite()) {
            return Err(BoltError::numeric(format!("merged layer {:?} is not finite", entry.name)));
        }
    }
    merged.set_meta(
        "merged_sources",
        order
            .iter()
            .map(|&i| deltas[i].source_id.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );
    Ok(merged)
}
