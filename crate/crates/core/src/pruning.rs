//! Compression operators applied to a [`ToyModel`]: branch drop, unstructured
//! and N:M sparsity with magnitude or Wanda scores, and symmetric uniform
//! quantization.
//!
//! Embedding, LM head, positional table and norm gains are never touched.
//! Dropping a branch zeroes its output projection so the block stays in
//! place and the pruned model remains index-aligned with the baseline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::toylm::{Capture, MatrixId, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    #[default]
    Magnitude,
    Wanda,
}

/// Comparison group for unstructured pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Each output row prunes its own fraction.
    #[default]
    PerRow,
    PerMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PruneKind {
    DropAttn(Vec<usize>),
    DropMlp(Vec<usize>),
    DropBlock(Vec<usize>),
    Unstructured {
        sparsity: f64,
        scorer: Scorer,
        granularity: Granularity,
    },
    SemiStructured {
        n: usize,
        m: usize,
        scorer: Scorer,
    },
    Quantize {
        bits: u32,
    },
}

/// A declarative compression recipe.
///
/// `targets` and `layers` restrict the matrix-level kinds (sparsity and
/// quantization); `None` means every block matrix in every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PruneSpecJson", into = "PruneSpecJson")]
pub struct PruneSpec {
    pub kind: PruneKind,
    pub targets: Option<Vec<MatrixId>>,
    pub layers: Option<Vec<usize>>,
}

impl PruneSpec {
    pub fn new(kind: PruneKind) -> Self {
        Self {
            kind,
            targets: None,
            layers: None,
        }
    }

    /// A spec that leaves the model unchanged: unstructured pruning at sparsity 0.
    ///
    /// An empty drop list is not a no-op as a sweep template, where it means every layer.
    pub fn noop() -> Self {
        Self::new(PruneKind::Unstructured {
            sparsity: 0.0,
            scorer: Scorer::Magnitude,
            granularity: Granularity::PerRow,
        })
    }

    pub fn drop_attn(indices: impl Into<Vec<usize>>) -> Self {
        Self::new(PruneKind::DropAttn(indices.into()))
    }

    pub fn drop_mlp(indices: impl Into<Vec<usize>>) -> Self {
        Self::new(PruneKind::DropMlp(indices.into()))
    }

    pub fn drop_block(indices: impl Into<Vec<usize>>) -> Self {
        Self::new(PruneKind::DropBlock(indices.into()))
    }

    /// Drops the `k` middle blocks of an `num_layers`-block model.
    pub fn drop_middle(num_layers: usize, k: usize) -> Self {
        let k = k.min(num_layers);
        let start = (num_layers - k) / 2;
        Self::drop_block((start..start + k).collect::<Vec<_>>())
    }

    pub fn with_targets(mut self, targets: Vec<MatrixId>) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn with_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    pub fn requires_calibration(&self) -> bool {
        matches!(
            self.kind,
            PruneKind::Unstructured {
                scorer: Scorer::Wanda,
                ..
            } | PruneKind::SemiStructured {
                scorer: Scorer::Wanda,
                ..
            }
        )
    }

    /// Layer indices named by a drop kind.
    pub fn drop_indices(&self) -> Option<&[usize]> {
        match &self.kind {
            PruneKind::DropAttn(i) | PruneKind::DropMlp(i) | PruneKind::DropBlock(i) => Some(i),
            _ => None,
        }
    }

    /// The same recipe confined to one layer.
    pub fn restricted_to_layer(&self, layer: usize) -> Self {
        let kind = match &self.kind {
            PruneKind::DropAttn(_) => PruneKind::DropAttn(vec![layer]),
            PruneKind::DropMlp(_) => PruneKind::DropMlp(vec![layer]),
            PruneKind::DropBlock(_) => PruneKind::DropBlock(vec![layer]),
            other => other.clone(),
        };
        Self {
            kind,
            targets: self.targets.clone(),
            layers: Some(vec![layer]),
        }
    }

    /// Which branch the recipe perturbs.
    pub fn branch(&self) -> Branch {
        match &self.kind {
            PruneKind::DropAttn(_) => Branch::Attention,
            PruneKind::DropMlp(_) => Branch::Mlp,
            PruneKind::DropBlock(_) => Branch::Block,
            _ => match &self.targets {
                Some(t) if !t.is_empty() && t.iter().all(|id| id.is_attention()) => {
                    Branch::Attention
                }
                Some(t) if !t.is_empty() && t.iter().all(|id| !id.is_attention()) => Branch::Mlp,
                _ => Branch::Block,
            },
        }
    }

    fn target_ids(&self) -> Vec<MatrixId> {
        self.targets
            .clone()
            .unwrap_or_else(|| MatrixId::ALL.to_vec())
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let check_layers = |idx: &[usize], what: &str| -> Result<()> {
            let mut seen = std::collections::BTreeSet::new();
            for &i in idx {
                if i >= num_layers {
                    return Err(Error::Index(format!(
                        "{what} index {i} >= num_layers {num_layers}"
                    )));
                }
                if !seen.insert(i) {
                    return Err(Error::Validation(format!("duplicate {what} index {i}")));
                }
            }
            Ok(())
        };
        if let Some(idx) = self.drop_indices() {
            check_layers(idx, "drop")?;
        }
        if let Some(layers) = &self.layers {
            check_layers(layers, "layer")?;
        }
        match self.kind {
            PruneKind::Unstructured { sparsity, .. } if !(0.0..=1.0).contains(&sparsity) => Err(
                Error::Validation(format!("sparsity {sparsity} outside [0, 1]")),
            ),
            PruneKind::SemiStructured { n, m, .. } if m == 0 || n > m => {
                Err(Error::Validation(format!("invalid N:M pattern {n}:{m}")))
            }
            PruneKind::Quantize { bits } if !(2..=16).contains(&bits) => Err(Error::Validation(
                format!("quantization bits {bits} outside [2, 16]"),
            )),
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PruneSpecJson::from(self)).expect("plain data")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Validation(format!("invalid prune spec JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("prune spec {}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Attention,
    Mlp,
    Block,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Attention => "attention",
            Branch::Mlp => "mlp",
            Branch::Block => "block",
        }
    }
}

/// Wire form: `{"kind", "indices", "sparsity", "n", "m", "scorer", "bits", "granularity"}`
/// plus optional `targets` and `layers`. Only fields relevant to `kind` are written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PruneSpecJson {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scorer: Option<Scorer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    granularity: Option<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    targets: Option<Vec<MatrixId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<usize>>,
}

impl From<PruneSpec> for PruneSpecJson {
    fn from(spec: PruneSpec) -> Self {
        (&spec).into()
    }
}

impl From<&PruneSpec> for PruneSpecJson {
    fn from(spec: &PruneSpec) -> Self {
        let mut out = PruneSpecJson {
            targets: spec.targets.clone(),
            layers: spec.layers.clone(),
            ..Default::default()
        };
        match &spec.kind {
            PruneKind::DropAttn(i) => {
                out.kind = "drop_attn".into();
                out.indices = Some(i.clone());
            }
            PruneKind::DropMlp(i) => {
                out.kind = "drop_mlp".into();
                out.indices = Some(i.clone());
            }
            PruneKind::DropBlock(i) => {
                out.kind = "drop_block".into();
                out.indices = Some(i.clone());
            }
            PruneKind::Unstructured {
                sparsity,
                scorer,
                granularity,
            } => {
                out.kind = "unstructured".into();
                out.sparsity = Some(*sparsity);
                out.scorer = Some(*scorer);
                out.granularity = Some(*granularity);
            }
            PruneKind::SemiStructured { n, m, scorer } => {
                out.kind = "semi_structured".into();
                out.n = Some(*n);
                out.m = Some(*m);
                out.scorer = Some(*scorer);
            }
            PruneKind::Quantize { bits } => {
                out.kind = "quantize".into();
                out.bits = Some(*bits);
            }
        }
        out
    }
}

impl TryFrom<PruneSpecJson> for PruneSpec {
    type Error = Error;

    fn try_from(raw: PruneSpecJson) -> Result<Self> {
        let need = |field: &str| {
            Error::Validation(format!("prune kind `{}` requires `{field}`", raw.kind))
        };
        let kind = match raw.kind.as_str() {
            "drop_attn" => PruneKind::DropAttn(raw.indices.clone().unwrap_or_default()),
            "drop_mlp" => PruneKind::DropMlp(raw.indices.clone().unwrap_or_default()),
            "drop_block" => PruneKind::DropBlock(raw.indices.clone().unwrap_or_default()),
            "unstructured" => PruneKind::Unstructured {
                sparsity: raw.sparsity.ok_or_else(|| need("sparsity"))?,
                scorer: raw.scorer.unwrap_or_default(),
                granularity: raw.granularity.unwrap_or_default(),
            },
            "semi_structured" => PruneKind::SemiStructured {
                n: raw.n.ok_or_else(|| need("n"))?,
                m: raw.m.ok_or_else(|| need("m"))?,
                scorer: raw.scorer.unwrap_or_default(),
            },
            "quantize" => PruneKind::Quantize {
                bits: raw.bits.ok_or_else(|| need("bits"))?,
            },
            other => {
                return Err(Error::Validation(format!("unknown prune kind `{other}`")));
            }
        };
        Ok(PruneSpec {
            kind,
            targets: raw.targets,
            layers: raw.layers,
        })
    }
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Binary keep pattern with the shape of its target matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn pruned(&self) -> usize {
        self.keep.len() - self.kept()
    }

    /// Flat indices of pruned entries.
    pub fn pruned_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.rows || m.cols() != self.cols {
            return Err(Error::Shape(format!(
                "mask {}x{} applied to {}x{} matrix",
                self.rows,
                self.cols,
                m.rows(),
                m.cols()
            )));
        }
        let data = m
            .as_slice()
            .iter()
            .zip(&self.keep)
            .map(|(w, k)| if *k { *w } else { 0.0 })
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }
}

/// Masks for every targeted matrix, keyed by `(layer, matrix)`.
pub type ModelMask = BTreeMap<(usize, MatrixId), Mask>;

/// Entries of `group` (flat indices) sorted for pruning: lowest score first, ties by lower index.
fn prune_order(scores: &[f64], group: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = group.collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Prunes the `round(s·k)` lowest-scored entries of each group of `k` entries.
pub fn unstructured_mask(scores: &Matrix, sparsity: f64, granularity: Granularity) -> Result<Mask> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Validation(format!(
            "sparsity {sparsity} outside [0, 1]"
        )));
    }
    let (rows, cols) = (scores.rows(), scores.cols());
    let s = scores.as_slice();
    let mut mask = Mask::ones(rows, cols);
    let groups: Vec<std::ops::Range<usize>> = match granularity {
        Granularity::PerRow => (0..rows).map(|r| r * cols..(r + 1) * cols).collect(),
        Granularity::PerMatrix => vec![0..rows * cols],
    };
    for g in groups {
        let count = (sparsity * g.len() as f64).round() as usize;
        for i in prune_order(s, g).into_iter().take(count) {
            mask.keep[i] = false;
        }
    }
    Ok(mask)
}

/// Keeps the `n` highest-scored entries of every aligned group of `m` along each row.
pub fn nm_mask(scores: &Matrix, n: usize, m: usize) -> Result<Mask> {
    if m == 0 || n > m {
        return Err(Error::Validation(format!("invalid N:M pattern {n}:{m}")));
    }
    let (rows, cols) = (scores.rows(), scores.cols());
    if cols % m != 0 {
        return Err(Error::Shape(format!(
            "input dimension {cols} not divisible by M = {m}"
        )));
    }
    let s = scores.as_slice();
    let mut mask = Mask::ones(rows, cols);
    for start in (0..rows * cols).step_by(m) {
        // highest first, ties by lower index; everything past n is pruned
        let mut idx: Vec<usize> = (start..start + m).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        for &i in &idx[n..] {
            mask.keep[i] = false;
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Scoring and calibration
// ---------------------------------------------------------------------------

pub fn magnitude_scores(weights: &Matrix) -> Matrix {
    let data = weights.as_slice().iter().map(|w| w.abs()).collect();
    Matrix::from_vec(weights.rows(), weights.cols(), data).expect("same shape")
}

/// `|W[i][j]| · ‖X_j‖₂`.
pub fn wanda_scores(weights: &Matrix, input_norms: &[f64]) -> Result<Matrix> {
    if input_norms.len() != weights.cols() {
        return Err(Error::Shape(format!(
            "{} input norms for a matrix with {} input features",
            input_norms.len(),
            weights.cols()
        )));
    }
    let cols = weights.cols();
    let data = weights
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, w)| w.abs() * input_norms[k % cols])
        .collect();
    Matrix::from_vec(weights.rows(), cols, data)
}

/// Per-input-feature L2 norms of each block matrix's input, over all calibration positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    norms: BTreeMap<(usize, MatrixId), Vec<f64>>,
    sample_count: usize,
}

impl CalibrationStats {
    pub fn norms(&self, layer: usize, id: MatrixId) -> Option<&[f64]> {
        self.norms.get(&(layer, id)).map(Vec::as_slice)
    }

    /// Number of token positions accumulated.
    pub fn sample_count(&self) -> usize {
        self.sample_count
    }
}

pub fn calibrate(model: &ToyModel, prompts: &[Vec<usize>]) -> Result<CalibrationStats> {
    if prompts.is_empty() {
        return Err(Error::Validation(
            "calibration needs at least one prompt".into(),
        ));
    }
    let mut sums: BTreeMap<(usize, MatrixId), Vec<f64>> = BTreeMap::new();
    for (l, b) in model.blocks.iter().enumerate() {
        for id in MatrixId::ALL {
            sums.insert((l, id), vec![0.0; b.matrix(id).cols()]);
        }
    }
    let mut sample_count = 0;
    for prompt in prompts {
        model.forward_impl(prompt, Capture::Final, 1.0, None, &mut |l, id, x| {
            let acc = sums.get_mut(&(l, id)).expect("registered");
            acc.iter_mut().zip(x).for_each(|(a, v)| *a += v * v);
        })?;
        sample_count += prompt.len();
    }
    let norms = sums
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(f64::sqrt).collect()))
        .collect();
    Ok(CalibrationStats {
        norms,
        sample_count,
    })
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Step size `max|w| / (2^(bits-1) - 1)`; zero for an all-zero matrix.
pub fn quantization_step(weights: &Matrix, bits: u32) -> f64 {
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    weights.max_abs() / levels
}

/// Symmetric per-matrix round-to-nearest quantization.
pub fn quantize_matrix(weights: &Matrix, bits: u32) -> Result<Matrix> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Validation(format!(
            "quantization bits {bits} outside [2, 16]"
        )));
    }
    let step = quantization_step(weights, bits);
    if step == 0.0 {
        return Ok(weights.clone());
    }
    let data = weights
        .as_slice()
        .iter()
        .map(|w| (w / step).round() * step)
        .collect();
    Matrix::from_vec(weights.rows(), weights.cols(), data)
}

// ---------------------------------------------------------------------------
// Application
// ---------------------------------------------------------------------------

fn scores_for(
    model: &ToyModel,
    layer: usize,
    id: MatrixId,
    scorer: Scorer,
    stats: Option<&CalibrationStats>,
) -> Result<Matrix> {
    let w = model.blocks[layer].matrix(id);
    match scorer {
        Scorer::Magnitude => Ok(magnitude_scores(w)),
        Scorer::Wanda => {
            let stats = stats.ok_or(Error::MissingCalibration)?;
            let norms = stats.norms(layer, id).ok_or_else(|| {
                Error::Validation(format!(
                    "calibration has no statistics for layer {layer} {}",
                    id.as_str()
                ))
            })?;
            wanda_scores(w, norms)
        }
    }
}

/// Masks a sparsity spec would apply, without applying them.
pub fn compute_masks(
    model: &ToyModel,
    spec: &PruneSpec,
    stats: Option<&CalibrationStats>,
) -> Result<ModelMask> {
    spec.validate(model.num_layers())?;
    if spec.requires_calibration() && stats.is_none() {
        return Err(Error::MissingCalibration);
    }
    let layers: Vec<usize> = spec
        .layers
        .clone()
        .unwrap_or_else(|| (0..model.num_layers()).collect());
    let mut masks = ModelMask::new();
    for &l in &layers {
        for id in spec.target_ids() {
            let mask = match spec.kind {
                PruneKind::Unstructured {
                    sparsity,
                    scorer,
                    granularity,
                } => unstructured_mask(
                    &scores_for(model, l, id, scorer, stats)?,
                    sparsity,
                    granularity,
                )?,
                PruneKind::SemiStructured { n, m, scorer } => {
                    nm_mask(&scores_for(model, l, id, scorer, stats)?, n, m)
                        .map_err(|e| e.context(format!("layer {l} {}", id.as_str())))?
                }
                _ => continue,
            };
            masks.insert((l, id), mask);
        }
    }
    Ok(masks)
}

/// Returns a compressed copy of `model`; the input is not modified.
pub fn apply_prune(
    model: &ToyModel,
    spec: &PruneSpec,
    stats: Option<&CalibrationStats>,
) -> Result<ToyModel> {
    spec.validate(model.num_layers())?;
    let mut out = model.clone();
    match &spec.kind {
        PruneKind::DropAttn(idx) => idx.iter().for_each(|&l| out.blocks[l].wo.fill(0.0)),
        PruneKind::DropMlp(idx) => idx.iter().for_each(|&l| out.blocks[l].w_down.fill(0.0)),
        PruneKind::DropBlock(idx) => idx.iter().for_each(|&l| {
            out.blocks[l].wo.fill(0.0);
            out.blocks[l].w_down.fill(0.0);
        }),
        PruneKind::Unstructured { .. } | PruneKind::SemiStructured { .. } => {
            for ((l, id), mask) in compute_masks(model, spec, stats)? {
                let pruned = mask.apply(out.blocks[l].matrix(id))?;
                *out.blocks[l].matrix_mut(id) = pruned;
            }
        }
        PruneKind::Quantize { bits } => {
            let layers: Vec<usize> = spec
                .layers
                .clone()
                .unwrap_or_else(|| (0..model.num_layers()).collect());
            for l in layers {
                for id in spec.target_ids() {
                    let q = quantize_matrix(out.blocks[l].matrix(id), *bits)?;
                    *out.blocks[l].matrix_mut(id) = q;
                }
            }
        }
    }
    Ok(out)
}
