//! External trace format: a JSON manifest plus a JSON-Lines record file.
//!
//! ```json
//! {"dims": {"embedding": 32, "logit": 64}, "temperature_default": 1.0, "records": "records.jsonl"}
//! ```
//!
//! Each record line is
//! `{"step": 0, "layer": "final", "space": "logit", "variant": "baseline", "values": [...]}`.
//! Probabilities are never stored; they are recomputed from logits.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::propagation::StepwiseRun;
use crate::toylm::SpaceSnapshot;
use crate::vecmath::RealVector;

/// Layer index, or the final (post-norm) output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerTag {
    Index(u64),
    Final,
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerTag::Index(i) => write!(f, "{i}"),
            LayerTag::Final => f.write_str("final"),
        }
    }
}

impl Serialize for LayerTag {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerTag::Index(i) => s.serialize_u64(*i),
            LayerTag::Final => s.serialize_str("final"),
        }
    }
}

impl<'de> Deserialize<'de> for LayerTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(i) => Ok(LayerTag::Index(i)),
            Raw::Str(s) if s == "final" => Ok(LayerTag::Final),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "layer must be an integer or \"final\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSpace {
    Embedding,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: u64,
    pub layer: LayerTag,
    pub space: TraceSpace,
    pub variant: Variant,
    pub values: RealVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDims {
    pub embedding: usize,
    pub logit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub dims: TraceDims,
    pub temperature_default: f64,
    /// Record file, relative to the manifest's directory unless absolute.
    pub records: PathBuf,
}

/// Both variants of one `(step, layer, space)` measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGroup {
    pub step: u64,
    pub layer: LayerTag,
    pub space: TraceSpace,
    pub baseline: RealVector,
    pub pruned: RealVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceData {
    pub manifest: TraceManifest,
    /// Complete groups, ordered by `(step, layer, space)`.
    pub groups: Vec<TraceGroup>,
    pub warnings: Vec<String>,
}

fn json_error(path: &Path, line: usize, e: &serde_json::Error) -> Error {
    let message = e.to_string();
    match e.classify() {
        serde_json::error::Category::Data => Error::Schema {
            path: path.to_path_buf(),
            line,
            message,
        },
        _ => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
    }
}

pub fn read_manifest(path: &Path) -> Result<TraceManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: TraceManifest =
        serde_json::from_str(&text).map_err(|e| json_error(path, e.line(), &e))?;
    if manifest.dims.embedding == 0 || manifest.dims.logit == 0 {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: "dims must be positive".into(),
        });
    }
    if !(manifest.temperature_default > 0.0 && manifest.temperature_default.is_finite()) {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "temperature_default must be positive, got {}",
                manifest.temperature_default
            ),
        });
    }
    Ok(manifest)
}

fn records_path(manifest_path: &Path, records: &Path) -> PathBuf {
    if records.is_absolute() {
        records.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(records)
    }
}

type GroupKey = (u64, LayerTag, TraceSpace);

/// Reads a manifest and its records, pairing baseline and pruned variants.
pub fn ingest_trace(manifest_path: &Path) -> Result<TraceData> {
    let manifest = read_manifest(manifest_path)?;
    let path = records_path(manifest_path, &manifest.records);
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;

    let mut slots: BTreeMap<GroupKey, [Option<RealVector>; 2]> = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut seen = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| json_error(&path, n, &e))?;
        let expected = match rec.space {
            TraceSpace::Embedding => manifest.dims.embedding,
            TraceSpace::Logit => manifest.dims.logit,
        };
        if rec.values.dim() != expected {
            return Err(Error::Schema {
                path: path.clone(),
                line: n,
                message: format!(
                    "{} record has {} values, manifest declares {expected}",
                    if rec.space == TraceSpace::Embedding {
                        "embedding"
                    } else {
                        "logit"
                    },
                    rec.values.dim()
                ),
            });
        }
        let slot =
            &mut slots.entry((rec.step, rec.layer, rec.space)).or_default()[rec.variant as usize];
        if slot.is_some() {
            return Err(Error::Schema {
                path: path.clone(),
                line: n,
                message: format!(
                    "duplicate record for step {} layer {} {:?} {:?}",
                    rec.step, rec.layer, rec.space, rec.variant
                ),
            });
        }
        *slot = Some(rec.values);
    }
    if seen == 0 {
        warnings.push(format!("{}: record file is empty", path.display()));
    }

    let mut groups = Vec::with_capacity(slots.len());
    for ((step, layer, space), [baseline, pruned]) in slots {
        match (baseline, pruned) {
            (Some(baseline), Some(pruned)) => groups.push(TraceGroup {
                step,
                layer,
                space,
                baseline,
                pruned,
            }),
            (b, _) => warnings.push(format!(
                "step {step} layer {layer} {space:?}: missing {} variant, skipped",
                if b.is_none() { "baseline" } else { "pruned" }
            )),
        }
    }
    Ok(TraceData {
        manifest,
        groups,
        warnings,
    })
}

fn write_record(w: &mut impl Write, rec: &TraceRecord) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")
}

fn snapshot_records(step: u64, variant: Variant, snap: &SpaceSnapshot) -> [TraceRecord; 2] {
    [
        TraceRecord {
            step,
            layer: LayerTag::Final,
            space: TraceSpace::Embedding,
            variant,
            values: snap.hidden.clone(),
        },
        TraceRecord {
            step,
            layer: LayerTag::Final,
            space: TraceSpace::Logit,
            variant,
            values: snap.logits.scores().clone(),
        },
    ]
}

/// Writes the final outputs of a step-wise run as a trace: `manifest_path`
/// plus `records` next to it.
pub fn export_stepwise_trace(
    run: &StepwiseRun,
    temperature: f64,
    manifest_path: &Path,
    records: &str,
) -> Result<()> {
    let first = run
        .baseline
        .trace
        .first()
        .ok_or_else(|| Error::Validation("cannot export an empty run".into()))?;
    let manifest = TraceManifest {
        dims: TraceDims {
            embedding: first.hidden.dim(),
            logit: first.logits.vocab_size(),
        },
        temperature_default: temperature,
        records: PathBuf::from(records),
    };
    let rec_path = records_path(manifest_path, &manifest.records);
    let file = std::fs::File::create(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (t, (a, b)) in run.baseline.trace.iter().zip(&run.pruned.trace).enumerate() {
        for rec in snapshot_records(t as u64, Variant::Baseline, a)
            .iter()
            .chain(&snapshot_records(t as u64, Variant::Pruned, b))
        {
            write_record(&mut w, rec).map_err(|e| Error::io(&rec_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&rec_path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("plain data");
    std::fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
}
