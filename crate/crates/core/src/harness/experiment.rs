use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{Metadata, Report, ReportRow};
use super::trace::{ingest_trace, TraceSpace};
use crate::distributions::validate_temperature;
use crate::error::{Error, Result};
use crate::estimators::{
    convergence_probe, ConvergenceOrder, DeviationEstimate, Metric, ProbeConfig, ProbeDirection,
    ProbeSpace, Space,
};
use crate::propagation::{
    compare_linear, compare_logits, context_split_deviation, layer_intervention_sweep,
    stepwise_run, InterventionResult, StepwiseRun,
};
use crate::pruning::{apply_prune, calibrate, CalibrationStats, PruneSpec};
use crate::toylm::{Decode, ToyConfig, ToyModel};
use crate::vecmath::RealVector;

pub const DEFAULT_PROMPT_COUNT: usize = 4;
pub const DEFAULT_PROMPT_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ExperimentSpec {
    Estimate(EstimateSpec),
    Intervene(InterveneSpec),
    Stepwise(StepwiseSpec),
    AnalyzeTrace(AnalyzeTraceSpec),
}

/// Logits and a perturbation to evaluate directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitPair {
    pub logits: Vec<f64>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSpec {
    pub seed: u64,
    pub vocab: usize,
    pub trials: usize,
    pub epsilons: Vec<f64>,
    pub temperatures: Vec<f64>,
    #[serde(default)]
    pub direction: ProbeDirection,
    #[serde(default)]
    pub pairs: Vec<LogitPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptSource {
    Explicit {
        prompts: Vec<Vec<usize>>,
    },
    /// `count` prompts of `length` tokens drawn uniformly from the vocabulary.
    Seeded {
        seed: u64,
        count: usize,
        length: usize,
    },
}

impl PromptSource {
    pub fn seeded(seed: u64) -> Self {
        PromptSource::Seeded {
            seed,
            count: DEFAULT_PROMPT_COUNT,
            length: DEFAULT_PROMPT_LEN,
        }
    }

    pub fn resolve(&self, vocab: usize) -> Vec<Vec<usize>> {
        match self {
            PromptSource::Explicit { prompts } => prompts.clone(),
            PromptSource::Seeded {
                seed,
                count,
                length,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..*count)
                    .map(|_| (0..*length).map(|_| rng.random_range(0..vocab)).collect())
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneSpec {
    pub model: ToyConfig,
    pub prune: PruneSpec,
    pub prompts: PromptSource,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseSpec {
    pub model: ToyConfig,
    pub prune: PruneSpec,
    pub prompt: Vec<usize>,
    pub steps: usize,
    pub decode: Decode,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeTraceSpec {
    pub manifest: PathBuf,
    /// Empty means the manifest's default temperature.
    #[serde(default)]
    pub temperatures: Vec<f64>,
}

fn check_temps(temps: &[f64]) -> Result<()> {
    temps.iter().try_for_each(|&t| validate_temperature(t))
}

impl ExperimentSpec {
    pub fn mode(&self) -> &'static str {
        match self {
            ExperimentSpec::Estimate(_) => "estimate",
            ExperimentSpec::Intervene(_) => "intervene",
            ExperimentSpec::Stepwise(_) => "stepwise",
            ExperimentSpec::AnalyzeTrace(_) => "analyze-trace",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentSpec::Estimate(s) => {
                if s.temperatures.is_empty() {
                    return Err(Error::Validation(
                        "at least one temperature is required".into(),
                    ));
                }
                check_temps(&s.temperatures)?;
                for (i, p) in s.pairs.iter().enumerate() {
                    if p.logits.len() != p.delta.len() {
                        return Err(Error::Shape(format!(
                            "pair {i}: {} logits but {} deltas",
                            p.logits.len(),
                            p.delta.len()
                        )));
                    }
                }
                Ok(())
            }
            ExperimentSpec::Intervene(s) => {
                s.model.validate()?;
                check_temps(&[s.temperature])
            }
            ExperimentSpec::Stepwise(s) => {
                s.model.validate()?;
                if let Decode::Sample { temperature, .. } = s.decode {
                    check_temps(&[temperature])?;
                }
                check_temps(&[s.temperature])
            }
            ExperimentSpec::AnalyzeTrace(s) => check_temps(&s.temperatures),
        }
    }
}

/// Runs an experiment. Output depends only on the spec, not on thread count.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    let context = format!("{} experiment", spec.mode());
    run_inner(spec).map_err(|e| e.context(context))
}

fn run_inner(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let mut meta = Metadata::new(spec.clone());
    let rows = match spec {
        ExperimentSpec::Estimate(s) => run_estimate(s, &mut meta)?,
        ExperimentSpec::Intervene(s) => run_intervene(s, &mut meta)?,
        ExperimentSpec::Stepwise(s) => {
            let (rows, _) = run_stepwise(s, &mut meta)?;
            rows
        }
        ExperimentSpec::AnalyzeTrace(s) => run_analyze(s, &mut meta)?,
    };
    Report::new(meta, rows)
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct OrderEntry {
    space: &'static str,
    temperature: Option<f64>,
    /// `"exact"` when every error is at round-off level.
    order: serde_json::Value,
}

fn run_estimate(s: &EstimateSpec, meta: &mut Metadata) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut orders = Vec::new();
    let mut jobs: Vec<(ProbeSpace, Option<f64>)> = vec![(ProbeSpace::Linear, None)];
    for &t in &s.temperatures {
        jobs.push((ProbeSpace::Probability, Some(t)));
        jobs.push((ProbeSpace::Kl, Some(t)));
    }
    for (space, t) in jobs {
        let mut cfg = ProbeConfig::new(s.seed, space, s.epsilons.clone(), s.trials, s.vocab);
        cfg.temperature = t.unwrap_or(1.0);
        cfg.direction = s.direction;
        let rep = convergence_probe(&cfg)?;
        orders.push(OrderEntry {
            space: space.as_str(),
            temperature: t,
            order: match rep.order {
                ConvergenceOrder::Exact => serde_json::Value::from("exact"),
                ConvergenceOrder::Fitted(o) => serde_json::Value::from(o),
            },
        });
        let (rs, metric) = match space {
            ProbeSpace::Linear => (Space::Logit, Metric::AngularDeviation),
            ProbeSpace::Probability => (Space::Probability, Metric::AngularDeviation),
            ProbeSpace::Kl => (Space::Probability, Metric::Kl),
        };
        for (i, p) in rep.points.iter().enumerate() {
            rows.push(ReportRow {
                temperature: t,
                param: Some(p.epsilon),
                abs_error: p.mean_abs_error,
                exact_min: p.min_exact,
                exact_max: p.max_exact,
                ..ReportRow::single(
                    i as u64,
                    space.as_str(),
                    rs,
                    metric,
                    p.mean_exact,
                    p.mean_estimated,
                )
            });
        }
    }
    for (i, pair) in s.pairs.iter().enumerate() {
        let z = RealVector::new(pair.logits.clone())
            .map_err(|e| e.context(format!("pair {i} logits")))?;
        let dz = RealVector::new(pair.delta.clone())
            .map_err(|e| e.context(format!("pair {i} delta")))?;
        let z2 = z.add(&dz)?;
        rows.extend(linear_row(i as u64, "pair", &z, &z2, Space::Logit)?);
        for &t in &s.temperatures {
            rows.extend(probability_rows(i as u64, "pair", &z, &z2, t)?);
        }
    }
    meta.insert("seed", s.seed);
    meta.insert("convergence_orders", orders);
    Ok(rows)
}

fn estimate_row(index: u64, group: &str, e: &DeviationEstimate) -> ReportRow {
    ReportRow::single(index, group, e.space, e.metric, e.exact, e.estimated)
}

fn linear_row(
    index: u64,
    group: &str,
    a: &RealVector,
    b: &RealVector,
    space: Space,
) -> Result<Option<ReportRow>> {
    let (e, rel) = compare_linear(a, b, space)?;
    Ok(Some(ReportRow {
        rel_orth: Some(rel),
        ..estimate_row(index, group, &e)
    }))
}

/// Probability-space angular deviation and KL rows at temperature `t`.
fn probability_rows(
    index: u64,
    group: &str,
    z: &RealVector,
    z2: &RealVector,
    t: f64,
) -> Result<[ReportRow; 2]> {
    let pc = compare_logits(z, z2, t)?;
    Ok(
        [(pc.probability, pc.var_r), (pc.kl, pc.var_p)].map(|(e, var)| ReportRow {
            temperature: Some(t),
            variance: Some(var),
            ..estimate_row(index, group, &e)
        }),
    )
}

// ---------------------------------------------------------------------------

fn calibration_for(
    model: &ToyModel,
    prune: &PruneSpec,
    prompts: &[Vec<usize>],
) -> Result<Option<CalibrationStats>> {
    if !prune.requires_calibration() {
        return Ok(None);
    }
    calibrate(model, prompts).map(Some)
}

fn intervention_rows(results: &[InterventionResult], temperature: f64) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for r in results {
        for (space, metric, s) in r.summaries() {
            rows.push(ReportRow {
                index: r.layer as u64,
                group: r.branch.as_str().to_string(),
                space,
                metric,
                temperature: (space == Space::Probability).then_some(temperature),
                param: None,
                exact: s.exact.mean,
                estimated: s.estimated,
                abs_error: s.abs_error,
                exact_min: s.exact.min,
                exact_max: s.exact.max,
                rel_orth: s.rel_orth,
                variance: s.variance,
                tag: String::new(),
            });
        }
    }
    rows
}

fn run_intervene(s: &InterveneSpec, meta: &mut Metadata) -> Result<Vec<ReportRow>> {
    let model = ToyModel::init(s.model)?;
    let prompts = s.prompts.resolve(s.model.vocab_size);
    let stats = calibration_for(&model, &s.prune, &prompts)?;
    let results =
        layer_intervention_sweep(&model, &s.prune, &prompts, s.temperature, stats.as_ref())?;
    meta.insert("model_seed", s.model.seed);
    meta.insert("prompts", &prompts);
    meta.insert(
        "aggregation",
        "mean/min/max over (prompt, position) at the final output",
    );
    meta.insert(
        "samples_per_layer",
        results.first().map_or(0, |r| r.samples),
    );
    if stats.is_some() {
        meta.insert("calibration", "resolved prompts");
    }
    Ok(intervention_rows(&results, s.temperature))
}

/// Runs a step-wise experiment, returning the report together with both decodes
/// (for trace export).
pub fn run_stepwise_experiment(spec: &StepwiseSpec) -> Result<(Report, StepwiseRun)> {
    let full = ExperimentSpec::Stepwise(spec.clone());
    full.validate()?;
    let mut meta = Metadata::new(full);
    let (rows, run) =
        run_stepwise(spec, &mut meta).map_err(|e| e.context("stepwise experiment"))?;
    Ok((Report::new(meta, rows)?, run))
}

fn run_stepwise(s: &StepwiseSpec, meta: &mut Metadata) -> Result<(Vec<ReportRow>, StepwiseRun)> {
    let model = ToyModel::init(s.model)?;
    let prompts = [s.prompt.clone()];
    let stats = calibration_for(&model, &s.prune, &prompts)?;
    let pruned = apply_prune(&model, &s.prune, stats.as_ref())?;
    let run = stepwise_run(&model, &pruned, &s.prompt, s.steps, s.decode, s.temperature)?;
    let split = context_split_deviation(&run.steps, s.prompt.len());

    let mut rows = Vec::new();
    for (d, c) in run.steps.iter().zip(&split) {
        let idx = d.step as u64;
        let tag = c.regime.as_str();
        let dev = &d.deviation;
        rows.push(ReportRow {
            rel_orth: Some(dev.rel_orth_hidden),
            tag: tag.into(),
            ..estimate_row(idx, "final", &dev.embedding)
        });
        rows.push(ReportRow {
            rel_orth: Some(dev.rel_orth_logits),
            tag: tag.into(),
            ..estimate_row(idx, "final", &dev.logit)
        });
        for (e, var) in [(dev.probability, dev.var_r), (dev.kl, dev.var_p)] {
            rows.push(ReportRow {
                temperature: Some(s.temperature),
                variance: Some(var),
                tag: tag.into(),
                ..estimate_row(idx, "final", &e)
            });
        }
    }
    meta.insert("model_seed", s.model.seed);
    meta.insert("baseline_tokens", run.baseline.state.generated());
    meta.insert("pruned_tokens", run.pruned.state.generated());
    meta.insert("first_divergence", run.first_divergence());
    if let Decode::Sample { seed, .. } = s.decode {
        meta.insert("decode_seed", seed);
    }
    if stats.is_some() {
        meta.insert("calibration", "prompt");
    }
    Ok((rows, run))
}

// ---------------------------------------------------------------------------

fn run_analyze(s: &AnalyzeTraceSpec, meta: &mut Metadata) -> Result<Vec<ReportRow>> {
    let data = ingest_trace(&s.manifest)?;
    let temps = if s.temperatures.is_empty() {
        vec![data.manifest.temperature_default]
    } else {
        s.temperatures.clone()
    };
    let mut rows = Vec::new();
    for g in &data.groups {
        let group = g.layer.to_string();
        match g.space {
            TraceSpace::Embedding => rows.extend(linear_row(
                g.step,
                &group,
                &g.baseline,
                &g.pruned,
                Space::Embedding,
            )?),
            TraceSpace::Logit => {
                rows.extend(linear_row(
                    g.step,
                    &group,
                    &g.baseline,
                    &g.pruned,
                    Space::Logit,
                )?);
                for &t in &temps {
                    rows.extend(
                        probability_rows(g.step, &group, &g.baseline, &g.pruned, t)
                            .map_err(|e| e.context(format!("step {} layer {group}", g.step)))?,
                    );
                }
            }
        }
    }
    meta.insert("temperatures", &temps);
    meta.insert("groups", data.groups.len());
    meta.warnings.extend(data.warnings);
    Ok(rows)
}
