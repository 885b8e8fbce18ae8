//! Baseline-vs-compressed experiments: single-layer interventions measured
//! at the final output, step-wise divergence during decoding, and the
//! three-path decomposition of a perturbed attention output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{exact_kl, softmax_t, squared_weight_dist, Logits};
use crate::error::{Error, Result};
use crate::estimators::{DeviationEstimate, Metric, Space};
use crate::pruning::{apply_prune, Branch, CalibrationStats, PruneSpec};
use crate::toylm::{Capture, Decode, Generation, SpaceSnapshot, ToyModel};
use crate::vecmath::{
    angular_deviation, moments_unchecked, relative_orthogonal_magnitude, tol, RealVector,
};

// ---------------------------------------------------------------------------
// Final-output comparison
// ---------------------------------------------------------------------------

/// Exact and estimated deviation between two final outputs in every space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceComparison {
    pub embedding: DeviationEstimate,
    pub logit: DeviationEstimate,
    pub probability: DeviationEstimate,
    pub kl: DeviationEstimate,
    /// `‖Δh⊥‖² / ‖h‖²`.
    pub rel_orth_hidden: f64,
    /// `‖Δz⊥‖² / ‖z‖²`.
    pub rel_orth_logits: f64,
    /// `Var_r(Δz)` with `rᵢ ∝ pᵢ²`.
    pub var_r: f64,
    /// `Var_p(Δz)`.
    pub var_p: f64,
}

impl SpaceComparison {
    pub fn get(&self, space: Space, metric: Metric) -> Option<&DeviationEstimate> {
        match (space, metric) {
            (Space::Embedding, Metric::AngularDeviation) => Some(&self.embedding),
            (Space::Logit, Metric::AngularDeviation) => Some(&self.logit),
            (Space::Probability, Metric::AngularDeviation) => Some(&self.probability),
            (Space::Probability, Metric::Kl) => Some(&self.kl),
            _ => None,
        }
    }
}

/// Linear-space comparison of `base` against `other`.
pub fn compare_linear(
    base: &RealVector,
    other: &RealVector,
    space: Space,
) -> Result<(DeviationEstimate, f64)> {
    let delta = other.sub(base)?;
    let rel = relative_orthogonal_magnitude(base, &delta)?;
    let exact = angular_deviation(base, other)?;
    Ok((
        DeviationEstimate::new(rel / 2.0, exact, space, Metric::AngularDeviation),
        rel,
    ))
}

/// Probability-space deviation between the distributions induced by two logit vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityComparison {
    pub probability: DeviationEstimate,
    pub kl: DeviationEstimate,
    pub var_r: f64,
    pub var_p: f64,
}

pub fn compare_logits(
    z: &RealVector,
    z2: &RealVector,
    temperature: f64,
) -> Result<ProbabilityComparison> {
    let p = softmax_t(&Logits::new(z.clone(), temperature)?);
    let q = softmax_t(&Logits::new(z2.clone(), temperature)?);
    let dz = z2.sub(z)?;
    let var_r = moments_unchecked(dz.as_slice(), squared_weight_dist(&p).as_slice()).variance;
    let var_p = moments_unchecked(dz.as_slice(), p.as_slice()).variance;
    let scale = 2.0 * temperature * temperature;
    Ok(ProbabilityComparison {
        probability: DeviationEstimate::new(
            var_r / scale,
            angular_deviation(p.as_vector(), q.as_vector())?,
            Space::Probability,
            Metric::AngularDeviation,
        ),
        kl: DeviationEstimate::new(
            var_p / scale,
            exact_kl(&p, &q)?,
            Space::Probability,
            Metric::Kl,
        ),
        var_r,
        var_p,
    })
}

/// Compares two final outputs given their hidden states and logits.
///
/// Probabilities are recomputed from the logits at `temperature`.
pub fn compare_outputs(
    hidden: &RealVector,
    hidden2: &RealVector,
    logits: &RealVector,
    logits2: &RealVector,
    temperature: f64,
) -> Result<SpaceComparison> {
    let (embedding, rel_orth_hidden) = compare_linear(hidden, hidden2, Space::Embedding)?;
    let (logit, rel_orth_logits) = compare_linear(logits, logits2, Space::Logit)?;
    let pc = compare_logits(logits, logits2, temperature)?;
    Ok(SpaceComparison {
        embedding,
        logit,
        probability: pc.probability,
        kl: pc.kl,
        rel_orth_hidden,
        rel_orth_logits,
        var_r: pc.var_r,
        var_p: pc.var_p,
    })
}

fn compare_snapshots(a: &SpaceSnapshot, b: &SpaceSnapshot) -> Result<SpaceComparison> {
    compare_outputs(
        &a.hidden,
        &b.hidden,
        a.logits.scores(),
        b.logits.scores(),
        a.logits.temperature(),
    )
}

// ---------------------------------------------------------------------------
// Layer-wise intervention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Aggregate of one space over all `(prompt, position)` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceSummary {
    pub exact: SpaceStats,
    /// Mean estimate.
    pub estimated: f64,
    /// Mean of `|estimated - exact|`.
    pub abs_error: f64,
    /// Mean relative orthogonal magnitude (linear spaces only).
    pub rel_orth: Option<f64>,
    /// Mean `Var_r(Δz)` or `Var_p(Δz)` (probability space only).
    pub variance: Option<f64>,
}

impl SpaceSummary {
    fn collect(
        items: &[SpaceComparison],
        pick: impl Fn(&SpaceComparison) -> (DeviationEstimate, Option<f64>, Option<f64>),
    ) -> Self {
        let n = items.len() as f64;
        let mut exact = SpaceStats {
            mean: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        let (mut est, mut err, mut rel, mut var) = (0.0, 0.0, None::<f64>, None::<f64>);
        for c in items {
            let (e, r, v) = pick(c);
            exact.mean += e.exact;
            exact.min = exact.min.min(e.exact);
            exact.max = exact.max.max(e.exact);
            est += e.estimated;
            err += e.abs_error.abs();
            if let Some(r) = r {
                *rel.get_or_insert(0.0) += r;
            }
            if let Some(v) = v {
                *var.get_or_insert(0.0) += v;
            }
        }
        exact.mean /= n;
        Self {
            exact,
            estimated: est / n,
            abs_error: err / n,
            rel_orth: rel.map(|r| r / n),
            variance: var.map(|v| v / n),
        }
    }
}

/// Final-output deviation caused by perturbing a single layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub layer: usize,
    pub branch: Branch,
    /// Number of `(prompt, position)` samples aggregated.
    pub samples: usize,
    pub embedding: SpaceSummary,
    pub logit: SpaceSummary,
    pub probability: SpaceSummary,
    pub kl: SpaceSummary,
}

impl InterventionResult {
    fn from_comparisons(layer: usize, branch: Branch, items: &[SpaceComparison]) -> Self {
        Self {
            layer,
            branch,
            samples: items.len(),
            embedding: SpaceSummary::collect(items, |c| {
                (c.embedding, Some(c.rel_orth_hidden), None)
            }),
            logit: SpaceSummary::collect(items, |c| (c.logit, Some(c.rel_orth_logits), None)),
            probability: SpaceSummary::collect(items, |c| (c.probability, None, Some(c.var_r))),
            kl: SpaceSummary::collect(items, |c| (c.kl, None, Some(c.var_p))),
        }
    }

    /// Summaries keyed by `(space, metric)`, in report order.
    pub fn summaries(&self) -> [(Space, Metric, &SpaceSummary); 4] {
        [
            (Space::Embedding, Metric::AngularDeviation, &self.embedding),
            (Space::Logit, Metric::AngularDeviation, &self.logit),
            (
                Space::Probability,
                Metric::AngularDeviation,
                &self.probability,
            ),
            (Space::Probability, Metric::Kl, &self.kl),
        ]
    }
}

/// Layers a sweep visits: the template's drop indices or layer restriction, else every layer.
pub fn sweep_layers(template: &PruneSpec, num_layers: usize) -> Vec<usize> {
    let explicit = match template.drop_indices() {
        Some(idx) => Some(idx.to_vec()),
        None => template.layers.clone(),
    };
    match explicit {
        Some(idx) if !idx.is_empty() => idx,
        _ => (0..num_layers).collect(),
    }
}

fn check_locality(
    base: &SpaceSnapshot,
    hybrid: &SpaceSnapshot,
    layer: usize,
    pos: usize,
) -> Result<()> {
    let (Some(a), Some(b)) = (&base.per_layer_hidden, &hybrid.per_layer_hidden) else {
        return Err(Error::Invariant(
            "per-layer hidden states were not captured".into(),
        ));
    };
    if a[..=layer] != b[..=layer] {
        return Err(Error::Invariant(format!(
            "intervention at layer {layer} changed an earlier hidden state at position {pos}"
        )));
    }
    Ok(())
}

/// Replaces one layer at a time with its compressed counterpart and measures
/// the final-output deviation over every `(prompt, position)`.
///
/// Results are ordered by layer. Hidden states entering the intervened layer
/// are checked to be bitwise identical to the baseline.
pub fn layer_intervention_sweep(
    baseline: &ToyModel,
    template: &PruneSpec,
    prompts: &[Vec<usize>],
    temperature: f64,
    stats: Option<&CalibrationStats>,
) -> Result<Vec<InterventionResult>> {
    if prompts.is_empty() {
        return Err(Error::Validation(
            "intervention sweep needs at least one prompt".into(),
        ));
    }
    template.validate(baseline.num_layers())?;
    let layers = sweep_layers(template, baseline.num_layers());
    let branch = template.branch();

    let base_runs: Vec<Vec<SpaceSnapshot>> = prompts
        .par_iter()
        .map(|p| baseline.forward(p, Capture::AllLayers, temperature))
        .collect::<Result<_>>()?;
    let hybrids: Vec<ToyModel> = layers
        .par_iter()
        .map(|&l| apply_prune(baseline, &template.restricted_to_layer(l), stats))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..layers.len())
        .flat_map(|li| (0..prompts.len()).map(move |pi| (li, pi)))
        .collect();
    let per_job: Vec<Vec<SpaceComparison>> = jobs
        .par_iter()
        .map(|&(li, pi)| {
            let hybrid = hybrids[li].forward(&prompts[pi], Capture::AllLayers, temperature)?;
            base_runs[pi]
                .iter()
                .zip(&hybrid)
                .enumerate()
                .map(|(pos, (b, h))| {
                    check_locality(b, h, layers[li], pos)?;
                    compare_snapshots(b, h)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.context(format!("layer {} prompt {pi}", layers[li])))
        })
        .collect::<Result<_>>()?;

    Ok(layers
        .iter()
        .enumerate()
        .map(|(li, &l)| {
            let items: Vec<SpaceComparison> = per_job[li * prompts.len()..(li + 1) * prompts.len()]
                .iter()
                .flatten()
                .copied()
                .collect();
            InterventionResult::from_comparisons(l, branch, &items)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Step-wise divergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDeviation {
    pub step: usize,
    /// Both models have emitted identical tokens before this step.
    pub same_context: bool,
    pub deviation: SpaceComparison,
    /// `(baseline token, pruned token)` emitted at this step.
    pub tokens: (usize, usize),
}

/// Both decodes together with their per-step comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseRun {
    pub baseline: Generation,
    pub pruned: Generation,
    pub steps: Vec<StepDeviation>,
}

impl StepwiseRun {
    /// First step whose context differs between the two models.
    pub fn first_divergence(&self) -> Option<usize> {
        first_divergence(&self.steps)
    }
}

pub fn first_divergence(steps: &[StepDeviation]) -> Option<usize> {
    steps.iter().find(|s| !s.same_context).map(|s| s.step)
}

fn check_same_shape(a: &ToyModel, b: &ToyModel) -> Result<()> {
    let (x, y) = (a.config(), b.config());
    let shape = |c: &crate::toylm::ToyConfig| {
        (
            c.vocab_size,
            c.model_dim,
            c.num_layers,
            c.ffn_dim,
            c.max_context,
        )
    };
    if shape(x) != shape(y) {
        return Err(Error::Shape(format!(
            "models differ in shape: {:?} vs {:?}",
            shape(x),
            shape(y)
        )));
    }
    Ok(())
}

/// Decodes from `prompt` with both models and compares their final outputs at each step.
///
/// With `Decode::Sample`, both decoders draw from identically seeded streams.
pub fn stepwise_run(
    baseline: &ToyModel,
    pruned: &ToyModel,
    prompt: &[usize],
    steps: usize,
    decode: Decode,
    temperature: f64,
) -> Result<StepwiseRun> {
    check_same_shape(baseline, pruned)?;
    let (a, b) = rayon::join(
        || baseline.generate(prompt, steps, decode, temperature),
        || pruned.generate(prompt, steps, decode, temperature),
    );
    let (a, b) = (a?, b?);
    let (ga, gb) = (a.state.generated(), b.state.generated());
    let steps = (0..steps)
        .map(|t| {
            Ok(StepDeviation {
                step: t,
                same_context: ga[..t] == gb[..t],
                deviation: compare_snapshots(&a.trace[t], &b.trace[t])
                    .map_err(|e| e.context(format!("step {t}")))?,
                tokens: (ga[t], gb[t]),
            })
        })
        .collect::<Result<_>>()?;
    Ok(StepwiseRun {
        baseline: a,
        pruned: b,
        steps,
    })
}

pub fn stepwise_divergence(
    baseline: &ToyModel,
    pruned: &ToyModel,
    prompt: &[usize],
    steps: usize,
    decode: Decode,
    temperature: f64,
) -> Result<Vec<StepDeviation>> {
    Ok(stepwise_run(baseline, pruned, prompt, steps, decode, temperature)?.steps)
}

/// Where a step's deviation can come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextRegime {
    /// Only the prompt is in context: the weights alone differ.
    WeightOnly,
    /// Generated history exists but is identical for both models.
    HistoryPromptFixed,
    /// The models have emitted different tokens earlier.
    HistoryGenerated,
}

impl ContextRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextRegime::WeightOnly => "weight_only",
            ContextRegime::HistoryPromptFixed => "history_prompt_fixed",
            ContextRegime::HistoryGenerated => "history_generated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSplit {
    pub step: usize,
    pub regime: ContextRegime,
    /// Tokens in context when this step's output was produced.
    pub context_len: usize,
    pub prompt_len: usize,
}

pub fn context_split_deviation(steps: &[StepDeviation], prompt_len: usize) -> Vec<ContextSplit> {
    steps
        .iter()
        .map(|s| ContextSplit {
            step: s.step,
            regime: if s.step == 0 {
                ContextRegime::WeightOnly
            } else if s.same_context {
                ContextRegime::HistoryPromptFixed
            } else {
                ContextRegime::HistoryGenerated
            },
            context_len: prompt_len + s.step,
            prompt_len,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Attention error decomposition
// ---------------------------------------------------------------------------

/// `Δo = Σ αΔv + Σ Δα v + Σ Δα Δv`, kept exact (the cross term is not dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnErrorBreakdown {
    pub value_path: RealVector,
    pub weight_path: RealVector,
    pub cross_term: RealVector,
    pub exact_delta: RealVector,
}

impl AttnErrorBreakdown {
    /// Largest entrywise gap between the three-path sum and the exact delta.
    pub fn reconstruction_error(&self) -> f64 {
        (0..self.exact_delta.dim())
            .map(|i| {
                (self.value_path[i] + self.weight_path[i] + self.cross_term[i]
                    - self.exact_delta[i])
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

fn check_weight_sum(w: &[f64], name: &str) -> Result<()> {
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > tol::PROB_SUM {
        return Err(Error::Validation(format!(
            "{name} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

fn weighted_sum(weights: &[f64], vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, v) in weights.iter().zip(vectors) {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
    }
    out
}

pub fn attention_error_decomposition(
    alpha: &[f64],
    values: &[Vec<f64>],
    delta_alpha: &[f64],
    delta_values: &[Vec<f64>],
) -> Result<AttnErrorBreakdown> {
    let n = alpha.len();
    if n == 0 || values.len() != n || delta_alpha.len() != n || delta_values.len() != n {
        return Err(Error::Shape(format!(
            "sequence lengths differ or are empty: alpha {n}, values {}, delta_alpha {}, delta_values {}",
            values.len(),
            delta_alpha.len(),
            delta_values.len()
        )));
    }
    let dim = values[0].len();
    if values.iter().chain(delta_values).any(|v| v.len() != dim) {
        return Err(Error::Shape("value vectors differ in dimension".into()));
    }
    check_weight_sum(alpha, "alpha")?;
    let perturbed: Vec<f64> = alpha.iter().zip(delta_alpha).map(|(a, d)| a + d).collect();
    check_weight_sum(&perturbed, "alpha + delta_alpha")?;

    let shifted: Vec<Vec<f64>> = values
        .iter()
        .zip(delta_values)
        .map(|(v, d)| v.iter().zip(d).map(|(a, b)| a + b).collect())
        .collect();
    let before = weighted_sum(alpha, values, dim);
    let after = weighted_sum(&perturbed, &shifted, dim);
    let vec = |v: Vec<f64>| RealVector::new(v).map_err(|e| e.context("attention decomposition"));
    Ok(AttnErrorBreakdown {
        value_path: vec(weighted_sum(alpha, delta_values, dim))?,
        weight_path: vec(weighted_sum(delta_alpha, values, dim))?,
        cross_term: vec(weighted_sum(delta_alpha, delta_values, dim))?,
        exact_delta: vec(after.iter().zip(&before).map(|(a, b)| a - b).collect())?,
    })
}

/// Decomposes the change in `layer`'s attention output at the last position of `tokens`.
pub fn attention_error_between(
    baseline: &ToyModel,
    pruned: &ToyModel,
    tokens: &[usize],
    layer: usize,
) -> Result<AttnErrorBreakdown> {
    check_same_shape(baseline, pruned)?;
    let a = baseline.attention_view(tokens, layer)?;
    let b = pruned.attention_view(tokens, layer)?;
    let delta_alpha: Vec<f64> = b.alpha.iter().zip(&a.alpha).map(|(x, y)| x - y).collect();
    let delta_values: Vec<Vec<f64>> = b
        .values
        .iter()
        .zip(&a.values)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect();
    attention_error_decomposition(&a.alpha, &a.values, &delta_alpha, &delta_values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::PruneKind;
    use crate::toylm::{MatrixId, ToyConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> ToyModel {
        ToyModel::init(ToyConfig {
            vocab_size: 16,
            model_dim: 8,
            num_layers: 4,
            ffn_dim: 16,
            seed,
            max_context: 32,
        })
        .unwrap()
    }

    fn prompts() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 3], vec![7, 0, 9, 4]]
    }

    fn all_zero(r: &InterventionResult) -> bool {
        r.summaries()
            .iter()
            .all(|(_, _, s)| s.exact.max == 0.0 && s.estimated == 0.0 && s.abs_error == 0.0)
    }

    #[test]
    fn noop_sweep_is_zero() {
        let m = small(1);
        let res = layer_intervention_sweep(&m, &PruneSpec::noop(), &prompts(), 1.0, None).unwrap();
        assert_eq!(res.len(), 4);
        assert!(res.iter().all(all_zero));
        assert_eq!(res[0].samples, 7);
    }

    #[test]
    fn dropping_a_zero_branch_is_free() {
        let mut m = small(2);
        m.blocks[2].wo.fill(0.0);
        let res = layer_intervention_sweep(&m, &PruneSpec::drop_attn([2]), &prompts(), 1.0, None)
            .unwrap();
        assert_eq!(res.len(), 1);
        assert!(all_zero(&res[0]));
        let res =
            layer_intervention_sweep(&m, &PruneSpec::drop_attn(Vec::new()), &prompts(), 1.0, None)
                .unwrap();
        assert!(all_zero(&res[2]));
        assert!(!all_zero(&res[1]));
    }

    #[test]
    fn sweep_statistics_are_ordered() {
        let m = small(3);
        let spec = PruneSpec::new(PruneKind::Quantize { bits: 3 });
        for r in layer_intervention_sweep(&m, &spec, &prompts(), 0.7, None).unwrap() {
            for (_, _, s) in r.summaries() {
                assert!(s.exact.min <= s.exact.mean && s.exact.mean <= s.exact.max);
                assert!(s.exact.min >= 0.0);
            }
            assert_eq!(r.branch, Branch::Block);
        }
    }

    #[test]
    fn sweep_rejects_empty_prompts() {
        let m = small(1);
        assert!(layer_intervention_sweep(&m, &PruneSpec::noop(), &[], 1.0, None).is_err());
    }

    #[test]
    fn wanda_sweep_uses_stats() {
        let m = small(4);
        let spec = PruneSpec::new(PruneKind::SemiStructured {
            n: 2,
            m: 4,
            scorer: crate::pruning::Scorer::Wanda,
        })
        .with_targets(vec![MatrixId::WUp, MatrixId::WDown]);
        assert!(matches!(
            layer_intervention_sweep(&m, &spec, &prompts(), 1.0, None),
            Err(Error::MissingCalibration)
        ));
        let stats = crate::pruning::calibrate(&m, &prompts()).unwrap();
        let res = layer_intervention_sweep(&m, &spec, &prompts(), 1.0, Some(&stats)).unwrap();
        assert_eq!(res[0].branch, Branch::Mlp);
        assert!(res.iter().all(|r| r.logit.exact.max > 0.0));
    }

    #[test]
    fn identical_models_never_diverge() {
        let m = small(5);
        let steps = stepwise_divergence(&m, &m, &[1, 2], 8, Decode::Greedy, 1.0).unwrap();
        assert_eq!(steps.len(), 8);
        for s in &steps {
            assert!(s.same_context);
            assert_eq!(s.tokens.0, s.tokens.1);
            for (space, metric) in [
                (Space::Embedding, Metric::AngularDeviation),
                (Space::Logit, Metric::AngularDeviation),
                (Space::Probability, Metric::AngularDeviation),
                (Space::Probability, Metric::Kl),
            ] {
                let d = s.deviation.get(space, metric).unwrap();
                assert_eq!((d.exact, d.estimated), (0.0, 0.0));
            }
        }
        let split = context_split_deviation(&steps, 2);
        assert_eq!(split[0].regime, ContextRegime::WeightOnly);
        assert!(split[1..]
            .iter()
            .all(|c| c.regime == ContextRegime::HistoryPromptFixed));
        assert_eq!(split[3].context_len, 5);
    }

    #[test]
    fn step_zero_independent_of_decoding() {
        let m = small(6);
        let p = apply_prune(&m, &PruneSpec::drop_mlp([1]), None).unwrap();
        let g = stepwise_divergence(&m, &p, &[3, 4, 5], 4, Decode::Greedy, 1.0).unwrap();
        let s = stepwise_divergence(
            &m,
            &p,
            &[3, 4, 5],
            4,
            Decode::Sample {
                temperature: 1.3,
                seed: 11,
            },
            1.0,
        )
        .unwrap();
        assert_eq!(g[0].deviation, s[0].deviation);
        assert!(g[0].same_context && s[0].same_context);
    }

    #[test]
    fn divergence_flag_is_monotone() {
        let m = small(7);
        let p = apply_prune(&m, &PruneSpec::drop_block([0, 1, 2]), None).unwrap();
        let run = stepwise_run(&m, &p, &[0], 20, Decode::Greedy, 1.0).unwrap();
        let k = run.first_divergence().expect("heavy pruning diverges");
        for s in &run.steps {
            assert_eq!(s.same_context, s.step < k);
        }
        let split = context_split_deviation(&run.steps, 1);
        assert!(split[k..]
            .iter()
            .all(|c| c.regime == ContextRegime::HistoryGenerated));
    }

    #[test]
    fn stepwise_requires_matching_shapes() {
        let a = small(1);
        let b = ToyModel::init(ToyConfig::with_seed(1)).unwrap();
        assert!(matches!(
            stepwise_divergence(&a, &b, &[1], 2, Decode::Greedy, 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn attention_paths_examples() {
        let alpha = [0.25, 0.75];
        let v = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let dv = vec![vec![0.1, 0.0], vec![0.0, -0.2]];
        let b = attention_error_decomposition(&alpha, &v, &[0.0, 0.0], &dv).unwrap();
        assert!(b.weight_path.as_slice().iter().all(|x| *x == 0.0));
        assert!(b.cross_term.as_slice().iter().all(|x| *x == 0.0));
        assert!(b.exact_delta.sub(&b.value_path).unwrap().max_abs() <= 1e-15);

        let da = [0.1, -0.1];
        let zero = vec![vec![0.0, 0.0]; 2];
        let b = attention_error_decomposition(&alpha, &v, &da, &zero).unwrap();
        assert!(b.value_path.as_slice().iter().all(|x| *x == 0.0));
        assert!(b.reconstruction_error() <= 1e-15);

        assert!(attention_error_decomposition(&[0.5, 0.6], &v, &da, &dv).is_err());
        assert!(attention_error_decomposition(&alpha, &v, &[0.1, 0.0], &dv).is_err());
        assert!(matches!(
            attention_error_decomposition(&alpha, &v[..1], &da, &dv),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn attention_between_models() {
        let m = small(8);
        let p = apply_prune(&m, &PruneSpec::new(PruneKind::Quantize { bits: 2 }), None).unwrap();
        let b = attention_error_between(&m, &p, &[4, 5, 6, 7], 2).unwrap();
        assert!(b.reconstruction_error() <= 1e-12);
        assert!(b.exact_delta.max_abs() > 0.0);
    }

    proptest! {
        #[test]
        fn decomposition_is_exact(seed in any::<u64>(), n in 1usize..12, d in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut simplex = |n: usize| {
                let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let alpha = simplex(n);
            let beta = simplex(n);
            let da: Vec<f64> = beta.iter().zip(&alpha).map(|(b, a)| b - a).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut mat = |n: usize| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect()
            };
            let v = mat(n);
            let dv = mat(n);
            let b = attention_error_decomposition(&alpha, &v, &da, &dv).unwrap();
            prop_assert!(b.reconstruction_error() <= 1e-12);
        }
    }
}
