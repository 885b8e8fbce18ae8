mod common;

use repspace::estimators::{Metric, Space};
use repspace::harness::PromptSource;
use repspace::propagation::{
    attention_error_between, context_split_deviation, layer_intervention_sweep, stepwise_run,
    sweep_layers, ContextRegime,
};
use repspace::pruning::{apply_prune, Branch, PruneSpec};
use repspace::toylm::{Decode, ToyConfig, ToyModel};

fn small() -> ToyModel {
    ToyModel::init(ToyConfig {
        vocab_size: 24,
        model_dim: 8,
        num_layers: 4,
        ffn_dim: 16,
        seed: 11,
        max_context: 32,
    })
    .unwrap()
}

#[test]
fn sweep_visits_requested_layers_in_order() {
    assert_eq!(sweep_layers(&PruneSpec::drop_mlp([3, 1]), 4), vec![3, 1]);
    assert_eq!(
        sweep_layers(&PruneSpec::drop_attn(Vec::new()), 4),
        vec![0, 1, 2, 3]
    );

    let m = small();
    let prompts = PromptSource::seeded(2).resolve(24);
    let res =
        layer_intervention_sweep(&m, &PruneSpec::drop_mlp([3, 1]), &prompts, 1.0, None).unwrap();
    assert_eq!(res.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![3, 1]);
    assert!(res
        .iter()
        .all(|r| r.branch == Branch::Mlp && r.samples == 4 * 16));
}

#[test]
fn noop_template_yields_zero_deviation_everywhere() {
    let m = small();
    let prompts = PromptSource::seeded(5).resolve(24);
    let res = layer_intervention_sweep(&m, &PruneSpec::noop(), &prompts, 1.0, None).unwrap();
    assert_eq!(res.len(), 4);
    for r in &res {
        for (_, _, s) in r.summaries() {
            assert_eq!(s.exact.max, 0.0);
            assert_eq!(s.estimated, 0.0);
        }
    }
}

#[test]
fn sweep_summaries_match_straight_line_reference() {
    let m = small();
    let prompts = PromptSource::seeded(8).resolve(24);
    let t = 0.7;
    let res =
        layer_intervention_sweep(&m, &PruneSpec::drop_attn(Vec::new()), &prompts, t, None).unwrap();
    for r in &res {
        let hybrid = apply_prune(&m, &PruneSpec::drop_attn([r.layer]), None).unwrap();
        let mut refs = Vec::new();
        for p in &prompts {
            let a = m.forward(p, Default::default(), t).unwrap();
            let b = hybrid.forward(p, Default::default(), t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                refs.push(common::reference(
                    x.hidden.as_slice(),
                    y.hidden.as_slice(),
                    x.logits.scores().as_slice(),
                    y.logits.scores().as_slice(),
                    t,
                ));
            }
        }
        let n = refs.len() as f64;
        for (k, (_, _, s)) in r.summaries().into_iter().enumerate() {
            let mean_exact = refs.iter().map(|x| x.exact[k]).sum::<f64>() / n;
            let mean_est = refs.iter().map(|x| x.estimated[k]).sum::<f64>() / n;
            let mean_err = refs
                .iter()
                .map(|x| (x.estimated[k] - x.exact[k]).abs())
                .sum::<f64>()
                / n;
            assert!(common::close(s.exact.mean, mean_exact, 1e-12));
            assert!(common::close(s.estimated, mean_est, 1e-12));
            assert!(common::close(s.abs_error, mean_err, 1e-12));
        }
    }
}

#[test]
fn deeper_drops_perturb_less_on_the_seeded_default() {
    // first and last layers of the default model, pinned behaviour
    let m = ToyModel::init(ToyConfig::default()).unwrap();
    let prompts = PromptSource::seeded(0).resolve(64);
    let res =
        layer_intervention_sweep(&m, &PruneSpec::drop_attn([0, 7]), &prompts, 1.0, None).unwrap();
    for (space, metric, _) in res[0].summaries() {
        let get = |i: usize| {
            res[i]
                .summaries()
                .into_iter()
                .find(|(s, mm, _)| (*s, *mm) == (space, metric))
                .unwrap()
                .2
                .exact
                .mean
        };
        assert!(get(0) > get(1), "{space:?} {metric:?}");
    }
}

#[test]
fn step_zero_does_not_depend_on_decoding() {
    let m = small();
    let pruned = apply_prune(&m, &PruneSpec::drop_attn([1]), None).unwrap();
    let greedy = stepwise_run(&m, &pruned, &[1, 2, 3], 6, Decode::Greedy, 1.0).unwrap();
    let sampled = stepwise_run(
        &m,
        &pruned,
        &[1, 2, 3],
        6,
        Decode::Sample {
            temperature: 1.3,
            seed: 4,
        },
        1.0,
    )
    .unwrap();
    assert_eq!(greedy.steps[0].deviation, sampled.steps[0].deviation);
    assert!(greedy.steps[0].same_context);
}

#[test]
fn identical_models_never_diverge() {
    let m = small();
    let run = stepwise_run(
        &m,
        &m.clone(),
        &[4, 4],
        8,
        Decode::Sample {
            temperature: 1.0,
            seed: 1,
        },
        1.0,
    )
    .unwrap();
    assert_eq!(run.first_divergence(), None);
    assert_eq!(run.baseline.state.tokens(), run.pruned.state.tokens());
    for s in &run.steps {
        assert_eq!(s.deviation.kl.exact, 0.0);
        assert_eq!(s.deviation.probability.exact, 0.0);
    }
}

#[test]
fn context_regimes_follow_the_token_history() {
    let m = ToyModel::init(ToyConfig::default()).unwrap();
    let pruned = apply_prune(&m, &PruneSpec::drop_attn([3, 4]), None).unwrap();
    let run = stepwise_run(&m, &pruned, &[3, 17, 5], 16, Decode::Greedy, 1.0).unwrap();
    let split = context_split_deviation(&run.steps, 3);
    let k = run.first_divergence().unwrap();
    assert_eq!(k, 2);
    for s in &split {
        let want = match s.step {
            0 => ContextRegime::WeightOnly,
            t if t < k => ContextRegime::HistoryPromptFixed,
            _ => ContextRegime::HistoryGenerated,
        };
        assert_eq!(s.regime, want);
        assert_eq!(s.context_len, 3 + s.step);
    }
    // lookup by (space, metric)
    for s in &run.steps {
        let c = &s.deviation;
        assert_eq!(c.get(Space::Probability, Metric::Kl), Some(&c.kl));
        assert_eq!(c.get(Space::Embedding, Metric::Kl), None);
    }
}

#[test]
fn attention_breakdown_between_models_reconstructs_the_delta() {
    let m = small();
    let pruned = apply_prune(
        &m,
        &PruneSpec::new(repspace::pruning::PruneKind::Quantize { bits: 3 }),
        None,
    )
    .unwrap();
    let tokens = [5, 1, 20, 7, 7, 3];
    for layer in 0..4 {
        let b = attention_error_between(&m, &pruned, &tokens, layer).unwrap();
        assert!(b.reconstruction_error() <= 1e-12);
        assert!(b.exact_delta.max_abs() > 0.0);
    }
    assert!(attention_error_between(&m, &pruned, &tokens, 4).is_err());
}

#[test]
fn middle_layer_probability_vs_logit_ordering_depends_on_temperature() {
    // seeded default, layers 3 and 4: the probability space is less
    // perturbed than the logits at T = 1 and more perturbed at T = 0.5
    let m = ToyModel::init(ToyConfig::default()).unwrap();
    let prompts = PromptSource::seeded(0).resolve(64);
    for (t, prob_exceeds_logit) in [(1.0, false), (0.5, true)] {
        let res =
            layer_intervention_sweep(&m, &PruneSpec::drop_attn([3, 4]), &prompts, t, None).unwrap();
        for r in res {
            let (p, l) = (r.probability.exact.mean, r.logit.exact.mean);
            assert_eq!(
                p >= l,
                prob_exceeds_logit,
                "T={t} layer {}: {p} vs {l}",
                r.layer
            );
        }
    }
}
