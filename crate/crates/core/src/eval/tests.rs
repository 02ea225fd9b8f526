use super::*;
use crate::data::{SplitCounts, SynthSpec};
use crate::model::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model_config(k: usize) -> ModelConfig {
    ModelConfig {
        content_dim: 8,
        style_dim: 4,
        codebook_size: k,
        content_layers: 3,
        content_width: 8,
        content_stride_layer: 2,
        style_layers: 3,
        style_width: 8,
        style_stride_layers: vec![1, 2, 3],
        decoder_layers: 3,
        decoder_width: 8,
        decoder_concat_layers: vec![1, 3],
        scorer_hidden: 8,
        ..ModelConfig::default()
    }
}

fn corpus(spec: SynthSpec, test: usize) -> (Corpus, NormStats) {
    let counts = SplitCounts {
        train: 240,
        dev: 40,
        test,
    };
    let c = Corpus::generate(spec, counts, 0).unwrap();
    let s = NormStats::from_corpus(&c).unwrap();
    (c, s)
}

#[test]
fn donors_differ_and_are_reproducible() {
    let d = donors(50, 7).unwrap();
    assert!(d.iter().enumerate().all(|(i, &j)| i != j && j < 50));
    assert_eq!(d, donors(50, 7).unwrap());
    assert_ne!(d, donors(50, 8).unwrap());
    assert!(donors(1, 0).is_err());
}

#[test]
fn ranking_report_is_monotone() {
    let r = RankingReport::from_ranks(vec![1, 2, 3, 4, 5, 6, 8, 1]);
    assert!(r.top1 <= r.top3 && r.top3 <= r.top5 && r.top5 <= 1.0);
    assert_eq!(r.top1, 0.25);
    assert_eq!(r.top5, 0.75);
    assert_eq!(r.average_rank, 30.0 / 8.0);
}

#[test]
fn judge_is_reliable_on_raw_features() {
    let (c, s) = corpus(SynthSpec::default(), 80);
    let cfg = EvalConfig::default();
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let judge = StyleJudge::train(&ctx).unwrap();
    assert!(judge.accuracy > 0.95, "{}", judge.accuracy);
    let strict = EvalConfig {
        judge_min_accuracy: 1.01,
        ..EvalConfig::default()
    };
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &strict,
    };
    assert!(matches!(
        StyleJudge::train(&ctx),
        Err(Error::EvalRefused(_))
    ));
}

#[test]
fn oracle_features_decode_without_errors() {
    let (c, s) = corpus(SynthSpec::default(), 40);
    let cfg = EvalConfig::default();
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let utts = ctx.test();
    let donor = donors(utts.len(), 0).unwrap();
    // "reconstructions" that are the clean renders themselves
    let clean: Vec<Tensor> = utts
        .iter()
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let style = c.synth.style(u.style).unwrap();
            c.synth
                .render_with(&u.content, &u.durations, style, 0.0, &mut rng)
                .unwrap()
        })
        .collect();
    let shuffled = donor
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let style = c.synth.style(utts[j].style).unwrap();
            c.synth
                .render_with(&utts[i].content, &utts[i].durations, style, 0.0, &mut rng)
                .unwrap()
        })
        .collect();
    let rec = Recombined {
        utterances: utts,
        donors: donor,
        same: clean,
        shuffled,
    };
    let report = content_eval(&ctx, &rec).unwrap();
    assert_eq!(report.no_shuffle_ser, 0.0);
    assert_eq!(report.shuffle_ser, 0.0);
}

#[test]
fn untrained_model_is_near_chance() {
    let (c, s) = corpus(SynthSpec::default(), 80);
    let cfg = EvalConfig::default();
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let model = Model::new(small_model_config(16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let rec = recombine_test_set(&model, &ctx).unwrap();
    let content = content_eval(&ctx, &rec).unwrap();
    // chance for V = 20 is (V - 1) / V = 0.95
    assert!(content.shuffle_ser > 0.7, "{}", content.shuffle_ser);
    assert!(content.no_shuffle_ser > 0.7, "{}", content.no_shuffle_ser);
    let judge = StyleJudge::train(&ctx).unwrap();
    let ranking = style_ranking(&judge, &rec).unwrap();
    // an untrained decoder ignores the donor: target top-1 is about 1/M
    assert!(ranking.target.top1 < 0.4, "{}", ranking.target.top1);
    assert!(ranking.target.average_rank >= 1.0);
}

#[test]
fn probes_do_not_touch_the_encoder() {
    let (c, s) = corpus(SynthSpec::default(), 40);
    let cfg = EvalConfig {
        probe_steps: 20,
        ..EvalConfig::default()
    };
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let model = Model::new(small_model_config(8), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let before = model.params.clone();
    let cb = model.codebook.clone();
    content_probe(&model, &ctx).unwrap();
    style_probe(&model, &ctx).unwrap();
    leakage(&model, &ctx).unwrap();
    few_shot_pretrained(&model, &ctx, 1).unwrap();
    assert_eq!(model.params, before);
    assert_eq!(model.codebook, cb);
    for (a, b) in model.params.iter().zip(before.iter()) {
        assert!(a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn few_shot_split_layout() {
    let (c, s) = corpus(SynthSpec::default(), 80);
    let cfg = EvalConfig::default();
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let split = few_shot_split(&ctx, 3).unwrap();
    assert_eq!(split.classes, 8);
    assert_eq!(split.support.len(), 24);
    assert_eq!(split.support.len() + split.query.len(), 80);
    let ids: std::collections::HashSet<&str> =
        split.support.iter().map(|u| u.id.as_str()).collect();
    assert!(split.query.iter().all(|u| !ids.contains(u.id.as_str())));
    assert!(few_shot_split(&ctx, 40).is_err());
}

#[test]
fn one_shot_is_perfect_when_styles_are_far_apart() {
    let spec = SynthSpec {
        noise: 0.0,
        offset_scale: 10.0,
        ..SynthSpec::default()
    };
    let (c, s) = corpus(spec, 80);
    let cfg = EvalConfig::default();
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let model = Model::new(small_model_config(8), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(few_shot_pretrained(&model, &ctx, 1).unwrap(), 1.0);
}

#[test]
fn scratch_scenario_runs() {
    let (c, s) = corpus(SynthSpec::default(), 40);
    let cfg = EvalConfig {
        scratch_steps: 3,
        ..EvalConfig::default()
    };
    let ctx = EvalContext {
        corpus: &c,
        stats: &s,
        config: &cfg,
    };
    let run = RunConfig {
        model: small_model_config(8),
        ..RunConfig::default()
    };
    let acc = few_shot_scratch(&run, &ctx, 1).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn code_histogram_sums_to_one() {
    let h = code_histogram(&[0, 2, 2, 3], 4);
    assert_eq!(h, vec![0.25, 0.0, 0.5, 0.25]);
}
