use disentangle_core::checkpoint::Checkpoint;
use disentangle_core::config::RunConfig;
use disentangle_core::data::{Corpus, NormStats, Split, SplitCounts};
use disentangle_core::eval::{content_eval, recombine_test_set, EvalContext};
use disentangle_core::train::{load_model, train_data, train_run, CHECKPOINT_FILE};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text(
        "model.content_dim = 8
         model.content_layers = 3
         model.content_width = 8
         model.style_layers = 3
         model.style_width = 8
         model.style_stride_layers = 1,2,3
         model.decoder_layers = 3
         model.decoder_width = 8
         model.decoder_concat_layers = 1,3
         model.scorer_hidden = 8
         train.batch_size = 4
         train.steps = 5",
    )
    .unwrap();
    c.data.counts = SplitCounts {
        train: 40,
        dev: 8,
        test: 16,
    };
    c
}

#[test]
fn corpus_survives_a_disk_round_trip() {
    let c = small();
    let corpus = Corpus::generate(c.data.spec.clone(), c.data.counts, 0).unwrap();
    let again = Corpus::generate(c.data.spec.clone(), c.data.counts, 0).unwrap();
    assert_eq!(corpus.manifest_hash(), again.manifest_hash());

    let dir = tempfile::tempdir().unwrap();
    corpus.write_dir(dir.path()).unwrap();
    let loaded = Corpus::load_dir(dir.path(), c.data.spec.clone()).unwrap();
    assert_eq!(loaded.manifest_hash(), corpus.manifest_hash());
    for (a, b) in corpus.utterances.iter().zip(&loaded.utterances) {
        assert_eq!(a.durations, b.durations);
        // features are stored as f32
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    let stats = NormStats::read_csv(&dir.path().join("norm_stats.csv")).unwrap();
    let direct = NormStats::from_corpus(&corpus).unwrap();
    for (a, b) in stats.mean.iter().zip(&direct.mean) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    assert_eq!(loaded.split(Split::Test).len(), 16);
}

#[test]
fn trained_checkpoint_evaluates_like_the_live_model() {
    let c = small();
    let corpus = Corpus::generate(c.data.spec.clone(), c.data.counts, 0).unwrap();
    let stats = NormStats::from_corpus(&corpus).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let trainer = train_run(
        c.clone(),
        train_data(&corpus, &stats).unwrap(),
        dir.path(),
        false,
    )
    .unwrap();
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let (config, model) = load_model(&ck).unwrap();
    assert_eq!(config, c);
    let ctx = EvalContext {
        corpus: &corpus,
        stats: &stats,
        config: &config.eval,
    };
    let live = content_eval(&ctx, &recombine_test_set(&trainer.model, &ctx).unwrap()).unwrap();
    let loaded = content_eval(&ctx, &recombine_test_set(&model, &ctx).unwrap()).unwrap();
    assert_eq!(live, loaded);
    assert!((0.0..=1.0).contains(&live.shuffle_ser));
}
