//! End-to-end library flows through files: load, audit, extract, augment,
//! train, checkpoint and evaluate.

use std::io::Write;

use lexdebias::augmentation::{augment_synthetic, default_cwb_rules, AugmentSource, EnhancementPlan};
use lexdebias::bias_audit::{
    compute_word_label_stats, extract_cwb_balanced, select_contradiction_words, BalancedSetSpec, BiasKind,
    DEFAULT_CWB_WORDS,
};
use lexdebias::checkpoint::{load_model, save_model};
use lexdebias::config::RunConfig;
use lexdebias::corpus::{build_vocab, load_pairs, CorpusFormat, Label};
use lexdebias::encoders::EncoderConfig;
use lexdebias::model::{Model, ModelConfig, ModelKind};
use lexdebias::synth::{generate, SynthConfig};
use lexdebias::train_eval::{evaluate, train, TrainConfig};
use lexdebias::{Error, ErrorClass};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        d_e: 8,
        d_h: 8,
        n_layers: 2,
        dropout: 0.1,
        n_heads: 2,
        d_att: 8,
        d_mlp: 12,
    }
}

#[test]
fn tsv_and_jsonl_load_the_same_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("pairs.tsv");
    let mut f = std::fs::File::create(&tsv).unwrap();
    writeln!(f, "gold_label\tsentence1\tsentence2\tpairID\tgenre").unwrap();
    writeln!(f, "contradiction\tA man is \"sleeping\".\tNobody sleeps.\tp1\tfiction").unwrap();
    writeln!(f, "-\tA dog runs.\tAn animal moves.\tp2\tfiction").unwrap();
    writeln!(f, "entailment\tTwo kids play.\tChildren play.\tp3\ttravel").unwrap();
    drop(f);
    let (ds, stats) = load_pairs(&tsv, CorpusFormat::from_path(&tsv)).unwrap();
    assert_eq!(stats.records, 3);
    assert_eq!(stats.skipped_no_consensus, 1);
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.examples[0].premise, ["a", "man", "is", "\"", "sleeping", "\"", "."]);

    let jsonl = dir.path().join("pairs.jsonl");
    ds.write_jsonl(&jsonl).unwrap();
    let (back, _) = load_pairs(&jsonl, CorpusFormat::from_path(&jsonl)).unwrap();
    assert_eq!(back.examples, ds.examples);
}

#[test]
fn bad_label_is_a_data_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(
        &path,
        "{\"sentence1\":\"a b\",\"sentence2\":\"c d\",\"gold_label\":\"entailment\"}\n\
         {\"sentence1\":\"a b\",\"sentence2\":\"c d\",\"gold_label\":\"maybe\"}\n",
    )
    .unwrap();
    let err = load_pairs(&path, CorpusFormat::Jsonl).unwrap_err();
    assert!(matches!(err, Error::UnknownLabel { line: 2, .. }), "{err}");
    assert_eq!(err.class(), ErrorClass::Data);
    assert_eq!(
        load_pairs(dir.path().join("missing.jsonl"), CorpusFormat::Jsonl)
            .unwrap_err()
            .class(),
        ErrorClass::Data
    );
}

#[test]
fn audit_finds_the_planted_words() {
    let corpus = generate(&SynthConfig {
        n_train: 6_000,
        n_dev: 300,
        world: "cwb".parse().unwrap(),
        ..SynthConfig::default()
    })
    .unwrap();
    let stats = compute_word_label_stats(&corpus.train, 100);
    let words = select_contradiction_words(&stats, 0.5, 4).unwrap();
    assert!(!words.is_empty());
    for w in &words {
        assert!(DEFAULT_CWB_WORDS.contains(&w.as_str()), "unexpected word {w}");
    }
}

#[test]
fn train_checkpoint_and_reload_predict_identically() {
    let corpus = generate(&SynthConfig {
        n_train: 1_500,
        n_dev: 300,
        seed: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let words: Vec<String> = DEFAULT_CWB_WORDS.iter().map(|w| w.to_string()).collect();
    let ext = extract_cwb_balanced(&corpus.train, &corpus.dev_matched, &BalancedSetSpec::cwb(words, 20, 4)).unwrap();
    let plan = EnhancementPlan {
        bias_kind: BiasKind::Cwb,
        n_additional: 50,
        source: AugmentSource::Synthetic,
        seed: 4,
    };
    let train_ds = augment_synthetic(&ext.train, &plan, &default_cwb_rules()).unwrap();
    assert_eq!(train_ds.len(), ext.train.len() + 50);

    let vocab = build_vocab(&[&train_ds], 1);
    let tc = TrainConfig {
        lr: 0.005,
        max_epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut outcomes = Vec::new();
    for kind in [ModelKind::Baseline, ModelKind::Grl, ModelKind::Hex] {
        let config = ModelConfig {
            kind,
            encoder: small_encoder(),
            ..ModelConfig::default()
        };
        let model = Model::new(config, vocab.clone(), None, 4).unwrap();
        let out = train(model, &tc, &train_ds, &corpus.dev_mismatched).unwrap();
        assert_eq!(out.selection_history.len(), 2);
        assert!(out.best_epoch >= 1 && out.best_epoch <= 2);
        outcomes.push(out);
    }

    let dir = tempfile::tempdir().unwrap();
    for out in &outcomes {
        let path = dir.path().join(format!("{}.json", out.model.kind()));
        save_model(&out.model, &path, Some("digest")).unwrap();
        let (back, digest) = load_model(&path).unwrap();
        assert_eq!(digest.as_deref(), Some("digest"));
        let before = evaluate(&out.model, &ext.balanced, Some("bal-cwb".parse().unwrap())).unwrap();
        let after = evaluate(&back, &ext.balanced, Some("bal-cwb".parse().unwrap())).unwrap();
        assert_eq!(before, after);
        assert_eq!(before.n, 40);
        assert_eq!(before.n_hard, 20);
        // well above chance after two epochs on a learnable corpus
        assert!(evaluate(&back, &corpus.dev_matched, None).unwrap().accuracy > 0.4);
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let corpus = generate(&SynthConfig {
        n_train: 600,
        n_dev: 100,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = build_vocab(&[&corpus.train], 1);
    let run = || {
        let config = ModelConfig {
            kind: ModelKind::Hex,
            encoder: small_encoder(),
            ..ModelConfig::default()
        };
        let tc = TrainConfig {
            max_epochs: 1,
            seed: 8,
            ..TrainConfig::default()
        };
        train(
            Model::new(config, vocab.clone(), None, 8).unwrap(),
            &tc,
            &corpus.train,
            &corpus.dev_mismatched,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    for ((na, va), (nb, vb)) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(na, nb);
        assert_eq!(va, vb);
    }
}

#[test]
fn config_file_drives_model_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "[model]\nkind = \"grl\"\n\n[model.encoder]\nd_e = 6\nd_h = 5\nd_att = 6\nn_heads = 2\n\n[model.grl]\nvariant = \"sent\"\nlambda = 0.5\n",
    )
    .unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.model.kind, ModelKind::Grl);
    assert_eq!(cfg.model.grl.loss.lambda, 0.5);
    let corpus = generate(&SynthConfig {
        n_train: 50,
        n_dev: 10,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = Model::new(cfg.model.clone(), build_vocab(&[&corpus.train], 1), None, 0).unwrap();
    let emb = model.params.value(model.params.expect("emb"));
    assert_eq!(emb.ncols(), 6);
    let probs = model
        .probabilities(&corpus.dev_matched.iter().collect::<Vec<_>>(), 7)
        .unwrap();
    for p in probs {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(Label::from_index(3).is_none());
}
