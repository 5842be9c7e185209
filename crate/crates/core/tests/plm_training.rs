//! Seeded SFT runs on the shipped lexicon.

use std::time::Instant;

use poac_core::lexicon::{build_dataset, builtin_modifiers, validate_rewrite, Lexicon};
use poac_core::plm::{rewrite, sft_train, Decode, PlmConfig, PlmModel};

#[test]
fn single_pair_memorization() {
    let lex = Lexicon::builtin();
    let pool = builtin_modifiers();
    let vocab = lex.vocabulary(&pool).unwrap();
    let pair = build_dataset(&lex, &pool, 7).unwrap().pairs[0].clone();
    let cfg = PlmConfig {
        epochs: 500,
        batch_size: 1,
        ..PlmConfig::default()
    };
    let mut m = PlmModel::init(cfg.arch(vocab.len()), 7).unwrap();
    let t = Instant::now();
    let curve = sft_train(&mut m, &vocab, std::slice::from_ref(&pair), &cfg, 7, &mut |_, _| Ok(())).unwrap();
    let ln_v = (vocab.len() as f64).ln();
    let last = *curve.last().unwrap();
    println!("memorization: first {:.4} last {last:.3e} ({:?})", curve[0], t.elapsed());
    assert!(last < 0.01 * ln_v);
    let out = rewrite(&m, &vocab, &pair.source, Decode::Greedy).unwrap();
    assert!(!out.truncated);
    assert_eq!(out.tokens, pair.target);
}

#[test]
fn full_corpus_training() {
    let lex = Lexicon::builtin();
    let pool = builtin_modifiers();
    let vocab = lex.vocabulary(&pool).unwrap();
    let corpus = build_dataset(&lex, &pool, 7).unwrap().pairs;
    let cfg = PlmConfig::default();
    let mut m = PlmModel::init(cfg.arch(vocab.len()), 7).unwrap();
    let t = Instant::now();
    let curve = sft_train(&mut m, &vocab, &corpus, &cfg, 7, &mut |_, _| Ok(())).unwrap();
    println!("curve {:?} ({:?})", curve, t.elapsed());
    let drop = 1.0 - curve.last().unwrap() / curve[0];
    println!("relative decrease {drop:.4}");
    assert!(drop >= 0.95);

    let mut ok = 0;
    let sources: Vec<_> = lex.entries.iter().flat_map(|e| e.source_prompts.iter()).collect();
    for src in &sources {
        let out = rewrite(&m, &vocab, src, Decode::Greedy).unwrap();
        let scene_len = out.tokens.iter().filter(|t| !pool.contains(t)).count();
        let scene = out.tokens[..scene_len].join(" ");
        if validate_rewrite(&scene, &vocab).is_ok() && !out.truncated {
            ok += 1;
        }
    }
    println!("valid rewrites {ok}/{}", sources.len());
    assert!(ok as f64 >= 0.9 * sources.len() as f64);
}
