//! Synthetic text/image world: vocabulary, seeded token embeddings, a
//! renderer from object sets to image vectors, and the two scorers.

mod vocab;
mod world;

pub use vocab::{Partition, VocabRecord, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, SEP, SEP_ID};
pub use world::{
    aes_score, aes_score_var, clip_score, clip_score_var, WorldEmbedding, WorldRecord,
    DEFAULT_DIM, DEFAULT_GAMMA, DEFAULT_RENDER_SIGMA, DEFAULT_RHO,
};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{Graph, Params, Tensor};
    use crate::error::Error;
    use crate::gradcheck::check_gradients;
    use crate::seed;

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    fn world(seed: u64, rho: f64) -> WorldEmbedding {
        let vocab = Vocabulary::new(
            &s(&["peace", "wisdom"]),
            &s(&["dove", "olive_branch", "owl", "book", "lamp"]),
            &s(&["a", "the", "in", "meadow"]),
            &s(&["oil_painting", "nostalgic"]),
        )
        .unwrap();
        let mut co = BTreeMap::new();
        co.insert("peace".to_string(), s(&["dove", "olive_branch"]));
        co.insert("wisdom".to_string(), s(&["owl", "book", "lamp"]));
        WorldEmbedding::new(vocab, co, DEFAULT_DIM, rho, seed).unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        clip_score(a, b).unwrap()
    }

    #[test]
    fn every_signature_is_unit() {
        for seed in 0..5 {
            let w = world(seed, DEFAULT_RHO);
            for id in 0..w.vocab().len() {
                if w.vocab().partition(id) != Partition::Special {
                    let n: f64 = w.vector(id).iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_object_prompt_is_its_signature() {
        let w = world(3, 1.0);
        let e = w.embed_text(&["dove"]).unwrap();
        assert!((cos(&e, w.token_vector("dove").unwrap()) - 1.0).abs() < 1e-12);
        assert_eq!(e, w.embed_text(&["dove", "dove"]).unwrap());
    }

    #[test]
    fn abstract_vector_sits_at_construction_angle() {
        for rho in [0.5, 1.0, 2.0] {
            let w = world(11, rho);
            for (c, objs) in w.concept_objects() {
                let e = w.embed_text(&[c.as_str()]).unwrap();
                let ideal = w.ideal_render(objs).unwrap();
                let expected = 1.0 / (1.0 + rho * rho).sqrt();
                assert!((cos(&e, &ideal) - expected).abs() < 1e-12, "{c} rho={rho}");
            }
        }
        let w = world(11, 1.0);
        let e = w.embed_text(&["peace"]).unwrap();
        let ideal = w.ideal_render(&["dove", "olive_branch"]).unwrap();
        assert!((cos(&e, &ideal) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn special_tokens_are_ignored_and_empty_rejected() {
        let w = world(1, 1.0);
        assert_eq!(
            w.embed_text(&[BOS, "owl", EOS]).unwrap(),
            w.embed_text(&["owl"]).unwrap()
        );
        assert!(matches!(w.embed_text(&[BOS, SEP]), Err(Error::EmptyPrompt)));
        assert!(matches!(w.embed_text(&["zebra"]), Err(Error::Vocab(_))));
    }

    #[test]
    fn render_examples() {
        let w = world(5, 1.0);
        assert_eq!(w.ideal_render(&["owl"]).unwrap(), w.token_vector("owl").unwrap());
        let r = w.ideal_render(&["owl", "book"]).unwrap();
        let n: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);

        // Direct vector-arithmetic oracle for the cosine with one signature.
        let (s1, s2) = (w.token_vector("owl").unwrap(), w.token_vector("book").unwrap());
        let inner: f64 = s1.iter().zip(s2).map(|(a, b)| a * b).sum();
        let sum_norm: f64 = s1.iter().zip(s2).map(|(a, b)| (a + b).powi(2)).sum::<f64>().sqrt();
        assert!((cos(&r, s1) - (1.0 + inner) / sum_norm).abs() < 1e-12);

        let empty: [&str; 0] = [];
        assert!(matches!(w.ideal_render(&empty), Err(Error::EmptyScene)));
        assert!(matches!(w.ideal_render(&["the"]), Err(Error::Vocab(_))));
    }

    #[test]
    fn render_noise_is_seeded() {
        let w = world(5, 1.0);
        let a = w.render(&["owl"], 0.05, &mut seed::rng(9)).unwrap();
        let b = w.render(&["owl"], 0.05, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, w.ideal_render(&["owl"]).unwrap());
    }

    #[test]
    fn scorer_examples() {
        let w = world(2, 1.0);
        let e = w.embed_text(&["lamp"]).unwrap();
        let i = w.ideal_render(&["lamp"]).unwrap();
        assert!((clip_score(&e, &i).unwrap() - 1.0).abs() < 1e-12);
        let i2: Vec<f64> = i.iter().map(|x| 2.0 * x).collect();
        assert!((clip_score(&e, &i2).unwrap() - clip_score(&e, &i).unwrap()).abs() < 1e-15);
        assert!(matches!(clip_score(&e, &vec![0.0; 16]), Err(Error::Domain(_))));

        assert_eq!(aes_score(&i, 4.0).unwrap(), 1.0);
        assert!((aes_score(&[0.0; 16], 4.0).unwrap() - (-4.0f64).exp()).abs() < 1e-15);
        let mut v = vec![0.0; 16];
        v[3] = 1.5;
        assert!((aes_score(&v, 4.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((aes_score(&[0.0; 16], 4.0).unwrap() - 0.018316).abs() < 1e-6);
    }

    #[test]
    fn relevance_gap_is_analytic() {
        let w = world(21, 1.0);
        for (c, objs) in w.concept_objects() {
            let ideal = w.ideal_render(objs).unwrap();
            let concrete = clip_score(&w.embed_text(objs).unwrap(), &ideal).unwrap();
            let abs = clip_score(&w.embed_text(&[c.as_str()]).unwrap(), &ideal).unwrap();
            assert!((concrete - abs - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_scorers_match_plain_and_gradcheck() {
        for seed in 0..20u64 {
            let w = world(seed, 1.0);
            let text = w.embed_text(&["peace", "in", "meadow"]).unwrap();
            let mut rng = seed::rng(seed);
            let img = w.render(&["dove", "owl"], 0.3, &mut rng).unwrap();
            let mut params = Params::new();
            params.insert("img", Tensor::vector(img.clone()).unwrap());
            let objective = |p: &Params| {
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let t = g.constant(Tensor::vector(text.clone())?);
                let c = clip_score_var(&mut g, t, b.var("img"))?;
                let a = aes_score_var(&mut g, b.var("img"), DEFAULT_GAMMA)?;
                let s = g.add(c, a)?;
                Ok((g, s))
            };
            let (mut g, s) = objective(&params).unwrap();
            let plain = clip_score(&text, &img).unwrap() + aes_score(&img, DEFAULT_GAMMA).unwrap();
            assert!((g.value(s).item().unwrap() - plain).abs() < 1e-12);
            let grads = g.backward(s).unwrap();
            let report = check_gradients(
                |p| objective(p).and_then(|(g, s)| g.value(s).item()),
                &params,
                &grads,
                16,
                1e-6,
                seed,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn same_seed_same_world_and_json_round_trip() {
        let a = world(77, 1.0);
        assert_eq!(a, world(77, 1.0));
        assert_ne!(a.vector(3), world(78, 1.0).vector(3));
        let json = a.to_json().unwrap();
        let back = WorldEmbedding::from_json(&json).unwrap();
        assert_eq!(back, a);
        assert!(!json.contains("vectors"));
    }

    proptest! {
        #[test]
        fn embed_is_permutation_and_duplication_invariant(
            picks in proptest::collection::vec(3usize..16, 1..10),
            shift in 0usize..10,
        ) {
            let w = world(4, 1.0);
            let mut shuffled = picks.clone();
            shuffled.rotate_left(shift % picks.len());
            shuffled.reverse();
            let mut doubled = picks.clone();
            doubled.extend_from_slice(&picks);
            let e = w.embed_ids(&picks).unwrap();
            prop_assert_eq!(&e, &w.embed_ids(&shuffled).unwrap());
            prop_assert_eq!(&e, &w.embed_ids(&doubled).unwrap());
        }
    }
}
