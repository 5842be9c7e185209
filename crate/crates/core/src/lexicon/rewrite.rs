use rand::seq::index::sample;
use rand::Rng as _;

use super::dataset::Provenance;
use super::{ConceptEntry, SLOT};
use crate::error::{Error, Result};
use crate::seed;

pub const K_MIN: usize = 1;
pub const K_MAX: usize = 3;

/// Fills the scene template with its objects, in order.
pub fn oracle_rewrite(entry: &ConceptEntry, source_index: usize, scene_index: usize) -> Result<Vec<String>> {
    if source_index >= entry.source_prompts.len() {
        return Err(Error::Index(format!(
            "source {source_index} of {} for `{}`",
            entry.source_prompts.len(),
            entry.concept
        )));
    }
    let scene = entry.scenes.get(scene_index).ok_or_else(|| {
        Error::Index(format!(
            "scene {scene_index} of {} for `{}`",
            entry.scenes.len(),
            entry.concept
        ))
    })?;
    if !(2..=3).contains(&scene.objects.len()) {
        return Err(Error::Template(format!(
            "scene of `{}` has {} objects, expected 2 or 3",
            entry.concept,
            scene.objects.len()
        )));
    }
    let slots = scene.template.iter().filter(|t| *t == SLOT).count();
    if slots != scene.objects.len() {
        return Err(Error::Template(format!(
            "template has {slots} slots for {} objects",
            scene.objects.len()
        )));
    }
    let mut objects = scene.objects.iter();
    let out: Vec<String> = scene
        .template
        .iter()
        .map(|t| {
            if t == SLOT {
                objects.next().expect("slot count checked").clone()
            } else {
                t.clone()
            }
        })
        .collect();
    if out.contains(&entry.concept) {
        return Err(Error::Template(format!("template for `{}` names the concept", entry.concept)));
    }
    Ok(out)
}

/// Appends `k` distinct modifiers, `k` uniform on `[k_min, k_max]`, drawn
/// without replacement from `pool` under `rng_seed`.
pub fn inject_modifiers(
    target: &[String],
    pool: &[String],
    rng_seed: u64,
    k_min: usize,
    k_max: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    if pool.is_empty() {
        return Err(Error::Pool("modifier pool is empty".into()));
    }
    if k_min == 0 || k_min > k_max || k_max > pool.len() {
        return Err(Error::Pool(format!(
            "k range [{k_min}, {k_max}] invalid for a pool of {}",
            pool.len()
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let k = rng.random_range(k_min..=k_max);
    let chosen: Vec<String> = sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    let mut out = target.to_vec();
    out.extend(chosen.iter().cloned());
    Ok((out, chosen))
}

/// Produces a target (without modifiers) for one (source, scene) cell.
pub trait Rewriter {
    fn rewrite(
        &self,
        entry: &ConceptEntry,
        source_index: usize,
        scene_index: usize,
    ) -> Result<(Vec<String>, Provenance)>;
}

/// The offline, deterministic rewriter.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleRewriter;

impl Rewriter for OracleRewriter {
    fn rewrite(
        &self,
        entry: &ConceptEntry,
        source_index: usize,
        scene_index: usize,
    ) -> Result<(Vec<String>, Provenance)> {
        Ok((oracle_rewrite(entry, source_index, scene_index)?, Provenance::Oracle))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::{Lexicon, Scene};

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    fn peace() -> ConceptEntry {
        ConceptEntry {
            concept: "peace".into(),
            source_prompts: vec![
                s(&["the", "essence", "of", "peace"]),
                s(&["peace"]),
                s(&["a", "peace"]),
            ],
            scenes: vec![Scene {
                template: s(&["a", "meadow", "with", SLOT, "and", SLOT]),
                objects: s(&["dove", "olive_branch"]),
            }],
        }
    }

    #[test]
    fn oracle_fills_slots() {
        let t = oracle_rewrite(&peace(), 0, 0).unwrap();
        assert_eq!(t, s(&["a", "meadow", "with", "dove", "and", "olive_branch"]));
        assert!(!t.contains(&"peace".to_string()));
        assert_eq!(t, oracle_rewrite(&peace(), 0, 0).unwrap());
    }

    #[test]
    fn oracle_errors() {
        let mut e = peace();
        assert!(matches!(oracle_rewrite(&e, 3, 0), Err(Error::Index(_))));
        assert!(matches!(oracle_rewrite(&e, 0, 1), Err(Error::Index(_))));
        e.scenes[0].objects = s(&["dove"]);
        e.scenes[0].template = s(&["a", SLOT]);
        assert!(matches!(oracle_rewrite(&e, 0, 0), Err(Error::Template(_))));
        let mut e = peace();
        e.scenes[0].template.push(SLOT.into());
        assert!(matches!(oracle_rewrite(&e, 0, 0), Err(Error::Template(_))));
    }

    #[test]
    fn every_builtin_cell_rewrites() {
        let lex = Lexicon::builtin();
        for e in &lex.entries {
            for si in 0..3 {
                for sc in 0..e.scenes.len() {
                    let t = oracle_rewrite(e, si, sc).unwrap();
                    for o in &e.scenes[sc].objects {
                        assert!(t.contains(o));
                    }
                    assert!(!t.contains(&e.concept));
                }
            }
        }
    }

    #[test]
    fn modifier_examples() {
        let target = s(&["a", "dove"]);
        let (out, chosen) = inject_modifiers(&target, &s(&["oil_painting"]), 5, 1, 1).unwrap();
        assert_eq!(out, s(&["a", "dove", "oil_painting"]));
        assert_eq!(chosen, s(&["oil_painting"]));

        let pool = crate::lexicon::builtin_modifiers();
        assert_eq!(
            inject_modifiers(&target, &pool, 42, 1, 3).unwrap(),
            inject_modifiers(&target, &pool, 42, 1, 3).unwrap()
        );
        assert!(matches!(inject_modifiers(&target, &[], 1, 1, 3), Err(Error::Pool(_))));
        assert!(matches!(inject_modifiers(&target, &pool[..2], 1, 1, 3), Err(Error::Pool(_))));
    }

    #[test]
    fn modifiers_are_distinct_suffix_within_k_range() {
        let pool = crate::lexicon::builtin_modifiers();
        let target = s(&["a", "dove"]);
        for seed in 0..500 {
            let (out, chosen) = inject_modifiers(&target, &pool, seed, K_MIN, K_MAX).unwrap();
            assert!((K_MIN..=K_MAX).contains(&chosen.len()));
            let distinct: std::collections::BTreeSet<_> = chosen.iter().collect();
            assert_eq!(distinct.len(), chosen.len());
            assert_eq!(&out[..2], &target[..]);
            assert_eq!(&out[2..], &chosen[..]);
        }
    }

    #[test]
    fn single_draw_frequencies_are_uniform() {
        // 99% binomial interval for p = 1/6, n = 1000 is about [0.136, 0.197].
        let pool = s(&["m0", "m1", "m2", "m3", "m4", "m5"]);
        let mut counts = [0usize; 6];
        for seed in 0..1000u64 {
            let (_, chosen) = inject_modifiers(&[], &pool, seed, 1, 1).unwrap();
            counts[chosen[0][1..].parse::<usize>().unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((0.13..=0.21).contains(&f), "{counts:?}");
        }
    }

    mod props {
        use super::*;
        use crate::lexicon::builtin_modifiers;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn injected_modifiers_are_a_distinct_pool_suffix(seed_ in any::<u64>(), k_min in 1usize..4, extra in 0usize..3) {
                let pool = builtin_modifiers();
                let k_max = (k_min + extra).min(pool.len());
                let target = s(&["a", "dove", "and", "a", "owl"]);
                let (out, chosen) = inject_modifiers(&target, &pool, seed_, k_min, k_max).unwrap();
                prop_assert!((k_min..=k_max).contains(&chosen.len()));
                prop_assert_eq!(&out[..target.len()], &target[..]);
                prop_assert_eq!(&out[target.len()..], &chosen[..]);
                let distinct: std::collections::BTreeSet<_> = chosen.iter().collect();
                prop_assert_eq!(distinct.len(), chosen.len());
                prop_assert!(chosen.iter().all(|m| pool.contains(m)));
            }
        }
    }
}
