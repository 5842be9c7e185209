//! Seeded ReFL run on top of a pretrained denoiser.

use std::time::Instant;

use poac_core::diffusion::{dataset_loss, pretrain, DiffusionConfig, EpsArch, EpsNet, NoiseSchedule, PretrainSet, ScheduleConfig};
use poac_core::lexicon::{build_dataset, builtin_modifiers, Lexicon};
use poac_core::refl::{refl_finetune, ReflConfig, ReflPrompt, DESK_LAMBDA, PAPER_LAMBDA};
use poac_core::reward::{total_reward, DiffusionGenerator, RewardConfig, WorldScorer};
use poac_core::seed;

#[test]
fn refl_raises_reward() {
    let lex = Lexicon::builtin();
    let pool = builtin_modifiers();
    let world = lex.world(&pool, 16, 1.0, 7).unwrap();
    let corpus = build_dataset(&lex, &pool, 7).unwrap().pairs;
    let dcfg = DiffusionConfig::default();
    let data = PretrainSet::build(&world, &corpus, dcfg.render_sigma, 7).unwrap();
    let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    let mut base = EpsNet::init(EpsArch { dim: 16, hidden: dcfg.hidden }, 7).unwrap();
    pretrain(&mut base, &s, &data, &dcfg, 7, &mut |_, _| Ok(())).unwrap();
    let prompts: Vec<ReflPrompt> = corpus.iter().map(|p| ReflPrompt::from_pair(&world, p).unwrap()).collect();
    let held: Vec<_> = corpus.iter().step_by(9).collect();
    let rcfg = RewardConfig { n_samples: 16, ..RewardConfig::default() };
    let score = |net: &EpsNet| {
        let gen = DiffusionGenerator { net, schedule: &s, world: &world };
        let sc = WorldScorer { world: &world, gamma: rcfg.gamma };
        let mut tot = (0.0, 0.0, 0.0);
        for (i, p) in held.iter().enumerate() {
            let c = RewardConfig { seed: seed::derive(11, &[i as u64]), ..rcfg.clone() };
            let b = total_reward(&sc, &gen, &p.source, &p.target, &c).unwrap();
            tot.0 += b.total;
            tot.1 += b.rel;
            tot.2 += b.aes;
        }
        let n = held.len() as f64;
        (tot.0 / n, tot.1 / n, tot.2 / n)
    };
    let r0 = score(&base);
    let l0 = dataset_loss(&base, &s, &data, 2, 5).unwrap();
    let run = |lambda: f64| {
        let cfg = ReflConfig { lambda, ..ReflConfig::default() };
        let mut net = base.clone();
        let t = Instant::now();
        let curve = refl_finetune(&mut net, &s, &prompts, &data, &rcfg, &cfg, 7, &mut |_, _| Ok(())).unwrap();
        assert_eq!(curve.len(), cfg.steps);
        let r1 = score(&net);
        let l1 = dataset_loss(&net, &s, &data, 2, 5).unwrap();
        println!(
            "lambda {lambda}: R {:.4}->{:.4} (rel {:.4}->{:.4} aes {:.4}->{:.4}) L_pre {l0:.4}->{l1:.4} ({:?})",
            r0.0, r1.0, r0.1, r1.1, r0.2, r1.2, t.elapsed()
        );
        (r1.0 - r0.0, l1 / l0 - 1.0)
    };
    let (gain, degradation) = run(DESK_LAMBDA);
    assert!(gain >= 0.02, "reward gain {gain}");
    assert!(degradation < 0.2, "L_pre degradation {degradation}");

    // The published weight is too small to move the reward here.
    let (paper_gain, _) = run(PAPER_LAMBDA);
    assert!(paper_gain < gain);
}
