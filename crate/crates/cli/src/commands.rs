//! One function per pipeline stage. Each reads its prerequisites, writes its
//! artifacts atomically and leaves a manifest beside the primary artifact.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use poac_core::diffusion::{pretrain, sample_n, EpsArch, EpsNet, PretrainSet};
use poac_core::eval::{compare_table, eval_prompts, evaluate_config, holdout_split, ConfigId, EvalPrompt, ScoreRow, Verdict};
use poac_core::lexicon::{
    build_dataset_with, from_jsonl, to_jsonl, validate_pair, Lexicon, OracleRewriter, PromptPair, RemoteRewriter, Rewriter,
};
use poac_core::plm::{rewrite, sft_train, Decode, PlmArch, PlmModel};
use poac_core::refl::{curve_csv, refl_finetune, ReflPrompt};
use poac_core::reward::{DiffusionGenerator, WorldScorer};
use poac_core::seed;
use poac_core::textworld::{aes_score, clip_score, WorldEmbedding};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::store::{config_hash, read_text, write_atomic, Checkpoint, Manifest, Module};

pub const BUILD_DATA: &str = "build-data";
pub const TRAIN_PLM: &str = "train-plm";
pub const PRETRAIN_DIFFUSION: &str = "pretrain-diffusion";
pub const REFL_FINETUNE: &str = "refl-finetune";
pub const OPTIMIZE_PROMPT: &str = "optimize-prompt";
pub const GENERATE: &str = "generate";
pub const EVALUATE: &str = "evaluate";

#[repr(u64)]
#[derive(Clone, Copy)]
enum Stage {
    World = 1,
    Data,
    Plm,
    Render,
    Diffusion,
    Refl,
    Eval,
    Generate,
}

fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    seed::derive(cfg.seed, &[stage as u64])
}

/// Config hashes chained along the stage dependencies.
pub struct Hashes {
    pub data: String,
    pub plm: String,
    pub diffusion: String,
    pub refl: String,
}

impl Hashes {
    pub fn of(cfg: &RunConfig) -> Result<Self> {
        let lex = cfg.lexicon()?;
        let pool = cfg.modifiers()?;
        let data = config_hash(&(cfg.seed, &cfg.world, &cfg.remote.endpoint, &lex, &pool))?;
        let plm = config_hash(&(&data, &cfg.plm, cfg.eval.holdout))?;
        let diffusion = config_hash(&(&data, &cfg.schedule, &cfg.diffusion, cfg.eval.holdout))?;
        let refl = config_hash(&(&diffusion, &cfg.refl, &cfg.reward))?;
        Ok(Self {
            data,
            plm,
            diffusion,
            refl,
        })
    }
}

fn load_world(cfg: &RunConfig) -> Result<WorldEmbedding> {
    Ok(WorldEmbedding::from_json(&read_text(&cfg.paths.world(), BUILD_DATA)?)?)
}

fn load_corpus(cfg: &RunConfig) -> Result<Vec<PromptPair>> {
    Ok(from_jsonl(&read_text(&cfg.paths.corpus, BUILD_DATA)?)?)
}

/// The corpus minus held-out concepts when `eval.holdout` is set.
fn training_pairs(cfg: &RunConfig, lex: &Lexicon, corpus: Vec<PromptPair>) -> Vec<PromptPair> {
    if !cfg.eval.holdout {
        return corpus;
    }
    let (_, test) = holdout_split(lex);
    corpus.into_iter().filter(|p| !test.contains(&p.concept)).collect()
}

fn load_plm(cfg: &RunConfig, h: &Hashes, force: bool) -> Result<PlmModel> {
    let ck: Checkpoint<PlmArch> = Checkpoint::load(&cfg.paths.plm(), TRAIN_PLM, Module::Plm, &h.plm, force)?;
    Ok(PlmModel::from_params(ck.arch, ck.params)?)
}

pub fn load_net(path: &Path, producer: &'static str, hash: &str, force: bool) -> Result<EpsNet> {
    let ck: Checkpoint<EpsArch> = Checkpoint::load(path, producer, Module::Diffusion, hash, force)?;
    Ok(EpsNet::from_params(ck.arch, ck.params)?)
}

fn curve_lines(header: &str, values: &[f64], first: usize) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{},{v:.6e}\n", i + first));
    }
    s
}

fn finish(mut m: Manifest, artifact: &Path, start: Instant) -> Result<()> {
    m.wall_time_s = start.elapsed().as_secs_f64();
    m.save(artifact)?;
    Ok(())
}

pub fn build_data(cfg: &RunConfig) -> Result<String> {
    let start = Instant::now();
    let lex = cfg.lexicon()?;
    let pool = cfg.modifiers()?;
    let world = lex.world(&pool, cfg.world.dim, cfg.world.rho, stage_seed(cfg, Stage::World))?;
    let remote;
    let rewriter: &dyn Rewriter = if cfg.remote.endpoint.is_some() {
        remote = RemoteRewriter::new(cfg.remote.clone(), world.vocab().clone());
        &remote
    } else {
        &OracleRewriter
    };
    let ds = build_dataset_with(&lex, &pool, stage_seed(cfg, Stage::Data), rewriter)?;
    for (i, p) in ds.pairs.iter().enumerate() {
        validate_pair(p, world.vocab()).map_err(|e| CliError::Core(poac_core::Error::RejectedRewrite(format!("pair {i}: {e}"))))?;
    }
    write_atomic(&cfg.paths.corpus, to_jsonl(&ds.pairs)?.as_bytes())?;
    write_atomic(&cfg.paths.world(), world.to_json()?.as_bytes())?;

    let mut m = Manifest::new(BUILD_DATA, Hashes::of(cfg)?.data, cfg.seed);
    for p in [&cfg.paths.lexicon, &cfg.paths.modifiers].into_iter().flatten() {
        m.input(p)?;
    }
    m.output(&cfg.paths.corpus)?;
    m.output(&cfg.paths.world())?;
    m.note("pairs", ds.pairs.len())?;
    m.note("recycled_scenes", ds.recycled_scenes)?;
    m.note("rejected", &ds.rejected)?;
    finish(m, &cfg.paths.corpus, start)?;
    Ok(format!(
        "{} pairs ({} rejected, {} recycled scenes) -> {}",
        ds.pairs.len(),
        ds.rejected.len(),
        ds.recycled_scenes,
        cfg.paths.corpus.display()
    ))
}

pub fn train_plm(cfg: &RunConfig) -> Result<String> {
    let start = Instant::now();
    let world = load_world(cfg)?;
    let lex = cfg.lexicon()?;
    let pairs = training_pairs(cfg, &lex, load_corpus(cfg)?);
    let h = Hashes::of(cfg)?;
    let vocab = world.vocab();
    let s = stage_seed(cfg, Stage::Plm);
    let mut model = PlmModel::init(cfg.plm.arch(vocab.len()), s)?;
    let ckpt = |m: &PlmModel| Checkpoint::new(Module::Plm, cfg.seed, h.plm.clone(), m.arch, m.params.clone());
    let curve = sft_train(&mut model, vocab, &pairs, &cfg.plm, s, &mut |epoch, m| {
        let path = cfg.paths.checkpoints.join(format!("plm.epoch-{epoch}.json"));
        ckpt(m).save(&path).map_err(|e| poac_core::Error::Checkpoint(e.to_string()))
    })?;
    let out = cfg.paths.plm();
    ckpt(&model).save(&out)?;
    let report = cfg.paths.report("plm_curve.csv");
    write_atomic(&report, curve_lines("epoch,loss", &curve, 0).as_bytes())?;

    let mut m = Manifest::new(TRAIN_PLM, h.plm, cfg.seed);
    m.input(&cfg.paths.corpus)?;
    m.input(&cfg.paths.world())?;
    m.output(&out)?;
    m.output(&report)?;
    m.note("final_loss", curve.last())?;
    finish(m, &out, start)?;
    Ok(format!(
        "plm loss {:.4} -> {:.4} over {} epochs -> {}",
        curve[0],
        curve.last().copied().unwrap_or(curve[0]),
        cfg.plm.epochs,
        out.display()
    ))
}

/// World, training pairs and the rendered pretraining set, as the
/// diffusion stages see them.
pub fn training_data(cfg: &RunConfig) -> Result<(WorldEmbedding, Vec<PromptPair>, PretrainSet)> {
    let world = load_world(cfg)?;
    let lex = cfg.lexicon()?;
    let pairs = training_pairs(cfg, &lex, load_corpus(cfg)?);
    let data = PretrainSet::build(&world, &pairs, cfg.diffusion.render_sigma, stage_seed(cfg, Stage::Render))?;
    Ok((world, pairs, data))
}

pub fn pretrain_diffusion(cfg: &RunConfig) -> Result<String> {
    let start = Instant::now();
    let (world, _, data) = training_data(cfg)?;
    let h = Hashes::of(cfg)?;
    let s = cfg.schedule()?;
    let st = stage_seed(cfg, Stage::Diffusion);
    let arch = EpsArch {
        dim: world.dim(),
        hidden: cfg.diffusion.hidden,
    };
    let mut net = EpsNet::init(arch, st)?;
    let ckpt = |n: &EpsNet| Checkpoint::new(Module::Diffusion, cfg.seed, h.diffusion.clone(), n.arch, n.params.clone());
    let curve = pretrain(&mut net, &s, &data, &cfg.diffusion, st, &mut |step, n| {
        let path = cfg.paths.checkpoints.join(format!("diffusion.step-{step}.json"));
        ckpt(n).save(&path).map_err(|e| poac_core::Error::Checkpoint(e.to_string()))
    })?;
    let out = cfg.paths.diffusion();
    ckpt(&net).save(&out)?;
    let report = cfg.paths.report("pretrain_curve.csv");
    write_atomic(&report, curve_lines("step,loss", &curve, 1).as_bytes())?;

    let mut m = Manifest::new(PRETRAIN_DIFFUSION, h.diffusion, cfg.seed);
    m.input(&cfg.paths.corpus)?;
    m.input(&cfg.paths.world())?;
    m.output(&out)?;
    m.output(&report)?;
    finish(m, &out, start)?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    Ok(format!(
        "denoising loss {:.4} -> {:.4} (last-100 mean) over {} steps -> {}",
        curve.first().copied().unwrap_or(f64::NAN),
        tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        cfg.diffusion.steps,
        out.display()
    ))
}

pub fn refl_finetune_cmd(cfg: &RunConfig, force: bool) -> Result<String> {
    let start = Instant::now();
    let h = Hashes::of(cfg)?;
    let mut net = load_net(&cfg.paths.diffusion(), PRETRAIN_DIFFUSION, &h.diffusion, force)?;
    let (world, pairs, data) = training_data(cfg)?;
    let prompts = pairs
        .iter()
        .map(|p| ReflPrompt::from_pair(&world, p))
        .collect::<poac_core::Result<Vec<_>>>()?;
    let s = cfg.schedule()?;
    let ckpt = |n: &EpsNet| Checkpoint::new(Module::Diffusion, cfg.seed, h.refl.clone(), n.arch, n.params.clone());
    let curve = refl_finetune(
        &mut net,
        &s,
        &prompts,
        &data,
        &cfg.reward,
        &cfg.refl,
        stage_seed(cfg, Stage::Refl),
        &mut |step, n| {
            let path = cfg.paths.checkpoints.join(format!("refl.step-{step}.json"));
            ckpt(n).save(&path).map_err(|e| poac_core::Error::Checkpoint(e.to_string()))
        },
    )?;
    let out = cfg.paths.refl();
    ckpt(&net).save(&out)?;
    let report = cfg.paths.report("refl_curve.csv");
    write_atomic(&report, curve_csv(&curve).as_bytes())?;

    let mut m = Manifest::new(REFL_FINETUNE, h.refl, cfg.seed);
    m.input(&cfg.paths.diffusion())?;
    m.input(&cfg.paths.corpus)?;
    m.input(&cfg.paths.world())?;
    m.output(&out)?;
    m.output(&report)?;
    m.note("skipped_steps", cfg.refl.steps - curve.len())?;
    finish(m, &out, start)?;
    let window = |c: &[poac_core::refl::ReflStep]| c.iter().map(|s| s.reward).sum::<f64>() / c.len().max(1) as f64;
    let k = curve.len().min(50);
    Ok(format!(
        "refl reward {:.4} -> {:.4} (first/last {k}-step means) -> {}",
        window(&curve[..k]),
        window(&curve[curve.len() - k..]),
        out.display()
    ))
}

fn tokenize(world: &WorldEmbedding, text: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = text.split_whitespace().map(String::from).collect();
    world.vocab().encode(&tokens)?;
    Ok(tokens)
}

fn optimize(cfg: &RunConfig, world: &WorldEmbedding, plm: &PlmModel, text: &str, top_k: Option<usize>) -> Result<Vec<String>> {
    let source = tokenize(world, text)?;
    let decode = match top_k {
        Some(k) => Decode::TopK {
            k,
            seed: stage_seed(cfg, Stage::Generate),
        },
        None => Decode::Greedy,
    };
    let out = rewrite(plm, world.vocab(), &source, decode)?;
    if out.truncated {
        log::warn!("rewrite hit max_len before <eos>");
    }
    Ok(out.tokens)
}

pub fn optimize_prompt(cfg: &RunConfig, text: &str, top_k: Option<usize>, force: bool) -> Result<String> {
    let h = Hashes::of(cfg)?;
    let plm = load_plm(cfg, &h, force)?;
    let world = load_world(cfg)?;
    Ok(optimize(cfg, &world, &plm, text, top_k)?.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Model {
    #[default]
    Pretrained,
    Refl,
}

#[derive(Serialize)]
struct Generated<'a> {
    prompt: &'a [String],
    sample: usize,
    clip: f64,
    aes: f64,
    image: &'a [f64],
}

/// JSON lines of generated images with their scores.
pub fn generate(cfg: &RunConfig, text: &str, n: usize, model: Model, optimize_first: bool, force: bool) -> Result<String> {
    let h = Hashes::of(cfg)?;
    let net = match model {
        Model::Pretrained => load_net(&cfg.paths.diffusion(), PRETRAIN_DIFFUSION, &h.diffusion, force)?,
        Model::Refl => load_net(&cfg.paths.refl(), REFL_FINETUNE, &h.refl, force)?,
    };
    let world = load_world(cfg)?;
    let prompt = if optimize_first {
        optimize(cfg, &world, &load_plm(cfg, &h, force)?, text, None)?
    } else {
        tokenize(&world, text)?
    };
    let c = world.embed_text(&prompt)?;
    let s = cfg.schedule()?;
    let imgs = sample_n(&net, &s, &c, n, &mut seed::derived_rng(cfg.seed, &[Stage::Generate as u64]))?;
    let mut out = String::new();
    for k in 0..n {
        let image = imgs.row(k);
        let line = Generated {
            prompt: &prompt,
            sample: k,
            clip: clip_score(&c, image)?,
            aes: aes_score(image, cfg.reward.gamma)?,
            image,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub rows: Vec<ScoreRow>,
    pub verdict: Verdict,
    pub prompts: Vec<EvalPrompt>,
    #[serde(skip)]
    pub csv: String,
}

pub fn evaluate(cfg: &RunConfig, force: bool) -> Result<EvalReport> {
    let start = Instant::now();
    let h = Hashes::of(cfg)?;
    let base = load_net(&cfg.paths.diffusion(), PRETRAIN_DIFFUSION, &h.diffusion, force)?;
    let plm = load_plm(cfg, &h, force)?;
    let tuned = load_net(&cfg.paths.refl(), REFL_FINETUNE, &h.refl, force)?;
    let world = load_world(cfg)?;
    let lex = cfg.lexicon()?;
    let s = cfg.schedule()?;
    let ecfg = poac_core::eval::EvalConfig {
        seed: stage_seed(cfg, Stage::Eval),
        ..cfg.eval.clone()
    };
    let prompts = eval_prompts(&lex, &plm, world.vocab(), &world, &ecfg)?;
    let scorer = WorldScorer {
        world: &world,
        gamma: cfg.reward.gamma,
    };
    let mut rows = Vec::new();
    for &id in &ecfg.configurations {
        let net = if id == ConfigId::PoacRefl { &tuned } else { &base };
        let gen = DiffusionGenerator {
            net,
            schedule: &s,
            world: &world,
        };
        rows.push(evaluate_config(id, &prompts, &gen, &scorer, &cfg.reward, &ecfg)?);
    }
    let (csv, verdict) = compare_table(&rows)?;
    let report = EvalReport {
        rows,
        verdict,
        prompts,
        csv,
    };
    let csv_path = cfg.paths.report("report.csv");
    let json_path = cfg.paths.report("report.json");
    write_atomic(&csv_path, report.csv.as_bytes())?;
    write_atomic(&json_path, serde_json::to_string_pretty(&report)?.as_bytes())?;

    let mut m = Manifest::new(EVALUATE, config_hash(&(&h.plm, &h.refl, &cfg.eval))?, cfg.seed);
    for p in [cfg.paths.plm(), cfg.paths.diffusion(), cfg.paths.refl(), cfg.paths.world()] {
        m.input(&p)?;
    }
    m.output(&csv_path)?;
    m.output(&json_path)?;
    m.note("verdict", &report.verdict)?;
    finish(m, &csv_path, start)?;
    Ok(report)
}
