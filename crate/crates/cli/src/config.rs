//! Run configuration: one TOML or JSON file, then `--set` overrides, then
//! the seed from `POAC_SEED` or `--seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use poac_core::diffusion::{DiffusionConfig, NoiseSchedule, ScheduleConfig};
use poac_core::eval::EvalConfig;
use poac_core::lexicon::{builtin_modifiers, load_modifiers, Lexicon, RemoteConfig};
use poac_core::plm::PlmConfig;
use poac_core::refl::ReflConfig;
use poac_core::reward::RewardConfig;
use poac_core::textworld::{DEFAULT_DIM, DEFAULT_RHO};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "POAC_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Lexicon JSON; the shipped lexicon when absent.
    pub lexicon: Option<PathBuf>,
    /// Modifier pool, one per line; the shipped pool when absent.
    pub modifiers: Option<PathBuf>,
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self::under(Path::new("out"))
    }
}

impl Paths {
    pub fn under(dir: &Path) -> Self {
        Self {
            lexicon: None,
            modifiers: None,
            corpus: dir.join("corpus.jsonl"),
            checkpoints: dir.join("checkpoints"),
            reports: dir.join("reports"),
        }
    }

    pub fn world(&self) -> PathBuf {
        self.corpus.with_file_name("world.json")
    }

    pub fn plm(&self) -> PathBuf {
        self.checkpoints.join("plm.json")
    }

    pub fn diffusion(&self) -> PathBuf {
        self.checkpoints.join("diffusion.json")
    }

    pub fn refl(&self) -> PathBuf {
        self.checkpoints.join("refl.json")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dim: usize,
    pub rho: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            rho: DEFAULT_RHO,
        }
    }
}

/// Everything a pipeline run depends on. The `seed` fields inside `reward`
/// and `eval` are replaced by values derived from the run seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub world: WorldConfig,
    pub remote: RemoteConfig,
    pub plm: PlmConfig,
    pub schedule: ScheduleConfig,
    pub diffusion: DiffusionConfig,
    pub reward: RewardConfig,
    pub refl: ReflConfig,
    pub eval: EvalConfig,
}

fn parse_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::config(".", format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::config(".", format!("{}: {e}", path.display())))
    }
}

/// Sets `a.b.c = value` in a JSON tree; `value` is parsed as JSON when it
/// can be and kept as a string otherwise.
fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(assignment, "override must look like key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => return Err(CliError::config(parts[..i].join("."), "not a table")),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Loads `file` (or defaults), applies `sets`, the seed environment
    /// variable and `seed_flag` in that order, then validates.
    pub fn load(file: Option<&Path>, sets: &[String], seed_flag: Option<u64>) -> Result<Self> {
        let mut tree = match file {
            Some(p) => parse_file(p)?,
            None => Value::Object(Default::default()),
        };
        for s in sets {
            apply_override(&mut tree, s)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(&tree).map_err(|e| {
            let key = e.path().to_string();
            CliError::config(key, e.into_inner().to_string())
        })?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .parse()
                .map_err(|_| CliError::config(SEED_ENV, format!("`{v}` is not a u64")))?;
        }
        if let Some(s) = seed_flag {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("paths.lexicon", &self.paths.lexicon), ("paths.modifiers", &self.paths.modifiers)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(CliError::config(key, format!("{} does not exist", p.display())));
                }
            }
        }
        let check = |key: &str, r: poac_core::Result<()>| r.map_err(|e| CliError::config(key, e.to_string()));
        check("plm", self.plm.validate())?;
        let schedule = NoiseSchedule::from_config(&self.schedule).map_err(|e| CliError::config("schedule", e.to_string()))?;
        check("reward", self.reward.validate())?;
        check("refl", self.refl.validate(&schedule))?;
        check("eval", self.eval.validate())?;
        if self.world.dim == 0 || !(self.world.rho > 0.0) {
            return Err(CliError::config("world", "dim must be positive and rho > 0"));
        }
        if self.diffusion.batch_size == 0 || self.diffusion.hidden == 0 {
            return Err(CliError::config("diffusion", "batch_size and hidden must be positive"));
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Ok(match &self.paths.lexicon {
            Some(p) => Lexicon::load(p)?,
            None => Lexicon::builtin(),
        })
    }

    pub fn modifiers(&self) -> Result<Vec<String>> {
        Ok(match &self.paths.modifiers {
            Some(p) => load_modifiers(p)?,
            None => builtin_modifiers(),
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::from_config(&self.schedule)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, &[], Some(3)).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.plm, PlmConfig::default());
        assert_eq!(cfg.paths.world(), PathBuf::from("out/world.json"));
    }

    #[test]
    fn overrides_and_key_paths() {
        let cfg = RunConfig::load(None, &["plm.epochs=3".into(), "paths.corpus=x/c.jsonl".into()], Some(0)).unwrap();
        assert_eq!(cfg.plm.epochs, 3);
        assert_eq!(cfg.paths.corpus, PathBuf::from("x/c.jsonl"));

        let err = RunConfig::load(None, &["plm.epochz=3".into()], Some(0)).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, message } if key == "plm.epochz" && message.contains("unknown field")), "{err}");
        let err = RunConfig::load(None, &["diffusion.steps=lots".into()], Some(0)).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "diffusion.steps"), "{err}");
        let err = RunConfig::load(None, &["refl.t2=99".into()], Some(0)).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "refl"), "{err}");
        let err = RunConfig::load(None, &["paths.lexicon=/nonexistent.json".into()], Some(0)).unwrap_err();
        assert!(matches!(&err, CliError::Config { key, .. } if key == "paths.lexicon"));
    }

    #[test]
    fn toml_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 11\n[diffusion]\nsteps = 10\n[eval]\nconfigurations = [\"BASE\", \"POAC\", \"POAC_REFL\"]\n").unwrap();
        let cfg = RunConfig::load(Some(&p), &["diffusion.steps=20".into()], None).unwrap();
        assert_eq!(cfg.diffusion.steps, 20);
        std::fs::write(&p, "sed = 11\n").unwrap();
        assert!(RunConfig::load(Some(&p), &[], None).is_err());
        let j = dir.path().join("run.json");
        std::fs::write(&j, serde_json::to_string(&RunConfig::default()).unwrap()).unwrap();
        assert_eq!(RunConfig::load(Some(&j), &[], Some(0)).unwrap(), RunConfig::default());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn numeric_overrides_land_on_their_key(steps in any::<u32>(), seed in any::<u64>()) {
                let sets = [format!("diffusion.steps={steps}"), format!("seed={seed}")];
                let cfg = RunConfig::load(None, &sets, None);
                if std::env::var(SEED_ENV).is_err() {
                    let cfg = cfg.unwrap();
                    prop_assert_eq!(cfg.diffusion.steps, steps as usize);
                    prop_assert_eq!(cfg.seed, seed);
                }
            }

            #[test]
            fn non_numeric_values_name_the_key(word in "[a-z]{1,8}") {
                let err = RunConfig::load(None, &[format!("plm.epochs={word}")], Some(0)).unwrap_err();
                prop_assert!(matches!(&err, CliError::Config { key, .. } if key == "plm.epochs"), "{}", err);
            }
        }
    }
}
