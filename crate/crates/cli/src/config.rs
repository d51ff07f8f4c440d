//! Run configuration file: TOML with one section per concern. Every key can
//! be overridden on the command line as `--section.key value`.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use avalign::data::GeneratorConfig;
use avalign::model::{LossWeights, ModelConfig};
use avalign::scoring::DecodeMode;
use avalign::train::{RunConfig, RunPaths, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizeConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for QuantizeConfig {
    fn default() -> Self {
        Self {
            k: 200,
            max_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    #[default]
    Valid,
    All,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Defaults to `<paths.out>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub split: EvalSplit,
    pub decode: DecodeMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InspectConfig {
    pub utterance: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub generate: GeneratorConfig,
    pub quantize: QuantizeConfig,
    pub paths: RunPaths,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub inspect: InspectConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            generate: GeneratorConfig::default(),
            quantize: QuantizeConfig::default(),
            paths: RunPaths::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            inspect: InspectConfig::default(),
        }
    }
}

impl Config {
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            paths: self.paths.clone(),
            model: self.model.clone(),
            weights: self.weights,
            train: self.train.clone(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join("model.ckpt"))
    }
}

/// `--section.key value` pairs pulled out of the argument list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides(pub Vec<(String, String)>);

/// Splits dotted overrides (`--a.b v` or `--a.b=v`) from the arguments clap
/// should see.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut found = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("override --{name} needs a value"))?,
        };
        found.push((name, value));
    }
    Ok((rest, Overrides(found)))
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// The merged user settings before defaults are filled in, plus the typed
/// config.
pub struct Loaded {
    pub config: Config,
    /// Whether `weights.gamma` was set by the user rather than defaulted.
    pub explicit_gamma: bool,
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Loaded> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for (name, raw) in &overrides.0 {
        let (section, key) = name.split_once('.').expect("dotted");
        if key.contains('.') {
            bail!("override --{name}: only section.key is supported");
        }
        let entry = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(sec) = entry.as_table_mut() else {
            bail!("override --{name}: `{section}` is not a section");
        };
        sec.insert(key.to_string(), parse_value(raw));
    }
    let explicit_gamma = table
        .get("weights")
        .and_then(|w| w.as_table())
        .is_some_and(|w| w.contains_key("gamma"));
    let source = path.map_or("command line".to_string(), |p| p.display().to_string());
    let config: Config = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow!("invalid configuration ({source}): {}", e.message()))?;
    Ok(Loaded { config, explicit_gamma })
}

/// Applies the variant's loss-weight rule: S1 and S2 train without the
/// alignment term, so gamma is forced to zero unless the user set it, in
/// which case a non-zero value is an error.
pub fn apply_variant(cfg: &mut Config, variant: Variant, explicit_gamma: bool) -> Result<()> {
    cfg.train.variant = variant;
    if variant != Variant::S3 {
        if explicit_gamma && cfg.weights.gamma != 0.0 {
            bail!("variant {variant} trains without the alignment term; weights.gamma must be 0");
        }
        cfg.weights.gamma = 0.0;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, ov) = extract_overrides(args("avalign train --seed 3 --train.epochs 5 --model.d_model=16 --out x")).unwrap();
        assert_eq!(rest, args("avalign train --seed 3 --out x"));
        assert_eq!(
            ov.0,
            vec![("train.epochs".into(), "5".into()), ("model.d_model".into(), "16".into())]
        );
        assert!(extract_overrides(args("avalign train --train.epochs")).is_err());
    }

    #[test]
    fn override_values_are_typed() {
        let ov = Overrides(vec![
            ("train.epochs".into(), "3".into()),
            ("train.lr".into(), "0.01".into()),
            ("paths.bank".into(), "bank.bin".into()),
            ("train.variant".into(), "s2".into()),
            ("train.curriculum_max_seconds".into(), "4.0".into()),
        ]);
        let c = load(None, &ov).unwrap().config;
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.paths.bank, Some(PathBuf::from("bank.bin")));
        assert_eq!(c.train.variant, Variant::S2);
        assert_eq!(c.train.curriculum_max_seconds, Some(4.0));
    }

    #[test]
    fn unknown_keys_are_named() {
        let ov = Overrides(vec![("train.epochz".into(), "3".into())]);
        let err = format!("{:#}", load(None, &ov).err().unwrap());
        assert!(err.contains("epochz"), "{err}");
        let ov = Overrides(vec![("nosuch.key".into(), "1".into())]);
        let err = format!("{:#}", load(None, &ov).err().unwrap());
        assert!(err.contains("nosuch"), "{err}");
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochs = 7\nbatch_size = 2\n[weights]\ngamma = 3.5\n").unwrap();
        let ov = Overrides(vec![("train.epochs".into(), "9".into())]);
        let l = load(Some(&p), &ov).unwrap();
        assert_eq!((l.config.train.epochs, l.config.train.batch_size), (9, 2));
        assert!(l.explicit_gamma);
    }

    #[test]
    fn variant_gamma_rule() {
        let mut c = Config::default();
        apply_variant(&mut c, Variant::S2, false).unwrap();
        assert_eq!(c.weights.gamma, 0.0);
        let mut c = Config::default();
        assert!(apply_variant(&mut c, Variant::S1, true).is_err());
        let mut c = Config::default();
        apply_variant(&mut c, Variant::S3, true).unwrap();
        assert_eq!(c.weights.gamma, LossWeights::default().gamma);
    }

    #[test]
    fn default_config_serializes_and_parses_back() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
