use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{LossConfig, ModelKind};

/// Which parameter copy a quantity is computed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSource {
    Target,
    Online,
}

impl ParamSource {
    pub fn name(self) -> &'static str {
        match self {
            ParamSource::Target => "target",
            ParamSource::Online => "online",
        }
    }
}

impl FromStr for ParamSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(ParamSource::Target),
            "online" => Ok(ParamSource::Online),
            _ => Err(Error::config(format!("expected `target` or `online`, got `{s}`"))),
        }
    }
}

/// Where training intents come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntentSet {
    /// Future/uniform mixture over the dataset, like outcomes.
    Dataset,
    /// Uniform over the run's evaluation goals.
    EvalGoals,
}

impl IntentSet {
    pub fn name(self) -> &'static str {
        match self {
            IntentSet::Dataset => "dataset",
            IntentSet::EvalGoals => "eval-goals",
        }
    }
}

impl FromStr for IntentSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(IntentSet::Dataset),
            "eval-goals" => Ok(IntentSet::EvalGoals),
            _ => Err(Error::config(format!("expected `dataset` or `eval-goals`, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub polyak: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    pub p_future: f64,
    pub seed: u64,
    pub d: usize,
    pub model_kind: ModelKind,
    pub eval_every: usize,
    pub intent_source: ParamSource,
    pub advantage_source: ParamSource,
    pub intent_set: IntentSet,
    pub n_eval_goals: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.9,
            polyak: 0.005,
            learning_rate: 0.1,
            batch_size: 256,
            n_steps: 200_000,
            p_future: 0.7,
            seed: 0,
            d: 16,
            model_kind: ModelKind::Multilinear,
            eval_every: 10_000,
            intent_source: ParamSource::Target,
            advantage_source: ParamSource::Target,
            intent_set: IntentSet::Dataset,
            n_eval_goals: 10,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "gamma",
    "alpha",
    "polyak",
    "learning_rate",
    "batch_size",
    "n_steps",
    "p_future",
    "seed",
    "d",
    "model_kind",
    "eval_every",
    "intent_source",
    "advantage_source",
    "intent_set",
    "n_eval_goals",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value `{value}` for `{key}`: {e}")))
}

impl TrainConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "gamma" => self.gamma = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "polyak" => self.polyak = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "n_steps" => self.n_steps = parse_value(key, value)?,
            "p_future" => self.p_future = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "model_kind" => self.model_kind = value.parse()?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "intent_source" => self.intent_source = value.parse()?,
            "advantage_source" => self.advantage_source = value.parse()?,
            "intent_set" => self.intent_set = value.parse()?,
            "n_eval_goals" => self.n_eval_goals = parse_value(key, value)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Flat `key = value` text; `#` starts a comment. Keys not given keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::config(format!("duplicate config key `{key}`")));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "gamma" => self.gamma.to_string(),
            "alpha" => self.alpha.to_string(),
            "polyak" => self.polyak.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_steps" => self.n_steps.to_string(),
            "p_future" => self.p_future.to_string(),
            "seed" => self.seed.to_string(),
            "d" => self.d.to_string(),
            "model_kind" => self.model_kind.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "intent_source" => self.intent_source.name().to_string(),
            "advantage_source" => self.advantage_source.name().to_string(),
            "intent_set" => self.intent_set.name().to_string(),
            "n_eval_goals" => self.n_eval_goals.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: String| if ok { Ok(()) } else { Err(Error::Config(what)) };
        check(
            (0.0..1.0).contains(&self.gamma),
            format!("gamma {} outside [0, 1)", self.gamma),
        )?;
        check(
            (0.5..1.0).contains(&self.alpha),
            format!("alpha {} outside [0.5, 1)", self.alpha),
        )?;
        check(
            self.polyak > 0.0 && self.polyak <= 1.0,
            format!("polyak {} outside (0, 1]", self.polyak),
        )?;
        check(
            self.learning_rate.is_finite() && self.learning_rate >= 0.0,
            format!("learning_rate {} must be finite and non-negative", self.learning_rate),
        )?;
        check(
            (0.0..=1.0).contains(&self.p_future),
            format!("p_future {} outside [0, 1]", self.p_future),
        )?;
        check(self.batch_size >= 1, "batch_size must be at least 1".into())?;
        check(self.n_steps >= 1, "n_steps must be at least 1".into())?;
        check(self.d >= 1, "d must be at least 1".into())?;
        check(self.eval_every >= 1, "eval_every must be at least 1".into())?;
        check(self.n_eval_goals >= 1, "n_eval_goals must be at least 1".into())?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            intent_from_online: self.intent_source == ParamSource::Online,
            advantage_from_online: self.advantage_source == ParamSource::Online,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("model_kind", "monolithic").unwrap();
        cfg.set("intent_set", "eval-goals").unwrap();
        cfg.set("learning_rate", "0.0125").unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn missing_keys_default() {
        let cfg = TrainConfig::parse("# only one\nd = 4\n").unwrap();
        assert_eq!(cfg.d, 4);
        assert_eq!(cfg.alpha, 0.9);
        assert_eq!(cfg.polyak, 0.005);
    }

    #[test]
    fn rejects_bad_input() {
        let err = TrainConfig::parse("d = 4\nwidth = 3\n").unwrap_err().to_string();
        assert!(err.contains("width"));
        assert!(TrainConfig::parse("d = 4\nd = 5\n").is_err());
        assert!(TrainConfig::parse("alpha = 1.0\n").is_err());
        assert!(TrainConfig::parse("alpha = 0.4\n").is_err());
        assert!(TrainConfig::parse("polyak = 0\n").is_err());
        assert!(TrainConfig::parse("n_steps = 0\n").is_err());
        assert!(TrainConfig::parse("gamma\n").is_err());
        assert!(TrainConfig::parse("batch_size = -3\n").is_err());
        assert!(TrainConfig::parse("model_kind = mlp\n").is_err());
    }
}
