//! Flat `key = value` run configuration with `#` comments.
//!
//! Unknown and repeated keys are rejected. [`RunConfig::to_text`] writes every
//! key in a fixed order, and parsing that text gives back the same config.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::SyntheticSpec;
use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Data generation; its seed always follows `train.seed`.
    pub data: SyntheticSpec,
    pub mode: Objective,
    /// Seeds for ablation and sweep commands.
    pub seeds: Vec<u64>,
}

/// Ordered key list of the canonical form.
pub const KEYS: [&str; 28] = [
    "seed",
    "seeds",
    "mode",
    "alpha",
    "radius",
    "theta_frozen",
    "trials",
    "samples_per_text",
    "batch_size",
    "epochs",
    "lr_head",
    "lr_adapter",
    "weight_decay",
    "warmup",
    "dropout",
    "adapters",
    "tower_mismatch",
    "validate",
    "dim",
    "frames",
    "train_pairs",
    "test_pairs",
    "concepts",
    "raw_frames",
    "coverage",
    "noise",
    "distractors",
    "distractor_weight",
];

impl Default for RunConfig {
    /// Desk-scale defaults. Training rates are far above the fine-tuning-scale
    /// [`TrainConfig::default`] because a few dozen steps must move randomly
    /// initialized heads rather than fine-tune a pretrained model.
    fn default() -> Self {
        let train = TrainConfig {
            lr_head: 5e-2,
            lr_adapter: 5e-3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let data = SyntheticSpec {
            concepts: train.concepts,
            seed: train.seed,
            ..SyntheticSpec::default()
        };
        Self {
            train,
            data,
            mode: Objective::TMass,
            seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {} is not `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::config(key, "set more than once"));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                d.seed = t.seed;
            }
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "mode" => self.mode = value.parse().map_err(|_| Error::config(key, format!("unknown mode `{value}`")))?,
            "alpha" => t.alpha = parse(key, value)?,
            "radius" => t.variant = value.parse()?,
            "theta_frozen" => {
                t.frozen_theta = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "trials" => t.trials = parse(key, value)?,
            "samples_per_text" => t.samples_per_text = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "lr_head" => t.lr_head = parse(key, value)?,
            "lr_adapter" => t.lr_adapter = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "warmup" => t.warmup = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "adapters" => t.adapters = parse_bool(key, value)?,
            "tower_mismatch" => t.tower_mismatch = parse(key, value)?,
            "validate" => t.validate = parse_bool(key, value)?,
            "dim" => t.dim = parse(key, value)?,
            "frames" => t.frames = parse(key, value)?,
            "train_pairs" => d.pairs = parse(key, value)?,
            "test_pairs" => d.test_pairs = parse(key, value)?,
            "concepts" => {
                d.concepts = parse(key, value)?;
                t.concepts = d.concepts;
            }
            "raw_frames" => d.frames = parse(key, value)?,
            "coverage" => d.coverage = parse(key, value)?,
            "noise" => d.noise = parse(key, value)?,
            "distractors" => d.distractors = parse(key, value)?,
            "distractor_weight" => d.distractor_weight = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let d = &self.data;
        match key {
            "seed" => t.seed.to_string(),
            "seeds" => self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "mode" => self.mode.to_string(),
            "alpha" => t.alpha.to_string(),
            "radius" => t.variant.to_string(),
            "theta_frozen" => t.frozen_theta.map_or("none".into(), |v| v.to_string()),
            "trials" => t.trials.to_string(),
            "samples_per_text" => t.samples_per_text.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "lr_head" => t.lr_head.to_string(),
            "lr_adapter" => t.lr_adapter.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "warmup" => t.warmup.to_string(),
            "dropout" => t.dropout.to_string(),
            "adapters" => t.adapters.to_string(),
            "tower_mismatch" => t.tower_mismatch.to_string(),
            "validate" => t.validate.to_string(),
            "dim" => t.dim.to_string(),
            "frames" => t.frames.to_string(),
            "train_pairs" => d.pairs.to_string(),
            "test_pairs" => d.test_pairs.to_string(),
            "concepts" => d.concepts.to_string(),
            "raw_frames" => d.frames.to_string(),
            "coverage" => d.coverage.to_string(),
            "noise" => d.noise.to_string(),
            "distractors" => d.distractors.to_string(),
            "distractor_weight" => d.distractor_weight.to_string(),
            _ => unreachable!("key list and accessor out of sync: {key}"),
        }
    }

    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.data.frames < self.train.frames {
            return Err(Error::config(
                "frames",
                format!("cannot sample {} frames from {}", self.train.frames, self.data.frames),
            ));
        }
        if self.train.dim < 1 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        self.train.validate()?;
        self.data.validate()
    }

    /// Same config with a different run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.train.seed = seed;
        out.data.seed = seed;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_mass::RadiusVariant;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_head = 0.1 + 0.2;
        cfg.train.frozen_theta = Some(1.0);
        cfg.mode = Objective::CePlusS;
        cfg.train.variant = RadiusVariant::Scalar;
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# header\n\nalpha = 0.5  # trailing\nseed=9\n").unwrap();
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!((cfg.train.seed, cfg.data.seed), (9, 9));
    }

    #[test]
    fn rejects_bad_input() {
        let key_of = |text: &str| match RunConfig::from_text(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of("bogus = 1"), "bogus");
        assert_eq!(key_of("alpha = x"), "alpha");
        assert_eq!(key_of("alpha = 1\nalpha = 2"), "alpha");
        assert_eq!(key_of("radius = cubic"), "radius");
        assert_eq!(key_of("adapters = yes"), "adapters");
        assert_eq!(key_of("frames = 40"), "frames");
        assert!(matches!(RunConfig::from_text("warmup = 1.5"), Err(Error::Contract(_))));
    }
}
