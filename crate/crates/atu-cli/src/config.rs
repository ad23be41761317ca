//! Experiment configuration: a flat key=value schema with documented
//! defaults, named presets for the standard experiment grid, and a content
//! digest that identifies a configuration independently of seed and output
//! location.
//!
//! Config files are plain text, one `key=value` per line; `#` starts a
//! comment. Unknown keys are rejected. The digest is a SHA-256 prefix over
//! the canonical serialization of every key except `seed` and `out-dir`,
//! so result rows are keyed by (digest, seed) and moving an output
//! directory never changes a run's identity.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use atu_core::tasks::DomainRanges;
use atu_core::upsampler::{AtuConfig, TrainMode};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Learner {
    Maml,
    MetaSgd,
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Learner::Maml => "maml",
            Learner::MetaSgd => "metasgd",
        })
    }
}

impl FromStr for Learner {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Learner::Maml),
            "metasgd" => Ok(Learner::MetaSgd),
            other => bail!("unknown learner '{other}' (expected maml|metasgd)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    Tu,
    Atu,
}

impl Augment {
    pub fn train_mode(self) -> TrainMode {
        match self {
            Augment::None => TrainMode::Vanilla,
            Augment::Tu => TrainMode::Upsampled,
            Augment::Atu => TrainMode::AdversarialUpsampled,
        }
    }
}

impl fmt::Display for Augment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augment::None => "none",
            Augment::Tu => "tu",
            Augment::Atu => "atu",
        })
    }
}

impl FromStr for Augment {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "tu" => Ok(Augment::Tu),
            "atu" => Ok(Augment::Atu),
            other => bail!("unknown augmentation '{other}' (expected none|tu|atu)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    Regression,
    SynthClass,
}

impl fmt::Display for Track {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Track::Regression => "regression",
            Track::SynthClass => "synth-class",
        })
    }
}

impl FromStr for Track {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Track::Regression),
            "synth-class" => Ok(Track::SynthClass),
            other => bail!("unknown track '{other}' (expected regression|synth-class)"),
        }
    }
}

/// Evaluation task distribution. Training tasks always come from the
/// standard sine ranges; this preset selects where meta-test tasks are
/// drawn (the shifted presets give the cross-domain evaluations).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainPreset {
    Training,
    FrequencyShifted,
    AmplitudeShifted,
    PhaseShifted,
}

impl DomainPreset {
    pub fn ranges(self) -> DomainRanges {
        match self {
            DomainPreset::Training => DomainRanges::training_default(),
            DomainPreset::FrequencyShifted => DomainRanges::frequency_shifted(),
            DomainPreset::AmplitudeShifted => DomainRanges::amplitude_shifted(),
            DomainPreset::PhaseShifted => DomainRanges::phase_shifted(),
        }
    }
}

impl fmt::Display for DomainPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainPreset::Training => "training",
            DomainPreset::FrequencyShifted => "frequency-shifted",
            DomainPreset::AmplitudeShifted => "amplitude-shifted",
            DomainPreset::PhaseShifted => "phase-shifted",
        })
    }
}

impl FromStr for DomainPreset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training" => Ok(DomainPreset::Training),
            "frequency-shifted" => Ok(DomainPreset::FrequencyShifted),
            "amplitude-shifted" => Ok(DomainPreset::AmplitudeShifted),
            "phase-shifted" => Ok(DomainPreset::PhaseShifted),
            other => bail!(
                "unknown domain '{other}' \
                 (expected training|frequency-shifted|amplitude-shifted|phase-shifted)"
            ),
        }
    }
}

/// Every experiment knob, regression and classification tracks alike.
/// Defaults are the standard values: 60,000 outer steps in batches of 4 at
/// rate 1e-3, one inner step at 0.01, up-sampler weights (8e-3, 4e-3,
/// 3e-1), up-sampling ratio 8 = 2x4, 8-task patches from 64-task pools,
/// 3,750 generator iterations, augmentation ratio 0.2.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub learner: Learner,
    pub augment: Augment,
    pub track: Track,
    /// Regression support shots (K).
    pub k_support: usize,
    pub k_query: usize,
    pub domain: DomainPreset,
    pub outer_steps: usize,
    pub meta_batch: usize,
    pub meta_lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Meta-test protocol: task count and dense query-grid size.
    pub eval_tasks: usize,
    pub eval_query: usize,
    /// Checkpoint cadence in cycles (one cycle = one task pool).
    pub checkpoint_every: usize,
    // Up-sampler (regression).
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub r_coarse: usize,
    pub r_detail: usize,
    pub n_patch: usize,
    pub pool_size: usize,
    pub upsampler_iterations: usize,
    pub augment_ratio: f64,
    pub upsampler_lr: f64,
    // Classification track.
    pub class_delta1: f64,
    pub class_delta2: f64,
    pub class_r: usize,
    pub class_eta: f64,
    pub class_k_memory: usize,
    pub class_inner_steps: usize,
    pub class_iterations: usize,
    pub class_n_way: usize,
    pub class_k_support: usize,
    pub class_k_query: usize,
    pub class_pool_classes: usize,
    pub class_dim: usize,
    pub class_stddev: f64,
    pub class_noise_dim: usize,
    pub class_channels: usize,
    pub class_eval_tasks: usize,
    pub class_eval_query: usize,
    // Identity-exempt fields.
    pub seed: u64,
    pub out_dir: String,
    /// Human-readable tag carried into result rows (preset name or
    /// "custom").
    pub label: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            learner: Learner::Maml,
            augment: Augment::None,
            track: Track::Regression,
            k_support: 10,
            k_query: 10,
            domain: DomainPreset::Training,
            outer_steps: 60_000,
            meta_batch: 4,
            meta_lr: 1e-3,
            inner_lr: 0.01,
            inner_steps: 1,
            eval_tasks: 100,
            eval_query: 100,
            checkpoint_every: 250,
            eta1: 8e-3,
            eta2: 4e-3,
            eta3: 3e-1,
            r_coarse: 2,
            r_detail: 4,
            n_patch: 8,
            pool_size: 64,
            upsampler_iterations: 3750,
            augment_ratio: 0.2,
            upsampler_lr: 1e-3,
            class_delta1: 2.0,
            class_delta2: 2.0,
            class_r: 2,
            class_eta: 0.5,
            class_k_memory: 3,
            class_inner_steps: 5,
            class_iterations: 2000,
            class_n_way: 5,
            class_k_support: 1,
            class_k_query: 5,
            class_pool_classes: 12,
            class_dim: 8,
            class_stddev: 0.5,
            class_noise_dim: 4,
            class_channels: 16,
            class_eval_tasks: 200,
            class_eval_query: 15,
            seed: 0,
            out_dir: String::from("runs/run"),
            label: String::from("custom"),
        }
    }
}

/// All settable keys, in canonical order. `seed` and `out-dir` are carried
/// in the file but excluded from the digest; `label` likewise.
pub const KEYS: &[&str] = &[
    "learner",
    "augment",
    "track",
    "k-support",
    "k-query",
    "domain",
    "outer-steps",
    "meta-batch",
    "meta-lr",
    "inner-lr",
    "inner-steps",
    "eval-tasks",
    "eval-query",
    "checkpoint-every",
    "eta1",
    "eta2",
    "eta3",
    "r-coarse",
    "r-detail",
    "n-patch",
    "pool-size",
    "upsampler-iterations",
    "augment-ratio",
    "upsampler-lr",
    "class-delta1",
    "class-delta2",
    "class-r",
    "class-eta",
    "class-k-memory",
    "class-inner-steps",
    "class-iterations",
    "class-n-way",
    "class-k-support",
    "class-k-query",
    "class-pool-classes",
    "class-dim",
    "class-stddev",
    "class-noise-dim",
    "class-channels",
    "class-eval-tasks",
    "class-eval-query",
    "seed",
    "out-dir",
    "label",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| anyhow::anyhow!("bad value '{value}' for {key}: {e}"))
}

impl ExperimentConfig {
    /// Sets one field by key. Keys mirror the CLI flags and file format.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learner" => self.learner = value.parse()?,
            "augment" => self.augment = value.parse()?,
            "track" => self.track = value.parse()?,
            "k-support" => self.k_support = parse_num(key, value)?,
            "k-query" => self.k_query = parse_num(key, value)?,
            "domain" => self.domain = value.parse()?,
            "outer-steps" => self.outer_steps = parse_num(key, value)?,
            "meta-batch" => self.meta_batch = parse_num(key, value)?,
            "meta-lr" => self.meta_lr = parse_num(key, value)?,
            "inner-lr" => self.inner_lr = parse_num(key, value)?,
            "inner-steps" => self.inner_steps = parse_num(key, value)?,
            "eval-tasks" => self.eval_tasks = parse_num(key, value)?,
            "eval-query" => self.eval_query = parse_num(key, value)?,
            "checkpoint-every" => self.checkpoint_every = parse_num(key, value)?,
            "eta1" => self.eta1 = parse_num(key, value)?,
            "eta2" => self.eta2 = parse_num(key, value)?,
            "eta3" => self.eta3 = parse_num(key, value)?,
            "r-coarse" => self.r_coarse = parse_num(key, value)?,
            "r-detail" => self.r_detail = parse_num(key, value)?,
            "n-patch" => self.n_patch = parse_num(key, value)?,
            "pool-size" => self.pool_size = parse_num(key, value)?,
            "upsampler-iterations" => self.upsampler_iterations = parse_num(key, value)?,
            "augment-ratio" => self.augment_ratio = parse_num(key, value)?,
            "upsampler-lr" => self.upsampler_lr = parse_num(key, value)?,
            "class-delta1" => self.class_delta1 = parse_num(key, value)?,
            "class-delta2" => self.class_delta2 = parse_num(key, value)?,
            "class-r" => self.class_r = parse_num(key, value)?,
            "class-eta" => self.class_eta = parse_num(key, value)?,
            "class-k-memory" => self.class_k_memory = parse_num(key, value)?,
            "class-inner-steps" => self.class_inner_steps = parse_num(key, value)?,
            "class-iterations" => self.class_iterations = parse_num(key, value)?,
            "class-n-way" => self.class_n_way = parse_num(key, value)?,
            "class-k-support" => self.class_k_support = parse_num(key, value)?,
            "class-k-query" => self.class_k_query = parse_num(key, value)?,
            "class-pool-classes" => self.class_pool_classes = parse_num(key, value)?,
            "class-dim" => self.class_dim = parse_num(key, value)?,
            "class-stddev" => self.class_stddev = parse_num(key, value)?,
            "class-noise-dim" => self.class_noise_dim = parse_num(key, value)?,
            "class-channels" => self.class_channels = parse_num(key, value)?,
            "class-eval-tasks" => self.class_eval_tasks = parse_num(key, value)?,
            "class-eval-query" => self.class_eval_query = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out-dir" => self.out_dir = String::from(value),
            "label" => self.label = String::from(value),
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// Reads one field by key, in the same textual form `set` accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "learner" => self.learner.to_string(),
            "augment" => self.augment.to_string(),
            "track" => self.track.to_string(),
            "k-support" => self.k_support.to_string(),
            "k-query" => self.k_query.to_string(),
            "domain" => self.domain.to_string(),
            "outer-steps" => self.outer_steps.to_string(),
            "meta-batch" => self.meta_batch.to_string(),
            "meta-lr" => self.meta_lr.to_string(),
            "inner-lr" => self.inner_lr.to_string(),
            "inner-steps" => self.inner_steps.to_string(),
            "eval-tasks" => self.eval_tasks.to_string(),
            "eval-query" => self.eval_query.to_string(),
            "checkpoint-every" => self.checkpoint_every.to_string(),
            "eta1" => self.eta1.to_string(),
            "eta2" => self.eta2.to_string(),
            "eta3" => self.eta3.to_string(),
            "r-coarse" => self.r_coarse.to_string(),
            "r-detail" => self.r_detail.to_string(),
            "n-patch" => self.n_patch.to_string(),
            "pool-size" => self.pool_size.to_string(),
            "upsampler-iterations" => self.upsampler_iterations.to_string(),
            "augment-ratio" => self.augment_ratio.to_string(),
            "upsampler-lr" => self.upsampler_lr.to_string(),
            "class-delta1" => self.class_delta1.to_string(),
            "class-delta2" => self.class_delta2.to_string(),
            "class-r" => self.class_r.to_string(),
            "class-eta" => self.class_eta.to_string(),
            "class-k-memory" => self.class_k_memory.to_string(),
            "class-inner-steps" => self.class_inner_steps.to_string(),
            "class-iterations" => self.class_iterations.to_string(),
            "class-n-way" => self.class_n_way.to_string(),
            "class-k-support" => self.class_k_support.to_string(),
            "class-k-query" => self.class_k_query.to_string(),
            "class-pool-classes" => self.class_pool_classes.to_string(),
            "class-dim" => self.class_dim.to_string(),
            "class-stddev" => self.class_stddev.to_string(),
            "class-noise-dim" => self.class_noise_dim.to_string(),
            "class-channels" => self.class_channels.to_string(),
            "class-eval-tasks" => self.class_eval_tasks.to_string(),
            "class-eval-query" => self.class_eval_query.to_string(),
            "seed" => self.seed.to_string(),
            "out-dir" => self.out_dir.clone(),
            "label" => self.label.clone(),
            other => bail!("unknown config key '{other}'"),
        })
    }

    /// Canonical serialization: every key in declaration order.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).expect("KEYS are all known"));
            out.push('\n');
        }
        out
    }

    /// Parses a config file over the given base (usually the default or a
    /// preset).
    pub fn from_file(path: &Path, mut base: ExperimentConfig) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{}:{}: expected key=value", path.display(), i + 1))?;
            base.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(base)
    }

    /// Content digest: SHA-256 prefix over all identity-bearing keys
    /// (everything except `seed`, `out-dir` and `label`).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for key in KEYS {
            if matches!(*key, "seed" | "out-dir" | "label") {
                continue;
            }
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(self.get(key).expect("KEYS are all known").as_bytes());
            hasher.update(b"\n");
        }
        let bytes = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for b in &bytes[..8] {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }

    /// Cross-field validation done before any computation starts.
    pub fn validate(&self) -> Result<()> {
        match self.track {
            Track::Regression => {
                if self.meta_batch == 0 || self.pool_size % self.meta_batch != 0 {
                    bail!("meta-batch must divide pool-size");
                }
                let per_cycle = self.pool_size / self.meta_batch;
                if self.outer_steps == 0 || self.outer_steps % per_cycle != 0 {
                    bail!(
                        "outer-steps ({}) must be a positive multiple of \
                         pool-size/meta-batch ({per_cycle})",
                        self.outer_steps
                    );
                }
                if self.checkpoint_every == 0 {
                    bail!("checkpoint-every must be positive");
                }
                self.atu_config().validate()?;
            }
            Track::SynthClass => {
                if self.class_n_way < 2 {
                    bail!("class-n-way must be at least 2");
                }
                if self.class_pool_classes <= self.class_n_way {
                    bail!("class-pool-classes must exceed class-n-way to leave bank classes");
                }
                self.class_atu_config().validate()?;
            }
        }
        if self.eval_tasks == 0 || self.eval_query == 0 {
            bail!("eval-tasks and eval-query must be positive");
        }
        Ok(())
    }

    /// The up-sampler portion, as the core trainer consumes it.
    pub fn atu_config(&self) -> AtuConfig {
        AtuConfig {
            eta1: self.eta1,
            eta2: self.eta2,
            eta3: self.eta3,
            r_coarse: self.r_coarse,
            r_detail: self.r_detail,
            n_patch: self.n_patch,
            pool_size: self.pool_size,
            max_iterations: self.upsampler_iterations,
            augment_ratio: self.augment_ratio,
            upsampler_lr: self.upsampler_lr,
        }
    }

    /// The classification portion. TU mode zeroes the adversarial weight.
    pub fn class_atu_config(&self) -> atu_core::classify::ClassAtuConfig {
        atu_core::classify::ClassAtuConfig {
            delta1: self.class_delta1,
            delta2: self.class_delta2,
            r: self.class_r,
            eta: if self.augment == Augment::Tu {
                0.0
            } else {
                self.class_eta
            },
            k_memory: self.class_k_memory,
            inner_steps: self.class_inner_steps,
            inner_lr: self.inner_lr,
            outer_lr: self.meta_lr,
            batch_size: self.meta_batch,
            k_query: self.class_k_query,
            noise_dim: self.class_noise_dim,
            upsampler_lr: self.upsampler_lr,
        }
    }

    pub fn cycles(&self) -> usize {
        self.outer_steps / (self.pool_size / self.meta_batch)
    }
}

/// Looks up a named preset. Names follow the experiment grid:
///
/// * `table2-{maml|metasgd|tu|atu|metasgd-tu|metasgd-atu}-{10|20|30}shot` —
///   in-domain regression (plain learner names mean no augmentation).
/// * `table3-{frequency|amplitude|phase}-<table2 suffix>` — same training,
///   shifted evaluation domain.
/// * `table8-ratio{0|0.2|0.4|0.6}` — the augmentation-ratio ablation at
///   10-shot ATU.
/// * `table4-synth-{maml|atu}` — the synthetic classification track.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    cfg.label = String::from(name);
    let parts: Vec<&str> = name.split('-').collect();
    let parse_variant = |cfg: &mut ExperimentConfig, rest: &[&str]| -> Result<()> {
        // rest is e.g. ["maml", "10shot"] or ["metasgd", "atu", "20shot"].
        let (shot, body) = match rest.split_last() {
            Some((s, b)) if s.ends_with("shot") => (*s, b),
            _ => bail!("preset '{name}' must end in '<K>shot'"),
        };
        cfg.k_support = shot
            .strip_suffix("shot")
            .unwrap()
            .parse()
            .with_context(|| format!("bad shot count in preset '{name}'"))?;
        match body {
            ["maml"] => {}
            ["metasgd"] => cfg.learner = Learner::MetaSgd,
            ["tu"] => cfg.augment = Augment::Tu,
            ["atu"] => cfg.augment = Augment::Atu,
            ["metasgd", "tu"] => {
                cfg.learner = Learner::MetaSgd;
                cfg.augment = Augment::Tu;
            }
            ["metasgd", "atu"] => {
                cfg.learner = Learner::MetaSgd;
                cfg.augment = Augment::Atu;
            }
            _ => bail!("unknown variant in preset '{name}'"),
        }
        Ok(())
    };
    match parts.as_slice() {
        ["table2", rest @ ..] => parse_variant(&mut cfg, rest)?,
        ["table3", domain, rest @ ..] => {
            cfg.domain = match *domain {
                "frequency" => DomainPreset::FrequencyShifted,
                "amplitude" => DomainPreset::AmplitudeShifted,
                "phase" => DomainPreset::PhaseShifted,
                other => bail!("unknown shifted domain '{other}' in preset '{name}'"),
            };
            parse_variant(&mut cfg, rest)?;
        }
        ["table8", ratio] => {
            let r = ratio
                .strip_prefix("ratio")
                .with_context(|| format!("preset '{name}': expected table8-ratio<value>"))?;
            cfg.augment = Augment::Atu;
            cfg.set("augment-ratio", r)?;
        }
        ["table4", "synth", variant] => {
            cfg.track = Track::SynthClass;
            match *variant {
                "maml" => {}
                "atu" => cfg.augment = Augment::Atu,
                other => bail!("unknown synth variant '{other}' in preset '{name}'"),
            }
        }
        _ => bail!(
            "unknown preset '{name}'; examples: table2-atu-10shot, \
             table3-phase-maml-10shot, table8-ratio0.2, table4-synth-atu"
        ),
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_encode_standard_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.outer_steps, 60_000);
        assert_eq!(cfg.meta_batch, 4);
        assert_eq!(cfg.inner_lr, 0.01);
        assert_eq!((cfg.eta1, cfg.eta2, cfg.eta3), (8e-3, 4e-3, 3e-1));
        assert_eq!((cfg.r_coarse, cfg.r_detail), (2, 4));
        assert_eq!(cfg.pool_size, 64);
        assert_eq!(cfg.upsampler_iterations, 3750);
        assert_eq!(cfg.augment_ratio, 0.2);
        assert_eq!(cfg.cycles(), 3750);
        cfg.validate().unwrap();
    }

    #[test]
    fn set_get_roundtrip_every_key() {
        let cfg = ExperimentConfig::default();
        let mut other = ExperimentConfig::default();
        for key in KEYS {
            let value = cfg.get(key).unwrap();
            other.set(key, &value).unwrap();
        }
        assert_eq!(cfg, other);
        assert!(other.set("bogus", "1").is_err());
    }

    #[test]
    fn digest_ignores_seed_and_out_dir_only() {
        let base = ExperimentConfig::default();
        let mut moved = base.clone();
        moved.seed = 7;
        moved.out_dir = String::from("/elsewhere");
        moved.label = String::from("renamed");
        assert_eq!(base.digest(), moved.digest());
        let mut changed = base.clone();
        changed.k_support = 20;
        assert_ne!(base.digest(), changed.digest());
        assert_eq!(base.digest().len(), 16);
    }

    #[test]
    fn preset_encodes_upsampler_table() {
        let cfg = preset("table2-atu-10shot").unwrap();
        assert_eq!(cfg.augment, Augment::Atu);
        assert_eq!(cfg.learner, Learner::Maml);
        assert_eq!(cfg.k_support, 10);
        assert_eq!((cfg.eta1, cfg.eta2, cfg.eta3), (8e-3, 4e-3, 3e-1));
        assert_eq!(cfg.r_coarse * cfg.r_detail, 8);
        assert_eq!(cfg.upsampler_iterations, 3750);
        assert_eq!(cfg.pool_size, 64);

        let cfg = preset("table2-metasgd-atu-20shot").unwrap();
        assert_eq!(cfg.learner, Learner::MetaSgd);
        assert_eq!(cfg.k_support, 20);

        let cfg = preset("table3-phase-maml-10shot").unwrap();
        assert_eq!(cfg.domain, DomainPreset::PhaseShifted);
        assert_eq!(cfg.augment, Augment::None);

        let cfg = preset("table8-ratio0.4").unwrap();
        assert_eq!(cfg.augment_ratio, 0.4);
        assert_eq!(cfg.augment, Augment::Atu);

        let cfg = preset("table4-synth-atu").unwrap();
        assert_eq!(cfg.track, Track::SynthClass);
        assert_eq!(cfg.augment, Augment::Atu);

        assert!(preset("table9-nope").is_err());
    }

    #[test]
    fn file_roundtrip_preserves_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        let mut cfg = preset("table2-tu-30shot").unwrap();
        cfg.seed = 5;
        std::fs::write(&path, cfg.to_canonical_string()).unwrap();
        let loaded = ExperimentConfig::from_file(&path, ExperimentConfig::default()).unwrap();
        assert_eq!(cfg, loaded);

        std::fs::write(&path, "mystery=1\n").unwrap();
        assert!(ExperimentConfig::from_file(&path, ExperimentConfig::default()).is_err());
        std::fs::write(&path, "# comment\n\nk-support=20\n").unwrap();
        let partial = ExperimentConfig::from_file(&path, ExperimentConfig::default()).unwrap();
        assert_eq!(partial.k_support, 20);
    }

    #[test]
    fn validation_rejects_inconsistent_step_counts() {
        let mut cfg = ExperimentConfig::default();
        cfg.outer_steps = 100; // not a multiple of 16
        assert!(cfg.validate().is_err());
        cfg.outer_steps = 160;
        cfg.validate().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.track = Track::SynthClass;
        cfg.class_pool_classes = 5;
        assert!(cfg.validate().is_err());
    }
}
