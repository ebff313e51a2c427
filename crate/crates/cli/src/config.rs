//! `key = value` run configuration.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use nlsal_core::nets::NetworkSpec;
use nlsal_core::nonlocal::EmbedActivation;
use nlsal_core::train::{Stage, TrainConfig};

/// Which networks a command acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageSel {
    Static,
    Dynamic,
    Both,
}

impl FromStr for StageSel {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(StageSel::Static),
            "dynamic" => Ok(StageSel::Dynamic),
            "both" => Ok(StageSel::Both),
            _ => bail!("stage must be static, dynamic or both, got `{s}`"),
        }
    }
}

impl std::fmt::Display for StageSel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageSel::Static => "static",
            StageSel::Dynamic => "dynamic",
            StageSel::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub stage: StageSel,
    /// Dataset root in the `<sequence>/{frames,gt}` layout; `None` selects
    /// the synthetic generator.
    pub dataset: Option<PathBuf>,
    /// Held-out root for ablation scoring; defaults to a synthetic held-out
    /// set or, for real data, `eval_sequences` of `dataset`.
    pub eval_dataset: Option<PathBuf>,
    pub train_sequences: Vec<String>,
    pub eval_sequences: Vec<String>,
    pub flatten: bool,
    /// Square working resolution; frames and masks are resized to it.
    pub resolution: usize,
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
    pub nl_after_block: usize,
    pub nl_count: usize,
    pub nl_embed_width: Option<usize>,
    pub embed_activation: EmbedActivation,
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub loss_clamp_eps: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint_every: usize,
    pub synth_sequences: usize,
    pub synth_frames: usize,
    pub synth_motion: usize,
    pub synth_distractor: bool,
    pub synth_seed: u64,
    pub holdout_sequences: usize,
    pub holdout_seed: u64,
    pub ablate_iterations: usize,
    pub timing_rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let spec = NetworkSpec::static_default();
        RunConfig {
            stage: StageSel::Static,
            dataset: None,
            eval_dataset: None,
            train_sequences: Vec::new(),
            eval_sequences: Vec::new(),
            flatten: false,
            resolution: 64,
            widths: spec.widths(),
            convs_per_block: 2,
            nl_after_block: spec.nl_after_block,
            nl_count: spec.nl_count,
            nl_embed_width: None,
            embed_activation: spec.embed_activation,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            iterations: train.iterations,
            loss_clamp_eps: train.loss_clamp_eps,
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint_every: 0,
            synth_sequences: 4,
            synth_frames: 5,
            synth_motion: 4,
            synth_distractor: false,
            synth_seed: 0,
            holdout_sequences: 4,
            holdout_seed: 1000,
            ablate_iterations: 200,
            timing_rounds: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    match v {
        "" | "synthetic" | "none" => None,
        p => Some(PathBuf::from(p)),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("line {}: `{key}` given twice", n + 1);
            }
            cfg.set(key, value).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "stage" => self.stage = parse(key, v)?,
            "dataset" => self.dataset = path_or_none(v),
            "eval_dataset" => self.eval_dataset = path_or_none(v),
            "train_sequences" => self.train_sequences = list(key, v)?,
            "eval_sequences" => self.eval_sequences = list(key, v)?,
            "flatten" => self.flatten = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "widths" => self.widths = list(key, v)?,
            "convs_per_block" => self.convs_per_block = parse(key, v)?,
            "nl_after_block" => self.nl_after_block = parse(key, v)?,
            "nl_count" => self.nl_count = parse(key, v)?,
            "nl_embed_width" => {
                self.nl_embed_width = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "embed_activation" => self.embed_activation = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "loss_clamp_eps" => self.loss_clamp_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "synth_sequences" => self.synth_sequences = parse(key, v)?,
            "synth_frames" => self.synth_frames = parse(key, v)?,
            "synth_motion" => self.synth_motion = parse(key, v)?,
            "synth_distractor" => self.synth_distractor = parse(key, v)?,
            "synth_seed" => self.synth_seed = parse(key, v)?,
            "holdout_sequences" => self.holdout_sequences = parse(key, v)?,
            "holdout_seed" => self.holdout_seed = parse(key, v)?,
            "ablate_iterations" => self.ablate_iterations = parse(key, v)?,
            "timing_rounds" => self.timing_rounds = parse(key, v)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 32 {
            bail!("resolution {} below 32", self.resolution);
        }
        self.spec(Stage::Static).validate()?;
        self.train(Stage::Static).validate()?;
        Ok(())
    }

    pub fn spec(&self, stage: Stage) -> NetworkSpec {
        let base = match stage {
            Stage::Static => NetworkSpec::static_default(),
            Stage::Dynamic => NetworkSpec::dynamic_default(),
        };
        NetworkSpec {
            encoder_blocks: NetworkSpec::blocks(&self.widths, self.convs_per_block),
            nl_after_block: self.nl_after_block,
            nl_count: self.nl_count,
            nl_embed_width: self.nl_embed_width,
            embed_activation: self.embed_activation,
            ..base
        }
    }

    pub fn train(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            iterations: self.iterations,
            loss_clamp_eps: self.loss_clamp_eps,
            stage,
            seed: self.seed,
        }
    }

    /// Every key with its effective value, in a form [`RunConfig::parse`] accepts.
    pub fn render(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(|| "synthetic".to_string(), |p| p.display().to_string());
        let lines = [
            ("stage", self.stage.to_string()),
            ("dataset", path(&self.dataset)),
            ("eval_dataset", path(&self.eval_dataset)),
            ("train_sequences", self.train_sequences.join(",")),
            ("eval_sequences", self.eval_sequences.join(",")),
            ("flatten", self.flatten.to_string()),
            ("resolution", self.resolution.to_string()),
            ("widths", join(&self.widths)),
            ("convs_per_block", self.convs_per_block.to_string()),
            ("nl_after_block", self.nl_after_block.to_string()),
            ("nl_count", self.nl_count.to_string()),
            (
                "nl_embed_width",
                self.nl_embed_width.map_or_else(|| "auto".to_string(), |w| w.to_string()),
            ),
            ("embed_activation", self.embed_activation.to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("momentum", self.momentum.to_string()),
            ("iterations", self.iterations.to_string()),
            ("loss_clamp_eps", format!("{:e}", self.loss_clamp_eps)),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("synth_sequences", self.synth_sequences.to_string()),
            ("synth_frames", self.synth_frames.to_string()),
            ("synth_motion", self.synth_motion.to_string()),
            ("synth_distractor", self.synth_distractor.to_string()),
            ("synth_seed", self.synth_seed.to_string()),
            ("holdout_sequences", self.holdout_sequences.to_string()),
            ("holdout_seed", self.holdout_seed.to_string()),
            ("ablate_iterations", self.ablate_iterations.to_string()),
            ("timing_rounds", self.timing_rounds.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
