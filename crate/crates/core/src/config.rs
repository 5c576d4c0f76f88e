//! Run configuration, dataset presets and the flat `key=value` file format.
//!
//! Keys in configuration files and `--set` overrides are the field names
//! listed in [`RunConfig::KEYS`]. The prompt sequence length is called
//! `prompt_len` here; it is unrelated to the number of classes.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Which loss terms take part in training. Each flag maps to one column of
/// the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    #[serde(rename = "match")]
    pub matching: bool,
    #[serde(rename = "prompt_I")]
    pub prompt_image: bool,
    #[serde(rename = "prompt_T")]
    pub prompt_text: bool,
    pub refine: bool,
}

impl LossFlags {
    pub const ALL: LossFlags = LossFlags {
        matching: true,
        prompt_image: true,
        prompt_text: true,
        refine: true,
    };

    pub const MATCH_ONLY: LossFlags = LossFlags {
        matching: true,
        prompt_image: false,
        prompt_text: false,
        refine: false,
    };

    pub const NONE: LossFlags = LossFlags {
        matching: false,
        prompt_image: false,
        prompt_text: false,
        refine: false,
    };

    /// Parses a comma-separated list such as `match,prompt_I,refine`.
    /// `all` and `none` are accepted as shorthands.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "all" => return Ok(Self::ALL),
            "none" | "" => return Ok(Self::NONE),
            _ => {}
        }
        let mut flags = Self::NONE;
        for item in s.split(',').map(str::trim) {
            match item {
                "match" => flags.matching = true,
                "prompt_I" => flags.prompt_image = true,
                "prompt_T" => flags.prompt_text = true,
                "refine" => flags.refine = true,
                other => bail!(
                    Config,
                    "unknown loss flag {other:?}; expected match, prompt_I, prompt_T, refine"
                ),
            }
        }
        Ok(flags)
    }

    pub fn any_prompt(&self) -> bool {
        self.prompt_image || self.prompt_text
    }
}

impl fmt::Display for LossFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.matching {
            parts.push("match");
        }
        if self.prompt_image {
            parts.push("prompt_I");
        }
        if self.prompt_text {
            parts.push("prompt_T");
        }
        if self.refine {
            parts.push("refine");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Weight of the background-repelling term of the matching loss.
    pub lambda_b: f64,
    /// Weight of the text-repelling term of the prompt loss.
    #[serde(rename = "lambda_T")]
    pub lambda_t: f64,
    /// Weight of the refinement loss in the phase-C total.
    pub lambda_refine: f64,
    /// Number of learnable token embeddings per class prompt.
    pub prompt_len: usize,
    pub batch_size: usize,
    #[serde(rename = "lr_phaseA")]
    pub lr_phase_a: f64,
    #[serde(rename = "lr_phaseB")]
    pub lr_phase_b: f64,
    #[serde(rename = "lr_phaseC")]
    pub lr_phase_c: f64,
    pub epochs: usize,
    #[serde(rename = "epochs_phaseA")]
    pub epochs_phase_a: Option<usize>,
    #[serde(rename = "epochs_phaseB")]
    pub epochs_phase_b: Option<usize>,
    #[serde(rename = "epochs_phaseC")]
    pub epochs_phase_c: Option<usize>,
    /// Lower clamp applied to cosine scores and their complements.
    pub clamp_eps: f64,
    pub seed: u64,
    pub enabled_losses: LossFlags,
    pub weight_decay: f64,
    pub prompt_init_std: f64,
    /// Hidden channel width of the mask generator.
    pub gen_hidden: usize,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

pub const DATASET_TAGS: [&str; 3] = ["voc", "coco", "toy"];

impl RunConfig {
    pub const KEYS: [&'static str; 19] = [
        "lambda_b",
        "lambda_T",
        "lambda_refine",
        "prompt_len",
        "batch_size",
        "lr_phaseA",
        "lr_phaseB",
        "lr_phaseC",
        "epochs",
        "epochs_phaseA",
        "epochs_phaseB",
        "epochs_phaseC",
        "clamp_eps",
        "seed",
        "enabled_losses",
        "weight_decay",
        "prompt_init_std",
        "gen_hidden",
        "checkpoint_every",
    ];

    /// Sets a single field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        fn real(key: &str, v: &str) -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("{key}: expected a real number, got {v:?}")))
        }
        fn int(key: &str, v: &str) -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        }
        fn opt_int(key: &str, v: &str) -> Result<Option<usize>> {
            if v.is_empty() || v == "none" {
                Ok(None)
            } else {
                int(key, v).map(Some)
            }
        }
        match key {
            "lambda_b" => self.lambda_b = real(key, value)?,
            "lambda_T" => self.lambda_t = real(key, value)?,
            "lambda_refine" => self.lambda_refine = real(key, value)?,
            "prompt_len" => self.prompt_len = int(key, value)?,
            "batch_size" => self.batch_size = int(key, value)?,
            "lr_phaseA" => self.lr_phase_a = real(key, value)?,
            "lr_phaseB" => self.lr_phase_b = real(key, value)?,
            "lr_phaseC" => self.lr_phase_c = real(key, value)?,
            "epochs" => self.epochs = int(key, value)?,
            "epochs_phaseA" => self.epochs_phase_a = opt_int(key, value)?,
            "epochs_phaseB" => self.epochs_phase_b = opt_int(key, value)?,
            "epochs_phaseC" => self.epochs_phase_c = opt_int(key, value)?,
            "clamp_eps" => self.clamp_eps = real(key, value)?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: expected an unsigned integer, got {value:?}")))?
            }
            "enabled_losses" => self.enabled_losses = LossFlags::parse(value)?,
            "weight_decay" => self.weight_decay = real(key, value)?,
            "prompt_init_std" => self.prompt_init_std = real(key, value)?,
            "gen_hidden" => self.gen_hidden = int(key, value)?,
            "checkpoint_every" => self.checkpoint_every = int(key, value)?,
            other => bail!(Config, "unknown config key {other:?}"),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        match assignment.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v),
            None => bail!(Config, "expected key=value, got {assignment:?}"),
        }
    }

    /// Applies every assignment from a flat `key=value` file.
    /// Blank lines and lines starting with `#` are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Renders the configuration in the file format accepted by [`apply_file`](Self::apply_file).
    pub fn to_kv_string(&self) -> String {
        let opt = |v: Option<usize>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("lambda_b", self.lambda_b.to_string());
        line("lambda_T", self.lambda_t.to_string());
        line("lambda_refine", self.lambda_refine.to_string());
        line("prompt_len", self.prompt_len.to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr_phaseA", self.lr_phase_a.to_string());
        line("lr_phaseB", self.lr_phase_b.to_string());
        line("lr_phaseC", self.lr_phase_c.to_string());
        line("epochs", self.epochs.to_string());
        line("epochs_phaseA", opt(self.epochs_phase_a));
        line("epochs_phaseB", opt(self.epochs_phase_b));
        line("epochs_phaseC", opt(self.epochs_phase_c));
        line("clamp_eps", self.clamp_eps.to_string());
        line("seed", self.seed.to_string());
        line("enabled_losses", self.enabled_losses.to_string());
        line("weight_decay", self.weight_decay.to_string());
        line("prompt_init_std", self.prompt_init_std.to_string());
        line("gen_hidden", self.gen_hidden.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_b", self.lambda_b),
            ("lambda_T", self.lambda_t),
            ("lambda_refine", self.lambda_refine),
            ("weight_decay", self.weight_decay),
        ];
        for (k, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "{k} must be a finite non-negative number, got {v}");
            }
        }
        let positive = [
            ("lr_phaseA", self.lr_phase_a),
            ("lr_phaseB", self.lr_phase_b),
            ("lr_phaseC", self.lr_phase_c),
            ("prompt_init_std", self.prompt_init_std),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                bail!(Config, "{k} must be positive, got {v}");
            }
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps <= 0.01) {
            bail!(Config, "clamp_eps must lie in (0, 0.01], got {}", self.clamp_eps);
        }
        let ints = [
            ("prompt_len", self.prompt_len),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("gen_hidden", self.gen_hidden),
        ];
        for (k, v) in ints {
            if v == 0 {
                bail!(Config, "{k} must be at least 1");
            }
        }
        for (k, v) in [
            ("epochs_phaseA", self.epochs_phase_a),
            ("epochs_phaseB", self.epochs_phase_b),
            ("epochs_phaseC", self.epochs_phase_c),
        ] {
            if v == Some(0) {
                bail!(Config, "{k} must be at least 1 when set");
            }
        }
        Ok(())
    }
}

/// Preset for a dataset tag: `voc`, `coco` or `toy`.
///
/// `voc` and `coco` carry the reference hyper-parameters for those benchmarks. `toy` is sized
/// for the synthetic corpus produced by `make-toy`: it trains in seconds on
/// a CPU, and its loss weights are larger because the toy encoder's
/// similarity scores live on a different scale than a pretrained model's.
pub fn default_config(dataset_tag: &str) -> Result<RunConfig> {
    let base = RunConfig {
        lambda_b: 2.4,
        lambda_t: 0.02,
        lambda_refine: 0.05,
        prompt_len: 30,
        batch_size: 64,
        lr_phase_a: 5e-4,
        lr_phase_b: 5e-4,
        lr_phase_c: 5e-4,
        epochs: 60,
        epochs_phase_a: None,
        epochs_phase_b: None,
        epochs_phase_c: None,
        clamp_eps: 1e-4,
        seed: 0,
        enabled_losses: LossFlags::ALL,
        weight_decay: 0.01,
        prompt_init_std: 0.02,
        gen_hidden: 16,
        checkpoint_every: 0,
    };
    match dataset_tag {
        "voc" => Ok(base),
        "coco" => Ok(RunConfig {
            lambda_b: 0.75,
            lambda_t: 0.01,
            lambda_refine: 0.2,
            lr_phase_a: 5e-6,
            lr_phase_b: 5e-6,
            lr_phase_c: 5e-6,
            ..base
        }),
        "toy" => Ok(RunConfig {
            lambda_b: 2.4,
            lambda_t: 0.02,
            lambda_refine: 1.0,
            prompt_len: 4,
            batch_size: 16,
            lr_phase_a: 0.02,
            lr_phase_b: 0.05,
            lr_phase_c: 0.01,
            epochs: 30,
            gen_hidden: 8,
            ..base
        }),
        other => bail!(
            Config,
            "unknown dataset tag {other:?}; valid tags are {}",
            DATASET_TAGS.join(", ")
        ),
    }
}
