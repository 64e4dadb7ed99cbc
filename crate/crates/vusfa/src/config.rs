//! Run configuration: a flat `key = value` text format with sections,
//! defaults for every field, and strict validation.
//!
//! Precedence is defaults < config file < command-line flags. The fully
//! resolved configuration is echoed into the output directory of every run
//! (`resolved.cfg`), and that echo parses back to the identical config, so a
//! run can always be reproduced from its artifacts.
//!
//! Unknown keys, type mismatches and invariant violations are rejected with
//! the offending key and line.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::EvalConfig;
use crate::grid::{EnvConfig, GoalDistance, FRAME_STACK};
use crate::model::Variant;
use crate::trainer::Hyper;

pub const OUT_DIR_ENV: &str = "VUSFA_OUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown section {section:?}")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key {key:?} in section [{section}]")]
    UnknownKey {
        line: usize,
        key: String,
        section: String,
    },
    #[error("line {line}: key {key:?}: expected {expected}, got {value:?}")]
    BadValue {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: expected `key = value` or `[section]`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invariant(String),
}

/// Everything a run needs, resolved.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Scene manifest path; the built-in default world when absent.
    pub scenes: Option<PathBuf>,
    pub variant: Variant,
    pub base_seed: u64,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Single-worker fully deterministic mode.
    pub strict: bool,
    pub env: EnvConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub enc_hidden: usize,
    pub hyper: Hyper,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenes: None,
            variant: Variant::Vusfa,
            base_seed: 1,
            out_dir: None,
            checkpoint: None,
            strict: false,
            env: EnvConfig::default(),
            embed_dim: 64,
            hidden_dim: 128,
            enc_hidden: 256,
            hyper: Hyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line overrides; `None` leaves the config value untouched.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scenes: Option<PathBuf>,
    pub strict: bool,
    pub alg1_literal: bool,
}

fn bad(line: usize, key: &str, expected: &'static str, value: &str) -> ConfigError {
    ConfigError::BadValue {
        line,
        key: key.to_string(),
        expected,
        value: value.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(
    line: usize,
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| bad(line, key, expected, value))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(line, key, "a boolean (true/false)", value)),
    }
}

fn parse_distance(line: usize, key: &str, value: &str) -> Result<GoalDistance, ConfigError> {
    let v = value.trim();
    if v.eq_ignore_ascii_case("random") {
        return Ok(GoalDistance::Random);
    }
    v.parse::<usize>()
        .map(GoalDistance::Steps)
        .map_err(|_| bad(line, key, "a step count or `random`", value))
}

fn parse_seeds(line: usize, key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    let seeds: Result<Vec<u64>, _> = value
        .split([',', ' '])
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>())
        .collect();
    let seeds = seeds.map_err(|_| bad(line, key, "a list of integers", value))?;
    if seeds.is_empty() {
        return Err(bad(line, key, "a nonempty list of integers", value));
    }
    Ok(seeds)
}

impl RunConfig {
    /// Apply one `key = value` from a config file.
    fn set(
        &mut self,
        section: &str,
        key: &str,
        value: &str,
        line: usize,
    ) -> Result<(), ConfigError> {
        let unknown = || {
            Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
                section: section.to_string(),
            })
        };
        match section {
            "run" => match key {
                "scenes" => self.scenes = Some(PathBuf::from(value.trim())),
                "variant" => {
                    self.variant = Variant::parse(value).ok_or_else(|| {
                        bad(line, key, "one of GVF, USFA, USFA_SFDP, VUSFA", value)
                    })?
                }
                "seed" => self.base_seed = parse_num(line, key, value, "an integer")?,
                "out" => self.out_dir = Some(PathBuf::from(value.trim())),
                "checkpoint" => self.checkpoint = Some(PathBuf::from(value.trim())),
                "strict" => self.strict = parse_bool(line, key, value)?,
                _ => return unknown(),
            },
            "env" => match key {
                "step_penalty" => self.env.step_penalty = parse_num(line, key, value, "a number")?,
                "goal_reward" => self.env.goal_reward = parse_num(line, key, value, "a number")?,
                "episode_cap" => self.env.episode_cap = parse_num(line, key, value, "an integer")?,
                "frame_stack" => self.env.frame_stack = parse_num(line, key, value, "an integer")?,
                _ => return unknown(),
            },
            "model" => match key {
                "embed_dim" => self.embed_dim = parse_num(line, key, value, "an integer")?,
                "hidden_dim" => self.hidden_dim = parse_num(line, key, value, "an integer")?,
                "enc_hidden" => self.enc_hidden = parse_num(line, key, value, "an integer")?,
                _ => return unknown(),
            },
            "train" => match key {
                "gamma" => self.hyper.gamma = parse_num(line, key, value, "a number")?,
                "t_max" => self.hyper.t_max = parse_num(line, key, value, "an integer")?,
                "lambda_pi" => self.hyper.lambda_pi = parse_num(line, key, value, "a number")?,
                "lambda_v" => self.hyper.lambda_v = parse_num(line, key, value, "a number")?,
                "lambda_psi" => self.hyper.lambda_psi = parse_num(line, key, value, "a number")?,
                "i_c" => self.hyper.i_c = parse_num(line, key, value, "a number")?,
                "alpha_beta" => self.hyper.alpha_beta = parse_num(line, key, value, "a number")?,
                "total_steps" => self.hyper.total_steps = parse_num(line, key, value, "an integer")?,
                "workers" => self.hyper.workers = parse_num(line, key, value, "an integer")?,
                "entropy_weight" => {
                    self.hyper.entropy_weight = parse_num(line, key, value, "a number")?
                }
                "lr" => self.hyper.lr = parse_num(line, key, value, "a number")?,
                "rms_decay" => self.hyper.rms_decay = parse_num(line, key, value, "a number")?,
                "rms_eps" => self.hyper.rms_eps = parse_num(line, key, value, "a number")?,
                "clip_norm" => self.hyper.clip_norm = parse_num(line, key, value, "a number")?,
                "alg1_literal" => self.hyper.alg1_literal = parse_bool(line, key, value)?,
                "checkpoint_interval" => {
                    self.hyper.checkpoint_interval = parse_num(line, key, value, "an integer")?
                }
                _ => return unknown(),
            },
            "eval" => match key {
                "trials_per_goal" => {
                    self.eval.trials_per_goal = parse_num(line, key, value, "an integer")?
                }
                "finetune_trials" => {
                    self.eval.finetune_trials = parse_num(line, key, value, "an integer")?
                }
                "step_cap" => self.eval.step_cap = parse_num(line, key, value, "an integer")?,
                "goal_distance" => self.eval.goal_distance = parse_distance(line, key, value)?,
                "seeds" => self.eval.seeds = parse_seeds(line, key, value)?,
                "eval_threads" => {
                    self.eval.eval_threads = parse_num(line, key, value, "an integer")?
                }
                "finetune_budget" => {
                    self.eval.finetune_budget = parse_num(line, key, value, "an integer")?
                }
                "new_goals_per_scene" => {
                    self.eval.new_goals_per_scene = parse_num(line, key, value, "an integer")?
                }
                "smoothing_window" => {
                    self.eval.smoothing_window = parse_num(line, key, value, "an integer")?
                }
                "curve_bins" => self.eval.curve_bins = parse_num(line, key, value, "an integer")?,
                _ => return unknown(),
            },
            other => {
                return Err(ConfigError::UnknownSection {
                    line,
                    section: other.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(s) = o.seed {
            self.base_seed = s;
        }
        if let Some(w) = o.workers {
            self.hyper.workers = w;
        }
        if let Some(p) = &o.out {
            self.out_dir = Some(p.clone());
        }
        if let Some(p) = &o.checkpoint {
            self.checkpoint = Some(p.clone());
        }
        if let Some(p) = &o.scenes {
            self.scenes = Some(p.clone());
        }
        if o.strict {
            self.strict = true;
        }
        if o.alg1_literal {
            self.hyper.alg1_literal = true;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invariant(msg));
        self.hyper
            .validate()
            .map_err(|e| ConfigError::Invariant(e.to_string()))?;
        if self.env.episode_cap == 0 {
            return fail("episode_cap must be positive".into());
        }
        if !(self.env.goal_reward > 0.0 && self.env.step_penalty < 0.0) {
            return fail(format!(
                "rewards must satisfy goal_reward > 0 > step_penalty, got {} and {}",
                self.env.goal_reward, self.env.step_penalty
            ));
        }
        if self.env.frame_stack != FRAME_STACK {
            return fail(format!(
                "frame_stack is fixed at {FRAME_STACK} by the observation layout, got {}",
                self.env.frame_stack
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.enc_hidden == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.eval.trials_per_goal == 0 || self.eval.finetune_trials == 0 {
            return fail("trials must be positive".into());
        }
        if self.eval.seeds.is_empty() {
            return fail("eval seeds must be a nonempty list".into());
        }
        if self.eval.step_cap == 0 {
            return fail("eval step_cap must be positive".into());
        }
        Ok(())
    }

    /// The resolved output directory: explicit config beats the
    /// `VUSFA_OUT_DIR` environment fallback.
    pub fn resolved_out_dir(&self) -> Option<PathBuf> {
        self.out_dir
            .clone()
            .or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
    }

    /// Echo the full configuration; parsing the echo reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        if let Some(p) = &self.scenes {
            s.push_str(&format!("scenes = {}\n", p.display()));
        }
        s.push_str(&format!("variant = {}\n", self.variant));
        s.push_str(&format!("seed = {}\n", self.base_seed));
        if let Some(p) = &self.out_dir {
            s.push_str(&format!("out = {}\n", p.display()));
        }
        if let Some(p) = &self.checkpoint {
            s.push_str(&format!("checkpoint = {}\n", p.display()));
        }
        s.push_str(&format!("strict = {}\n", self.strict));
        s.push_str("\n[env]\n");
        s.push_str(&format!("step_penalty = {}\n", self.env.step_penalty));
        s.push_str(&format!("goal_reward = {}\n", self.env.goal_reward));
        s.push_str(&format!("episode_cap = {}\n", self.env.episode_cap));
        s.push_str(&format!("frame_stack = {}\n", self.env.frame_stack));
        s.push_str("\n[model]\n");
        s.push_str(&format!("embed_dim = {}\n", self.embed_dim));
        s.push_str(&format!("hidden_dim = {}\n", self.hidden_dim));
        s.push_str(&format!("enc_hidden = {}\n", self.enc_hidden));
        s.push_str("\n[train]\n");
        let h = &self.hyper;
        s.push_str(&format!("gamma = {}\n", h.gamma));
        s.push_str(&format!("t_max = {}\n", h.t_max));
        s.push_str(&format!("lambda_pi = {}\n", h.lambda_pi));
        s.push_str(&format!("lambda_v = {}\n", h.lambda_v));
        s.push_str(&format!("lambda_psi = {}\n", h.lambda_psi));
        s.push_str(&format!("i_c = {}\n", h.i_c));
        s.push_str(&format!("alpha_beta = {}\n", h.alpha_beta));
        s.push_str(&format!("total_steps = {}\n", h.total_steps));
        s.push_str(&format!("workers = {}\n", h.workers));
        s.push_str(&format!("entropy_weight = {}\n", h.entropy_weight));
        s.push_str(&format!("lr = {}\n", h.lr));
        s.push_str(&format!("rms_decay = {}\n", h.rms_decay));
        s.push_str(&format!("rms_eps = {}\n", h.rms_eps));
        s.push_str(&format!("clip_norm = {}\n", h.clip_norm));
        s.push_str(&format!("alg1_literal = {}\n", h.alg1_literal));
        s.push_str(&format!("checkpoint_interval = {}\n", h.checkpoint_interval));
        s.push_str("\n[eval]\n");
        let e = &self.eval;
        s.push_str(&format!("trials_per_goal = {}\n", e.trials_per_goal));
        s.push_str(&format!("finetune_trials = {}\n", e.finetune_trials));
        s.push_str(&format!("step_cap = {}\n", e.step_cap));
        s.push_str(&format!("goal_distance = {}\n", e.goal_distance));
        let seeds: Vec<String> = e.seeds.iter().map(u64::to_string).collect();
        s.push_str(&format!("seeds = {}\n", seeds.join(",")));
        s.push_str(&format!("eval_threads = {}\n", e.eval_threads));
        s.push_str(&format!("finetune_budget = {}\n", e.finetune_budget));
        s.push_str(&format!("new_goals_per_scene = {}\n", e.new_goals_per_scene));
        s.push_str(&format!("smoothing_window = {}\n", e.smoothing_window));
        s.push_str(&format!("curve_bins = {}\n", e.curve_bins));
        s
    }
}

/// Parse config text on top of the defaults.
pub fn parse_config_text(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section = String::from("run");
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !matches!(section.as_str(), "run" | "env" | "model" | "train" | "eval") {
                return Err(ConfigError::UnknownSection {
                    line: line_no,
                    section,
                });
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line: line_no,
            text: line.to_string(),
        })?;
        cfg.set(&section, key.trim(), value.trim(), line_no)?;
    }
    Ok(cfg)
}

/// Load, override, validate: the single entry point the CLI uses.
pub fn parse_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut cfg = match file {
        Some(path) => parse_config_text(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides);
    cfg.validate()?;
    Ok(cfg)
}
