//! Flat `key=value` run configuration.
//!
//! Every trainer, model, loss, schedule, and spawn field is addressable by
//! one flat key, so config files grep and diff cleanly across sweeps.
//! Unknown keys are rejected; parse → serialize → parse is a fixpoint.

use std::fmt::Write as FmtWrite;
use std::path::Path;

use crate::curriculum::{ScheduleKind, SpawnCriterion};
use crate::error::{Error, Result};
use crate::losses::SsimMode;
use crate::trainer::TrainConfig;

/// A full run description: training hyperparameters plus the frozen
/// featurizer knobs that tie a model to a patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Patch edge in pixels for the frozen featurizer.
    pub patch: usize,
    /// Seed of the frozen featurizer projection.
    pub feat_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            patch: 8,
            feat_seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::Config(format!(
            "config key '{}' has invalid value '{}'",
            key, value
        ))
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Set one flat key. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "total_iters" => t.total_iters = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "learning_rate" => t.learning_rate = parse_num(key, value)?,
            "beta1" => t.beta1 = parse_num(key, value)?,
            "beta2" => t.beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam_eps = parse_num(key, value)?,
            "warmup_frac" => t.warmup_frac = parse_num(key, value)?,
            "clip_norm" => t.clip_norm = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "eval_every" => t.eval_every = parse_num(key, value)?,
            "d_feat" => t.model.d_feat = parse_num(key, value)?,
            "d_slot" => t.model.d_slot = parse_num(key, value)?,
            "hidden" => t.model.hidden = parse_num(key, value)?,
            "dec_hidden" => t.model.dec_hidden = parse_num(key, value)?,
            "n" => t.model.n = parse_num(key, value)?,
            "k_max" => t.model.k_max = parse_num(key, value)?,
            "l_first" => t.model.l_first = parse_num(key, value)?,
            "l_later" => t.model.l_later = parse_num(key, value)?,
            "heads" => t.model.heads = parse_num(key, value)?,
            "lambda_ssc" => t.loss.lambda_ssc = parse_num(key, value)?,
            "lambda_ssim" => t.loss.lambda_ssim = parse_num(key, value)?,
            "tau" => t.loss.tau = parse_num(key, value)?,
            "ssim_c1" => t.loss.ssim_c1 = parse_num(key, value)?,
            "ssim_c2" => t.loss.ssim_c2 = parse_num(key, value)?,
            "ssim_mode" => t.loss.ssim_mode = SsimMode::parse(value.trim())?,
            "k_init" => t.schedule.k_init = parse_num(key, value)?,
            "sigma" => t.schedule.sigma_inc = parse_num(key, value)?,
            "stages" => t.schedule.stages = parse_num(key, value)?,
            "stage_fracs" => t.schedule.stage_fractions = parse_list(key, value)?,
            "schedule" => t.schedule.kind = ScheduleKind::parse(value.trim())?,
            "beta" => t.spawn.beta = parse_num(key, value)?,
            "spawn_criterion" => t.spawn.criterion = SpawnCriterion::parse(value.trim())?,
            "ema_decay" => t.spawn.ema_decay = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "feat_seed" => self.feat_seed = parse_num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{}'", other)));
            }
        }
        Ok(())
    }

    /// All keys with their current values, one per line, stable order.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{}={}", k, v);
        }
        out
    }

    /// `(key, value)` pairs in the canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        vec![
            ("total_iters", t.total_iters.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("warmup_frac", t.warmup_frac.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("d_feat", t.model.d_feat.to_string()),
            ("d_slot", t.model.d_slot.to_string()),
            ("hidden", t.model.hidden.to_string()),
            ("dec_hidden", t.model.dec_hidden.to_string()),
            ("n", t.model.n.to_string()),
            ("k_max", t.model.k_max.to_string()),
            ("l_first", t.model.l_first.to_string()),
            ("l_later", t.model.l_later.to_string()),
            ("heads", t.model.heads.to_string()),
            ("lambda_ssc", t.loss.lambda_ssc.to_string()),
            ("lambda_ssim", t.loss.lambda_ssim.to_string()),
            ("tau", t.loss.tau.to_string()),
            ("ssim_c1", t.loss.ssim_c1.to_string()),
            ("ssim_c2", t.loss.ssim_c2.to_string()),
            ("ssim_mode", t.loss.ssim_mode.as_str().to_string()),
            ("k_init", t.schedule.k_init.to_string()),
            ("sigma", t.schedule.sigma_inc.to_string()),
            ("stages", t.schedule.stages.to_string()),
            ("stage_fracs", fmt_list(&t.schedule.stage_fractions)),
            ("schedule", t.schedule.kind.as_str().to_string()),
            ("beta", t.spawn.beta.to_string()),
            ("spawn_criterion", t.spawn.criterion.as_str().to_string()),
            ("ema_decay", t.spawn.ema_decay.to_string()),
            ("patch", self.patch.to_string()),
            ("feat_seed", self.feat_seed.to_string()),
        ]
    }

    /// Parse a config document: one `key=value` per line, `#` comments and
    /// blank lines ignored, later keys overriding earlier ones. Starts from
    /// the defaults, so a file only needs the keys it changes.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config line {} is not key=value: '{}'",
                    lineno + 1,
                    raw
                ))
            })?;
            cfg.apply(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("patch must be at least 1".into()));
        }
        self.train.validate()
    }
}
