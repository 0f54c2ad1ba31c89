//! Flat `key = value` training configuration, one entry per line, `#` comments.

use std::path::Path;

use crate::augment::AugmentStrategy;
use crate::error::{Error, Result};
use crate::transport::Penalty;
use crate::trainer::{Epsilon2Preset, Labeler, TrainConfig};

fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        what: "config",
        detail: format!("line {line}: bad value {value:?} for {key}"),
    })
}

fn choice<T: Copy>(key: &str, value: &str, line: usize, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::Parse {
            what: "config",
            detail: format!(
                "line {line}: {key} must be one of {}, got {value:?}",
                options.iter().map(|(n, _)| *n).collect::<Vec<_>>().join("|")
            ),
        })
}

/// Applies every entry in `text` on top of [`TrainConfig::default`].
///
/// Keys are the field names of the training, transport and augmentation
/// configs; `augment_strategy` and `augment_seed` address the augmentation
/// fields. Unknown keys are rejected.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            what: "config",
            detail: format!("line {line}: expected key=value, got {content:?}"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "lambda_i" => cfg.lambda_i = parse(key, value, line)?,
            "batch_size" => cfg.batch_size = parse(key, value, line)?,
            "delta" => cfg.delta = parse(key, value, line)?,
            "max_steps" => cfg.max_steps = Some(parse(key, value, line)?),
            "warmup_instance_only_steps" => cfg.warmup_instance_only_steps = parse(key, value, line)?,
            "label_fit_steps" => cfg.label_fit_steps = Some(parse(key, value, line)?),
            "num_refreshes" => cfg.num_refreshes = parse(key, value, line)?,
            "min_stop_step" => cfg.min_stop_step = Some(parse(key, value, line)?),
            "head_lr" => cfg.head_lr = parse(key, value, line)?,
            "tau" => cfg.tau = parse(key, value, line)?,
            "proj_dim" => cfg.proj_dim = parse(key, value, line)?,
            "seed" => cfg.seed = parse(key, value, line)?,
            "mu" => cfg.mu = parse(key, value, line)?,
            "prefer_stored_views" => cfg.prefer_stored_views = parse(key, value, line)?,
            "labeler" => {
                cfg.labeler = choice(
                    key,
                    value,
                    line,
                    &[
                        ("saot", Labeler::Saot),
                        ("fixed", Labeler::Fixed),
                        ("ma", Labeler::MovingAverage),
                        ("kl", Labeler::Kl),
                    ],
                )?
            }
            "epsilon2_preset" => {
                cfg.epsilon2_preset = Some(choice(
                    key,
                    value,
                    line,
                    &[
                        ("balanced", Epsilon2Preset::Balanced),
                        ("light_imbalanced", Epsilon2Preset::LightImbalanced),
                        ("heavy_imbalanced", Epsilon2Preset::HeavyImbalanced),
                    ],
                )?)
            }
            "epsilon1" => cfg.saot.epsilon1 = parse(key, value, line)?,
            "epsilon2" => cfg.saot.epsilon2 = parse(key, value, line)?,
            "outer_iters" => cfg.saot.outer_iters = parse(key, value, line)?,
            "newton_iters" => cfg.saot.newton_iters = parse(key, value, line)?,
            "marginal_floor" => cfg.saot.marginal_floor = parse(key, value, line)?,
            "stall_tol" => cfg.saot.stall_tol = parse(key, value, line)?,
            "b_change_tol" => cfg.saot.b_change_tol = parse(key, value, line)?,
            "polish_iters" => cfg.saot.polish_iters = parse(key, value, line)?,
            "penalty" => {
                cfg.saot.penalty = choice(
                    key,
                    value,
                    line,
                    &[("log_barrier", Penalty::LogBarrier), ("kl_to_previous", Penalty::KlToPrevious)],
                )?
            }
            "augment_strategy" => {
                cfg.augment.strategy = choice(
                    key,
                    value,
                    line,
                    &[
                        ("precomputed", AugmentStrategy::Precomputed),
                        ("gaussian_noise", AugmentStrategy::GaussianNoise),
                        ("feature_dropout", AugmentStrategy::FeatureDropout),
                    ],
                )?;
                cfg.prefer_stored_views = false;
            }
            "noise_sigma" => cfg.augment.noise_sigma = parse(key, value, line)?,
            "dropout_rate" => cfg.augment.dropout_rate = parse(key, value, line)?,
            _ => {
                return Err(Error::Parse {
                    what: "config",
                    detail: format!("line {line}: unknown key {key:?}"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_train_config(&text)
}
