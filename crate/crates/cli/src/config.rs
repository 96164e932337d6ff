//! Flat `key = value` run configuration.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use protoform::{Formulation, TrainConfig};

/// Keys accepted in a config file, in the order they are documented.
pub const KEYS: &[&str] = &[
    "formulation",
    "learning_rate",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "lambda_clst",
    "lambda_sep",
    "per_class",
    "dim",
    "d_hidden",
    "mixture_components",
    "patch",
    "eps",
    "train_neck",
    "train_prototypes",
    "train_head",
    "parallel",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

/// Applies one key to `cfg`.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "formulation" => cfg.formulation = parse::<Formulation>(key, value)?,
        "learning_rate" | "lr" => cfg.learning_rate = parse(key, value)?,
        "weight_decay" | "wd" => cfg.weight_decay = parse(key, value)?,
        "batch_size" | "batch" => cfg.batch_size = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "lambda_clst" => cfg.weights.lambda_clst = parse(key, value)?,
        "lambda_sep" => cfg.weights.lambda_sep = parse(key, value)?,
        "per_class" | "q" => cfg.per_class = parse(key, value)?,
        "dim" => cfg.dim = parse(key, value)?,
        "d_hidden" => cfg.d_hidden = Some(parse(key, value)?),
        "mixture_components" => cfg.mixture_components = parse(key, value)?,
        "patch" => cfg.patch = parse(key, value)?,
        "eps" => cfg.eps = parse(key, value)?,
        "train_neck" => cfg.trainable.neck = parse(key, value)?,
        "train_prototypes" => cfg.trainable.prototypes = parse(key, value)?,
        "train_head" => cfg.trainable.head = parse(key, value)?,
        "parallel" => cfg.parallel = parse(key, value)?,
        _ => bail!("unknown config key `{key}` (valid: {})", KEYS.join(", ")),
    }
    Ok(())
}

/// Parses config text on top of `cfg`. Blank lines and lines starting with
/// `#` are skipped.
pub fn apply_text(cfg: &mut TrainConfig, text: &str) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key=value, got `{line}`", i + 1))?;
        apply(cfg, key.trim(), value.trim()).with_context(|| format!("line {}", i + 1))?;
    }
    Ok(())
}

pub fn apply_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    apply_text(cfg, &text).with_context(|| format!("in config {}", path.display()))
}

/// Renders `cfg` in the same format.
pub fn render(cfg: &TrainConfig) -> String {
    let t = &cfg.trainable;
    let mut out = String::new();
    let mut put = |k: &str, v: String| {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    };
    put("formulation", cfg.formulation.tag().into());
    put("learning_rate", cfg.learning_rate.to_string());
    put("weight_decay", cfg.weight_decay.to_string());
    put("batch_size", cfg.batch_size.to_string());
    put("epochs", cfg.epochs.to_string());
    put("seed", cfg.seed.to_string());
    put("lambda_clst", cfg.weights.lambda_clst.to_string());
    put("lambda_sep", cfg.weights.lambda_sep.to_string());
    put("per_class", cfg.per_class.to_string());
    put("dim", cfg.dim.to_string());
    if let Some(h) = cfg.d_hidden {
        put("d_hidden", h.to_string());
    }
    put("mixture_components", cfg.mixture_components.to_string());
    put("patch", cfg.patch.to_string());
    put("eps", cfg.eps.to_string());
    put("train_neck", t.neck.to_string());
    put("train_prototypes", t.prototypes.to_string());
    put("train_head", t.head.to_string());
    put("parallel", cfg.parallel.to_string());
    out
}
