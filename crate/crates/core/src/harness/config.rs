//! Flat `key = value` config files mirroring the training and model
//! settings.
//!
//! Recognized keys (one per line, `#` comments allowed):
//!
//! ```text
//! epochs, learning_rate, batch_size, seed, split_ratio,
//! h, d_f, d_c, heads, experts, summary_dim, conv_kernel, router_resample,
//! mlp_hidden (comma-separated), temperature, temperature_floor, norm_cap,
//! grid_q, dropout, dropout_projections, scheme (linear|natural-cubic),
//! solver (euler|midpoint), no_bidir, no_moe, no_crossattn,
//! decoder_per_output
//! ```

use std::path::Path;

use super::train::TrainConfig;
use crate::error::{FameError, Result};

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| FameError::Config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(FameError::Config(format!("invalid boolean '{v}' for key '{key}'"))),
    }
}

/// Parse config text into a [`TrainConfig`], starting from defaults. Channel
/// counts come from the dataset at training time.
pub fn parse_config_text(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(1, 1);
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FameError::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        let key = key.trim();
        let v = value.trim();
        match key {
            "epochs" => cfg.epochs = parse(key, v)?,
            "learning_rate" => cfg.learning_rate = parse(key, v)?,
            "batch_size" => cfg.batch_size = parse(key, v)?,
            "seed" => cfg.seed = parse(key, v)?,
            "split_ratio" => cfg.split_ratio = parse(key, v)?,
            "h" => cfg.model.h = parse(key, v)?,
            "d_f" => cfg.model.d_f = parse(key, v)?,
            "d_c" => cfg.model.d_c = parse(key, v)?,
            "heads" => cfg.model.heads = parse(key, v)?,
            "experts" => cfg.model.experts = parse(key, v)?,
            "summary_dim" => cfg.model.summary_dim = parse(key, v)?,
            "conv_kernel" => cfg.model.conv_kernel = parse(key, v)?,
            "router_resample" => cfg.model.router_resample = parse(key, v)?,
            "mlp_hidden" => {
                cfg.model.mlp_hidden = v
                    .split(',')
                    .map(|x| parse("mlp_hidden", x.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "temperature" => cfg.model.temperature = parse(key, v)?,
            "temperature_floor" => cfg.model.temperature_floor = parse(key, v)?,
            "norm_cap" => cfg.model.norm_cap = parse(key, v)?,
            "grid_q" => cfg.model.grid_q = parse(key, v)?,
            "dropout" => cfg.model.dropout = parse(key, v)?,
            "dropout_projections" => cfg.model.dropout_projections = parse_bool(key, v)?,
            "scheme" => cfg.model.scheme = v.parse()?,
            "solver" => cfg.model.solver = v.parse()?,
            "no_bidir" => cfg.model.no_bidir = parse_bool(key, v)?,
            "no_moe" => cfg.model.no_moe = parse_bool(key, v)?,
            "no_crossattn" => cfg.model.no_crossattn = parse_bool(key, v)?,
            "decoder_per_output" => cfg.model.decoder_per_output = parse_bool(key, v)?,
            other => {
                return Err(FameError::Config(format!(
                    "line {}: unknown key '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config_file(path: &Path) -> Result<TrainConfig> {
    parse_config_text(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Solver;
    use crate::funcpath::Scheme;

    #[test]
    fn parses_documented_keys() {
        let text = "\
# training
epochs = 42
learning_rate = 0.005
batch_size = 8
seed = 7
split_ratio = 0.75
h = 12
experts = 4
mlp_hidden = 16, 24
scheme = natural-cubic
solver = midpoint
no_moe = true
grid_q = 48
";
        let cfg = parse_config_text(text).unwrap();
        assert_eq!(cfg.epochs, 42);
        assert_eq!(cfg.learning_rate, 0.005);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.split_ratio, 0.75);
        assert_eq!(cfg.model.h, 12);
        assert_eq!(cfg.model.experts, 4);
        assert_eq!(cfg.model.mlp_hidden, vec![16, 24]);
        assert_eq!(cfg.model.scheme, Scheme::NaturalCubic);
        assert_eq!(cfg.model.solver, Solver::Midpoint);
        assert!(cfg.model.no_moe);
        assert_eq!(cfg.model.grid_q, 48);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(parse_config_text("bogus = 1").is_err());
        assert!(parse_config_text("epochs = abc").is_err());
        assert!(parse_config_text("epochs 3").is_err());
        assert!(parse_config_text("split_ratio = 1.5").is_err());
    }

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config_text("# nothing\n\n").unwrap();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.model.grid_q, 64);
        assert_eq!(cfg.model.dropout, 0.2);
    }
}
