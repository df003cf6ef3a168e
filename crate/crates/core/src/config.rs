//! Flat `key = value` configuration text.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the file (if any), then `overrides` in order.
pub fn load_train_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        for (k, v) in parse_kv(&text)? {
            cfg.set(&k, &v)?;
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blanks() {
        let kv = parse_kv("# top\n\nsteps = 5 # inline\n gamma=0.4\n").unwrap();
        assert_eq!(kv, vec![("steps".into(), "5".into()), ("gamma".into(), "0.4".into())]);
        assert!(parse_kv("novalue\n").is_err());
    }

    #[test]
    fn overrides_apply_last() {
        let cfg = load_train_config(None, &[("steps".into(), "7".into()), ("steps".into(), "9".into())]).unwrap();
        assert_eq!(cfg.steps, 9);
        assert!(load_train_config(None, &[("bogus".into(), "1".into())]).is_err());
    }

    #[test]
    fn echo_roundtrip() {
        let mut a = TrainConfig::default();
        a.gate.lambda = 0.25;
        a.net.base_channels = 16;
        let mut b = TrainConfig::default();
        for (k, v) in parse_kv(&a.to_kv()).unwrap() {
            b.set(&k, &v).unwrap();
        }
        assert_eq!(a, b);
    }
}
