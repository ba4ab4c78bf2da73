//! Flat `key=value` configuration files.

use std::path::Path;

use granedge_core::train::TrainConfig;

use crate::error::{io_err, load_err, Result};

/// Parse `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| load_err!("line {}: expected key=value, got `{line}`", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// One `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| load_err!("override `{s}` is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Apply pairs on top of `cfg`: other keys first, then `stn.preset`, then
/// the remaining `stn.*` keys, each group in order. A preset therefore sees
/// the final provider settings and explicit network keys refine it.
pub fn apply_pairs(cfg: &mut TrainConfig, pairs: &[(String, String)]) -> Result<()> {
    let rank = |k: &str| match k {
        "stn.preset" => 1,
        _ if k.starts_with("stn.") => 2,
        _ => 0,
    };
    for group in 0..3 {
        for (k, v) in pairs.iter().filter(|(k, _)| rank(k) == group) {
            cfg.set(k, v)?;
        }
    }
    Ok(())
}

/// Defaults, then the file (if any), then the overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(io_err(p))?;
        let pairs = parse_pairs(&text).map_err(|e| load_err!("{}: {e}", p.display()))?;
        apply_pairs(&mut cfg, &pairs)?;
    }
    let over = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    apply_pairs(&mut cfg, &over)?;
    cfg.validate()?;
    Ok(cfg)
}

/// The configuration as file text, one pair per line.
pub fn render_config(cfg: &TrainConfig) -> String {
    cfg.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
