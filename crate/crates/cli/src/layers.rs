//! Effective configuration: preset, then config file, then flags.

use std::path::Path;

use edgeflow::config::RunConfig;
use edgeflow::{Error, Result};
use serde_json::{Map, Value};

use crate::args::{Common, Preset};

fn preset(p: Preset) -> RunConfig {
    match p {
        Preset::Default => RunConfig::default(),
        Preset::Desk32 => RunConfig::desk32(),
    }
}

/// Recursively overlays `top` onto `base`; objects merge, anything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Turns `a.b.c=value` into `{"a": {"b": {"c": value}}}`.
pub fn parse_override(s: &str) -> Result<Value> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidParam(format!("override `{s}` is not PATH=VALUE")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::InvalidParam(format!("override `{s}` has an empty key")));
    }
    let mut v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidParam(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidParam(format!("config {}: {e}", path.display())))
}

pub fn effective(common: &Common) -> Result<RunConfig> {
    let mut v = serde_json::to_value(preset(common.preset)).expect("config serializes");
    if let Some(path) = &common.config {
        merge(&mut v, read_file(path)?);
    }
    for o in &common.overrides {
        merge(&mut v, parse_override(o)?);
    }
    if let Some(seed) = common.seed {
        merge(&mut v, serde_json::json!({ "seed": seed }));
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::InvalidParam(format!("config: {e}")))?;
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn common() -> Common {
        Common {
            config: None,
            seed: None,
            preset: Preset::Default,
            overrides: Vec::new(),
            out: PathBuf::from("run"),
        }
    }

    #[test]
    fn overrides_build_nested_objects() {
        assert_eq!(
            parse_override("flow.train.steps=5").unwrap(),
            serde_json::json!({"flow": {"train": {"steps": 5}}})
        );
        assert_eq!(
            parse_override("refine.metric=mi").unwrap(),
            serde_json::json!({"refine": {"metric": "mi"}})
        );
        assert!(parse_override("steps").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn flags_beat_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"flow": {"train": {"steps": 40, "batch_size": 3}}}"#).unwrap();
        let mut c = common();
        c.preset = Preset::Desk32;
        c.config = Some(path);
        c.overrides = vec!["flow.train.steps=7".into()];
        let cfg = effective(&c).unwrap();
        assert_eq!(cfg.flow.train.steps, 7);
        assert_eq!(cfg.flow.train.batch_size, 3);
        assert_eq!(cfg.patches.patch_size, 16);
        assert_eq!(cfg.refine.iterations, 6);
    }

    #[test]
    fn unknown_keys_fail() {
        let mut c = common();
        c.overrides = vec!["flow.train.nope=1".into()];
        assert!(matches!(effective(&c), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn seed_flag_resolves_module_seeds() {
        let mut c = common();
        c.seed = Some(3);
        let cfg = effective(&c).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg, RunConfig { seed: Some(3), ..Default::default() }.resolved());
    }
}
