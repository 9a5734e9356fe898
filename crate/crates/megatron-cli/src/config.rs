//! Strict TOML configuration loading with environment-variable
//! interpolation for dataset paths.

use std::path::{Path, PathBuf};

use megatron_core::dataset::DatasetKind;
use megatron_core::harness::ExperimentConfig;
use megatron_core::{Error, Result};

/// Fallback dataset root when the config omits `dataset.path`.
pub const DATA_DIR_ENV: &str = "MEGATRON_DATA_DIR";

/// Expand `${VAR}` references in a path string from the environment.
/// Unset variables are a configuration error.
pub fn interpolate_env(raw: &str) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| {
            Error::Config(format!("unterminated ${{...}} in path `{raw}`"))
        })?;
        let var = &after[..end];
        let value = std::env::var(var)
            .map_err(|_| Error::Config(format!("environment variable `{var}` is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Parse a strict TOML experiment configuration. Unknown keys fail with
/// the offending key path; file-backed dataset kinds fall back to
/// `MEGATRON_DATA_DIR` when no path is given.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut cfg: ExperimentConfig = toml::from_str(&raw)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    if let Some(p) = &cfg.dataset.path {
        let expanded = interpolate_env(&p.to_string_lossy())?;
        cfg.dataset.path = Some(PathBuf::from(expanded));
    } else if cfg.dataset.kind != DatasetKind::Synthetic {
        if let Ok(root) = std::env::var(DATA_DIR_ENV) {
            cfg.dataset.path = Some(PathBuf::from(root));
        }
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

/// Serialize the fully-resolved config back to TOML (the dry-run output
/// and the snapshot format).
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("serialize config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        std::env::set_var("MEGATRON_TEST_VAR", "/tmp/data");
        assert_eq!(
            interpolate_env("${MEGATRON_TEST_VAR}/cifar").unwrap(),
            "/tmp/data/cifar"
        );
        assert_eq!(interpolate_env("/plain/path").unwrap(), "/plain/path");
        assert!(interpolate_env("${MEGATRON_UNSET_VAR_XYZ}/x").is_err());
        assert!(interpolate_env("${broken").is_err());
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 9\n").unwrap();
        let cfg = load_config(&path, None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.seed, 10); // resolved from master
    }

    #[test]
    fn unknown_key_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "stealth_mode = true\n").unwrap();
        let err = load_config(&path, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stealth_mode"), "{msg}");
    }

    #[test]
    fn nested_unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[trigger]\nwobble = 3\n").unwrap();
        let err = load_config(&path, None).unwrap_err();
        assert!(err.to_string().contains("wobble"));
    }

    #[test]
    fn seed_override_applies_before_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n").unwrap();
        let cfg = load_config(&path, Some(77)).unwrap();
        assert_eq!(cfg.seed, 77);
        assert_eq!(cfg.surrogate_train.seed, 79);
    }

    #[test]
    fn bad_schema_version_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "schema_version = 99\n").unwrap();
        let err = load_config(&path, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn toml_roundtrip_materializes_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n").unwrap();
        let cfg = load_config(&path, None).unwrap();
        let rendered = to_toml(&cfg).unwrap();
        assert!(rendered.contains("schema_version = 1"));
        assert!(rendered.contains("[dataset]"));
        assert!(rendered.contains("[poison.mode]"));
        // Round trip parses to the same config.
        let back: ExperimentConfig = toml::from_str(&rendered).unwrap();
        assert_eq!(back, cfg);
    }
}
