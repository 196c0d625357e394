//! Bundled scenario configurations.

use std::path::Path;

use poolcal_core::ScenarioConfig;

use crate::CliError;

pub const TABLE1: &str = include_str!("../presets/table1.json");
pub const TABLE2: &str = include_str!("../presets/table2.json");

/// Bundled preset by name (`table1`, `table2`, with or without `.json`).
pub fn preset(name: &str) -> Option<&'static str> {
    match name.trim_end_matches(".json") {
        "table1" => Some(TABLE1),
        "table2" => Some(TABLE2),
        _ => None,
    }
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, CliError> {
    let config: ScenarioConfig =
        serde_json::from_str(text).map_err(|e| CliError::Format(format!("scenario config: {e}")))?;
    config.validate()?;
    Ok(config)
}

/// Reads a config file; a missing file named like a preset falls back to
/// the bundled copy. Returns the config and the bytes it was parsed from.
pub fn load_config(path: &Path) -> Result<(ScenarioConfig, String), CliError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match preset(name) {
                Some(t) if path.parent().is_none_or(|p| p.as_os_str().is_empty()) => t.to_string(),
                _ => return Err(CliError::io(path, e)),
            }
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    let config = parse_config(&text).map_err(|e| e.in_file(path))?;
    Ok((config, text))
}

/// Applies a `POOLCAL_SEED` value, if one is given.
pub fn apply_seed_override(config: &mut ScenarioConfig, value: Option<&str>) -> Result<(), CliError> {
    if let Some(v) = value {
        config.seed = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("POOLCAL_SEED must be an unsigned integer, got {v:?}")))?;
    }
    Ok(())
}
