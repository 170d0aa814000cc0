//! Merging `--config` JSON files into parsed flags.
//!
//! Config keys are flag names with `-` or `_` separators. A flag given on the
//! command line wins over the config file, which wins over the flag default.

use std::fs;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Overlays `config` onto `args` for every flag not set on the command line.
pub fn merge<T>(args: T, matches: &ArgMatches, config: Option<&Path>) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
{
    let Some(path) = config else {
        return Ok(args);
    };
    let text =
        fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let overrides: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config {} is not a JSON object: {e}", path.display())))?;
    apply(args, matches, overrides)
}

fn apply<T>(args: T, matches: &ArgMatches, overrides: Map<String, Value>) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
{
    let mut value = serde_json::to_value(args).map_err(|e| Failure::Usage(e.to_string()))?;
    let fields = value
        .as_object_mut()
        .expect("command arguments serialize as a JSON object");
    for (key, v) in overrides {
        let id = key.replace('-', "_");
        if !fields.contains_key(&id) {
            return Err(Failure::Usage(format!("unknown config key {key:?}")));
        }
        if matches.value_source(&id) != Some(ValueSource::CommandLine) {
            fields.insert(id, v);
        }
    }
    serde_json::from_value(value).map_err(|e| Failure::Usage(format!("invalid config value: {e}")))
}
