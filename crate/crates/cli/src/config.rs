//! Flag/config-file merging and the run manifest embedded in artifacts.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Config file: optional top-level keys shared by all subcommands plus one
/// table per subcommand whose keys mirror that subcommand's long flags
/// (with `_` in place of `-`).
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: serde_json::Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let value = serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))?;
        let Value::Object(root) = value else {
            return Err(CliError::Usage("config file must be a table".into()));
        };
        Ok(Self { root })
    }

    /// Shared top-level keys overlaid with the `command` table.
    fn section(&self, command: &str) -> Result<serde_json::Map<String, Value>, CliError> {
        let mut out: serde_json::Map<String, Value> = self
            .root
            .iter()
            .filter(|(_, v)| !v.is_object())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        match self.root.get(command) {
            Some(Value::Object(t)) => out.extend(t.clone()),
            Some(_) => return Err(CliError::Usage(format!("config key '{command}' must be a table"))),
            None => {}
        }
        Ok(out)
    }

    pub fn jobs(&self) -> Option<usize> {
        self.root.get("jobs").and_then(Value::as_u64).map(|n| n as usize)
    }
}

/// Fills every unset flag in `flags` from the config file. Keys the
/// subcommand does not know are a usage error, except the shared `jobs`
/// and `seed` keys, which are ignored by subcommands without them.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&ConfigFile>, command: &str) -> Result<T, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? else {
        unreachable!("option structs serialize to objects");
    };
    if let Some(file) = file {
        for (k, v) in file.section(command)? {
            match merged.get_mut(&k) {
                Some(slot) if slot.is_null() => *slot = v,
                Some(_) => {}
                None if k == "jobs" || k == "seed" => {}
                None => {
                    return Err(CliError::Usage(format!(
                        "config key '{k}' is not an option of '{command}'"
                    )))
                }
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

/// Provenance record written into every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    /// A `# run-manifest {...}` comment line.
    pub fn comment(&self) -> String {
        format!("# run-manifest {}\n", self.to_json())
    }
}

/// Seed from the flags, or a fresh one from the clock (reported on stderr).
pub fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        let s = spikeconv::rng::derive_seed(nanos, std::process::id() as u64);
        eprintln!("no --seed given; using generated seed {s}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Opts {
        timesteps: Option<usize>,
        seed: Option<u64>,
        method: Option<String>,
    }

    fn file(text: &str) -> ConfigFile {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, text).unwrap();
        ConfigFile::load(&p).unwrap()
    }

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let f = file("seed = 3\n[run]\ntimesteps = 100\nmethod = \"unity\"\n");
        let flags = Opts {
            timesteps: Some(7),
            ..Default::default()
        };
        let m = merge(&flags, Some(&f), "run").unwrap();
        assert_eq!(
            m,
            Opts {
                timesteps: Some(7),
                seed: Some(3),
                method: Some("unity".into())
            }
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = file("[run]\ntimestep = 100\n");
        assert!(merge(&Opts::default(), Some(&f), "run").is_err());
    }
}
