//! Layered run configuration: command-line flags override an optional flat
//! `key = value` config file, which overrides built-in defaults.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use segxplain_core::{Error, Result};

/// Keys a config file may set; anything else is rejected.
const KNOWN_KEYS: &[&str] = &[
    // training
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "l1_weight",
    "seed",
    "profile",
    "checkpoint_interval",
    // relevance propagation
    "epsilon",
    "include_bias_in_denominator",
    "target",
    // binarization
    "threshold",
];

/// Parsed config file contents.
#[derive(Debug, Default)]
pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown key `{key}`",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    /// Flag value if present, else the file value, else the default.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered config key {key}");
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| Error::Config(format!("bad value for `{key}`: {e}"))),
            None => Ok(default),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_cfg(content: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("segxplain-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("cfg-{}.txt", content.len()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn precedence_is_flag_file_default() {
        let path = write_cfg("epochs = 7\nl1_weight = 25.5\n");
        let cfg = FileConfig::load(Some(&path)).unwrap();
        // flag wins
        assert_eq!(cfg.resolve(Some(3usize), "epochs", 200).unwrap(), 3);
        // file beats default
        assert_eq!(cfg.resolve::<usize>(None, "epochs", 200).unwrap(), 7);
        assert_eq!(cfg.resolve::<f32>(None, "l1_weight", 100.0).unwrap(), 25.5);
        // default when absent everywhere
        assert_eq!(cfg.resolve::<usize>(None, "batch_size", 4).unwrap(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let path = write_cfg("epochz = 7\n");
        let err = FileConfig::load(Some(&path)).unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let path = write_cfg("# a comment\n\nseed = 9\n");
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve::<u64>(None, "seed", 0).unwrap(), 9);
    }

    #[test]
    fn malformed_values_are_reported() {
        let path = write_cfg("epochs = banana\n");
        let cfg = FileConfig::load(Some(&path)).unwrap();
        assert!(cfg.resolve::<usize>(None, "epochs", 1).is_err());
    }
}
