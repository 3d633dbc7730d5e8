//! Optional key=value config files merged under command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use clap::ValueEnum;
use weaksed_core::{Error, Result};

/// Overrides loaded from a text file of `key=value` lines (`#` comments and
/// blank lines ignored). A flag given on the command line always wins; the
/// file only fills in flags that were left unset.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Manifest {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("expected key=value, got {:?}", line),
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Flag value if given, else the file's value for `key`, else `default`.
    pub fn resolve<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::config(format!("config key {} has bad value {:?}", key, raw))),
            None => Ok(default),
        }
    }

    /// Same as `resolve` for enum-valued flags, matching the flag's value names.
    pub fn resolve_enum<T: ValueEnum>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            Some(raw) => <T as ValueEnum>::from_str(raw, false)
                .map_err(|_| Error::config(format!("config key {} has bad value {:?}", key, raw))),
            None => Ok(default),
        }
    }

    /// A true-valued boolean flag wins; otherwise the file may switch it on.
    pub fn resolve_switch(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.resolve(None, key, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_values_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 7\n\nlr=0.5\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();

        assert_eq!(cfg.resolve(Some(3usize), "epochs", 30).unwrap(), 3);
        assert_eq!(cfg.resolve::<usize>(None, "epochs", 30).unwrap(), 7);
        assert_eq!(cfg.resolve::<usize>(None, "batch-size", 16).unwrap(), 16);
        assert_eq!(cfg.resolve::<f64>(None, "lr", 0.001).unwrap(), 0.5);
    }

    #[test]
    fn bad_lines_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs\n").unwrap();
        match FileConfig::load(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected manifest error, got {:?}", other.map(|_| ())),
        }

        std::fs::write(&path, "epochs=plenty\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert!(cfg.resolve::<usize>(None, "epochs", 30).is_err());
    }

    #[test]
    fn switches_can_be_set_from_the_file_but_not_cleared() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "fuse=true\n").unwrap();
        let cfg = FileConfig::load(&path).unwrap();
        assert!(cfg.resolve_switch(false, "fuse").unwrap());
        assert!(cfg.resolve_switch(true, "emit-curves").unwrap());
        assert!(!cfg.resolve_switch(false, "emit-curves").unwrap());
    }
}
