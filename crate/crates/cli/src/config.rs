//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. `include = path`
//! splices another file in place (paths relative to the including file);
//! later assignments override earlier ones. Every key must be consumed by
//! the command reading the file, so misspelled keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// Directory of the file that set the key, for relative paths.
    dir: PathBuf,
    origin: String,
}

#[derive(Debug, Default)]
pub struct RunConfig {
    entries: BTreeMap<String, Entry>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.read(path, 0)?;
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn parse(text: &str, dir: &Path) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.read_text(text, dir, "<inline>", 0)?;
        Ok(cfg)
    }

    fn read(&mut self, path: &Path, depth: usize) -> CliResult<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(CliError::Config(format!("includes nested deeper than {MAX_INCLUDE_DEPTH} at {}", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.read_text(&text, &dir, &path.display().to_string(), depth)
    }

    fn read_text(&mut self, text: &str, dir: &Path, name: &str, depth: usize) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let origin = format!("{name}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(CliError::Config(format!("{origin}: empty key")));
            }
            if key == "include" {
                self.read(&dir.join(value), depth + 1)?;
                continue;
            }
            self.entries.insert(key.to_string(), Entry { value: value.to_string(), dir: dir.to_path_buf(), origin });
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(
            key.to_string(),
            Entry { value: value.to_string(), dir: PathBuf::new(), origin: "command line".into() },
        );
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: std::str::FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|err| CliError::Config(format!("{}: bad value {:?} for {key}: {err}", e.origin, e.value))),
        }
    }

    pub fn take_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Removes `key` as a path resolved against its file's directory.
    pub fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.entries.remove(key).map(|e| {
            let p = PathBuf::from(&e.value);
            if p.is_absolute() {
                p
            } else {
                e.dir.join(p)
            }
        })
    }

    pub fn require_path(&mut self, key: &str) -> CliResult<PathBuf> {
        self.take_path(key).ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    /// Fails if any key was not consumed.
    pub fn finish(self) -> CliResult<()> {
        match self.entries.iter().next() {
            None => Ok(()),
            Some((k, e)) => {
                let all: Vec<&str> = self.entries.keys().map(String::as_str).collect();
                Err(CliError::Config(format!("{}: unknown key `{k}` (unused: {})", e.origin, all.join(", "))))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c = RunConfig::parse("# c\na = 1\n b=two words \na = 3\n", Path::new("/base")).unwrap();
        assert_eq!(c.take::<u32>("a").unwrap(), Some(3));
        assert_eq!(c.take::<String>("b").unwrap().as_deref(), Some("two words"));
        assert_eq!(c.take::<u32>("missing").unwrap(), None);
        c.finish().unwrap();
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let c = RunConfig::parse("lr_inti = 0.1\n", Path::new("")).unwrap();
        assert!(matches!(c.finish(), Err(CliError::Config(m)) if m.contains("lr_inti")));
        assert!(RunConfig::parse("no equals sign\n", Path::new("")).is_err());
        let mut c = RunConfig::parse("n = x\n", Path::new("")).unwrap();
        assert!(c.take::<u32>("n").is_err());
    }

    #[test]
    fn includes_resolve_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("shared")).unwrap();
        std::fs::write(dir.path().join("shared/stft.cfg"), "stft.hop = 480\ndata = corpus/m.tsv\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = shared/stft.cfg\nout = ckpt.bin\n").unwrap();
        let mut c = RunConfig::load(&dir.path().join("run.cfg")).unwrap();
        assert_eq!(c.take::<usize>("stft.hop").unwrap(), Some(480));
        assert_eq!(c.take_path("data").unwrap(), dir.path().join("shared/corpus/m.tsv"));
        assert_eq!(c.take_path("out").unwrap(), dir.path().join("ckpt.bin"));
        c.finish().unwrap();
        std::fs::write(dir.path().join("loop.cfg"), "include = loop.cfg\n").unwrap();
        assert!(RunConfig::load(&dir.path().join("loop.cfg")).is_err());
    }
}
