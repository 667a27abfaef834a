//! Run configuration files: flat `key = value` lines, `#` comments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, i + 1, "expected 'key = value'"))?;
            let (key, value) = (key.trim(), value.trim());
            let res = match key {
                "scene" => {
                    cfg.scene = Some(PathBuf::from(value));
                    Ok(())
                }
                "out" => {
                    cfg.out = Some(PathBuf::from(value));
                    Ok(())
                }
                _ => cfg.train.set(key, value),
            };
            res.map_err(|e| Error::parse(source, i + 1, e.to_string()))?;
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.scene {
            s += &format!("scene = {}\n", p.display());
        }
        if let Some(p) = &self.out {
            s += &format!("out = {}\n", p.display());
        }
        s + &self.train.to_text()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_lines() {
        let cfg = RunConfig::parse("# run\niterations = 300  # short\nscene = /tmp/s\n\nafw = off\n", "c").unwrap();
        assert_eq!(cfg.train.iterations, 300);
        assert!(!cfg.train.afw);
        assert_eq!(cfg.scene, Some(PathBuf::from("/tmp/s")));
        assert_eq!(RunConfig::parse(&cfg.to_text(), "again").unwrap(), cfg);
        let err = RunConfig::parse("iterations = 3\nbogus = 1\n", "c").unwrap_err();
        assert!(err.to_string().starts_with("c:2:"), "{err}");
        assert!(RunConfig::parse("iterations = 0\n", "c").is_err());
        assert!(RunConfig::parse("no equals sign\n", "c").is_err());
    }
}
