//! Output directory handling and locale-independent CSV writing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

use crate::config::RunConfig;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Debug, Clone)]
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn resolved(&self, cfg: &RunConfig) -> Result<(), CliError> {
        self.text(RESOLVED_CONFIG, &cfg.render())
    }

    pub fn csv<I>(&self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.path(name);
        let write = || -> anyhow::Result<()> {
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok(())
        };
        write().with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0, -2.5e-12, 1e300, 123456.789] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NAN), "NaN");
        assert_eq!(num(f64::NEG_INFINITY), "-inf");
        assert_eq!(num(1.0), "1.0");
    }

    #[test]
    fn writes_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = Output::create(&dir.path().join("nested")).unwrap();
        out.csv("t.csv", &["a", "b"], vec![vec![num(0.5), "x".into()]]).unwrap();
        let text = fs::read_to_string(out.path("t.csv")).unwrap();
        assert_eq!(text, "a,b\n0.5,x\n");
    }
}
