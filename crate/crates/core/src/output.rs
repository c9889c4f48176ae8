//! Plain CSV output with a config echo and a manifest per directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// 17 significant digits, round-trip exact.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` with a one-line header. Every row must match the header width.
    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            debug_assert_eq!(row.len(), header.len(), "{name}: row width");
            let _ = writeln!(text, "{}", row.join(","));
        }
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `config.csv` and the `manifest.csv` sidecar listing every file.
    pub fn finish(mut self, command: &str, config: &str, echo: &[(String, String)]) -> Result<Vec<String>> {
        self.csv(
            "config.csv",
            &["key", "value"],
            echo.iter().map(|(k, v)| vec![k.clone(), v.clone()]),
        )?;
        let mut entries = vec![
            ("program".to_string(), env!("CARGO_PKG_NAME").to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("command".to_string(), command.to_string()),
            ("config".to_string(), config.replace(',', "_")),
        ];
        entries.extend(self.written.iter().map(|f| ("file".to_string(), f.clone())));
        self.csv(
            "manifest.csv",
            &["key", "value"],
            entries.into_iter().map(|(k, v)| vec![k, v]),
        )?;
        Ok(self.written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn writes_header_and_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(tmp.path().join("o")).unwrap();
        out.csv("a.csv", &["x", "y"], vec![vec![num(1.0), num(2.0)]]).unwrap();
        let files = out
            .finish("run", "c.toml", &[("k".into(), "v".into())])
            .unwrap();
        assert_eq!(files, vec!["a.csv", "config.csv", "manifest.csv"]);
        let a = fs::read_to_string(tmp.path().join("o/a.csv")).unwrap();
        assert_eq!(a, "x,y\n1.0000000000000000e0,2.0000000000000000e0\n");
        let m = fs::read_to_string(tmp.path().join("o/manifest.csv")).unwrap();
        assert!(m.contains("file,a.csv\nfile,config.csv\n"));
    }
}
