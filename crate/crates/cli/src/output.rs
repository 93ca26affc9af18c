use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// 17 significant digits, enough to round-trip any double.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    /// Creates `root` if needed.
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|source| CliError::Output {
            path: root.to_path_buf(),
            source,
        })?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn err(&self, name: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
        let path = self.root.join(name);
        move |source| CliError::Output {
            path: path.clone(),
            source,
        }
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let fail = self.err(name);
        let mut w = csv::Writer::from_path(self.root.join(name)).map_err(|e| fail(e.into()))?;
        w.write_record(header).map_err(|e| fail(e.into()))?;
        for r in rows {
            w.write_record(r).map_err(|e| fail(e.into()))?;
        }
        w.flush().map_err(&fail)
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("summaries serialize");
        text.push('\n');
        fs::write(self.root.join(name), text).map_err(self.err(name))
    }
}
