//! Output plumbing: CSV tables with a config-hash comment line and a header
//! row, floats at 17 significant digits, LF endings. Reruns with the same
//! config and seed produce byte-identical bodies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

pub struct Table {
    writer: BufWriter<File>,
    path: PathBuf,
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

impl Table {
    pub fn create(dir: &Path, name: &str, hash: &str, header: &[&str]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let mut writer = BufWriter::new(File::create(&path)?);
        write!(writer, "# config_hash={hash}\n{}\n", header.join(","))?;
        Ok(Table { writer, path })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        writeln!(self.writer, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

pub fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
    let mut writer = BufWriter::new(File::create(dir.join(name))?);
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}
