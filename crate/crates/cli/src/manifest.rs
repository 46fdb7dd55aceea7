use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

/// Record written next to every command's output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub config: Value,
    /// Seconds per stage, in execution order.
    pub timings: Vec<Stage>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct Stage {
    pub stage: String,
    pub seconds: f64,
}

impl RunManifest {
    pub fn new(command: &'static str, config: Value) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            timings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn time(&mut self, stage: impl Into<String>, seconds: f64) {
        self.timings.push(Stage {
            stage: stage.into(),
            seconds,
        });
    }

    pub fn write(&self, path: &Path) -> xvfi::Result<()> {
        write_json(path, self)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> xvfi::Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> xvfi::Result<()> {
    std::fs::write(path, bytes).map_err(|source| xvfi::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Manifest location for commands whose `--out` names a single file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
