use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use nowcast_core::net::hash_bytes;
use nowcast_core::{write_atomic, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const FAILED: &str = "FAILED";

/// A fresh `<out>/<command>-NNN` directory.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, command: &str) -> io::Result<Self> {
        fs::create_dir_all(out)?;
        for i in 1.. {
            let path = out.join(format!("{command}-{i:03}"));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        unreachable!()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
        write_atomic(&self.file(name), f)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    /// Record what produced this directory and a digest of every file in it.
    pub fn write_manifest(&self, command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
        let mut names: Vec<String> = fs::read_dir(&self.path)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST && !n.starts_with('.'))
            .collect();
        names.sort();
        let mut outputs = Vec::new();
        for name in names {
            let bytes = fs::read(self.file(&name))?;
            outputs.push(json!({
                "file": name,
                "bytes": bytes.len(),
                "digest": format!("{:016x}", hash_bytes(&bytes)),
            }));
        }
        let config: serde_json::Map<String, serde_json::Value> =
            cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v.into())).collect();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config_hash": format!("{:016x}", cfg.hash()),
            "config": config,
            "inputs": inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "outputs": outputs,
        });
        self.write_json(MANIFEST, &manifest)
    }

    /// Flag the directory as incomplete.
    pub fn mark_failed(&self, message: &str) {
        let _ = write_atomic(&self.file(FAILED), |w| writeln!(w, "{message}"));
    }
}
