//! Run manifests: everything needed to reproduce a command bit-for-bit.
//!
//! A manifest is a key/value document holding the tool version, the command,
//! the input/output paths, and the effective configuration snapshot under
//! `config.*` keys. `train` writes one next to its checkpoint; `eval` and
//! `inspect` read it to recover the model configuration.

use std::path::Path;

use panrec_core::error::{Error, Result};
use panrec_core::kv::KvDoc;

pub const TOOL: &str = concat!("panrec ", env!("CARGO_PKG_VERSION"));

pub struct Manifest {
    pub doc: KvDoc,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut doc = KvDoc::new();
        doc.set("tool", TOOL);
        doc.set("command", command);
        Self { doc }
    }

    pub fn set_path(&mut self, key: &str, path: &Path) {
        self.doc.set(key, path.display());
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.doc.set(key, value.to_string());
    }

    /// Embed a configuration snapshot under `config.*`.
    pub fn embed_config(&mut self, snapshot: &KvDoc) {
        for (k, v) in snapshot.entries() {
            self.doc.set(&format!("config.{k}"), v);
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.doc.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self {
            doc: KvDoc::parse(&text)?,
        })
    }

    /// Extract the embedded `config.*` snapshot.
    pub fn config_snapshot(&self) -> Result<KvDoc> {
        let mut out = KvDoc::new();
        for (k, v) in self.doc.entries() {
            if let Some(stripped) = k.strip_prefix("config.") {
                out.set(stripped, v);
            }
        }
        if out.entries().is_empty() {
            return Err(Error::MissingKey("config.*".into()));
        }
        Ok(out)
    }
}

/// Conventional sidecar path: `<artifact>.manifest`.
pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    path.with_file_name(name)
}
