use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// What a run read, which seeds it used, and the hash of everything it
/// wrote. Paths of inputs are recorded as given; the output directory is
/// left out so that identical runs into different directories match.
#[derive(Debug, Default, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String]) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: strip_out(argv),
            ..Default::default()
        }
    }

    pub fn config(&mut self, p: &Path) {
        self.config_paths.push(p.display().to_string());
    }

    pub fn input(&mut self, p: &Path) -> Result<(), CliError> {
        let bytes = fs::read(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        self.inputs.insert(p.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.into(), v);
    }
}

fn strip_out(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1) {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The output directory; every write is confined to it.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::data(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::data(format!("{}: {e}", parent.display())))?;
        }
        Ok(p)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(|e| CliError::data(format!("{}: {e}", p.display())))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, v: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::data(e.to_string()))?;
        s.push('\n');
        self.write(rel, s)
    }

    /// Hashes every file under the directory and writes the manifest.
    pub fn finish(&self, mut m: RunManifest) -> Result<(), CliError> {
        let mut files = Vec::new();
        walk(&self.root, &mut files).map_err(|e| CliError::data(e.to_string()))?;
        for f in files {
            let rel = f.strip_prefix(&self.root).expect("walked under root");
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            let bytes = fs::read(&f).map_err(|e| CliError::data(e.to_string()))?;
            m.artifacts.insert(rel, sha256_hex(&bytes));
        }
        self.write_json(MANIFEST, &m)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
