//! Run manifests: the resolved configuration plus content hashes of the
//! files a run read and wrote. A manifest is itself a valid config file,
//! so `cfm <command> --config <manifest>` repeats the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha1::{Digest, Sha1};

use crate::config::RunConfig;
use crate::{CliError, Result};

/// Hash of `bytes` as git computes it for a blob object.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(40), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(blob_hash(&std::fs::read(path).map_err(|e| CliError::io(path, e))?))
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn render(&self, command: &str, config: &RunConfig) -> Result<String> {
        let mut out = format!("# cfm {command}\n# seed {}\n", config.seed);
        for (kind, paths) in [("input", &self.inputs), ("output", &self.outputs)] {
            for p in paths {
                let _ = writeln!(out, "# {kind} {} {}", file_hash(p)?, p.display());
            }
        }
        out.push('\n');
        out.push_str(&config.snapshot());
        Ok(out)
    }

    /// Write `<out_dir>/<command>.manifest`.
    pub fn write(&self, command: &str, config: &RunConfig) -> Result<PathBuf> {
        let dir = config.out_dir();
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let path = dir.join(format!("{command}.manifest"));
        std::fs::write(&path, self.render(command, config)?).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
