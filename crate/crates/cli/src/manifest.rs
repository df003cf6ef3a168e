//! Plain-text record of one command invocation.

use std::fs;
use std::path::{Path, PathBuf};

use damm_core::numerics::io::write_atomic;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved configuration as `(key, value)` pairs.
    pub config: Vec<(String, String)>,
    pub seed: u64,
    /// Named outputs.
    pub artifacts: Vec<(String, PathBuf)>,
    /// Named digests of the outputs.
    pub outputs: Vec<(String, String)>,
    pub wall_clock_s: f64,
    pub input_hash: String,
}

/// Hashes the command, its resolved configuration and digests of its
/// inputs. Output locations are not inputs and stay out of the digest.
pub fn input_hash(command: &str, config: &[(String, String)], inputs: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in std::iter::once(&("command".to_string(), command.to_string())).chain(config).chain(inputs) {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| damm_core::Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = format!(
            "command = {}\nargv = {}\nseed = {}\nwall_clock_s = {:.3}\ninput_hash = {}\n",
            self.command,
            self.argv.join(" "),
            self.seed,
            self.wall_clock_s,
            self.input_hash
        );
        for (k, p) in &self.artifacts {
            s.push_str(&format!("artifact.{k} = {}\n", p.display()));
        }
        for (k, v) in &self.outputs {
            s.push_str(&format!("output.{k} = {v}\n"));
        }
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k} = {v}\n"));
        }
        s
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| damm_core::Error::io(dir, e))?;
        }
        write_atomic(path, self.render().as_bytes())?;
        Ok(())
    }
}
