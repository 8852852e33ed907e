use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use climprobe::data::DatasetIndex;
use climprobe::trainer::CHECKPOINT_VERSION;

use crate::args::Command;
use climprobe_cli::error::{CliError, CliResult, EXIT_INPUT_CHANGED};

pub const TOOL: &str = "climprobe";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub checkpoint_format: u32,
    pub index_format: u32,
}

impl Versions {
    fn current() -> Self {
        Versions {
            tool: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            index_format: DatasetIndex::VERSION,
        }
    }
}

/// Record of one run. Contains no timestamps or host details, so identical
/// runs produce identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub versions: Versions,
    pub command: String,
    pub args: Value,
    /// Effective configuration after presets and defaults.
    #[serde(default)]
    pub resolved: Value,
    /// Input path as given → sha256 of its bytes.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the manifest → sha256.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| CliError::usage(format!("{}: not a run manifest: {e}", path.display())))
    }

    /// The command stored in the manifest.
    pub fn to_command(&self) -> CliResult<Command> {
        let v = serde_json::json!({ "command": self.command, "args": self.args });
        serde_json::from_value(v)
            .map_err(|e| CliError::usage(format!("manifest `{}` arguments: {e}", self.command)))
    }

    /// Fail with a distinct code when a recorded input no longer has its digest.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (path, want) in &self.inputs {
            let p = Path::new(path);
            let bytes = fs::read(p).map_err(|e| CliError::io(p, e))?;
            let got = sha256_hex(&bytes);
            if &got != want {
                return Err(CliError::new(
                    "input_changed",
                    EXIT_INPUT_CHANGED,
                    format!("{path}: sha256 {got} differs from recorded {want}"),
                ));
            }
        }
        Ok(())
    }
}

/// Collects input digests and output paths while a command runs.
#[derive(Default)]
pub struct Recorder {
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    /// Read an input file, remembering its digest.
    pub fn read(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs
            .insert(path.to_string_lossy().into_owned(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    /// Write the manifest to `path` and return it.
    pub fn finish(self, path: &Path, command: &Command, resolved: Value) -> CliResult<Manifest> {
        let v = serde_json::to_value(command).map_err(internal)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut outputs = BTreeMap::new();
        for out in &self.outputs {
            let bytes = fs::read(out).map_err(|e| CliError::io(out, e))?;
            let rel = out.strip_prefix(base).unwrap_or(out);
            outputs.insert(rel.to_string_lossy().into_owned(), sha256_hex(&bytes));
        }
        let m = Manifest {
            tool: TOOL.to_string(),
            versions: Versions::current(),
            command: command.name().to_string(),
            args: v["args"].clone(),
            resolved,
            inputs: self.inputs,
            outputs,
        };
        let mut text = serde_json::to_vec_pretty(&m).map_err(internal)?;
        text.push(b'\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        Ok(m)
    }
}

pub fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::new(
        "internal",
        climprobe_cli::error::EXIT_INTERNAL,
        e.to_string(),
    )
}

/// `<file>.manifest.json` next to a single-file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}
