//! Provenance manifest: config hash plus input digests, written next to each
//! command's outputs so a result can be traced to exactly what produced it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(format!("cannot hash {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write(
    dir: &Path,
    command: &str,
    config_path: &Path,
    inputs: &[&Path],
    outputs: &[String],
) -> Result<(), CliError> {
    let mut input_digests = BTreeMap::new();
    for path in inputs {
        input_digests.insert(path.display().to_string(), sha256_file(path)?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        config_sha256: sha256_file(config_path)?,
        inputs: input_digests,
        outputs: outputs.to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join(format!("manifest-{command}.json")), text)
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;
    Ok(())
}
