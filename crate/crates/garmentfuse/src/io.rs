//! Atomic file writes, RADF files and JSON helpers.

use std::fs;
use std::path::{Path, PathBuf};

use garmentfuse_core::checkpoint::{self, Record};
use garmentfuse_core::synth::RgbImage;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::ppm;

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_radf(path: &Path, records: &[Record]) -> CliResult<()> {
    write_atomic(path, &checkpoint::encode(records))
}

pub fn read_radf(path: &Path) -> CliResult<Vec<Record>> {
    Ok(checkpoint::decode(&read(path)?)?)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> CliResult<()> {
    write_atomic(path, &ppm::write_ppm(img))
}

pub fn read_ppm(path: &Path) -> CliResult<RgbImage> {
    ppm::read_ppm(&read(path)?).map_err(|source| CliError::Ppm {
        path: path.into(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| CliError::Json {
        path: path.into(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_slice(&read(path)?).map_err(|source| CliError::Json {
        path: path.into(),
        source,
    })
}
