//! Output files are created exclusively; a run never replaces earlier results.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mscal::data::{read_observations_csv, SourceObservations};
use mscal::experiments::Manifest;
use mscal::forward::LookVector;
use serde::Serialize;

use crate::CliResult;

pub fn create_new(path: &Path) -> CliResult<BufWriter<File>> {
    match OpenOptions::new().write(true).create_new(true).open(path) {
        Ok(f) => Ok(BufWriter::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(mscal::Error::Domain(format!(
            "refusing to overwrite existing file {}",
            path.display()
        ))
        .into()),
        Err(e) => Err(e.into()),
    }
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create_new(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// A CSV body produced by `body`, preceded by the manifest preamble.
pub fn write_csv<F>(path: &Path, manifest: &Manifest, body: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<File>) -> mscal::Result<()>,
{
    let mut w = create_new(path)?;
    w.write_all(manifest.preamble().as_bytes())?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `foo.csv` -> `foo.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `{"look_vector": ..., "manifest": ...}` next to an observation file.
pub fn write_observation_sidecar(csv_path: &Path, look: Option<LookVector>, manifest: &Manifest) -> CliResult<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        #[serde(skip_serializing_if = "Option::is_none")]
        look_vector: Option<LookVector>,
        manifest: &'a Manifest,
    }
    write_json(&sidecar_path(csv_path), &Sidecar { look_vector: look, manifest })
}

/// Reads an observation CSV and, when present, the look vector from its sidecar.
pub fn read_observations(path: &Path, label: &str) -> CliResult<SourceObservations> {
    let obs = read_observations_csv(File::open(path)?, label)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(obs);
    }
    let v: serde_json::Value = serde_json::from_reader(File::open(&side)?)?;
    Ok(match v.get("look_vector") {
        Some(l) if !l.is_null() => obs.with_look(serde_json::from_value(l.clone())?),
        _ => obs,
    })
}
