//! Atomic file output, stage directories and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
{
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        let f = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        f.sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(rd_binn_core::Error::from)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
}

/// Opens a stage directory, refusing to reuse a non-empty one unless `force`.
pub fn prepare_stage_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(CliError::Config(format!(
                "{} already has outputs; pass --force to overwrite",
                dir.display()
            )));
        }
        if occupied {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Every file under `dir` except manifests, sorted by relative path.
pub fn inventory(dir: &Path, root: &Path) -> Result<Vec<OutputFile>, CliError> {
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    files.sort();
    files
        .into_iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_NAME))
        .map(|p| {
            let data = fs::read(&p)?;
            Ok(OutputFile {
                path: p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/"),
                bytes: data.len() as u64,
                sha256: format!("{:x}", Sha256::digest(&data)),
            })
        })
        .collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if hidden {
            continue;
        }
        if p.is_dir() {
            collect(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// What a stage ran with and what it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub schemes: BTreeMap<String, String>,
    /// Wall-clock seconds per job or step; not reproducible by design.
    pub wall_clock: BTreeMap<String, f64>,
    pub finished_unix: u64,
    pub outputs: Vec<OutputFile>,
}

impl StageManifest {
    pub fn new(stage: &str, config: &impl Serialize) -> Self {
        StageManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            stage: stage.into(),
            config: serde_json::to_value(config).expect("config serialises"),
            seeds: BTreeMap::new(),
            schemes: BTreeMap::new(),
            wall_clock: BTreeMap::new(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    /// Records the inventory of `dir` and writes the manifest into it.
    pub fn finish(mut self, dir: &Path, root: &Path) -> Result<Self, CliError> {
        self.outputs = inventory(dir, root)?;
        self.finished_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        write_json_atomic(&dir.join(MANIFEST_NAME), &self)?;
        Ok(self)
    }
}
