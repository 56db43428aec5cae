use std::path::{Path, PathBuf};

use layerseg::TrainConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Index of a training run directory. Only artifacts that exist on disk
/// are listed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub run_dir: PathBuf,
    pub dataset: PathBuf,
    pub config: TrainConfig,
    pub phase1_checkpoint: Option<String>,
    pub phase2_checkpoint: Option<String>,
    pub log: Option<String>,
    /// Phases that ran to completion.
    pub phases_completed: Vec<u8>,
}

impl RunManifest {
    pub fn new(run_dir: &Path, dataset: &Path, config: &TrainConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            run_dir: run_dir.to_path_buf(),
            dataset: dataset.to_path_buf(),
            config: config.clone(),
            phase1_checkpoint: None,
            phase2_checkpoint: None,
            log: None,
            phases_completed: Vec::new(),
        }
    }

    /// Drops references to files that are not present, then writes the
    /// manifest into the run directory.
    pub fn write(&mut self) -> anyhow::Result<()> {
        let dir = self.run_dir.clone();
        for slot in [&mut self.phase1_checkpoint, &mut self.phase2_checkpoint, &mut self.log] {
            if slot.as_ref().is_some_and(|name| !dir.join(name).is_file()) {
                *slot = None;
            }
        }
        layerseg::io::write_json_file(dir.join(MANIFEST_FILE), self)?;
        Ok(())
    }
}
