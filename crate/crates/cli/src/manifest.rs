use std::path::Path;

use irwgan::data::{Alignment, DomainDataset};
use irwgan::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub name: String,
    /// SHA-256 over file names and pixel values.
    pub sha256: String,
    pub size: usize,
    /// `[height, width, channels]`.
    pub shape: [usize; 3],
    pub aligned: Option<usize>,
    pub unaligned: Option<usize>,
}

impl Fingerprint {
    pub fn of(ds: &DomainDataset) -> Self {
        let mut h = Sha256::new();
        for (name, img) in ds.names().iter().zip(ds.samples()) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
        let (height, width, channels) = ds.shape().unwrap_or((0, 0, 0));
        Self {
            name: ds.name().to_string(),
            sha256: format!("{:x}", h.finalize()),
            size: ds.len(),
            shape: [height, width, channels],
            aligned: ds.labels().map(|_| ds.count_label(Alignment::Aligned)),
            unaligned: ds.labels().map(|_| ds.count_label(Alignment::Unaligned)),
        }
    }
}

/// Written once, before the first optimizer step, and never rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub datasets: Vec<Fingerprint>,
    /// Present when the data was generated rather than loaded.
    pub synth: Option<irwgan::synth::SynthSpec>,
}

impl RunManifest {
    pub fn new(
        cfg: &ExperimentConfig,
        x: &DomainDataset,
        y: &DomainDataset,
        synth: Option<irwgan::synth::SynthSpec>,
    ) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            datasets: vec![Fingerprint::of(x), Fingerprint::of(y)],
            synth,
        }
    }

    pub fn resolution(&self) -> usize {
        self.datasets[0].shape[0]
    }

    pub fn load(run: &Path) -> Result<Self, Failure> {
        let path = run.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::missing(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, run: &Path) -> Result<(), Failure> {
        std::fs::create_dir_all(run).map_err(|e| Failure::io(format!("{}: {e}", run.display())))?;
        let path = run.join(MANIFEST);
        let body = serde_json::to_string_pretty(self).map_err(|e| Failure::io(e.to_string()))?;
        std::fs::write(&path, body).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
    }
}
