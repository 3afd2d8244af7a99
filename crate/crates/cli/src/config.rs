//! Run configuration, resolved from CLI flags, and its stable fingerprint.

use serde::Serialize;

use gnls::util::{fnv1a64, hex64};

/// Everything that determines a run's numerical output. The fingerprint
/// hashes this structure together with the graph file *content* (not its
/// path), so identical inputs give identical artifacts wherever they live.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub graph: String,
    pub p: Option<f64>,
    pub mu: Option<String>,
    pub indices: Vec<usize>,
    pub cells: usize,
    pub quad_order: usize,
    pub eigen_count: usize,
    pub tol: f64,
    pub seed: u64,
    pub samples: usize,
    pub grid_density: usize,
    pub multistart: usize,
    pub points: usize,
    pub ratio: f64,
    pub strict: bool,
    pub scenario: Option<String>,
    pub starts: usize,
    pub horizon: f64,
}

impl RunConfig {
    pub fn fingerprint(&self, graph_content: &[u8]) -> String {
        let cfg = serde_json::to_string(self).expect("config serializes");
        let mut bytes = cfg.into_bytes();
        bytes.extend_from_slice(graph_content);
        hex64(fnv1a64(&bytes))
    }
}

/// Artifact envelope: every JSON artifact embeds this header.
#[derive(Debug, Clone, Serialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
}

impl ArtifactMeta {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
        }
    }
}
