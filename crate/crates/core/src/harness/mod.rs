//! Configuration, bundled data, experiment orchestration and reports.

pub mod assets;
pub mod config;
pub mod experiments;
pub mod schema;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use assets::{Assets, ProbePhrase, DATA_DIR_ENV};
pub use config::{
    EngineSpec, ExperimentConfig, ExtractionSpec, FingerprintSpec, ModelSpec, OutputSpec,
    ProbeSpec, PromptSource, SamplerSpec, SweepSpec, Workbench,
};
pub use experiments::*;
pub use schema::{schema, schema_file_name, SCHEMA_KINDS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lm(#[from] crate::lm::LmError),
    #[error(transparent)]
    Spec(#[from] crate::specdec::SpecError),
    #[error(transparent)]
    Stream(#[from] crate::stream::StreamError),
    #[error(transparent)]
    Fingerprint(#[from] crate::fingerprint::FingerprintError),
    #[error(transparent)]
    Extraction(#[from] crate::extraction::ExtractionError),
    #[error(transparent)]
    Probe(#[from] crate::probes::ProbeError),
    #[error(transparent)]
    Observer(#[from] crate::observer::ObserverError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }
}
