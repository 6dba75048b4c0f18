//! JSON Schemas for the config file and every report, derived from the types.

use schemars::schema_for;

use super::{ExperimentConfig, ExtractionReport, FingerprintReport, ProbeReport, SweepReport};

pub const SCHEMA_KINDS: [&str; 5] = ["config", "fingerprint", "sweep", "extraction", "probe"];

/// Pretty JSON with a trailing newline, or `None` for an unknown kind.
pub fn schema(kind: &str) -> Option<String> {
    let s = match kind {
        "config" => schema_for!(ExperimentConfig),
        "fingerprint" => schema_for!(FingerprintReport),
        "sweep" => schema_for!(SweepReport),
        "extraction" => schema_for!(ExtractionReport),
        "probe" => schema_for!(ProbeReport),
        _ => return None,
    };
    Some(serde_json::to_string_pretty(&s).expect("schema serializes") + "\n")
}

pub fn schema_file_name(kind: &str) -> String {
    format!("{kind}.schema.json")
}
