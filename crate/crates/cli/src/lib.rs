//! Library side of the `multibert` command: config loading, the pipeline
//! stages and the run manifest.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod tools;

/// `(kind, message)` for the one-line error report. The kind is the core
/// error's short name when one is in the chain, `cli` otherwise.
pub fn error_parts(err: &anyhow::Error) -> (&'static str, String) {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<multibert::Error>())
        .map_or("cli", multibert::Error::kind);
    let message = err.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    (kind, message)
}

pub fn error_line(err: &anyhow::Error) -> String {
    let (kind, message) = error_parts(err);
    serde_json::json!({ "error": kind, "message": message }).to_string()
}
