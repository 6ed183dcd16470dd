//! Commands that need no run directory.

use std::path::Path;

use anyhow::{bail, Context, Result};
use multibert::corpus::{write_corpus, write_reviews};
use multibert::embedstore::validate_embeddings;
use multibert::encoder::gradcheck::{default_batch, gradient_check_model, tiny_config, Difference};
use multibert::encoder::EncoderModel;
use multibert::synth::{generate, genre_names, SynthConfig};
use serde_json::json;

/// Runs the finite-difference check on the tiny encoder. Fails when a
/// tolerance is given and exceeded.
pub fn gradcheck(step: f64, scheme: Difference, tolerance: Option<f64>) -> Result<String> {
    let cfg = tiny_config();
    let batch = default_batch(cfg.vocab_size, cfg.max_positions)?;
    let report = gradient_check_model(EncoderModel::<f64>::init(&cfg)?, &batch, step, scheme)?;
    let line = json!({
        "max_relative_error": report.max_relative_error,
        "worst_tensor": report.worst.0,
        "worst_index": report.worst.1,
        "parameters": report.parameters,
        "step": report.step,
        "scheme": format!("{scheme:?}").to_lowercase(),
    });
    if let Some(tol) = tolerance {
        if !(report.max_relative_error < tol) {
            bail!(multibert::Error::Contract(format!(
                "max relative error {} is not below {tol}: {line}",
                report.max_relative_error
            )));
        }
    }
    Ok(format!("{line}\n"))
}

/// Writes `books.jsonl` and `reviews.jsonl` for a generated corpus.
pub fn synth_corpus(out_dir: &Path, cfg: &SynthConfig) -> Result<String> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let (books, reviews) = generate(cfg)?;
    write_corpus(out_dir.join("books.jsonl"), &books)?;
    write_reviews(out_dir.join("reviews.jsonl"), &reviews)?;
    let line = json!({
        "books": books.len(),
        "reviews": reviews.len(),
        "genres": genre_names(cfg.genres),
    });
    Ok(format!("{line}\n"))
}

pub fn validate(path: &Path) -> Result<String> {
    let s = validate_embeddings(path)?;
    Ok(format!("{}\n", json!({"dim": s.dim, "records": s.records, "sentences": s.sentences})))
}
