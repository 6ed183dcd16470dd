//! The pipeline stages. Each reads its inputs from the config and the run
//! directory, writes its artifacts there, and returns the text to print.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use multibert::codebook::{kmeans_fit, read_codebook, write_codebook, KMeansParams};
use multibert::corpus::{
    derive_genres, fill_defaults, load_books, load_reviews, merge_reviews, split_sentences, write_corpus, BookRecord,
    Document,
};
use multibert::docvec::embed_documents;
use multibert::embedstore::{read_embeddings, write_embeddings, SentenceEmbeddingSet};
use multibert::encoder::{read_checkpoint, train, write_checkpoint, EncoderModel, LossHistory};
use multibert::evaluate::{baseline_sentence_mean, run_benchmark, IndexRanker, Ranker, TfidfIndex};
use multibert::retrieval::{format_results, EmbeddingIndex, RetrievalMode};
use multibert::sequencer::{encode_document, read_sequences, write_sequences, TokenSequence};
use multibert::{Codebook32, Error};
use rayon::prelude::*;
use serde_json::json;

use crate::config::Loaded;
use crate::manifest;

pub const CORPUS: &str = "corpus.jsonl";
pub const SENTENCES: &str = "sentences.semb";
pub const CODEBOOK: &str = "codebook.scbk";
pub const SEQUENCES: &str = "sequences.tsv";
pub const CHECKPOINT: &str = "encoder.mbrt";
pub const LOSS: &str = "loss.tsv";
pub const DOCUMENTS: &str = "documents.semb";
pub const REPORT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const DETAILS: &str = "details.jsonl";

pub const MODEL_NAMES: [&str; 3] = ["multi-bert", "sbert-baseline", "tfidf"];

fn ensure_run_dir(cfg: &Loaded) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create run directory {}", dir.display()))?;
    Ok(dir)
}

fn need(path: PathBuf, stage: &str) -> Result<PathBuf> {
    if !path.exists() {
        bail!(Error::NotFound(format!("{} (run `{stage}` first)", path.display())));
    }
    Ok(path)
}

fn finish(cfg: &Loaded, text: String) -> Result<String> {
    manifest::update(cfg)?;
    Ok(text)
}

pub fn read_corpus(path: &Path) -> Result<Vec<BookRecord>> {
    Ok(load_books(path)?.records)
}

fn corpus(cfg: &Loaded) -> Result<Vec<BookRecord>> {
    read_corpus(&need(cfg.artifact(CORPUS), "ingest")?)
}

/// Path of the sentence embeddings: the configured file, else the synthetic
/// ones written by `ingest`.
fn sentence_path(cfg: &Loaded) -> Result<PathBuf> {
    match &cfg.config.paths.embeddings {
        Some(p) => {
            let p = cfg.resolve(p);
            cfg.require(&[&p])?;
            Ok(p)
        }
        None => need(cfg.artifact(SENTENCES), "ingest"),
    }
}

/// Sentence embeddings checked against the splitter: every record names a
/// corpus book and carries exactly one vector per sentence.
fn sentences(cfg: &Loaded, books: &[BookRecord]) -> Result<Vec<SentenceEmbeddingSet<f32>>> {
    let path = sentence_path(cfg)?;
    let sets: Vec<SentenceEmbeddingSet<f32>> = read_embeddings(&path)?;
    let include = cfg.config.corpus.include_reviews;
    let counts: HashMap<&str, usize> = books
        .iter()
        .map(|b| (b.book_id.as_str(), split_sentences(&b.document_text(include)).len()))
        .collect();
    for s in &sets {
        let want = counts
            .get(s.book_id.as_str())
            .ok_or_else(|| Error::Contract(format!("{} has a record for unknown book {}", path.display(), s.book_id)))?;
        if *want != s.len() {
            bail!(Error::Contract(format!(
                "{} holds {} vectors for book {} but the splitter finds {want} sentences",
                path.display(),
                s.len(),
                s.book_id
            )));
        }
    }
    let sets: Vec<_> = sets.into_iter().filter(|s| !s.is_empty()).collect();
    if sets.is_empty() {
        bail!(Error::EmptyCorpus(format!("{} has no sentences", path.display())));
    }
    Ok(sets)
}

pub fn ingest(cfg: &Loaded) -> Result<String> {
    let c = &cfg.config;
    let books_path = cfg.resolve(&c.paths.books);
    let reviews_path = c.paths.reviews.as_ref().map(|p| cfg.resolve(p));
    cfg.require(&[&books_path])?;
    if let Some(p) = &reviews_path {
        cfg.require(&[p])?;
    }
    let dir = ensure_run_dir(cfg)?;

    let loaded = load_books(&books_path)?;
    let (reviews, review_skipped) = match &reviews_path {
        Some(p) => {
            let r = load_reviews(p)?;
            (r.records, r.skipped)
        }
        None => (Vec::new(), 0),
    };
    let merged = merge_reviews(loaded.records, &reviews);
    let mut books = fill_defaults(merged.books, &c.defaults())?;
    let genres = c.genre_config();
    if !genres.vocabulary.is_empty() {
        for b in &mut books {
            b.genres = derive_genres(b, &genres)?;
        }
    }
    write_corpus(dir.join(CORPUS), &books)?;

    let docs: Vec<(Document, Option<String>)> = books
        .iter()
        .filter_map(|b| {
            Document::from_record(b, c.corpus.include_reviews).map(|d| (d, b.genres.iter().next().cloned()))
        })
        .collect();
    let sentence_count: usize = docs.iter().map(|d| d.0.sentences.len()).sum();
    if c.paths.embeddings.is_none() {
        if !c.synthetic.enabled {
            bail!(Error::Config("no embeddings path and synthetic embeddings are disabled".into()));
        }
        let embedder = c.embedder();
        let sets: Vec<SentenceEmbeddingSet<f32>> = docs
            .par_iter()
            .map(|(d, g)| embedder.embed_document(d, g.as_deref()))
            .collect();
        write_embeddings(&sets, dir.join(SENTENCES))?;
    }

    let summary = json!({
        "books": books.len(),
        "skipped_books": loaded.skipped,
        "reviews": reviews.len(),
        "skipped_reviews": review_skipped,
        "orphan_reviews": merged.orphans,
        "with_genres": books.iter().filter(|b| !b.genres.is_empty()).count(),
        "documents": docs.len(),
        "sentences": sentence_count,
    });
    finish(cfg, format!("{summary}\n"))
}

/// One JSON line per book with at least one sentence: `book_id` and the
/// split sentences, for external embedders.
pub fn sentence_dump(cfg: &Loaded) -> Result<String> {
    let include = cfg.config.corpus.include_reviews;
    let mut out = String::new();
    for b in corpus(cfg)? {
        if let Some(d) = Document::from_record(&b, include) {
            writeln!(out, "{}", json!({"book_id": d.book_id, "sentences": d.sentences}))?;
        }
    }
    Ok(out)
}

pub fn build_codebook(cfg: &Loaded) -> Result<String> {
    let books = corpus(cfg)?;
    let sets = sentences(cfg, &books)?;
    let vectors: Vec<&[f32]> = sets.iter().flat_map(|s| s.vectors()).collect();
    let params: KMeansParams = cfg.config.kmeans();
    let fit = kmeans_fit(&vectors, params)?;
    write_codebook(&fit.codebook, cfg.artifact(CODEBOOK))?;
    let summary = json!({
        "k": fit.codebook.k,
        "dim": fit.codebook.dim,
        "vectors": vectors.len(),
        "iterations": fit.codebook.iterations_run,
        "inertia": fit.inertia_trace.last().map(|&x| f64::from(x)),
    });
    finish(cfg, format!("{summary}\n"))
}

fn sequences_for(cfg: &Loaded, sets: &[SentenceEmbeddingSet<f32>], cb: &Codebook32) -> Result<Vec<TokenSequence>> {
    let positions = cfg.config.encoder.max_positions;
    Ok(sets
        .iter()
        .map(|s| encode_document(s, cb, positions))
        .collect::<multibert::Result<_>>()?)
}

pub fn train_encoder(cfg: &Loaded, resume: bool) -> Result<String> {
    let books = corpus(cfg)?;
    let sets = sentences(cfg, &books)?;
    let cb: Codebook32 = read_codebook(need(cfg.artifact(CODEBOOK), "build-codebook")?)?;
    if cb.k != cfg.config.codebook.k {
        bail!(Error::Contract(format!(
            "codebook has k = {} but the config asks for {}",
            cb.k, cfg.config.codebook.k
        )));
    }
    let seqs = sequences_for(cfg, &sets, &cb)?;
    write_sequences(cfg.artifact(SEQUENCES), &seqs)?;

    let ecfg = cfg.config.encoder_config();
    let (model, mut history) = if resume {
        let model: EncoderModel<f32> = read_checkpoint(need(cfg.artifact(CHECKPOINT), "train")?)?;
        if *model.config() != ecfg {
            bail!(Error::Contract("checkpoint architecture differs from the config".into()));
        }
        let loss = cfg.artifact(LOSS);
        let history = if loss.exists() {
            LossHistory::parse(&fs::read_to_string(&loss).with_context(|| loss.display().to_string())?)?
        } else {
            LossHistory::default()
        };
        (model, history)
    } else {
        (EncoderModel::init(&ecfg)?, LossHistory::default())
    };
    let first_epoch = history.epochs.last().map_or(1, |e| e.0 + 1);
    let trained = train(model, &seqs, &cfg.config.train, first_epoch)?;
    history.epochs.extend(trained.history.epochs.iter().copied());
    write_checkpoint(&trained.model, cfg.artifact(CHECKPOINT))?;
    fs::write(cfg.artifact(LOSS), history.to_text())?;

    let summary = json!({
        "sequences": seqs.len(),
        "parameters": trained.model.parameter_count(),
        "epochs": trained.history.epochs.len(),
        "first_loss": history.first(),
        "last_loss": history.last(),
    });
    finish(cfg, format!("{summary}\n"))
}

pub fn embed(cfg: &Loaded) -> Result<String> {
    let books = corpus(cfg)?;
    let sets = sentences(cfg, &books)?;
    let model: EncoderModel<f32> = read_checkpoint(need(cfg.artifact(CHECKPOINT), "train")?)?;
    let seqs = read_sequences(need(cfg.artifact(SEQUENCES), "train")?)?;
    let docs = embed_documents(&model, &seqs, &sets, cfg.config.embed.pooling)?;
    let records = docs.iter().map(|d| d.to_set()).collect::<multibert::Result<Vec<_>>>()?;
    write_embeddings(&records, cfg.artifact(DOCUMENTS))?;
    let summary = json!({
        "documents": docs.len(),
        "dim": docs.first().map(|d| d.dim()),
        "encoder_dim": model.config().hidden_size,
    });
    finish(cfg, format!("{summary}\n"))
}

fn document_index(cfg: &Loaded) -> Result<EmbeddingIndex<f32>> {
    let sets: Vec<SentenceEmbeddingSet<f32>> = read_embeddings(need(cfg.artifact(DOCUMENTS), "embed")?)?;
    Ok(EmbeddingIndex::from_sets(&sets)?)
}

fn with_clusters(cfg: &Loaded, index: &mut EmbeddingIndex<f32>, mode: RetrievalMode) -> Result<()> {
    if mode == RetrievalMode::Cluster {
        let r = &cfg.config.retrieval;
        let k = r.n_clusters.unwrap_or_else(|| (index.len() as f64).sqrt().ceil() as usize);
        index.build_cluster_index(KMeansParams {
            k,
            seed: r.seed,
            ..cfg.config.kmeans()
        })?;
    }
    Ok(())
}

pub fn recommend(cfg: &Loaded, book_id: &str, k: usize, mode: Option<RetrievalMode>) -> Result<String> {
    if k == 0 {
        bail!(Error::Contract("k must be at least 1".into()));
    }
    let mode = mode.unwrap_or(cfg.config.retrieval.mode);
    let titles: BTreeMap<String, String> = corpus(cfg)?.into_iter().map(|b| (b.book_id, b.title)).collect();
    let mut index = document_index(cfg)?;
    if index.position(book_id).is_none() {
        let why = if titles.contains_key(book_id) { "has no embedding" } else { "is not in the corpus" };
        bail!(Error::NotFound(format!("book {book_id} {why}")));
    }
    with_clusters(cfg, &mut index, mode)?;
    Ok(format_results(&index.retrieve(mode, book_id, k)?, Some(&titles)))
}

pub fn evaluate(cfg: &Loaded) -> Result<String> {
    let c = &cfg.config;
    let books = corpus(cfg)?;
    let mut index = document_index(cfg)?;
    with_clusters(cfg, &mut index, c.retrieval.mode)?;

    let baseline = match &c.paths.document_baseline {
        Some(p) => {
            let p = cfg.resolve(p);
            cfg.require(&[&p])?;
            let sets: Vec<SentenceEmbeddingSet<f32>> = read_embeddings(&p)?;
            let wanted: std::collections::HashSet<&String> = index.ids().iter().collect();
            EmbeddingIndex::from_sets(&sets.into_iter().filter(|s| wanted.contains(&s.book_id)).collect::<Vec<_>>())?
        }
        None => baseline_sentence_mean(&sentences(cfg, &books)?)?,
    };

    let by_id: HashMap<&str, &BookRecord> = books.iter().map(|b| (b.book_id.as_str(), b)).collect();
    let texts: Vec<String> = index
        .ids()
        .iter()
        .map(|id| by_id.get(id.as_str()).map(|b| b.retrieval_text(c.corpus.include_reviews)).unwrap_or_default())
        .collect();
    let tfidf = TfidfIndex::build(index.ids().to_vec(), &texts)?;

    let multi = IndexRanker { index: &index, mode: c.retrieval.mode };
    let sbert = IndexRanker { index: &baseline, mode: RetrievalMode::Cosine };
    let models: [(&str, &dyn Ranker); 3] = [(MODEL_NAMES[0], &multi), (MODEL_NAMES[1], &sbert), (MODEL_NAMES[2], &tfidf)];
    let report = run_benchmark(&books, &models, &c.relevance(), &c.evaluate.ks)?;

    let table = report.table();
    fs::write(cfg.artifact(REPORT), &table)?;
    fs::write(cfg.artifact(DETAILS), report.details_jsonl())?;
    let models_json: BTreeMap<&str, BTreeMap<String, f64>> = report
        .models
        .iter()
        .map(|m| (m.name.as_str(), m.precision.iter().map(|(k, p)| (format!("P@{k}"), *p)).collect()))
        .collect();
    let summary = json!({
        "books": report.summary.books,
        "queries": report.summary.queries,
        "genres": report.summary.genres,
        "retrieval_mode": c.retrieval.mode,
        "rule": c.evaluate.rule,
        "threshold": c.evaluate.threshold,
        "precision": models_json,
    });
    fs::write(cfg.artifact(REPORT_JSON), format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    finish(cfg, table)
}

/// ingest → build-codebook → train → embed → evaluate.
pub fn run_all(cfg: &Loaded) -> Result<String> {
    let mut out = String::new();
    for (name, stage) in [
        ("ingest", ingest as fn(&Loaded) -> Result<String>),
        ("build-codebook", build_codebook),
        ("train", |c: &Loaded| train_encoder(c, false)),
        ("embed", embed),
        ("evaluate", evaluate),
    ] {
        let text = stage(cfg).with_context(|| format!("stage {name} failed"))?;
        writeln!(out, "# {name}")?;
        out.push_str(&text);
    }
    Ok(out)
}
