//! Run configuration: one TOML file plus `--set key=value` overrides.
//!
//! Reference hyperparameters are the defaults where they exist (k = 200,
//! 12 heads, 6 layers, batch 16, learning rate 1e-4, 512 positions, relevance
//! threshold 0.4). Everything else is an artifact default and says so below.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use multibert::codebook::{KMeansParams, DEFAULT_K, DEFAULT_MAX_ITER, DEFAULT_TOL};
use multibert::corpus::{Defaults, GenreConfig};
use multibert::docvec::Pooling;
use multibert::embedstore::{SyntheticEmbedder, SyntheticMode, DEFAULT_GENRE_NOISE};
use multibert::encoder::{EncoderConfig, TrainConfig};
use multibert::evaluate::{RatioRule, RelevanceConfig, DEFAULT_KS};
use multibert::retrieval::RetrievalMode;
use multibert::sequencer::DEFAULT_MAX_POSITIONS;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub books: PathBuf,
    /// Optional; no reviews when absent.
    pub reviews: Option<PathBuf>,
    /// Sentence embeddings in the SEMB format. When absent, synthetic
    /// embeddings are generated into the run directory.
    pub embeddings: Option<PathBuf>,
    /// One-vector-per-book SEMB file used as the SBERT baseline instead of
    /// pooled sentence vectors.
    pub document_baseline: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            books: PathBuf::from("books.jsonl"),
            reviews: None,
            embeddings: None,
            document_baseline: None,
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Artifact default: description only.
    pub include_reviews: bool,
    pub genre_vocabulary: Vec<String>,
    /// Artifact default: 1.
    pub genre_min_count: u64,
    pub default_description: Option<String>,
    pub default_language_code: Option<String>,
    pub default_average_rating: Option<f64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = Defaults::standard();
        CorpusSection {
            include_reviews: false,
            genre_vocabulary: Vec::new(),
            genre_min_count: 1,
            default_description: d.description,
            default_language_code: d.language_code,
            default_average_rating: d.average_rating,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    Plain,
    GenreCorrelated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    /// Artifact default: on, so a run needs no external model.
    pub enabled: bool,
    pub mode: SyntheticKind,
    pub dim: usize,
    pub seed: u64,
    pub noise: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            enabled: true,
            mode: SyntheticKind::Plain,
            dim: 64,
            seed: 0,
            noise: DEFAULT_GENRE_NOISE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookSection {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: i64,
}

impl Default for CodebookSection {
    fn default() -> Self {
        CodebookSection {
            k: DEFAULT_K,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Artifact default: 4 × hidden_size.
    pub ffn_size: Option<usize>,
    pub max_positions: usize,
    pub dropout: f32,
    pub seed: u32,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            hidden_size: 768,
            n_layers: 6,
            n_heads: 12,
            ffn_size: None,
            max_positions: DEFAULT_MAX_POSITIONS,
            dropout: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub pooling: Pooling,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection { pooling: Pooling::Mean }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub mode: RetrievalMode,
    /// Artifact default: ⌈√n⌉.
    pub n_clusters: Option<usize>,
    pub seed: i64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            mode: RetrievalMode::Cosine,
            n_clusters: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub threshold: f64,
    pub rule: RatioRule,
    pub ks: Vec<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            threshold: 0.4,
            rule: RatioRule::QueryFraction,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusSection,
    pub synthetic: SyntheticSection,
    pub codebook: CodebookSection,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub embed: EmbedSection,
    pub retrieval: RetrievalSection,
    pub evaluate: EvaluateSection,
}

/// A config with paths resolved against the directory of its file.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .with_context(|| format!("override {raw:?} is not key=value"))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key.trim().split('.').map(str::to_string).collect(), parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().context("empty override key")?;
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override path segment {p} is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        apply_override(&mut table, &path, value)?;
    }
    let config: RunConfig = toml::Value::Table(table).try_into().context("config does not match the schema")?;
    Ok(config)
}

pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let config = parse(&text, overrides)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, base })
}

impl Loaded {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.run_dir)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.run_dir().join(name)
    }

    /// Fails unless every path exists.
    pub fn require(&self, paths: &[&Path]) -> Result<()> {
        for p in paths {
            if !p.exists() {
                bail!("required input {} does not exist", p.display());
            }
        }
        Ok(())
    }
}

impl RunConfig {
    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn defaults(&self) -> Defaults {
        Defaults {
            description: self.corpus.default_description.clone(),
            language_code: self.corpus.default_language_code.clone(),
            average_rating: self.corpus.default_average_rating,
        }
    }

    pub fn genre_config(&self) -> GenreConfig {
        GenreConfig::new(self.corpus.genre_vocabulary.clone(), self.corpus.genre_min_count)
    }

    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams {
            k: self.codebook.k,
            max_iter: self.codebook.max_iter,
            tol: self.codebook.tol,
            seed: self.codebook.seed,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let e = &self.encoder;
        EncoderConfig {
            vocab_size: self.codebook.k + 4,
            hidden_size: e.hidden_size,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            ffn_size: e.ffn_size.unwrap_or(4 * e.hidden_size),
            max_positions: e.max_positions,
            dropout: e.dropout,
            seed: e.seed,
        }
    }

    pub fn embedder(&self) -> SyntheticEmbedder {
        let s = &self.synthetic;
        SyntheticEmbedder {
            dim: s.dim,
            seed: s.seed,
            mode: match s.mode {
                SyntheticKind::Plain => SyntheticMode::Plain,
                SyntheticKind::GenreCorrelated => SyntheticMode::GenreCorrelated { noise: s.noise },
            },
        }
    }

    pub fn relevance(&self) -> RelevanceConfig {
        RelevanceConfig {
            threshold: self.evaluate.threshold,
            vocabulary: self.genre_config().vocabulary,
            rule: self.evaluate.rule,
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
